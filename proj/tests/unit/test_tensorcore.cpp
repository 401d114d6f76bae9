#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>

#include "panoptes/tensorcore.hpp"

using namespace panoptes;
using namespace panoptes::tc;
namespace fs = std::filesystem;

TEST_CASE("matmul values and shape errors") {
  Tensor<double> a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> b({3, 2}, {7, 8, 9, 10, 11, 12});
  const auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.values() == std::vector<double>{58, 64, 139, 154});

  try {
    matmul(a, c);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, {1, 2, 3}), DimensionError);
}

TEST_CASE("backward") {
  SUBCASE("simple chain") {
    Tensor<double> x({1, 2}, {3, -1}, true);
    Tensor<double> w({2, 1}, {2, 5}, true);
    auto y = sum(mul(matmul(x, w), matmul(x, w)));  // (3*2 - 5)^2 = 1
    CHECK(y.item() == doctest::Approx(1.0));
    y.backward();
    CHECK(w.grad() == std::vector<double>{2 * 1 * 3, 2 * 1 * -1});
    CHECK(x.grad() == std::vector<double>{2 * 1 * 2, 2 * 1 * 5});
  }

  SUBCASE("non-scalar root is rejected") {
    Tensor<double> x({2, 2}, {1, 2, 3, 4}, true);
    CHECK_THROWS(scale(x, 2.0).backward());
  }

  SUBCASE("repeated backward on the same graph is identical") {
    Rng rng(3);
    auto w = glorot<double>(4, 3, rng);
    Tensor<double> w_leaf(w.shape(), w.values(), true);
    Tensor<double> x({2, 4}, {0.1, 0.2, -0.3, 0.4, 1, -1, 0.5, 0.25});
    auto loss = mean(gelu(matmul(x, w_leaf)));
    loss.backward();
    const auto g1 = w_leaf.grad();
    w_leaf.zero_grad();
    loss.backward();
    CHECK(w_leaf.grad() == g1);
  }

  SUBCASE("softmax rows sum to one") {
    Tensor<double> x({2, 3}, {1, 2, 3, -5, 0, 5});
    const auto s = softmax(x);
    for (int r = 0; r < 2; ++r) {
      double t = 0;
      for (int c = 0; c < 3; ++c) t += s.values()[static_cast<std::size_t>(r * 3 + c)];
      CHECK(t == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("Adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParamSet<double> ps;
    ps.add("w", Tensor<double>({3}, {1, -2, 3}, true));
    Adam<double> opt(ps, {});
    for (int i = 0; i < 10; ++i) {
      ps.zero_grad();
      opt.step();
    }
    CHECK(ps.get("w").values() == std::vector<double>{1, -2, 3});
  }

  SUBCASE("constant gradient moves by lr * sign(g)") {
    ParamSet<double> ps;
    ps.add("w", Tensor<double>({2}, {0, 0}, true));
    AdamConfig cfg;
    cfg.lr = 0.01;
    Adam<double> opt(ps, cfg);
    for (int i = 0; i < 100; ++i) {
      ps.zero_grad();
      ps.get("w").grad() = {3.0, -0.5};
      opt.step();
    }
    CHECK(ps.get("w").values()[0] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(ps.get("w").values()[1] == doctest::Approx(1.0).epsilon(1e-6));
  }

  SUBCASE("quadratic bowl converges") {
    ParamSet<double> ps;
    ps.add("w", Tensor<double>({4}, {0.5, -0.3, 0.8, -1.0}, true));
    AdamConfig cfg;
    cfg.lr = 1e-2;
    Adam<double> opt(ps, cfg);
    for (int i = 0; i < 500; ++i) {
      ps.zero_grad();
      auto& w = ps.get("w");
      sum(mul(w, w)).backward();
      opt.step();
    }
    double n2 = 0;
    for (double v : ps.get("w").values()) n2 += v * v;
    CHECK(std::sqrt(n2) < 1e-3);
  }

  SUBCASE("non-finite gradient is skipped") {
    ParamSet<double> ps;
    ps.add("a", Tensor<double>({2}, {1, 1}, true));
    ps.add("b", Tensor<double>({2}, {1, 1}, true));
    Adam<double> opt(ps, {});
    ps.get("a").grad() = {std::numeric_limits<double>::quiet_NaN(), 1.0};
    ps.get("b").grad() = {1.0, 1.0};
    opt.step();
    CHECK(ps.get("a").values() == std::vector<double>{1, 1});
    CHECK(ps.get("b").values()[0] < 1.0);
    REQUIRE(opt.skipped().size() == 1);
    CHECK(opt.skipped()[0] == "a");
    CHECK(opt.state("a").t == 0);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto path = fs::temp_directory_path() / "panoptes_tc_ckpt.bin";
  Rng rng(11);
  ParamSet<float> a;
  a.add("layer.w", glorot<float>(5, 7, rng));
  a.add("layer.b", Tensor<float>::full({7}, 0.25f));
  save_checkpoint(path, a);

  ParamSet<float> b;
  b.add("layer.w", Tensor<float>::zeros({5, 7}));
  b.add("layer.b", Tensor<float>::zeros({7}));
  load_checkpoint(path, b);
  CHECK(b.get("layer.w").values() == a.get("layer.w").values());
  CHECK(b.get("layer.b").values() == a.get("layer.b").values());

  const auto entries = read_checkpoint(path);
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].name == "layer.w");
  CHECK(entries[0].shape == Shape{5, 7});

  ParamSet<float> wrong;
  wrong.add("layer.w", Tensor<float>::zeros({7, 5}));
  wrong.add("layer.b", Tensor<float>::zeros({7}));
  CHECK_THROWS_AS(load_checkpoint(path, wrong), CheckpointError);

  {
    std::ofstream(path, std::ios::binary) << "garbage";
  }
  CHECK_THROWS_AS(read_checkpoint(path), CheckpointError);
  fs::remove(path);
}
