#include <doctest.h>

#include <atomic>
#include <cmath>
#include <chrono>
#include <thread>

#include "panoptes/sensorbus.hpp"

using namespace panoptes;
using namespace panoptes::bus;

namespace {

render::Image tagged(int w, int h, std::uint8_t v) { return render::Image(w, h, {v, static_cast<std::uint8_t>(v + 1), 7}); }

FrameSet frames_at(std::int64_t t_us, int n = kNumCameras) {
  FrameSet fs;
  fs.slots.resize(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) {
    auto& s = fs.slots[static_cast<std::size_t>(c)];
    s.image = tagged(4, 4, static_cast<std::uint8_t>(t_us / 1000 + c));
    s.timestamp_us = t_us;
    s.valid = true;
  }
  return fs;
}

}  // namespace

TEST_CASE("publish and snapshot") {
  SensorBus bus(kNumCameras, 8, 8);
  auto snap = bus.snapshot_latest();
  REQUIRE(snap.slots.size() == kNumCameras);
  CHECK(snap.valid_count() == 0);

  const auto img = tagged(8, 8, 42);
  bus.publish_frame(3, img, 1000);
  snap = bus.snapshot_latest();
  CHECK(snap.valid_count() == 1);
  CHECK(snap.slots[3].valid);
  CHECK(*snap.slots[3].image == img);
  CHECK(snap.slots[3].timestamp_us == 1000);

  bus.publish_frame(3, tagged(6, 5, 9), 2000);
  snap = bus.snapshot_latest();
  CHECK(*snap.slots[3].image == tagged(6, 5, 9));
  CHECK(snap.slots[3].timestamp_us == 2000);
  CHECK(bus.publish_count(3) == 2);

  for (int c = 0; c < kNumCameras; ++c) bus.publish_frame(c, img, 3000);
  CHECK(bus.snapshot_latest().valid_count() == kNumCameras);

  CHECK_THROWS_AS(bus.publish_frame(21, img, 1), InvalidInput);
  CHECK_THROWS_AS(bus.publish_frame(-1, img, 1), InvalidInput);
  CHECK_THROWS_AS(bus.publish_frame(0, tagged(16, 16, 1), 1), InvalidInput);
}

TEST_CASE("concurrent producers: nothing lost, timestamps monotone" * doctest::timeout(60)) {
  SensorBus bus(kNumCameras, 16, 16);
  constexpr int kFrames = 60;
  std::vector<std::thread> producers;
  for (int c = 0; c < kNumCameras; ++c)
    producers.emplace_back([&, c] {
      for (int f = 1; f <= kFrames; ++f) {
        bus.publish_frame(c, tagged(16, 16, static_cast<std::uint8_t>(f)), f);
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
      }
    });
  std::atomic<bool> done{false};
  bool monotone = true, consistent = true;
  std::thread reader([&] {
    std::vector<std::int64_t> last(kNumCameras, 0);
    while (!done) {
      const auto snap = bus.snapshot_latest();
      for (int c = 0; c < kNumCameras; ++c) {
        const auto& s = snap.slots[static_cast<std::size_t>(c)];
        if (!s.valid) continue;
        monotone = monotone && s.timestamp_us >= last[static_cast<std::size_t>(c)];
        last[static_cast<std::size_t>(c)] = s.timestamp_us;
        consistent = consistent && *s.image == tagged(16, 16, static_cast<std::uint8_t>(s.timestamp_us));
      }
    }
  });
  for (auto& t : producers) t.join();
  done = true;
  reader.join();
  CHECK(monotone);
  CHECK(consistent);
  for (int c = 0; c < kNumCameras; ++c) {
    CHECK(bus.publish_count(c) == kFrames);
    CHECK(bus.publish_waits(c) == 0);
  }
  const auto snap = bus.snapshot_latest();
  for (const auto& s : snap.slots) CHECK(s.timestamp_us == kFrames);
}

TEST_CASE("fault injection") {
  SUBCASE("no faults: output equals input") {
    const auto in = frames_at(5000);
    const auto out = apply_faults(in, FaultModel::none(), 17);
    for (std::size_t c = 0; c < in.slots.size(); ++c) {
      CHECK(out.slots[c].valid);
      CHECK(*out.slots[c].image == *in.slots[c].image);
      CHECK(out.slots[c].timestamp_us == in.slots[c].timestamp_us);
      CHECK(out.slots[c].injected_delay_us == 0);
    }
  }

  SUBCASE("analytic blink probability") {
    CHECK(prob_any_dropped(0.05, 21) == 1.0 - std::pow(0.95, 21));
    CHECK(prob_any_dropped(0.05, 21) == doctest::Approx(0.659).epsilon(1e-3));
  }

  SUBCASE("dropout frequency") {
    FaultModel fm = FaultModel::none();
    fm.dropout_p = 0.05;
    fm.seed = 12;
    long any = 0, dropped = 0;
    const int ticks = 100000;
    for (int t = 0; t < ticks; ++t) {
      const auto out = apply_faults(frames_at(t * 100), fm, t);
      const int invalid = kNumCameras - out.valid_count();
      dropped += invalid;
      any += invalid > 0 ? 1 : 0;
    }
    CHECK(static_cast<double>(any) / ticks == doctest::Approx(0.659).epsilon(0.01 / 0.659));
    CHECK(static_cast<double>(dropped) / (ticks * 21.0) == doctest::Approx(0.05).epsilon(0.003 / 0.05));
  }

  SUBCASE("latency: mean delay, bounds, replayed frame age") {
    FaultModel fm = FaultModel::none();
    fm.latency_p = 0.10;
    fm.max_delay_s = 0.5;
    fm.seed = 3;
    FaultInjector inj(fm);
    double sum = 0;
    long n = 0;
    bool bounded = true, replay_ok = true;
    for (int t = 0; t < 100000; ++t) {
      const std::int64_t now = t * 33333LL;
      const auto out = inj.apply(frames_at(now), t);
      for (const auto& s : out.slots) {
        sum += static_cast<double>(s.injected_delay_us);
        ++n;
        bounded = bounded && s.injected_delay_us >= 0 && s.injected_delay_us <= 500000;
        // The replayed frame is the newest one at or before now - delay.
        if (s.injected_delay_us > 0 && s.valid && now > 600000)
          replay_ok = replay_ok && s.timestamp_us <= now - s.injected_delay_us &&
                      s.timestamp_us > now - s.injected_delay_us - 33333;
      }
      inj.clear_log();
    }
    CHECK(sum / n / 1000.0 == doctest::Approx(25.0).epsilon(1.0 / 25.0));
    CHECK(bounded);
    CHECK(replay_ok);
  }

  SUBCASE("deterministic given seed and tick") {
    FaultModel fm;
    fm.seed = 99;
    const auto a = apply_faults(frames_at(1000), fm, 5);
    const auto b = apply_faults(frames_at(1000), fm, 5);
    for (std::size_t c = 0; c < a.slots.size(); ++c) {
      CHECK(a.slots[c].valid == b.slots[c].valid);
      CHECK(a.slots[c].injected_delay_us == b.slots[c].injected_delay_us);
    }
    FaultInjector i1(fm), i2(fm);
    for (int t = 0; t < 200; ++t) {
      i1.apply(frames_at(t * 33333LL), t);
      i2.apply(frames_at(t * 33333LL), t);
    }
    REQUIRE(i1.log().size() == i2.log().size());
    for (std::size_t i = 0; i < i1.log().size(); ++i) {
      CHECK(i1.log()[i].tick == i2.log()[i].tick);
      CHECK(i1.log()[i].cam_id == i2.log()[i].cam_id);
      CHECK(i1.log()[i].delay_us == i2.log()[i].delay_us);
    }
  }

  SUBCASE("stale-buffer mode keeps the previous frame") {
    FaultModel fm = FaultModel::none();
    fm.dropout_p = 1.0;
    fm.stale_on_dropout = true;
    FaultInjector inj(fm);
    const auto first = inj.apply(frames_at(1000), 0);
    CHECK(first.valid_count() == 0);  // nothing delivered yet

    fm.dropout_p = 0.3;
    FaultInjector partial(fm);
    std::vector<std::int64_t> last(kNumCameras, -1);
    bool ok = true;
    int stale = 0;
    for (int t = 0; t < 50; ++t) {
      const auto out = partial.apply(frames_at(t * 1000), t);
      for (int c = 0; c < kNumCameras; ++c) {
        const auto& s = out.slots[static_cast<std::size_t>(c)];
        if (s.valid && s.timestamp_us != t * 1000) {
          ok = ok && s.timestamp_us == last[static_cast<std::size_t>(c)];
          ++stale;
        }
        if (s.valid) last[static_cast<std::size_t>(c)] = s.timestamp_us;
      }
    }
    CHECK(ok);
    CHECK(stale > 0);
  }

  SUBCASE("invalid probabilities are rejected") {
    FaultModel fm;
    fm.dropout_p = 1.5;
    CHECK_THROWS_AS(fm.validate(), InvalidInput);
    fm.dropout_p = 0.0;
    fm.max_delay_s = -1;
    CHECK_THROWS_AS(FaultInjector{fm}, InvalidInput);
  }
}
