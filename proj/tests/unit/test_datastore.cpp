#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <thread>

#include "panoptes/datastore.hpp"

using namespace panoptes;
using namespace panoptes::data;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("panoptes_ds_" + name);
  fs::remove_all(d);
  return d;
}

bus::FrameSet frames_for(int step, int cams = kNumCameras) {
  bus::FrameSet fs;
  fs.slots.resize(static_cast<std::size_t>(cams));
  for (int c = 0; c < cams; ++c) {
    auto& s = fs.slots[static_cast<std::size_t>(c)];
    // Every seventh frame missing, to exercise invalid records.
    if ((step + c) % 7 == 0) continue;
    s.image = render::Image(4, 3, {static_cast<std::uint8_t>(step), static_cast<std::uint8_t>(c), 9});
    s.valid = true;
    s.timestamp_us = step * 100000;
  }
  return fs;
}

JointArray joints_for(int step, float offset) {
  JointArray a;
  for (int j = 0; j < kNumJoints; ++j) a[static_cast<std::size_t>(j)] = offset + static_cast<float>(step + j) / 64.0f;  // exact in f32
  return a;
}

EpisodeMeta meta_for(std::uint64_t seed) {
  EpisodeMeta m;
  m.id = "ep_test";
  m.seed = seed;
  m.config_hash = "abc123";
  m.start_time = utc_timestamp();
  return m;
}

void write_steps(EpisodeWriter& w, int from, int to) {
  for (int i = from; i < to; ++i)
    w.append(static_cast<std::uint64_t>(i) * 100000, frames_for(i), joints_for(i, 0.f), joints_for(i, 0.5f));
}

}  // namespace

TEST_CASE("recording at 10 Hz for 10 s gives 100 steps" * doctest::timeout(30)) {
  const auto dir = fresh_dir("paced");
  EpisodeWriter w(dir, meta_for(1));
  const auto start = std::chrono::steady_clock::now();
  const auto period = std::chrono::milliseconds(100);
  int i = 0;
  while (std::chrono::steady_clock::now() - start < std::chrono::seconds(10)) {
    const auto t = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - start);
    w.append(static_cast<std::uint64_t>(t.count()), frames_for(i), joints_for(i, 0.f), joints_for(i, 0.5f));
    ++i;
    std::this_thread::sleep_until(start + period * i);
  }
  w.close();
  const auto ep = load_episode(dir);
  CHECK(std::abs(static_cast<long>(ep.steps.size()) - 100) <= 2);
  fs::remove_all(dir);
}

TEST_CASE("episode round trip") {
  const auto dir = fresh_dir("roundtrip");
  {
    EpisodeWriter w(dir, meta_for(7));
    write_steps(w, 0, 30);
    CHECK_THROWS_AS(w.append(100, frames_for(0), joints_for(0, 0), joints_for(0, 0)), DatasetError);
    w.close();
    w.close();
  }
  const auto ep = load_episode(dir);
  CHECK_FALSE(ep.truncated);
  CHECK(ep.meta.complete);
  CHECK(ep.meta.seed == 7);
  CHECK(ep.meta.config_hash == "abc123");
  CHECK(ep.meta.steps == 30);
  REQUIRE(ep.steps.size() == 30);
  REQUIRE(ep.frames.size() == 30);
  for (int i = 0; i < 30; ++i) {
    const auto& s = ep.steps[static_cast<std::size_t>(i)];
    CHECK(s.t_us == static_cast<std::uint64_t>(i) * 100000);
    CHECK(s.follower == joints_for(i, 0.f));
    CHECK(s.leader == joints_for(i, 0.5f));
    const auto in = frames_for(i);
    const auto back = to_frame_set(ep.frames[static_cast<std::size_t>(i)]);
    REQUIRE(back.slots.size() == in.slots.size());
    for (std::size_t c = 0; c < in.slots.size(); ++c) {
      CHECK(back.slots[c].valid == in.slots[c].valid);
      if (in.slots[c].valid) CHECK(*back.slots[c].image == *in.slots[c].image);
    }
  }
  const auto lean = load_episode(dir, false);
  CHECK(lean.steps == ep.steps);
  CHECK(lean.frames.empty());
  fs::remove_all(dir);
}

TEST_CASE("a crash mid-write leaves earlier steps readable") {
  const auto dir = fresh_dir("crash");
  const auto copy = fresh_dir("crash_copy");
  {
    EpisodeWriter w(dir, meta_for(3));
    write_steps(w, 0, 12);
    // Snapshot the files as a killed process would leave them.
    fs::copy(dir, copy);
    w.close();
  }
  auto ep = load_episode(copy);
  CHECK(ep.truncated);
  CHECK(ep.steps.size() == 12);

  // Half-written trailing frame record.
  const auto frames = copy / "frames.bin";
  fs::resize_file(frames, fs::file_size(frames) - 5);
  ep = load_episode(copy);
  CHECK(ep.truncated);
  CHECK(ep.steps.size() == 11);
  CHECK(ep.frames.size() == 11);

  // Half-written state record.
  const auto states = copy / "states.bin";
  fs::resize_file(states, 10 * kStateRecordBytes + 3);
  ep = load_episode(copy);
  CHECK(ep.steps.size() == 10);
  fs::remove_all(dir);
  fs::remove_all(copy);

  CHECK_THROWS_AS(load_episode(fresh_dir("missing")), DatasetError);
}

TEST_CASE("windows") {
  CHECK(window_count(100, 16) == 84);
  CHECK(window_count(16, 16) == 0);
  CHECK(window_count(3, 16) == 0);
  const auto w = make_windows({100, 20}, 16);
  CHECK(w.size() == 88);
  CHECK(w[84] == WindowRef{1, 0});
  CHECK(obs_indices(0, 2) == std::vector<int>{0, 0});
  CHECK(obs_indices(5, 2) == std::vector<int>{4, 5});
  const auto a = action_indices(5, 16);
  CHECK(a.front() == 6);
  CHECK(a.back() == 21);
  CHECK(a.size() == 16);

  const auto o1 = shuffled_order(50, 9), o2 = shuffled_order(50, 9), o3 = shuffled_order(50, 10);
  CHECK(o1 == o2);
  CHECK(o1 != o3);
  auto sorted = o1;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
}

TEST_CASE("normalisation statistics") {
  Episode ep;
  for (int i = 0; i < 5; ++i) {
    StepRecord s;
    s.leader = joints_for(i, 0.f);
    s.leader[8] = 0.2f;  // constant joint
    ep.steps.push_back(s);
  }
  CHECK_THROWS_AS(compute_norm_stats({ep}), DatasetError);
  const auto st = compute_norm_stats({ep}, 0.1f);
  CHECK(st.min[0] == doctest::Approx(0.0f));
  CHECK(st.max[0] == doctest::Approx(0.0625f));
  CHECK(st.min[8] == doctest::Approx(0.1f));
  CHECK(st.max[8] == doctest::Approx(0.3f));
  for (float v : {0.0f, 0.03f, 0.0625f}) CHECK(st.denormalize(st.normalize(v, 0), 0) == doctest::Approx(v));
  CHECK(st.normalize(0.0f, 0) == doctest::Approx(-1.0f));
  CHECK(st.normalize(0.0625f, 0) == doctest::Approx(1.0f));
}

TEST_CASE("replay emits identical streams") {
  const auto dir = fresh_dir("replay");
  {
    EpisodeWriter w(dir, meta_for(5));
    write_steps(w, 0, 15);
    w.close();
  }
  const auto ep = load_episode(dir);
  auto capture = [&] {
    std::vector<StepRecord> steps;
    std::vector<std::vector<FrameRecord>> frames;
    const auto n = replay(ep, [&](const StepRecord& s, const std::vector<FrameRecord>& f) {
      steps.push_back(s);
      frames.push_back(f);
    });
    CHECK(n == 15);
    return std::make_pair(steps, frames);
  };
  const auto a = capture(), b = capture();
  CHECK(a == b);
  CHECK(a.first == ep.steps);
  fs::remove_all(dir);
}
