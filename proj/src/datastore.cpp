#include "panoptes/datastore.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstring>
#include <ctime>
#include <map>
#include <numeric>
#include <thread>

namespace panoptes::data {

namespace {

template <typename U>
void put_le(std::string& buf, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& buf, float f) { put_le(buf, std::bit_cast<std::uint32_t>(f)); }

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return v;
}

float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_le<std::uint32_t>(p)); }

std::vector<std::uint8_t> read_all(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return {};
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

constexpr std::size_t kFrameHeaderBytes = 8 + 1 + 2 + 2 + 1;

}  // namespace

void to_json(nlohmann::json& j, const EpisodeMeta& m) {
  j = {{"format_version", kFormatVersion},
       {"id", m.id},
       {"seed", m.seed},
       {"config_hash", m.config_hash},
       {"start_time", m.start_time},
       {"rates", {{"control_hz", m.control_hz}, {"record_hz", m.record_hz}}},
       {"num_cameras", m.num_cameras},
       {"camera_set", m.camera_set},
       {"complete", m.complete},
       {"steps", m.steps},
       {"extra", m.extra}};
}

void from_json(const nlohmann::json& j, EpisodeMeta& m) {
  const int version = j.value("format_version", 0);
  if (version != kFormatVersion) throw DatasetError(fmt::format("unsupported episode format version {}", version));
  m.id = j.at("id").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config_hash = j.value("config_hash", "");
  m.start_time = j.value("start_time", "");
  m.control_hz = j.at("rates").at("control_hz").get<int>();
  m.record_hz = j.at("rates").at("record_hz").get<int>();
  m.num_cameras = j.value("num_cameras", kNumCameras);
  m.camera_set = j.value("camera_set", "body");
  m.complete = j.at("complete").get<bool>();
  m.steps = j.value("steps", std::size_t{0});
  m.extra = j.value("extra", nlohmann::json::object());
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ------------------------------------------------------------------ writer

EpisodeWriter::EpisodeWriter(const fs::path& dir, EpisodeMeta meta) : dir_(dir), meta_(std::move(meta)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw DatasetError(fmt::format("cannot create {}: {}", dir_.string(), ec.message()));
  if (fs::exists(dir_ / "meta.json")) throw DatasetError("episode already exists: " + dir_.string());
  meta_.complete = false;
  meta_.steps = 0;
  if (meta_.start_time.empty()) meta_.start_time = utc_timestamp();
  states_.open(dir_ / "states.bin", std::ios::binary | std::ios::trunc);
  frames_.open(dir_ / "frames.bin", std::ios::binary | std::ios::trunc);
  if (!states_ || !frames_) throw DatasetError("cannot open episode files in " + dir_.string());
  write_meta();
}

EpisodeWriter::~EpisodeWriter() {
  // An unclosed writer leaves the episode flagged incomplete.
}

void EpisodeWriter::write_meta() {
  const fs::path tmp = dir_ / "meta.json.tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    f << nlohmann::json(meta_).dump(2) << "\n";
    f.flush();
    if (!f) throw DatasetError("cannot write meta.json in " + dir_.string());
  }
  std::error_code ec;
  fs::rename(tmp, dir_ / "meta.json", ec);
  if (ec) throw DatasetError("cannot write meta.json: " + ec.message());
}

void EpisodeWriter::fail(const std::string& why) {
  closed_ = true;
  meta_.complete = false;
  meta_.extra["error"] = why;
  try {
    write_meta();
  } catch (const Error&) {
  }
  throw DatasetError(fmt::format("recording aborted after {} steps: {}", meta_.steps, why));
}

void EpisodeWriter::append(std::uint64_t t_us, const bus::FrameSet& frames, const JointArray& follower,
                           const JointArray& leader) {
  if (closed_) throw DatasetError("append to a closed episode");
  if (meta_.steps > 0 && t_us <= last_t_) throw DatasetError(fmt::format("timestamp {} not after {}", t_us, last_t_));
  if (static_cast<int>(frames.slots.size()) != meta_.num_cameras)
    throw DatasetError(fmt::format("frame set has {} cameras, episode records {}", frames.slots.size(),
                                   meta_.num_cameras));
  std::string fb;
  for (std::size_t c = 0; c < frames.slots.size(); ++c) {
    const auto& s = frames.slots[c];
    const bool valid = s.valid && s.image && s.image->valid();
    put_le<std::uint64_t>(fb, t_us);
    fb.push_back(static_cast<char>(c));
    put_le<std::uint16_t>(fb, valid ? static_cast<std::uint16_t>(s.image->width) : 0);
    put_le<std::uint16_t>(fb, valid ? static_cast<std::uint16_t>(s.image->height) : 0);
    fb.push_back(valid ? 1 : 0);
    if (valid) fb.append(reinterpret_cast<const char*>(s.image->rgb.data()), s.image->rgb.size());
  }
  std::string sb;
  put_le<std::uint64_t>(sb, t_us);
  for (float v : follower) put_f32(sb, v);
  for (float v : leader) put_f32(sb, v);

  // Frames first: a state record marks its step as fully written.
  frames_.write(fb.data(), static_cast<std::streamsize>(fb.size()));
  frames_.flush();
  if (!frames_) fail("frame write failed (disk full?)");
  states_.write(sb.data(), static_cast<std::streamsize>(sb.size()));
  states_.flush();
  if (!states_) fail("state write failed (disk full?)");
  last_t_ = t_us;
  ++meta_.steps;
}

void EpisodeWriter::close() {
  if (closed_) return;
  closed_ = true;
  states_.close();
  frames_.close();
  meta_.complete = true;
  write_meta();
}

// ------------------------------------------------------------------ loader

Episode load_episode(const fs::path& dir, bool with_frames) {
  Episode ep;
  ep.dir = dir;
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw DatasetError("no meta.json in " + dir.string());
  try {
    ep.meta = nlohmann::json::parse(mf).get<EpisodeMeta>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(fmt::format("corrupt meta.json in {}: {}", dir.string(), e.what()));
  }
  const auto sbytes = read_all(dir / "states.bin");
  const std::size_t nstates = sbytes.size() / kStateRecordBytes;
  bool partial = sbytes.size() % kStateRecordBytes != 0;

  // Frames: count complete per-step groups; parse payloads only if asked.
  const auto fbytes = read_all(dir / "frames.bin");
  std::vector<std::vector<FrameRecord>> groups;
  std::size_t off = 0, frames_in_group = 0;
  const std::size_t nc = static_cast<std::size_t>(ep.meta.num_cameras);
  std::vector<FrameRecord> cur;
  std::vector<std::uint64_t> group_t;
  while (off + kFrameHeaderBytes <= fbytes.size()) {
    const std::uint8_t* p = fbytes.data() + off;
    FrameRecord r;
    r.t_us = get_le<std::uint64_t>(p);
    r.cam_id = p[8];
    r.width = get_le<std::uint16_t>(p + 9);
    r.height = get_le<std::uint16_t>(p + 11);
    r.valid = p[13] != 0;
    const std::size_t payload = r.valid ? 3u * r.width * r.height : 0;
    if (off + kFrameHeaderBytes + payload > fbytes.size()) {
      partial = true;
      break;
    }
    if (with_frames && payload) r.rgb.assign(p + kFrameHeaderBytes, p + kFrameHeaderBytes + payload);
    off += kFrameHeaderBytes + payload;
    if (r.cam_id != frames_in_group) throw DatasetError(fmt::format("frames.bin out of order in {}", dir.string()));
    const std::uint64_t t = r.t_us;
    if (with_frames) cur.push_back(std::move(r));
    if (++frames_in_group == nc) {
      group_t.push_back(t);
      if (with_frames) groups.push_back(std::move(cur));
      cur.clear();
      frames_in_group = 0;
    }
  }
  if (off != fbytes.size() || frames_in_group != 0) partial = true;

  const std::size_t n = std::min(nstates, group_t.size());
  if (nstates != group_t.size()) partial = true;
  ep.steps.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* p = sbytes.data() + i * kStateRecordBytes;
    StepRecord s;
    s.t_us = get_le<std::uint64_t>(p);
    for (int j = 0; j < kNumJoints; ++j) s.follower[j] = get_f32(p + 8 + 4 * j);
    for (int j = 0; j < kNumJoints; ++j) s.leader[j] = get_f32(p + 8 + 4 * (kNumJoints + j));
    if (s.t_us != group_t[i]) throw DatasetError(fmt::format("step {} timestamps disagree in {}", i, dir.string()));
    if (i > 0 && s.t_us <= ep.steps.back().t_us)
      throw DatasetError(fmt::format("non-increasing timestamps in {}", dir.string()));
    ep.steps.push_back(s);
  }
  if (with_frames) {
    groups.resize(n);
    ep.frames = std::move(groups);
  }
  ep.truncated = partial || !ep.meta.complete;
  return ep;
}

std::vector<fs::path> list_episodes(const fs::path& root) {
  if (!fs::is_directory(root)) throw DatasetError("not a directory: " + root.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

bus::FrameSet to_frame_set(const std::vector<FrameRecord>& frames) {
  bus::FrameSet fs;
  for (const auto& r : frames) {
    bus::FrameSlot s;
    s.timestamp_us = static_cast<std::int64_t>(r.t_us);
    s.valid = r.valid;
    if (r.valid) {
      render::Image img;
      img.width = r.width;
      img.height = r.height;
      img.rgb = r.rgb;
      s.image = std::move(img);
    }
    fs.slots.push_back(std::move(s));
  }
  return fs;
}

// ------------------------------------------------------------------ windows

std::size_t window_count(std::size_t steps, int pred_horizon) {
  const auto tp = static_cast<std::size_t>(pred_horizon);
  return steps > tp ? steps - tp : 0;
}

std::vector<WindowRef> make_windows(const std::vector<std::size_t>& episode_steps, int pred_horizon) {
  std::vector<WindowRef> out;
  for (std::size_t e = 0; e < episode_steps.size(); ++e)
    for (std::size_t t = 0; t < window_count(episode_steps[e], pred_horizon); ++t)
      out.push_back({static_cast<int>(e), static_cast<int>(t)});
  return out;
}

std::vector<int> obs_indices(int t, int obs_horizon) {
  std::vector<int> out;
  for (int i = obs_horizon - 1; i >= 0; --i) out.push_back(std::max(0, t - i));
  return out;
}

std::vector<int> action_indices(int t, int pred_horizon) {
  std::vector<int> out(static_cast<std::size_t>(pred_horizon));
  std::iota(out.begin(), out.end(), t + 1);
  return out;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

// ------------------------------------------------------------------ stats

float NormStats::normalize(float v, int j) const {
  const auto k = static_cast<std::size_t>(j);
  return 2.0f * (v - min[k]) / (max[k] - min[k]) - 1.0f;
}

float NormStats::denormalize(float x, int j) const {
  const auto k = static_cast<std::size_t>(j);
  return min[k] + 0.5f * (x + 1.0f) * (max[k] - min[k]);
}

void to_json(nlohmann::json& j, const NormStats& s) { j = {{"action_min", s.min}, {"action_max", s.max}}; }

NormStats compute_norm_stats(const std::vector<Episode>& episodes, float widen) {
  NormStats s;
  s.min.fill(std::numeric_limits<float>::infinity());
  s.max.fill(-std::numeric_limits<float>::infinity());
  std::size_t count = 0;
  for (const auto& ep : episodes)
    for (const auto& st : ep.steps) {
      ++count;
      for (std::size_t j = 0; j < kNumJoints; ++j) {
        s.min[j] = std::min(s.min[j], st.leader[j]);
        s.max[j] = std::max(s.max[j], st.leader[j]);
      }
    }
  if (count == 0) throw DatasetError("norm stats of an empty dataset");
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    if (s.min[j] < s.max[j]) continue;
    if (widen <= 0.0f) throw DatasetError(fmt::format("joint {} has a degenerate range [{}, {}]", j, s.min[j], s.max[j]));
    s.min[j] -= widen;
    s.max[j] += widen;
  }
  return s;
}

// ------------------------------------------------------------------ replay

std::size_t replay(const Episode& ep, const ReplaySink& sink, bool paced) {
  static const std::vector<FrameRecord> kNoFrames;
  const auto start = std::chrono::steady_clock::now();
  std::size_t n = 0;
  for (std::size_t i = 0; i < ep.steps.size(); ++i) {
    if (paced) {
      const auto offset = std::chrono::microseconds(ep.steps[i].t_us - ep.steps.front().t_us);
      std::this_thread::sleep_until(start + offset);
    }
    sink(ep.steps[i], i < ep.frames.size() ? ep.frames[i] : kNoFrames);
    ++n;
  }
  return n;
}

}  // namespace panoptes::data
