#include "panoptes/sensorbus.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fmt/format.h>
#include <thread>

namespace panoptes::bus {

int FrameSet::valid_count() const {
  return static_cast<int>(std::count_if(slots.begin(), slots.end(), [](const FrameSlot& s) { return s.valid; }));
}

struct SensorBus::Buffer {
  std::atomic<std::uint64_t> seq{0};  // odd while being written
  std::atomic<std::int64_t> timestamp_us{0};
  std::atomic<int> width{0};
  std::atomic<int> height{0};
  std::unique_ptr<std::atomic<std::uint64_t>[]> words;
};

struct SensorBus::Slot {
  Buffer buffers[2];
  std::atomic<int> current{-1};  // -1 until the first publish
  std::atomic<std::uint64_t> publishes{0};
  std::atomic_flag writing = ATOMIC_FLAG_INIT;
  std::atomic<std::uint64_t> waits{0};
};

SensorBus::SensorBus(int num_cameras, int max_width, int max_height) {
  if (num_cameras <= 0 || max_width <= 0 || max_height <= 0) throw InvalidInput("sensor bus: bad dimensions");
  const std::size_t bytes = 3u * static_cast<std::size_t>(max_width) * static_cast<std::size_t>(max_height);
  capacity_words_ = (bytes + 7) / 8;
  for (int c = 0; c < num_cameras; ++c) {
    auto slot = std::make_unique<Slot>();
    for (auto& b : slot->buffers) {
      b.words.reset(new std::atomic<std::uint64_t>[capacity_words_]);
      for (std::size_t i = 0; i < capacity_words_; ++i) b.words[i].store(0, std::memory_order_relaxed);
    }
    slots_.push_back(std::move(slot));
  }
}

SensorBus::~SensorBus() = default;

void SensorBus::publish_frame(int cam_id, const Image& image, std::int64_t timestamp_us) {
  if (cam_id < 0 || cam_id >= num_cameras()) throw InvalidInput(fmt::format("camera id {} out of range", cam_id));
  if (!image.valid()) throw InvalidInput("publish of an invalid image");
  const std::size_t nbytes = image.rgb.size();
  if ((nbytes + 7) / 8 > capacity_words_) throw InvalidInput("image exceeds sensor bus capacity");

  Slot& slot = *slots_[static_cast<std::size_t>(cam_id)];
  while (slot.writing.test_and_set(std::memory_order_acquire)) {
    slot.waits.fetch_add(1, std::memory_order_relaxed);
    std::this_thread::yield();
  }

  const int cur = slot.current.load(std::memory_order_relaxed);
  Buffer& b = slot.buffers[cur == 0 ? 1 : 0];
  const std::uint64_t s = b.seq.load(std::memory_order_relaxed);
  b.seq.store(s + 1, std::memory_order_relaxed);
  std::atomic_thread_fence(std::memory_order_release);
  b.timestamp_us.store(timestamp_us, std::memory_order_relaxed);
  b.width.store(image.width, std::memory_order_relaxed);
  b.height.store(image.height, std::memory_order_relaxed);
  const std::uint8_t* src = image.rgb.data();
  for (std::size_t w = 0; w * 8 < nbytes; ++w) {
    std::uint64_t v = 0;
    std::memcpy(&v, src + w * 8, std::min<std::size_t>(8, nbytes - w * 8));
    b.words[w].store(v, std::memory_order_relaxed);
  }
  b.seq.store(s + 2, std::memory_order_release);
  slot.current.store(cur == 0 ? 1 : 0, std::memory_order_release);
  slot.publishes.fetch_add(1, std::memory_order_relaxed);
  slot.writing.clear(std::memory_order_release);
}

FrameSet SensorBus::snapshot_latest() const {
  FrameSet out;
  out.slots.resize(slots_.size());
  for (std::size_t c = 0; c < slots_.size(); ++c) {
    const Slot& slot = *slots_[c];
    FrameSlot& fs = out.slots[c];
    for (;;) {
      const int cur = slot.current.load(std::memory_order_acquire);
      if (cur < 0) break;
      const Buffer& b = slot.buffers[cur];
      const std::uint64_t s1 = b.seq.load(std::memory_order_acquire);
      if (s1 & 1u) continue;
      const std::int64_t ts = b.timestamp_us.load(std::memory_order_relaxed);
      const int w = b.width.load(std::memory_order_relaxed);
      const int h = b.height.load(std::memory_order_relaxed);
      Image img;
      img.width = w;
      img.height = h;
      const std::size_t nbytes = 3u * static_cast<std::size_t>(std::max(w, 0)) * static_cast<std::size_t>(std::max(h, 0));
      if ((nbytes + 7) / 8 > capacity_words_) continue;
      img.rgb.resize(nbytes);
      for (std::size_t i = 0; i * 8 < nbytes; ++i) {
        const std::uint64_t v = b.words[i].load(std::memory_order_relaxed);
        std::memcpy(img.rgb.data() + i * 8, &v, std::min<std::size_t>(8, nbytes - i * 8));
      }
      std::atomic_thread_fence(std::memory_order_acquire);
      if (b.seq.load(std::memory_order_relaxed) != s1) continue;
      fs.image = std::move(img);
      fs.timestamp_us = ts;
      fs.valid = true;
      break;
    }
  }
  return out;
}

std::uint64_t SensorBus::publish_waits(int cam_id) const {
  if (cam_id < 0 || cam_id >= num_cameras()) throw InvalidInput(fmt::format("camera id {} out of range", cam_id));
  return slots_[static_cast<std::size_t>(cam_id)]->waits.load(std::memory_order_relaxed);
}

std::uint64_t SensorBus::publish_count(int cam_id) const {
  if (cam_id < 0 || cam_id >= num_cameras()) throw InvalidInput(fmt::format("camera id {} out of range", cam_id));
  return slots_[static_cast<std::size_t>(cam_id)]->publishes.load(std::memory_order_relaxed);
}

void FaultModel::validate() const {
  auto prob = [](double p) { return std::isfinite(p) && p >= 0.0 && p <= 1.0; };
  if (!prob(dropout_p) || !prob(latency_p)) throw InvalidInput("fault probabilities must lie in [0, 1]");
  if (!std::isfinite(max_delay_s) || max_delay_s < 0) throw InvalidInput("max delay must be >= 0");
}

void to_json(nlohmann::json& j, const FaultModel& f) {
  j = {{"dropout_p", f.dropout_p},
       {"latency_p", f.latency_p},
       {"max_delay_s", f.max_delay_s},
       {"seed", f.seed},
       {"stale_on_dropout", f.stale_on_dropout}};
}

void from_json(const nlohmann::json& j, FaultModel& f) {
  if (!j.is_object()) throw InvalidInput("fault model must be an object");
  for (const auto& [k, v] : j.items()) {
    if (k != "dropout_p" && k != "latency_p" && k != "max_delay_s" && k != "seed" && k != "stale_on_dropout")
      throw InvalidInput("unknown fault model key: " + k);
  }
  const FaultModel d;
  f.dropout_p = j.value("dropout_p", d.dropout_p);
  f.latency_p = j.value("latency_p", d.latency_p);
  f.max_delay_s = j.value("max_delay_s", d.max_delay_s);
  f.seed = j.value("seed", d.seed);
  f.stale_on_dropout = j.value("stale_on_dropout", d.stale_on_dropout);
  f.validate();
}

double prob_any_dropped(double p, int n) { return 1.0 - std::pow(1.0 - p, n); }

namespace {

struct Draw {
  bool drop;
  bool delay;
  std::int64_t delay_us;
};

Draw draw(const FaultModel& fm, std::int64_t tick, int cam) {
  Rng rng(Rng::mix(fm.seed, static_cast<std::uint64_t>(tick), static_cast<std::uint64_t>(cam)));
  Draw d{};
  d.drop = rng.uniform() < fm.dropout_p;
  d.delay = rng.uniform() < fm.latency_p;
  const double u = rng.uniform();
  d.delay_us = d.delay ? static_cast<std::int64_t>(std::llround(u * fm.max_delay_s * 1e6)) : 0;
  return d;
}

}  // namespace

FaultInjector::FaultInjector(FaultModel fm) : fm_(fm) { fm_.validate(); }

FrameSet FaultInjector::apply(const FrameSet& frames, std::int64_t tick) {
  const std::size_t n = frames.slots.size();
  if (history_.size() != n) {
    history_.assign(n, {});
    last_delivered_.assign(n, {});
  }
  const auto keep_us = static_cast<std::int64_t>(std::ceil(fm_.max_delay_s * 1e6)) + 200000;

  FrameSet out;
  out.slots.resize(n);
  for (std::size_t c = 0; c < n; ++c) {
    const FrameSlot& in = frames.slots[c];
    auto& hist = history_[c];
    const Draw d = draw(fm_, tick, static_cast<int>(c));
    FrameSlot slot = in;
    slot.injected_delay_us = 0;

    if (d.delay && in.valid) {
      slot.injected_delay_us = d.delay_us;
      const std::int64_t want = in.timestamp_us - d.delay_us;
      if (in.timestamp_us > want) {
        // Newest stored frame at or before the requested time; the oldest
        // stored frame when history does not reach back that far.
        auto it = std::find_if(hist.rbegin(), hist.rend(), [&](const FrameSlot& h) { return h.timestamp_us <= want; });
        if (it != hist.rend()) {
          slot = *it;
        } else if (!hist.empty()) {
          slot = hist.front();
        } else {
          slot = FrameSlot{};
        }
        slot.injected_delay_us = d.delay_us;
      }
      log_.push_back({tick, static_cast<int>(c), FaultEvent::kLatency, d.delay_us});
    }
    if (d.drop) {
      const std::int64_t delay = slot.injected_delay_us;
      if (fm_.stale_on_dropout) {
        slot = last_delivered_[c];
      } else {
        slot = FrameSlot{};
      }
      slot.injected_delay_us = delay;
      log_.push_back({tick, static_cast<int>(c), FaultEvent::kDropout, 0});
    }

    if (in.valid && (hist.empty() || hist.back().timestamp_us < in.timestamp_us)) {
      FrameSlot h = in;
      h.injected_delay_us = 0;
      hist.push_back(std::move(h));
      while (!hist.empty() && hist.front().timestamp_us < in.timestamp_us - keep_us) hist.pop_front();
    }
    if (slot.valid) last_delivered_[c] = slot;
    out.slots[c] = std::move(slot);
  }
  return out;
}

void FaultInjector::write_log_csv(std::ostream& out, const std::vector<FaultEvent>& events) {
  out << "tick,cam_id,event,delay_us\n";
  for (const auto& e : events) {
    out << e.tick << ',' << e.cam_id << ',' << (e.kind == FaultEvent::kDropout ? "dropout" : "latency") << ','
        << e.delay_us << '\n';
  }
}

FrameSet apply_faults(const FrameSet& frames, const FaultModel& fm, std::int64_t tick) {
  FaultInjector inj(fm);
  return inj.apply(frames, tick);
}

}  // namespace panoptes::bus
