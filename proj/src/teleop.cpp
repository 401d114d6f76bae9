#include "panoptes/teleop.hpp"

#include <fmt/format.h>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/core/detail/base64.hpp>
#include <boost/beast/websocket.hpp>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <mutex>
#include <thread>

namespace panoptes::teleop {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

void ServerConfig::validate() const {
  if (control_hz <= 0 || frame_hz <= 0) throw InvalidInput("server rates must be positive");
  if (frame_hz > control_hz) throw InvalidInput("frame rate must not exceed the control rate");
  if (control_hz % frame_hz != 0) throw InvalidInput("control rate must be a multiple of the frame rate");
  if (frame_scale < 1) throw InvalidInput("frame_scale must be >= 1");
  if (max_pending_frames < 1) throw InvalidInput("max_pending_frames must be >= 1");
}

void to_json(nlohmann::json& j, const ServerConfig& c) {
  j = {{"address", c.address},         {"port", c.port},
       {"control_hz", c.control_hz},   {"frame_hz", c.frame_hz},
       {"frame_scale", c.frame_scale}, {"record_dir", c.record_dir},
       {"max_pending_frames", c.max_pending_frames}};
}

void from_json(const nlohmann::json& j, ServerConfig& c) {
  nlohmann::json defaults;
  to_json(defaults, ServerConfig{});
  for (const auto& [k, v] : j.items())
    if (!defaults.contains(k)) throw InvalidInput("unknown server key: " + k);
  const ServerConfig d;
  c.address = j.value("address", d.address);
  c.port = j.value("port", d.port);
  c.control_hz = j.value("control_hz", d.control_hz);
  c.frame_hz = j.value("frame_hz", d.frame_hz);
  c.frame_scale = j.value("frame_scale", d.frame_scale);
  c.record_dir = j.value("record_dir", d.record_dir);
  c.max_pending_frames = j.value("max_pending_frames", d.max_pending_frames);
  c.validate();
}

// ------------------------------------------------------------------ wire format

Inbound parse_inbound(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(fmt::format("malformed JSON: {}", e.what()));
  }
  if (!j.is_object()) throw InvalidInput("message must be a JSON object");
  if (!j.contains("type") || !j["type"].is_string()) throw InvalidInput("type: missing or not a string");
  const std::string type = j["type"];
  if (type == "joint_cmd") {
    JointCmd c;
    if (!j.contains("seq") || !j["seq"].is_number_unsigned()) throw InvalidInput("seq: missing or not an unsigned integer");
    c.seq = j["seq"].get<std::uint64_t>();
    if (!j.contains("targets") || !j["targets"].is_array()) throw InvalidInput("targets: missing or not an array");
    const auto& t = j["targets"];
    if (t.size() != kNumJoints)
      throw InvalidInput(fmt::format("targets: expected {} values, got {}", kNumJoints, t.size()));
    for (std::size_t i = 0; i < kNumJoints; ++i) {
      if (!t[i].is_number()) throw InvalidInput(fmt::format("targets[{}]: not a number", i));
      c.targets[i] = t[i].get<double>();
      if (!std::isfinite(c.targets[i])) throw InvalidInput(fmt::format("targets[{}]: not finite", i));
    }
    return c;
  }
  if (type == "record") {
    if (!j.contains("action") || !j["action"].is_string()) throw InvalidInput("action: missing or not a string");
    const std::string a = j["action"];
    if (a != "start" && a != "stop") throw InvalidInput("action: must be start or stop");
    return RecordCmd{a == "start"};
  }
  if (type == "reset") {
    if (!j.contains("seed") || !j["seed"].is_number_unsigned()) throw InvalidInput("seed: missing or not an unsigned integer");
    return ResetCmd{j["seed"].get<std::uint64_t>()};
  }
  throw InvalidInput("type: unknown message type " + type);
}

nlohmann::json state_message(const sim::WorldState& s, std::int64_t t_us, std::uint64_t last_seq, bool recording) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects)
    objs.push_back({{"id", o.id}, {"x", o.position.x()}, {"y", o.position.y()}, {"r", o.radius}, {"toppled", o.toppled}});
  return {{"type", "state"},
          {"t_us", t_us},
          {"joints", s.joints.angles},
          {"targets", s.targets.angles},
          {"objects", objs},
          {"metric", sim::success_metric(s)},
          {"seq", last_seq},
          {"recording", recording}};
}

nlohmann::json frames_message(std::int64_t t_us, const bus::FrameSet& frames, int scale) {
  nlohmann::json cams = nlohmann::json::array();
  for (std::size_t c = 0; c < frames.slots.size(); ++c) {
    const auto& s = frames.slots[c];
    if (!s.valid || !s.image) {
      cams.push_back({{"id", c}, {"w", 0}, {"h", 0}, {"valid", false}, {"data", ""}});
      continue;
    }
    const auto& img = *s.image;
    const int w = img.width / scale, h = img.height / scale;
    std::vector<std::uint8_t> px;
    px.reserve(static_cast<std::size_t>(3 * w * h));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int k = 0; k < 3; ++k)
          px.push_back(img.rgb[static_cast<std::size_t>(3 * ((y * scale) * img.width + x * scale) + k)]);
    cams.push_back({{"id", c}, {"w", w}, {"h", h}, {"valid", true}, {"data", base64_encode(px)}});
  }
  return {{"type", "frames"}, {"t_us", t_us}, {"cams", cams}};
}

nlohmann::json ack_message(std::optional<std::uint64_t> seq, const std::string& msg) {
  nlohmann::json j = {{"type", "ack"}, {"msg", msg}};
  if (seq) j["seq"] = *seq;
  return j;
}

nlohmann::json error_message(std::optional<std::uint64_t> seq, const std::string& msg) {
  nlohmann::json j = {{"type", "error"}, {"msg", msg}};
  if (seq) j["seq"] = *seq;
  return j;
}

nlohmann::json apply_command(const JointCmd& cmd, std::uint64_t& last_seq, std::optional<kin::JointVector>& accepted) {
  accepted.reset();
  if (last_seq != 0 && cmd.seq <= last_seq)
    return ack_message(cmd.seq, fmt::format("stale: seq {} <= last seen {}", cmd.seq, last_seq));
  const auto c = kin::clamp_joints(cmd.targets);
  last_seq = cmd.seq;
  accepted = c.joints;
  return ack_message(cmd.seq, c.clamped ? "clamped" : "ok");
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  namespace b64 = beast::detail::base64;
  std::string out(b64::encoded_size(bytes.size()), '\0');
  out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  namespace b64 = beast::detail::base64;
  std::vector<std::uint8_t> out(b64::decoded_size(text.size()));
  const auto [written, read] = b64::decode(out.data(), text.data(), text.size());
  // The decoder stops at padding without counting it as read.
  if (text.find_first_not_of('=', read) != std::string_view::npos) throw InvalidInput("invalid base64");
  out.resize(written);
  return out;
}

std::filesystem::path default_record_dir(const std::string& configured) {
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("PANOPTES_DATA_DIR"); env && *env) return env;
  return "data";
}

// ------------------------------------------------------------------ server

namespace {

class Session;

struct Command {
  enum Kind { kTarget, kRecord, kReset } kind;
  kin::JointVector targets;
  std::uint64_t seq = 0;
  bool start = false;
  std::uint64_t seed = 0;
  std::weak_ptr<Session> from;
};

class CommandQueue {
 public:
  void push(Command c) {
    std::lock_guard lk(m_);
    q_.push_back(std::move(c));
  }
  std::deque<Command> drain() {
    std::lock_guard lk(m_);
    std::deque<Command> out;
    out.swap(q_);
    return out;
  }

 private:
  std::mutex m_;
  std::deque<Command> q_;
};

// One client. All members are touched only on the io thread.
class Session : public std::enable_shared_from_this<Session> {
 public:
  Session(tcp::socket socket, CommandQueue& commands, std::size_t max_frames)
      : ws_(std::move(socket)), commands_(commands), max_frames_(max_frames) {}

  void run() {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept([self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->open_ = true;
      self->read();
    });
  }

  void send_reply(std::string msg) {
    replies_.push_back(std::move(msg));
    pump();
  }
  void send_state(std::shared_ptr<const std::string> msg) {
    state_ = std::move(msg);  // latest wins
    pump();
  }
  void send_frames(std::shared_ptr<const std::string> msg) {
    frames_.push_back(std::move(msg));
    while (frames_.size() > max_frames_) frames_.pop_front();  // drop oldest
    pump();
  }
  void close() {
    if (!open_) return;
    open_ = false;
    beast::error_code ec;
    ws_.next_layer().socket().close(ec);
  }
  bool open() const { return open_; }

 private:
  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->open_ = false;
        return;
      }
      const std::string text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      self->handle(text);
      self->read();
    });
  }

  void handle(const std::string& text) {
    Inbound in;
    try {
      in = parse_inbound(text);
    } catch (const InvalidInput& e) {
      send_reply(error_message(std::nullopt, e.what()).dump());
      return;
    }
    if (auto* jc = std::get_if<JointCmd>(&in)) {
      std::optional<kin::JointVector> accepted;
      const auto reply = apply_command(*jc, last_seq_, accepted);
      if (accepted) commands_.push({Command::kTarget, *accepted, jc->seq, false, 0, {}});
      send_reply(reply.dump());
    } else if (auto* rc = std::get_if<RecordCmd>(&in)) {
      commands_.push({Command::kRecord, {}, 0, rc->start, 0, weak_from_this()});
    } else if (auto* rs = std::get_if<ResetCmd>(&in)) {
      commands_.push({Command::kReset, {}, 0, false, rs->seed, weak_from_this()});
    }
  }

  void pump() {
    if (writing_ || !open_) return;
    std::shared_ptr<const std::string> next;
    if (!replies_.empty()) {
      next = std::make_shared<const std::string>(std::move(replies_.front()));
      replies_.pop_front();
    } else if (state_) {
      next = std::move(state_);
      state_.reset();
    } else if (!frames_.empty()) {
      next = std::move(frames_.front());
      frames_.pop_front();
    } else {
      return;
    }
    writing_ = true;
    ws_.text(true);
    ws_.async_write(net::buffer(*next), [self = shared_from_this(), next](beast::error_code ec, std::size_t) {
      self->writing_ = false;
      if (ec) {
        self->open_ = false;
        return;
      }
      self->pump();
    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  CommandQueue& commands_;
  std::size_t max_frames_;
  std::uint64_t last_seq_ = 0;
  bool open_ = false;
  bool writing_ = false;
  std::deque<std::string> replies_;
  std::shared_ptr<const std::string> state_;
  std::deque<std::shared_ptr<const std::string>> frames_;
};

}  // namespace

struct TeleopServer::Impl {
  ServerConfig cfg;
  pol::EnvConfig env_cfg;
  std::uint64_t seed;
  net::io_context io{1};
  tcp::acceptor acceptor{io};
  std::thread io_thread, sim_thread;
  std::atomic<bool> running{false};
  std::atomic<std::int64_t> ticks{0};
  CommandQueue commands;
  std::vector<std::weak_ptr<Session>> sessions;  // io thread only
  mutable std::mutex episode_mutex;
  std::optional<std::filesystem::path> last_episode;
  std::mutex wait_mutex;
  std::condition_variable wait_cv;

  void accept() {
    acceptor.async_accept(net::make_strand(io), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      auto s = std::make_shared<Session>(std::move(socket), commands, cfg.max_pending_frames);
      sessions.push_back(s);
      s->run();
      accept();
    });
  }

  template <typename F>
  void for_each_session(F f) {
    net::post(io, [this, f] {
      std::erase_if(sessions, [](const std::weak_ptr<Session>& w) { return w.expired(); });
      for (auto& w : sessions)
        if (auto s = w.lock(); s && s->open()) f(*s);
    });
  }

  void reply_to(const std::weak_ptr<Session>& w, nlohmann::json msg) {
    net::post(io, [w, m = msg.dump()] {
      if (auto s = w.lock()) s->send_reply(m);
    });
  }

  std::filesystem::path next_episode_dir() const {
    const auto root = default_record_dir(cfg.record_dir);
    for (int i = 0;; ++i) {
      auto p = root / fmt::format("teleop_{:04d}", i);
      if (!std::filesystem::exists(p)) return p;
    }
  }

  void sim_loop() {
    auto env = std::make_unique<pol::SimEnv>(env_cfg, seed);
    kin::JointVector standing = env->state().joints;
    std::uint64_t last_seq = 0;
    std::unique_ptr<data::EpisodeWriter> writer;
    const int per_frame = cfg.control_hz / cfg.frame_hz;
    const auto period = std::chrono::nanoseconds(1000000000LL / cfg.control_hz);
    auto next = std::chrono::steady_clock::now();

    auto stop_recording = [&]() -> std::string {
      if (!writer) return "not recording";
      writer->close();
      const auto dir = writer->dir();
      const auto n = writer->steps();
      writer.reset();
      {
        std::lock_guard lk(episode_mutex);
        last_episode = dir;
      }
      return fmt::format("recording stopped: {} ({} steps)", dir.string(), n);
    };

    while (running) {
      for (auto& c : commands.drain()) {
        switch (c.kind) {
          case Command::kTarget:
            standing = c.targets;
            last_seq = c.seq;
            break;
          case Command::kRecord:
            if (c.start) {
              if (writer) {
                reply_to(c.from, error_message(std::nullopt, "already recording"));
                break;
              }
              try {
                data::EpisodeMeta meta;
                const auto dir = next_episode_dir();
                meta.id = dir.filename().string();
                meta.seed = env->config().scene.seed;
                meta.control_hz = cfg.control_hz;
                meta.record_hz = cfg.frame_hz;
                meta.num_cameras = env_cfg.num_cameras();
                meta.camera_set = env_cfg.camera_set;
                writer = std::make_unique<data::EpisodeWriter>(dir, meta);
                reply_to(c.from, ack_message(std::nullopt, "recording started: " + dir.string()));
              } catch (const Error& e) {
                reply_to(c.from, error_message(std::nullopt, e.what()));
              }
            } else {
              reply_to(c.from, ack_message(std::nullopt, stop_recording()));
            }
            break;
          case Command::kReset:
            stop_recording();
            env = std::make_unique<pol::SimEnv>(env_cfg, c.seed);
            standing = env->state().joints;
            reply_to(c.from, ack_message(std::nullopt, fmt::format("reset to seed {}", c.seed)));
            break;
        }
      }

      const std::int64_t t = ticks.load();
      if (t % per_frame == 0) {
        const auto frames = env->observe();
        if (writer) {
          std::array<float, kNumJoints> f{}, l{};
          for (std::size_t j = 0; j < kNumJoints; ++j) {
            f[j] = static_cast<float>(env->state().joints[j]);
            l[j] = static_cast<float>(standing[j]);
          }
          try {
            writer->append(static_cast<std::uint64_t>(env->time_us()), frames, f, l);
          } catch (const DatasetError&) {
            writer.reset();
          }
        }
        auto fm = std::make_shared<const std::string>(frames_message(env->time_us(), frames, cfg.frame_scale).dump());
        for_each_session([fm](Session& s) { s.send_frames(fm); });
      }
      env->tick(standing);
      ticks.store(t + 1);
      auto sm = std::make_shared<const std::string>(
          state_message(env->state(), env->time_us(), last_seq, writer != nullptr).dump());
      for_each_session([sm](Session& s) { s.send_state(sm); });

      next += period;
      const auto now = std::chrono::steady_clock::now();
      if (now > next + 10 * period) next = now;  // fell far behind: resync
      std::this_thread::sleep_until(next);
    }
    stop_recording();
  }
};

TeleopServer::TeleopServer(ServerConfig cfg, pol::EnvConfig env, std::uint64_t scene_seed)
    : impl_(std::make_unique<Impl>()) {
  cfg.validate();
  env.control_hz = cfg.control_hz;
  env.record_hz = cfg.frame_hz;
  env.validate();
  impl_->cfg = std::move(cfg);
  impl_->env_cfg = std::move(env);
  impl_->seed = scene_seed;
}

TeleopServer::~TeleopServer() { stop(); }

void TeleopServer::start() {
  auto& d = *impl_;
  if (d.running) return;
  beast::error_code ec;
  const auto addr = net::ip::make_address(d.cfg.address, ec);
  if (ec) throw Error(fmt::format("bad listen address {}: {}", d.cfg.address, ec.message()));
  const tcp::endpoint ep(addr, d.cfg.port);
  d.acceptor.open(ep.protocol(), ec);
  if (!ec) d.acceptor.set_option(net::socket_base::reuse_address(true), ec);
  if (!ec) d.acceptor.bind(ep, ec);
  if (!ec) d.acceptor.listen(net::socket_base::max_listen_connections, ec);
  if (ec) throw Error(fmt::format("cannot bind {}:{}: {}", d.cfg.address, d.cfg.port, ec.message()));
  d.running = true;
  d.accept();
  d.io_thread = std::thread([&d] {
    auto guard = net::make_work_guard(d.io);
    d.io.run();
  });
  d.sim_thread = std::thread([&d] { d.sim_loop(); });
}

void TeleopServer::stop() {
  auto& d = *impl_;
  if (!d.running.exchange(false)) return;
  if (d.sim_thread.joinable()) d.sim_thread.join();
  net::post(d.io, [&d] {
    beast::error_code ec;
    d.acceptor.close(ec);
    for (auto& w : d.sessions)
      if (auto s = w.lock()) s->close();
  });
  d.io.stop();
  if (d.io_thread.joinable()) d.io_thread.join();
  d.wait_cv.notify_all();
}

void TeleopServer::wait() {
  std::unique_lock lk(impl_->wait_mutex);
  impl_->wait_cv.wait(lk, [this] { return !impl_->running.load(); });
}

std::uint16_t TeleopServer::port() const {
  beast::error_code ec;
  const auto ep = impl_->acceptor.local_endpoint(ec);
  return ec ? 0 : ep.port();
}

std::int64_t TeleopServer::ticks() const { return impl_->ticks.load(); }

std::optional<std::filesystem::path> TeleopServer::last_episode() const {
  std::lock_guard lk(impl_->episode_mutex);
  return impl_->last_episode;
}

}  // namespace panoptes::teleop
