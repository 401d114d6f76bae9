#include <doctest.h>

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <chrono>
#include <filesystem>
#include <thread>

#include "panoptes/datastore.hpp"
#include "panoptes/teleop.hpp"

using namespace panoptes;
using namespace panoptes::teleop;
namespace fs = std::filesystem;
namespace net = boost::asio;
namespace websocket = boost::beast::websocket;
using tcp = net::ip::tcp;

namespace {

std::string invalid_reason(const std::string& text) {
  try {
    parse_inbound(text);
  } catch (const InvalidInput& e) {
    return e.what();
  }
  return {};
}

class Client {
 public:
  explicit Client(std::uint16_t port) : ws_(ioc_) {
    tcp::resolver resolver(ioc_);
    net::connect(ws_.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    ws_.handshake("127.0.0.1", "/");
  }
  ~Client() {
    boost::beast::error_code ec;
    ws_.close(websocket::close_code::normal, ec);
  }

  void send(const std::string& text) { ws_.write(net::buffer(text)); }

  nlohmann::json read() {
    boost::beast::flat_buffer buf;
    ws_.read(buf);
    return nlohmann::json::parse(boost::beast::buffers_to_string(buf.data()));
  }

  /// Next message of the given type, skipping the state and frame stream.
  nlohmann::json next(const std::string& type, int max_messages = 2000) {
    for (int i = 0; i < max_messages; ++i) {
      auto j = read();
      if (j["type"] == type) return j;
      if (j["type"] == "error" && type != "error") return j;
    }
    throw std::runtime_error("no " + type + " message");
  }

 private:
  net::io_context ioc_;
  websocket::stream<tcp::socket> ws_;
};

std::string joint_cmd(std::uint64_t seq, double v) {
  nlohmann::json t = nlohmann::json::array();
  for (int i = 0; i < kNumJoints; ++i) t.push_back(v);
  return nlohmann::json{{"type", "joint_cmd"}, {"seq", seq}, {"targets", t}}.dump();
}

}  // namespace

TEST_CASE("inbound message validation") {
  const auto cmd = parse_inbound(joint_cmd(3, 0.1));
  REQUIRE(std::holds_alternative<JointCmd>(cmd));
  CHECK(std::get<JointCmd>(cmd).seq == 3);
  CHECK(std::get<JointCmd>(cmd).targets[8] == 0.1);

  CHECK(invalid_reason(R"({"type":"joint_cmd","seq":1,"targets":[0,0,0,0,0,0,0,0]})") ==
        "targets: expected 9 values, got 8");
  CHECK(invalid_reason(R"({"type":"joint_cmd","seq":-1,"targets":[0,0,0,0,0,0,0,0,0]})").rfind("seq", 0) == 0);
  CHECK(invalid_reason(R"({"type":"joint_cmd","seq":1,"targets":[0,0,0,0,"x",0,0,0,0]})").rfind("targets[4]", 0) == 0);
  CHECK(invalid_reason(R"({"type":"record","action":"pause"})").rfind("action", 0) == 0);
  CHECK(invalid_reason(R"({"type":"reset"})").rfind("seed", 0) == 0);
  CHECK(invalid_reason(R"({"type":"dance"})").rfind("type", 0) == 0);
  CHECK(invalid_reason("{not json").rfind("malformed", 0) == 0);
  CHECK(std::get<RecordCmd>(parse_inbound(R"({"type":"record","action":"start"})")).start);
  CHECK(std::get<ResetCmd>(parse_inbound(R"({"type":"reset","seed":7})")).seed == 7);
}

TEST_CASE("command filter") {
  std::uint64_t last = 0;
  std::optional<kin::JointVector> accepted;
  JointCmd c;
  c.seq = 7;
  c.targets.fill(0.2);
  CHECK(apply_command(c, last, accepted)["msg"] == "ok");
  CHECK(accepted.has_value());
  CHECK(last == 7);

  c.seq = 5;
  const auto stale = apply_command(c, last, accepted);
  CHECK(stale["msg"].get<std::string>().rfind("stale", 0) == 0);
  CHECK_FALSE(accepted.has_value());
  CHECK(last == 7);

  c.seq = 8;
  c.targets[2] = 2.5;
  CHECK(apply_command(c, last, accepted)["msg"] == "clamped");
  REQUIRE(accepted.has_value());
  CHECK((*accepted)[2] == doctest::Approx(kJointLimit));
  CHECK((*accepted)[0] == doctest::Approx(0.2));
}

TEST_CASE("outbound messages") {
  const std::vector<std::uint8_t> bytes{0, 1, 2, 250, 255, 17, 42};
  CHECK(base64_decode(base64_encode(bytes)) == bytes);
  CHECK(base64_encode({'M', 'a', 'n'}) == "TWFu");
  CHECK_THROWS_AS(base64_decode("@@@@"), InvalidInput);

  bus::FrameSet fs;
  fs.slots.resize(2);
  fs.slots[0].image = render::Image(4, 2, {10, 20, 30});
  fs.slots[0].valid = true;
  const auto m = frames_message(5, fs);
  CHECK(m["type"] == "frames");
  CHECK(m["cams"][0]["w"] == 4);
  CHECK(base64_decode(m["cams"][0]["data"].get<std::string>()) == fs.slots[0].image->rgb);
  CHECK(m["cams"][1]["valid"] == false);
  const auto half = frames_message(5, fs, 2);
  CHECK(half["cams"][0]["w"] == 2);
  CHECK(half["cams"][0]["h"] == 1);
}

TEST_CASE("live server" * doctest::timeout(120)) {
  const auto rec = fs::temp_directory_path() / "panoptes_teleop_test";
  fs::remove_all(rec);
  ServerConfig cfg;
  cfg.port = 0;
  cfg.record_dir = rec.string();
  pol::EnvConfig env;
  TeleopServer server(cfg, env, 3);
  server.start();
  REQUIRE(server.port() != 0);

  SUBCASE("control loop runs at 30 Hz") {
    const auto t0 = server.ticks();
    std::this_thread::sleep_for(std::chrono::seconds(3));
    const double rate = static_cast<double>(server.ticks() - t0) / 3.0;
    CHECK(std::abs(rate - 30.0) <= 1.5);
  }

  SUBCASE("commands, errors and reset over a WebSocket") {
    Client c(server.port());
    CHECK(c.next("state")["type"] == "state");

    c.send(joint_cmd(7, 0.3));
    CHECK(c.next("ack")["msg"] == "ok");
    c.send(joint_cmd(5, 0.0));
    CHECK(c.next("ack")["msg"].get<std::string>().rfind("stale", 0) == 0);

    c.send(R"({"type":"joint_cmd","seq":9,"targets":[0,0,0,0,0,0,0,0]})");
    const auto err = c.next("error");
    CHECK(err["type"] == "error");
    CHECK(err["msg"] == "targets: expected 9 values, got 8");
    c.send("garbage");
    CHECK(c.next("error")["type"] == "error");
    // The connection survives malformed input.
    c.send(joint_cmd(10, 3.0));
    CHECK(c.next("ack")["msg"] == "clamped");

    nlohmann::json st;
    for (int i = 0; i < 200; ++i) {
      st = c.next("state");
      if (std::abs(st["targets"][0].get<double>() - kJointLimit) < 1e-9) break;
    }
    CHECK(st["seq"] == 10);
    CHECK(st["targets"][0].get<double>() == doctest::Approx(kJointLimit));

    c.send(R"({"type":"reset","seed":7})");
    CHECK(c.next("ack")["msg"] == "reset to seed 7");
    const pol::SimEnv fresh(env, 7);
    const auto& objs = fresh.state().objects;
    st = c.next("state");
    REQUIRE(st["objects"].size() == objs.size());
    for (std::size_t i = 0; i < objs.size(); ++i) {
      CHECK(st["objects"][i]["x"].get<double>() == doctest::Approx(objs[i].position.x()).epsilon(1e-9));
      CHECK(st["objects"][i]["y"].get<double>() == doctest::Approx(objs[i].position.y()).epsilon(1e-9));
    }
  }

  SUBCASE("recording five seconds") {
    Client c(server.port());
    c.send(R"({"type":"record","action":"start"})");
    const auto started = c.next("ack");
    CHECK(started["msg"].get<std::string>().rfind("recording started", 0) == 0);
    const auto t0 = std::chrono::steady_clock::now();
    std::uint64_t seq = 1;
    while (std::chrono::steady_clock::now() - t0 < std::chrono::seconds(5)) {
      c.send(joint_cmd(seq++, 0.2));
      c.next("ack");
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    c.send(R"({"type":"record","action":"stop"})");
    CHECK(c.next("ack")["msg"].get<std::string>().rfind("recording stopped", 0) == 0);
    REQUIRE(server.last_episode().has_value());
    const auto ep = data::load_episode(*server.last_episode());
    CHECK(ep.meta.complete);
    CHECK(std::abs(static_cast<long>(ep.steps.size()) - 50) <= 2);
    CHECK(ep.steps.back().leader[0] == doctest::Approx(0.2f));
  }

  server.stop();
  fs::remove_all(rec);
}
