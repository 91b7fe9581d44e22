#pragma once

// HTTP + WebSocket front end for GameEngine on Boost.Beast. One io_context on
// one thread owns every session and timer, so per-round work is serialized.
//
//   POST /api/rounds        {user_id, image_id?}          -> 201 RoundState (+ "ws" path)
//   GET  /api/rounds/{id}                                 -> RoundState
//   GET  /api/leaderboard                                 -> [{user_id, total, rounds, solved}]
//   GET  /api/maps/{image_id}                             -> 8-bit PNG scaled by its max
//   GET  /api/images/{image_id}                           -> PNG
//   POST /api/flags         {user_id, image_id, reason}   -> {image_id, count, reasons}
//   WS   /ws/rounds/{id}
//     client: {"type":"bubbles","events":[{"t_ms","x","y"}]}
//     server: {"type":"partner","top5":[...],"solved":b}  {"type":"end","status","score"}
//             {"type":"error","message"} for malformed input
//
// Errors are {"error": message} with 400, 404 or 409.

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <chrono>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <thread>

#include "gala/game.hpp"
#include "gala/png_io.hpp"
#include "json.hpp"

namespace gala {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

struct ServerOptions {
  std::string address = "127.0.0.1";
  unsigned short port = 8080;  // 0 picks a free port
};

class GameServer {
 public:
  GameServer(GameEngine& engine, PartnerClassifier& partner, ServerOptions opts = {})
      : engine_(engine), partner_(partner), opts_(std::move(opts)), acceptor_(ioc_) {
    const tcp::endpoint ep(net::ip::make_address(opts_.address), opts_.port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(net::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen();
    port_ = acceptor_.local_endpoint().port();
  }

  ~GameServer() { stop(); }
  GameServer(const GameServer&) = delete;
  GameServer& operator=(const GameServer&) = delete;

  unsigned short port() const { return port_; }

  /// Serves on a background thread.
  void start() {
    for (const auto& id : engine_.expire_rounds(GameEngine::system_ms())) finish_round(id);
    do_accept();
    thread_ = std::thread([this] { ioc_.run(); });
  }

  /// Serves on the calling thread until stop().
  void run() {
    for (const auto& id : engine_.expire_rounds(GameEngine::system_ms())) finish_round(id);
    do_accept();
    ioc_.run();
  }

  void stop() {
    ioc_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  class WsSession;

  struct RoundRuntime {
    std::chrono::steady_clock::time_point t0;
    std::unique_ptr<net::steady_timer> deadline, retick;
    std::weak_ptr<WsSession> session;
  };

  // ---------------------------------------------------------------- WebSocket

  class WsSession : public std::enable_shared_from_this<WsSession> {
   public:
    WsSession(GameServer& server, tcp::socket socket, std::string round_id)
        : server_(server), ws_(std::move(socket)), round_id_(std::move(round_id)) {}

    void start(http::request<http::string_body> req) {
      ws_.async_accept(req, [self = shared_from_this()](beast::error_code ec) {
        if (ec) return;
        self->server_.attach(self->round_id_, self);
        self->read();
      });
    }

    void send(const nlohmann::json& msg) {
      queue_.push_back(msg.dump());
      if (queue_.size() == 1) write_next();
    }

    void close_after_writes() {
      closing_ = true;
      if (queue_.empty()) do_close();
    }

   private:
    void read() {
      ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
        if (ec) return;
        const std::string text = beast::buffers_to_string(self->buffer_.data());
        self->buffer_.consume(self->buffer_.size());
        self->server_.on_message(self->round_id_, *self, text);
        if (!self->closing_) self->read();
      });
    }

    void write_next() {
      ws_.text(true);
      ws_.async_write(net::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
        self->queue_.pop_front();
        if (ec) return;
        if (!self->queue_.empty()) {
          self->write_next();
        } else if (self->closing_) {
          self->do_close();
        }
      });
    }

    void do_close() {
      ws_.async_close(websocket::close_code::normal, [self = shared_from_this()](beast::error_code) {});
    }

    GameServer& server_;
    websocket::stream<beast::tcp_stream> ws_;
    beast::flat_buffer buffer_;
    std::string round_id_;
    std::deque<std::string> queue_;
    bool closing_ = false;
  };

  // --------------------------------------------------------------------- HTTP

  class HttpSession : public std::enable_shared_from_this<HttpSession> {
   public:
    HttpSession(GameServer& server, tcp::socket socket) : server_(server), stream_(std::move(socket)) {}

    void read() {
      req_ = {};
      stream_.expires_after(std::chrono::seconds(30));
      http::async_read(stream_, buffer_, req_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
        if (ec) return;
        self->on_request();
      });
    }

   private:
    void on_request() {
      const std::string target(req_.target());
      if (websocket::is_upgrade(req_)) {
        const std::string prefix = "/ws/rounds/";
        if (target.rfind(prefix, 0) == 0) {
          const std::string round_id = target.substr(prefix.size());
          stream_.expires_never();
          std::make_shared<WsSession>(server_, stream_.release_socket(), round_id)->start(std::move(req_));
          return;
        }
      }
      auto res = std::make_shared<http::response<http::string_body>>(server_.handle(req_));
      res->keep_alive(req_.keep_alive());
      res->prepare_payload();
      http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code ec, std::size_t) {
        if (ec) return;
        if (res->need_eof()) {
          beast::error_code ignored;
          self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
          return;
        }
        self->read();
      });
    }

    GameServer& server_;
    beast::tcp_stream stream_;
    beast::flat_buffer buffer_;
    http::request<http::string_body> req_;
  };

  void do_accept() {
    acceptor_.async_accept(net::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      std::make_shared<HttpSession>(*this, std::move(socket))->read();
      do_accept();
    });
  }

  using Response = http::response<http::string_body>;

  static Response json_response(http::status status, const nlohmann::json& body, unsigned version) {
    Response res{status, version};
    res.set(http::field::content_type, "application/json");
    res.body() = body.dump();
    return res;
  }

  static Response png_response(std::string bytes, unsigned version) {
    Response res{http::status::ok, version};
    res.set(http::field::content_type, "image/png");
    res.body() = std::move(bytes);
    return res;
  }

  static http::status status_of(const GameError& e) {
    switch (e.kind()) {
      case GameError::Kind::not_found: return http::status::not_found;
      case GameError::Kind::conflict: return http::status::conflict;
      default: return http::status::bad_request;
    }
  }

  Response handle(const http::request<http::string_body>& req) {
    const unsigned v = req.version();
    const std::string target(req.target());
    const std::string path = target.substr(0, target.find('?'));
    auto error = [&](http::status s, const std::string& msg) { return json_response(s, {{"error", msg}}, v); };
    try {
      if (req.method() == http::verb::post && path == "/api/rounds") return create_round(req);
      if (req.method() == http::verb::post && path == "/api/flags") {
        const auto body = parse_body(req);
        const auto rec = engine_.flag_image(body.at("user_id").get<std::string>(), body.at("image_id").get<std::string>(),
                                            parse_flag_reason(body.at("reason").get<std::string>()));
        return json_response(http::status::ok, rec.to_json(), v);
      }
      if (req.method() != http::verb::get) return error(http::status::method_not_allowed, "method not allowed");
      if (path == "/api/leaderboard") {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& e : engine_.leaderboard()) out.push_back(e.to_json());
        return json_response(http::status::ok, out, v);
      }
      if (auto id = suffix(path, "/api/rounds/")) return json_response(http::status::ok, engine_.round(*id).to_json(), v);
      if (auto id = suffix(path, "/api/images/")) return png_response(encode_png(engine_.image(*id).image), v);
      if (auto id = suffix(path, "/api/maps/")) {
        const auto m = engine_.image_map(*id);
        if (!m) return error(http::status::not_found, "no finalized rounds for image '" + *id + "'");
        Image img(m->grid.height(), m->grid.width(), 1);
        img.data = scaled_to_unit(m->grid).values();
        auto res = png_response(encode_png(img), v);
        res.set("X-Participant-Count", std::to_string(m->participant_count));
        return res;
      }
      return error(http::status::not_found, "no route for " + path);
    } catch (const GameError& e) {
      return error(status_of(e), e.what());
    } catch (const nlohmann::json::exception& e) {
      return error(http::status::bad_request, std::string("bad request body: ") + e.what());
    } catch (const ContractError& e) {
      return error(http::status::bad_request, e.what());
    } catch (const std::exception& e) {
      return error(http::status::internal_server_error, e.what());
    }
  }

  static std::optional<std::string> suffix(const std::string& path, const std::string& prefix) {
    if (path.rfind(prefix, 0) != 0 || path.size() == prefix.size()) return std::nullopt;
    return path.substr(prefix.size());
  }

  static nlohmann::json parse_body(const http::request<http::string_body>& req) {
    auto body = nlohmann::json::parse(req.body());
    if (!body.is_object()) throw GameError(GameError::Kind::invalid, "request body must be a JSON object");
    return body;
  }

  Response create_round(const http::request<http::string_body>& req) {
    const auto body = parse_body(req);
    const auto user = body.at("user_id").get<std::string>();
    engine_.add_user(user);
    const std::string image_id =
        body.contains("image_id") && !body["image_id"].is_null() ? body["image_id"].get<std::string>() : engine_.next_image();
    const RoundState r = engine_.start_round(user, image_id);
    track(r, std::chrono::steady_clock::now());
    auto out = r.to_json();
    out["ws"] = "/ws/rounds/" + r.round_id;
    return json_response(http::status::created, out, req.version());
  }

  // -------------------------------------------------------------- round flow

  void track(const RoundState& r, std::chrono::steady_clock::time_point t0) {
    auto& rt = runtime_[r.round_id];
    rt.t0 = t0;
    rt.deadline = std::make_unique<net::steady_timer>(ioc_, t0 + std::chrono::milliseconds(r.duration_ms));
    rt.deadline->async_wait([this, id = r.round_id](beast::error_code ec) {
      if (ec) return;
      engine_.partner_tick(id, partner_, engine_.round(id).duration_ms);
      finish_round(id);
    });
  }

  std::int64_t elapsed_ms(const std::string& round_id) const {
    const auto it = runtime_.find(round_id);
    if (it == runtime_.end()) return 0;
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - it->second.t0)
        .count();
  }

  void attach(const std::string& round_id, const std::shared_ptr<WsSession>& s) {
    RoundState r;
    try {
      r = engine_.round(round_id);
    } catch (const GameError& e) {
      s->send({{"type", "error"}, {"message", e.what()}});
      s->close_after_writes();
      return;
    }
    if (r.status != RoundStatus::active) {
      s->send({{"type", "end"}, {"status", to_string(r.status)}, {"score", r.score}});
      s->close_after_writes();
      return;
    }
    if (!runtime_.count(round_id)) {
      // Started outside this server: derive the round clock from its wall-clock start.
      const auto age = std::chrono::milliseconds(GameEngine::system_ms() - r.started_at);
      track(r, std::chrono::steady_clock::now() - age);
    }
    runtime_[round_id].session = s;
  }

  void on_message(const std::string& round_id, WsSession& s, const std::string& text) {
    std::vector<BubbleEvent> events;
    try {
      const auto msg = nlohmann::json::parse(text);
      if (!msg.is_object() || msg.value("type", "") != "bubbles" || !msg.contains("events") || !msg["events"].is_array()) {
        throw GameError(GameError::Kind::invalid, "expected {\"type\":\"bubbles\",\"events\":[...]}");
      }
      for (const auto& j : msg["events"]) events.push_back(BubbleEvent::from_json(j));
      engine_.apply_bubbles(round_id, events);
    } catch (const std::exception& e) {
      s.send({{"type", "error"}, {"message", e.what()}});
      return;
    }
    if (engine_.round(round_id).status != RoundStatus::active) {
      finish_round(round_id);
      return;
    }
    tick(round_id);
  }

  void tick(const std::string& round_id) {
    auto it = runtime_.find(round_id);
    if (it == runtime_.end()) return;
    const std::int64_t now = elapsed_ms(round_id);
    const auto before = engine_.round(round_id);
    const auto verdict = engine_.partner_tick(round_id, partner_, now);
    if (verdict) {
      if (auto s = it->second.session.lock()) s->send({{"type", "partner"}, {"top5", verdict->top5}, {"solved", verdict->solved}});
    } else if (before.status == RoundStatus::active && before.last_partner_call_ms &&
               now - *before.last_partner_call_ms < engine_.config().partner_interval_ms) {
      // Throttled: look again once the interval has passed so the latest bubbles are seen.
      if (!it->second.retick) {
        const auto wait = engine_.config().partner_interval_ms - (now - *before.last_partner_call_ms);
        it->second.retick = std::make_unique<net::steady_timer>(ioc_, std::chrono::milliseconds(wait));
        it->second.retick->async_wait([this, round_id](beast::error_code ec) {
          if (ec) return;
          if (auto rt = runtime_.find(round_id); rt != runtime_.end()) rt->second.retick.reset();
          tick(round_id);
        });
      }
    }
    if (engine_.round(round_id).status != RoundStatus::active) finish_round(round_id);
  }

  void finish_round(const std::string& round_id) {
    RoundState r = engine_.round(round_id);
    if (r.status == RoundStatus::active) return;
    if (!r.finalized) r = engine_.finalize_round(round_id);
    const auto it = runtime_.find(round_id);
    if (it == runtime_.end()) return;
    if (auto s = it->second.session.lock()) {
      s->send({{"type", "end"}, {"status", to_string(r.status)}, {"score", r.score}});
      s->close_after_writes();
    }
    if (it->second.deadline) it->second.deadline->cancel();
    if (it->second.retick) it->second.retick->cancel();
    runtime_.erase(it);
  }

  GameEngine& engine_;
  PartnerClassifier& partner_;
  ServerOptions opts_;
  net::io_context ioc_{1};
  tcp::acceptor acceptor_;
  unsigned short port_ = 0;
  std::thread thread_;
  std::map<std::string, RoundRuntime> runtime_;
};

}  // namespace gala
