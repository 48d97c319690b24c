#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ucmr/bundle.hpp"
#include "ucmr/dialog_engine.hpp"
#include "ucmr/error.hpp"

namespace ucmr::service {

namespace fs = std::filesystem;

inline std::string utc_now() {
  using namespace std::chrono;
  auto now = system_clock::now();
  auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  std::time_t t = system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char frac[8];
  std::snprintf(frac, sizeof frac, ".%03dZ", static_cast<int>(ms));
  return std::string(buf) + frac;
}

/// Random version-4 UUID.
inline std::string new_uuid() {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  std::uint64_t hi = rng(), lo = rng();
  hi = (hi & 0xffffffffffff0fffULL) | 0x0000000000004000ULL;
  lo = (lo & 0x3fffffffffffffffULL) | 0x8000000000000000ULL;
  char buf[37];
  std::snprintf(buf, sizeof buf, "%08x-%04x-%04x-%04x-%012llx", static_cast<unsigned>(hi >> 32),
                static_cast<unsigned>((hi >> 16) & 0xffff), static_cast<unsigned>(hi & 0xffff),
                static_cast<unsigned>(lo >> 48), static_cast<unsigned long long>(lo & 0xffffffffffffULL));
  return buf;
}

inline bool valid_session_id(const std::string& id) {
  if (id.size() != 36) return false;
  for (std::size_t i = 0; i < id.size(); ++i) {
    const char c = id[i];
    if (i == 8 || i == 13 || i == 18 || i == 23) {
      if (c != '-') return false;
    } else if (!std::isxdigit(static_cast<unsigned char>(c))) {
      return false;
    }
  }
  return true;
}

struct Session {
  std::string session_id;
  std::string corpus_ref;
  dialog::DialogState state;
  std::vector<dialog::Turn> transcript;
  std::string created_at;
  std::string updated_at;
};

inline nlohmann::json to_json(const Session& s, const std::vector<std::string>& rule_ids) {
  nlohmann::json transcript = nlohmann::json::array();
  for (const auto& t : s.transcript) transcript.push_back(dialog::to_json(t));
  nlohmann::json decision = nullptr;
  for (auto it = s.transcript.rbegin(); it != s.transcript.rend(); ++it) {
    if (it->decision) {
      decision = *it->decision;
      break;
    }
  }
  return {{"session_id", s.session_id},
          {"corpus_ref", s.corpus_ref},
          {"status", s.state.awaiting_answer() ? "awaiting_answer" : "finished"},
          {"dialog_state", dialog::to_json(s.state, rule_ids)},
          {"decision_snapshot", decision},
          {"transcript", transcript},
          {"created_at", s.created_at},
          {"updated_at", s.updated_at}};
}

/// Sessions over a fixed set of loaded bundles, persisted as one
/// append-only JSONL event log per session.
class SessionStore {
 public:
  using Clock = std::function<std::string()>;

  SessionStore(std::map<std::string, std::shared_ptr<const dialog::Engine>> engines,
               std::optional<fs::path> log_dir, Clock clock = utc_now)
      : engines_(std::move(engines)), log_dir_(std::move(log_dir)), clock_(std::move(clock)) {
    if (log_dir_) {
      fs::create_directories(*log_dir_);
      replay();
    }
  }

  std::vector<std::string> corpora() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : engines_) out.push_back(name);
    return out;
  }

  /// Event logs that could not be replayed at startup, with the reason.
  const std::vector<std::string>& skipped_logs() const { return skipped_; }

  std::size_t size() const {
    std::shared_lock lock(map_mutex_);
    return sessions_.size();
  }

  /// Returns {session, first system turn}.
  std::pair<nlohmann::json, nlohmann::json> create(const std::string& corpus_ref, const std::string& scenario,
                                                   const std::string& question) {
    nlohmann::json ev = {{"event", "create"}, {"session_id", new_uuid()}, {"corpus_ref", corpus_ref},
                         {"scenario", scenario}, {"question", question}, {"at", clock_()}};
    auto slot = std::make_shared<Slot>();
    dialog::Turn turn = apply_create(slot->session, ev);
    append_event(slot->session.session_id, ev, true);
    {
      std::unique_lock lock(map_mutex_);
      sessions_[slot->session.session_id] = slot;
    }
    return {session_json(slot->session), dialog::to_json(turn)};
  }

  nlohmann::json answer(const std::string& id, const std::string& reply) {
    auto slot = find(id);
    std::lock_guard lock(slot->mutex);
    nlohmann::json ev = {{"event", "answer"}, {"text", reply}, {"at", clock_()}};
    Session next = slot->session;
    dialog::Turn turn = apply_answer(next, ev);
    append_event(id, ev, false);
    slot->session = std::move(next);
    return dialog::to_json(turn);
  }

  nlohmann::json get(const std::string& id) const {
    auto slot = find(id);
    std::lock_guard lock(slot->mutex);
    return session_json(slot->session);
  }

 private:
  struct Slot {
    std::mutex mutex;
    Session session;
  };

  const dialog::Engine& engine(const std::string& corpus_ref) const {
    auto it = engines_.find(corpus_ref);
    if (it == engines_.end()) throw Error(ErrorCode::UnknownCorpus, "unknown corpus_ref '" + corpus_ref + "'");
    return *it->second;
  }

  std::shared_ptr<Slot> find(const std::string& id) const {
    std::shared_lock lock(map_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorCode::SessionNotFound, "session '" + id + "' not found");
    return it->second;
  }

  nlohmann::json session_json(const Session& s) const { return to_json(s, engine(s.corpus_ref).rule_ids()); }

  dialog::Turn apply_create(Session& s, const nlohmann::json& ev) const {
    s.session_id = ev.at("session_id").get<std::string>();
    s.corpus_ref = ev.at("corpus_ref").get<std::string>();
    const auto& eng = engine(s.corpus_ref);
    dialog::Turn turn = eng.start(s.state, ev.at("scenario").get<std::string>(), ev.at("question").get<std::string>());
    s.transcript = {dialog::Engine::opening_turn(s.state), turn};
    s.created_at = s.updated_at = ev.at("at").get<std::string>();
    return turn;
  }

  dialog::Turn apply_answer(Session& s, const nlohmann::json& ev) const {
    const std::string reply = ev.at("text").get<std::string>();
    dialog::Turn turn = engine(s.corpus_ref).respond(s.state, reply);
    s.transcript.push_back({dialog::Role::User, dialog::Kind::UserMessage, reply, std::nullopt, std::nullopt});
    s.transcript.push_back(turn);
    s.updated_at = ev.at("at").get<std::string>();
    return turn;
  }

  void append_event(const std::string& id, const nlohmann::json& ev, bool fresh) {
    if (!log_dir_) return;
    std::ofstream out(*log_dir_ / (id + ".jsonl"), fresh ? std::ios::trunc : std::ios::app);
    out << ev.dump() << '\n';
    out.flush();
    if (!out) throw Error(ErrorCode::PipelineError, "persistence: cannot write event log for " + id);
  }

  /// Rebuilds every session from its event log. A torn final line from an
  /// interrupted write is ignored.
  void replay() {
    std::vector<fs::path> logs;
    for (const auto& e : fs::directory_iterator(*log_dir_)) {
      if (e.is_regular_file() && e.path().extension() == ".jsonl") logs.push_back(e.path());
    }
    std::sort(logs.begin(), logs.end());
    for (const auto& p : logs) {
      std::ifstream in(p);
      std::string line;
      auto slot = std::make_shared<Slot>();
      bool created = false;
      try {
        while (std::getline(in, line)) {
          if (text::trim(line).empty()) continue;
          nlohmann::json ev = nlohmann::json::parse(line, nullptr, false);
          if (ev.is_discarded()) break;
          if (ev.value("event", "") == "create") {
            apply_create(slot->session, ev);
            created = true;
          } else if (created && ev.value("event", "") == "answer") {
            apply_answer(slot->session, ev);
          }
        }
      } catch (const std::exception& e) {
        skipped_.push_back(p.filename().string() + ": " + e.what());
        continue;
      }
      if (created) sessions_[slot->session.session_id] = slot;
    }
  }

  std::map<std::string, std::shared_ptr<const dialog::Engine>> engines_;
  std::optional<fs::path> log_dir_;
  Clock clock_;
  mutable std::shared_mutex map_mutex_;
  std::map<std::string, std::shared_ptr<Slot>> sessions_;
  std::vector<std::string> skipped_;
};

/// Loads one bundle, or every subdirectory of `corpus_dir` holding a config.json.
inline std::map<std::string, std::shared_ptr<const dialog::Engine>> load_engines(const fs::path& dir, bool is_corpus_dir) {
  std::map<std::string, std::shared_ptr<const dialog::Engine>> out;
  auto add = [&](const fs::path& p) {
    auto b = bundle::load_bundle(p);
    out[b->name] = std::make_shared<dialog::Engine>(b);
  };
  if (!is_corpus_dir) {
    add(dir);
    return out;
  }
  if (!fs::is_directory(dir)) throw Error(ErrorCode::Validation, dir.string() + " is not a directory");
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && fs::exists(e.path() / "config.json")) subdirs.push_back(e.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  for (const auto& p : subdirs) add(p);
  if (out.empty()) throw Error(ErrorCode::Validation, "no bundles found in " + dir.string());
  return out;
}

inline int http_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::SessionNotFound:
    case ErrorCode::UnknownCorpus: return 404;
    case ErrorCode::NotAwaitingAnswer: return 409;
    case ErrorCode::Validation:
    case ErrorCode::EmptyInput: return 422;
    default: return 500;
  }
}

inline std::string body_string(const nlohmann::json& body, const char* key) {
  if (!body.contains(key) || !body[key].is_string()) {
    throw Error(ErrorCode::Validation, std::string("field '") + key + "' must be a string");
  }
  return body[key].get<std::string>();
}

/// HTTP front end: POST /sessions, POST /sessions/{id}/answers, GET /sessions/{id}.
class HttpService {
 public:
  HttpService(SessionStore& store, std::string cors_origin = "*") : store_(store), cors_origin_(std::move(cors_origin)) {
    server_.set_default_headers({{"Access-Control-Allow-Origin", cors_origin_},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                 {"Access-Control-Allow-Headers", "Content-Type"}});
    server_.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      send(res, 200, {{"status", "ok"}, {"corpora", store_.corpora()}});
    });
    server_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] {
        auto body = parse(req);
        auto [session, turn] = store_.create(body_string(body, "corpus_ref"), body.value("scenario", std::string()),
                                             body_string(body, "question"));
        send(res, 201, {{"session_id", session["session_id"]}, {"turn", turn}});
      });
    });
    server_.Post(R"(/sessions/([^/]+)/answers)", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] {
        auto body = parse(req);
        send(res, 200, {{"turn", store_.answer(session_id(req), body_string(body, "text"))}});
      });
    });
    server_.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { send(res, 200, {{"session", store_.get(session_id(req))}}); });
    });
  }

  int bind(const std::string& host, int port) {
    if (port == 0) return server_.bind_to_any_port(host);
    return server_.bind_to_port(host, port) ? port : -1;
  }

  bool run() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() { server_.wait_until_ready(); }

 private:
  static nlohmann::json parse(const httplib::Request& req) {
    auto j = nlohmann::json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::Validation, "request body must be a JSON object");
    return j;
  }

  static std::string session_id(const httplib::Request& req) {
    std::string id = req.matches[1];
    if (!valid_session_id(id)) throw Error(ErrorCode::SessionNotFound, "session '" + id + "' not found");
    return id;
  }

  static void send(httplib::Response& res, int status, const nlohmann::json& j) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  template <class F>
  static void handle(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const Error& e) {
      const int status = http_status(e.code());
      const std::string code = status == 500 ? "PipelineError" : std::string(to_string(e.code()));
      send(res, status, {{"code", code}, {"message", e.what()}});
    } catch (const std::exception& e) {
      send(res, 500, {{"code", "PipelineError"}, {"message", e.what()}});
    }
  }

  SessionStore& store_;
  std::string cors_origin_;
  httplib::Server server_;
};

/// "host:port" or ":port"; the port defaults to 8080.
inline std::pair<std::string, int> parse_addr(const std::string& addr) {
  auto colon = addr.rfind(':');
  std::string host = colon == std::string::npos ? addr : addr.substr(0, colon);
  int port = 8080;
  if (colon != std::string::npos) {
    try {
      std::size_t used = 0;
      port = std::stoi(addr.substr(colon + 1), &used);
      if (used != addr.size() - colon - 1) throw std::invalid_argument("port");
    } catch (const std::exception&) {
      throw Error(ErrorCode::Validation, "invalid address '" + addr + "'");
    }
  }
  if (port < 0 || port > 65535) throw Error(ErrorCode::Validation, "invalid port in '" + addr + "'");
  return {host.empty() ? "127.0.0.1" : host, port};
}

}  // namespace ucmr::service
