#pragma once

// ClickMe game engine: rounds, bubble stamping, the classifier partner,
// scoring, flags, leaderboard and export.
//
// Times inside a round are milliseconds since the round started and are
// supplied by the caller (bubble timestamps, tick times), so a session can be
// scripted and replayed exactly. All state changes go to an append-only NDJSON
// log (store/events.ndjson) which is replayed on open; store/snapshot.json is
// a derived summary rewritten after every finalization or flag.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gala/backbone.hpp"
#include "gala/clickme.hpp"
#include "gala/dataset.hpp"
#include "gala/errors.hpp"
#include "gala/image.hpp"
#include "gala/png_io.hpp"
#include "gala/train.hpp"
#include "json.hpp"

namespace gala {

class GameError : public ContractError {
 public:
  enum class Kind { invalid, not_found, conflict };
  GameError(Kind kind, const std::string& what) : ContractError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

enum class RoundStatus { active, solved, timeout };

inline const char* to_string(RoundStatus s) {
  switch (s) {
    case RoundStatus::active: return "active";
    case RoundStatus::solved: return "solved";
    case RoundStatus::timeout: return "timeout";
  }
  return "?";
}

enum class FlagReason { bad_quality, wrong_label };

inline const char* to_string(FlagReason r) { return r == FlagReason::bad_quality ? "bad_quality" : "wrong_label"; }

inline FlagReason parse_flag_reason(const std::string& s) {
  if (s == "bad_quality") return FlagReason::bad_quality;
  if (s == "wrong_label") return FlagReason::wrong_label;
  throw GameError(GameError::Kind::invalid, "flag reason must be bad_quality or wrong_label, got '" + s + "'");
}

struct GameConfig {
  std::filesystem::path store;
  std::int64_t duration_ms = 7000;
  std::int64_t partner_interval_ms = 100;
  std::size_t player_bubble = kPlayerBubble;
  std::size_t partner_bubble = kPartnerBubble;
  double fill_gray = 0.5;
};

struct CatalogImage {
  std::string id;
  Image image;
  std::size_t label = 0;
  std::string label_name;
};

struct RoundState {
  std::string round_id, user_id, image_id, label_name;
  std::size_t label = 0;
  std::int64_t started_at = 0;  // wall clock, ms since the Unix epoch
  std::int64_t duration_ms = 7000;
  std::size_t player_bubble = kPlayerBubble, partner_bubble = kPartnerBubble;
  Grid<double> revealed_mask;  // partner view, binary
  Grid<double> player_mask;    // binary
  RoundStatus status = RoundStatus::active;
  double score = 0.0;
  std::optional<std::int64_t> solved_at_ms;
  std::optional<std::int64_t> ended_at_ms;
  std::vector<BubbleEvent> events;  // accepted player events, in order
  std::optional<std::int64_t> last_partner_call_ms;
  std::size_t partner_calls = 0, partner_failures = 0;
  bool finalized = false;

  std::size_t revealed_pixels() const {
    return static_cast<std::size_t>(std::count(revealed_mask.values().begin(), revealed_mask.values().end(), 1.0));
  }

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<std::int64_t>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"round_id", round_id},
            {"user_id", user_id},
            {"image_id", image_id},
            {"label", label},
            {"label_name", label_name},
            {"started_at", started_at},
            {"duration_ms", duration_ms},
            {"player_bubble_size", player_bubble},
            {"partner_bubble_size", partner_bubble},
            {"height", revealed_mask.height()},
            {"width", revealed_mask.width()},
            {"status", to_string(status)},
            {"score", score},
            {"solved_at_ms", opt(solved_at_ms)},
            {"ended_at_ms", opt(ended_at_ms)},
            {"events", events.size()},
            {"revealed_pixels", revealed_pixels()},
            {"finalized", finalized}};
  }
};

/// Anything that ranks class labels for a partially revealed image.
class PartnerClassifier {
 public:
  virtual ~PartnerClassifier() = default;
  /// `masked`: original pixels where `revealed` is 1, gray elsewhere.
  /// Returns class labels, most likely first.
  virtual std::vector<std::size_t> predict(const Image& masked, const Grid<double>& revealed) = 0;
};

/// A trained backbone as partner; the masked image is resized to the model input.
class ModelPartner : public PartnerClassifier {
 public:
  explicit ModelPartner(Model model) : model_(std::move(model)) {}

  std::vector<std::size_t> predict(const Image& masked, const Grid<double>&) override {
    const auto& cfg = model_.config();
    if (masked.channels != cfg.input_channels) throw ContractError("ModelPartner: channel count differs from the model");
    Image input = masked.height == cfg.input_height && masked.width == cfg.input_width
                      ? masked
                      : resize(masked, cfg.input_height, cfg.input_width, ResizeMode::bilinear);
    for (double& v : input.data) v = std::clamp(v, 0.0, 1.0);
    const auto out = run_batch(model_, to_batch({&input}));
    return ranked_classes(out.logits, 0);
  }

 private:
  Model model_;
};

struct BubbleResult {
  RoundState state;
  Image partner_image;
  std::size_t accepted = 0, discarded = 0;
};

struct PartnerVerdict {
  std::vector<std::size_t> top5;
  bool solved = false;
  std::int64_t at_ms = 0;
  double score = 0.0;
};

struct FlagRecord {
  std::string image_id;
  std::set<std::string> users;
  std::map<std::string, std::size_t> reasons;

  std::size_t count() const { return users.size(); }
  nlohmann::json to_json() const { return {{"image_id", image_id}, {"count", count()}, {"reasons", reasons}}; }
};

struct LeaderboardEntry {
  std::string user_id;
  double total = 0.0;
  std::size_t rounds = 0, solved = 0;

  nlohmann::json to_json() const { return {{"user_id", user_id}, {"total", total}, {"rounds", rounds}, {"solved", solved}}; }
};

class GameEngine {
 public:
  using Logger = std::function<void(const std::string&)>;
  using Clock = std::function<std::int64_t()>;

  static std::int64_t system_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
  }

  GameEngine(GameConfig cfg, std::vector<CatalogImage> catalog, Logger log = {}, Clock clock = system_ms)
      : cfg_(std::move(cfg)), log_(std::move(log)), clock_(std::move(clock)) {
    if (cfg_.store.empty()) throw ContractError("game: store directory required");
    if (cfg_.duration_ms <= 0) throw ContractError("game: duration_ms must be positive");
    if (cfg_.partner_interval_ms < 0) throw ContractError("game: partner_interval_ms must be nonnegative");
    if (cfg_.player_bubble == 0 || cfg_.partner_bubble < cfg_.player_bubble) {
      throw ContractError("game: partner bubble must be at least the player bubble");
    }
    if (!log_) log_ = [](const std::string& m) { std::cerr << "game: " << m << '\n'; };
    for (auto& c : catalog) {
      if (c.image.height == 0 || c.image.width == 0) throw ContractError("game: image '" + c.id + "' is empty");
      const std::string id = c.id;
      if (!catalog_.emplace(id, std::move(c)).second) throw ContractError("game: duplicate image id '" + id + "'");
    }
    std::filesystem::create_directories(cfg_.store);
    replay();
    log_out_.open(log_path(), std::ios::app);
    if (!log_out_) throw DataError("game: cannot open event log '" + log_path().string() + "'");
  }

  const GameConfig& config() const { return cfg_; }
  std::filesystem::path log_path() const { return cfg_.store / "events.ndjson"; }
  std::filesystem::path snapshot_path() const { return cfg_.store / "snapshot.json"; }
  std::filesystem::path map_path(const std::string& image_id, const std::string& round_id) const {
    return cfg_.store / "maps" / image_id / (round_id + ".png");
  }

  /// Registers an opaque user id; repeated calls are no-ops.
  void add_user(const std::string& user_id) {
    std::lock_guard lock(mu_);
    if (user_id.empty()) throw GameError(GameError::Kind::invalid, "user id must be non-empty");
    if (users_.count(user_id)) return;
    apply_user(user_id);
    append({{"kind", "user"}, {"user_id", user_id}});
  }

  bool has_user(const std::string& user_id) const {
    std::lock_guard lock(mu_);
    return users_.count(user_id) > 0;
  }

  std::vector<std::string> image_ids() const {
    std::lock_guard lock(mu_);
    std::vector<std::string> out;
    for (const auto& [id, c] : catalog_) out.push_back(id);
    return out;
  }

  const CatalogImage& image(const std::string& image_id) const {
    const auto it = catalog_.find(image_id);
    if (it == catalog_.end()) throw GameError(GameError::Kind::not_found, "unknown image '" + image_id + "'");
    return it->second;
  }

  /// Unflagged image with the fewest rounds so far (lowest id on ties).
  std::string next_image() const {
    std::lock_guard lock(mu_);
    std::optional<std::string> best;
    std::size_t best_count = 0;
    for (const auto& [id, c] : catalog_) {
      if (flags_.count(id)) continue;
      const std::size_t n = rounds_per_image_.count(id) ? rounds_per_image_.at(id) : 0;
      if (!best || n < best_count) {
        best = id;
        best_count = n;
      }
    }
    if (!best) throw GameError(GameError::Kind::conflict, "no playable images left");
    return *best;
  }

  RoundState start_round(const std::string& user_id, const std::string& image_id) {
    std::lock_guard lock(mu_);
    if (!users_.count(user_id)) throw GameError(GameError::Kind::not_found, "unknown user '" + user_id + "'");
    image(image_id);
    if (flags_.count(image_id)) throw GameError(GameError::Kind::conflict, "image '" + image_id + "' is flagged");
    if (const auto it = active_by_user_.find(user_id); it != active_by_user_.end()) {
      throw GameError(GameError::Kind::conflict, "user '" + user_id + "' already has active round " + it->second);
    }
    const std::string round_id = "r" + std::to_string(next_round_);
    const std::int64_t started = clock_();
    apply_start(round_id, user_id, image_id, started);
    append({{"kind", "round"}, {"round_id", round_id}, {"user_id", user_id}, {"image_id", image_id},
            {"started_at", started}});
    return rounds_.at(round_id);
  }

  RoundState round(const std::string& round_id) const {
    std::lock_guard lock(mu_);
    return find_round(round_id);
  }

  /// Stamps each event at player and partner size. An event at or past the
  /// duration ends the round as a timeout and it and all later events are
  /// discarded; events sent to an ended round are discarded.
  BubbleResult apply_bubbles(const std::string& round_id, std::span<const BubbleEvent> events) {
    std::lock_guard lock(mu_);
    RoundState& r = find_round(round_id);
    std::vector<BubbleEvent> batch(events.begin(), events.end());
    const CatalogImage& img = image(r.image_id);
    std::int64_t last = r.events.empty() ? 0 : r.events.back().t_ms;
    for (auto& e : batch) {
      e.round_id = round_id;
      e.size = cfg_.player_bubble;
      if (e.t_ms < last) throw GameError(GameError::Kind::invalid, "bubble events must have nondecreasing t_ms");
      last = e.t_ms;
      try {
        check_on_canvas(e, img.image.height, img.image.width);
      } catch (const ContractError& ex) {
        throw GameError(GameError::Kind::invalid, ex.what());
      }
    }
    BubbleResult out;
    if (r.status == RoundStatus::active) {
      nlohmann::json list = nlohmann::json::array();
      for (const auto& e : batch) list.push_back({{"t_ms", e.t_ms}, {"x", e.x}, {"y", e.y}});
      append({{"kind", "bubbles"}, {"round_id", round_id}, {"events", list}});
    }
    const std::size_t before = r.events.size();
    apply_batch(r, batch);
    out.accepted = r.events.size() - before;
    out.discarded = batch.size() - out.accepted;
    out.state = r;
    out.partner_image = partner_image(r);
    return out;
  }

  /// Asks the partner at `now_ms` (round time). Nothing happens if the round has
  /// ended or the previous call was less than the partner interval ago; at or
  /// past the duration the round times out instead. Classifier failures are
  /// logged and leave the round active.
  std::optional<PartnerVerdict> partner_tick(const std::string& round_id, PartnerClassifier& classifier,
                                             std::int64_t now_ms) {
    Image view;
    Grid<double> mask;
    {
      std::lock_guard lock(mu_);
      RoundState& r = find_round(round_id);
      if (r.status != RoundStatus::active) return std::nullopt;
      if (now_ms < 0) throw GameError(GameError::Kind::invalid, "tick time must be nonnegative");
      if (now_ms >= r.duration_ms) {
        apply_timeout(r, now_ms);
        append({{"kind", "timeout"}, {"round_id", round_id}, {"now_ms", now_ms}});
        return std::nullopt;
      }
      if (r.last_partner_call_ms && now_ms - *r.last_partner_call_ms < cfg_.partner_interval_ms) return std::nullopt;
      r.last_partner_call_ms = now_ms;
      ++r.partner_calls;
      view = partner_image(r);
      mask = r.revealed_mask;
    }
    std::vector<std::size_t> ranked;
    std::string failure;
    try {
      ranked = classifier.predict(view, mask);
    } catch (const std::exception& e) {
      failure = e.what();
    } catch (...) {
      failure = "unknown exception";
    }
    std::lock_guard lock(mu_);
    RoundState& r = find_round(round_id);
    if (!failure.empty()) {
      ++r.partner_failures;
      log_("partner failed on round " + round_id + " at " + std::to_string(now_ms) + " ms: " + failure);
      append({{"kind", "partner_error"}, {"round_id", round_id}, {"now_ms", now_ms}, {"error", failure}});
      return std::nullopt;
    }
    if (r.status != RoundStatus::active) return std::nullopt;
    PartnerVerdict v;
    v.at_ms = now_ms;
    v.top5.assign(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(5, ranked.size())));
    v.solved = std::find(v.top5.begin(), v.top5.end(), r.label) != v.top5.end();
    apply_verdict(r, now_ms, v.solved);
    v.score = r.score;
    append({{"kind", "verdict"}, {"round_id", round_id}, {"now_ms", now_ms}, {"top5", v.top5}, {"solved", v.solved}});
    return v;
  }

  /// Times out every active round whose wall-clock age has reached the
  /// duration (rounds left open by a restart). Returns their ids.
  std::vector<std::string> expire_rounds(std::int64_t wall_now_ms) {
    std::lock_guard lock(mu_);
    std::vector<std::string> out;
    for (auto& [id, r] : rounds_) {
      if (r.status != RoundStatus::active || wall_now_ms - r.started_at < r.duration_ms) continue;
      apply_timeout(r, r.duration_ms);
      append({{"kind", "timeout"}, {"round_id", id}, {"now_ms", r.duration_ms}});
      out.push_back(id);
    }
    return out;
  }

  /// Rasterized player map of a round (stamp counts at image size).
  Grid<double> round_map(const std::string& round_id) const {
    std::lock_guard lock(mu_);
    const RoundState& r = find_round(round_id);
    return player_counts(r);
  }

  /// Stores the round's count map and credits its score; the round must have ended.
  RoundState finalize_round(const std::string& round_id) {
    std::lock_guard lock(mu_);
    RoundState& r = find_round(round_id);
    if (r.status == RoundStatus::active) throw GameError(GameError::Kind::conflict, "round " + round_id + " is still active");
    if (r.finalized) throw GameError(GameError::Kind::conflict, "round " + round_id + " is already finalized");
    write_count_png(map_path(r.image_id, round_id), player_counts(r));
    apply_finalize(r);
    append({{"kind", "finalize"}, {"round_id", round_id}});
    write_snapshot();
    return r;
  }

  FlagRecord flag_image(const std::string& user_id, const std::string& image_id, FlagReason reason) {
    std::lock_guard lock(mu_);
    if (!users_.count(user_id)) throw GameError(GameError::Kind::not_found, "unknown user '" + user_id + "'");
    image(image_id);
    if (flags_.count(image_id) && flags_.at(image_id).users.count(user_id)) return flags_.at(image_id);
    apply_flag(user_id, image_id, reason);
    append({{"kind", "flag"}, {"user_id", user_id}, {"image_id", image_id}, {"reason", to_string(reason)}});
    write_snapshot();
    return flags_.at(image_id);
  }

  std::optional<FlagRecord> flags_for(const std::string& image_id) const {
    std::lock_guard lock(mu_);
    const auto it = flags_.find(image_id);
    return it == flags_.end() ? std::nullopt : std::optional<FlagRecord>(it->second);
  }

  /// Sorted by total descending, then user id.
  std::vector<LeaderboardEntry> leaderboard() const {
    std::lock_guard lock(mu_);
    std::vector<LeaderboardEntry> out;
    for (const auto& [id, e] : board_) out.push_back(e);
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.total > b.total; });
    return out;
  }

  /// Finalized round maps of one image, aggregated across players.
  std::optional<ImportanceMap> image_map(const std::string& image_id) const {
    std::lock_guard lock(mu_);
    image(image_id);
    std::vector<ImportanceMap> maps;
    for (const auto& [id, r] : rounds_) {
      if (r.image_id == image_id && r.finalized) maps.push_back({image_id, player_counts(r), 1});
    }
    if (maps.empty()) return std::nullopt;
    return aggregate_maps(maps);
  }

  /// Writes a dataset folder of every unflagged image with at least one
  /// finalized round, index records carrying image_id and participant_count,
  /// plus bubbles.ndjson with the player events of the exported rounds.
  /// Returns the number of records.
  std::size_t export_dataset(const std::filesystem::path& dir) const {
    std::vector<std::string> ids;
    {
      std::lock_guard lock(mu_);
      for (const auto& [id, c] : catalog_)
        if (!flags_.count(id)) ids.push_back(id);
    }
    Dataset data;
    std::vector<nlohmann::json> extra;
    for (const auto& id : ids) {
      auto m = image_map(id);
      if (!m) continue;
      const auto& c = image(id);
      Sample s;
      s.id = id;
      s.image = c.image;
      s.label = c.label;
      s.map = std::move(m->grid);
      data.push_back(std::move(s));
      extra.push_back({{"image_id", id}, {"participant_count", m->participant_count}});
    }
    write_dataset(dir, data, extra);

    std::ofstream bubbles(dir / "bubbles.ndjson");
    if (!bubbles) throw DataError("cannot create '" + (dir / "bubbles.ndjson").string() + "'");
    std::lock_guard lock(mu_);
    for (const auto& [round_id, r] : rounds_) {
      if (!r.finalized || flags_.count(r.image_id)) continue;
      for (BubbleEvent e : r.events) {
        e.round_id = round_id;
        bubbles << e.to_json().dump() << '\n';
      }
    }
    return data.size();
  }

  std::vector<RoundState> rounds() const {
    std::lock_guard lock(mu_);
    std::vector<RoundState> out;
    for (const auto& [id, r] : rounds_) out.push_back(r);
    return out;
  }

 private:
  RoundState& find_round(const std::string& round_id) {
    const auto it = rounds_.find(round_id);
    if (it == rounds_.end()) throw GameError(GameError::Kind::not_found, "unknown round '" + round_id + "'");
    return it->second;
  }
  const RoundState& find_round(const std::string& round_id) const {
    return const_cast<GameEngine*>(this)->find_round(round_id);
  }

  Grid<double> player_counts(const RoundState& r) const {
    return rasterize_bubbles(r.events, r.player_mask.height(), r.player_mask.width());
  }

  Image partner_image(const RoundState& r) const {
    const Image& src = image(r.image_id).image;
    Image out(src.height, src.width, src.channels, cfg_.fill_gray);
    for (std::size_t i = 0; i < r.revealed_mask.size(); ++i) {
      if (r.revealed_mask[i] == 0.0) continue;
      for (std::size_t ch = 0; ch < src.channels; ++ch) out.data[i * src.channels + ch] = src.data[i * src.channels + ch];
    }
    return out;
  }

  // State transitions shared by live calls and log replay.

  void apply_user(const std::string& user_id) {
    users_.insert(user_id);
    board_.emplace(user_id, LeaderboardEntry{user_id});
  }

  void apply_start(const std::string& round_id, const std::string& user_id, const std::string& image_id,
                   std::int64_t started) {
    const CatalogImage& c = image(image_id);
    RoundState r;
    r.round_id = round_id;
    r.user_id = user_id;
    r.image_id = image_id;
    r.label = c.label;
    r.label_name = c.label_name;
    r.started_at = started;
    r.duration_ms = cfg_.duration_ms;
    r.player_bubble = cfg_.player_bubble;
    r.partner_bubble = cfg_.partner_bubble;
    r.revealed_mask = Grid<double>(c.image.height, c.image.width, 0.0);
    r.player_mask = r.revealed_mask;
    rounds_[round_id] = std::move(r);
    active_by_user_[user_id] = round_id;
    ++rounds_per_image_[image_id];
    ++next_round_;
  }

  void end_round(RoundState& r, RoundStatus status, std::int64_t at_ms) {
    r.status = status;
    r.ended_at_ms = at_ms;
    active_by_user_.erase(r.user_id);
  }

  void apply_timeout(RoundState& r, std::int64_t at_ms) {
    r.score = 0.0;
    end_round(r, RoundStatus::timeout, at_ms);
  }

  void apply_batch(RoundState& r, const std::vector<BubbleEvent>& batch) {
    for (const auto& e : batch) {
      if (r.status != RoundStatus::active) return;
      if (e.t_ms >= r.duration_ms) {
        apply_timeout(r, e.t_ms);
        return;
      }
      const std::size_t H = r.revealed_mask.height(), W = r.revealed_mask.width();
      for_each_bubble_pixel(e.y, e.x, r.player_bubble, H, W, [&](std::size_t y, std::size_t x) { r.player_mask(y, x) = 1.0; });
      for_each_bubble_pixel(e.y, e.x, r.partner_bubble, H, W, [&](std::size_t y, std::size_t x) { r.revealed_mask(y, x) = 1.0; });
      r.events.push_back(e);
    }
  }

  void apply_verdict(RoundState& r, std::int64_t now_ms, bool solved) {
    r.last_partner_call_ms = now_ms;
    if (!solved) return;
    r.score = static_cast<double>(r.duration_ms - now_ms) / static_cast<double>(r.duration_ms);
    r.solved_at_ms = now_ms;
    end_round(r, RoundStatus::solved, now_ms);
  }

  void apply_finalize(RoundState& r) {
    r.finalized = true;
    auto& e = board_[r.user_id];
    e.user_id = r.user_id;
    e.total += r.score;
    ++e.rounds;
    if (r.status == RoundStatus::solved) ++e.solved;
  }

  void apply_flag(const std::string& user_id, const std::string& image_id, FlagReason reason) {
    auto& f = flags_[image_id];
    f.image_id = image_id;
    if (f.users.insert(user_id).second) ++f.reasons[to_string(reason)];
  }

  void append(const nlohmann::json& record) {
    if (replaying_) return;
    log_out_ << record.dump() << '\n';
    log_out_.flush();
    if (!log_out_) throw DataError("game: event log write failed");
    ++log_records_;
  }

  void replay() {
    std::ifstream in(log_path());
    if (!in) return;
    replaying_ = true;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const std::string where = log_path().string() + ":" + std::to_string(lineno);
      try {
        const auto rec = nlohmann::json::parse(line);
        const auto kind = rec.at("kind").get<std::string>();
        if (kind == "user") {
          apply_user(rec.at("user_id").get<std::string>());
        } else if (kind == "round") {
          apply_start(rec.at("round_id").get<std::string>(), rec.at("user_id").get<std::string>(),
                      rec.at("image_id").get<std::string>(), rec.at("started_at").get<std::int64_t>());
        } else if (kind == "bubbles") {
          auto& r = find_round(rec.at("round_id").get<std::string>());
          std::vector<BubbleEvent> batch;
          for (const auto& j : rec.at("events")) {
            auto e = BubbleEvent::from_json(j);
            e.round_id = r.round_id;
            e.size = r.player_bubble;
            batch.push_back(e);
          }
          apply_batch(r, batch);
        } else if (kind == "verdict") {
          auto& r = find_round(rec.at("round_id").get<std::string>());
          ++r.partner_calls;
          apply_verdict(r, rec.at("now_ms").get<std::int64_t>(), rec.at("solved").get<bool>());
        } else if (kind == "partner_error") {
          auto& r = find_round(rec.at("round_id").get<std::string>());
          ++r.partner_calls;
          ++r.partner_failures;
          r.last_partner_call_ms = rec.at("now_ms").get<std::int64_t>();
        } else if (kind == "timeout") {
          apply_timeout(find_round(rec.at("round_id").get<std::string>()), rec.at("now_ms").get<std::int64_t>());
        } else if (kind == "finalize") {
          apply_finalize(find_round(rec.at("round_id").get<std::string>()));
        } else if (kind == "flag") {
          apply_flag(rec.at("user_id").get<std::string>(), rec.at("image_id").get<std::string>(),
                     parse_flag_reason(rec.at("reason").get<std::string>()));
        } else {
          throw DataError("unknown record kind '" + kind + "'");
        }
      } catch (const std::exception& e) {
        replaying_ = false;
        throw DataError("game: replay failed at " + where + ": " + e.what());
      }
      ++log_records_;
    }
    replaying_ = false;
  }

  void write_snapshot() const {
    nlohmann::json snap{{"log_records", log_records_}};
    snap["leaderboard"] = nlohmann::json::array();
    for (const auto& [id, e] : board_) snap["leaderboard"].push_back(e.to_json());
    snap["flags"] = nlohmann::json::array();
    for (const auto& [id, f] : flags_) snap["flags"].push_back(f.to_json());
    snap["rounds"] = nlohmann::json::array();
    for (const auto& [id, r] : rounds_) snap["rounds"].push_back(r.to_json());
    const auto tmp = snapshot_path().string() + ".tmp";
    {
      std::ofstream os(tmp);
      os << snap.dump(1) << '\n';
      if (!os) throw DataError("game: snapshot write failed");
    }
    std::filesystem::rename(tmp, snapshot_path());
  }

  GameConfig cfg_;
  Logger log_;
  Clock clock_;
  std::map<std::string, CatalogImage> catalog_;
  std::set<std::string> users_;
  std::map<std::string, RoundState> rounds_;
  std::map<std::string, std::string> active_by_user_;
  std::map<std::string, std::size_t> rounds_per_image_;
  std::map<std::string, FlagRecord> flags_;
  std::map<std::string, LeaderboardEntry> board_;
  std::size_t next_round_ = 1;
  std::size_t log_records_ = 0;
  bool replaying_ = false;
  std::ofstream log_out_;
  mutable std::recursive_mutex mu_;
};

}  // namespace gala
