#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "game_fixtures.hpp"
#include "gala/game.hpp"
#include "test_util.hpp"

using namespace gala;
using gala::testing::FailingPartner;
using gala::testing::small_catalog;
using gala::testing::TempDir;
using gala::testing::ThresholdPartner;

namespace {

using PixelSet = std::set<std::pair<std::int64_t, std::int64_t>>;

void stamp(PixelSet& s, std::int64_t x, std::int64_t y, std::int64_t size, std::int64_t H, std::int64_t W) {
  for (std::int64_t r = y - size / 2; r < y - size / 2 + size; ++r)
    for (std::int64_t c = x - size / 2; c < x - size / 2 + size; ++c)
      if (r >= 0 && c >= 0 && r < H && c < W) s.insert({r, c});
}

PixelSet mask_pixels(const Grid<double>& g) {
  PixelSet s;
  for (std::size_t r = 0; r < g.height(); ++r)
    for (std::size_t c = 0; c < g.width(); ++c)
      if (g(r, c) == 1.0) s.insert({static_cast<std::int64_t>(r), static_cast<std::int64_t>(c)});
  return s;
}

BubbleEvent ev(std::int64_t t, std::int64_t x, std::int64_t y) {
  BubbleEvent e;
  e.t_ms = t;
  e.x = x;
  e.y = y;
  return e;
}

struct Fixture {
  explicit Fixture(const std::string& tag, std::size_t size = 64)
      : dir(tag), logs(std::make_shared<std::vector<std::string>>()) {
    cfg.store = dir / "store";
    catalog = small_catalog(3, size);
    engine = open();
  }

  std::unique_ptr<GameEngine> open() {
    auto sink = logs;
    return std::make_unique<GameEngine>(
        cfg, catalog, [sink](const std::string& m) { sink->push_back(m); }, [this] { return wall_ms; });
  }

  TempDir dir;
  GameConfig cfg;
  std::vector<CatalogImage> catalog;
  std::shared_ptr<std::vector<std::string>> logs;
  std::int64_t wall_ms = 1'000'000;
  std::unique_ptr<GameEngine> engine;
};

}  // namespace

TEST(Game, FreshRoundIsActiveAndEmpty) {
  Fixture f("game_fresh");
  f.engine->add_user("u1");
  const auto r = f.engine->start_round("u1", "img1");
  EXPECT_EQ(r.status, RoundStatus::active);
  EXPECT_EQ(r.score, 0.0);
  EXPECT_EQ(r.label, 1u);
  EXPECT_EQ(r.label_name, "class1");
  EXPECT_EQ(r.duration_ms, 7000);
  EXPECT_EQ(r.player_bubble, 14u);
  EXPECT_EQ(r.partner_bubble, 21u);
  EXPECT_EQ(r.started_at, f.wall_ms);
  EXPECT_EQ(r.revealed_pixels(), 0u);
  for (double v : r.revealed_mask.values()) EXPECT_EQ(v, 0.0);
}

TEST(Game, StartRoundErrors) {
  Fixture f("game_start_err");
  f.engine->add_user("u1");
  auto kind_of = [&](auto&& fn) {
    try {
      fn();
    } catch (const GameError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  EXPECT_EQ(kind_of([&] { f.engine->start_round("nobody", "img0"); }), static_cast<int>(GameError::Kind::not_found));
  EXPECT_EQ(kind_of([&] { f.engine->start_round("u1", "nope"); }), static_cast<int>(GameError::Kind::not_found));
  f.engine->start_round("u1", "img0");
  EXPECT_EQ(kind_of([&] { f.engine->start_round("u1", "img2"); }), static_cast<int>(GameError::Kind::conflict));
  EXPECT_EQ(kind_of([&] { f.engine->add_user(""); }), static_cast<int>(GameError::Kind::invalid));
}

TEST(Game, OneEventRevealsA21PixelSquareToThePartner) {
  Fixture f("game_441", 256);
  f.engine->add_user("u1");
  const auto r = f.engine->start_round("u1", "img0");
  const std::vector<BubbleEvent> one{ev(10, 100, 100)};
  const auto out = f.engine->apply_bubbles(r.round_id, one);
  EXPECT_EQ(out.accepted, 1u);
  EXPECT_EQ(out.state.revealed_pixels(), 441u);
  EXPECT_EQ(mask_pixels(out.state.player_mask).size(), 196u);
  // Original pixels inside the partner mask, gray elsewhere.
  const Image& src = f.catalog[0].image;
  for (std::size_t i = 0; i < out.state.revealed_mask.size(); ++i)
    for (std::size_t ch = 0; ch < 3; ++ch)
      EXPECT_EQ(out.partner_image.data[i * 3 + ch], out.state.revealed_mask[i] == 1.0 ? src.data[i * 3 + ch] : 0.5);
}

TEST(Game, MasksMatchPixelSetUnions) {
  Fixture f("game_union");
  f.engine->add_user("u1");
  const auto r = f.engine->start_round("u1", "img0");
  Rng rng(3);
  PixelSet player, partner;
  std::int64_t t = 0;
  for (int batch = 0; batch < 5; ++batch) {
    std::vector<BubbleEvent> events;
    for (int k = 0; k < 4; ++k) {
      t += static_cast<std::int64_t>(rng.index(50));
      const auto x = static_cast<std::int64_t>(rng.index(64)), y = static_cast<std::int64_t>(rng.index(64));
      events.push_back(ev(t, x, y));
      stamp(player, x, y, 14, 64, 64);
      stamp(partner, x, y, 21, 64, 64);
    }
    const auto before = f.engine->round(r.round_id).revealed_pixels();
    const auto out = f.engine->apply_bubbles(r.round_id, events);
    EXPECT_EQ(mask_pixels(out.state.player_mask), player);
    EXPECT_EQ(mask_pixels(out.state.revealed_mask), partner);
    EXPECT_GE(out.state.revealed_pixels(), before);
    for (const auto& p : player) EXPECT_TRUE(partner.count(p));
  }
  // The stored map counts stamps per pixel.
  const auto counts = f.engine->round_map(r.round_id);
  EXPECT_EQ(counts, rasterize_bubbles(f.engine->round(r.round_id).events, 64, 64));
}

TEST(Game, BubbleErrorsAndLateEvents) {
  Fixture f("game_late");
  f.engine->add_user("u1");
  const auto r = f.engine->start_round("u1", "img0");
  const std::vector<BubbleEvent> backwards{ev(50, 1, 1), ev(40, 1, 1)};
  EXPECT_THROW(f.engine->apply_bubbles(r.round_id, backwards), GameError);
  const std::vector<BubbleEvent> off{ev(50, 64, 1)};
  EXPECT_THROW(f.engine->apply_bubbles(r.round_id, off), GameError);
  EXPECT_THROW(f.engine->apply_bubbles("r99", off), GameError);

  const std::vector<BubbleEvent> crossing{ev(6990, 10, 10), ev(7000, 30, 30), ev(7100, 40, 40)};
  const auto out = f.engine->apply_bubbles(r.round_id, crossing);
  EXPECT_EQ(out.accepted, 1u);
  EXPECT_EQ(out.discarded, 2u);
  EXPECT_EQ(out.state.status, RoundStatus::timeout);
  EXPECT_EQ(out.state.score, 0.0);
  const std::vector<BubbleEvent> after{ev(7200, 5, 5)};
  const auto late = f.engine->apply_bubbles(r.round_id, after);
  EXPECT_EQ(late.accepted, 0u);
  EXPECT_EQ(late.state.events.size(), 1u);
}

TEST(Game, SolveTimeSetsTheScore) {
  for (auto [at, expected] : {std::pair<std::int64_t, double>{3500, 0.5}, {0, 1.0}, {6999, 1.0 / 7000.0}}) {
    Fixture f("game_score");
    f.engine->add_user("u1");
    const auto r = f.engine->start_round("u1", "img2");
    ThresholdPartner partner(2, 0);
    const auto v = f.engine->partner_tick(r.round_id, partner, at);
    ASSERT_TRUE(v.has_value());
    EXPECT_TRUE(v->solved);
    EXPECT_EQ(v->top5.size(), 5u);
    EXPECT_EQ(v->score, expected);
    const auto s = f.engine->round(r.round_id);
    EXPECT_EQ(s.status, RoundStatus::solved);
    EXPECT_EQ(s.score, expected);
    EXPECT_EQ(s.solved_at_ms, at);
  }
}

TEST(Game, ZeroEventsTimeOutAtTheBudget) {
  Fixture f("game_timeout");
  f.engine->add_user("u1");
  const auto r = f.engine->start_round("u1", "img0");
  ThresholdPartner partner(0, 0);
  EXPECT_FALSE(f.engine->partner_tick(r.round_id, partner, 7000).has_value());
  EXPECT_EQ(partner.calls, 0);
  const auto s = f.engine->round(r.round_id);
  EXPECT_EQ(s.status, RoundStatus::timeout);
  EXPECT_EQ(s.score, 0.0);
  // Ended rounds ignore further ticks.
  EXPECT_FALSE(f.engine->partner_tick(r.round_id, partner, 100).has_value());
  EXPECT_EQ(f.engine->round(r.round_id).status, RoundStatus::timeout);

  const auto fin = f.engine->finalize_round(r.round_id);
  EXPECT_TRUE(fin.finalized);
  EXPECT_TRUE(std::filesystem::exists(f.engine->map_path("img0", r.round_id)));
  EXPECT_EQ(read_count_png(f.engine->map_path("img0", r.round_id)), Grid<double>(64, 64, 0.0));
  EXPECT_EQ(f.engine->leaderboard()[0].total, 0.0);
  EXPECT_EQ(f.engine->leaderboard()[0].rounds, 1u);
  // The user may start again once the round has ended.
  EXPECT_NO_THROW(f.engine->start_round("u1", "img1"));
}

TEST(Game, PartnerCallsAreThrottled) {
  Fixture f("game_throttle");
  f.engine->add_user("u1");
  const auto r = f.engine->start_round("u1", "img0");
  ThresholdPartner partner(0, 1'000'000);
  for (std::int64_t t : {0, 50, 99, 100, 150, 199, 230, 330}) f.engine->partner_tick(r.round_id, partner, t);
  EXPECT_EQ(partner.calls, 4);  // 0, 100, 230, 330
  EXPECT_EQ(f.engine->round(r.round_id).partner_calls, 4u);
}

TEST(Game, ClassifierFailureKeepsTheRoundAlive) {
  Fixture f("game_fail");
  f.engine->add_user("u1");
  const auto r = f.engine->start_round("u1", "img0");
  FailingPartner bad;
  EXPECT_FALSE(f.engine->partner_tick(r.round_id, bad, 100).has_value());
  const auto s = f.engine->round(r.round_id);
  EXPECT_EQ(s.status, RoundStatus::active);
  EXPECT_EQ(s.partner_failures, 1u);
  ASSERT_EQ(f.logs->size(), 1u);
  EXPECT_NE(f.logs->front().find("model offline"), std::string::npos);
  ThresholdPartner good(0, 0);
  EXPECT_TRUE(f.engine->partner_tick(r.round_id, good, 300)->solved);
}

TEST(Game, ScriptedSessionMatchesTimelineOracle) {
  Fixture f("game_script");
  f.engine->add_user("u1");
  const auto r = f.engine->start_round("u1", "img0");
  ThresholdPartner partner(0, 200);
  // Corner bubbles reveal little; the partner needs 200 pixels.
  const std::vector<BubbleEvent> script{ev(400, 0, 0), ev(450, 5, 0), ev(520, 12, 0), ev(900, 0, 20), ev(1180, 40, 40)};

  PixelSet revealed;
  std::optional<std::int64_t> last_call, solve_ms;
  for (const auto& e : script) {
    stamp(revealed, e.x, e.y, 21, 64, 64);
    if (!solve_ms && (!last_call || e.t_ms - *last_call >= 100)) {
      last_call = e.t_ms;
      if (revealed.size() >= 200) solve_ms = e.t_ms;
    }
  }
  ASSERT_TRUE(solve_ms.has_value());

  for (const auto& e : script) {
    const std::vector<BubbleEvent> one{e};
    f.engine->apply_bubbles(r.round_id, one);
    f.engine->partner_tick(r.round_id, partner, e.t_ms);
  }
  const auto s = f.engine->round(r.round_id);
  EXPECT_EQ(s.status, RoundStatus::solved);
  EXPECT_EQ(s.solved_at_ms, *solve_ms);
  EXPECT_EQ(s.score, static_cast<double>(7000 - *solve_ms) / 7000.0);
  EXPECT_GT(s.score, 0.0);

  const auto fin = f.engine->finalize_round(r.round_id);
  const auto stored = read_count_png(f.engine->map_path("img0", r.round_id));
  f.engine.reset();
  const auto replayed = f.open();
  const auto again = replayed->round(r.round_id);
  EXPECT_EQ(replayed->round_map(r.round_id), stored);
  EXPECT_EQ(again.score, fin.score);
  EXPECT_EQ(again.status, RoundStatus::solved);
  EXPECT_EQ(again.solved_at_ms, fin.solved_at_ms);
  EXPECT_EQ(again.revealed_mask, fin.revealed_mask);
  EXPECT_EQ(again.events, fin.events);
  EXPECT_TRUE(again.finalized);
  EXPECT_EQ(replayed->leaderboard()[0].total, fin.score);
}

TEST(Game, FinalizeRulesAndLeaderboard) {
  Fixture f("game_board");
  for (const char* u : {"ann", "bob", "cy"}) f.engine->add_user(u);
  ThresholdPartner p0(0, 0), p1(1, 0), p2(2, 0);
  std::map<std::string, double> expected;
  auto play = [&](const std::string& user, const std::string& img, ThresholdPartner& p, std::int64_t t) {
    const auto r = f.engine->start_round(user, img);
    EXPECT_THROW(f.engine->finalize_round(r.round_id), GameError);
    f.engine->partner_tick(r.round_id, p, t);
    const auto fin = f.engine->finalize_round(r.round_id);
    EXPECT_THROW(f.engine->finalize_round(r.round_id), GameError);
    expected[user] += fin.score;
  };
  play("ann", "img0", p0, 1400);
  play("bob", "img1", p1, 700);
  play("ann", "img2", p2, 3500);
  play("cy", "img0", p0, 7000);
  const auto board = f.engine->leaderboard();
  ASSERT_EQ(board.size(), 3u);
  for (const auto& e : board) EXPECT_DOUBLE_EQ(e.total, expected[e.user_id]);
  EXPECT_EQ(board[0].user_id, "ann");
  EXPECT_EQ(board[0].rounds, 2u);
  EXPECT_EQ(board[0].solved, 2u);
  EXPECT_EQ(board[2].user_id, "cy");
  EXPECT_EQ(board[2].solved, 0u);
  for (std::size_t i = 1; i < board.size(); ++i) EXPECT_GE(board[i - 1].total, board[i].total);

  const auto snap = nlohmann::json::parse(std::ifstream(f.engine->snapshot_path()));
  EXPECT_EQ(snap["leaderboard"].size(), 3u);
  // Replay recomputes the same totals from the log alone.
  f.engine.reset();
  const auto replayed = f.open();
  const auto again = replayed->leaderboard();
  ASSERT_EQ(again.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(again[i].user_id, board[i].user_id);
    EXPECT_EQ(again[i].total, board[i].total);
  }
}

TEST(Game, FlagsExcludeImages) {
  Fixture f("game_flags");
  for (const char* u : {"a", "b"}) f.engine->add_user(u);
  EXPECT_EQ(f.engine->next_image(), "img0");
  f.engine->flag_image("a", "img0", FlagReason::bad_quality);
  f.engine->flag_image("a", "img0", FlagReason::wrong_label);
  const auto rec = f.engine->flag_image("b", "img0", FlagReason::wrong_label);
  EXPECT_EQ(rec.count(), 2u);
  EXPECT_EQ(rec.reasons.at("bad_quality"), 1u);
  EXPECT_EQ(rec.reasons.at("wrong_label"), 1u);
  EXPECT_EQ(f.engine->next_image(), "img1");
  EXPECT_THROW(f.engine->start_round("a", "img0"), GameError);
  EXPECT_THROW(f.engine->flag_image("a", "nope", FlagReason::bad_quality), GameError);
  EXPECT_THROW(parse_flag_reason("ugly"), GameError);
  EXPECT_FALSE(f.engine->flags_for("img1").has_value());

  ThresholdPartner p(1, 0);
  for (const char* img : {"img1", "img2"}) {
    const auto r = f.engine->start_round("a", img);
    f.engine->partner_tick(r.round_id, p, 100);
    if (f.engine->round(r.round_id).status == RoundStatus::active) f.engine->partner_tick(r.round_id, p, 7000);
    f.engine->finalize_round(r.round_id);
  }
  const std::size_t n = f.engine->export_dataset(f.dir / "export");
  EXPECT_EQ(n, 2u);
  const Dataset d = load_dataset(f.dir / "export");
  std::set<std::string> ids;
  for (const auto& s : d) ids.insert(s.id);
  EXPECT_EQ(ids, (std::set<std::string>{"img1", "img2"}));

  f.engine.reset();
  const auto replayed = f.open();
  EXPECT_EQ(replayed->flags_for("img0")->count(), 2u);
}

TEST(Game, NextImageBalancesRounds) {
  Fixture f("game_next");
  f.engine->add_user("u");
  ThresholdPartner p(9, 0);
  std::vector<std::string> order;
  for (int i = 0; i < 4; ++i) {
    const auto img = f.engine->next_image();
    order.push_back(img);
    const auto r = f.engine->start_round("u", img);
    f.engine->partner_tick(r.round_id, p, 7000);
  }
  EXPECT_EQ(order, (std::vector<std::string>{"img0", "img1", "img2", "img0"}));
}

TEST(Game, ImageMapAggregatesFinalizedRounds) {
  Fixture f("game_agg");
  f.engine->add_user("a");
  f.engine->add_user("b");
  EXPECT_FALSE(f.engine->image_map("img0").has_value());
  ThresholdPartner p(0, 1'000'000);
  const std::vector<BubbleEvent> left{ev(10, 10, 10)}, right{ev(10, 50, 10)};
  for (auto [user, events] : {std::pair{"a", &left}, std::pair{"b", &right}}) {
    const auto r = f.engine->start_round(user, "img0");
    f.engine->apply_bubbles(r.round_id, *events);
    f.engine->partner_tick(r.round_id, p, 7000);
    f.engine->finalize_round(r.round_id);
  }
  const auto m = f.engine->image_map("img0");
  ASSERT_TRUE(m.has_value());
  EXPECT_EQ(m->participant_count, 2u);
  EXPECT_EQ(m->grid(10, 10), 0.5);
  EXPECT_EQ(m->grid(10, 50), 0.5);
  EXPECT_EQ(m->grid(40, 30), 0.0);
}

TEST(Game, ExpiresStaleRoundsAfterRestart) {
  Fixture f("game_expire");
  f.engine->add_user("u");
  const auto r = f.engine->start_round("u", "img0");
  f.engine.reset();
  auto again = f.open();
  EXPECT_EQ(again->round(r.round_id).status, RoundStatus::active);
  EXPECT_TRUE(again->expire_rounds(f.wall_ms + 6999).empty());
  EXPECT_EQ(again->expire_rounds(f.wall_ms + 7000), (std::vector<std::string>{r.round_id}));
  EXPECT_EQ(again->round(r.round_id).status, RoundStatus::timeout);
}

TEST(Game, CorruptLogIsReported) {
  Fixture f("game_corrupt");
  f.engine->add_user("u");
  f.engine.reset();
  {
    std::ofstream os(f.cfg.store / "events.ndjson", std::ios::app);
    os << R"({"kind":"bubbles","round_id":"r7","events":[]})" << '\n';
  }
  try {
    f.open();
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("events.ndjson:2"), std::string::npos) << e.what();
  }
}

TEST(Game, RejectsBadConfig) {
  TempDir dir("game_cfg");
  GameConfig c;
  EXPECT_THROW(GameEngine(c, small_catalog()), ContractError);
  c.store = dir / "s";
  c.partner_bubble = 10;
  EXPECT_THROW(GameEngine(c, small_catalog()), ContractError);
  c.partner_bubble = 21;
  auto dup = small_catalog();
  dup[1].id = "img0";
  EXPECT_THROW(GameEngine(c, dup), ContractError);
}

TEST(Game, ExportIndexAndBubbleLog) {
  Fixture f("game_export");
  ThresholdPartner never(9, 1'000'000);
  std::vector<std::string> round_ids;
  for (auto [user, img, x] : std::vector<std::tuple<const char*, const char*, std::int64_t>>{
           {"a", "img1", 10}, {"b", "img1", 30}, {"a", "img2", 20}}) {
    f.engine->add_user(user);
    const auto r = f.engine->start_round(user, img);
    const std::vector<BubbleEvent> one{ev(50, x, 12)};
    f.engine->apply_bubbles(r.round_id, one);
    f.engine->partner_tick(r.round_id, never, 7000);
    f.engine->finalize_round(r.round_id);
    round_ids.push_back(r.round_id);
  }
  f.engine->add_user("c");
  f.engine->start_round("c", "img0");  // active rounds are not exported

  EXPECT_EQ(f.engine->export_dataset(f.dir / "export"), 2u);
  std::ifstream index(f.dir / "export/index.ndjson");
  std::map<std::string, nlohmann::json> records;
  for (std::string line; std::getline(index, line);) {
    const auto rec = nlohmann::json::parse(line);
    records[rec["image_id"]] = rec;
  }
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records["img1"]["participant_count"], 2);
  EXPECT_EQ(records["img2"]["participant_count"], 1);
  EXPECT_EQ(records["img1"]["label"], 1);
  EXPECT_EQ(records["img2"]["map_path"], "maps/img2.png");
  EXPECT_EQ(load_dataset(f.dir / "export").size(), 2u);

  std::ifstream log(f.dir / "export/bubbles.ndjson");
  std::vector<BubbleEvent> events;
  for (std::string line; std::getline(log, line);) events.push_back(BubbleEvent::from_json(nlohmann::json::parse(line)));
  ASSERT_EQ(events.size(), 3u);
  std::set<std::string> seen;
  for (const auto& e : events) {
    seen.insert(e.round_id);
    EXPECT_EQ(e.t_ms, 50);
    EXPECT_EQ(e.y, 12);
    EXPECT_EQ(e.size, kPlayerBubble);
  }
  EXPECT_EQ(seen, std::set<std::string>(round_ids.begin(), round_ids.end()));
}
