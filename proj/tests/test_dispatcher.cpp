#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "pimsim/dispatcher.hpp"

using namespace pimsim;
using namespace pimsim::dispatch;
using isa::DotProd;
using isa::PimCommand;
using isa::RdOut;
using isa::WrInp;

TEST_CASE("compute_loop_bound") {
  CHECK(compute_loop_bound(300, 256) == 2);
  CHECK(compute_loop_bound(256, 256) == 1);
  CHECK(compute_loop_bound(257, 256) == 2);
  CHECK_THROWS_AS(compute_loop_bound(0, 256), Error);
  // count distinct rows touched when token j lands in row j / tokens_per_row
  for (std::int64_t t = 1; t <= 4096; ++t) {
    std::int64_t rows = 0, last = -1;
    for (std::int64_t j = 0; j < t; ++j)
      if (j / 256 != last) {
        last = j / 256;
        ++rows;
      }
    REQUIRE(compute_loop_bound(t, 256) == rows);
  }
}

TEST_CASE("expand: the two-row example resolves rows 33 then 34") {
  Va2PaTable tbl;
  tbl.append(1, 22);
  tbl.append(2, 33);
  tbl.append(2, 34);
  ConfigBuffer cfg{4, 0, {{1, 200}, {2, 300}}};
  auto cmds = expand(fx::fig6b_stack(), cfg, tbl, 2);
  std::vector<PimCommand> want = {WrInp{0},        DotProd{33, 0}, RdOut{16}, DotProd{33, 128},
                                  RdOut{17},       DotProd{34, 0}, RdOut{18}, DotProd{34, 128},
                                  RdOut{19}};
  CHECK(cmds == want);
  // request 1 at 200 tokens needs one row and maps to 22
  auto c1 = expand(fx::fig6b_stack(), cfg, tbl, 1);
  CHECK(c1.size() == 5);
  CHECK(c1[1] == PimCommand{DotProd{22, 0}});
}

TEST_CASE("expand: concrete stacks pass through") {
  isa::CommandStack s;
  s.entries = {WrInp{1}, isa::DotProd{5, 6}, RdOut{2}};
  ConfigBuffer cfg{1, 0, {{0, 1}}};
  Va2PaTable tbl;
  CHECK(expand(s, cfg, tbl, 0) == std::vector<PimCommand>{WrInp{1}, DotProd{5, 6}, RdOut{2}});
  CHECK(expand_static(s) == expand(s, cfg, tbl, 0));
}

TEST_CASE("expand: errors") {
  Va2PaTable tbl;
  tbl.append(2, 33);
  ConfigBuffer cfg{1, 0, {{2, 300}}};
  CHECK_THROWS_WITH_AS(expand(fx::fig6b_stack(), cfg, tbl, 2), doctest::Contains("unmapped VA"),
                       Error);
  CHECK_THROWS_AS(expand(fx::fig6b_stack(), cfg, tbl, 9), Error);
  auto s = fx::fig6b_stack();
  s.meta.layer_id = 1;
  tbl.append(2, 34);
  CHECK_THROWS_AS(expand(s, cfg, tbl, 2), Error);
}

TEST_CASE("expand: monotone in t_cur for append-only caches") {
  Va2PaTable tbl;
  for (std::uint32_t v = 0; v < 8; ++v) tbl.append(5, 100 + 7 * v);
  auto s = fx::fig6b_stack();
  std::vector<PimCommand> prev;
  for (std::int64_t t = 1; t <= 2048; ++t) {
    ConfigBuffer cfg{1, 0, {{5, t}}};
    auto cur = expand(s, cfg, tbl, 5);
    REQUIRE(cur.size() >= prev.size());
    REQUIRE(std::equal(prev.begin(), prev.end(), cur.begin()));
    prev = std::move(cur);
  }
}

TEST_CASE("expand: matches static pre-generation for every t_cur") {
  // static generator: the same stack with LB fixed and rows substituted
  Va2PaTable tbl;
  for (std::uint32_t v = 0; v < 4; ++v) tbl.append(0, 40 + 3 * v);
  for (std::int64_t t = 1; t <= 1024; ++t) {
    std::int64_t lb = compute_loop_bound(t, 256);
    isa::CommandStack pre;
    pre.entries.push_back(WrInp{0});
    for (std::int64_t it = 0; it < lb; ++it) {
      std::uint32_t row = 40 + 3 * std::uint32_t(it);
      pre.entries.push_back(DotProd{row, 0});
      pre.entries.push_back(RdOut{std::uint32_t(16 + 2 * it)});
      pre.entries.push_back(DotProd{row, 128});
      pre.entries.push_back(RdOut{std::uint32_t(17 + 2 * it)});
    }
    ConfigBuffer cfg{1, 0, {{0, t}}};
    REQUIRE(expand(fx::fig6b_stack(), cfg, tbl, 0) == expand_static(pre));
  }
}

TEST_CASE("expand: exhaustive loop bounds and body sizes against the reference unroller") {
  std::mt19937_64 rng(3);
  Va2PaTable ident;
  for (std::uint32_t v = 0; v < 64; ++v) ident.append(0, v);
  ConfigBuffer cfg{1, 0, {{0, 1}}};
  for (std::uint32_t lb = 1; lb <= 64; ++lb) {
    for (std::size_t k = 1; k <= 8; ++k) {
      std::vector<PimCommand> body;
      std::vector<isa::DynField> dyn;
      for (std::size_t i = 0; i < k; ++i) {
        body.push_back(fx::random_cmd(rng));
        auto d = fx::random_dyn(rng, body.back(), i, true);
        dyn.insert(dyn.end(), d.begin(), d.end());
      }
      auto s = isa::encode_loop(body, dyn, lb);
      REQUIRE(expand(s, cfg, ident, 0) == isa::unroll_reference(body, dyn, lb));
    }
  }
}

TEST_CASE("update_config and replace_slot") {
  ConfigBuffer cfg{2, 0, {{7, 300}}};
  auto c2 = update_config(cfg, 7, 301);
  CHECK(c2.find(7)->t_cur == 301);
  CHECK(compute_loop_bound(301, 256) == 2);
  CHECK_THROWS_AS(update_config(cfg, 8, 301), Error);
  CHECK_THROWS_AS(update_config(cfg, 7, 299), Error);
  CHECK_THROWS_AS(update_config(cfg, 7, 303), Error);
  CHECK_THROWS_AS(update_config(ConfigBuffer{}, 7, 1), Error);
  auto c3 = replace_slot(cfg, 7, 9, 6820);
  CHECK(c3.find(7) == nullptr);
  CHECK(c3.find(9)->t_cur == 6820);
}

TEST_CASE("Va2Pa table") {
  Va2PaTable t;
  t.map(1, 0, 5);
  CHECK_THROWS_AS(t.map(1, 2, 6), Error);
  t.map(1, 1, 9);
  t.append(2, 6);
  CHECK(t.entries() == 3);
  CHECK(t.encoded_bytes() == 24);
  CHECK(t.disjoint());
  t.append(2, 9);
  CHECK_FALSE(t.disjoint());
  t.release(2);
  CHECK(t.disjoint());
  CHECK_THROWS_AS(t.release(2), Error);
}

TEST_CASE("load_stacks") {
  CHECK(load_stacks({}).stacks.empty());
  auto s = fx::fig6b_stack();
  auto img = load_stacks({s});
  CHECK(img.bytes == isa::encoded_size(s));
  CHECK(img.at(0, isa::OpKind::Qkt) == s);
  CHECK_THROWS_AS(load_stacks({s, s}), Error);
  CHECK_THROWS_AS(load_stacks({s}, 10), Error);
}
