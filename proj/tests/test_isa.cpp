#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "pimsim/dispatcher.hpp"
#include "pimsim/isa.hpp"

using namespace pimsim;
using namespace pimsim::isa;

namespace {

std::vector<PimCommand> expand_identity(const CommandStack& s, std::int64_t t_cur = 1) {
  dispatch::Va2PaTable t;
  for (std::uint32_t i = 0; i < 4096; ++i) t.append(1, i);
  dispatch::ConfigBuffer cfg{1, 0, {{1, t_cur}}};
  return dispatch::expand(s, cfg, t, 1);
}

}  // namespace

TEST_CASE("encode_loop: row-stepping pair unrolls to consecutive rows") {
  auto s = encode_loop({DotProd{0, 0}, RdOut{0}}, {{0, Field::Row, 1}}, 2);
  REQUIRE(std::holds_alternative<DynLoop>(s.entries[0]));
  CHECK(std::get<DynLoop>(s.entries[0]).lb == 2);
  CHECK(std::get<DynLoop>(s.entries[0]).le == 2);
  std::vector<PimCommand> want = {DotProd{0, 0}, RdOut{0}, DotProd{1, 0}, RdOut{0}};
  CHECK(expand_identity(s) == want);
}

TEST_CASE("encode_loop: single iteration without modifiers is the body") {
  auto s = encode_loop({WrInp{3}}, {}, 1);
  CHECK(expand_identity(s) == std::vector<PimCommand>{WrInp{3}});
}

TEST_CASE("encode_loop: two dynamic fields over seven iterations") {
  std::vector<PimCommand> body = {WrInp{10}, DotProd{4, 32}, RdOut{100}};
  auto s = encode_loop(body, {{1, Field::Col, 64}, {2, Field::GprIndex, 3}}, 7);
  std::vector<PimCommand> want;
  for (std::uint32_t i = 0; i < 7; ++i) {
    want.push_back(WrInp{10});
    want.push_back(DotProd{4, 32 + 64 * i});
    want.push_back(RdOut{100 + 3 * i});
  }
  CHECK(expand_identity(s) == want);
}

TEST_CASE("encode_loop: rejects bad arguments") {
  CHECK_THROWS_AS(encode_loop({}, {}, 1), Error);
  CHECK_THROWS_AS(encode_loop({WrInp{0}}, {}, 0), Error);
  CHECK_THROWS_AS(encode_loop({WrInp{0}}, {{1, Field::GprIndex, 1}}, 2), Error);
  CHECK_THROWS_AS(encode_loop({WrInp{0}}, {{0, Field::Row, 1}}, 2), Error);
}

TEST_CASE("encode_loop: encoded size does not depend on the loop bound") {
  std::vector<PimCommand> body = {DotProd{0, 0}, RdOut{0}};
  auto a = encode_loop(body, {{0, Field::Row, 1}}, 2);
  auto b = encode_loop(body, {{0, Field::Row, 1}}, 100000);
  CHECK(encoded_size(a) == encoded_size(b));
}

TEST_CASE("validate_stack") {
  SUBCASE("well formed loop stack") { CHECK(validate_stack(fx::fig6b_stack()).empty()); }
  SUBCASE("loop overruns stack") {
    CommandStack s;
    s.entries = {DynLoop{2, 3, 0}, DotProd{0, 0}, RdOut{0}};
    auto v = validate_stack(s);
    REQUIRE(v.size() == 1);
    CHECK(v[0].kind == "loop overruns stack");
    CHECK(v[0].index == 0);
  }
  SUBCASE("modifier followed by modifier on the same field") {
    CommandStack s;
    s.entries = {DynLoop{2, 1, 0}, DynModi{Field::Row, 1}, DynModi{Field::Row, 2}, DotProd{0, 0}};
    auto v = validate_stack(s);
    REQUIRE(v.size() == 1);
    CHECK(v[0].kind == "dangling modifier");
    CHECK(v[0].index == 1);
  }
  SUBCASE("stacked modifiers on distinct fields are fine") {
    CommandStack s;
    s.entries = {DynLoop{2, 1, 0}, DynModi{Field::Row, 1}, DynModi{Field::Col, 2}, DotProd{0, 0}};
    CHECK(validate_stack(s).empty());
  }
  SUBCASE("modifier at end of stack") {
    CommandStack s;
    s.entries = {WrInp{0}, DynModi{Field::GprIndex, 1}};
    auto v = validate_stack(s);
    REQUIRE(v.size() == 1);
    CHECK(v[0].kind == "dangling modifier");
  }
  SUBCASE("modifier targeting a field the command lacks") {
    CommandStack s;
    s.entries = {DynModi{Field::Row, 1}, WrInp{0}};
    auto v = validate_stack(s);
    REQUIRE(v.size() == 1);
    CHECK(v[0].kind == "field mismatch");
  }
  SUBCASE("nested loop") {
    CommandStack s;
    s.entries = {DynLoop{2, 2, 0}, WrInp{0}, DynLoop{2, 1, 0}, WrInp{1}, WrInp{2}};
    auto v = validate_stack(s);
    REQUIRE(!v.empty());
    CHECK(v[0].kind == "nested loop");
  }
}

TEST_CASE("serialize: byte layout is frozen") {
  CommandStack s;
  s.meta = {3, OpKind::Sv, 1, 0};
  s.entries = {DynLoop{2, 1, 256}, DynModi{Field::Row, 1}, DotProd{5, 7}};
  std::vector<std::uint8_t> want = {
      'P', 'I', 'M', 'S', 1, 3, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 3, 0, 0, 0,
      0x10, 2, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0,
      0x11, 0, 1, 0, 0, 0,
      0x02, 5, 0, 0, 0, 7, 0, 0, 0};
  CHECK(serialize(s) == want);
  CHECK(encoded_size(s) == want.size());
  CHECK(deserialize(want) == s);
}

TEST_CASE("serialize: empty stack is header only") {
  CommandStack s;
  auto b = serialize(s);
  CHECK(b.size() == 24);
  CHECK(deserialize(b) == s);
}

TEST_CASE("serialize: loop stack round-trips byte-identically") {
  auto s = fx::fig6b_stack();
  auto b = serialize(s);
  CHECK(deserialize(b) == s);
  CHECK(serialize(deserialize(b)) == b);
}

TEST_CASE("deserialize: rejects malformed input") {
  auto b = serialize(fx::fig6b_stack());
  SUBCASE("truncated") {
    auto t = b;
    t.pop_back();
    CHECK_THROWS_AS(deserialize(t), Error);
  }
  SUBCASE("header cut short") {
    std::vector<std::uint8_t> t(b.begin(), b.begin() + 10);
    CHECK_THROWS_AS(deserialize(t), Error);
  }
  SUBCASE("unknown opcode") {
    auto t = b;
    t[24] = 0x7f;
    CHECK_THROWS_AS(deserialize(t), Error);
  }
  SUBCASE("length prefix larger than payload") {
    auto t = b;
    t[20] = 0xff;
    t[21] = 0xff;
    CHECK_THROWS_AS(deserialize(t), Error);
  }
  SUBCASE("trailing garbage") {
    auto t = b;
    t.push_back(0);
    CHECK_THROWS_AS(deserialize(t), Error);
  }
  SUBCASE("bad magic") {
    auto t = b;
    t[0] = 'X';
    CHECK_THROWS_AS(deserialize(t), Error);
  }
}

TEST_CASE("text form") {
  auto s = fx::fig6b_stack();
  std::string t = to_text(s);
  CHECK(t.find("DOT-PROD row=@va+0 col=0") != std::string::npos);
  CHECK(t.find("RD-OUT gpr=@va+16*2") != std::string::npos);
  CHECK(t.find("DYN-LOOP lb=2 le=4 tpi=256") != std::string::npos);
  CHECK(parse_text(t) == s);
  CHECK_THROWS_AS(parse_text("FOO x=1\n"), Error);
  CHECK_THROWS_AS(parse_text("WR-INP gpr=abc\n"), Error);
}

TEST_CASE("text form round-trips random stacks") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 300; ++i) {
    auto s = fx::build(fx::random_segments(rng, true));
    s.meta = {std::uint32_t(i), OpKind::Ffn1, 2, 1};
    CHECK(parse_text(to_text(s)) == s);
  }
}
