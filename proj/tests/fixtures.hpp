#pragma once
#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "pimsim/dispatcher.hpp"
#include "pimsim/isa.hpp"

namespace fx {

using namespace pimsim;

// WR-INP of the query, then per row of cached keys two DOT-PROD/RD-OUT pairs
// (two heads packed in one row). LB=2, LE=4 at T_cur=300, 256 tokens per row.
inline isa::CommandStack fig6b_stack() {
  isa::CommandStack s;
  s.meta = {0, isa::OpKind::Qkt, 0, 0};
  s.entries = {
      isa::WrInp{0},
      isa::DynLoop{2, 4, 256},
      isa::DynModi{isa::Field::Row, 1}, isa::DotProd{0, 0},
      isa::DynModi{isa::Field::GprIndex, 2}, isa::RdOut{16},
      isa::DynModi{isa::Field::Row, 1}, isa::DotProd{0, 128},
      isa::DynModi{isa::Field::GprIndex, 2}, isa::RdOut{17},
  };
  return s;
}

inline isa::PimCommand random_cmd(std::mt19937_64& rng, std::uint32_t maxv = 1000) {
  std::uniform_int_distribution<int> op(0, 2);
  std::uniform_int_distribution<std::uint32_t> v(0, maxv);
  switch (op(rng)) {
    case 0: return isa::WrInp{v(rng)};
    case 1: return isa::DotProd{v(rng), v(rng)};
    default: return isa::RdOut{v(rng)};
  }
}

// Dynamic fields for one command: each present field independently, coef >= 0.
inline std::vector<isa::DynField> random_dyn(std::mt19937_64& rng, const isa::PimCommand& c,
                                             std::size_t pos, bool allow_row) {
  std::vector<isa::DynField> d;
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> coef(0, 4);
  for (auto f : {isa::Field::Row, isa::Field::Col, isa::Field::GprIndex}) {
    if (!isa::has_field(c, f) || !coin(rng)) continue;
    if (f == isa::Field::Row && !allow_row) continue;
    d.push_back({pos, f, f == isa::Field::Row ? 1 : coef(rng)});
  }
  return d;
}

// Structured description of a valid stack; the oracle expands this directly.
struct Segment {
  bool loop = false;
  std::uint32_t lb = 1, tpi = 0;
  std::vector<isa::PimCommand> body;
  std::vector<isa::DynField> dyn;
};

inline isa::CommandStack build(const std::vector<Segment>& segs) {
  isa::CommandStack s;
  for (const auto& g : segs) {
    if (g.loop) {
      auto l = isa::encode_loop(g.body, g.dyn, g.lb, g.tpi);
      s.entries.insert(s.entries.end(), l.entries.begin(), l.entries.end());
    } else {
      for (const auto& c : g.body) s.entries.push_back(std::visit([](auto x) -> isa::Entry { return x; }, c));
    }
  }
  return s;
}

inline std::vector<Segment> random_segments(std::mt19937_64& rng, bool dynamic_bounds,
                                            bool allow_row = true) {
  std::uniform_int_distribution<int> nseg(0, 4), k(1, 8), lb(1, 12), kind(0, 2);
  std::vector<Segment> segs(nseg(rng));
  for (auto& g : segs) {
    g.loop = kind(rng) != 0;
    int n = g.loop ? k(rng) : k(rng) / 2 + 1;
    for (int i = 0; i < n; ++i) {
      g.body.push_back(random_cmd(rng));
      if (g.loop) {
        auto d = random_dyn(rng, g.body.back(), i, allow_row);
        g.dyn.insert(g.dyn.end(), d.begin(), d.end());
      }
    }
    g.lb = lb(rng);
    if (g.loop && dynamic_bounds && kind(rng) == 1) g.tpi = 256;
  }
  return segs;
}

// Brute-force expansion: walk segments, unroll each loop with hand index math.
inline std::vector<isa::PimCommand> oracle_expand(const std::vector<Segment>& segs,
                                                  std::int64_t t_cur,
                                                  const std::vector<std::uint32_t>& va2pa) {
  std::vector<isa::PimCommand> out;
  for (const auto& g : segs) {
    if (!g.loop) {
      out.insert(out.end(), g.body.begin(), g.body.end());
      continue;
    }
    std::int64_t lb = g.tpi ? (t_cur + g.tpi - 1) / g.tpi : g.lb;
    for (std::int64_t it = 0; it < lb; ++it) {
      for (std::size_t i = 0; i < g.body.size(); ++i) {
        auto c = g.body[i];
        for (const auto& d : g.dyn) {
          if (d.position != i) continue;
          std::int64_t virt = it * d.coefficient;
          std::uint32_t base = isa::get_field(c, d.target);
          std::uint32_t v = d.target == isa::Field::Row ? base + va2pa.at(virt)
                                                        : std::uint32_t(base + virt);
          isa::set_field(c, d.target, v);
        }
        out.push_back(c);
      }
    }
  }
  return out;
}

}  // namespace fx
