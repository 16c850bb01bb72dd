#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "pimsim/compiler.hpp"
#include "pimsim/runtime.hpp"
#include "toy.hpp"

using namespace pimsim;
using namespace pimsim::compiler;
using isa::OpKind;

namespace {

std::size_t count_kind(const AnnotatedGraph& a, OpKind k) {
  return std::size_t(std::count(a.kinds.begin(), a.kinds.end(), k));
}

}  // namespace

TEST_CASE("graph json round trip and checks") {
  auto g = build_decoder_graph(model_preset("toy"));
  auto g2 = DecoderGraph::from_json(g.to_json());
  CHECK(g2.to_json() == g.to_json());
  CHECK_THROWS_WITH_AS(DecoderGraph::from_json(R"({"nodes":[{"id":"a","type":"matmul","inputs":[]}]})"),
                       doctest::Contains("unshaped"), Error);
  CHECK_THROWS_WITH_AS(DecoderGraph::from_json(R"({"nodes":[{"id":"a","type":"norm","inputs":["b"]}]})"),
                       doctest::Contains("before it is defined"), Error);
  CHECK_THROWS_AS(DecoderGraph::from_json("{"), Error);
}

TEST_CASE("pattern matching flags") {
  auto llama = match_patterns(build_decoder_graph(model_preset("llama3.1-8b")));
  CHECK(llama.gqa);
  CHECK(llama.swiglu);
  CHECK(llama.layers == 32);
  CHECK(llama.unmatched.empty());
  CHECK(count_kind(llama, OpKind::QkvGen) == 3 * 32);
  CHECK(count_kind(llama, OpKind::Ffn1) == 2 * 32);

  auto mpt = match_patterns(build_decoder_graph(model_preset("mpt-7b")));
  CHECK_FALSE(mpt.gqa);
  CHECK_FALSE(mpt.swiglu);
  CHECK(count_kind(mpt, OpKind::Ffn1) == 32);
  CHECK(count_kind(mpt, OpKind::Act) == 32);
  CHECK(count_kind(mpt, OpKind::Ffn2) == 32);

  auto q7 = match_patterns(build_decoder_graph(model_preset("7B")));
  CHECK_FALSE(q7.gqa);
  CHECK(q7.swiglu);
}

TEST_CASE("dangling matmul is reported, double claim is an error") {
  auto g = build_decoder_graph(model_preset("toy"));
  g.nodes.push_back({"stray", "matmul", {"L1.add2"}, 32, 10, 0, 0, 1});
  auto a = match_patterns(g);
  REQUIRE(a.unmatched.size() == 1);
  CHECK(a.unmatched[0] == "stray");
  CHECK_THROWS_AS(build_execution_table(a, {}, model_preset("toy"), toy::topology()), Error);

  auto h = build_decoder_graph(model_preset("toy"));
  // a matmul reading attention output that also feeds a ReLU
  h.nodes.push_back({"odd", "matmul", {"L0.sv"}, 32, 16, 0, 0, 0});
  h.nodes.push_back({"odd_act", "relu", {"odd"}, 0, 0, 0, 0, 0});
  CHECK_THROWS_WITH_AS(match_patterns(h), doctest::Contains("ambiguous"), Error);
}

TEST_CASE("execution table") {
  device::PimTopology topo;
  topo.nodes = 4;
  auto m = model_preset("7B");
  auto a = match_patterns(build_decoder_graph(m));
  auto t = build_execution_table(a, {2, 2}, m, topo);
  CHECK(t.entries.size() == a.graph.nodes.size());
  int max_stage = 0, proj = 0;
  for (const auto& e : t.entries) {
    max_stage = std::max(max_stage, e.stage);
    CHECK(e.stage == e.layer / 16);
    if (e.op == OpKind::Proj) {
      ++proj;
      CHECK(e.comm == Comm::Reduce);
      CHECK(e.modules.size() == 2);
      CHECK(e.direction == "d_in");
    }
    if (e.op == OpKind::QkvGen) CHECK(e.direction == "d_out");
  }
  CHECK(max_stage == 1);
  CHECK(proj == 32);

  auto t1 = build_execution_table(a, {1, 1}, m, topo);
  for (const auto& e : t1.entries) CHECK(e.comm == Comm::None);

  device::PimTopology big;
  big.nodes = 2;
  auto m72 = model_preset("72B");
  auto t72 = build_execution_table(match_patterns(build_decoder_graph(m72)), {1, 16}, m72, big);
  std::map<int, std::set<int>> layers;
  for (const auto& e : t72.entries) layers[e.stage].insert(e.layer);
  CHECK(layers.size() == 16);
  for (const auto& [s, ls] : layers) CHECK(ls.size() == 5);

  CHECK_THROWS_AS(build_execution_table(a, {3, 1}, m, topo), Error);    // 32 kv heads / 3
  CHECK_THROWS_AS(build_execution_table(a, {32, 2}, m, topo), Error);   // 64 modules > 32
  CHECK_THROWS_AS(build_execution_table(a, {1, 33}, m, topo), Error);
}

TEST_CASE("QKT stack at d_h=128, 256 tokens per row: two DOTs per bank at T_cur=300") {
  ModelConfig m;
  m.n_layers = 1;
  m.n_heads = m.n_kv_heads = 1;
  m.head_dim = 128;
  auto g = partition::itpp_geometry(m, device::PimTopology{}, 1, 256);
  GprMap gpr;
  auto st = qkt_stack(g, m, gpr, 1000, 0);
  CHECK(isa::validate_stack(st).empty());
  dispatch::ConfigBuffer cfg{1, 0, {{5, 300}}};
  dispatch::Va2PaTable tab;
  tab.append(5, 33);
  tab.append(5, 34);
  auto cmds = dispatch::expand(st, cfg, tab, 5);
  std::vector<std::uint32_t> rows;
  for (const auto& c : cmds)
    if (auto* d = std::get_if<isa::DotProd>(&c)) rows.push_back(d->row);
  CHECK(rows == std::vector<std::uint32_t>{1033, 1034});
}

TEST_CASE("FC stacks are concrete; DOT count equals rows touched") {
  device::PimTopology topo;
  ModelConfig m;
  m.n_layers = 1;
  m.n_heads = m.n_kv_heads = 32;
  m.head_dim = 128;
  m.ffn = FfnVariant::ReluMlp;
  m.ffn_dim = 16384;
  auto cm = codegen(build_execution_table(match_patterns(build_decoder_graph(m)), {4, 1}, m, topo), m, topo);
  const auto& prog = cm.modules[0];
  const auto& fp = prog.manifest.layers[0].at(OpKind::Ffn1);
  CHECK(fp.shape.rows == 4096);
  CHECK(fp.shape.cols == 4096);
  const auto& st = prog.find(0, OpKind::Ffn1);
  for (const auto& e : st.entries) CHECK(isa::is_pim(e));
  auto cmds = dispatch::expand_static(st);
  std::set<std::uint32_t> rows;
  std::size_t dots = 0;
  for (const auto& c : cmds)
    if (auto* d = std::get_if<isa::DotProd>(&c)) rows.insert(d->row), ++dots;
  CHECK(dots == rows.size());
  CHECK(dots == fp.rows);
  CHECK(dots == 16 * 4);
}

TEST_CASE("attention stacks do not grow with context; static generator does") {
  auto m = model_preset("7B");
  device::PimTopology topo;
  auto g = partition::itpp_geometry(m, topo, 8, 1024);
  GprMap gpr;
  std::size_t dyn = isa::encoded_size(qkt_stack(g, m, gpr, 0, 0));
  std::size_t prev = 0;
  for (std::int64_t ctl : {4096, 8192, 16384, 32768}) {
    m.max_ctl = ctl;
    CHECK(isa::encoded_size(qkt_stack(g, m, gpr, 0, 0)) == dyn);
    std::size_t stat = static_encoded_size(static_qkt_commands(g, m, gpr, 0, 0, ctl));
    CHECK(stat > prev);
    prev = stat;
  }
  CHECK(prev > 10 * dyn);
}

TEST_CASE("codegen respects the command buffer budget and is deterministic") {
  device::PimTopology topo;
  topo.nodes = 4;
  auto m = model_preset("7B");
  auto tab = build_execution_table(match_patterns(build_decoder_graph(m)), {8, 4}, m, topo);
  auto a = codegen(tab, m, topo);
  auto b = codegen(tab, m, topo);
  REQUIRE(a.modules.size() == 32);
  for (std::size_t i = 0; i < a.modules.size(); ++i) {
    REQUIRE(a.modules[i].stacks.size() == b.modules[i].stacks.size());
    for (std::size_t j = 0; j < a.modules[i].stacks.size(); ++j)
      CHECK(isa::serialize(a.modules[i].stacks[j]) == isa::serialize(b.modules[i].stacks[j]));
    CHECK(a.modules[i].manifest.to_json() == b.modules[i].manifest.to_json());
  }
  const auto& mf = a.modules[0].manifest;
  CHECK(mf.layers.size() == 8);
  CHECK(mf.kv_slots > 0);
  CHECK(mf.weight_rows + mf.kv_slots * 8 * mf.geo.regions() <= std::uint32_t(topo.rows_per_bank));

  // a tiny topology cannot hold the FC stacks of one layer
  device::PimTopology tiny;
  tiny.rows_per_bank = 64;
  CHECK_THROWS_AS(codegen(build_execution_table(match_patterns(build_decoder_graph(m)), {1, 1}, m, tiny), m, tiny),
                  Error);
}

TEST_CASE("toy model: compiled execution equals the dense decoder") {
  auto m = model_preset("toy");
  auto w = runtime::random_weights(m, 1);
  for (auto [tp, pp] : std::vector<std::pair<int, int>>{{1, 1}, {2, 1}, {1, 2}, {2, 2}}) {
    for (bool pingpong : {false, true}) {
      CAPTURE(tp);
      CAPTURE(pp);
      auto cm = toy::compile(m, tp, pp);
      runtime::PimSystem sys(cm, toy::topology(), {}, w, pingpong);
      runtime::DenseDecoder ref(m, w);
      std::mt19937_64 rng(9);
      std::uniform_real_distribution<float> u(-1, 1);
      for (int id : {0, 1}) {
        auto kv = runtime::random_kv(m, id == 0 ? 5 : 9, 100 + id);
        sys.admit(id, kv);
        ref.add_request(id, kv);
      }
      for (int s = 0; s < 4; ++s)
        for (int id : {0, 1}) {
          std::vector<float> x(m.d_model());
          for (auto& v : x) v = u(rng);
          auto got = sys.step(id, x);
          auto want = ref.step(id, x);
          CHECK(toy::rel_err(got, want) < 1e-4);
        }
      // request 0 crossed a row boundary at token 9
      CHECK(sys.allocator(0).rows_held(0) == 2);
      CHECK(sys.allocator(0).rows_held(1) == 2);
    }
  }
}
