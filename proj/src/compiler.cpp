#include "pimsim/compiler.hpp"

#include <algorithm>
#include <set>
#include <unordered_map>

#include "json.hpp"

namespace pimsim::compiler {

using isa::OpKind;
using nlohmann::json;

const Node* DecoderGraph::find(const std::string& id) const {
  for (const auto& n : nodes)
    if (n.id == id) return &n;
  return nullptr;
}

std::string DecoderGraph::to_json() const {
  json j;
  j["nodes"] = json::array();
  for (const auto& n : nodes) {
    json o{{"id", n.id}, {"type", n.type}, {"inputs", n.inputs}, {"layer", n.layer}};
    if (n.type == "matmul" || n.type == "input") o["d_in"] = n.d_in, o["d_out"] = n.d_out;
    if (n.type == "attn_score" || n.type == "attn_value") o["heads"] = n.heads, o["head_dim"] = n.head_dim;
    j["nodes"].push_back(o);
  }
  return j.dump(1);
}

DecoderGraph DecoderGraph::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("graph json: ") + e.what());
  }
  if (!j.contains("nodes") || !j["nodes"].is_array()) throw Error("graph json: missing nodes array");
  DecoderGraph g;
  for (const auto& o : j["nodes"]) {
    Node n;
    n.id = o.at("id").get<std::string>();
    n.type = o.at("type").get<std::string>();
    if (o.contains("inputs")) n.inputs = o["inputs"].get<std::vector<std::string>>();
    n.d_in = o.value("d_in", std::int64_t(0));
    n.d_out = o.value("d_out", std::int64_t(0));
    n.heads = o.value("heads", 0);
    n.head_dim = o.value("head_dim", 0);
    n.layer = o.value("layer", -1);
    g.nodes.push_back(std::move(n));
  }
  g.check();
  return g;
}

namespace {

const std::set<std::string> kTypes{"input", "norm", "matmul", "attn_score", "softmax",
                                   "attn_value", "add", "mul", "silu", "relu"};

// Output width of each node; -1 for score tensors whose width depends on t.
std::unordered_map<std::string, std::int64_t> widths(const DecoderGraph& g) {
  std::unordered_map<std::string, std::int64_t> w;
  for (const auto& n : g.nodes) {
    auto in = [&](std::size_t i) { return w.at(n.inputs.at(i)); };
    if (n.type == "input") w[n.id] = n.d_out;
    else if (n.type == "matmul") w[n.id] = n.d_out;
    else if (n.type == "attn_score" || n.type == "softmax") w[n.id] = -1;
    else if (n.type == "attn_value") w[n.id] = std::int64_t(n.heads) * n.head_dim;
    else w[n.id] = in(0);
  }
  return w;
}

}  // namespace

void DecoderGraph::check() const {
  std::set<std::string> seen;
  for (const auto& n : nodes) {
    if (!kTypes.count(n.type)) throw Error("graph: node '" + n.id + "' has unknown type '" + n.type + "'");
    for (const auto& i : n.inputs)
      if (!seen.count(i)) throw Error("graph: node '" + n.id + "' uses '" + i + "' before it is defined");
    if (!seen.insert(n.id).second) throw Error("graph: duplicate node id '" + n.id + "'");
    if ((n.type == "matmul" || n.type == "input") && n.d_out < 1)
      throw Error("graph: unshaped node '" + n.id + "'");
    if (n.type == "matmul" && (n.d_in < 1 || n.inputs.size() != 1))
      throw Error("graph: unshaped node '" + n.id + "'");
    if ((n.type == "attn_score" || n.type == "attn_value") &&
        (n.heads < 1 || n.head_dim < 1 || n.inputs.size() != 2))
      throw Error("graph: unshaped node '" + n.id + "'");
    if (n.type != "input" && n.inputs.empty()) throw Error("graph: node '" + n.id + "' has no inputs");
  }
  auto w = widths(*this);
  for (const auto& n : nodes) {
    auto in = [&](std::size_t i) { return w.at(n.inputs.at(i)); };
    auto bad = [&] { throw Error("graph: shape mismatch at node '" + n.id + "'"); };
    if (n.type == "matmul" && in(0) != n.d_in) bad();
    if (n.type == "attn_score") {
      std::int64_t q = in(0), k = in(1), hd = n.head_dim;
      if (q != n.heads * hd || k < hd || k % hd || n.heads % (k / hd)) bad();
    }
    if (n.type == "attn_value") {
      std::int64_t v = in(1), hd = n.head_dim;
      if (in(0) != -1 || v < hd || v % hd || n.heads % (v / hd)) bad();
    }
    if (n.type == "softmax" && in(0) != -1) bad();
    if ((n.type == "add" || n.type == "mul") && (n.inputs.size() != 2 || in(0) != in(1))) bad();
    if ((n.type == "norm" || n.type == "silu" || n.type == "relu") && in(0) < 1) bad();
  }
}

DecoderGraph build_decoder_graph(const ModelConfig& m) {
  m.validate();
  DecoderGraph g;
  const std::int64_t d = m.d_model(), kv = m.kv_dim(), f = m.ffn_dim;
  auto add = [&](Node n) { g.nodes.push_back(std::move(n)); };
  add({"x", "input", {}, d, d, 0, 0, -1});
  std::string resid = "x";
  for (int l = 0; l < m.n_layers; ++l) {
    std::string p = "L" + std::to_string(l) + ".";
    auto N = [&](std::string id, std::string type, std::vector<std::string> in, std::int64_t di = 0,
                 std::int64_t dout = 0, int heads = 0, int hd = 0) {
      add({p + id, std::move(type), std::move(in), di, dout, heads, hd, l});
    };
    N("norm1", "norm", {resid});
    N("wq", "matmul", {p + "norm1"}, d, d);
    N("wk", "matmul", {p + "norm1"}, d, kv);
    N("wv", "matmul", {p + "norm1"}, d, kv);
    N("qkt", "attn_score", {p + "wq", p + "wk"}, 0, 0, m.n_heads, m.head_dim);
    N("softmax", "softmax", {p + "qkt"});
    N("sv", "attn_value", {p + "softmax", p + "wv"}, 0, 0, m.n_heads, m.head_dim);
    N("wo", "matmul", {p + "sv"}, d, d);
    N("add1", "add", {resid, p + "wo"});
    N("norm2", "norm", {p + "add1"});
    if (m.ffn == FfnVariant::Swiglu) {
      N("wg", "matmul", {p + "norm2"}, d, f);
      N("wu", "matmul", {p + "norm2"}, d, f);
      N("act", "silu", {p + "wg"});
      N("gate", "mul", {p + "act", p + "wu"});
      N("wd", "matmul", {p + "gate"}, f, d);
    } else {
      N("wu", "matmul", {p + "norm2"}, d, f);
      N("act", "relu", {p + "wu"});
      N("wd", "matmul", {p + "act"}, f, d);
    }
    N("add2", "add", {p + "add1", p + "wd"});
    resid = p + "add2";
  }
  return g;
}

AnnotatedGraph match_patterns(const DecoderGraph& g) {
  g.check();
  AnnotatedGraph a;
  a.graph = g;
  const auto& nodes = a.graph.nodes;
  std::unordered_map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < nodes.size(); ++i) idx[nodes[i].id] = i;
  std::unordered_map<std::string, std::vector<std::size_t>> users;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (const auto& in : nodes[i].inputs) users[in].push_back(i);
  auto w = widths(g);

  std::vector<int> claim(nodes.size(), -1);
  auto take = [&](std::size_t i, OpKind k) {
    if (claim[i] >= 0 && claim[i] != int(k))
      throw Error("ambiguous match: node '" + nodes[i].id + "' claimed as " +
                  isa::op_kind_name(OpKind(claim[i])) + " and " + isa::op_kind_name(k));
    claim[i] = int(k);
  };
  auto is = [&](const std::string& id, const char* type) { return nodes[idx.at(id)].type == type; };

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    if (n.type == "attn_score") {
      take(i, OpKind::Qkt);
      for (const auto& in : n.inputs)
        if (is(in, "matmul")) take(idx[in], OpKind::QkvGen);
      // Q and K/V widths differ under grouped-query attention
      if (w[n.inputs[0]] != w[n.inputs[1]]) a.gqa = true;
      a.layers++;
    } else if (n.type == "softmax") {
      take(i, OpKind::Softmax);
    } else if (n.type == "attn_value") {
      take(i, OpKind::Sv);
      if (is(n.inputs[1], "matmul")) take(idx[n.inputs[1]], OpKind::QkvGen);
      for (auto u : users[n.id])
        if (nodes[u].type == "matmul") take(u, OpKind::Proj);
    } else if (n.type == "mul") {
      // gated FFN: silu(matmul(h)) * matmul(h), then a down projection
      const Node* a0 = &nodes[idx[n.inputs[0]]];
      const Node* a1 = &nodes[idx[n.inputs[1]]];
      if (a1->type == "silu") std::swap(a0, a1);
      if (a0->type == "silu" && a1->type == "matmul" && is(a0->inputs[0], "matmul") &&
          nodes[idx[a0->inputs[0]]].inputs == a1->inputs) {
        take(idx[a0->inputs[0]], OpKind::Ffn1);
        take(idx[a1->id], OpKind::Ffn1);
        take(idx[a0->id], OpKind::Act);
        take(i, OpKind::Act);
        for (auto u : users[n.id])
          if (nodes[u].type == "matmul") take(u, OpKind::Ffn2);
        a.swiglu = true;
      }
    } else if (n.type == "relu") {
      if (is(n.inputs[0], "matmul")) {
        take(idx[n.inputs[0]], OpKind::Ffn1);
        take(i, OpKind::Act);
        for (auto u : users[n.id])
          if (nodes[u].type == "matmul") take(u, OpKind::Ffn2);
      }
    } else if (n.type == "input" || n.type == "norm" || n.type == "add") {
      take(i, OpKind::Other);
    }
  }
  a.kinds.resize(nodes.size(), OpKind::Other);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (claim[i] < 0) a.unmatched.push_back(nodes[i].id);
    else a.kinds[i] = OpKind(claim[i]);
  }
  return a;
}

const char* comm_name(Comm c) {
  switch (c) {
    case Comm::None: return "none";
    case Comm::Broadcast: return "broadcast";
    case Comm::Gather: return "gather";
    case Comm::Reduce: return "reduce";
  }
  return "?";
}

void check_plan(const ParallelismPlan& p, const ModelConfig& m, const device::PimTopology& t) {
  if (p.tp < 1 || p.pp < 1 || p.micro_batch < 0) throw Error("plan: tp, pp must be >= 1");
  if (p.tp * p.pp > t.modules())
    throw Error("plan: tp*pp = " + std::to_string(p.tp * p.pp) + " exceeds " + std::to_string(t.modules()) +
                " modules");
  if (m.n_kv_heads % p.tp) throw Error("plan: tp must divide the kv head count");
  if (p.tp > m.ffn_dim) throw Error("plan: tp exceeds ffn_dim");
  if (p.pp > m.n_layers || std::int64_t(p.pp - 1) * p.layers_per_stage(m.n_layers) >= m.n_layers)
    throw Error("plan: pp leaves an empty stage");
}

ExecutionTable build_execution_table(const AnnotatedGraph& g, const ParallelismPlan& plan,
                                     const ModelConfig& m, const device::PimTopology& t) {
  check_plan(plan, m, t);
  if (!g.unmatched.empty()) throw Error("execution table: unmatched node '" + g.unmatched.front() + "'");
  if (g.layers != m.n_layers) throw Error("execution table: graph and model disagree on layer count");
  ExecutionTable tab;
  tab.plan = plan;
  tab.n_layers = m.n_layers;
  const bool itpp = plan.attention == partition::Strategy::Itpp;
  for (std::size_t i = 0; i < g.graph.nodes.size(); ++i) {
    const Node& n = g.graph.nodes[i];
    TableEntry e;
    e.layer = std::max(0, n.layer);
    e.op = g.kinds[i];
    e.stage = plan.stage_of(e.layer, m.n_layers);
    for (int r = 0; r < plan.tp; ++r) e.modules.push_back(plan.module_of(e.stage, r));
    const bool multi = plan.tp > 1;
    switch (e.op) {
      case OpKind::QkvGen:
      case OpKind::Ffn1:
        e.direction = "d_out";
        e.comm = multi ? Comm::Broadcast : Comm::None;
        break;
      case OpKind::Proj:
      case OpKind::Ffn2:
        e.direction = "d_in";
        e.comm = multi ? Comm::Reduce : Comm::None;
        break;
      case OpKind::Qkt:
        e.direction = itpp ? "token" : "head";
        break;
      case OpKind::Sv:
      case OpKind::Softmax:
        e.direction = "head";
        break;
      case OpKind::Act:
        e.direction = "d_out";
        break;
      default:
        e.direction = "none";
    }
    tab.entries.push_back(std::move(e));
  }
  return tab;
}

std::string ExecutionTable::to_json() const {
  json j;
  j["tp"] = plan.tp;
  j["pp"] = plan.pp;
  j["attention"] = partition::strategy_name(plan.attention);
  j["layers"] = n_layers;
  j["entries"] = json::array();
  for (const auto& e : entries)
    j["entries"].push_back({{"layer", e.layer}, {"op", isa::op_kind_name(e.op)}, {"direction", e.direction},
                            {"comm", comm_name(e.comm)}, {"stage", e.stage}, {"modules", e.modules}});
  return j.dump(1);
}

ShardDims shard_dims(const ModelConfig& m, int tp, int rank) {
  ShardDims s;
  s.kv_heads = m.n_kv_heads / tp;
  s.first_kv = rank * s.kv_heads;
  s.q_heads = s.kv_heads * m.gqa_rep();
  s.first_q = s.first_kv * m.gqa_rep();
  s.ffn = m.ffn_dim / tp + (rank < m.ffn_dim % tp ? 1 : 0);
  s.first_ffn = rank * (m.ffn_dim / tp) + std::min(rank, m.ffn_dim % tp);
  return s;
}

device::GemvShape fc_shard_shape(const ModelConfig& m, OpKind op, const ShardDims& s) {
  const std::int64_t d = m.d_model(), dh = m.head_dim;
  const std::int64_t gate = m.ffn == FfnVariant::Swiglu ? 2 : 1;
  switch (op) {
    case OpKind::QkvGen: return {(s.q_heads + 2 * s.kv_heads) * dh, d};
    case OpKind::Proj: return {d, s.q_heads * dh};
    case OpKind::Ffn1: return {gate * s.ffn, d};
    case OpKind::Ffn2: return {d, s.ffn};
    default: throw Error("fc_shard_shape: not an FC op");
  }
}

const FcPlacement& LayerManifest::at(OpKind op) const {
  for (const auto& f : fc)
    if (f.op == op) return f;
  throw Error("manifest: no FC placement for op");
}

std::string Manifest::to_json() const {
  json j;
  j["module"] = module_id;
  j["stage"] = stage;
  j["tp_rank"] = tp_rank;
  j["first_kv_head"] = first_head;
  j["weight_va"] = {0, weight_rows};
  j["kv_slots_per_region"] = kv_slots;
  j["kv_va_per_request"] = {0, max_virtual_rows};
  j["geometry"] = {{"tokens_per_row", geo.tokens_per_row}, {"tau", geo.tau}, {"heads_per_row", geo.heads_per_row},
                   {"k_groups", geo.k_groups}, {"v_groups", geo.v_groups}, {"v_rounds", geo.v_rounds}};
  j["gpr"] = {{"fc_in", gpr.fc_in}, {"fc_out", gpr.fc_out}, {"q", gpr.q},
              {"scores", gpr.scores}, {"probs", gpr.probs}, {"sv_out", gpr.sv_out}};
  j["layers"] = json::array();
  for (const auto& l : layers) {
    json o{{"layer", l.layer}, {"k_regions", l.k_regions}, {"v_regions", l.v_regions}};
    for (const auto& f : l.fc)
      o["fc"].push_back({{"op", isa::op_kind_name(f.op)}, {"d_out", f.shape.rows}, {"d_in", f.shape.cols},
                         {"row_base", f.row_base}, {"rows", f.rows}});
    j["layers"].push_back(o);
  }
  return j.dump(1);
}

std::vector<const isa::CommandStack*> ModuleProgram::layer_stacks(int layer) const {
  std::vector<const isa::CommandStack*> v;
  for (const auto& s : stacks)
    if (int(s.meta.layer_id) == layer) v.push_back(&s);
  return v;
}

const isa::CommandStack& ModuleProgram::find(int layer, OpKind op, std::uint32_t index) const {
  for (const auto& s : stacks)
    if (int(s.meta.layer_id) == layer && s.meta.op_kind == op && s.meta.index == index) return s;
  throw Error("no stack for layer " + std::to_string(layer) + " op " + isa::op_kind_name(op));
}

namespace {

isa::Entry entry_of(const isa::PimCommand& c) {
  return std::visit([](const auto& x) -> isa::Entry { return x; }, c);
}

}  // namespace

isa::CommandStack qkt_stack(const partition::ItppGeometry& g, const ModelConfig& m, const GprMap& gpr,
                            std::uint32_t k_region, int group) {
  const int ge = std::min(g.heads_per_row, g.kv_heads_local - group * g.heads_per_row);
  std::vector<isa::PimCommand> body;
  std::vector<isa::DynField> dyn;
  for (int s = 0; s < g.tau; ++s)
    for (int h = 0; h < ge; ++h) {
      dyn.push_back({body.size(), isa::Field::Row, 1});
      body.push_back(isa::DotProd{k_region, std::uint32_t((s * g.heads_per_row + h) * m.head_dim)});
      dyn.push_back({body.size(), isa::Field::GprIndex, g.tau * ge});
      body.push_back(isa::RdOut{gpr.scores + std::uint32_t(s * ge + h)});
    }
  isa::CommandStack st;
  st.entries.push_back(isa::WrInp{gpr.q + std::uint32_t(group)});
  auto loop = isa::encode_loop(body, dyn, 1, g.tokens_per_row);
  st.entries.insert(st.entries.end(), loop.entries.begin(), loop.entries.end());
  st.meta.op_kind = OpKind::Qkt;
  st.meta.index = std::uint32_t(group);
  return st;
}

isa::CommandStack sv_stack(const partition::ItppGeometry& g, const GprMap& gpr, std::uint32_t v_region,
                           int round) {
  std::vector<isa::PimCommand> body{isa::WrInp{gpr.probs}, isa::DotProd{v_region, 0}};
  std::vector<isa::DynField> dyn{{0, isa::Field::GprIndex, 1}, {1, isa::Field::Row, 1}};
  isa::CommandStack st = isa::encode_loop(body, dyn, 1, g.tokens_per_row);
  st.entries.push_back(isa::RdOut{gpr.sv_out});
  st.meta.op_kind = OpKind::Sv;
  st.meta.index = std::uint32_t(round);
  return st;
}

std::vector<isa::PimCommand> static_qkt_commands(const partition::ItppGeometry& g, const ModelConfig& m,
                                                 const GprMap& gpr, std::uint32_t k_region, int group,
                                                 std::int64_t t) {
  auto st = qkt_stack(g, m, gpr, k_region, group);
  dispatch::ConfigBuffer cfg{1, 0, {{0, t}}};
  dispatch::Va2PaTable tab;
  for (std::int64_t v = 0; v < ceil_div(t, g.tokens_per_row); ++v) tab.append(0, std::uint32_t(v));
  return dispatch::expand(st, cfg, tab, 0);
}

std::size_t static_encoded_size(const std::vector<isa::PimCommand>& cmds) {
  isa::CommandStack s;
  for (const auto& c : cmds) s.entries.push_back(entry_of(c));
  return isa::encoded_size(s);
}

CompiledModel codegen(const ExecutionTable& table, const ModelConfig& m, const device::PimTopology& t,
                      int tokens_per_row) {
  const auto& plan = table.plan;
  check_plan(plan, m, t);
  CompiledModel cm;
  cm.model = m;
  cm.table = table;
  cm.tokens_per_row = tokens_per_row;
  const int lps = plan.layers_per_stage(m.n_layers);
  const auto geo = partition::itpp_geometry(m, t, plan.tp, tokens_per_row);
  const bool itpp = plan.attention == partition::Strategy::Itpp;
  const OpKind fc_ops[] = {OpKind::QkvGen, OpKind::Proj, OpKind::Ffn1, OpKind::Ffn2};
  const std::int64_t chunk = device::gemv_chunk_elems(t);

  for (int stage = 0; stage < plan.pp; ++stage) {
    const int l0 = stage * lps, l1 = std::min(m.n_layers, l0 + lps);
    for (int rank = 0; rank < plan.tp; ++rank) {
      ModuleProgram prog;
      Manifest& mf = prog.manifest;
      mf.module_id = plan.module_of(stage, rank);
      mf.stage = stage;
      mf.tp_rank = rank;
      const ShardDims sd = shard_dims(m, plan.tp, rank);
      mf.first_head = sd.first_kv;
      mf.geo = geo;
      mf.max_virtual_rows = ceil_div(m.max_ctl, tokens_per_row);

      std::uint32_t row = 0;
      for (int l = l0; l < l1; ++l) {
        LayerManifest lm;
        lm.layer = l;
        for (OpKind op : fc_ops) {
          auto shape = fc_shard_shape(m, op, sd);
          std::uint32_t rows = std::uint32_t(ceil_div(shape.rows, t.pus()) * ceil_div(shape.cols, chunk));
          lm.fc.push_back({op, shape, row, rows});
          row += rows;
        }
        mf.layers.push_back(std::move(lm));
      }
      mf.weight_rows = row;
      const std::int64_t regions = std::int64_t(l1 - l0) * geo.regions();
      const std::int64_t left = std::int64_t(t.rows_per_bank) - row;
      if (left < regions)
        throw Error("codegen: module " + std::to_string(mf.module_id) + " has no rows left for the KV-cache (" +
                    std::to_string(row) + " weight rows)");
      mf.kv_slots = std::uint32_t(left / regions);
      std::uint32_t base = row;
      for (auto& lm : mf.layers) {
        for (int k = 0; k < geo.k_groups; ++k, base += mf.kv_slots) lm.k_regions.push_back(base);
        for (int v = 0; v < geo.v_rounds; ++v, base += mf.kv_slots) lm.v_regions.push_back(base);
      }

      for (const auto& lm : mf.layers) {
        for (const auto& f : lm.fc) {
          isa::CommandStack st;
          for (const auto& c : device::gemv_commands(f.shape, t, f.row_base, mf.gpr.fc_in, mf.gpr.fc_out))
            st.entries.push_back(entry_of(c));
          st.meta = {std::uint32_t(lm.layer), f.op, std::uint32_t(mf.module_id), 0};
          prog.stacks.push_back(std::move(st));
        }
        if (!itpp) continue;
        // one stack per K group / V round; the hub reruns it for each query
        // head sharing the group's kv heads, rewriting the GPR input slot
        for (int k = 0; k < geo.k_groups; ++k) {
          auto st = qkt_stack(geo, m, mf.gpr, lm.k_regions[k], k);
          st.meta.layer_id = std::uint32_t(lm.layer);
          st.meta.module_id = std::uint32_t(mf.module_id);
          prog.stacks.push_back(std::move(st));
        }
        for (int v = 0; v < geo.v_rounds; ++v) {
          auto st = sv_stack(geo, mf.gpr, lm.v_regions[v], v);
          st.meta.layer_id = std::uint32_t(lm.layer);
          st.meta.module_id = std::uint32_t(mf.module_id);
          prog.stacks.push_back(std::move(st));
        }
      }
      // the hub holds one layer's stacks at a time
      for (const auto& lm : mf.layers) {
        std::vector<isa::CommandStack> layer;
        for (const auto* s : prog.layer_stacks(lm.layer)) layer.push_back(*s);
        try {
          dispatch::load_stacks(layer);
        } catch (const Error& e) {
          throw Error("codegen: module " + std::to_string(mf.module_id) + " layer " + std::to_string(lm.layer) +
                      ": " + e.what());
        }
      }
      cm.modules.push_back(std::move(prog));
    }
  }
  return cm;
}

}  // namespace pimsim::compiler
