#include "pimsim/partition.hpp"

#include <algorithm>
#include <map>
#include "json.hpp"
#include <sstream>

namespace pimsim::partition {

const char* layer_op_name(LayerOp op) {
  switch (op) {
    case LayerOp::QkvGen: return "QKV_GEN";
    case LayerOp::Proj: return "PROJ";
    case LayerOp::Ffn1: return "FFN1";
    case LayerOp::Ffn2: return "FFN2";
    case LayerOp::Qkt: return "QKT";
    case LayerOp::Sv: return "SV";
  }
  return "?";
}

const char* strategy_name(Strategy s) { return s == Strategy::Hfa ? "HFA" : "ITPP"; }

FcPartition partition_fc(const LayerShape& s, int tp, int eb) {
  if (s.op == LayerOp::Qkt || s.op == LayerOp::Sv) throw Error("partition_fc: not an FC op");
  if (tp < 1) throw Error("partition_fc: tp must be >= 1");
  if (s.d_in < 1 || s.d_out < 1) throw Error("partition_fc: empty shape");
  FcPartition p;
  p.split_out = s.op == LayerOp::QkvGen || s.op == LayerOp::Ffn1;
  const std::int64_t dim = p.split_out ? s.d_out : s.d_in;
  if (tp > dim)
    throw Error("partition_fc: tp " + std::to_string(tp) + " exceeds splittable dimension " +
                std::to_string(dim));
  // balanced split, sizes differ by at most one
  std::int64_t off = 0;
  for (int i = 0; i < tp; ++i) {
    std::int64_t n = dim / tp + (i < dim % tp ? 1 : 0);
    FcShard sh;
    if (p.split_out) {
      sh = {s.d_in, n, 0, off};
    } else {
      sh = {n, s.d_out, off, 0};
    }
    p.shards.push_back(sh);
    off += n;
  }
  if (tp > 1) {
    if (p.split_out) {
      p.broadcast_bytes = std::int64_t(tp - 1) * s.d_in * eb;
      p.gather_bytes = (s.d_out - p.shards[0].d_out) * eb;
    } else {
      // ring all-reduce volume per participant
      p.reduce_bytes = ceil_div(2 * std::int64_t(tp - 1) * s.d_out * eb, tp);
    }
  }
  return p;
}

std::vector<float> reassemble(const FcPartition& p, const std::vector<std::vector<float>>& outs,
                              std::int64_t d_out) {
  if (outs.size() != p.shards.size()) throw Error("reassemble: shard count mismatch");
  std::vector<float> y(d_out, 0.0f);
  for (std::size_t i = 0; i < outs.size(); ++i) {
    const auto& sh = p.shards[i];
    if (std::int64_t(outs[i].size()) != sh.d_out) throw Error("reassemble: shard output size");
    for (std::int64_t j = 0; j < sh.d_out; ++j) y[sh.out_offset + j] += outs[i][j];
  }
  return y;
}

ItppGeometry itpp_geometry(const ModelConfig& m, const device::PimTopology& t, int tp, int T) {
  if (tp < 1 || m.n_kv_heads % tp) throw Error("tp " + std::to_string(tp) + " does not divide kv heads");
  const int P = t.pus(), R = t.row_elems();
  if (T < P || T % P) throw Error("tokens_per_row must be a multiple of the PU count");
  if (T > R || T > t.gb_elems()) throw Error("tokens_per_row exceeds a row or the global buffer");
  ItppGeometry g;
  g.kv_heads_local = m.n_kv_heads / tp;
  g.tokens_per_row = T;
  g.tau = T / P;
  if (std::int64_t(g.tau) * m.head_dim > R) throw Error("head_dim × token slots do not fit a row");
  g.heads_per_row = std::min(g.kv_heads_local, R / (g.tau * m.head_dim));
  g.k_groups = int(ceil_div(g.kv_heads_local, g.heads_per_row));
  g.ch_per_group = int(std::min<std::int64_t>(t.channels, ceil_div(m.head_dim, t.banks)));
  g.dims_per_group = g.ch_per_group * t.banks;
  g.v_groups = t.channels / g.ch_per_group;
  g.dim_blocks = int(ceil_div(m.head_dim, g.dims_per_group));
  g.v_rounds = int(ceil_div(std::int64_t(g.kv_heads_local) * g.dim_blocks, g.v_groups));
  return g;
}

namespace {

void check_capacity(const std::vector<KvRequest>& reqs, const ModelConfig& m,
                    const device::PimTopology& topo, int tp) {
  std::int64_t bytes = 0;
  for (const auto& r : reqs) {
    if (r.t < 0) throw Error("place_kv: negative token count");
    bytes += r.t * m.kv_bytes_per_token(topo.element_bytes) / m.n_layers;  // one layer
  }
  if (bytes > topo.module_capacity_bytes() * tp)
    throw Error("place_kv: KV-cache exceeds module capacity");
}

}  // namespace

PlacementPlan place_kv(Strategy s, const std::vector<KvRequest>& reqs, const ModelConfig& m,
                       const device::PimTopology& topo, int tp, int T) {
  m.validate();
  check_capacity(reqs, m, topo, tp);
  PlacementPlan plan;
  plan.strategy = s;
  plan.modules = tp;
  plan.channels = topo.channels;
  plan.banks = topo.banks;
  const int C = topo.channels, Bk = topo.banks, P = topo.pus(), dh = m.head_dim;
  if (m.n_kv_heads % tp) throw Error("place_kv: tp does not divide kv heads");
  const int hloc = m.n_kv_heads / tp;

  if (s == Strategy::Hfa) {
    const std::int64_t chan_bytes =
        std::int64_t(Bk) * topo.rows_per_bank * topo.row_bytes;
    const int dpb = int(ceil_div(dh, Bk));
    const int tok_per_bank_row = std::max(1, topo.row_elems() / dh);
    const int R = topo.row_elems();
    for (int mod = 0; mod < tp; ++mod) {
      int pair = 0;
      for (const auto& r : reqs) {
        if (2 * r.t * dh * topo.element_bytes > chan_bytes)
          throw Error("place_kv: HFA infeasible, one head's KV exceeds a channel");
        for (int h = 0; h < hloc; ++h, ++pair) {
          int head = mod * hloc + h, ch = pair % C;
          if (r.t == 0) continue;
          const std::int64_t k_alloc = ceil_div(r.t, std::int64_t(Bk) * tok_per_bank_row) * tok_per_bank_row;
          const std::int64_t v_alloc = ceil_div(r.t, R) * R;
          for (int b = 0; b < Bk; ++b) {
            plan.slices.push_back({mod, ch, b, r.id, head, KvKind::K, b, r.t, Bk, 0, dh, k_alloc});
            int d0 = b * dpb, d1 = std::min(dh, d0 + dpb);
            if (d0 < d1) plan.slices.push_back({mod, ch, b, r.id, head, KvKind::V, 0, r.t, 1, d0, d1, v_alloc});
          }
        }
      }
    }
    return plan;
  }

  const ItppGeometry g = itpp_geometry(m, topo, tp, T);
  for (int mod = 0; mod < tp; ++mod) {
    for (const auto& r : reqs) {
      if (r.t == 0) continue;
      const std::int64_t chunks = ceil_div(r.t, T);
      for (int h = 0; h < hloc; ++h) {
        int head = mod * hloc + h;
        for (int u = 0; u < P; ++u)
          plan.slices.push_back({mod, u / Bk, u % Bk, r.id, head, KvKind::K, u, r.t, P, 0, dh, chunks * g.tau});
      }
      for (int i = 0; i < hloc * g.dim_blocks; ++i) {
        int grp = i % g.v_groups, h = i / g.dim_blocks, db = i % g.dim_blocks;
        for (int cc = 0; cc < g.ch_per_group; ++cc)
          for (int b = 0; b < Bk; ++b) {
            int dim = db * g.dims_per_group + cc * Bk + b;
            if (dim >= dh) continue;
            plan.slices.push_back({mod, grp * g.ch_per_group + cc, b, r.id, mod * hloc + h, KvKind::V, 0,
                                   r.t, 1, dim, dim + 1, chunks * T});
          }
      }
    }
  }
  return plan;
}

Occupancy occupancy(const PlacementPlan& p) {
  Occupancy o;
  const std::int64_t nch = std::int64_t(p.modules) * p.channels, npu = nch * p.banks;
  if (p.slices.empty() || npu == 0) return o;
  std::vector<std::int64_t> load(npu, 0);
  std::vector<char> ch_used(nch, 0);
  for (const auto& s : p.slices) {
    std::int64_t c = std::int64_t(s.module) * p.channels + s.channel;
    ch_used[c] = 1;
    load[c * p.banks + s.bank] += s.alloc_tokens * (s.dim_end - s.dim_begin);
  }
  std::int64_t used_ch = std::count(ch_used.begin(), ch_used.end(), 1);
  std::int64_t used_pu = std::count_if(load.begin(), load.end(), [](auto v) { return v > 0; });
  // ITPP reserves every PU of the module even when a request has fewer tokens
  // than PUs, so a zero-token slice still counts as occupied storage
  std::int64_t total = 0, mx = 0;
  for (auto v : load) total += v, mx = std::max(mx, v);
  o.channel_occupancy = double(used_ch) / nch;
  o.bank_occupancy = double(used_pu) / npu;
  o.imbalance = total ? double(mx) / (double(total) / npu) : 1.0;
  return o;
}

std::string check_coverage(const PlacementPlan& p, const std::vector<KvRequest>& reqs,
                           const ModelConfig& m) {
  // count[request][kind][head][token][dim]
  std::map<int, std::int64_t> t_of;
  for (const auto& r : reqs) t_of[r.id] = r.t;
  std::map<int, std::vector<std::uint8_t>> cnt;
  const int H = m.n_kv_heads, dh = m.head_dim;
  for (const auto& r : reqs) cnt[r.id].assign(std::size_t(2) * H * r.t * dh, 0);
  for (const auto& s : p.slices) {
    auto it = cnt.find(s.request);
    if (it == cnt.end()) return "slice for unknown request " + std::to_string(s.request);
    std::int64_t t = t_of[s.request];
    if (s.head < 0 || s.head >= H) return "slice head out of range";
    if (s.token_begin < 0 || s.token_end > t || s.dim_begin < 0 || s.dim_end > dh || s.token_stride < 1)
      return "slice out of bounds";
    for (std::int64_t j = s.token_begin; j < s.token_end; j += s.token_stride)
      for (int d = s.dim_begin; d < s.dim_end; ++d) {
        auto& c = it->second[((std::size_t(s.kind == KvKind::V) * H + s.head) * t + j) * dh + d];
        if (++c > 1) {
          std::ostringstream os;
          os << "element placed twice: request " << s.request << " head " << s.head << " token " << j
             << " dim " << d;
          return os.str();
        }
      }
  }
  for (const auto& [id, v] : cnt)
    if (std::find(v.begin(), v.end(), 0) != v.end()) return "request " + std::to_string(id) + " not fully placed";
  return "";
}

std::string plan_json(const PlacementPlan& p) {
  nlohmann::json j;
  j["strategy"] = strategy_name(p.strategy);
  j["modules"] = p.modules;
  j["channels"] = p.channels;
  j["banks"] = p.banks;
  auto& arr = j["slices"] = nlohmann::json::array();
  for (const auto& s : p.slices)
    arr.push_back({{"module", s.module}, {"channel", s.channel}, {"bank", s.bank}, {"request", s.request},
                   {"head", s.head}, {"kind", s.kind == KvKind::K ? "K" : "V"},
                   {"tokens", {s.token_begin, s.token_end, s.token_stride}},
                   {"dims", {s.dim_begin, s.dim_end}}});
  auto o = occupancy(p);
  j["occupancy"] = {{"channel", o.channel_occupancy}, {"bank", o.bank_occupancy}, {"imbalance", o.imbalance}};
  return j.dump(2);
}

}  // namespace pimsim::partition
