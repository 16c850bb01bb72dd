#include "pimsim/runtime.hpp"

#include <cmath>
#include <random>

namespace pimsim::runtime {

using isa::OpKind;
using device::GprVector;

namespace {

std::vector<float> rand_vec(std::mt19937_64& rng, std::size_t n, float a) {
  std::uniform_real_distribution<float> u(-a, a);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// y = W x with W row-major (rows × cols), double accumulation
std::vector<double> matvec(const std::vector<float>& W, const std::vector<double>& x, std::int64_t rows) {
  const std::int64_t cols = std::int64_t(x.size());
  std::vector<double> y(rows, 0.0);
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0;
    const float* w = W.data() + r * cols;
    for (std::int64_t c = 0; c < cols; ++c) s += double(w[c]) * x[c];
    y[r] = s;
  }
  return y;
}

std::vector<double> layer_norm(const std::vector<double>& x) {
  double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= double(x.size());
  for (double v : x) var += (v - mean) * (v - mean);
  var /= double(x.size());
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + 1e-5);
  return y;
}

}  // namespace

DenseWeights random_weights(const ModelConfig& m, std::uint64_t seed, float scale) {
  m.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = m.d_model(), kv = m.kv_dim(), f = m.ffn_dim;
  auto mat = [&](std::size_t rows, std::size_t cols) {
    return rand_vec(rng, rows * cols, scale * std::sqrt(3.0f / float(cols)));
  };
  DenseWeights w;
  for (int l = 0; l < m.n_layers; ++l) {
    LayerWeights lw;
    lw.wq = mat(d, d);
    lw.wk = mat(kv, d);
    lw.wv = mat(kv, d);
    lw.wo = mat(d, d);
    if (m.ffn == FfnVariant::Swiglu) lw.wg = mat(f, d);
    lw.wu = mat(f, d);
    lw.wd = mat(d, f);
    w.layers.push_back(std::move(lw));
  }
  return w;
}

KvCache random_kv(const ModelConfig& m, std::int64_t t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  KvCache c;
  c.kv_dim = m.kv_dim();
  for (int l = 0; l < m.n_layers; ++l) {
    c.k.push_back(rand_vec(rng, std::size_t(t) * c.kv_dim, 1.0f));
    c.v.push_back(rand_vec(rng, std::size_t(t) * c.kv_dim, 1.0f));
  }
  return c;
}

void DenseDecoder::add_request(int id, KvCache prefill) {
  if (cache_.count(id)) throw Error("dense decoder: duplicate request");
  if (int(prefill.k.size()) != m_.n_layers) prefill.k.resize(m_.n_layers), prefill.v.resize(m_.n_layers);
  prefill.kv_dim = m_.kv_dim();
  cache_[id] = std::move(prefill);
}

std::vector<float> DenseDecoder::step(int id, const std::vector<float>& xin) {
  auto& c = cache_.at(id);
  const int d = m_.d_model(), kvd = m_.kv_dim(), dh = m_.head_dim, rep = m_.gqa_rep();
  if (int(xin.size()) != d) throw Error("dense decoder: input width");
  std::vector<double> x(xin.begin(), xin.end());
  for (int l = 0; l < m_.n_layers; ++l) {
    const auto& w = w_.layers[l];
    auto h = layer_norm(x);
    auto q = matvec(w.wq, h, d), k = matvec(w.wk, h, kvd), v = matvec(w.wv, h, kvd);
    for (int i = 0; i < kvd; ++i) c.k[l].push_back(float(k[i])), c.v[l].push_back(float(v[i]));
    const std::int64_t t = std::int64_t(c.k[l].size()) / kvd;
    std::vector<double> o(d, 0.0);
    for (int hq = 0; hq < m_.n_heads; ++hq) {
      int hk = hq / rep;
      std::vector<double> s(t);
      double mx = -1e300;
      for (std::int64_t j = 0; j < t; ++j) {
        double acc = 0;
        for (int e = 0; e < dh; ++e) acc += q[hq * dh + e] * c.k[l][j * kvd + hk * dh + e];
        s[j] = acc / std::sqrt(double(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::int64_t j = 0; j < t; ++j)
        for (int e = 0; e < dh; ++e) o[hq * dh + e] += s[j] / z * c.v[l][j * kvd + hk * dh + e];
    }
    auto a = matvec(w.wo, o, d);
    for (int i = 0; i < d; ++i) x[i] += a[i];
    auto h2 = layer_norm(x);
    std::vector<double> act;
    if (m_.ffn == FfnVariant::Swiglu) {
      auto g = matvec(w.wg, h2, m_.ffn_dim), u = matvec(w.wu, h2, m_.ffn_dim);
      act.resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) act[i] = u[i] * g[i] / (1.0 + std::exp(-g[i]));
    } else {
      act = matvec(w.wu, h2, m_.ffn_dim);
      for (auto& e : act) e = std::max(0.0, e);
    }
    auto f = matvec(w.wd, act, d);
    for (int i = 0; i < d; ++i) x[i] += f[i];
  }
  return {x.begin(), x.end()};
}

// ---------------- functional PIM execution ----------------

namespace {

// Shard matrix for one module, row-major (shape.rows × shape.cols).
std::vector<float> shard_matrix(const ModelConfig& m, const LayerWeights& w, OpKind op,
                                const compiler::ShardDims& s) {
  const std::int64_t d = m.d_model(), dh = m.head_dim, f = m.ffn_dim;
  std::vector<float> out;
  auto rows = [&](const std::vector<float>& W, std::int64_t cols, std::int64_t r0, std::int64_t n) {
    out.insert(out.end(), W.begin() + r0 * cols, W.begin() + (r0 + n) * cols);
  };
  auto cols = [&](const std::vector<float>& W, std::int64_t ncols, std::int64_t nrows, std::int64_t c0,
                  std::int64_t n) {
    for (std::int64_t r = 0; r < nrows; ++r)
      out.insert(out.end(), W.begin() + r * ncols + c0, W.begin() + r * ncols + c0 + n);
  };
  switch (op) {
    case OpKind::QkvGen:
      rows(w.wq, d, s.first_q * dh, s.q_heads * dh);
      rows(w.wk, d, s.first_kv * dh, s.kv_heads * dh);
      rows(w.wv, d, s.first_kv * dh, s.kv_heads * dh);
      break;
    case OpKind::Proj: cols(w.wo, d, d, s.first_q * dh, s.q_heads * dh); break;
    case OpKind::Ffn1:
      if (m.ffn == FfnVariant::Swiglu) rows(w.wg, d, s.first_ffn, s.ffn);
      rows(w.wu, d, s.first_ffn, s.ffn);
      break;
    case OpKind::Ffn2: cols(w.wd, f, d, s.first_ffn, s.ffn); break;
    default: throw Error("shard_matrix: not an FC op");
  }
  return out;
}

void place_gemv(device::ModuleState& st, const compiler::FcPlacement& fp, const std::vector<float>& W) {
  const auto& t = st.topology();
  const std::int64_t P = t.pus(), C = device::gemv_chunk_elems(t);
  const std::int64_t K = ceil_div(fp.shape.cols, C);
  for (std::int64_t o = 0; o < fp.shape.rows; ++o) {
    const std::int64_t p = o / P, u = o % P;
    for (std::int64_t k = 0; k < K; ++k) {
      const std::int64_t n = std::min(C, fp.shape.cols - k * C);
      st.write_dram(std::uint32_t(fp.row_base + p * K + k), int(u), 0,
                    std::span<const float>(W.data() + o * fp.shape.cols + k * C, std::size_t(n)));
    }
  }
}

std::vector<isa::PimCommand> to_cmds(const isa::CommandStack& st) { return dispatch::expand_static(st); }

}  // namespace

PimSystem::PimSystem(const compiler::CompiledModel& cm, const device::PimTopology& topo,
                     const device::TimingParams& tm, const DenseWeights& w, bool pingpong)
    : cm_(cm), topo_(topo), tm_(tm) {
  if (cm.table.plan.attention != partition::Strategy::Itpp)
    throw Error("functional execution needs ITPP attention stacks");
  const auto& m = cm.model;
  for (const auto& prog : cm.modules) {
    auto st = std::make_unique<device::ModuleState>(topo, true, pingpong);
    const auto sd = compiler::shard_dims(m, cm.table.plan.tp, prog.manifest.tp_rank);
    for (const auto& lm : prog.manifest.layers)
      for (const auto& fp : lm.fc) place_gemv(*st, fp, shard_matrix(m, w.layers[lm.layer], fp.op, sd));
    mods_.push_back(std::move(st));
  }
  for (int s = 0; s < cm.table.plan.pp; ++s) {
    const auto& mf = cm.modules[cm.table.plan.module_of(s, 0)].manifest;
    memmgr::PoolConfig pc;
    pc.policy = memmgr::Policy::Lazy;
    pc.total_rows = mf.kv_slots;
    pc.tokens_per_row = cm.tokens_per_row;
    pc.max_ctl = m.max_ctl;
    pc.module_id = mf.module_id;
    pc.channels = topo.channels;
    pc.banks = topo.banks;
    alloc_.push_back(std::make_unique<memmgr::AllocatorState>(pc));
  }
}

void PimSystem::admit(int id, const KvCache& pre) {
  const auto& m = cm_.model;
  const std::int64_t t = pre.tokens();
  for (auto& a : alloc_)
    if (!a->admit(id, t)) throw Error("functional runtime: no KV rows for request " + std::to_string(id));
  t_cur_[id] = t;
  const int kvd = m.kv_dim();
  for (const auto& prog : cm_.modules)
    for (const auto& lm : prog.manifest.layers)
      for (std::int64_t j = 0; j < t; ++j)
        write_kv(prog.manifest.module_id, lm.layer, id, j, pre.k[lm.layer].data() + j * kvd,
                 pre.v[lm.layer].data() + j * kvd);
}

void PimSystem::release(int id) {
  for (auto& a : alloc_) a->release(id);
  t_cur_.erase(id);
}

void PimSystem::grow_all(int id, std::int64_t t) {
  for (auto& a : alloc_)
    if (!a->grow(id, t)) throw Error("functional runtime: out of KV rows for request " + std::to_string(id));
}

// Scatters one token's K and V (full kv_dim, global heads) into the module's
// share of the regions.
void PimSystem::write_kv(int mod, int layer, int id, std::int64_t pos, const float* k, const float* v) {
  const auto& mf = cm_.modules[mod].manifest;
  const auto& g = mf.geo;
  const int dh = cm_.model.head_dim, P = topo_.pus(), Bk = topo_.banks, T = g.tokens_per_row;
  const auto& lm = mf.layers[layer - mf.layers.front().layer];
  const auto& tab = alloc_[mf.stage]->table();
  auto pa = tab.translate(id, std::uint32_t(pos / T));
  if (!pa) throw Error("write_kv: unmapped row");
  const std::int64_t jj = pos % T;
  const int u = int(jj % P), s = int(jj / P);
  auto& st = *mods_[mod];
  for (int h = 0; h < g.kv_heads_local; ++h) {
    const int gh = mf.first_head + h;
    const int gi = h / g.heads_per_row, hh = h % g.heads_per_row;
    st.write_dram(lm.k_regions[gi] + *pa, u, std::uint32_t((s * g.heads_per_row + hh) * dh),
                  std::span<const float>(k + gh * dh, dh));
    for (int db = 0; db < g.dim_blocks; ++db) {
      const int i = h * g.dim_blocks + db, round = i / g.v_groups, grp = i % g.v_groups;
      for (int w = 0; w < g.dims_per_group; ++w) {
        const int dim = db * g.dims_per_group + w;
        if (dim >= dh) break;
        const int pu = (grp * g.ch_per_group + w / Bk) * Bk + w % Bk;
        st.write_dram(lm.v_regions[round] + *pa, pu, std::uint32_t(jj), std::span<const float>(v + gh * dh + dim, 1));
      }
    }
  }
}

std::vector<isa::PimCommand> PimSystem::expand(int mod, const isa::CommandStack& st, int id, int layer) {
  dispatch::ConfigBuffer cfg{cm_.model.n_layers, layer, {{id, t_cur_.at(id)}}};
  return dispatch::expand(st, cfg, alloc_[cm_.modules[mod].manifest.stage]->table(), id);
}

std::vector<float> PimSystem::fc(int mod, int layer, OpKind op, const std::vector<float>& x) {
  const auto& prog = cm_.modules[mod];
  const auto& mf = prog.manifest;
  const auto& fp = mf.layers[layer - mf.layers.front().layer].at(op);
  if (std::int64_t(x.size()) != fp.shape.cols) throw Error("fc: input width mismatch");
  auto& st = *mods_[mod];
  st.clear_gpr();
  const std::int64_t C = device::gemv_chunk_elems(topo_), P = topo_.pus();
  for (std::int64_t k = 0; k * C < fp.shape.cols; ++k) {
    std::vector<float> chunk(x.begin() + k * C, x.begin() + std::min<std::int64_t>(fp.shape.cols, (k + 1) * C));
    st.set_gpr(mf.gpr.fc_in + std::uint32_t(k), GprVector::broadcast(std::move(chunk)));
  }
  stats_[op].add(device::execute(to_cmds(prog.find(layer, op)), st, tm_));
  std::vector<float> y(fp.shape.rows);
  for (std::int64_t o = 0; o < fp.shape.rows; ++o) y[o] = st.gpr(mf.gpr.fc_out + std::uint32_t(o / P)).data[o % P];
  return y;
}

std::vector<float> PimSystem::attention(int mod, int layer, int id, const std::vector<float>& q) {
  const auto& prog = cm_.modules[mod];
  const auto& mf = prog.manifest;
  const auto& g = mf.geo;
  const auto& m = cm_.model;
  const int dh = m.head_dim, rep = m.gqa_rep(), P = topo_.pus(), Bk = topo_.banks, T = g.tokens_per_row;
  const int qh = g.kv_heads_local * rep;
  const std::int64_t t = t_cur_.at(id), lb = ceil_div(t, T);
  auto& st = *mods_[mod];
  const float inv = 1.0f / std::sqrt(float(dh));

  std::vector<std::vector<float>> probs(qh, std::vector<float>(std::size_t(lb) * T, 0.0f));
  for (int gi = 0; gi < g.k_groups; ++gi) {
    const int ge = std::min(g.heads_per_row, g.kv_heads_local - gi * g.heads_per_row);
    const auto cmds = expand(mod, prog.find(layer, OpKind::Qkt, gi), id, layer);
    for (int r = 0; r < rep; ++r) {
      st.clear_gpr();
      std::vector<float> qv(std::size_t(g.heads_per_row) * dh, 0.0f);
      for (int hh = 0; hh < ge; ++hh) {
        const int hq = (gi * g.heads_per_row + hh) * rep + r;
        for (int e = 0; e < dh; ++e) qv[hh * dh + e] = q[hq * dh + e] * inv;
      }
      st.set_gpr(mf.gpr.q + gi, GprVector::broadcast(std::move(qv), std::uint32_t(dh)));
      stats_[OpKind::Qkt].add(device::execute(cmds, st, tm_));
      for (int hh = 0; hh < ge; ++hh) {
        const int hq = (gi * g.heads_per_row + hh) * rep + r;
        std::vector<float> sc(t);
        for (std::int64_t j = 0; j < t; ++j) {
          const std::int64_t it = j / T, jj = j % T;
          const auto slot = mf.gpr.scores + std::uint32_t(it * g.tau * ge + (jj / P) * ge + hh);
          sc[j] = st.gpr(slot).data[jj % P];
        }
        auto sm = device::epu_apply(device::EpuKind::Softmax, {std::span<const float>(sc)}, tm_);
        stats_[OpKind::Softmax].breakdown.epu += sm.cycles;
        stats_[OpKind::Softmax].cycles += sm.cycles;
        std::copy(sm.out.begin(), sm.out.end(), probs[hq].begin());
      }
    }
  }

  std::vector<float> o(std::size_t(qh) * dh, 0.0f);
  const int items = g.kv_heads_local * g.dim_blocks;
  for (int ri = 0; ri < g.v_rounds; ++ri) {
    const int active = std::min(g.v_groups, items - ri * g.v_groups);
    const auto cmds = expand(mod, prog.find(layer, OpKind::Sv, ri), id, layer);
    for (int r = 0; r < rep; ++r) {
      st.clear_gpr();
      for (std::int64_t it = 0; it < lb; ++it) {
        GprVector pv;
        pv.length = T;
        pv.groups = g.v_groups;
        pv.active_groups = active;
        pv.data.assign(std::size_t(active) * T, 0.0f);
        for (int grp = 0; grp < active; ++grp) {
          const int hq = ((ri * g.v_groups + grp) / g.dim_blocks) * rep + r;
          std::copy_n(probs[hq].begin() + it * T, T, pv.data.begin() + std::size_t(grp) * T);
        }
        st.set_gpr(mf.gpr.probs + std::uint32_t(it), std::move(pv));
      }
      stats_[OpKind::Sv].add(device::execute(cmds, st, tm_));
      const auto& out = st.gpr(mf.gpr.sv_out).data;
      for (int pu = 0; pu < P; ++pu) {
        const int c = pu / Bk, grp = c / g.ch_per_group;
        if (grp >= active) continue;
        const int i = ri * g.v_groups + grp, h = i / g.dim_blocks, db = i % g.dim_blocks;
        const int dim = db * g.dims_per_group + (c % g.ch_per_group) * Bk + pu % Bk;
        if (dim < dh) o[std::size_t(h * rep + r) * dh + dim] = out[pu];
      }
    }
  }
  return o;
}

std::vector<float> PimSystem::step(int id, const std::vector<float>& xin) {
  const auto& m = cm_.model;
  const auto& plan = cm_.table.plan;
  const int d = m.d_model(), dh = m.head_dim;
  if (int(xin.size()) != d) throw Error("step: input width");
  const std::int64_t pos = t_cur_.at(id);
  grow_all(id, pos + 1);
  t_cur_[id] = pos + 1;
  std::vector<float> x = xin;
  auto epu = [&](device::EpuKind k, std::vector<std::span<const float>> in, OpKind op) {
    auto r = device::epu_apply(k, in, tm_);
    stats_[op].breakdown.epu += r.cycles;
    stats_[op].cycles += r.cycles;
    return r.out;
  };
  for (int l = 0; l < m.n_layers; ++l) {
    const int stage = plan.stage_of(l, m.n_layers);
    auto h = epu(device::EpuKind::LayerNorm, {x}, OpKind::Other);
    std::vector<float> attn(d, 0.0f);
    for (int r = 0; r < plan.tp; ++r) {
      const int mod = plan.module_of(stage, r);
      const auto sd = compiler::shard_dims(m, plan.tp, r);
      auto qkv = fc(mod, l, OpKind::QkvGen, h);
      // scatter this token's K/V into full-width buffers at the module's heads
      std::vector<float> k(m.kv_dim()), v(m.kv_dim());
      const std::size_t qn = std::size_t(sd.q_heads) * dh, kn = std::size_t(sd.kv_heads) * dh;
      std::copy_n(qkv.begin() + qn, kn, k.begin() + std::size_t(sd.first_kv) * dh);
      std::copy_n(qkv.begin() + qn + kn, kn, v.begin() + std::size_t(sd.first_kv) * dh);
      write_kv(mod, l, id, pos, k.data(), v.data());
      std::vector<float> q(qkv.begin(), qkv.begin() + qn);
      auto part = fc(mod, l, OpKind::Proj, attention(mod, l, id, q));
      attn = epu(device::EpuKind::EwAdd, {attn, part}, OpKind::Proj);
    }
    x = epu(device::EpuKind::EwAdd, {x, attn}, OpKind::Other);
    auto h2 = epu(device::EpuKind::LayerNorm, {x}, OpKind::Other);
    std::vector<float> ffn(d, 0.0f);
    for (int r = 0; r < plan.tp; ++r) {
      const int mod = plan.module_of(stage, r);
      auto y = fc(mod, l, OpKind::Ffn1, h2);
      std::vector<float> act;
      if (m.ffn == FfnVariant::Swiglu) {
        const std::size_t n = y.size() / 2;
        std::span<const float> gate(y.data(), n), up(y.data() + n, n);
        act = epu(device::EpuKind::ActSwiglu, {up, gate}, OpKind::Act);
      } else {
        act = epu(device::EpuKind::ActRelu, {y}, OpKind::Act);
      }
      auto part = fc(mod, l, OpKind::Ffn2, act);
      ffn = epu(device::EpuKind::EwAdd, {ffn, part}, OpKind::Ffn2);
    }
    x = epu(device::EpuKind::EwAdd, {x, ffn}, OpKind::Other);
  }
  return x;
}

// ---------------- timing-only cost model ----------------

CostModel::CostModel(const compiler::CompiledModel& cm, const device::PimTopology& topo,
                     const device::TimingParams& tm, bool pingpong)
    : cm_(cm), topo_(topo), tm_(tm), pp_(pingpong) {
  const auto& prog = cm.modules.at(0);
  const auto& lm = prog.manifest.layers.at(0);
  const std::int64_t C = device::gemv_chunk_elems(topo);
  for (const auto& fp : lm.fc) {
    std::vector<std::pair<std::uint32_t, GprVector>> gpr;
    for (std::int64_t k = 0; k * C < fp.shape.cols; ++k) {
      GprVector v;
      v.length = std::uint32_t(std::min(C, fp.shape.cols - k * C));
      gpr.push_back({prog.manifest.gpr.fc_in + std::uint32_t(k), v});
    }
    fc_[fp.op] = run(to_cmds(prog.find(lm.layer, fp.op)), gpr);
  }
}

OpCost CostModel::run(const std::vector<isa::PimCommand>& cmds,
                      const std::vector<std::pair<std::uint32_t, GprVector>>& gpr) const {
  device::ModuleState st(topo_, false, pp_);
  for (const auto& [i, v] : gpr) st.set_gpr(i, v);
  auto r = device::execute(cmds, st, tm_);
  return {r.cycles, r.breakdown, r.mac_lane_cycles};
}

OpCost CostModel::fc(OpKind op) const { return fc_.at(op); }

std::pair<OpCost, OpCost> CostModel::itpp_attention(std::int64_t t) const {
  const auto& prog = cm_.modules.at(0);
  const auto& mf = prog.manifest;
  const auto& g = mf.geo;
  const std::int64_t lb = ceil_div(std::max<std::int64_t>(t, 1), g.tokens_per_row);
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (auto it = itpp_memo_.find(lb); it != itpp_memo_.end()) return it->second;
  }
  const auto& m = cm_.model;
  const int layer = mf.layers.front().layer, rep = m.gqa_rep();
  dispatch::ConfigBuffer cfg{m.n_layers, layer, {{0, lb * g.tokens_per_row}}};
  dispatch::Va2PaTable tab;
  for (std::int64_t i = 0; i < lb; ++i) tab.append(0, std::uint32_t(i));

  std::vector<isa::PimCommand> qk;
  std::vector<std::pair<std::uint32_t, GprVector>> gq;
  for (int gi = 0; gi < g.k_groups; ++gi) {
    auto c = dispatch::expand(prog.find(layer, OpKind::Qkt, gi), cfg, tab, 0);
    for (int r = 0; r < rep; ++r) qk.insert(qk.end(), c.begin(), c.end());
    GprVector v;
    v.length = std::uint32_t(g.heads_per_row * m.head_dim);
    v.segment = std::uint32_t(m.head_dim);
    gq.push_back({mf.gpr.q + std::uint32_t(gi), v});
  }
  OpCost q = run(qk, gq);

  OpCost sv;
  const int items = g.kv_heads_local * g.dim_blocks;
  for (int ri = 0; ri < g.v_rounds; ++ri) {
    auto c = dispatch::expand(prog.find(layer, OpKind::Sv, ri), cfg, tab, 0);
    std::vector<isa::PimCommand> all;
    for (int r = 0; r < rep; ++r) all.insert(all.end(), c.begin(), c.end());
    std::vector<std::pair<std::uint32_t, GprVector>> gp;
    for (std::int64_t it = 0; it < lb; ++it) {
      GprVector v;
      v.length = std::uint32_t(g.tokens_per_row);
      v.groups = std::uint32_t(g.v_groups);
      v.active_groups = std::uint32_t(std::min(g.v_groups, items - ri * g.v_groups));
      gp.push_back({mf.gpr.probs + std::uint32_t(it), v});
    }
    sv += run(all, gp);
  }
  std::lock_guard<std::mutex> lk(mu_);
  return itpp_memo_[lb] = {q, sv};
}

// One wave: up to one (request, kv head) pair per channel, all sized to the
// longest pair. K rows hold R/d_h tokens per bank; V^T rows hold R tokens of
// one dim, and each dim's DOT is read out and summed in the hub.
std::pair<OpCost, OpCost> CostModel::hfa_wave(std::int64_t t, int active) const {
  const auto& m = cm_.model;
  const int dh = m.head_dim, R = topo_.row_elems(), Bk = topo_.banks;
  const int tpr = std::max(1, R / dh), dpb = int(ceil_div(dh, Bk));
  const std::int64_t krows = ceil_div(t, std::int64_t(Bk) * tpr);
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (auto it = hfa_memo_.find({krows, active}); it != hfa_memo_.end()) return it->second;
  }
  const std::int64_t chunks = ceil_div(krows * Bk * tpr, R);
  GprVector qv;
  qv.length = std::uint32_t(dh);
  qv.groups = std::uint32_t(topo_.channels);
  qv.active_groups = std::uint32_t(active);
  std::vector<isa::PimCommand> qk{isa::WrInp{0}};
  for (std::int64_t r = 0; r < krows; ++r)
    for (int s = 0; s < tpr; ++s) {
      qk.push_back(isa::DotProd{std::uint32_t(r), std::uint32_t(s * dh)});
      qk.push_back(isa::RdOut{16});
    }
  OpCost q = run(qk, {{0, qv}});
  GprVector pv = qv;
  pv.length = std::uint32_t(R);
  std::vector<isa::PimCommand> svc;
  std::vector<std::pair<std::uint32_t, GprVector>> gp;
  // the hub streams score chunks through two staging slots
  gp.push_back({0, pv});
  gp.push_back({1, pv});
  for (std::int64_t c = 0; c < chunks; ++c) {
    svc.push_back(isa::WrInp{std::uint32_t(c % 2)});
    for (int e = 0; e < dpb; ++e) {
      svc.push_back(isa::DotProd{std::uint32_t(e * chunks + c), 0});
      svc.push_back(isa::RdOut{100000});
    }
  }
  OpCost sv = run(svc, gp);
  std::lock_guard<std::mutex> lk(mu_);
  return hfa_memo_[{krows, active}] = {q, sv};
}

std::pair<OpCost, OpCost> CostModel::hfa_attention(const std::vector<std::int64_t>& ts) const {
  const auto& m = cm_.model;
  const int hloc = cm_.modules.at(0).manifest.geo.kv_heads_local, rep = m.gqa_rep();
  std::vector<std::int64_t> pairs;
  for (auto t : ts)
    for (int h = 0; h < hloc; ++h) pairs.push_back(t);
  std::sort(pairs.rbegin(), pairs.rend());
  std::pair<OpCost, OpCost> tot;
  const int C = topo_.channels;
  for (std::size_t i = 0; i < pairs.size(); i += C) {
    const int active = int(std::min<std::size_t>(C, pairs.size() - i));
    auto w = hfa_wave(pairs[i], active);
    // query heads sharing a kv head rerun the wave with their own inputs
    tot.first += w.first.scaled(rep);
    tot.second += w.second.scaled(rep);
  }
  return tot;
}

std::int64_t CostModel::epu_misc() const {
  const auto& m = cm_.model;
  const auto sd = compiler::shard_dims(m, cm_.table.plan.tp, 0);
  return 4 * device::epu_cycles(m.d_model(), tm_) + device::epu_cycles(sd.ffn, tm_);
}

std::int64_t CostModel::softmax(std::int64_t t, int heads) const {
  return std::int64_t(heads) * device::epu_cycles(t, tm_);
}

}  // namespace pimsim::runtime
