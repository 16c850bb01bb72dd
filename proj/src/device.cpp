#include "pimsim/device.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "pimsim/kernels.hpp"

namespace pimsim::device {

namespace {

template <class... Ts> struct overloaded : Ts... { using Ts::operator()...; };
template <class... Ts> overloaded(Ts...) -> overloaded<Ts...>;

float round_bf16(float x) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(x);
  if ((u & 0x7f800000u) == 0x7f800000u) return x;
  u += 0x7fffu + ((u >> 16) & 1u);
  return std::bit_cast<float>(u & 0xffff0000u);
}

struct Interval {
  std::int64_t start, end;
};

// Length of `a` not covered by the union of `cover` (both sorted, disjoint).
std::int64_t uncovered(const std::vector<Interval>& a, const std::vector<Interval>& cover) {
  std::int64_t total = 0;
  std::size_t j = 0;
  for (const auto& iv : a) {
    std::int64_t len = iv.end - iv.start;
    while (j < cover.size() && cover[j].end <= iv.start) ++j;
    for (std::size_t k = j; k < cover.size() && cover[k].start < iv.end; ++k)
      len -= std::min(iv.end, cover[k].end) - std::max(iv.start, cover[k].start);
    total += len;
  }
  return total;
}

}  // namespace

void PimTopology::validate() const {
  if (nodes < 1 || modules_per_node < 1 || channels < 1 || banks < 1 || row_bytes < 1 ||
      rows_per_bank < 1 || mac_width < 1 || gb_bytes < 1 || outreg_bytes_per_pu < 1 ||
      gpr_bytes < 1 || element_bytes < 1)
    throw Error("topology: all fields must be positive");
  if (row_bytes % element_bytes) throw Error("topology: row_bytes not a multiple of element size");
}

void TimingParams::validate() const {
  if (!(pim_clock_hz > 0) || interface_bytes_per_cycle < 1 || row_activate_cycles < 1 ||
      gb_write_overhead_cycles < 0 || outreg_read_latency_cycles < 0 || epu_cycles_per_element < 1 ||
      epu_lanes < 1 || dispatch_cycles_per_cmd < 1 || host_sync_cycles < 0 ||
      !(internode_bytes_per_sec > 0) || !(intranode_bytes_per_sec > 0))
    throw Error("timing: parameters must be positive");
}

GprVector GprVector::broadcast(std::vector<float> v, std::uint32_t segment) {
  GprVector g;
  g.length = static_cast<std::uint32_t>(v.size());
  g.data = std::move(v);
  g.segment = segment;
  return g;
}

ModuleState::ModuleState(const PimTopology& topo, bool functional, bool pingpong)
    : topo_(topo), functional_(functional), pingpong_(pingpong) {
  topo_.validate();
  if (functional_)
    for (auto& a : acc_) a.assign(topo_.pus(), 0.0f);
}

void ModuleState::write_dram(std::uint32_t row, int pu, std::uint32_t offset,
                             std::span<const float> v) {
  if (row >= std::uint32_t(topo_.rows_per_bank)) throw Error("write_dram: row out of range");
  if (pu < 0 || pu >= topo_.pus()) throw Error("write_dram: PU out of range");
  const std::uint32_t r = topo_.row_elems();
  if (offset + v.size() > r) throw Error("write_dram: write past end of row");
  auto& buf = dram_[row];
  if (buf.empty()) buf.assign(std::size_t(topo_.pus()) * r, 0.0f);
  float* dst = buf.data() + std::size_t(pu) * r + offset;
  for (std::size_t i = 0; i < v.size(); ++i) dst[i] = round16_ ? round_bf16(v[i]) : v[i];
}

float ModuleState::read_dram(std::uint32_t row, int pu, std::uint32_t offset) const {
  auto it = dram_.find(row);
  if (it == dram_.end()) return 0.0f;
  return it->second[std::size_t(pu) * topo_.row_elems() + offset];
}

void ModuleState::set_gpr(std::uint32_t index, GprVector v) {
  if (v.groups < 1 || v.active_groups > v.groups || topo_.channels % v.groups)
    throw Error("set_gpr: bad channel grouping");
  if (functional_ && v.data.size() != std::size_t(v.length) * v.active_groups)
    throw Error("set_gpr: payload size does not match length × active_groups");
  std::size_t bytes = std::size_t(v.length) * v.active_groups * topo_.element_bytes;
  std::size_t old = 0;
  if (auto it = gpr_.find(index); it != gpr_.end())
    old = std::size_t(it->second.length) * it->second.active_groups * topo_.element_bytes;
  if (gpr_used_ - old + bytes > std::size_t(topo_.gpr_bytes))
    throw Error("GPR overflow: " + std::to_string(gpr_used_ - old + bytes) + " bytes");
  gpr_used_ = gpr_used_ - old + bytes;
  gpr_[index] = std::move(v);
}

const GprVector& ModuleState::gpr(std::uint32_t index) const {
  auto it = gpr_.find(index);
  if (it == gpr_.end()) throw Error("GPR slot " + std::to_string(index) + " is empty");
  return it->second;
}

std::int64_t wr_inp_cycles(const GprVector& v, const PimTopology& t, const TimingParams& tm) {
  std::int64_t copies = v.active_groups;
  if (tm.charge_broadcast_per_channel) copies *= t.channels / v.groups;
  std::int64_t bytes = std::int64_t(v.length) * t.element_bytes * copies;
  return tm.gb_write_overhead_cycles + ceil_div(bytes, tm.interface_bytes_per_cycle);
}

std::int64_t dot_prod_cycles(std::uint32_t window, bool activate, const PimTopology& t,
                             const TimingParams& tm) {
  return (activate ? tm.row_activate_cycles : 0) + ceil_div(window, t.mac_width);
}

std::int64_t rd_out_cycles(const PimTopology& t, const TimingParams& tm) {
  return tm.outreg_read_latency_cycles +
         ceil_div(std::int64_t(t.pus()) * t.element_bytes, tm.interface_bytes_per_cycle);
}

ExecResult execute(const std::vector<isa::PimCommand>& cmds, ModuleState& st,
                   const TimingParams& tm) {
  const PimTopology& T = st.topo_;
  const int P = T.pus();
  const std::uint32_t R = T.row_elems();
  const auto& kt = kernels::active();
  const bool pp = st.pingpong_;

  ExecResult res;
  res.commands = static_cast<std::int64_t>(cmds.size());
  const std::int64_t rd_cost = rd_out_cycles(T, tm);

  // ping-pong timeline state: transfer queue and compute queue, each in order
  std::int64_t bus_free = 0, pu_free = 0;
  std::int64_t gb_ready[2] = {0, 0}, gb_read_done[2] = {0, 0};
  std::int64_t out_drained[2] = {0, 0}, out_last[2] = {0, 0};
  std::vector<Interval> compute, wr_iv, rd_iv;
  std::int64_t serial = 0;
  std::int64_t open_row = -1;
  std::vector<float> zeros;

  for (const auto& cmd : cmds) {
    std::visit(overloaded{
        [&](const isa::WrInp& c) {
          const GprVector& v = st.gpr(c.gpr);
          if (std::int64_t(v.length) > T.gb_elems())
            throw Error("GB overflow: " + std::to_string(v.length) + " elements > " +
                        std::to_string(T.gb_elems()));
          if (v.window() > v.length) throw Error("GPR segment longer than vector");
          std::int64_t cost = wr_inp_cycles(v, T, tm);
          int b = pp ? (st.gb_valid_[0] || st.gb_valid_[1] ? st.gb_cur_ ^ 1 : 0) : 0;
          st.gb_[b] = v;
          st.gb_valid_[b] = true;
          st.gb_cur_ = b;
          res.breakdown.dt_gb += pp ? 0 : cost;
          serial += cost;
          if (pp) {
            std::int64_t s = std::max(bus_free, gb_read_done[b]);
            bus_free = s + cost;
            gb_ready[b] = bus_free;
            wr_iv.push_back({s, bus_free});
          }
        },
        [&](const isa::DotProd& c) {
          if (!st.gb_valid_[st.gb_cur_]) throw Error("DOT_PROD with empty global buffer");
          const GprVector& g = st.gb_[st.gb_cur_];
          const std::uint32_t W = g.window();
          if (c.row >= std::uint32_t(T.rows_per_bank))
            throw Error("DOT_PROD row " + std::to_string(c.row) + " out of range");
          if (std::uint64_t(c.col) + W > R)
            throw Error("DOT_PROD column window past end of row");
          const std::uint32_t off = c.col % g.length;
          if (off + W > g.length) throw Error("DOT_PROD window past end of global buffer");
          bool activate = std::int64_t(c.row) != open_row;
          open_row = c.row;
          std::int64_t cost = dot_prod_cycles(W, activate, T, tm);
          {
            // lanes of channels fed an inactive group multiply zeros
            const int per_group = T.channels / int(g.groups);
            const int live_ch = std::min(T.channels, int(g.active_groups) * per_group);
            res.mac_lane_cycles += std::int64_t(W) * live_ch * T.banks;
          }
          res.mac_only_cycles += ceil_div(W, T.mac_width);
          const int o = st.out_cur_;
          if (st.functional_) {
            auto it = st.dram_.find(c.row);
            if (it != st.dram_.end()) {
              auto& acc = st.acc_[o];
              const int per_group = T.channels / int(g.groups);
              if (zeros.size() < W) zeros.assign(W, 0.0f);
              for (int ch = 0; ch < T.channels; ++ch) {
                int grp = ch / per_group;
                const float* in = std::uint32_t(grp) < g.active_groups
                                      ? g.data.data() + std::size_t(grp) * g.length + off
                                      : zeros.data();
                for (int b = 0; b < T.banks; ++b) {
                  int pu = ch * T.banks + b;
                  const float* w = it->second.data() + std::size_t(pu) * R + c.col;
                  acc[pu] += kt.dot(w, in, W);
                  if (!std::isfinite(acc[pu])) throw Error("non-finite out-register value");
                }
              }
            }
          }
          st.acc_written_[o] = true;
          res.breakdown.mac += pp ? 0 : cost;
          serial += cost;
          if (pp) {
            int b = st.gb_cur_;
            std::int64_t s = std::max({pu_free, gb_ready[b], out_drained[o]});
            pu_free = s + cost;
            gb_read_done[b] = std::max(gb_read_done[b], pu_free);
            out_last[o] = pu_free;
            compute.push_back({s, pu_free});
          }
        },
        [&](const isa::RdOut& c) {
          const int o = st.out_cur_;
          if (!st.acc_written_[o]) throw Error("RD_OUT of an out-register never written");
          GprVector out;
          out.length = P;
          if (st.functional_) {
            out.data = st.acc_[o];
            std::fill(st.acc_[o].begin(), st.acc_[o].end(), 0.0f);
          }
          st.set_gpr(c.gpr, std::move(out));
          st.acc_written_[o] = false;
          st.out_cur_ ^= 1;
          res.breakdown.dt_out += pp ? 0 : rd_cost;
          serial += rd_cost;
          if (pp) {
            std::int64_t s = std::max(bus_free, out_last[o]);
            bus_free = s + rd_cost;
            out_drained[o] = bus_free;
            rd_iv.push_back({s, bus_free});
          }
        }}, cmd);
  }

  if (pp) {
    res.cycles = std::max(bus_free, pu_free);
    std::int64_t mac = 0;
    for (const auto& iv : compute) mac += iv.end - iv.start;
    res.breakdown.mac = mac;
    res.breakdown.dt_gb = uncovered(wr_iv, compute);
    res.breakdown.dt_out = uncovered(rd_iv, compute);
    // transfers never overlap each other, so anything left is a wait on the bus
    res.breakdown.dt_gb += res.cycles - res.breakdown.total();
  } else {
    res.cycles = serial;
  }
  res.dispatch_cycles = res.commands * tm.dispatch_cycles_per_cmd;
  if (res.dispatch_cycles > res.cycles) {
    res.breakdown.dt_gb += res.dispatch_cycles - res.cycles;
    res.cycles = res.dispatch_cycles;
  }
  return res;
}

// ---- EPU ----

const char* epu_kind_name(EpuKind k) {
  switch (k) {
    case EpuKind::Softmax: return "SOFTMAX";
    case EpuKind::LayerNorm: return "LAYERNORM";
    case EpuKind::EwAdd: return "EWADD";
    case EpuKind::EwMul: return "EWMUL";
    case EpuKind::ActRelu: return "ACT_RELU";
    case EpuKind::ActSwiglu: return "ACT_SWIGLU";
  }
  return "?";
}

std::int64_t epu_cycles(std::int64_t elements, const TimingParams& tm) {
  return tm.epu_cycles_per_element * ceil_div(elements, tm.epu_lanes);
}

EpuResult epu_apply(EpuKind kind, const std::vector<std::span<const float>>& in,
                    const TimingParams& tm) {
  const auto& kt = kernels::active();
  const bool binary = kind == EpuKind::EwAdd || kind == EpuKind::EwMul || kind == EpuKind::ActSwiglu;
  if (in.size() != (binary ? 2u : 1u))
    throw Error(std::string(epu_kind_name(kind)) + ": wrong operand count");
  if (binary && in[0].size() != in[1].size())
    throw Error(std::string(epu_kind_name(kind)) + ": length mismatch");
  const std::size_t n = in[0].size();
  EpuResult r;
  r.out.resize(n);
  r.cycles = epu_cycles(static_cast<std::int64_t>(n), tm);
  const float* a = in[0].data();
  switch (kind) {
    case EpuKind::Softmax: {
      if (n == 0) break;
      float m = kt.max(a, n);
      for (std::size_t i = 0; i < n; ++i) r.out[i] = std::exp(a[i] - m);
      float s = kt.sum(r.out.data(), n);
      kt.scale(r.out.data(), r.out.data(), 1.0f / s, n);
      break;
    }
    case EpuKind::LayerNorm: {
      if (n == 0) break;
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < n; ++i) mean += a[i];
      mean /= double(n);
      for (std::size_t i = 0; i < n; ++i) var += (a[i] - mean) * (a[i] - mean);
      var /= double(n);
      const double inv = 1.0 / std::sqrt(var + 1e-5);
      for (std::size_t i = 0; i < n; ++i) r.out[i] = static_cast<float>((a[i] - mean) * inv);
      break;
    }
    case EpuKind::EwAdd: kt.add(r.out.data(), a, in[1].data(), n); break;
    case EpuKind::EwMul: kt.mul(r.out.data(), a, in[1].data(), n); break;
    case EpuKind::ActRelu: kt.relu(r.out.data(), a, n); break;
    case EpuKind::ActSwiglu: {
      const float* g = in[1].data();
      for (std::size_t i = 0; i < n; ++i) r.out[i] = a[i] * (g[i] / (1.0f + std::exp(-g[i])));
      break;
    }
  }
  return r;
}

// ---- GEMV pattern and its closed form ----

std::int64_t gemv_chunk_elems(const PimTopology& t) {
  return std::min<std::int64_t>(t.row_elems(), t.gb_elems());
}

std::vector<isa::PimCommand> gemv_commands(GemvShape s, const PimTopology& t, std::uint32_t row_base,
                                           std::uint32_t in_base, std::uint32_t out_base) {
  const std::int64_t passes = ceil_div(s.rows, t.pus());
  const std::int64_t k = ceil_div(s.cols, gemv_chunk_elems(t));
  std::vector<isa::PimCommand> c;
  c.reserve(passes * (2 * k + 1));
  for (std::int64_t p = 0; p < passes; ++p) {
    for (std::int64_t j = 0; j < k; ++j) {
      if (p == 0 || j > 0) c.push_back(isa::WrInp{std::uint32_t(in_base + j)});
      c.push_back(isa::DotProd{std::uint32_t(row_base + p * k + j), 0});
    }
    // next pass's first input goes out before this pass's readout so the
    // transfer queue can fill the idle buffer while the last MAC runs
    if (p + 1 < passes) c.push_back(isa::WrInp{in_base});
    c.push_back(isa::RdOut{std::uint32_t(out_base + p)});
  }
  return c;
}

std::int64_t analytic_cycles(GemvShape s, const PimTopology& t, const TimingParams& tm,
                             bool pingpong) {
  const std::int64_t chunk = gemv_chunk_elems(t);
  const std::int64_t passes = ceil_div(s.rows, t.pus());
  const std::int64_t k = ceil_div(s.cols, chunk);
  auto wr = [&](std::int64_t len) {
    return tm.gb_write_overhead_cycles + ceil_div(len * t.element_bytes, tm.interface_bytes_per_cycle);
  };
  std::int64_t transfer = 0, mac = 0;
  for (std::int64_t j = 0; j < k; ++j) {
    std::int64_t len = std::min(chunk, s.cols - j * chunk);
    transfer += wr(len);
    mac += tm.row_activate_cycles + ceil_div(len, t.mac_width);
  }
  const std::int64_t rd = rd_out_cycles(t, tm);
  if (!pingpong) return passes * (transfer + mac + rd);
  // MAC-bound: the first load and the last readout stick out, and each pass
  // boundary stalls when the next pass's first load outlasts the last MAC.
  const std::int64_t first = wr(std::min(chunk, s.cols));
  const std::int64_t last_len = s.cols - (k - 1) * chunk;
  const std::int64_t last_dot = tm.row_activate_cycles + ceil_div(last_len, t.mac_width);
  const std::int64_t stall = k > 1 ? std::max<std::int64_t>(0, first - last_dot) : 0;
  const std::int64_t per_pass = std::max(mac + stall, transfer + rd);
  return first + passes * per_pass - stall + rd;
}

std::int64_t analytic_mac_cycles(GemvShape s, const PimTopology& t) {
  const std::int64_t chunk = gemv_chunk_elems(t);
  const std::int64_t passes = ceil_div(s.rows, t.pus());
  std::int64_t mac = 0;
  for (std::int64_t j = 0; j * chunk < s.cols; ++j)
    mac += ceil_div(std::min(chunk, s.cols - j * chunk), t.mac_width);
  return passes * mac;
}

}  // namespace pimsim::device
