#pragma once
#include <array>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "pimsim/isa.hpp"

namespace pimsim::device {

struct PimTopology {
  int nodes = 1;
  int modules_per_node = 8;
  int channels = 16;
  int banks = 16;
  int row_bytes = 2048;
  int rows_per_bank = 16384;
  int mac_width = 16;
  int gb_bytes = 2048;
  int outreg_bytes_per_pu = 4;
  int gpr_bytes = 524288;
  int element_bytes = 2;  // storage width used for transfer and capacity accounting

  int pus() const { return channels * banks; }
  int row_elems() const { return row_bytes / element_bytes; }
  int gb_elems() const { return gb_bytes / element_bytes; }
  int modules() const { return nodes * modules_per_node; }
  std::int64_t module_capacity_bytes() const {
    return std::int64_t(channels) * banks * row_bytes * std::int64_t(rows_per_bank);
  }
  void validate() const;
};

struct TimingParams {
  double pim_clock_hz = 1e9;
  int interface_bytes_per_cycle = 64;  // 64 GB/s at 1 GHz
  int row_activate_cycles = 20;
  int gb_write_overhead_cycles = 1;
  int outreg_read_latency_cycles = 8;
  int epu_cycles_per_element = 1;
  int epu_lanes = 64;
  int dispatch_cycles_per_cmd = 1;
  int host_sync_cycles = 2000;
  double internode_bytes_per_sec = 1e10;
  double intranode_bytes_per_sec = 64e9;
  bool charge_broadcast_per_channel = false;

  int mac_cycles_per_row(const PimTopology& t) const { return t.row_elems() / t.mac_width; }
  double peak_flops_per_pu(const PimTopology& t) const { return 2.0 * t.mac_width * pim_clock_hz; }
  void validate() const;
};

struct Breakdown {
  std::int64_t dt_gb = 0;
  std::int64_t dt_out = 0;
  std::int64_t mac = 0;
  std::int64_t epu = 0;
  std::int64_t total() const { return dt_gb + dt_out + mac + epu; }
  Breakdown& operator+=(const Breakdown& o) {
    dt_gb += o.dt_gb; dt_out += o.dt_out; mac += o.mac; epu += o.epu;
    return *this;
  }
  Breakdown scaled(std::int64_t k) const { return {dt_gb * k, dt_out * k, mac * k, epu * k}; }
  bool operator==(const Breakdown&) const = default;
};

// A GPR slot. Payload layout is active_groups × length. Channel c of the
// module reads group c / (channels / groups); groups past active_groups read
// zeros and cost nothing to transfer. groups == 1 is a broadcast.
struct GprVector {
  std::vector<float> data;  // empty in timing-only mode
  std::uint32_t length = 0;
  std::uint32_t groups = 1;
  std::uint32_t active_groups = 1;
  std::uint32_t segment = 0;  // MAC window used by DOT_PROD; 0 means length

  std::uint32_t window() const { return segment ? segment : length; }
  static GprVector broadcast(std::vector<float> v, std::uint32_t segment = 0);
};

struct ExecResult {
  std::int64_t cycles = 0;
  Breakdown breakdown;
  std::int64_t mac_lane_cycles = 0;  // Σ over DOT_PROD of window × PUs fed live input
  std::int64_t mac_only_cycles = 0;  // DOT_PROD cycles excluding row activation
  std::int64_t commands = 0;
  std::int64_t dispatch_cycles = 0;
};

class ModuleState {
 public:
  ModuleState(const PimTopology& topo, bool functional = true, bool pingpong = false);

  const PimTopology& topology() const { return topo_; }
  bool functional() const { return functional_; }
  bool pingpong() const { return pingpong_; }
  void set_pingpong(bool on) { pingpong_ = on; }
  void set_round_16bit(bool on) { round16_ = on; }

  // Writes v into (row, pu) starting at element offset.
  void write_dram(std::uint32_t row, int pu, std::uint32_t offset, std::span<const float> v);
  float read_dram(std::uint32_t row, int pu, std::uint32_t offset) const;
  std::size_t resident_rows() const { return dram_.size(); }

  void set_gpr(std::uint32_t index, GprVector v);
  const GprVector& gpr(std::uint32_t index) const;
  bool has_gpr(std::uint32_t index) const { return gpr_.count(index) != 0; }
  void clear_gpr() { gpr_.clear(); gpr_used_ = 0; }
  std::size_t gpr_bytes_used() const { return gpr_used_; }

  int pingpong_bit() const { return out_cur_; }
  const std::vector<float>& outreg(int which) const { return acc_[which]; }

 private:
  friend ExecResult execute(const std::vector<isa::PimCommand>&, ModuleState&, const TimingParams&);

  PimTopology topo_;
  bool functional_;
  bool pingpong_;
  bool round16_ = false;
  std::unordered_map<std::uint32_t, std::vector<float>> dram_;
  std::unordered_map<std::uint32_t, GprVector> gpr_;
  std::size_t gpr_used_ = 0;
  std::array<GprVector, 2> gb_;
  std::array<bool, 2> gb_valid_{false, false};
  int gb_cur_ = 0;
  std::array<std::vector<float>, 2> acc_;
  std::array<bool, 2> acc_written_{false, false};
  int out_cur_ = 0;
};

// Cycle costs of individual commands.
std::int64_t wr_inp_cycles(const GprVector& v, const PimTopology& t, const TimingParams& tm);
std::int64_t dot_prod_cycles(std::uint32_t window, bool activate, const PimTopology& t,
                             const TimingParams& tm);
std::int64_t rd_out_cycles(const PimTopology& t, const TimingParams& tm);

ExecResult execute(const std::vector<isa::PimCommand>& cmds, ModuleState& state,
                   const TimingParams& timing);

enum class EpuKind { Softmax, LayerNorm, EwAdd, EwMul, ActRelu, ActSwiglu };
const char* epu_kind_name(EpuKind k);

struct EpuResult {
  std::vector<float> out;
  std::int64_t cycles = 0;
};

EpuResult epu_apply(EpuKind kind, const std::vector<std::span<const float>>& inputs,
                    const TimingParams& timing);
std::int64_t epu_cycles(std::int64_t elements, const TimingParams& timing);

struct GemvShape {
  std::int64_t rows = 0;  // output neurons
  std::int64_t cols = 0;  // input length
};

// Emits the FC command pattern for a GEMV whose weights start at row `row_base`
// and whose input chunks sit in GPR slots in_base..in_base+K-1; pass outputs go
// to out_base..out_base+P-1.
std::vector<isa::PimCommand> gemv_commands(GemvShape s, const PimTopology& t, std::uint32_t row_base,
                                           std::uint32_t in_base, std::uint32_t out_base);
std::int64_t gemv_chunk_elems(const PimTopology& t);

std::int64_t analytic_cycles(GemvShape s, const PimTopology& t, const TimingParams& tm,
                             bool pingpong = false);
// MAC-only cycles (no activation, no transfer) of the same GEMV.
std::int64_t analytic_mac_cycles(GemvShape s, const PimTopology& t);

}  // namespace pimsim::device
