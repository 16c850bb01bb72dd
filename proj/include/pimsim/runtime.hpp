#pragma once
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "pimsim/compiler.hpp"
#include "pimsim/device.hpp"
#include "pimsim/memmgr.hpp"

namespace pimsim::runtime {

// Row-major (d_out × d_in) matrices per layer.
struct LayerWeights {
  std::vector<float> wq, wk, wv, wo, wg, wu, wd;
};
struct DenseWeights {
  std::vector<LayerWeights> layers;
};
DenseWeights random_weights(const ModelConfig& m, std::uint64_t seed, float scale = 0.2f);

// Per layer: t × kv_dim values, token-major.
struct KvCache {
  int kv_dim = 1;
  std::vector<std::vector<float>> k, v;
  std::int64_t tokens() const { return k.empty() ? 0 : std::int64_t(k[0].size()) / kv_dim; }
};
KvCache random_kv(const ModelConfig& m, std::int64_t t, std::uint64_t seed);

// Plain pre-norm decoder in double precision; the functional oracle.
class DenseDecoder {
 public:
  DenseDecoder(const ModelConfig& m, const DenseWeights& w) : m_(m), w_(w) {}
  void add_request(int id, KvCache prefill);
  std::vector<float> step(int id, const std::vector<float>& x);
  std::int64_t t_cur(int id) const { return cache_.at(id).tokens(); }

 private:
  ModelConfig m_;
  const DenseWeights& w_;
  std::map<int, KvCache> cache_;
};

struct OpStats {
  std::int64_t cycles = 0;
  device::Breakdown breakdown;
  std::int64_t mac_lane_cycles = 0;
  std::int64_t commands = 0;
  void add(const device::ExecResult& r) {
    cycles += r.cycles;
    breakdown += r.breakdown;
    mac_lane_cycles += r.mac_lane_cycles;
    commands += r.commands;
  }
};

// Runs compiled stacks on functional module models. Attention uses the ITPP
// layout; every stage keeps its own row allocator.
class PimSystem {
 public:
  PimSystem(const compiler::CompiledModel& cm, const device::PimTopology& topo, const device::TimingParams& tm,
            const DenseWeights& w, bool pingpong = false);

  void admit(int id, const KvCache& prefill);
  std::vector<float> step(int id, const std::vector<float>& x);
  void release(int id);

  const std::map<isa::OpKind, OpStats>& stats() const { return stats_; }
  const memmgr::AllocatorState& allocator(int stage) const { return *alloc_.at(stage); }
  device::ModuleState& module(int id) { return *mods_.at(id); }

 private:
  std::vector<float> fc(int mod, int layer, isa::OpKind op, const std::vector<float>& x);
  void write_kv(int mod, int layer, int id, std::int64_t pos, const float* k, const float* v);
  std::vector<float> attention(int mod, int layer, int id, const std::vector<float>& q);
  void grow_all(int id, std::int64_t t);
  std::vector<isa::PimCommand> expand(int mod, const isa::CommandStack& st, int id, int layer);

  const compiler::CompiledModel& cm_;
  device::PimTopology topo_;
  device::TimingParams tm_;
  std::vector<std::unique_ptr<device::ModuleState>> mods_;
  std::vector<std::unique_ptr<memmgr::AllocatorState>> alloc_;  // per stage
  std::map<int, std::int64_t> t_cur_;
  std::map<isa::OpKind, OpStats> stats_;
};

// Timing-only costs per module, derived by simulating the compiled stacks.
struct OpCost {
  std::int64_t cycles = 0;
  device::Breakdown breakdown;
  std::int64_t mac_lane_cycles = 0;
  OpCost& operator+=(const OpCost& o) {
    cycles += o.cycles;
    breakdown += o.breakdown;
    mac_lane_cycles += o.mac_lane_cycles;
    return *this;
  }
  OpCost scaled(std::int64_t k) const { return {cycles * k, breakdown.scaled(k), mac_lane_cycles * k}; }
};

class CostModel {
 public:
  CostModel(const compiler::CompiledModel& cm, const device::PimTopology& topo, const device::TimingParams& tm,
            bool pingpong);

  // One decode token through one FC op of one layer on the busiest module.
  OpCost fc(isa::OpKind op) const;
  // ITPP attention of one request at context t on one module, split into
  // QKT and SV parts.
  std::pair<OpCost, OpCost> itpp_attention(std::int64_t t) const;
  // HFA attention of a micro-batch on one module (waves of one head per channel).
  std::pair<OpCost, OpCost> hfa_attention(const std::vector<std::int64_t>& ts) const;
  // EPU cycles per request per layer, excluding softmax.
  std::int64_t epu_misc() const;
  std::int64_t softmax(std::int64_t t, int heads) const;

  const compiler::CompiledModel& compiled() const { return cm_; }
  bool pingpong() const { return pp_; }

 private:
  OpCost run(const std::vector<isa::PimCommand>& cmds,
             const std::vector<std::pair<std::uint32_t, device::GprVector>>& gpr) const;
  std::pair<OpCost, OpCost> hfa_wave(std::int64_t t, int active) const;

  const compiler::CompiledModel& cm_;
  device::PimTopology topo_;
  device::TimingParams tm_;
  bool pp_;
  std::map<isa::OpKind, OpCost> fc_;
  mutable std::mutex mu_;
  mutable std::map<std::int64_t, std::pair<OpCost, OpCost>> itpp_memo_;
  mutable std::map<std::pair<std::int64_t, int>, std::pair<OpCost, OpCost>> hfa_memo_;
};

}  // namespace pimsim::runtime
