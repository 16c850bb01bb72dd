#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "pimsim/device.hpp"
#include "pimsim/model.hpp"

namespace pimsim::partition {

enum class LayerOp { QkvGen, Proj, Ffn1, Ffn2, Qkt, Sv };
const char* layer_op_name(LayerOp op);

struct LayerShape {
  LayerOp op = LayerOp::QkvGen;
  std::int64_t d_in = 0, d_out = 0;
  int n_h = 0, n_kv_h = 0, d_h = 0;
  std::int64_t t = 0;
};

struct FcShard {
  std::int64_t d_in = 0, d_out = 0;
  std::int64_t in_offset = 0, out_offset = 0;  // position in the unsharded GEMV
};

struct FcPartition {
  bool split_out = true;  // false: split d_in and reduce partial sums
  std::vector<FcShard> shards;
  // extra bytes moved compared with tp = 1
  std::int64_t broadcast_bytes = 0;
  std::int64_t gather_bytes = 0;
  std::int64_t reduce_bytes = 0;
};

FcPartition partition_fc(const LayerShape& shape, int tp, int element_bytes = 2);

// Reassembles shard outputs (each of its shard's d_out) into the dense output.
std::vector<float> reassemble(const FcPartition& p, const std::vector<std::vector<float>>& shard_out,
                              std::int64_t d_out);

// Row geometry of the token-parallel attention layout on one module.
struct ItppGeometry {
  int kv_heads_local = 0;   // H_loc
  int tokens_per_row = 0;   // T
  int tau = 0;              // token slots per PU per K row
  int heads_per_row = 0;    // g
  int k_groups = 0;         // K regions
  int ch_per_group = 0;     // channels holding one V dim block
  int dims_per_group = 0;
  int v_groups = 0;         // dim blocks processed per round
  int dim_blocks = 0;       // blocks per head
  int v_rounds = 0;         // V regions
  int regions() const { return k_groups + v_rounds; }
};

ItppGeometry itpp_geometry(const ModelConfig& m, const device::PimTopology& t, int tp, int tokens_per_row);

enum class Strategy { Hfa, Itpp };
const char* strategy_name(Strategy s);
enum class KvKind { K, V };

struct KvRequest {
  int id = 0;
  std::int64_t t = 0;
};

struct Slice {
  int module = 0, channel = 0, bank = 0;
  int request = 0;
  int head = 0;  // global kv head
  KvKind kind = KvKind::K;
  std::int64_t token_begin = 0, token_end = 0, token_stride = 1;
  int dim_begin = 0, dim_end = 0;
  // token positions reserved on this PU (whole rows), >= tokens()
  std::int64_t alloc_tokens = 0;
  std::int64_t tokens() const {
    return token_end > token_begin ? (token_end - token_begin + token_stride - 1) / token_stride : 0;
  }
  std::int64_t elements() const { return tokens() * (dim_end - dim_begin); }
};

struct PlacementPlan {
  Strategy strategy = Strategy::Itpp;
  int modules = 1, channels = 1, banks = 1;
  std::vector<Slice> slices;
};

PlacementPlan place_kv(Strategy s, const std::vector<KvRequest>& reqs, const ModelConfig& m,
                       const device::PimTopology& topo, int tp = 1, int tokens_per_row = 1024);

// Load is reserved storage (alloc_tokens × dims) per PU.
struct Occupancy {
  double channel_occupancy = 0;
  double bank_occupancy = 0;
  double imbalance = 1;
};
Occupancy occupancy(const PlacementPlan& p);

// Empty string when every (request, head, token, dim) of K and V is placed
// exactly once; otherwise a description of the first problem.
std::string check_coverage(const PlacementPlan& p, const std::vector<KvRequest>& reqs,
                           const ModelConfig& m);

std::string plan_json(const PlacementPlan& p);

}  // namespace pimsim::partition
