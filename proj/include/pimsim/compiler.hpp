#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pimsim/device.hpp"
#include "pimsim/dispatcher.hpp"
#include "pimsim/isa.hpp"
#include "pimsim/model.hpp"
#include "pimsim/partition.hpp"

namespace pimsim::compiler {

// Graph node types understood by the matcher.
//   input, norm, matmul, attn_score, softmax, attn_value, add, mul, silu, relu
struct Node {
  std::string id;
  std::string type;
  std::vector<std::string> inputs;
  std::int64_t d_in = 0, d_out = 0;  // matmul
  int heads = 0, head_dim = 0;       // attn_score / attn_value
  int layer = -1;
};

struct DecoderGraph {
  std::vector<Node> nodes;  // topologically ordered
  const Node* find(const std::string& id) const;
  std::string to_json() const;
  static DecoderGraph from_json(const std::string& text);
  void check() const;  // acyclic, shaped, edges consistent
};

DecoderGraph build_decoder_graph(const ModelConfig& m);

struct AnnotatedGraph {
  DecoderGraph graph;
  std::vector<isa::OpKind> kinds;  // per node
  bool gqa = false;
  bool swiglu = false;
  int layers = 0;
  std::vector<std::string> unmatched;
};

AnnotatedGraph match_patterns(const DecoderGraph& g);

struct ParallelismPlan {
  int tp = 1;
  int pp = 1;
  int micro_batch = 0;  // 0 picks the best value per iteration
  partition::Strategy attention = partition::Strategy::Itpp;
  int layers_per_stage(int n_layers) const { return int(ceil_div(n_layers, pp)); }
  int stage_of(int layer, int n_layers) const { return layer / layers_per_stage(n_layers); }
  int module_of(int stage, int tp_rank) const { return stage * tp + tp_rank; }
};

enum class Comm { None, Broadcast, Gather, Reduce };
const char* comm_name(Comm c);

struct TableEntry {
  int layer = 0;
  isa::OpKind op = isa::OpKind::Other;
  std::string direction;  // d_out, d_in, token, head, none
  Comm comm = Comm::None;
  int stage = 0;
  std::vector<int> modules;
};

struct ExecutionTable {
  ParallelismPlan plan;
  int n_layers = 0;
  std::vector<TableEntry> entries;
  int stages() const { return plan.pp; }
  std::string to_json() const;
};

void check_plan(const ParallelismPlan& p, const ModelConfig& m, const device::PimTopology& t);
ExecutionTable build_execution_table(const AnnotatedGraph& g, const ParallelismPlan& plan,
                                     const ModelConfig& m, const device::PimTopology& t);

// GPR slot map shared by codegen and the runtime.
struct GprMap {
  std::uint32_t fc_in = 0;
  std::uint32_t fc_out = 4096;
  std::uint32_t q = 8192;
  std::uint32_t scores = 16384;
  std::uint32_t probs = 32768;
  std::uint32_t sv_out = 40960;
};

struct FcPlacement {
  isa::OpKind op;
  device::GemvShape shape;   // shard shape on this module
  std::uint32_t row_base = 0;
  std::uint32_t rows = 0;
};

struct LayerManifest {
  int layer = 0;
  std::vector<FcPlacement> fc;            // QKV, PROJ, FFN1, FFN2 order
  std::vector<std::uint32_t> k_regions;   // base row per K head group
  std::vector<std::uint32_t> v_regions;   // base row per V round
  const FcPlacement& at(isa::OpKind op) const;
};

struct Manifest {
  int module_id = 0;
  int stage = 0;
  int tp_rank = 0;
  int first_head = 0;  // first global kv head held here
  partition::ItppGeometry geo;
  std::uint32_t weight_rows = 0;
  std::uint32_t kv_slots = 0;  // rows per KV region
  std::int64_t max_virtual_rows = 0;  // per request, from max_ctl
  GprMap gpr;
  std::vector<LayerManifest> layers;
  std::string to_json() const;
};

struct ModuleProgram {
  Manifest manifest;
  std::vector<isa::CommandStack> stacks;
  // stacks of one layer, keyed the way the dispatcher loads them
  std::vector<const isa::CommandStack*> layer_stacks(int layer) const;
  const isa::CommandStack& find(int layer, isa::OpKind op, std::uint32_t index = 0) const;
};

struct CompiledModel {
  ModelConfig model;
  ExecutionTable table;
  int tokens_per_row = 1024;
  std::vector<ModuleProgram> modules;  // index = module id
};

// Attention stacks exist only under ITPP; HFA attention is costed by the
// runtime without stacks.
CompiledModel codegen(const ExecutionTable& table, const ModelConfig& m, const device::PimTopology& t,
                      int tokens_per_row = 1024);

// Shard of the head/ffn-aligned split used by codegen.
struct ShardDims {
  int q_heads = 0, kv_heads = 0;   // local
  int first_q = 0, first_kv = 0;
  int ffn = 0, first_ffn = 0;
};
ShardDims shard_dims(const ModelConfig& m, int tp, int rank);
device::GemvShape fc_shard_shape(const ModelConfig& m, isa::OpKind op, const ShardDims& s);

// QKT/SV stack builders for one module.
isa::CommandStack qkt_stack(const partition::ItppGeometry& g, const ModelConfig& m, const GprMap& gpr,
                            std::uint32_t k_region, int group);
isa::CommandStack sv_stack(const partition::ItppGeometry& g, const GprMap& gpr, std::uint32_t v_region,
                           int round);
// The same QKT stack unrolled for a fixed context with identity row mapping.
std::vector<isa::PimCommand> static_qkt_commands(const partition::ItppGeometry& g, const ModelConfig& m,
                                                 const GprMap& gpr, std::uint32_t k_region, int group,
                                                 std::int64_t t);
std::size_t static_encoded_size(const std::vector<isa::PimCommand>& cmds);

}  // namespace pimsim::compiler
