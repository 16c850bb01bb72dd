#include "pimsim/model.hpp"

namespace pimsim {

std::int64_t ModelConfig::fc_weights_per_layer() const {
  std::int64_t d = d_model();
  return d * qkv_out() + d * d + d * std::int64_t(ffn1_out()) + std::int64_t(ffn_dim) * d;
}

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || n_kv_heads < 1 || head_dim < 1 || ffn_dim < 1 || max_ctl < 1)
    throw Error("model: dimensions must be positive");
  if (n_heads % n_kv_heads) throw Error("model: n_heads must be a multiple of n_kv_heads");
}

const char* ffn_variant_name(FfnVariant v) { return v == FfnVariant::Swiglu ? "SWIGLU" : "RELU_MLP"; }

ModelConfig model_preset(const std::string& name) {
  auto mk = [&](int l, int h, int kv, int d, FfnVariant f, int ffn) {
    ModelConfig m;
    m.name = name;
    m.n_layers = l;
    m.n_heads = h;
    m.n_kv_heads = kv;
    m.head_dim = d;
    m.ffn = f;
    m.ffn_dim = ffn;
    return m;
  };
  if (name == "7B") return mk(32, 32, 32, 128, FfnVariant::Swiglu, 11008);
  if (name == "14B") return mk(40, 40, 40, 128, FfnVariant::Swiglu, 13696);
  if (name == "72B") return mk(80, 64, 64, 128, FfnVariant::Swiglu, 24576);
  if (name == "1.8B") return mk(24, 16, 16, 64, FfnVariant::Swiglu, 5504);
  if (name == "llama3.1-8b") return mk(32, 32, 8, 128, FfnVariant::Swiglu, 14336);
  if (name == "mpt-7b") return mk(32, 32, 32, 128, FfnVariant::ReluMlp, 16384);
  if (name == "toy") return mk(2, 4, 2, 8, FfnVariant::Swiglu, 64);
  throw Error("unknown model preset '" + name + "'");
}

std::vector<std::string> model_preset_names() {
  return {"7B", "14B", "72B", "1.8B", "llama3.1-8b", "mpt-7b", "toy"};
}

}  // namespace pimsim
