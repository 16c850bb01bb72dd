#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "pimsim/common.hpp"

namespace pimsim {

enum class FfnVariant { ReluMlp, Swiglu };

struct ModelConfig {
  std::string name = "custom";
  int n_layers = 1;
  int n_heads = 1;
  int n_kv_heads = 1;
  int head_dim = 64;
  FfnVariant ffn = FfnVariant::Swiglu;
  int ffn_dim = 256;
  std::int64_t max_ctl = 32768;

  int d_model() const { return n_heads * head_dim; }
  int kv_dim() const { return n_kv_heads * head_dim; }
  int gqa_rep() const { return n_heads / n_kv_heads; }
  bool gqa() const { return n_kv_heads < n_heads; }
  // FFN1 output width: gate and up projections for SwiGLU
  int ffn1_out() const { return ffn == FfnVariant::Swiglu ? 2 * ffn_dim : ffn_dim; }
  int qkv_out() const { return d_model() + 2 * kv_dim(); }
  std::int64_t fc_weights_per_layer() const;
  std::int64_t kv_bytes_per_token(int element_bytes = 2) const {
    return std::int64_t(2) * n_layers * kv_dim() * element_bytes;
  }
  void validate() const;
};

// "7B", "14B", "72B", "1.8B", "llama3.1-8b", "mpt-7b", "toy"
ModelConfig model_preset(const std::string& name);
std::vector<std::string> model_preset_names();

const char* ffn_variant_name(FfnVariant v);

}  // namespace pimsim
