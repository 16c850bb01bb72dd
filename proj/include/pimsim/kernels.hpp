#pragma once
#include <cstddef>
#include <span>

namespace pimsim::kernels {

// Dense float loops used by the device model. Each backend provides the same
// table; reductions may differ from the scalar path by reassociation only.
struct KernelTable {
  const char* name;
  float (*dot)(const float* a, const float* b, std::size_t n);
  void (*add)(float* out, const float* a, const float* b, std::size_t n);
  void (*mul)(float* out, const float* a, const float* b, std::size_t n);
  void (*scale)(float* out, const float* a, float s, std::size_t n);
  void (*relu)(float* out, const float* a, std::size_t n);
  float (*max)(const float* a, std::size_t n);
  float (*sum)(const float* a, std::size_t n);
};

enum class Backend { Scalar, Avx2 };

const KernelTable& scalar();
// nullptr when the binary was built without AVX2 support or the CPU lacks it.
const KernelTable* avx2();

// Picks AVX2 when available unless a backend was forced with select().
const KernelTable& active();
void select(Backend b);
bool available(Backend b);

inline float dot(std::span<const float> a, std::span<const float> b) {
  return active().dot(a.data(), b.data(), a.size());
}

}  // namespace pimsim::kernels
