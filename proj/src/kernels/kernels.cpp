#include "pimsim/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <limits>

namespace pimsim::kernels {

const KernelTable* avx2_table();  // kernels_avx2.cpp

namespace {

float dot_scalar(const float* a, const float* b, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void add_scalar(float* out, const float* a, const float* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_scalar(float* out, const float* a, const float* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_scalar(float* out, const float* a, float s, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * s;
}

void relu_scalar(float* out, const float* a, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > 0.0f ? a[i] : 0.0f;
}

float max_scalar(const float* a, std::size_t n) {
  float m = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, a[i]);
  return m;
}

float sum_scalar(const float* a, std::size_t n) {
  float s = 0.0f;
  for (std::size_t i = 0; i < n; ++i) s += a[i];
  return s;
}

const KernelTable kScalar{"scalar",  dot_scalar, add_scalar, mul_scalar,
                          scale_scalar, relu_scalar, max_scalar, sum_scalar};

std::atomic<const KernelTable*> g_active{nullptr};

}  // namespace

const KernelTable& scalar() { return kScalar; }

const KernelTable* avx2() {
  static const KernelTable* t = [] () -> const KernelTable* {
    __builtin_cpu_init();
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"))
      return avx2_table();
    return nullptr;
  }();
  return t;
}

bool available(Backend b) { return b == Backend::Scalar || avx2() != nullptr; }

const KernelTable& active() {
  const KernelTable* t = g_active.load(std::memory_order_acquire);
  if (!t) {
    t = avx2() ? avx2() : &kScalar;
    g_active.store(t, std::memory_order_release);
  }
  return *t;
}

void select(Backend b) {
  const KernelTable* t = (b == Backend::Avx2 && avx2()) ? avx2() : &kScalar;
  g_active.store(t, std::memory_order_release);
}

}  // namespace pimsim::kernels
