#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "pimsim/kernels.hpp"

using namespace pimsim::kernels;

TEST_CASE("SIMD kernels agree with the scalar reference") {
  const KernelTable* v = avx2();
  if (!v) {
    MESSAGE("AVX2 not available; only the scalar path is exercised");
    return;
  }
  const KernelTable& s = scalar();
  std::mt19937 rng(5);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (std::size_t n = 0; n <= 131; ++n) {
    std::vector<float> a(n), b(n), o1(n), o2(n);
    for (auto& x : a) x = nd(rng);
    for (auto& x : b) x = nd(rng);
    double ref = 0, mag = 0;
    for (std::size_t i = 0; i < n; ++i) {
      ref += double(a[i]) * b[i];
      mag += std::fabs(double(a[i]) * b[i]);
    }
    CHECK(std::fabs(v->dot(a.data(), b.data(), n) - ref) <= 1e-5 * (mag + 1));
    CHECK(std::fabs(s.dot(a.data(), b.data(), n) - ref) <= 1e-5 * (mag + 1));

    s.add(o1.data(), a.data(), b.data(), n);
    v->add(o2.data(), a.data(), b.data(), n);
    CHECK(o1 == o2);
    s.mul(o1.data(), a.data(), b.data(), n);
    v->mul(o2.data(), a.data(), b.data(), n);
    CHECK(o1 == o2);
    s.scale(o1.data(), a.data(), 0.37f, n);
    v->scale(o2.data(), a.data(), 0.37f, n);
    CHECK(o1 == o2);
    s.relu(o1.data(), a.data(), n);
    v->relu(o2.data(), a.data(), n);
    CHECK(o1 == o2);
    CHECK(s.max(a.data(), n) == v->max(a.data(), n));
    double sum = 0, asum = 0;
    for (float x : a) {
      sum += x;
      asum += std::fabs(x);
    }
    CHECK(std::fabs(v->sum(a.data(), n) - sum) <= 1e-5 * (asum + 1));
  }
}

TEST_CASE("backend selection") {
  select(Backend::Scalar);
  CHECK(std::string(active().name) == "scalar");
  select(Backend::Avx2);
  CHECK(std::string(active().name) == (available(Backend::Avx2) ? "avx2" : "scalar"));
}
