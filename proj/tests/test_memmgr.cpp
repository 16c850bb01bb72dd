#include <random>

#include "doctest.h"
#include "pimsim/memmgr.hpp"

using namespace pimsim;
using namespace pimsim::memmgr;

namespace {

PoolConfig pool(Policy p, std::int64_t rows, std::int64_t tpr = 256, std::int64_t max_ctl = 32768) {
  PoolConfig c;
  c.policy = p;
  c.total_rows = rows;
  c.tokens_per_row = tpr;
  c.max_ctl = max_ctl;
  return c;
}

// Lowest-free-row allocator written against a plain bitmap.
struct RefAlloc {
  std::vector<bool> used;
  std::map<int, std::vector<std::uint32_t>> held;
  explicit RefAlloc(std::size_t n) : used(n, false) {}
  bool take(int id, std::int64_t n) {
    std::int64_t free = std::count(used.begin(), used.end(), false);
    if (n > free) return false;
    for (std::size_t r = 0; r < used.size() && n > 0; ++r)
      if (!used[r]) {
        used[r] = true;
        held[id].push_back(std::uint32_t(r));
        --n;
      }
    return true;
  }
  void drop(int id) {
    for (auto r : held[id]) used[r] = false;
    held.erase(id);
  }
};

}  // namespace

TEST_CASE("admit: lazy reserves only the prefilled rows") {
  AllocatorState st(pool(Policy::Lazy, 1000));
  auto g = st.admit(1, 6820);
  REQUIRE(g);
  CHECK(g->chunks.size() == 27);
  CHECK(st.rows_held(1) == 27);
  CHECK(st.table().rows(1).size() == 27);
  CHECK_THROWS_AS(st.admit(2, 0), Error);
  CHECK_THROWS_AS(st.admit(1, 10), Error);
}

TEST_CASE("admit: static reserves the maximum context") {
  AllocatorState st(pool(Policy::StaticMax, 300));
  REQUIRE(st.admit(1, 100));
  CHECK(st.rows_held(1) == 128);
  REQUIRE(st.admit(2, 100));
  CHECK_FALSE(st.admit(3, 100));
  CHECK(st.free_rows() == 300 - 256);
}

TEST_CASE("grow: allocates only on row boundaries") {
  AllocatorState st(pool(Policy::Lazy, 10));
  REQUIRE(st.admit(1, 256));
  auto g = st.grow(1, 257);
  REQUIRE(g);
  CHECK(g->chunks.size() == 1);
  CHECK(st.rows_held(1) == 2);
  for (std::int64_t t = 258; t <= 301; ++t) CHECK(st.grow(1, t)->chunks.empty());
  CHECK(st.rows_held(1) == 2);
  CHECK_THROWS_AS(st.grow(1, 303), Error);
  CHECK_THROWS_AS(st.grow(7, 2), Error);
}

TEST_CASE("grow: out of memory is reported, not thrown") {
  AllocatorState st(pool(Policy::Lazy, 2));
  REQUIRE(st.admit(1, 256));
  REQUIRE(st.admit(2, 256));
  CHECK_FALSE(st.grow(1, 257));
  CHECK(st.t_cur(1) == 256);
}

TEST_CASE("release: round trip restores the initial state") {
  AllocatorState st(pool(Policy::Lazy, 50));
  auto first = st.admit(1, 1000);
  CHECK(st.release(1) == 4);
  CHECK(st.free_rows() == 50);
  CHECK(st.table().entries() == 0);
  auto again = st.admit(1, 1000);
  for (std::size_t i = 0; i < first->chunks.size(); ++i)
    CHECK(first->chunks[i].row_start == again->chunks[i].row_start);
  CHECK_THROWS_AS(st.release(99), Error);
}

TEST_CASE("release then admit into fragmented space") {
  AllocatorState st(pool(Policy::Lazy, 6));
  REQUIRE(st.admit(1, 512));
  REQUIRE(st.admit(2, 512));
  REQUIRE(st.admit(3, 512));
  st.release(1);
  st.release(3);
  auto g = st.admit(4, 1024);
  REQUIRE(g);
  std::vector<std::uint32_t> rows;
  for (auto& c : g->chunks) rows.push_back(c.row_start);
  CHECK(rows == std::vector<std::uint32_t>{0, 1, 4, 5});
}

TEST_CASE("allocator matches a brute-force free list on random traces") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    AllocatorState st(pool(Policy::Lazy, 64));
    RefAlloc ref(64);
    std::map<int, std::int64_t> t;
    std::uniform_int_distribution<int> op(0, 2), len(1, 3000);
    int next = 0;
    for (int step = 0; step < 300; ++step) {
      int o = op(rng);
      if (o == 0 || t.empty()) {
        std::int64_t l = len(rng);
        bool ok = st.admit(next, l).has_value();
        bool rok = ref.take(next, (l + 255) / 256);
        REQUIRE(ok == rok);
        if (ok) t[next] = l;
        ++next;
      } else {
        auto it = t.begin();
        std::advance(it, std::uniform_int_distribution<std::size_t>(0, t.size() - 1)(rng));
        if (o == 1) {
          bool ok = st.grow(it->first, it->second + 1).has_value();
          std::int64_t need = (it->second + 1 + 255) / 256 - (it->second + 255) / 256;
          bool rok = need == 0 || ref.take(it->first, need);
          REQUIRE(ok == rok);
          if (ok) ++it->second;
        } else {
          st.release(it->first);
          ref.drop(it->first);
          t.erase(it);
        }
      }
      for (auto& [id, _] : t) REQUIRE(st.table().rows(id) == ref.held[id]);
    }
  }
}

TEST_CASE("avg_batch_size: hand-built four-request trace") {
  std::vector<TraceEntry> tr = {{0, 200, 2}, {1, 200, 2}, {2, 200, 3}, {3, 200, 1}};
  // lazy: 4 live, then 3, then 1 -> 8/3; static: one at a time for 8 iterations
  CHECK(avg_batch_size(tr, 4, Policy::Lazy, 256, 1024) == doctest::Approx(8.0 / 3.0));
  CHECK(avg_batch_size(tr, 4, Policy::StaticMax, 256, 1024) == doctest::Approx(1.0));
}

TEST_CASE("avg_batch_size: requests at max context gain nothing") {
  std::vector<TraceEntry> tr;
  for (int i = 0; i < 20; ++i) tr.push_back({i, 32768 - 100, 100});
  double lazy = avg_batch_size(tr, 700, Policy::Lazy, 1024);
  double stat = avg_batch_size(tr, 700, Policy::StaticMax, 1024);
  CHECK(lazy == doctest::Approx(stat));
}

TEST_CASE("simulate_batching preempts instead of deadlocking") {
  // two requests that each need a second row at the same time, one spare row short
  std::vector<TraceEntry> tr = {{0, 256, 10}, {1, 256, 10}};
  PoolConfig c = pool(Policy::Lazy, 3);
  auto s = simulate_batching(tr, c);
  CHECK(s.iterations > 0);
  CHECK_THROWS_AS(simulate_batching({{0, 5000, 10}}, c), Error);
}

TEST_CASE("allocation log") {
  AllocatorState st(pool(Policy::Lazy, 4));
  st.enable_log(true);
  st.set_clock(3);
  st.admit(1, 300);
  st.release(1);
  auto csv = st.log_csv();
  CHECK(csv == "time,event,request,rows,free_rows\n3,ADMIT,1,2,2\n3,RELEASE,1,2,4\n");
}
