#include <numeric>

#include "doctest.h"
#include "pimsim/harness.hpp"
#include "pimsim/scheduler.hpp"
#include "toy.hpp"

using namespace pimsim;
using sched::Features;

namespace {

std::vector<memmgr::TraceEntry> toy_trace(int n, std::uint64_t seed) {
  harness::TraceSpec s;
  s.mean = 40, s.std = 12, s.min = 8, s.max = 64;
  s.n_requests = n;
  s.seed = seed;
  s.out_len.lo = 4, s.out_len.hi = 16;
  return harness::gen_trace(s);
}

// short max context so static reservations fit the toy module
ModelConfig toy_model() {
  auto m = model_preset("toy");
  m.max_ctl = 256;
  return m;
}

sched::SimOptions toy_opt() {
  sched::SimOptions o;
  o.tokens_per_row = 8;
  return o;
}

sched::SimResult run_toy(int tp, int pp, Features f, int n = 12, std::uint64_t seed = 3, int mb = 0) {
  compiler::ParallelismPlan plan{tp, pp, mb};
  auto topo = toy::topology();
  topo.modules_per_node = 4;
  return sched::simulate(toy_trace(n, seed), plan, toy_model(), topo, {}, f, toy_opt());
}

std::vector<memmgr::TraceEntry> qmsum(int n) {
  return harness::gen_trace(harness::TraceSpec::preset("QMSUM", n, 11));
}

device::PimTopology four_nodes() {
  device::PimTopology t;
  t.nodes = 4;
  return t;
}

}  // namespace

TEST_CASE("pipeline schedule matches a hand-drawn Gantt") {
  // 3 micro-batches x 4 stages, handoff 1, wrap 10, starting at 100
  std::vector<std::vector<std::int64_t>> dur = {{4, 6, 5, 3}, {2, 2, 2, 2}, {7, 1, 1, 1}};
  auto ps = sched::schedule_pipeline(dur, 1, 10, 100);
  std::vector<std::vector<std::int64_t>> want = {{100, 105, 112, 118}, {104, 111, 117, 121}, {106, 114, 119, 123}};
  CHECK(ps.start == want);
  CHECK(ps.end == 134);
  CHECK(ps.syncs == 10);

  // one stage: no handoffs and no wrap
  auto one = sched::schedule_pipeline({{5}, {7}}, 99, 99, 0);
  CHECK(one.end == 12);
  CHECK(one.syncs == 0);
}

TEST_CASE("single request at pp=1 has no syncs and throughput is 1/latency") {
  auto topo = toy::topology();
  std::vector<memmgr::TraceEntry> tr = {{0, 30, 1}};
  auto r = sched::simulate(tr, {2, 1}, toy_model(), topo, {}, Features::all_on(), toy_opt());
  CHECK(r.report.sync_events == 0);
  for (const auto& e : r.timeline.events) CHECK(e.kind != sched::EventKind::Sync);
  REQUIRE(r.report.tokens == 1);
  CHECK(r.report.tokens_per_sec == doctest::Approx(1e9 / double(r.report.wall_cycles)));

  // two tokens: the second step sees one more token of context
  tr[0].out_len = 2;
  auto r2 = sched::simulate(tr, {2, 1}, toy_model(), topo, {}, Features::all_on(), toy_opt());
  CHECK(r2.report.wall_cycles > r.report.wall_cycles);
  CHECK(r2.report.sync_events == 0);
}

TEST_CASE("pipelined runs sync once per handoff and once per wrap") {
  auto r = run_toy(1, 2, Features::all_on(), 1);
  // one request, one micro-batch: one handoff plus the wrap per iteration
  CHECK(r.report.sync_events == 2 * r.report.iterations);
  auto g = r.timeline.gantt(std::max<std::int64_t>(1, r.report.wall_cycles / 80));
  CHECK(std::count(g.begin(), g.end(), '\n') >= 2);
}

TEST_CASE("work conservation") {
  for (auto [tp, pp] : std::vector<std::pair<int, int>>{{1, 1}, {2, 1}, {1, 2}, {2, 2}})
    for (auto f : {Features::all_on(), Features::all_off(), Features{true, false, true}, Features{false, true, false}}) {
      CAPTURE(tp);
      CAPTURE(pp);
      auto tr = toy_trace(15, 5);
      compiler::ParallelismPlan plan{tp, pp};
      auto topo = toy::topology();
      topo.modules_per_node = 4;
      auto r = sched::simulate(tr, plan, toy_model(), topo, {}, f, toy_opt()).report;
      std::int64_t want = 0;
      for (auto& e : tr) want += e.out_len;
      CHECK(r.tokens == want);
      CHECK(r.requests_done == 15);
      CHECK(r.utilization_pct >= 0);
      CHECK(r.utilization_pct <= 100);
      // per-op breakdown phases add up to the op total
      for (const auto& [op, b] : r.breakdown) CHECK(b.total() == b.dt_gb + b.dt_out + b.mac + b.epu);
    }
}

TEST_CASE("same inputs give identical reports and timelines") {
  auto a = run_toy(2, 2, Features::all_on(), 20, 9);
  auto b = run_toy(2, 2, Features::all_on(), 20, 9);
  CHECK(a.timeline.csv() == b.timeline.csv());
  CHECK(a.report.wall_cycles == b.report.wall_cycles);
  CHECK(a.report.tokens_per_sec == b.report.tokens_per_sec);
  CHECK(a.timeline.csv().rfind("time,kind,duration,stage,micro_batch,request,iteration\n", 0) == 0);
}

TEST_CASE("memory pressure stalls and preempts but finishes everything") {
  auto topo = toy::topology();
  topo.rows_per_bank = 160;  // a handful of KV row slots
  std::vector<memmgr::TraceEntry> tr;
  for (int i = 0; i < 10; ++i) tr.push_back({i, 30 + i, 24});
  auto r = sched::simulate(tr, {2, 1}, toy_model(), topo, {}, Features::all_on(), toy_opt()).report;
  CHECK(r.requests_done == 10);
  CHECK(r.tokens == 240);
  CHECK(r.stalls > 0);
}

TEST_CASE("automatic micro-batch is at least as good as fixed choices") {
  auto m = model_preset("7B");
  auto tr = qmsum(40);
  sched::SimOptions o;
  o.record_timeline = false;
  auto run = [&](int mb) {
    return sched::simulate(tr, {8, 4, mb}, m, four_nodes(), {}, Features::all_on(), o).report.tokens_per_sec;
  };
  const double autov = run(0);
  for (int mb : {1, 2, 4, 8, 16, 64}) {
    CAPTURE(mb);
    CHECK(autov >= 0.99 * run(mb));
  }
}

TEST_CASE("iteration time is unimodal in micro-batch count for uniform stages") {
  // B requests, per-request stage cost c, fixed per-micro-batch cost k
  const std::int64_t B = 24, c = 100, k = 900, ho = 300;
  std::vector<std::int64_t> ends;
  for (std::int64_t n = 1; n <= B; ++n) {
    if (B % n) continue;
    std::vector<std::vector<std::int64_t>> dur(n, std::vector<std::int64_t>(4, k + c * (B / n)));
    ends.push_back(sched::schedule_pipeline(dur, ho, 0).end);
  }
  std::size_t lo = std::min_element(ends.begin(), ends.end()) - ends.begin();
  for (std::size_t i = 1; i <= lo; ++i) CHECK(ends[i] <= ends[i - 1]);
  for (std::size_t i = lo + 1; i < ends.size(); ++i) CHECK(ends[i] >= ends[i - 1]);
  CHECK(lo > 0);
  CHECK(lo + 1 < ends.size());
}

TEST_CASE("each feature helps on its own") {
  auto m = model_preset("7B");
  auto tr = qmsum(40);
  sched::SimOptions o;
  o.record_timeline = false;
  auto tps = [&](Features f) {
    return sched::simulate(tr, {8, 4}, m, four_nodes(), {}, f, o).report.tokens_per_sec;
  };
  const double off = tps(Features::all_off()), on = tps(Features::all_on());
  CHECK(on > off);
  CHECK(tps({true, false, false}) >= off);
  CHECK(tps({false, true, false}) >= off);
  CHECK(tps({false, false, true}) >= off);
  CHECK(on >= tps({true, false, true}));
  CHECK(on >= tps({true, true, false}));
}

TEST_CASE("sweep keeps infeasible points as data and flags one best") {
  auto m = model_preset("7B");
  auto tr = qmsum(20);
  sched::SimOptions o;
  o.record_timeline = false;
  auto pts = sched::sweep(tr, m, four_nodes(), {}, {{8, 4}, {3, 8}, {64, 1}, {4, 8}}, Features::all_on(), 2, o);
  REQUIRE(pts.size() == 4);
  CHECK(pts[0].report.feasible);
  CHECK_FALSE(pts[1].report.feasible);
  CHECK_FALSE(pts[1].report.error.empty());
  CHECK_FALSE(pts[2].report.feasible);
  CHECK(pts[3].report.feasible);
  CHECK(std::count_if(pts.begin(), pts.end(), [](auto& p) { return p.best; }) == 1);

  // worker count does not change results
  auto one = sched::sweep(tr, m, four_nodes(), {}, {{8, 4}, {4, 8}}, Features::all_on(), 1, o);
  CHECK(one[0].report.tokens_per_sec == pts[0].report.tokens_per_sec);
  CHECK(one[1].report.tokens_per_sec == pts[3].report.tokens_per_sec);
}

TEST_CASE("throughput ordering on the 7B grid") {
  auto m = model_preset("7B");
  auto tr = qmsum(60);
  sched::SimOptions o;
  o.record_timeline = false;
  auto pts = sched::sweep(tr, m, four_nodes(), {}, harness::plan_grid(m, four_nodes()), Features::all_on(), 1, o);
  double mx = 0, mn = 1e300;
  for (auto& p : pts) mx = std::max(mx, p.report.tokens_per_sec), mn = std::min(mn, p.report.tokens_per_sec);
  // pure TP and pure PP are both worse than a mix
  CHECK(mx / mn > 1.3);
  CHECK_FALSE(pts.front().best);
  CHECK_FALSE(pts.back().best);
}
