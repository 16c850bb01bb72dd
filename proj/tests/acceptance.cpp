// One line per acceptance criterion. Exit status is 0 unless something
// crashed; pass --strict to also fail on criteria that report FAIL.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "pimsim/device.hpp"
#include "pimsim/dispatcher.hpp"
#include "pimsim/harness.hpp"
#include "properties.hpp"

using namespace pimsim;
using Clock = std::chrono::steady_clock;

namespace {

struct Line {
  bool pass;
  std::string detail;
};

int failed = 0;

void report(int id, const char* what, double limit_s, const std::function<Line()>& body) {
  auto t0 = Clock::now();
  Line l;
  try {
    l = body();
  } catch (const std::exception& e) {
    l = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(Clock::now() - t0).count();
  const bool in_time = s <= limit_s;
  const bool ok = l.pass && in_time;
  if (!ok) ++failed;
  std::printf("CRITERION %d %s  %s: %s [%.1fs / limit %.0fs%s]\n", id, ok ? "PASS" : "FAIL", what, l.detail.c_str(), s,
              limit_s, in_time ? "" : " EXCEEDED");
  std::fflush(stdout);
}

std::string fmt(double v, int prec = 3) {
  char b[64];
  std::snprintf(b, sizeof b, "%.*f", prec, v);
  return b;
}

std::string checks_text(const harness::ReproResult& r) {
  std::string s;
  for (const auto& c : r.checks) {
    if (!s.empty()) s += "; ";
    s += c.name + " " + fmt(c.observed) + " (" + c.bound + ")" + (c.pass ? "" : " MISS");
  }
  return s;
}

Line functional() {
  // toy: 2 layers, 4 heads, 2 kv heads, d_h 8, SwiGLU
  const auto m = model_preset("toy");
  device::PimTopology t;
  t.channels = 2, t.banks = 4, t.row_bytes = 64, t.gb_bytes = 64, t.mac_width = 4, t.rows_per_bank = 4096;
  double worst = 0;
  int outs = 0;
  for (auto [tp, pp] : std::vector<std::pair<int, int>>{{1, 1}, {2, 1}, {1, 2}, {2, 2}})
    for (bool pingpong : {false, true}) {
      auto r = harness::verify_decode(m, t, tp, pp, 8, pingpong, {5, 9}, 4, 17);
      worst = std::max(worst, r.max_rel_err);
      outs += r.outputs;
    }
  return {worst < 1e-4, std::to_string(outs) + " outputs over 4 plans x 2 modes, max rel err " + fmt(worst * 1e6, 3) +
                            "e-6 (< 1e-4)"};
}

Line dpa_oracle() {
  std::mt19937_64 rng(2024);
  long long compared = 0;
  int mismatches = 0;
  for (int tab = 0; tab < 100; ++tab) {
    // random dense Va2Pa for request 5 over 64 distinct rows
    std::vector<std::uint32_t> pas(4096);
    std::iota(pas.begin(), pas.end(), 0u);
    std::shuffle(pas.begin(), pas.end(), rng);
    pas.resize(64);
    dispatch::Va2PaTable tb;
    for (auto pa : pas) tb.append(5, pa);
    auto segs = fx::random_segments(rng, true);
    auto stack = fx::build(segs);
    for (std::int64_t t = 1; t <= 1024; ++t) {
      dispatch::ConfigBuffer cfg{1, 0, {{5, t}}};
      if (dispatch::expand(stack, cfg, tb, 5) != fx::oracle_expand(segs, t, pas)) ++mismatches;
      ++compared;
    }
  }
  // the worked two-row instance: T_cur 300 at 256 tokens per row
  dispatch::Va2PaTable fig;
  fig.append(1, 22);
  fig.append(2, 33);
  fig.append(2, 34);
  dispatch::ConfigBuffer cfg{4, 0, {{1, 200}, {2, 300}}};
  auto cmds = dispatch::expand(fx::fig6b_stack(), cfg, fig, 2);
  const bool lb2 = dispatch::compute_loop_bound(300, 256) == 2;
  std::vector<isa::PimCommand> want = {isa::WrInp{0},      isa::DotProd{33, 0}, isa::RdOut{16},
                                       isa::DotProd{33, 128}, isa::RdOut{17},   isa::DotProd{34, 0},
                                       isa::RdOut{18},     isa::DotProd{34, 128}, isa::RdOut{19}};
  const bool fig_ok = lb2 && cmds == want;
  return {mismatches == 0 && fig_ok, std::to_string(compared) + " expansions, " + std::to_string(mismatches) +
                                         " mismatches; T_cur=300 LB=2 rows 33,34 " + (fig_ok ? "ok" : "WRONG")};
}

Line cycle_model() {
  device::PimTopology t;
  device::TimingParams tm;
  double worst = 0;
  std::string s;
  for (auto [r, c] : std::vector<std::pair<int, int>>{{4096, 8192}, {4096, 16384}, {8192, 4096}, {12288, 12288}})
    for (bool pp : {false, true}) {
      device::GemvShape g{r, c};
      device::ModuleState st(t, false, pp);
      // timing-only inputs: lengths matter, data does not
      const auto chunk = device::gemv_chunk_elems(t);
      for (std::int64_t k = 0; k * chunk < g.cols; ++k)
        st.set_gpr(std::uint32_t(k), device::GprVector{{}, std::uint32_t(std::min(chunk, g.cols - k * chunk)), 1, 1, 0});
      auto res = device::execute(device::gemv_commands(g, t, 0, 0, 100000), st, tm);
      const double a = double(device::analytic_cycles(g, t, tm, pp));
      const double d = std::abs(double(res.cycles) - a) / a;
      worst = std::max(worst, d);
    }
  return {worst <= 0.01, "4 shapes x {serial, ping-pong}, max |sim-analytic|/analytic " + fmt(100 * worst, 4) +
                             "% (<= 1%)"};
}

Line repro(harness::Figure f) {
  auto r = harness::reproduce(f, {7, harness::worker_count(), 200});
  return {r.pass, checks_text(r)};
}

Line pingpong_and_share() {
  auto a = harness::reproduce(harness::Figure::Pingpong);
  auto b = harness::reproduce(harness::Figure::LatencyBd);
  return {a.pass && b.pass, checks_text(a) + "; " + checks_text(b)};
}

Line properties() {
  std::string s;
  bool ok = true;
  for (const auto& r : props::run_all(1000, 8)) {
    if (!s.empty()) s += "; ";
    s += r.name + " " + std::to_string(r.cases) + "/" + std::to_string(r.failures) + " fail";
    if (r.failures) s += " (" + r.first + ")";
    ok = ok && r.cases >= 1000 && r.failures == 0;
  }
  return {ok, s};
}

}  // namespace

int main(int argc, char** argv) {
  const bool strict = argc > 1 && std::strcmp(argv[1], "--strict") == 0;
  report(1, "functional decode equivalence", 10, functional);
  report(2, "DPA expansion oracle", 60, dpa_oracle);
  report(3, "cycle-model consistency", 30, cycle_model);
  report(4, "lazy-allocation batch growth", 120, [] { return repro(harness::Figure::BatchGrowth); });
  report(5, "ping-pong latency reduction", 60, pingpong_and_share);
  report(6, "TP/PP sweep shape", 600, [] { return repro(harness::Figure::TppSweep); });
  report(7, "utilization scaling", 900, [] { return repro(harness::Figure::UtilScaling); });
  report(8, "property suites", 600, properties);
  std::printf("%d of 8 criteria failed%s\n", failed, strict ? "" : " (informational; rerun with --strict to gate)");
  return strict && failed ? 2 : 0;
}
