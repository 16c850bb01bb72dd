#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pimsim/harness.hpp"
#include "pimsim/runtime.hpp"

using namespace pimsim;
namespace fs = std::filesystem;

namespace {

struct Opts {
  std::string config;
  std::string out;
  std::string format = "json";
  std::int64_t seed = -1;
};

harness::Config load(const Opts& o) {
  harness::Config c = o.config.empty() ? harness::Config{} : harness::load_config_file(o.config);
  if (o.seed >= 0) c.trace.seed = std::uint64_t(o.seed);
  return c;
}

// Writes to <out>/<name> when --out is set, otherwise to stdout.
void emit(const Opts& o, const std::string& name, const std::string& body) {
  if (o.out.empty()) {
    std::cout << body;
    return;
  }
  fs::create_directories(o.out);
  std::ofstream f(fs::path(o.out) / name, std::ios::binary);
  if (!f) throw Error("cannot write " + (fs::path(o.out) / name).string());
  f << body;
  std::cerr << "wrote " << (fs::path(o.out) / name).string() << "\n";
}

const char* ext(harness::Format f) {
  return f == harness::Format::Json ? "json" : f == harness::Format::Csv ? "csv" : "txt";
}

compiler::CompiledModel compile(const harness::Config& c, compiler::ExecutionTable* table_out) {
  compiler::ParallelismPlan plan = c.plan;
  plan.attention = c.features.itpp ? partition::Strategy::Itpp : partition::Strategy::Hfa;
  auto g = compiler::match_patterns(compiler::build_decoder_graph(c.model));
  auto table = compiler::build_execution_table(g, plan, c.model, c.topology);
  if (table_out) *table_out = table;
  return compiler::codegen(table, c.model, c.topology, c.tokens_per_row);
}

int cmd_compile(const Opts& o) {
  auto c = load(o);
  compiler::ExecutionTable table;
  auto cm = compile(c, &table);
  emit(o, "graph.json", compiler::build_decoder_graph(c.model).to_json() + "\n");
  emit(o, "table.json", table.to_json() + "\n");
  auto manifests = nlohmann::ordered_json::array();
  for (const auto& m : cm.modules) manifests.push_back(nlohmann::ordered_json::parse(m.manifest.to_json()));
  emit(o, "manifest.json", manifests.dump(2) + "\n");
  std::size_t stacks = 0;
  for (const auto& m : cm.modules) stacks += m.stacks.size();
  std::cerr << c.model.name << ": " << cm.modules.size() << " modules, " << stacks << " command stacks, kv_slots "
            << cm.modules[0].manifest.kv_slots << "\n";
  return 0;
}

int cmd_verify(const Opts& o, int steps) {
  auto c = load(o);
  auto r = harness::verify_decode(c.model, c.topology, c.plan.tp, c.plan.pp, c.tokens_per_row, c.features.pingpong,
                                  {5, 9}, steps, c.trace.seed);
  const bool ok = r.max_rel_err < 1e-4;
  std::cout << "outputs " << r.outputs << "  max rel err " << r.max_rel_err << "  " << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? 0 : 2;
}

int cmd_simulate(const Opts& o, bool timeline) {
  auto c = load(o);
  auto fmt = harness::parse_format(o.format);
  auto tr = harness::make_trace(c.trace);
  sched::SimOptions so;
  so.tokens_per_row = c.tokens_per_row;
  so.record_timeline = timeline;
  auto res = sched::simulate(tr, c.plan, c.model, c.topology, c.timing, c.features, so);
  emit(o, std::string("report.") + ext(fmt), harness::emit_report(res.report, c, fmt));
  if (timeline) emit(o, "timeline.csv", res.timeline.csv());
  return 0;
}

int cmd_sweep(const Opts& o) {
  auto c = load(o);
  auto tr = harness::make_trace(c.trace);
  auto grid = harness::plan_grid(c.model, c.topology);
  if (grid.empty()) throw Error("sweep: no (tp, pp) fits the topology");
  sched::SimOptions so;
  so.tokens_per_row = c.tokens_per_row;
  so.record_timeline = false;
  auto pts = sched::sweep(tr, c.model, c.topology, c.timing, grid, c.features, harness::worker_count(), so);
  std::string csv = "tp,pp,feasible,tokens_per_sec,utilization_pct,avg_batch,best,error\n";
  for (const auto& p : pts) {
    const auto& r = p.report;
    csv += std::to_string(p.plan.tp) + "," + std::to_string(p.plan.pp) + "," + (r.feasible ? "1" : "0") + "," +
           std::to_string(r.tokens_per_sec) + "," + std::to_string(r.utilization_pct) + "," +
           std::to_string(r.avg_batch) + "," + (p.best ? "1" : "0") + "," + r.error + "\n";
  }
  emit(o, "sweep.csv", csv);
  return 0;
}

int cmd_reproduce(const Opts& o, const std::string& fig) {
  harness::ReproOptions ro;
  if (o.seed >= 0) ro.seed = std::uint64_t(o.seed);
  ro.workers = harness::worker_count();
  auto f = harness::parse_figure(fig);
  auto r = harness::reproduce(f, ro);
  std::cout << r.table << "\n";
  for (const auto& ch : r.checks)
    std::cout << (ch.pass ? "ok    " : "FAIL  ") << ch.name << ": observed " << ch.observed << ", expected "
              << ch.bound << "\n";
  if (!o.out.empty()) emit(o, std::string(harness::figure_name(f)) + ".json", r.json);
  std::cout << harness::figure_name(f) << (r.pass ? " PASS" : " FAIL") << "\n";
  return r.pass ? 0 : 2;
}

int cmd_gen_trace(const Opts& o, const std::string& preset, int n) {
  auto c = load(o);
  harness::TraceSpec s = c.trace;
  if (!preset.empty()) {
    auto p = harness::TraceSpec::preset(preset, s.n_requests, s.seed);
    s.mean = p.mean, s.std = p.std, s.min = p.min, s.max = p.max;
  }
  if (n > 0) s.n_requests = n;
  s.source = harness::TraceSpec::Source::Synth;
  emit(o, "trace.csv", harness::save_trace(harness::gen_trace(s)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PIM LLM serving simulator"};
  app.require_subcommand(1);
  Opts o;
  auto common = [&](CLI::App* a) {
    a->add_option("--config", o.config, "JSON config")->check(CLI::ExistingFile);
    a->add_option("--seed", o.seed, "trace seed override");
    a->add_option("--out", o.out, "output directory");
    a->add_option("--format", o.format, "json|csv|text");
  };
  auto* compile_c = app.add_subcommand("compile", "compile the model to per-module command stacks");
  auto* verify_c = app.add_subcommand("verify", "functional decode check against the dense reference");
  auto* sim_c = app.add_subcommand("simulate", "serve the configured trace");
  auto* sweep_c = app.add_subcommand("sweep", "throughput over every (tp, pp) that fits");
  auto* repro_c = app.add_subcommand("reproduce", "run a scripted experiment and check its bound");
  auto* gen_c = app.add_subcommand("gen-trace", "write a synthetic trace as CSV");
  for (auto* a : {compile_c, verify_c, sim_c, sweep_c, repro_c, gen_c}) common(a);
  int steps = 4;
  verify_c->add_option("--steps", steps, "decode steps per request");
  bool timeline = false;
  sim_c->add_flag("--timeline", timeline, "also write timeline.csv");
  std::string fig;
  repro_c->add_option("figure", fig, "BATCH_GROWTH|LATENCY_BD|TPP_SWEEP|UTIL_SCALING|PINGPONG")->required();
  std::string preset;
  int n = 0;
  gen_c->add_option("--preset", preset, "QMSUM|HOTPOTQA|MUSIQUE");
  gen_c->add_option("-n,--requests", n, "request count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    if (*compile_c) return cmd_compile(o);
    if (*verify_c) return cmd_verify(o, steps);
    if (*sim_c) return cmd_simulate(o, timeline);
    if (*sweep_c) return cmd_sweep(o);
    if (*repro_c) return cmd_reproduce(o, fig);
    if (*gen_c) return cmd_gen_trace(o, preset, n);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
