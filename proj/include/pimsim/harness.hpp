#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "pimsim/compiler.hpp"
#include "pimsim/device.hpp"
#include "pimsim/memmgr.hpp"
#include "pimsim/scheduler.hpp"

namespace pimsim::harness {

struct OutLenModel {
  bool fixed = false;
  std::int64_t k = 256;           // when fixed
  std::int64_t lo = 64, hi = 512;  // uniform otherwise
};

struct TraceSpec {
  enum class Source { Synth, Csv } source = Source::Synth;
  double mean = 13966, std = 6182, min = 2651, max = 30456;
  int n_requests = 200;
  OutLenModel out_len;
  std::uint64_t seed = 1;
  std::string path;  // CSV source

  // "QMSUM", "HOTPOTQA", "MUSIQUE"
  static TraceSpec preset(const std::string& name, int n, std::uint64_t seed);
  void validate() const;
};

// Location/scale of the untruncated normal whose truncation to [min, max]
// has the requested mean and std.
std::pair<double, double> fit_truncated_normal(double mean, double std, double lo, double hi);

std::vector<memmgr::TraceEntry> gen_trace(const TraceSpec& s);
std::vector<memmgr::TraceEntry> load_trace(const std::string& csv_text);
std::vector<memmgr::TraceEntry> load_trace_file(const std::string& path);
std::string save_trace(const std::vector<memmgr::TraceEntry>& t);
std::vector<memmgr::TraceEntry> make_trace(const TraceSpec& s);  // SYNTH or CSV

struct Config {
  ModelConfig model = model_preset("7B");
  device::PimTopology topology;
  device::TimingParams timing;
  compiler::ParallelismPlan plan{8, 4};
  sched::Features features;
  TraceSpec trace;
  int tokens_per_row = 1024;
};

Config parse_config(const std::string& json_text);
Config load_config_file(const std::string& path);
std::string config_json(const Config& c);

enum class Format { Json, Csv, Text };
Format parse_format(const std::string& s);
std::string emit_report(const sched::MetricsReport& r, const Config& c, Format f);

enum class Figure { BatchGrowth, LatencyBd, TppSweep, UtilScaling, Pingpong };
Figure parse_figure(const std::string& s);
const char* figure_name(Figure f);

struct Check {
  std::string name;
  double observed = 0;
  std::string bound;
  bool pass = false;
};

struct ReproResult {
  Figure figure;
  bool pass = true;
  std::vector<Check> checks;
  std::string table;  // human-readable rows
  std::string json;
};

struct ReproOptions {
  std::uint64_t seed = 7;
  int workers = 1;
  int sweep_requests = 200;
};

ReproResult reproduce(Figure f, const ReproOptions& opt = {});

// Every (tp, pp) with tp*pp == modules that the compiler accepts.
std::vector<std::pair<int, int>> plan_grid(const ModelConfig& m, const device::PimTopology& topo);

// max over elements of |a-b| / max(|b|, 1e-2 * rms(b))
double rel_err(const std::vector<float>& a, const std::vector<float>& b);

// Functional decode on the simulated modules against the dense decoder.
struct VerifyResult {
  double max_rel_err = 0;
  int outputs = 0;
};
VerifyResult verify_decode(const ModelConfig& m, const device::PimTopology& topo, int tp, int pp,
                           int tokens_per_row, bool pingpong, const std::vector<std::int64_t>& l_in, int steps,
                           std::uint64_t seed);

// PIMSIM_WORKERS, default 1
int worker_count();

}  // namespace pimsim::harness
