#pragma once
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pimsim/compiler.hpp"
#include "pimsim/device.hpp"
#include "pimsim/memmgr.hpp"

namespace pimsim::sched {

struct Features {
  bool itpp = true;
  bool lazy_alloc = true;
  bool pingpong = true;
  static Features all_on() { return {true, true, true}; }
  static Features all_off() { return {false, false, false}; }
};

enum class EventKind { StageExec, Sync, Comm, Admit, Grow, Release };
const char* event_kind_name(EventKind k);

struct Event {
  std::int64_t time = 0;
  EventKind kind = EventKind::StageExec;
  std::int64_t duration = 0;
  int stage = -1;
  int micro_batch = -1;
  int request = -1;
  std::int64_t iteration = 0;
};

struct Timeline {
  std::vector<Event> events;
  std::string csv() const;
  // One row per stage, one character per `cycles_per_char` cycles.
  std::string gantt(std::int64_t cycles_per_char) const;
};

struct MetricsReport {
  bool feasible = true;
  std::string error;
  int tp = 1, pp = 1;
  Features features;
  double tokens_per_sec = 0;
  double utilization_pct = 0;
  double avg_batch = 0;
  double avg_micro_batch = 0;
  std::int64_t wall_cycles = 0;
  std::int64_t tokens = 0;
  std::int64_t requests_done = 0;
  std::int64_t iterations = 0;
  std::int64_t stalls = 0;
  std::int64_t preemptions = 0;
  std::int64_t sync_events = 0;
  std::int64_t mac_lane_cycles = 0;
  std::int64_t comm_cycles = 0;  // all-reduce and stage handoff transfer time
  std::map<isa::OpKind, device::Breakdown> breakdown;  // module-level, summed over stages
};

struct SimOptions {
  int tokens_per_row = 1024;
  bool record_timeline = true;
  std::int64_t max_iterations = 10'000'000;
};

struct SimResult {
  Timeline timeline;
  MetricsReport report;
};

SimResult simulate(const std::vector<memmgr::TraceEntry>& trace, const compiler::ParallelismPlan& plan,
                   const ModelConfig& m, const device::PimTopology& topo, const device::TimingParams& tm,
                   const Features& f, const SimOptions& opt = {});

// Pipeline timing of one iteration: per-stage durations of each micro-batch.
// Returns per (mb, stage) start times; end of iteration is the last element.
struct PipelineSchedule {
  std::vector<std::vector<std::int64_t>> start;  // [mb][stage]
  std::vector<std::vector<std::int64_t>> dur;
  std::int64_t end = 0;
  std::int64_t syncs = 0;
};
PipelineSchedule schedule_pipeline(const std::vector<std::vector<std::int64_t>>& stage_dur, std::int64_t handoff,
                                   std::int64_t wrap, std::int64_t t0 = 0);

struct SweepPoint {
  compiler::ParallelismPlan plan;
  MetricsReport report;
  bool best = false;
};

std::vector<SweepPoint> sweep(const std::vector<memmgr::TraceEntry>& trace, const ModelConfig& m,
                              const device::PimTopology& topo, const device::TimingParams& tm,
                              const std::vector<std::pair<int, int>>& grid, const Features& f, int workers = 1,
                              const SimOptions& opt = {});

double utilization(const MetricsReport& r);

}  // namespace pimsim::sched
