#include "pimsim/memmgr.hpp"

#include <limits>
#include <sstream>

namespace pimsim::memmgr {

const char* policy_name(Policy p) { return p == Policy::Lazy ? "LAZY" : "STATIC_MAX"; }

AllocatorState::AllocatorState(const PoolConfig& cfg) : cfg_(cfg) {
  if (cfg.total_rows < 0 || cfg.tokens_per_row < 1 || cfg.max_ctl < 1)
    throw Error("allocator: bad pool configuration");
  for (std::int64_t r = 0; r < cfg.total_rows; ++r) free_.insert(static_cast<std::uint32_t>(r));
}

void AllocatorState::note(const char* ev, int req, std::int64_t rows) {
  if (logging_) log_.push_back({clock_, ev, req, rows, free_rows()});
}

Grant AllocatorState::take(int request_id, Live& l, std::int64_t n) {
  Grant g;
  for (std::int64_t i = 0; i < n; ++i) {
    std::uint32_t row = *free_.begin();
    free_.erase(free_.begin());
    std::uint32_t va = static_cast<std::uint32_t>(l.rows.size());
    l.rows.push_back(row);
    table_.map(request_id, va, row);
    g.chunks.push_back({cfg_.module_id, 0, cfg_.channels, 0, cfg_.banks, row, 1});
    g.deltas.push_back({request_id, va, row});
  }
  return g;
}

std::optional<Grant> AllocatorState::admit(int request_id, std::int64_t l_in) {
  if (l_in < 1) throw Error("admit: input length must be >= 1");
  if (l_in > cfg_.max_ctl) throw Error("admit: input length exceeds max context");
  if (live(request_id)) throw Error("admit: request already live");
  std::int64_t need = rows_for(cfg_.policy == Policy::StaticMax ? cfg_.max_ctl : l_in);
  if (need > free_rows() ||
      std::int64_t(table_.entries()) + need > cfg_.va2pa_budget_entries) {
    note("REJECT", request_id, need);
    return std::nullopt;
  }
  Live& l = live_[request_id];
  l.t_cur = l_in;
  Grant g = take(request_id, l, need);
  note("ADMIT", request_id, need);
  return g;
}

std::optional<Grant> AllocatorState::grow(int request_id, std::int64_t new_t_cur) {
  auto it = live_.find(request_id);
  if (it == live_.end()) throw Error("grow: unknown request");
  Live& l = it->second;
  if (new_t_cur != l.t_cur + 1) throw Error("grow: t_cur must advance by one");
  if (new_t_cur > cfg_.max_ctl) throw Error("grow: context exceeds max_ctl");
  std::int64_t need = rows_for(new_t_cur) - std::int64_t(l.rows.size());
  if (need <= 0) {
    l.t_cur = new_t_cur;
    return Grant{};
  }
  if (need > free_rows() || std::int64_t(table_.entries()) + need > cfg_.va2pa_budget_entries) {
    note("OOM", request_id, need);
    return std::nullopt;
  }
  l.t_cur = new_t_cur;
  Grant g = take(request_id, l, need);
  note("GROW", request_id, need);
  return g;
}

std::int64_t AllocatorState::release(int request_id) {
  auto it = live_.find(request_id);
  if (it == live_.end()) throw Error("release: unknown request " + std::to_string(request_id));
  std::int64_t n = std::int64_t(it->second.rows.size());
  for (auto r : it->second.rows) free_.insert(r);
  live_.erase(it);
  table_.release(request_id);
  note("RELEASE", request_id, n);
  return n;
}

std::int64_t AllocatorState::t_cur(int request_id) const {
  auto it = live_.find(request_id);
  if (it == live_.end()) throw Error("t_cur: unknown request");
  return it->second.t_cur;
}

std::int64_t AllocatorState::rows_held(int request_id) const {
  auto it = live_.find(request_id);
  return it == live_.end() ? 0 : std::int64_t(it->second.rows.size());
}

std::int64_t AllocatorState::live_rows() const {
  std::int64_t n = 0;
  for (const auto& [_, l] : live_) n += std::int64_t(l.rows.size());
  return n;
}

std::vector<int> AllocatorState::live_requests() const {
  std::vector<int> v;
  for (const auto& [id, _] : live_) v.push_back(id);
  return v;
}

std::string AllocatorState::log_csv() const {
  std::ostringstream os;
  os << "time,event,request,rows,free_rows\n";
  for (const auto& e : log_)
    os << e.time << ',' << e.event << ',' << e.request << ',' << e.rows << ',' << e.free_rows << '\n';
  return os.str();
}

BatchStats simulate_batching(const std::vector<TraceEntry>& trace, const PoolConfig& cfg) {
  AllocatorState st(cfg);
  struct Run {
    TraceEntry req;
    std::int64_t t;
    std::int64_t generated;
  };
  std::deque<Run> queue;
  for (const auto& r : trace) {
    if (r.input_len + r.out_len > cfg.max_ctl) throw Error("trace request exceeds max_ctl");
    queue.push_back({r, r.input_len, 0});
  }
  std::vector<Run> live;
  BatchStats s;
  double live_sum = 0, run_sum = 0;
  bool hold = false;  // skip admission right after a preemption
  while (!queue.empty() || !live.empty()) {
    while (!queue.empty() && !(hold && !live.empty())) {
      const Run& q = queue.front();
      if (!st.admit(q.req.id, q.t)) break;
      live.push_back(q);
      queue.pop_front();
    }
    if (live.empty()) throw Error("request " + std::to_string(queue.front().req.id) + " never fits");
    std::int64_t running = 0;
    for (auto& r : live) {
      if (st.grow(r.req.id, r.t + 1)) {
        ++r.t;
        ++r.generated;
        ++running;
      } else {
        ++s.stalls;
      }
    }
    if (running == 0) {
      // every live request is blocked on memory: push the youngest back
      Run victim = live.back();
      live.pop_back();
      st.release(victim.req.id);
      queue.push_front(victim);
      ++s.preemptions;
      hold = true;
      continue;
    }
    hold = false;
    live_sum += double(live.size());
    run_sum += double(running);
    ++s.iterations;
    std::vector<Run> keep;
    for (auto& r : live) {
      if (r.generated >= r.req.out_len) st.release(r.req.id);
      else keep.push_back(r);
    }
    live = std::move(keep);
  }
  if (s.iterations) {
    s.avg_batch = live_sum / double(s.iterations);
    s.avg_running = run_sum / double(s.iterations);
  }
  return s;
}

double avg_batch_size(const std::vector<TraceEntry>& trace, std::int64_t capacity_rows, Policy policy,
                      std::int64_t tokens_per_row, std::int64_t max_ctl) {
  PoolConfig c;
  c.policy = policy;
  c.total_rows = capacity_rows;
  c.tokens_per_row = tokens_per_row;
  c.max_ctl = max_ctl;
  c.va2pa_budget_entries = std::numeric_limits<std::int64_t>::max();
  return simulate_batching(trace, c).avg_batch;
}

double oracle_batch_size(const std::vector<TraceEntry>& trace, std::int64_t capacity_rows,
                         std::int64_t tokens_per_row) {
  PoolConfig c;
  c.policy = Policy::Lazy;
  c.total_rows = capacity_rows * tokens_per_row;
  c.tokens_per_row = 1;
  c.max_ctl = std::numeric_limits<std::int32_t>::max();
  c.va2pa_budget_entries = std::numeric_limits<std::int64_t>::max();
  return simulate_batching(trace, c).avg_batch;
}

}  // namespace pimsim::memmgr
