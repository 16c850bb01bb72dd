#pragma once
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pimsim/dispatcher.hpp"

namespace pimsim::memmgr {

enum class Policy { StaticMax, Lazy };
const char* policy_name(Policy p);

// One row index across every bank of every KV region of a module; a request
// holding k chunks owns row-slot k in each region.
struct Chunk {
  int module_id = 0;
  int channel_begin = 0, channel_end = 0;
  int bank_begin = 0, bank_end = 0;
  std::uint32_t row_start = 0;
  std::uint32_t rows = 1;
};

struct Va2PaDelta {
  int request_id;
  std::uint32_t va;
  std::uint32_t pa;
};

struct Grant {
  std::vector<Chunk> chunks;
  std::vector<Va2PaDelta> deltas;
};

struct AllocEvent {
  std::int64_t time;
  std::string event;
  int request;
  std::int64_t rows;
  std::int64_t free_rows;
};

struct PoolConfig {
  Policy policy = Policy::Lazy;
  std::int64_t total_rows = 0;
  std::int64_t tokens_per_row = 256;
  std::int64_t max_ctl = 32768;
  int module_id = 0;
  int channels = 16;
  int banks = 16;
  std::int64_t va2pa_budget_entries = dispatch::DispatchBudget::addr_map_bytes / dispatch::kVa2PaEntryBytes;
};

class AllocatorState {
 public:
  explicit AllocatorState(const PoolConfig& cfg);

  // nullopt means REJECTED (batch full). Throws on invalid input.
  std::optional<Grant> admit(int request_id, std::int64_t l_in);
  // nullopt means out of memory; the caller stalls the request.
  std::optional<Grant> grow(int request_id, std::int64_t new_t_cur);
  std::int64_t release(int request_id);

  bool live(int request_id) const { return live_.count(request_id) != 0; }
  std::int64_t t_cur(int request_id) const;
  std::int64_t rows_held(int request_id) const;
  std::int64_t rows_for(std::int64_t tokens) const { return ceil_div(tokens, cfg_.tokens_per_row); }
  std::int64_t free_rows() const { return static_cast<std::int64_t>(free_.size()); }
  std::int64_t live_rows() const;
  std::int64_t total_rows() const { return cfg_.total_rows; }
  std::size_t live_count() const { return live_.size(); }
  const PoolConfig& config() const { return cfg_; }
  const dispatch::Va2PaTable& table() const { return table_; }
  std::vector<int> live_requests() const;

  void set_clock(std::int64_t t) { clock_ = t; }
  const std::vector<AllocEvent>& log() const { return log_; }
  void enable_log(bool on) { logging_ = on; }
  std::string log_csv() const;

 private:
  struct Live {
    std::int64_t t_cur;
    std::vector<std::uint32_t> rows;
  };
  Grant take(int request_id, Live& l, std::int64_t n);
  void note(const char* ev, int req, std::int64_t rows);

  PoolConfig cfg_;
  std::set<std::uint32_t> free_;
  std::map<int, Live> live_;
  dispatch::Va2PaTable table_;
  std::int64_t clock_ = 0;
  bool logging_ = false;
  std::vector<AllocEvent> log_;
};

struct TraceEntry {
  int id = 0;
  std::int64_t input_len = 0;
  std::int64_t out_len = 0;
};

struct BatchStats {
  double avg_batch = 0;       // iteration-weighted mean of live requests
  double avg_running = 0;     // same, excluding stalled requests
  std::int64_t iterations = 0;
  std::int64_t stalls = 0;
  std::int64_t preemptions = 0;
};

// Greedy FIFO admit-on-release simulation; one decode token per running
// request per iteration.
BatchStats simulate_batching(const std::vector<TraceEntry>& trace, const PoolConfig& cfg);
double avg_batch_size(const std::vector<TraceEntry>& trace, std::int64_t capacity_rows, Policy policy,
                      std::int64_t tokens_per_row = 256, std::int64_t max_ctl = 32768);
// Upper reference: token-granular allocation of the same byte capacity.
double oracle_batch_size(const std::vector<TraceEntry>& trace, std::int64_t capacity_rows,
                         std::int64_t tokens_per_row = 256);

}  // namespace pimsim::memmgr
