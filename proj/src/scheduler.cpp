#include "pimsim/scheduler.hpp"

#include <algorithm>
#include <atomic>
#include <climits>
#include <cmath>
#include <deque>
#include <sstream>
#include <thread>

#include "pimsim/runtime.hpp"

namespace pimsim::sched {

using isa::OpKind;

const char* event_kind_name(EventKind k) {
  switch (k) {
    case EventKind::StageExec: return "STAGE_EXEC";
    case EventKind::Sync: return "SYNC";
    case EventKind::Comm: return "COMM";
    case EventKind::Admit: return "ADMIT";
    case EventKind::Grow: return "GROW";
    case EventKind::Release: return "RELEASE";
  }
  return "?";
}

std::string Timeline::csv() const {
  std::ostringstream os;
  os << "time,kind,duration,stage,micro_batch,request,iteration\n";
  for (const auto& e : events)
    os << e.time << ',' << event_kind_name(e.kind) << ',' << e.duration << ',' << e.stage << ','
       << e.micro_batch << ',' << e.request << ',' << e.iteration << '\n';
  return os.str();
}

std::string Timeline::gantt(std::int64_t cpc) const {
  if (cpc < 1) throw Error("gantt: cycles per char must be >= 1");
  int stages = 0;
  std::int64_t end = 0;
  for (const auto& e : events)
    if (e.kind == EventKind::StageExec || e.kind == EventKind::Sync) {
      stages = std::max(stages, e.stage + 1);
      end = std::max(end, e.time + e.duration);
    }
  const std::size_t width = std::size_t(ceil_div(end, cpc));
  std::vector<std::string> rows(stages, std::string(width, '.'));
  for (const auto& e : events) {
    if (e.kind != EventKind::StageExec && e.kind != EventKind::Sync) continue;
    char c = e.kind == EventKind::Sync ? 's' : char('0' + e.micro_batch % 10);
    for (std::int64_t t = e.time; t < e.time + e.duration; t += cpc)
      if (std::size_t(t / cpc) < width) rows[e.stage][t / cpc] = c;
  }
  std::ostringstream os;
  for (int s = 0; s < stages; ++s) os << "stage " << s << " |" << rows[s] << "|\n";
  return os.str();
}

PipelineSchedule schedule_pipeline(const std::vector<std::vector<std::int64_t>>& dur, std::int64_t handoff,
                                   std::int64_t wrap, std::int64_t t0) {
  PipelineSchedule ps;
  ps.dur = dur;
  const std::size_t n = dur.size();
  if (!n) {
    ps.end = t0;
    return ps;
  }
  const std::size_t pp = dur[0].size();
  ps.start.assign(n, std::vector<std::int64_t>(pp, 0));
  std::int64_t last = t0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < pp; ++s) {
      std::int64_t ready = s ? ps.start[i][s - 1] + dur[i][s - 1] + handoff : t0;
      std::int64_t free = i ? ps.start[i - 1][s] + dur[i - 1][s] : t0;
      ps.start[i][s] = std::max(ready, free);
      last = std::max(last, ps.start[i][s] + dur[i][s]);
      if (s) ++ps.syncs;
    }
  ps.end = last;
  if (pp > 1) {
    ps.end += wrap;
    ++ps.syncs;
  }
  return ps;
}

namespace {

struct Live {
  memmgr::TraceEntry req;
  std::int64_t t = 0;
  std::int64_t generated = 0;
  std::int64_t admitted_at = 0;
};

std::int64_t to_cycles(double bytes, double bytes_per_sec, double hz) {
  return std::int64_t(std::ceil(bytes / bytes_per_sec * hz));
}

}  // namespace

SimResult simulate(const std::vector<memmgr::TraceEntry>& trace, const compiler::ParallelismPlan& plan_in,
                   const ModelConfig& m, const device::PimTopology& topo, const device::TimingParams& tm,
                   const Features& f, const SimOptions& opt) {
  if (trace.empty()) throw Error("simulate: empty trace");
  topo.validate();
  tm.validate();
  compiler::ParallelismPlan plan = plan_in;
  plan.attention = f.itpp ? partition::Strategy::Itpp : partition::Strategy::Hfa;
  auto table = compiler::build_execution_table(compiler::match_patterns(compiler::build_decoder_graph(m)), plan, m, topo);
  auto cm = compiler::codegen(table, m, topo, opt.tokens_per_row);
  runtime::CostModel cost(cm, topo, tm, f.pingpong);

  SimResult res;
  MetricsReport& rep = res.report;
  rep.tp = plan.tp;
  rep.pp = plan.pp;
  rep.features = f;
  auto ev = [&](Event e) {
    if (opt.record_timeline) res.timeline.events.push_back(e);
  };

  std::int64_t slots = INT64_MAX;
  for (const auto& prog : cm.modules) slots = std::min<std::int64_t>(slots, prog.manifest.kv_slots);
  memmgr::PoolConfig pc;
  pc.policy = f.lazy_alloc ? memmgr::Policy::Lazy : memmgr::Policy::StaticMax;
  pc.total_rows = slots;
  pc.tokens_per_row = opt.tokens_per_row;
  pc.max_ctl = m.max_ctl;
  pc.channels = topo.channels;
  pc.banks = topo.banks;
  memmgr::AllocatorState alloc(pc);

  // per-token costs that do not depend on context
  const OpKind fc_ops[] = {OpKind::QkvGen, OpKind::Proj, OpKind::Ffn1, OpKind::Ffn2};
  runtime::OpCost fc_tok;
  for (auto op : fc_ops) fc_tok += cost.fc(op);
  const std::int64_t epu_tok = cost.epu_misc();
  const double hz = tm.pim_clock_hz;
  const std::int64_t eb = topo.element_bytes, d = m.d_model();
  std::int64_t allreduce_tok = 0;
  if (plan.tp > 1) {
    // hierarchical ring: inside a node over the hub links, then across nodes
    const int k = std::min(plan.tp, topo.modules_per_node);
    const int nn = int(ceil_div(plan.tp, topo.modules_per_node));
    const double bytes = double(d * eb);
    std::int64_t one = 0;
    if (k > 1) one += to_cycles(2.0 * (k - 1) / k * bytes, tm.intranode_bytes_per_sec, hz);
    if (nn > 1) one += to_cycles(2.0 * (nn - 1) / nn * bytes, tm.internode_bytes_per_sec, hz);
    allreduce_tok = 2 * one;  // after PROJ and after FFN2
  }
  const auto& geo = cm.modules[0].manifest.geo;
  const int qheads_local = geo.kv_heads_local * m.gqa_rep();
  auto stage_layers = [&](int s) {
    const int lps = plan.layers_per_stage(m.n_layers);
    return std::min(m.n_layers, (s + 1) * lps) - s * lps;
  };
  auto crosses_node = [&](int s) {  // boundary between stage s-1 and s
    return plan.module_of(s - 1, plan.tp - 1) / topo.modules_per_node != plan.module_of(s, 0) / topo.modules_per_node;
  };

  std::deque<memmgr::TraceEntry> queue(trace.begin(), trace.end());
  std::vector<Live> live;
  std::int64_t now = 0, iter = 0;
  double batch_sum = 0, mb_sum = 0;
  std::int64_t mb_count = 0;
  bool hold = false;  // no admission right after a preemption, or the victim walks straight back in

  while (!queue.empty() || !live.empty()) {
    if (iter >= opt.max_iterations) throw Error("simulate: iteration limit reached");
    alloc.set_clock(now);
    // admit FIFO until the head does not fit
    while (!queue.empty() && !(hold && !live.empty())) {
      const auto& r = queue.front();
      std::int64_t t0 = r.input_len;
      auto g = alloc.admit(r.id, t0);
      if (!g) break;
      live.push_back({r, t0, 0, iter});
      ev({now, EventKind::Admit, 0, -1, -1, r.id, iter});
      queue.pop_front();
    }
    if (live.empty())
      throw Error("simulate: request " + std::to_string(queue.front().id) + " never fits the KV-cache");

    // every running request appends one token this iteration
    std::vector<Live*> run;
    for (auto& l : live) {
      auto g = alloc.grow(l.req.id, l.t + 1);
      if (!g) {
        ++rep.stalls;
        continue;
      }
      if (!g->chunks.empty()) ev({now, EventKind::Grow, 0, -1, -1, l.req.id, iter});
      run.push_back(&l);
    }
    if (run.empty()) {
      // everyone stalled: push the youngest back to the queue to free rows
      auto it = std::max_element(live.begin(), live.end(),
                                 [](const Live& a, const Live& b) { return a.admitted_at < b.admitted_at; });
      alloc.release(it->req.id);
      ev({now, EventKind::Release, 0, -1, -1, it->req.id, iter});
      memmgr::TraceEntry back = it->req;
      back.input_len = it->t;
      back.out_len = it->req.out_len - it->generated;
      queue.push_front(back);
      live.erase(it);
      ++rep.preemptions;
      hold = true;
      continue;
    }
    hold = false;

    // per-request per-layer attention work
    const std::size_t B = run.size();
    std::vector<runtime::OpCost> att_q(B), att_s(B);
    std::vector<std::int64_t> smx(B);
    for (std::size_t i = 0; i < B; ++i) {
      const std::int64_t t = run[i]->t + 1;
      if (f.itpp) {
        auto c = cost.itpp_attention(t);
        att_q[i] = c.first;
        att_s[i] = c.second;
        // hub softmax overlaps the next head's QKT; one head stays exposed
        smx[i] = cost.softmax(t, 1);
      } else {
        smx[i] = cost.softmax(t, qheads_local);
      }
    }
    struct MbCost {
      runtime::OpCost q, s;
      std::int64_t smx = 0, n = 0;
    };
    auto mb_cost = [&](std::size_t lo, std::size_t hi) {
      MbCost c;
      c.n = std::int64_t(hi - lo);
      if (f.itpp) {
        for (std::size_t i = lo; i < hi; ++i) c.q += att_q[i], c.s += att_s[i];
      } else {
        std::vector<std::int64_t> ts;
        for (std::size_t i = lo; i < hi; ++i) ts.push_back(run[i]->t + 1);
        auto h = cost.hfa_attention(ts);
        c.q = h.first;
        c.s = h.second;
      }
      for (std::size_t i = lo; i < hi; ++i) c.smx += smx[i];
      return c;
    };
    auto layer_cycles = [&](const MbCost& c) {
      return c.n * (fc_tok.cycles + epu_tok + allreduce_tok) + c.q.cycles + c.s.cycles + c.smx;
    };
    auto handoff = [&](std::int64_t n, int s) {
      const double bytes = double(n * d * eb);
      return tm.host_sync_cycles +
             to_cycles(bytes, crosses_node(s) ? tm.internode_bytes_per_sec : tm.intranode_bytes_per_sec, hz);
    };
    auto build = [&](std::size_t bmu, std::vector<MbCost>& mbs) {
      mbs.clear();
      for (std::size_t lo = 0; lo < B; lo += bmu) mbs.push_back(mb_cost(lo, std::min(B, lo + bmu)));
      std::vector<std::vector<std::int64_t>> dur(mbs.size(), std::vector<std::int64_t>(plan.pp));
      for (std::size_t i = 0; i < mbs.size(); ++i)
        for (int s = 0; s < plan.pp; ++s) dur[i][s] = stage_layers(s) * layer_cycles(mbs[i]);
      // handoff time uses the largest micro-batch and the slowest boundary
      std::int64_t ho = 0;
      for (int s = 1; s < plan.pp; ++s) ho = std::max(ho, handoff(std::int64_t(bmu), s));
      const std::int64_t wrap = plan.pp > 1 ? tm.host_sync_cycles : 0;
      return std::make_pair(schedule_pipeline(dur, ho, wrap, now), ho);
    };

    std::size_t best_bmu = B;
    if (plan.micro_batch > 0) {
      best_bmu = std::min<std::size_t>(B, plan.micro_batch);
    } else if (plan.pp > 1) {
      std::int64_t best_end = INT64_MAX;
      std::vector<MbCost> tmp;
      std::size_t prev = 0;
      for (std::size_t nmb = 1; nmb <= B; ++nmb) {
        std::size_t bmu = std::size_t(ceil_div(std::int64_t(B), std::int64_t(nmb)));
        if (bmu == prev) continue;
        prev = bmu;
        auto e = build(bmu, tmp).first.end;
        if (e < best_end) best_end = e, best_bmu = bmu;
      }
    }
    std::vector<MbCost> mbs;
    auto [ps, ho] = build(best_bmu, mbs);
    for (std::size_t i = 0; i < mbs.size(); ++i)
      for (int s = 0; s < plan.pp; ++s) {
        const std::int64_t L = stage_layers(s);
        ev({ps.start[i][s], EventKind::StageExec, ps.dur[i][s], s, int(i), -1, iter});
        if (s > 0) {
          const std::int64_t xfer = ho - tm.host_sync_cycles;
          const std::int64_t t_ready = ps.start[i][s - 1] + ps.dur[i][s - 1];
          ev({t_ready, EventKind::Sync, tm.host_sync_cycles, s, int(i), -1, iter});
          ev({t_ready + tm.host_sync_cycles, EventKind::Comm, xfer, s, int(i), -1, iter});
          rep.comm_cycles += xfer;
        }
        const auto& c = mbs[i];
        for (auto op : fc_ops) rep.breakdown[op] += cost.fc(op).breakdown.scaled(L * c.n);
        rep.breakdown[OpKind::Qkt] += c.q.breakdown.scaled(L);
        rep.breakdown[OpKind::Sv] += c.s.breakdown.scaled(L);
        rep.breakdown[OpKind::Softmax].epu += L * c.smx;
        rep.breakdown[OpKind::Other].epu += L * c.n * epu_tok;
        rep.comm_cycles += L * c.n * allreduce_tok;
        rep.mac_lane_cycles += plan.tp * L * (c.n * fc_tok.mac_lane_cycles + c.q.mac_lane_cycles + c.s.mac_lane_cycles);
      }
    if (plan.pp > 1) ev({ps.end - tm.host_sync_cycles, EventKind::Sync, tm.host_sync_cycles, 0, -1, -1, iter});
    rep.sync_events += ps.syncs;
    mb_sum += double(best_bmu);
    ++mb_count;
    now = ps.end;

    batch_sum += double(B);
    rep.tokens += std::int64_t(B);
    for (auto* l : run) ++l->t, ++l->generated;
    for (auto it = live.begin(); it != live.end();) {
      if (it->generated >= it->req.out_len) {
        alloc.set_clock(now);
        alloc.release(it->req.id);
        ev({now, EventKind::Release, 0, -1, -1, it->req.id, iter});
        ++rep.requests_done;
        it = live.erase(it);
      } else {
        ++it;
      }
    }
    ++iter;
  }
  rep.iterations = iter;
  rep.wall_cycles = now;
  rep.avg_batch = iter ? batch_sum / double(iter) : 0;
  rep.avg_micro_batch = mb_count ? mb_sum / double(mb_count) : 0;
  rep.tokens_per_sec = now ? double(rep.tokens) / (double(now) / hz) : 0;
  rep.utilization_pct = 100.0 * double(rep.mac_lane_cycles) /
                        (double(topo.pus()) * topo.mac_width * topo.modules() * double(std::max<std::int64_t>(now, 1)));
  if (!now) rep.utilization_pct = 0;
  std::stable_sort(res.timeline.events.begin(), res.timeline.events.end(),
                   [](const Event& a, const Event& b) { return a.time < b.time; });
  return res;
}

double utilization(const MetricsReport& r) { return r.utilization_pct; }

std::vector<SweepPoint> sweep(const std::vector<memmgr::TraceEntry>& trace, const ModelConfig& m,
                              const device::PimTopology& topo, const device::TimingParams& tm,
                              const std::vector<std::pair<int, int>>& grid, const Features& f, int workers,
                              const SimOptions& opt_in) {
  SimOptions opt = opt_in;
  opt.record_timeline = false;
  std::vector<SweepPoint> pts(grid.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < grid.size();) {
      auto& p = pts[i];
      p.plan.tp = grid[i].first;
      p.plan.pp = grid[i].second;
      try {
        p.report = simulate(trace, p.plan, m, topo, tm, f, opt).report;
      } catch (const Error& e) {
        p.report = {};
        p.report.tp = p.plan.tp;
        p.report.pp = p.plan.pp;
        p.report.features = f;
        p.report.feasible = false;
        p.report.error = e.what();
      }
    }
  };
  workers = std::max(1, std::min<int>(workers, int(grid.size())));
  std::vector<std::thread> th;
  for (int w = 1; w < workers; ++w) th.emplace_back(work);
  work();
  for (auto& t : th) t.join();
  int best = -1;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (pts[i].report.feasible && (best < 0 || pts[i].report.tokens_per_sec > pts[best].report.tokens_per_sec))
      best = int(i);
  if (best >= 0) pts[best].best = true;
  return pts;
}

}  // namespace pimsim::sched
