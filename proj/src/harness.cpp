#include "pimsim/harness.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "pimsim/runtime.hpp"

namespace pimsim::harness {

using json = nlohmann::ordered_json;
using memmgr::TraceEntry;

// ---- traces ----

TraceSpec TraceSpec::preset(const std::string& name, int n, std::uint64_t seed) {
  TraceSpec s;
  if (name == "QMSUM") {
    s.mean = 13966, s.std = 6182, s.min = 2651, s.max = 30456;
  } else if (name == "HOTPOTQA") {
    s.mean = 13465, s.std = 3921, s.min = 1917, s.max = 17674;
  } else if (name == "MUSIQUE") {
    s.mean = 16362, s.std = 1651, s.min = 6820, s.max = 17917;
  } else {
    throw Error("unknown trace preset '" + name + "'");
  }
  s.n_requests = n;
  s.seed = seed;
  return s;
}

void TraceSpec::validate() const {
  if (source == Source::Csv) {
    if (path.empty()) throw Error("trace: CSV source needs a path");
    return;
  }
  if (!(min <= mean && mean <= max)) throw Error("trace: infeasible bounds, need min <= mean <= max");
  if (!(std >= 0)) throw Error("trace: std must be >= 0");
  if (min < 1) throw Error("trace: min must be >= 1 token");
  if (std > 0 && std >= (max - min) / 2) throw Error("trace: infeasible bounds, std too large for [min, max]");
  if (n_requests <= 0) throw Error("trace: n_requests must be positive");
  if (out_len.fixed ? out_len.k <= 0 : (out_len.lo <= 0 || out_len.hi < out_len.lo))
    throw Error("trace: bad out_len model");
}

namespace {

double phi(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2 * M_PI); }
double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

std::pair<double, double> trunc_moments(double mu, double sig, double a, double b) {
  const double al = (a - mu) / sig, be = (b - mu) / sig;
  const double z = std::max(Phi(be) - Phi(al), 1e-300);
  const double r = (phi(al) - phi(be)) / z;
  const double var = 1 + (al * phi(al) - be * phi(be)) / z - r * r;
  return {mu + sig * r, sig * std::sqrt(std::max(var, 0.0))};
}

}  // namespace

std::pair<double, double> fit_truncated_normal(double mean, double std, double lo, double hi) {
  if (std == 0) return {mean, 0};
  // damped Newton on (mu, log sigma), residuals scaled by std
  double mu = mean, ls = std::log(std);
  auto resid = [&](double m_, double l_) {
    auto [m, s] = trunc_moments(m_, std::exp(l_), lo, hi);
    return std::array<double, 2>{(m - mean) / std, (s - std) / std};
  };
  for (int it = 0; it < 200; ++it) {
    auto r = resid(mu, ls);
    const double err = std::hypot(r[0], r[1]);
    if (err < 1e-9) return {mu, std::exp(ls)};
    const double h1 = 1e-4 * std, h2 = 1e-5;
    auto a = resid(mu + h1, ls), b = resid(mu, ls + h2);
    const double j00 = (a[0] - r[0]) / h1, j10 = (a[1] - r[1]) / h1;
    const double j01 = (b[0] - r[0]) / h2, j11 = (b[1] - r[1]) / h2;
    const double det = j00 * j11 - j01 * j10;
    if (std::abs(det) < 1e-300) break;
    const double dm = -(j11 * r[0] - j01 * r[1]) / det, dl = -(-j10 * r[0] + j00 * r[1]) / det;
    double step = 1;
    for (; step > 1e-4; step /= 2) {
      auto n = resid(mu + step * dm, ls + step * dl);
      if (std::isfinite(n[0]) && std::hypot(n[0], n[1]) < err) break;
    }
    mu += step * dm;
    ls += step * dl;
  }
  // Unreachable pair (the family's std is capped once the mean sits near a
  // bound). Keep the mean exact and get the std as close as the family allows.
  // HOTPOTQA and MUSIQUE land here.
  auto mu_for = [&](double sig) {
    double a = lo - 40 * sig, b = hi + 40 * sig;
    for (int i = 0; i < 200; ++i) {
      const double c = 0.5 * (a + b);
      (trunc_moments(c, sig, lo, hi).first < mean ? a : b) = c;
    }
    return 0.5 * (a + b);
  };
  double best_mu = mean, best_sig = std, best_err = INFINITY;
  for (int i = 0; i <= 400; ++i) {
    const double sig = std * std::pow(10.0, -0.7 + 2.0 * i / 400);
    const double m = mu_for(sig);
    auto [tm, ts] = trunc_moments(m, sig, lo, hi);
    if (std::abs(tm - mean) > 1e-6 * std) continue;
    // keep rejection sampling cheap: at least 2% acceptance
    if (Phi((hi - m) / sig) - Phi((lo - m) / sig) < 0.02) continue;
    if (std::abs(ts - std) < best_err) best_err = std::abs(ts - std), best_mu = m, best_sig = sig;
  }
  return {best_mu, best_sig};
}

std::vector<TraceEntry> gen_trace(const TraceSpec& s) {
  if (s.source != TraceSpec::Source::Synth) throw Error("gen_trace: spec is not SYNTH");
  s.validate();
  auto [mu, sig] = fit_truncated_normal(s.mean, s.std, s.min, s.max);
  if (sig > 0 && Phi((s.max - mu) / sig) - Phi((s.min - mu) / sig) < 1e-6)
    throw Error("trace: infeasible bounds, acceptance region has no mass");
  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> nd(mu, sig > 0 ? sig : 1.0);
  const auto lo = std::int64_t(std::ceil(s.min)), hi = std::int64_t(std::floor(s.max));
  std::vector<TraceEntry> out;
  out.reserve(s.n_requests);
  for (int i = 0; i < s.n_requests; ++i) {
    double x = s.mean;
    if (sig > 0) {
      do x = nd(rng);
      while (x < s.min || x > s.max);
    }
    TraceEntry e;
    e.id = i;
    e.input_len = std::clamp<std::int64_t>(std::llround(x), lo, hi);
    if (s.out_len.fixed) {
      e.out_len = s.out_len.k;
    } else {
      std::uniform_int_distribution<std::int64_t> ud(s.out_len.lo, s.out_len.hi);
      e.out_len = ud(rng);
    }
    out.push_back(e);
  }
  return out;
}

namespace {

std::string trim(std::string s) {
  auto sp = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && sp(s.back())) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && sp(s[i])) ++i;
  return s.substr(i);
}

std::int64_t parse_int(const std::string& f, int line, const char* what) {
  std::string t = trim(f);
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || p != t.data() + t.size())
    throw Error("trace line " + std::to_string(line) + ": bad " + what + " '" + t + "'");
  return v;
}

}  // namespace

std::vector<TraceEntry> load_trace(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::string line;
  int ln = 0;
  bool header = false;
  std::vector<TraceEntry> out;
  std::set<int> ids;
  while (std::getline(in, line)) {
    ++ln;
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(trim(x));
    if (!header) {
      if (f != std::vector<std::string>{"id", "input_len", "out_len"})
        throw Error("trace line " + std::to_string(ln) + ": expected header id,input_len,out_len");
      header = true;
      continue;
    }
    if (f.size() != 3)
      throw Error("trace line " + std::to_string(ln) + ": expected 3 fields, got " + std::to_string(f.size()));
    TraceEntry e;
    const auto id = parse_int(f[0], ln, "id");
    if (id < 0 || id > INT32_MAX) throw Error("trace line " + std::to_string(ln) + ": id out of range");
    e.id = int(id);
    e.input_len = parse_int(f[1], ln, "input_len");
    e.out_len = parse_int(f[2], ln, "out_len");
    if (e.input_len <= 0) throw Error("trace line " + std::to_string(ln) + ": input_len must be positive");
    if (e.out_len <= 0) throw Error("trace line " + std::to_string(ln) + ": out_len must be positive");
    if (!ids.insert(e.id).second)
      throw Error("trace line " + std::to_string(ln) + ": duplicate id " + std::to_string(e.id));
    out.push_back(e);
  }
  if (!header) throw Error("trace: empty file");
  return out;
}

std::vector<TraceEntry> load_trace_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("trace: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return load_trace(ss.str());
}

std::string save_trace(const std::vector<TraceEntry>& t) {
  std::string s = "id,input_len,out_len\n";
  for (const auto& e : t)
    s += std::to_string(e.id) + "," + std::to_string(e.input_len) + "," + std::to_string(e.out_len) + "\n";
  return s;
}

std::vector<TraceEntry> make_trace(const TraceSpec& s) {
  s.validate();
  return s.source == TraceSpec::Source::Csv ? load_trace_file(s.path) : gen_trace(s);
}

// ---- config ----

namespace {

void known_keys(const json& j, const char* section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw Error(std::string("config: section '") + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : keys) ok = ok || it.key() == k;
    if (!ok) throw Error(std::string("config: unknown key '") + it.key() + "' in " + section);
  }
}

template <class T>
void get(const json& j, const char* k, T& v) {
  if (j.contains(k)) v = j.at(k).get<T>();
}

json model_json(const ModelConfig& m) {
  return {{"name", m.name},       {"n_layers", m.n_layers},          {"n_heads", m.n_heads},
          {"n_kv_heads", m.n_kv_heads}, {"head_dim", m.head_dim},    {"ffn", ffn_variant_name(m.ffn)},
          {"ffn_dim", m.ffn_dim}, {"max_ctl", m.max_ctl}};
}

json topo_json(const device::PimTopology& t) {
  return {{"nodes", t.nodes},           {"modules_per_node", t.modules_per_node},
          {"channels", t.channels},     {"banks", t.banks},
          {"row_bytes", t.row_bytes},   {"rows_per_bank", t.rows_per_bank},
          {"mac_width", t.mac_width},   {"gb_bytes", t.gb_bytes},
          {"outreg_bytes_per_pu", t.outreg_bytes_per_pu}, {"gpr_bytes", t.gpr_bytes},
          {"element_bytes", t.element_bytes}};
}

json timing_json(const device::TimingParams& t) {
  return {{"pim_clock_hz", t.pim_clock_hz},
          {"interface_bytes_per_cycle", t.interface_bytes_per_cycle},
          {"row_activate_cycles", t.row_activate_cycles},
          {"gb_write_overhead_cycles", t.gb_write_overhead_cycles},
          {"outreg_read_latency_cycles", t.outreg_read_latency_cycles},
          {"epu_cycles_per_element", t.epu_cycles_per_element},
          {"epu_lanes", t.epu_lanes},
          {"dispatch_cycles_per_cmd", t.dispatch_cycles_per_cmd},
          {"host_sync_cycles", t.host_sync_cycles},
          {"internode_bytes_per_sec", t.internode_bytes_per_sec},
          {"intranode_bytes_per_sec", t.intranode_bytes_per_sec},
          {"charge_broadcast_per_channel", t.charge_broadcast_per_channel}};
}

json features_json(const sched::Features& f) {
  return {{"itpp", f.itpp}, {"lazy_alloc", f.lazy_alloc}, {"pingpong", f.pingpong}};
}

json trace_json(const TraceSpec& s) {
  json j;
  if (s.source == TraceSpec::Source::Csv) {
    j["source"] = "CSV";
    j["path"] = s.path;
    return j;
  }
  j["source"] = "SYNTH";
  j["mean"] = s.mean;
  j["std"] = s.std;
  j["min"] = s.min;
  j["max"] = s.max;
  j["n_requests"] = s.n_requests;
  j["seed"] = s.seed;
  if (s.out_len.fixed)
    j["out_len"] = {{"fixed", s.out_len.k}};
  else
    j["out_len"] = {{"uniform", {s.out_len.lo, s.out_len.hi}}};
  return j;
}

Config parse(const json& j) {
  Config c;
  known_keys(j, "config", {"model", "topology", "timing", "plan", "features", "trace", "tokens_per_row"});
  if (j.contains("model")) {
    const auto& mj = j["model"];
    known_keys(mj, "model",
               {"preset", "name", "n_layers", "n_heads", "n_kv_heads", "head_dim", "ffn", "ffn_dim", "max_ctl"});
    if (mj.contains("preset")) c.model = model_preset(mj["preset"].get<std::string>());
    get(mj, "name", c.model.name);
    get(mj, "n_layers", c.model.n_layers);
    get(mj, "n_heads", c.model.n_heads);
    get(mj, "n_kv_heads", c.model.n_kv_heads);
    get(mj, "head_dim", c.model.head_dim);
    get(mj, "ffn_dim", c.model.ffn_dim);
    get(mj, "max_ctl", c.model.max_ctl);
    if (mj.contains("ffn")) {
      auto v = mj["ffn"].get<std::string>();
      if (v == "SWIGLU")
        c.model.ffn = FfnVariant::Swiglu;
      else if (v == "RELU_MLP")
        c.model.ffn = FfnVariant::ReluMlp;
      else
        throw Error("config: model.ffn must be SWIGLU or RELU_MLP");
    }
  }
  if (j.contains("topology")) {
    const auto& t = j["topology"];
    known_keys(t, "topology", {"nodes", "modules_per_node", "channels", "banks", "row_bytes", "rows_per_bank",
                               "mac_width", "gb_bytes", "outreg_bytes_per_pu", "gpr_bytes", "element_bytes"});
    auto& o = c.topology;
    get(t, "nodes", o.nodes);
    get(t, "modules_per_node", o.modules_per_node);
    get(t, "channels", o.channels);
    get(t, "banks", o.banks);
    get(t, "row_bytes", o.row_bytes);
    get(t, "rows_per_bank", o.rows_per_bank);
    get(t, "mac_width", o.mac_width);
    get(t, "gb_bytes", o.gb_bytes);
    get(t, "outreg_bytes_per_pu", o.outreg_bytes_per_pu);
    get(t, "gpr_bytes", o.gpr_bytes);
    get(t, "element_bytes", o.element_bytes);
  }
  if (j.contains("timing")) {
    const auto& t = j["timing"];
    known_keys(t, "timing",
               {"pim_clock_hz", "interface_bytes_per_cycle", "row_activate_cycles", "gb_write_overhead_cycles",
                "outreg_read_latency_cycles", "epu_cycles_per_element", "epu_lanes", "dispatch_cycles_per_cmd",
                "host_sync_cycles", "internode_bytes_per_sec", "intranode_bytes_per_sec",
                "charge_broadcast_per_channel"});
    auto& o = c.timing;
    get(t, "pim_clock_hz", o.pim_clock_hz);
    get(t, "interface_bytes_per_cycle", o.interface_bytes_per_cycle);
    get(t, "row_activate_cycles", o.row_activate_cycles);
    get(t, "gb_write_overhead_cycles", o.gb_write_overhead_cycles);
    get(t, "outreg_read_latency_cycles", o.outreg_read_latency_cycles);
    get(t, "epu_cycles_per_element", o.epu_cycles_per_element);
    get(t, "epu_lanes", o.epu_lanes);
    get(t, "dispatch_cycles_per_cmd", o.dispatch_cycles_per_cmd);
    get(t, "host_sync_cycles", o.host_sync_cycles);
    get(t, "internode_bytes_per_sec", o.internode_bytes_per_sec);
    get(t, "intranode_bytes_per_sec", o.intranode_bytes_per_sec);
    get(t, "charge_broadcast_per_channel", o.charge_broadcast_per_channel);
  }
  if (j.contains("plan")) {
    const auto& p = j["plan"];
    known_keys(p, "plan", {"tp", "pp", "micro_batch"});
    get(p, "tp", c.plan.tp);
    get(p, "pp", c.plan.pp);
    get(p, "micro_batch", c.plan.micro_batch);
  }
  if (j.contains("features")) {
    const auto& f = j["features"];
    known_keys(f, "features", {"itpp", "lazy_alloc", "pingpong"});
    get(f, "itpp", c.features.itpp);
    get(f, "lazy_alloc", c.features.lazy_alloc);
    get(f, "pingpong", c.features.pingpong);
  }
  if (j.contains("trace")) {
    const auto& t = j["trace"];
    known_keys(t, "trace", {"source", "preset", "mean", "std", "min", "max", "n_requests", "seed", "out_len", "path"});
    auto& s = c.trace;
    std::string src = t.value("source", std::string("SYNTH"));
    if (src == "CSV") {
      s.source = TraceSpec::Source::Csv;
    } else if (src != "SYNTH") {
      throw Error("config: trace.source must be SYNTH or CSV");
    }
    if (t.contains("preset")) {
      auto p = TraceSpec::preset(t["preset"].get<std::string>(), s.n_requests, s.seed);
      s.mean = p.mean, s.std = p.std, s.min = p.min, s.max = p.max;
    }
    get(t, "mean", s.mean);
    get(t, "std", s.std);
    get(t, "min", s.min);
    get(t, "max", s.max);
    get(t, "n_requests", s.n_requests);
    get(t, "seed", s.seed);
    get(t, "path", s.path);
    if (t.contains("out_len")) {
      const auto& o = t["out_len"];
      known_keys(o, "trace.out_len", {"fixed", "uniform"});
      if (o.contains("fixed") == o.contains("uniform"))
        throw Error("config: trace.out_len needs exactly one of fixed, uniform");
      if (o.contains("fixed")) {
        s.out_len.fixed = true;
        s.out_len.k = o["fixed"].get<std::int64_t>();
      } else {
        auto r = o["uniform"].get<std::vector<std::int64_t>>();
        if (r.size() != 2) throw Error("config: trace.out_len.uniform needs [lo, hi]");
        s.out_len.fixed = false;
        s.out_len.lo = r[0], s.out_len.hi = r[1];
      }
    }
  }
  get(j, "tokens_per_row", c.tokens_per_row);
  c.model.validate();
  c.topology.validate();
  c.timing.validate();
  c.trace.validate();
  if (c.tokens_per_row <= 0) throw Error("config: tokens_per_row must be positive");
  if (c.plan.tp <= 0 || c.plan.pp <= 0 || c.plan.micro_batch < 0) throw Error("config: bad plan");
  return c;
}

json config_obj(const Config& c) {
  return {{"model", model_json(c.model)},
          {"topology", topo_json(c.topology)},
          {"timing", timing_json(c.timing)},
          {"plan", {{"tp", c.plan.tp}, {"pp", c.plan.pp}, {"micro_batch", c.plan.micro_batch}}},
          {"features", features_json(c.features)},
          {"trace", trace_json(c.trace)},
          {"tokens_per_row", c.tokens_per_row}};
}

}  // namespace

Config parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  try {
    return parse(j);
  } catch (const json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
}

Config load_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string config_json(const Config& c) { return config_obj(c).dump(2) + "\n"; }

// ---- reports ----

Format parse_format(const std::string& s) {
  if (s == "json") return Format::Json;
  if (s == "csv") return Format::Csv;
  if (s == "text") return Format::Text;
  throw Error("unknown format '" + s + "' (json|csv|text)");
}

namespace {

const char* kPhases[4] = {"DT-GB", "DT-Out", "MAC", "EPU"};

std::array<std::int64_t, 4> phases(const device::Breakdown& b) { return {b.dt_gb, b.dt_out, b.mac, b.epu}; }

// Largest-remainder split of `units` across the phases.
std::array<int, 4> apportion(const device::Breakdown& b, int units) {
  auto p = phases(b);
  const double tot = double(b.total());
  std::array<int, 4> out{};
  if (tot <= 0) return out;
  std::array<double, 4> rem{};
  int used = 0;
  for (int i = 0; i < 4; ++i) {
    double x = units * double(p[i]) / tot;
    out[i] = int(std::floor(x));
    rem[i] = x - out[i];
    used += out[i];
  }
  while (used < units) {
    int k = int(std::max_element(rem.begin(), rem.end()) - rem.begin());
    ++out[k];
    rem[k] = -1;
    ++used;
  }
  return out;
}

std::string fmt(double v, int prec) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(prec) << v;
  return o.str();
}

json metrics_json(const sched::MetricsReport& r) {
  return {{"feasible", r.feasible},
          {"error", r.error},
          {"tp", r.tp},
          {"pp", r.pp},
          {"tokens_per_sec", r.tokens_per_sec},
          {"utilization_pct", r.utilization_pct},
          {"avg_batch", r.avg_batch},
          {"avg_micro_batch", r.avg_micro_batch},
          {"wall_cycles", r.wall_cycles},
          {"tokens", r.tokens},
          {"requests_done", r.requests_done},
          {"iterations", r.iterations},
          {"stalls", r.stalls},
          {"preemptions", r.preemptions},
          {"sync_events", r.sync_events},
          {"mac_lane_cycles", r.mac_lane_cycles},
          {"comm_cycles", r.comm_cycles}};
}

json breakdown_json(const sched::MetricsReport& r) {
  json out = json::object();
  for (const auto& [op, b] : r.breakdown) {
    json e;
    auto p = phases(b);
    for (int i = 0; i < 4; ++i) e[kPhases[i]] = p[i];
    e["total"] = b.total();
    json pct;
    for (int i = 0; i < 4; ++i) pct[kPhases[i]] = b.total() ? 100.0 * double(p[i]) / double(b.total()) : 0.0;
    e["pct"] = pct;
    out[isa::op_kind_name(op)] = e;
  }
  return out;
}

}  // namespace

std::string emit_report(const sched::MetricsReport& r, const Config& c, Format f) {
  if (f == Format::Json) {
    json j;
    j["schema"] = "pimsim.report.v1";
    j["metrics"] = metrics_json(r);
    j["latency_breakdown"] = breakdown_json(r);
    j["config"] = config_obj(c);
    return j.dump(2) + "\n";
  }
  if (f == Format::Csv) {
    std::string s = "kind,name,field,value\n";
    auto row = [&](const std::string& k, const std::string& n, const std::string& fld, const std::string& v) {
      s += k + "," + n + "," + fld + "," + v + "\n";
    };
    auto scalar = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    const json mj = metrics_json(r), cj = config_obj(c);
    for (auto& [k, v] : mj.items()) row("metric", k, "", scalar(v));
    for (const auto& [op, b] : r.breakdown) {
      auto p = phases(b);
      for (int i = 0; i < 4; ++i) row("breakdown", isa::op_kind_name(op), kPhases[i], std::to_string(p[i]));
      row("breakdown", isa::op_kind_name(op), "total", std::to_string(b.total()));
    }
    for (auto& [sec, body] : cj.items()) {
      if (!body.is_object()) {
        row("config", sec, "", scalar(body));
        continue;
      }
      for (auto& [k, v] : body.items()) row("config", sec, k, v.is_object() ? v.dump() : scalar(v));
    }
    return s;
  }
  // TEXT
  std::ostringstream o;
  o << "model " << c.model.name << "  tp=" << r.tp << " pp=" << r.pp << "  itpp=" << r.features.itpp
    << " lazy_alloc=" << r.features.lazy_alloc << " pingpong=" << r.features.pingpong << "\n";
  if (!r.feasible) {
    o << "INFEASIBLE: " << r.error << "\n";
    return o.str();
  }
  o << "tokens/s " << fmt(r.tokens_per_sec, 1) << "  utilization " << fmt(r.utilization_pct, 2)
    << "%  avg batch " << fmt(r.avg_batch, 2) << "  avg micro-batch " << fmt(r.avg_micro_batch, 2) << "\n";
  o << "iterations " << r.iterations << "  stalls " << r.stalls << "  preemptions " << r.preemptions
    << "  syncs " << r.sync_events << "\n\n";
  o << "latency breakdown (G=DT-GB O=DT-Out M=MAC E=EPU)\n";
  o << std::left << std::setw(8) << "op" << std::right << std::setw(16) << "cycles";
  for (const char* p : kPhases) o << std::setw(8) << p;
  o << "\n";
  const char glyph[4] = {'G', 'O', 'M', 'E'};
  for (const auto& [op, b] : r.breakdown) {
    o << std::left << std::setw(8) << isa::op_kind_name(op) << std::right << std::setw(16) << b.total();
    auto tenths = apportion(b, 1000);  // percentages at 0.1 resolution, summing to 100.0
    for (int i = 0; i < 4; ++i) o << std::setw(7) << fmt(tenths[i] / 10.0, 1) << "%";
    o << "  |";
    auto bar = apportion(b, 40);
    for (int i = 0; i < 4; ++i) o << std::string(bar[i], glyph[i]);
    o << "|\n";
  }
  return o.str();
}

// ---- reproduction ----

Figure parse_figure(const std::string& s) {
  for (auto f : {Figure::BatchGrowth, Figure::LatencyBd, Figure::TppSweep, Figure::UtilScaling, Figure::Pingpong})
    if (s == figure_name(f)) return f;
  throw Error("unknown figure '" + s + "'");
}

const char* figure_name(Figure f) {
  switch (f) {
    case Figure::BatchGrowth: return "BATCH_GROWTH";
    case Figure::LatencyBd: return "LATENCY_BD";
    case Figure::TppSweep: return "TPP_SWEEP";
    case Figure::UtilScaling: return "UTIL_SCALING";
    case Figure::Pingpong: return "PINGPONG";
  }
  return "?";
}

int worker_count() {
  const char* v = std::getenv("PIMSIM_WORKERS");
  if (!v) return 1;
  int n = std::atoi(v);
  return n > 0 ? n : 1;
}

namespace {

using isa::OpKind;

compiler::CompiledModel compile(const ModelConfig& m, const device::PimTopology& topo, int tp, int pp, int T) {
  compiler::ParallelismPlan plan{tp, pp};
  auto table = compiler::build_execution_table(compiler::match_patterns(compiler::build_decoder_graph(m)), plan, m, topo);
  return compiler::codegen(table, m, topo, T);
}

Check at_least(std::string name, double v, double lo) {
  return {std::move(name), v, ">= " + fmt(lo, 2), v >= lo};
}
Check within(std::string name, double v, double lo, double hi) {
  return {std::move(name), v, "[" + fmt(lo, 1) + ", " + fmt(hi, 1) + "]", v >= lo && v <= hi};
}

}  // namespace

std::vector<std::pair<int, int>> plan_grid(const ModelConfig& m, const device::PimTopology& topo) {
  std::vector<std::pair<int, int>> g;
  const int M = topo.modules();
  for (int tp = M; tp >= 1; --tp) {
    if (M % tp || m.n_kv_heads % tp) continue;
    const int pp = M / tp;
    if (pp > m.n_layers) continue;
    // no empty trailing stage
    if ((pp - 1) * int(ceil_div(m.n_layers, pp)) >= m.n_layers) continue;
    g.push_back({tp, pp});
  }
  return g;
}

namespace {

struct Phase {
  std::string op;
  runtime::OpCost serial, pingpong;
};

std::vector<Phase> decode_ops(std::int64_t l_in) {
  auto m = model_preset("7B");
  device::PimTopology topo;
  topo.nodes = 4;
  auto cm = compile(m, topo, 8, 4, 1024);
  runtime::CostModel s(cm, topo, {}, false), p(cm, topo, {}, true);
  auto as = s.itpp_attention(l_in), ap = p.itpp_attention(l_in);
  std::vector<Phase> out;
  out.push_back({"QKV_GEN", s.fc(OpKind::QkvGen), p.fc(OpKind::QkvGen)});
  out.push_back({"QKT", as.first, ap.first});
  out.push_back({"SV", as.second, ap.second});
  out.push_back({"PROJ", s.fc(OpKind::Proj), p.fc(OpKind::Proj)});
  out.push_back({"FFN1", s.fc(OpKind::Ffn1), p.fc(OpKind::Ffn1)});
  out.push_back({"FFN2", s.fc(OpKind::Ffn2), p.fc(OpKind::Ffn2)});
  return out;
}

double dt_share(const runtime::OpCost& c) {
  return 100.0 * double(c.breakdown.dt_gb + c.breakdown.dt_out) / double(c.cycles);
}

ReproResult batch_growth(const ReproOptions& opt) {
  ReproResult r;
  auto m = model_preset("7B");
  device::PimTopology topo;
  topo.nodes = 4;
  auto cm = compile(m, topo, 8, 4, 1024);
  std::int64_t cap = INT64_MAX;
  for (const auto& p : cm.modules) cap = std::min<std::int64_t>(cap, p.manifest.kv_slots);
  const std::int64_t T = 1024, ctl = m.max_ctl;

  json rows = json::array();
  std::ostringstream tab;
  tab << "capacity " << cap << " row slots, tokens_per_row " << T << ", max_ctl " << ctl << "\n";
  tab << std::left << std::setw(26) << "trace" << std::right << std::setw(10) << "STATIC" << std::setw(10) << "LAZY"
      << std::setw(10) << "oracle" << std::setw(9) << "ratio\n";
  auto run = [&](const std::string& label, const TraceSpec& s) {
    auto tr = gen_trace(s);
    const double st = memmgr::avg_batch_size(tr, cap, memmgr::Policy::StaticMax, T, ctl);
    const double lz = memmgr::avg_batch_size(tr, cap, memmgr::Policy::Lazy, T, ctl);
    const double orc = memmgr::oracle_batch_size(tr, cap, T);
    tab << std::left << std::setw(26) << label << std::right << std::setw(10) << fmt(st, 2) << std::setw(10)
        << fmt(lz, 2) << std::setw(10) << fmt(orc, 2) << std::setw(8) << fmt(lz / st, 2) << "\n";
    rows.push_back({{"trace", label}, {"static", st}, {"lazy", lz}, {"oracle", orc}, {"ratio", lz / st}});
    return lz / st;
  };
  const int n = 1000;
  double q = run("QMSUM", TraceSpec::preset("QMSUM", n, opt.seed));
  run("HOTPOTQA", TraceSpec::preset("HOTPOTQA", n, opt.seed));
  run("MUSIQUE", TraceSpec::preset("MUSIQUE", n, opt.seed));
  auto alt = TraceSpec::preset("QMSUM", n, opt.seed);
  alt.out_len.fixed = true;
  alt.out_len.k = 1024;
  run("QMSUM out_len=1024", alt);
  TraceSpec shorts;
  shorts.mean = 2048, shorts.std = 64, shorts.min = 1900, shorts.max = 2200;
  shorts.n_requests = n, shorts.seed = opt.seed;
  double sh = run("short low-variance", shorts);
  r.checks.push_back(at_least("QMSUM lazy/static", q, 1.8));
  r.checks.push_back(at_least("short-context lazy/static", sh, 3.0));
  r.table = tab.str();
  r.json = json{{"capacity_rows", cap}, {"rows", rows}}.dump(2);
  return r;
}

ReproResult latency(bool pingpong_fig, const ReproOptions&) {
  ReproResult r;
  const std::int64_t l_in = 16384;
  auto ops = decode_ops(l_in);
  std::ostringstream tab;
  json rows = json::array();
  tab << "7B, tp=8 module, L_in=" << l_in << "\n";
  if (pingpong_fig) {
    tab << std::left << std::setw(8) << "op" << std::right << std::setw(12) << "serial" << std::setw(12) << "pingpong"
        << std::setw(11) << "reduction\n";
  } else {
    tab << std::left << std::setw(8) << "op" << std::right << std::setw(12) << "cycles";
    for (const char* p : kPhases) tab << std::setw(8) << p;
    tab << "\n";
  }
  const std::map<std::string, std::pair<double, double>> bands = {
      {"QKT", {30, 50}}, {"SV", {34, 54}}, {"FFN1", {19, 39}}, {"FFN2", {18, 38}}};
  for (const auto& ph : ops) {
    const double red = 100.0 * (1.0 - double(ph.pingpong.cycles) / double(ph.serial.cycles));
    json row = {{"op", ph.op}, {"serial_cycles", ph.serial.cycles}, {"pingpong_cycles", ph.pingpong.cycles},
                {"reduction_pct", red}, {"serial_dt_share_pct", dt_share(ph.serial)}};
    rows.push_back(row);
    if (pingpong_fig) {
      tab << std::left << std::setw(8) << ph.op << std::right << std::setw(12) << ph.serial.cycles << std::setw(12)
          << ph.pingpong.cycles << std::setw(9) << fmt(red, 1) << "%\n";
      auto it = bands.find(ph.op);
      if (it != bands.end())
        r.checks.push_back(within(ph.op + " reduction %", red, it->second.first, it->second.second));
    } else {
      auto p = phases(ph.serial.breakdown);
      tab << std::left << std::setw(8) << ph.op << std::right << std::setw(12) << ph.serial.cycles;
      for (int i = 0; i < 4; ++i)
        tab << std::setw(7) << fmt(100.0 * double(p[i]) / double(ph.serial.breakdown.total()), 1) << "%";
      tab << "\n";
      if (ph.op == "QKT" || ph.op == "SV") {
        Check c = at_least(ph.op + " serial DT share %", dt_share(ph.serial), 50.0);
        c.bound = "> 50.00";
        c.pass = c.observed > 50.0;
        r.checks.push_back(c);
      }
    }
  }
  r.table = tab.str();
  r.json = json{{"l_in", l_in}, {"ops", rows}}.dump(2);
  return r;
}

const sched::SweepPoint* best_of(const std::vector<sched::SweepPoint>& v) {
  for (const auto& p : v)
    if (p.best) return &p;
  return nullptr;
}

ReproResult tpp_sweep(const ReproOptions& opt) {
  ReproResult r;
  auto m = model_preset("7B");
  device::PimTopology topo;
  topo.nodes = 4;
  auto tr = gen_trace(TraceSpec::preset("QMSUM", opt.sweep_requests, opt.seed));
  auto grid = plan_grid(m, topo);
  sched::SimOptions so;
  so.record_timeline = false;
  const sched::Features on = sched::Features::all_on();
  sched::Features off = on;
  off.lazy_alloc = false;  // static command stacks, no per-step expansion
  auto a = sched::sweep(tr, m, topo, {}, grid, on, opt.workers, so);
  auto b = sched::sweep(tr, m, topo, {}, grid, off, opt.workers, so);

  std::ostringstream tab;
  json rows = json::array();
  tab << "7B, " << topo.modules() << " modules, " << tr.size() << " QMSUM requests\n";
  tab << std::setw(10) << "(tp,pp)" << std::setw(14) << "DPA on tok/s" << std::setw(15) << "DPA off tok/s"
      << std::setw(8) << "gain\n";
  double mx = 0, mn = 1e300, max_gain = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& x = a[i].report;
    const auto& y = b[i].report;
    std::string tag = "(" + std::to_string(grid[i].first) + "," + std::to_string(grid[i].second) + ")";
    double gain = (x.feasible && y.feasible && y.tokens_per_sec > 0) ? x.tokens_per_sec / y.tokens_per_sec : 0;
    if (x.feasible) mx = std::max(mx, x.tokens_per_sec), mn = std::min(mn, x.tokens_per_sec);
    max_gain = std::max(max_gain, gain);
    tab << std::setw(10) << tag << std::setw(14) << (x.feasible ? fmt(x.tokens_per_sec, 1) : "infeasible")
        << std::setw(15) << (y.feasible ? fmt(y.tokens_per_sec, 1) : "infeasible") << std::setw(7) << fmt(gain, 3)
        << (a[i].best ? "  *on" : "") << (b[i].best ? "  *off" : "") << "\n";
    rows.push_back({{"tp", grid[i].first}, {"pp", grid[i].second}, {"on", metrics_json(x)}, {"off", metrics_json(y)},
                    {"best_on", a[i].best}, {"best_off", b[i].best}});
  }
  const auto* ba = best_of(a);
  const auto* bb = best_of(b);
  const double best_gain = (ba && bb) ? ba->report.tokens_per_sec / bb->report.tokens_per_sec : 0;
  tab << "optimum on (" << (ba ? ba->plan.tp : 0) << "," << (ba ? ba->plan.pp : 0) << "), optimum off ("
      << (bb ? bb->plan.tp : 0) << "," << (bb ? bb->plan.pp : 0) << "), largest per-plan gain " << fmt(max_gain, 3)
      << "\n";
  r.checks.push_back(at_least("max/min throughput (DPA on)", mn > 0 ? mx / mn : 0, 1.3));
  r.checks.push_back(at_least("best-point DPA on/off", best_gain, 1.15));
  r.checks.push_back({"both optima flagged", double(ba && bb), "== 1", ba && bb});
  r.table = tab.str();
  r.json = json{{"grid", rows}, {"best_gain", best_gain}, {"max_plan_gain", max_gain}}.dump(2);
  return r;
}

ReproResult util_scaling(const ReproOptions& opt) {
  ReproResult r;
  const std::vector<std::pair<std::string, int>> models = {{"7B", 4}, {"14B", 8}, {"72B", 40}};
  auto tr = gen_trace(TraceSpec::preset("QMSUM", opt.sweep_requests, opt.seed));
  sched::SimOptions so;
  so.record_timeline = false;
  std::ostringstream tab;
  json rows = json::array();
  tab << std::left << std::setw(6) << "model" << std::right << std::setw(7) << "nodes" << std::setw(12) << "on plan"
      << std::setw(10) << "on util" << std::setw(12) << "off plan" << std::setw(10) << "off util" << std::setw(8)
      << "ratio\n";
  std::vector<double> uon, uoff;
  for (const auto& [name, nodes] : models) {
    auto m = model_preset(name);
    device::PimTopology topo;
    topo.nodes = nodes;
    auto grid = plan_grid(m, topo);
    auto a = sched::sweep(tr, m, topo, {}, grid, sched::Features::all_on(), opt.workers, so);
    auto b = sched::sweep(tr, m, topo, {}, grid, sched::Features::all_off(), opt.workers, so);
    const auto* ba = best_of(a);
    const auto* bb = best_of(b);
    if (!ba || !bb) throw Error("UTIL_SCALING: no feasible plan for " + name);
    const double on = ba->report.utilization_pct, off = bb->report.utilization_pct;
    uon.push_back(on);
    uoff.push_back(off);
    auto plan = [](const sched::SweepPoint* p) {
      return "(" + std::to_string(p->plan.tp) + "," + std::to_string(p->plan.pp) + ")";
    };
    tab << std::left << std::setw(6) << name << std::right << std::setw(7) << nodes << std::setw(12) << plan(ba)
        << std::setw(9) << fmt(on, 2) << "%" << std::setw(12) << plan(bb) << std::setw(9) << fmt(off, 2) << "%"
        << std::setw(7) << fmt(on / off, 2) << "\n";
    rows.push_back({{"model", name}, {"nodes", nodes}, {"on", metrics_json(ba->report)},
                    {"off", metrics_json(bb->report)}});
    r.checks.push_back(at_least(name + " on/off utilization", on / off, 1.7));
  }
  const double spread = *std::max_element(uon.begin(), uon.end()) - *std::min_element(uon.begin(), uon.end());
  Check c{"feature-on utilization spread (points)", spread, "<= 5.00", spread <= 5.0};
  r.checks.push_back(c);
  bool mono = true;
  for (std::size_t i = 1; i < uoff.size(); ++i) mono = mono && uoff[i] <= uoff[i - 1] + 1e-9;
  r.checks.push_back({"feature-off utilization non-increasing", double(mono), "== 1", mono});
  r.table = tab.str();
  r.json = json{{"models", rows}, {"on_spread_points", spread}}.dump(2);
  return r;
}

}  // namespace

double rel_err(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) return INFINITY;
  double rms = 0;
  for (float v : b) rms += double(v) * v;
  rms = std::sqrt(rms / double(std::max<std::size_t>(b.size(), 1)));
  double e = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    e = std::max(e, std::abs(double(a[i]) - b[i]) / std::max(std::abs(double(b[i])), 1e-2 * rms));
  return e;
}

VerifyResult verify_decode(const ModelConfig& m, const device::PimTopology& topo, int tp, int pp,
                           int tokens_per_row, bool pingpong, const std::vector<std::int64_t>& l_in, int steps,
                           std::uint64_t seed) {
  auto cm = compile(m, topo, tp, pp, tokens_per_row);
  auto w = runtime::random_weights(m, seed);
  runtime::PimSystem sys(cm, topo, {}, w, pingpong);
  runtime::DenseDecoder ref(m, w);
  for (std::size_t i = 0; i < l_in.size(); ++i) {
    auto kv = runtime::random_kv(m, l_in[i], seed + 100 + i);
    sys.admit(int(i), kv);
    ref.add_request(int(i), kv);
  }
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<float> u(-1, 1);
  VerifyResult r;
  for (int s = 0; s < steps; ++s)
    for (std::size_t i = 0; i < l_in.size(); ++i) {
      std::vector<float> x(m.d_model());
      for (auto& v : x) v = u(rng);
      r.max_rel_err = std::max(r.max_rel_err, rel_err(sys.step(int(i), x), ref.step(int(i), x)));
      ++r.outputs;
    }
  return r;
}

ReproResult reproduce(Figure f, const ReproOptions& opt) {
  ReproResult r;
  switch (f) {
    case Figure::BatchGrowth: r = batch_growth(opt); break;
    case Figure::LatencyBd: r = latency(false, opt); break;
    case Figure::Pingpong: r = latency(true, opt); break;
    case Figure::TppSweep: r = tpp_sweep(opt); break;
    case Figure::UtilScaling: r = util_scaling(opt); break;
  }
  r.figure = f;
  r.pass = std::all_of(r.checks.begin(), r.checks.end(), [](const Check& c) { return c.pass; });
  // attach checks to the JSON bundle
  json j = json::parse(r.json);
  json checks = json::array();
  for (const auto& c : r.checks)
    checks.push_back({{"name", c.name}, {"observed", c.observed}, {"expected", c.bound}, {"pass", c.pass}});
  json out = {{"figure", figure_name(f)}, {"seed", opt.seed}, {"pass", r.pass}, {"checks", checks}, {"data", j}};
  r.json = out.dump(2) + "\n";
  return r;
}

}  // namespace pimsim::harness
