#include "pimsim/isa.hpp"

#include <cstring>
#include <sstream>

namespace pimsim::isa {

namespace {

template <class... Ts> struct overloaded : Ts... { using Ts::operator()...; };
template <class... Ts> overloaded(Ts...) -> overloaded<Ts...>;

constexpr std::uint8_t kTagWr = 0x01, kTagDot = 0x02, kTagRd = 0x03;
constexpr std::uint8_t kTagLoop = 0x10, kTagModi = 0x11;
constexpr char kMagic[4] = {'P', 'I', 'M', 'S'};
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 24;

void put_u8(std::vector<std::uint8_t>& o, std::uint8_t v) { o.push_back(v); }
void put_u32(std::vector<std::uint8_t>& o, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) o.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Reader {
  const std::vector<std::uint8_t>& b;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > b.size()) throw Error("truncated stack encoding at byte " + std::to_string(pos));
  }
  std::uint8_t u8() { need(1); return b[pos++]; }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
};

std::size_t record_size(const Entry& e) {
  return std::visit(overloaded{
      [](const WrInp&) -> std::size_t { return 5; },
      [](const DotProd&) -> std::size_t { return 9; },
      [](const RdOut&) -> std::size_t { return 5; },
      [](const DynLoop&) -> std::size_t { return 13; },
      [](const DynModi&) -> std::size_t { return 6; }}, e);
}

}  // namespace

bool is_pim(const Entry& e) { return e.index() <= 2; }

PimCommand to_pim(const Entry& e) {
  switch (e.index()) {
    case 0: return std::get<WrInp>(e);
    case 1: return std::get<DotProd>(e);
    case 2: return std::get<RdOut>(e);
  }
  throw Error("entry is not a PIM command");
}

static Entry to_entry(const PimCommand& c) {
  return std::visit([](const auto& x) -> Entry { return x; }, c);
}

bool has_field(const PimCommand& c, Field f) {
  if (std::holds_alternative<DotProd>(c)) return f == Field::Row || f == Field::Col;
  return f == Field::GprIndex;
}

std::uint32_t get_field(const PimCommand& c, Field f) {
  if (!has_field(c, f)) throw Error(std::string("command has no field ") + field_name(f));
  return std::visit(overloaded{
      [](const WrInp& x) { return x.gpr; },
      [](const RdOut& x) { return x.gpr; },
      [f](const DotProd& x) { return f == Field::Row ? x.row : x.col; }}, c);
}

void set_field(PimCommand& c, Field f, std::uint32_t v) {
  if (!has_field(c, f)) throw Error(std::string("command has no field ") + field_name(f));
  std::visit(overloaded{
      [v](WrInp& x) { x.gpr = v; },
      [v](RdOut& x) { x.gpr = v; },
      [f, v](DotProd& x) { (f == Field::Row ? x.row : x.col) = v; }}, c);
}

const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::QkvGen: return "QKV_GEN";
    case OpKind::Qkt: return "QKT";
    case OpKind::Softmax: return "SOFTMAX";
    case OpKind::Sv: return "SV";
    case OpKind::Proj: return "PROJ";
    case OpKind::Ffn1: return "FFN1";
    case OpKind::Act: return "ACT";
    case OpKind::Ffn2: return "FFN2";
    case OpKind::Other: return "OTHER";
  }
  return "?";
}

std::optional<OpKind> parse_op_kind(const std::string& s) {
  for (int i = 0; i <= static_cast<int>(OpKind::Other); ++i)
    if (s == op_kind_name(static_cast<OpKind>(i))) return static_cast<OpKind>(i);
  return std::nullopt;
}

const char* field_name(Field f) {
  switch (f) {
    case Field::Row: return "ROW";
    case Field::Col: return "COL";
    case Field::GprIndex: return "GPR_INDEX";
  }
  return "?";
}

CommandStack encode_loop(const std::vector<PimCommand>& body, const std::vector<DynField>& dyn,
                         std::uint32_t lb, std::uint32_t tokens_per_iter) {
  if (body.empty()) throw Error("encode_loop: empty body");
  if (lb < 1) throw Error("encode_loop: lb must be >= 1");
  for (const auto& d : dyn) {
    if (d.position >= body.size()) throw Error("encode_loop: dyn position out of range");
    if (!has_field(body[d.position], d.target))
      throw Error("encode_loop: dyn target not present on command");
  }
  CommandStack s;
  s.entries.push_back(DynLoop{lb, static_cast<std::uint32_t>(body.size()), tokens_per_iter});
  for (std::size_t i = 0; i < body.size(); ++i) {
    // canonical order: ROW, COL, GPR_INDEX
    for (Field f : {Field::Row, Field::Col, Field::GprIndex})
      for (const auto& d : dyn)
        if (d.position == i && d.target == f) s.entries.push_back(DynModi{f, d.coefficient});
    s.entries.push_back(to_entry(body[i]));
  }
  return s;
}

std::vector<PimCommand> unroll_reference(const std::vector<PimCommand>& body,
                                         const std::vector<DynField>& dyn, std::uint32_t lb) {
  std::vector<PimCommand> out;
  out.reserve(body.size() * lb);
  for (std::uint32_t it = 0; it < lb; ++it) {
    for (std::size_t i = 0; i < body.size(); ++i) {
      PimCommand c = body[i];
      for (const auto& d : dyn) {
        if (d.position != i) continue;
        std::int64_t v = std::int64_t(get_field(c, d.target)) + std::int64_t(it) * d.coefficient;
        set_field(c, d.target, static_cast<std::uint32_t>(v));
      }
      out.push_back(c);
    }
  }
  return out;
}

std::vector<Violation> validate_stack(const CommandStack& s) {
  std::vector<Violation> v;
  const auto& e = s.entries;
  std::size_t loop_end = 0;  // index one past the current loop body, 0 when outside
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (loop_end && i >= loop_end) loop_end = 0;
    if (const auto* l = std::get_if<DynLoop>(&e[i])) {
      if (l->lb < 1) v.push_back({i, "bad loop bound", "DYN_LOOP LB must be >= 1"});
      if (l->le < 1) v.push_back({i, "bad loop entry", "DYN_LOOP LE must be >= 1"});
      if (loop_end) v.push_back({i, "nested loop", "DYN_LOOP inside another loop body"});
      std::size_t pim = 0, j = i + 1;
      for (; j < e.size() && pim < l->le; ++j)
        if (is_pim(e[j])) ++pim;
      if (pim < l->le) {
        v.push_back({i, "loop overruns stack",
                     "LE=" + std::to_string(l->le) + " but only " + std::to_string(pim) +
                         " PIM commands follow"});
      } else if (!loop_end) {
        loop_end = j;
      }
    } else if (const auto* m = std::get_if<DynModi>(&e[i])) {
      // Stacked modifiers must target distinct fields of the same command.
      std::size_t j = i + 1;
      bool dangling = false;
      for (; j < e.size() && std::holds_alternative<DynModi>(e[j]); ++j)
        if (std::get<DynModi>(e[j]).target == m->target) dangling = true;
      if (dangling || j >= e.size() || !is_pim(e[j])) {
        v.push_back({i, "dangling modifier", "DYN_MODI not followed by a PIM command"});
      } else if (!has_field(to_pim(e[j]), m->target)) {
        v.push_back({i, "field mismatch",
                     std::string("next command has no field ") + field_name(m->target)});
      }
    }
  }
  return v;
}

std::size_t encoded_size(const CommandStack& s) {
  std::size_t n = kHeaderBytes;
  for (const auto& e : s.entries) n += record_size(e);
  return n;
}

std::vector<std::uint8_t> serialize(const CommandStack& s) {
  std::vector<std::uint8_t> o;
  o.reserve(encoded_size(s));
  o.insert(o.end(), kMagic, kMagic + 4);
  put_u8(o, kVersion);
  put_u8(o, static_cast<std::uint8_t>(s.meta.op_kind));
  put_u8(o, 0);
  put_u8(o, 0);
  put_u32(o, s.meta.layer_id);
  put_u32(o, s.meta.module_id);
  put_u32(o, s.meta.index);
  put_u32(o, static_cast<std::uint32_t>(s.entries.size()));
  for (const auto& e : s.entries) {
    std::visit(overloaded{
        [&](const WrInp& x) { put_u8(o, kTagWr); put_u32(o, x.gpr); },
        [&](const DotProd& x) { put_u8(o, kTagDot); put_u32(o, x.row); put_u32(o, x.col); },
        [&](const RdOut& x) { put_u8(o, kTagRd); put_u32(o, x.gpr); },
        [&](const DynLoop& x) {
          put_u8(o, kTagLoop); put_u32(o, x.lb); put_u32(o, x.le); put_u32(o, x.tokens_per_iter);
        },
        [&](const DynModi& x) {
          put_u8(o, kTagModi); put_u8(o, static_cast<std::uint8_t>(x.target));
          put_u32(o, static_cast<std::uint32_t>(x.coefficient));
        }}, e);
  }
  return o;
}

CommandStack deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes};
  r.need(kHeaderBytes);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error("bad stack magic");
  r.pos = 4;
  if (r.u8() != kVersion) throw Error("unsupported stack version");
  std::uint8_t op = r.u8();
  if (op > static_cast<std::uint8_t>(OpKind::Other)) throw Error("unknown op kind in header");
  r.u8();
  r.u8();
  CommandStack s;
  s.meta.op_kind = static_cast<OpKind>(op);
  s.meta.layer_id = r.u32();
  s.meta.module_id = r.u32();
  s.meta.index = r.u32();
  std::uint32_t n = r.u32();
  // Smallest record is 5 bytes; reject counts the payload cannot hold.
  if (std::uint64_t(n) * 5 > bytes.size() - kHeaderBytes)
    throw Error("entry count exceeds payload length");
  s.entries.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::uint8_t tag = r.u8();
    switch (tag) {
      case kTagWr: s.entries.push_back(WrInp{r.u32()}); break;
      case kTagDot: {
        std::uint32_t row = r.u32();
        s.entries.push_back(DotProd{row, r.u32()});
        break;
      }
      case kTagRd: s.entries.push_back(RdOut{r.u32()}); break;
      case kTagLoop: {
        DynLoop l;
        l.lb = r.u32();
        l.le = r.u32();
        l.tokens_per_iter = r.u32();
        s.entries.push_back(l);
        break;
      }
      case kTagModi: {
        std::uint8_t f = r.u8();
        if (f > 2) throw Error("unknown DYN_MODI target " + std::to_string(f));
        s.entries.push_back(DynModi{static_cast<Field>(f), static_cast<std::int32_t>(r.u32())});
        break;
      }
      default:
        throw Error("unknown opcode tag " + std::to_string(tag) + " at byte " +
                    std::to_string(r.pos - 1));
    }
  }
  if (r.pos != bytes.size()) throw Error("trailing bytes after stack");
  return s;
}

// ---- text form ----

namespace {

std::string field_text(std::uint32_t value, const std::optional<std::int32_t>& coef) {
  if (!coef) return std::to_string(value);
  std::string t = "@va+" + std::to_string(value);
  if (*coef != 1) t += "*" + std::to_string(*coef);
  return t;
}

std::string command_text(const PimCommand& c, const std::optional<std::int32_t> modi[3]) {
  return std::visit(overloaded{
      [&](const WrInp& x) { return "WR-INP gpr=" + field_text(x.gpr, modi[2]); },
      [&](const RdOut& x) { return "RD-OUT gpr=" + field_text(x.gpr, modi[2]); },
      [&](const DotProd& x) {
        return "DOT-PROD row=" + field_text(x.row, modi[0]) + " col=" + field_text(x.col, modi[1]);
      }}, c);
}

}  // namespace

std::string to_text(const CommandStack& s) {
  std::ostringstream os;
  os << "stack layer=" << s.meta.layer_id << " op=" << op_kind_name(s.meta.op_kind)
     << " module=" << s.meta.module_id << " index=" << s.meta.index << "\n";
  std::optional<std::int32_t> modi[3];
  for (const auto& e : s.entries) {
    if (const auto* l = std::get_if<DynLoop>(&e)) {
      os << "DYN-LOOP lb=" << l->lb << " le=" << l->le;
      if (l->tokens_per_iter) os << " tpi=" << l->tokens_per_iter;
      os << "\n";
    } else if (const auto* m = std::get_if<DynModi>(&e)) {
      modi[static_cast<int>(m->target)] = m->coefficient;
    } else {
      os << command_text(to_pim(e), modi) << "\n";
      for (auto& x : modi) x.reset();
    }
  }
  return os.str();
}

std::string to_text(const std::vector<PimCommand>& cmds) {
  std::ostringstream os;
  const std::optional<std::int32_t> none[3];
  for (const auto& c : cmds) os << command_text(c, none) << "\n";
  return os.str();
}

namespace {

std::uint32_t parse_u32(const std::string& s, int line) {
  try {
    std::size_t n = 0;
    unsigned long v = std::stoul(s, &n);
    if (n != s.size() || v > 0xffffffffUL) throw std::invalid_argument(s);
    return static_cast<std::uint32_t>(v);
  } catch (const std::exception&) {
    throw Error("line " + std::to_string(line) + ": bad number '" + s + "'");
  }
}

// "5" or "@va+5" or "@va+5*-2"
std::uint32_t parse_field(const std::string& s, int line, std::optional<std::int32_t>& coef) {
  if (s.rfind("@va+", 0) != 0) return parse_u32(s, line);
  std::string rest = s.substr(4);
  auto star = rest.find('*');
  coef = 1;
  if (star != std::string::npos) {
    try {
      coef = std::stoi(rest.substr(star + 1));
    } catch (const std::exception&) {
      throw Error("line " + std::to_string(line) + ": bad stride in '" + s + "'");
    }
    rest = rest.substr(0, star);
  }
  return parse_u32(rest, line);
}

}  // namespace

CommandStack parse_text(const std::string& text) {
  CommandStack s;
  std::istringstream is(text);
  std::string raw;
  int line = 0;
  while (std::getline(is, raw)) {
    ++line;
    auto hash = raw.find('#');
    if (hash != std::string::npos) raw.resize(hash);
    std::istringstream ls(raw);
    std::string op;
    if (!(ls >> op)) continue;
    std::vector<std::pair<std::string, std::string>> kv;
    std::string tok;
    while (ls >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos) throw Error("line " + std::to_string(line) + ": expected key=value");
      kv.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
    }
    auto get = [&](const std::string& k) -> const std::string& {
      for (const auto& [a, b] : kv)
        if (a == k) return b;
      throw Error("line " + std::to_string(line) + ": missing '" + k + "'");
    };
    auto has = [&](const std::string& k) {
      for (const auto& [a, b] : kv)
        if (a == k) return true;
      return false;
    };
    if (op == "stack") {
      s.meta.layer_id = parse_u32(get("layer"), line);
      auto k = parse_op_kind(get("op"));
      if (!k) throw Error("line " + std::to_string(line) + ": unknown op kind");
      s.meta.op_kind = *k;
      s.meta.module_id = parse_u32(get("module"), line);
      if (has("index")) s.meta.index = parse_u32(get("index"), line);
    } else if (op == "DYN-LOOP") {
      DynLoop l;
      l.lb = parse_u32(get("lb"), line);
      l.le = parse_u32(get("le"), line);
      if (has("tpi")) l.tokens_per_iter = parse_u32(get("tpi"), line);
      s.entries.push_back(l);
    } else if (op == "WR-INP" || op == "RD-OUT") {
      std::optional<std::int32_t> c;
      std::uint32_t g = parse_field(get("gpr"), line, c);
      if (c) s.entries.push_back(DynModi{Field::GprIndex, *c});
      if (op == "WR-INP") s.entries.push_back(WrInp{g});
      else s.entries.push_back(RdOut{g});
    } else if (op == "DOT-PROD") {
      std::optional<std::int32_t> cr, cc;
      std::uint32_t row = parse_field(get("row"), line, cr);
      std::uint32_t col = parse_field(get("col"), line, cc);
      if (cr) s.entries.push_back(DynModi{Field::Row, *cr});
      if (cc) s.entries.push_back(DynModi{Field::Col, *cc});
      s.entries.push_back(DotProd{row, col});
    } else {
      throw Error("line " + std::to_string(line) + ": unknown mnemonic '" + op + "'");
    }
  }
  return s;
}

}  // namespace pimsim::isa
