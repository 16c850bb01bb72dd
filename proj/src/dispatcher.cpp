#include "pimsim/dispatcher.hpp"

#include <algorithm>
#include <unordered_set>

namespace pimsim::dispatch {

const RequestSlot* ConfigBuffer::find(int request_id) const {
  for (const auto& s : slots)
    if (s.request_id == request_id) return &s;
  return nullptr;
}

void Va2PaTable::append(int request_id, std::uint32_t pa) { rows_[request_id].push_back(pa); }

void Va2PaTable::map(int request_id, std::uint32_t va, std::uint32_t pa) {
  auto& v = rows_[request_id];
  if (va != v.size())
    throw Error("Va2Pa: va " + std::to_string(va) + " breaks dense numbering for request " +
                std::to_string(request_id));
  v.push_back(pa);
}

std::optional<std::uint32_t> Va2PaTable::translate(int request_id, std::uint32_t va) const {
  auto it = rows_.find(request_id);
  if (it == rows_.end() || va >= it->second.size()) return std::nullopt;
  return it->second[va];
}

void Va2PaTable::release(int request_id) {
  if (!rows_.erase(request_id)) throw Error("Va2Pa: release of unknown request");
}

const std::vector<std::uint32_t>& Va2PaTable::rows(int request_id) const {
  static const std::vector<std::uint32_t> empty;
  auto it = rows_.find(request_id);
  return it == rows_.end() ? empty : it->second;
}

std::size_t Va2PaTable::entries() const {
  std::size_t n = 0;
  for (const auto& [_, v] : rows_) n += v.size();
  return n;
}

bool Va2PaTable::disjoint() const {
  std::unordered_set<std::uint32_t> seen;
  for (const auto& [_, v] : rows_)
    for (auto pa : v)
      if (!seen.insert(pa).second) return false;
  return true;
}

std::int64_t compute_loop_bound(std::int64_t t_cur, std::int64_t tokens_per_row) {
  if (t_cur < 1 || tokens_per_row < 1) throw Error("compute_loop_bound: arguments must be >= 1");
  return ceil_div(t_cur, tokens_per_row);
}

namespace {

struct Expander {
  const ConfigBuffer* cfg;
  const Va2PaTable* table;
  int request_id;
  std::int64_t t_cur;

  std::uint32_t resolve(isa::Field f, std::uint32_t base, std::int64_t virt) const {
    if (virt < 0) throw Error("negative virtual address");
    if (f != isa::Field::Row) return static_cast<std::uint32_t>(base + virt);
    if (!table) throw Error("ROW modifier needs a Va2Pa table");
    auto pa = table->translate(request_id, static_cast<std::uint32_t>(virt));
    if (!pa)
      throw Error("unmapped VA " + std::to_string(virt) + " for request " +
                  std::to_string(request_id));
    return base + *pa;
  }
};

std::vector<isa::PimCommand> run(const isa::CommandStack& stack, const Expander& x) {
  using namespace isa;
  const auto& e = stack.entries;
  std::vector<PimCommand> out;

  // Collects pending modifiers then applies them to the next PIM command.
  auto emit = [&](std::size_t& i, std::int64_t iter) {
    std::optional<std::int32_t> modi[3];
    while (std::holds_alternative<DynModi>(e[i])) {
      const auto& m = std::get<DynModi>(e[i]);
      modi[static_cast<int>(m.target)] = m.coefficient;
      ++i;
    }
    PimCommand c = to_pim(e[i]);
    for (int f = 0; f < 3; ++f) {
      if (!modi[f]) continue;
      auto fld = static_cast<Field>(f);
      set_field(c, fld, x.resolve(fld, get_field(c, fld), iter * *modi[f]));
    }
    out.push_back(c);
    ++i;
  };

  std::size_t i = 0;
  while (i < e.size()) {
    if (const auto* l = std::get_if<DynLoop>(&e[i])) {
      std::int64_t lb = l->lb;
      if (l->tokens_per_iter) {
        if (x.t_cur < 1) throw Error("dynamic loop bound needs a request with t_cur >= 1");
        lb = compute_loop_bound(x.t_cur, l->tokens_per_iter);
      }
      std::size_t body = i + 1;
      std::size_t end = body;
      for (std::int64_t it = 0; it < lb; ++it) {
        std::size_t j = body;
        for (std::uint32_t k = 0; k < l->le; ++k) emit(j, it);
        end = j;
      }
      if (lb == 0) {
        for (std::uint32_t k = 0; k < l->le; ++k) {
          while (!is_pim(e[end])) ++end;
          ++end;
        }
      }
      i = end;
    } else {
      emit(i, 0);
    }
  }
  return out;
}

}  // namespace

std::vector<isa::PimCommand> expand(const isa::CommandStack& stack, const ConfigBuffer& cfg,
                                    const Va2PaTable& table, int request_id) {
  if (auto v = isa::validate_stack(stack); !v.empty())
    throw Error("expand: invalid stack (" + v.front().kind + " at entry " +
                std::to_string(v.front().index) + ")");
  if (static_cast<int>(stack.meta.layer_id) >= cfg.total_layers)
    throw Error("expand: stack layer " + std::to_string(stack.meta.layer_id) +
                " >= total_layers " + std::to_string(cfg.total_layers));
  const RequestSlot* slot = cfg.find(request_id);
  if (!slot) throw Error("expand: request " + std::to_string(request_id) + " not in config buffer");
  return run(stack, Expander{&cfg, &table, request_id, slot->t_cur});
}

std::vector<isa::PimCommand> expand_static(const isa::CommandStack& stack) {
  if (auto v = isa::validate_stack(stack); !v.empty())
    throw Error("expand: invalid stack (" + v.front().kind + ")");
  return run(stack, Expander{nullptr, nullptr, -1, 0});
}

ConfigBuffer update_config(ConfigBuffer cfg, int request_id, std::int64_t new_t_cur) {
  if (cfg.slots.empty()) throw Error("update_config: no request slots");
  for (auto& s : cfg.slots) {
    if (s.request_id != request_id) continue;
    if (new_t_cur < s.t_cur) throw Error("update_config: t_cur regression");
    if (new_t_cur != s.t_cur + 1) throw Error("update_config: t_cur must advance by one");
    s.t_cur = new_t_cur;
    return cfg;
  }
  throw Error("update_config: unknown request " + std::to_string(request_id));
}

ConfigBuffer replace_slot(ConfigBuffer cfg, int old_request, int new_request, std::int64_t t_cur) {
  if (t_cur < 1) throw Error("replace_slot: t_cur must be >= 1");
  for (auto& s : cfg.slots) {
    if (s.request_id != old_request) continue;
    s.request_id = new_request;
    s.t_cur = t_cur;
    return cfg;
  }
  throw Error("replace_slot: unknown request " + std::to_string(old_request));
}

const isa::CommandStack& LoadedImage::at(std::uint32_t layer, isa::OpKind op,
                                         std::uint32_t index) const {
  auto it = stacks.find(StackKey{layer, op, index});
  if (it == stacks.end())
    throw Error(std::string("no resident stack for layer ") + std::to_string(layer) + " op " +
                isa::op_kind_name(op));
  return it->second;
}

std::size_t total_encoded_size(const std::vector<isa::CommandStack>& stacks) {
  std::size_t n = 0;
  for (const auto& s : stacks) n += isa::encoded_size(s);
  return n;
}

LoadedImage load_stacks(const std::vector<isa::CommandStack>& stacks, std::size_t budget) {
  LoadedImage img;
  img.bytes = total_encoded_size(stacks);
  if (img.bytes > budget)
    throw Error("command buffer budget exceeded: " + std::to_string(img.bytes) + " > " +
                std::to_string(budget) + " bytes");
  for (const auto& s : stacks) {
    StackKey k{s.meta.layer_id, s.meta.op_kind, s.meta.index};
    if (!img.stacks.emplace(k, s).second) throw Error("duplicate stack key in load_stacks");
  }
  return img;
}

}  // namespace pimsim::dispatch
