#pragma once
#include <cstdint>
#include <map>
#include <optional>
#include <tuple>
#include <vector>

#include "pimsim/isa.hpp"

namespace pimsim::dispatch {

struct RequestSlot {
  int request_id = 0;
  std::int64_t t_cur = 0;
};

struct ConfigBuffer {
  int total_layers = 1;
  int current_layer = 0;
  std::vector<RequestSlot> slots;

  const RequestSlot* find(int request_id) const;
};

struct DispatchBudget {
  static constexpr std::size_t cmd_buffer_bytes = 98304;
  static constexpr std::size_t addr_map_bytes = 98304;
};

// request id (2B) + va (2B) + pa (4B)
constexpr std::size_t kVa2PaEntryBytes = 8;

class Va2PaTable {
 public:
  // Appends the next dense VA for the request.
  void append(int request_id, std::uint32_t pa);
  // Maps an explicit va; it must be the next dense index.
  void map(int request_id, std::uint32_t va, std::uint32_t pa);
  std::optional<std::uint32_t> translate(int request_id, std::uint32_t va) const;
  void release(int request_id);
  bool contains(int request_id) const { return rows_.count(request_id) != 0; }
  const std::vector<std::uint32_t>& rows(int request_id) const;
  std::size_t entries() const;
  std::size_t encoded_bytes() const { return entries() * kVa2PaEntryBytes; }
  // true iff no physical row is mapped by two requests
  bool disjoint() const;
  const std::map<int, std::vector<std::uint32_t>>& all() const { return rows_; }

 private:
  std::map<int, std::vector<std::uint32_t>> rows_;
};

std::int64_t compute_loop_bound(std::int64_t t_cur, std::int64_t tokens_per_row);

// DYN_MODI semantics: the field's encoded value is a base; the virtual value
// iteration*coefficient is added to it. ROW fields translate the virtual value
// through the request's Va2Pa entries first (physical = base + pa), so one table
// serves every KV region that shares the request's row layout.
std::vector<isa::PimCommand> expand(const isa::CommandStack& stack, const ConfigBuffer& cfg,
                                    const Va2PaTable& table, int request_id);
// Expansion for stacks with no dynamic loop bound and no ROW modifiers.
std::vector<isa::PimCommand> expand_static(const isa::CommandStack& stack);

ConfigBuffer update_config(ConfigBuffer cfg, int request_id, std::int64_t new_t_cur);
ConfigBuffer replace_slot(ConfigBuffer cfg, int old_request, int new_request, std::int64_t t_cur);

struct StackKey {
  std::uint32_t layer;
  isa::OpKind op;
  std::uint32_t index;
  auto operator<=>(const StackKey&) const = default;
};

struct LoadedImage {
  std::map<StackKey, isa::CommandStack> stacks;
  std::size_t bytes = 0;
  const isa::CommandStack& at(std::uint32_t layer, isa::OpKind op, std::uint32_t index = 0) const;
};

LoadedImage load_stacks(const std::vector<isa::CommandStack>& stacks,
                        std::size_t budget = DispatchBudget::cmd_buffer_bytes);
std::size_t total_encoded_size(const std::vector<isa::CommandStack>& stacks);

}  // namespace pimsim::dispatch
