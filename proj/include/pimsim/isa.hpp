#pragma once
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "pimsim/common.hpp"

namespace pimsim::isa {

struct WrInp {
  std::uint32_t gpr = 0;
  bool operator==(const WrInp&) const = default;
};
struct DotProd {
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  bool operator==(const DotProd&) const = default;
};
struct RdOut {
  std::uint32_t gpr = 0;
  bool operator==(const RdOut&) const = default;
};

using PimCommand = std::variant<WrInp, DotProd, RdOut>;

enum class Field : std::uint8_t { Row = 0, Col = 1, GprIndex = 2 };

// tokens_per_iter == 0: LB is fixed at encode time. Otherwise the dispatcher
// recomputes LB = ceil(T_cur / tokens_per_iter) from the configuration buffer.
struct DynLoop {
  std::uint32_t lb = 1;
  std::uint32_t le = 1;
  std::uint32_t tokens_per_iter = 0;
  bool operator==(const DynLoop&) const = default;
};
struct DynModi {
  Field target = Field::Row;
  std::int32_t coefficient = 1;
  bool operator==(const DynModi&) const = default;
};

using Entry = std::variant<WrInp, DotProd, RdOut, DynLoop, DynModi>;

enum class OpKind : std::uint8_t {
  QkvGen = 0, Qkt, Softmax, Sv, Proj, Ffn1, Act, Ffn2, Other
};

struct StackMeta {
  std::uint32_t layer_id = 0;
  OpKind op_kind = OpKind::Other;
  std::uint32_t module_id = 0;
  std::uint32_t index = 0;  // distinguishes several stacks of one (layer, op)
  bool operator==(const StackMeta&) const = default;
};

struct CommandStack {
  std::vector<Entry> entries;
  StackMeta meta;
  bool operator==(const CommandStack&) const = default;
};

struct Violation {
  std::size_t index;
  std::string kind;
  std::string message;
};

struct DynField {
  std::size_t position;
  Field target;
  std::int32_t coefficient;
};

bool is_pim(const Entry& e);
PimCommand to_pim(const Entry& e);
bool has_field(const PimCommand& c, Field f);
std::uint32_t get_field(const PimCommand& c, Field f);
void set_field(PimCommand& c, Field f, std::uint32_t v);

const char* op_kind_name(OpKind k);
std::optional<OpKind> parse_op_kind(const std::string& s);
const char* field_name(Field f);

CommandStack encode_loop(const std::vector<PimCommand>& body, const std::vector<DynField>& dyn,
                         std::uint32_t lb, std::uint32_t tokens_per_iter = 0);

std::vector<Violation> validate_stack(const CommandStack& s);

// Reference unroller: lb copies of body, dyn fields incremented by
// iteration*coefficient on top of the body's value. No address translation.
std::vector<PimCommand> unroll_reference(const std::vector<PimCommand>& body,
                                         const std::vector<DynField>& dyn, std::uint32_t lb);

std::vector<std::uint8_t> serialize(const CommandStack& s);
CommandStack deserialize(const std::vector<std::uint8_t>& bytes);
std::size_t encoded_size(const CommandStack& s);

std::string to_text(const CommandStack& s);
std::string to_text(const std::vector<PimCommand>& cmds);
CommandStack parse_text(const std::string& text);

}  // namespace pimsim::isa
