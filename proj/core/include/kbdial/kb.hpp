#pragma once

#include <string>
#include <vector>

#include "kbdial/tensor.hpp"

namespace kbdial {

// One relational table attached to a dialogue. Column names double as
// entity types.
struct KnowledgeBase {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::string domain;

  int n_rows() const { return static_cast<int>(rows.size()); }
  int n_cols() const { return static_cast<int>(columns.size()); }
  // Throws ValidationError on ragged rows, duplicate columns, or an empty grid.
  void validate() const;
};

// Lowercase, trim, and join internal whitespace with underscores
// ("Tom's house" -> "tom's_house"). Idempotent; empty input is a
// ValidationError.
std::string canonicalize_entity(const std::string& surface);

struct MemoryEntry {
  std::string token;  // canonical cell value
  std::string type;   // canonical column name
  int row = 0;
  int col = 0;
};

// Row-major flattening of a KB: entry k sits at (k div c, k mod c).
struct MemorySequence {
  std::vector<MemoryEntry> entries;
  int n_rows = 0;
  int n_cols = 0;

  int size() const { return static_cast<int>(entries.size()); }
};

MemorySequence flatten_kb(const KnowledgeBase& kb);

// (|M|+1) x (|M|+1) allow/block matrix over [summary slot; memory entries].
// Position 0 may attend everywhere and be attended from everywhere; entity
// positions i,j >= 1 connect iff their entries share a KB row.
class MemoryMask {
 public:
  MemoryMask() = default;
  explicit MemoryMask(int memory_len);

  int size() const { return size_; }  // |M| + 1
  bool allowed(int i, int j) const { return allow_[static_cast<size_t>(i) * size_ + j] != 0; }
  void set(int i, int j, bool v) { allow_[static_cast<size_t>(i) * size_ + j] = v; }
  int64_t allowed_count() const;

  // Additive realization (0 allowed / -inf blocked) over the full
  // (|M|+1)^2 grid, or the |M|^2 entity block when the summary slot is
  // dropped (the no-summary ablation).
  Tensor additive(bool include_summary_slot = true) const;

 private:
  int size_ = 0;
  std::vector<char> allow_;
};

MemoryMask build_memory_mask(const MemorySequence& seq);

// ASCII rendering with row/column labels ('#' allowed, '.' blocked).
std::string render_mask(const MemoryMask& mask, const MemorySequence& seq);

}  // namespace kbdial
