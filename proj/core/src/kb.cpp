#include "kbdial/kb.hpp"

#include <cctype>
#include <limits>
#include <set>
#include <sstream>

namespace kbdial {

void KnowledgeBase::validate() const {
  if (columns.empty() || rows.empty())
    throw ValidationError("kb: empty grid (needs at least one row and one column)");
  std::set<std::string> seen;
  for (const std::string& c : columns) {
    if (!seen.insert(canonicalize_entity(c)).second)
      throw ValidationError("kb: duplicate column name '" + c + "'");
  }
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != columns.size()) {
      throw ValidationError("kb: row " + std::to_string(i) + " has " +
                            std::to_string(rows[i].size()) + " cells, expected " +
                            std::to_string(columns.size()));
    }
  }
}

std::string canonicalize_entity(const std::string& surface) {
  std::string out;
  out.reserve(surface.size());
  bool in_space = true;  // swallows leading whitespace
  for (char ch : surface) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!in_space) {
        out.push_back('_');
        in_space = true;
      }
    } else {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  if (out.empty()) throw ValidationError("canonicalize_entity: empty surface form");
  return out;
}

MemorySequence flatten_kb(const KnowledgeBase& kb) {
  kb.validate();
  MemorySequence seq;
  seq.n_rows = kb.n_rows();
  seq.n_cols = kb.n_cols();
  seq.entries.reserve(static_cast<size_t>(seq.n_rows) * seq.n_cols);
  for (int r = 0; r < seq.n_rows; ++r) {
    for (int c = 0; c < seq.n_cols; ++c) {
      seq.entries.push_back({canonicalize_entity(kb.rows[r][c]),
                             canonicalize_entity(kb.columns[c]), r, c});
    }
  }
  return seq;
}

MemoryMask::MemoryMask(int memory_len) : size_(memory_len + 1) {
  allow_.assign(static_cast<size_t>(size_) * size_, 0);
}

int64_t MemoryMask::allowed_count() const {
  int64_t n = 0;
  for (char v : allow_) n += v != 0;
  return n;
}

Tensor MemoryMask::additive(bool include_summary_slot) const {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  const int off = include_summary_slot ? 0 : 1;
  const int n = size_ - off;
  Tensor t({n, n}, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (!allowed(i + off, j + off)) t.at(i, j) = neg_inf;
  return t;
}

MemoryMask build_memory_mask(const MemorySequence& seq) {
  MemoryMask mask(seq.size());
  for (int i = 1; i < mask.size(); ++i) {
    for (int j = 1; j < mask.size(); ++j) {
      if (seq.entries[static_cast<size_t>(i) - 1].row != seq.entries[static_cast<size_t>(j) - 1].row)
        mask.set(i, j, false);
    }
  }
  return mask;
}

std::string render_mask(const MemoryMask& mask, const MemorySequence& seq) {
  std::ostringstream os;
  auto label = [&](int p) -> std::string {
    if (p == 0) return "SUM";
    const MemoryEntry& e = seq.entries[static_cast<size_t>(p) - 1];
    return "r" + std::to_string(e.row) + "c" + std::to_string(e.col);
  };
  size_t w = 0;
  for (int p = 0; p < mask.size(); ++p) w = std::max(w, label(p).size());
  os << std::string(w, ' ') << "  ";
  for (int j = 0; j < mask.size(); ++j) {
    std::string l = label(j);
    os << l << std::string(w + 1 - l.size(), ' ');
  }
  os << "\n";
  for (int i = 0; i < mask.size(); ++i) {
    std::string l = label(i);
    os << l << std::string(w - l.size(), ' ') << "  ";
    for (int j = 0; j < mask.size(); ++j)
      os << (mask.allowed(i, j) ? '#' : '.') << std::string(w, ' ');
    os << "\n";
  }
  return os.str();
}

}  // namespace kbdial
