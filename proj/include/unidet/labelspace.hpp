#pragma once

#include <map>
#include <string>
#include <vector>

namespace unidet {

struct Vocabulary {
  std::string dataset_id;
  std::vector<std::string> classes;
};

// JSON file {"dataset_id": ..., "classes": [...]}. Classes are normalized on
// load; duplicates after normalization are an error.
Vocabulary load_vocabulary(const std::string& path);

// Embedded vocabularies of six public indoor datasets, usable without any
// data files (also shipped as JSON under data/vocabularies/).
const std::vector<Vocabulary>& builtin_vocabularies();
const Vocabulary* find_builtin_vocabulary(const std::string& dataset_id);

// Optional label aliasing. Chains resolve transitively at load time and
// cycles are rejected, so applying the table is idempotent.
class SynonymTable {
 public:
  SynonymTable() = default;
  // JSON array of {"from": ..., "to": ...} entries.
  static SynonymTable load(const std::string& path);
  static SynonymTable from_pairs(
      const std::vector<std::pair<std::string, std::string>>& pairs);

  bool empty() const { return resolved_.empty(); }
  // Input must already be normalized text.
  const std::string& resolve(const std::string& label) const;
  // Fully resolved alias -> target pairs; feeding them back through
  // from_pairs reproduces the table.
  const std::map<std::string, std::string>& entries() const { return resolved_; }

 private:
  std::map<std::string, std::string> resolved_;
};

// Lowercases, trims, collapses internal whitespace, then applies synonyms.
// Idempotent; empty results are an error.
std::string normalize_label(const std::string& raw, const SynonymTable& synonyms);

enum class LabelMode { kSeparate, kPartitioned, kUnified };

const char* label_mode_name(LabelMode mode);
LabelMode parse_label_mode(const std::string& name);

// Global class index shared by heads, assignment, and evaluation. In
// partitioned mode global names are qualified as "dataset/class" so equal
// names from different datasets stay distinct; in unified mode equal
// normalized names share one index.
struct LabelSpace {
  LabelMode mode = LabelMode::kSeparate;
  std::vector<std::string> classes;  // global names, first-seen order

  struct DatasetEntry {
    std::string dataset_id;
    std::vector<std::string> local_classes;  // normalized, vocabulary order
    std::vector<int> to_global;              // local index -> global index
  };
  std::vector<DatasetEntry> datasets;

  // Remarks worth surfacing in reports (e.g. how exact-string merging
  // treated near-duplicate names).
  std::string note;

  std::size_t size() const { return classes.size(); }
  const DatasetEntry& dataset(const std::string& dataset_id) const;
  // Global index of a raw label from one dataset; unknown labels throw.
  int project(const std::string& dataset_id, const std::string& raw_label,
              const SynonymTable& synonyms) const;
};

LabelSpace build_label_space(const std::vector<Vocabulary>& vocabularies,
                             LabelMode mode, const SynonymTable& synonyms);

}  // namespace unidet
