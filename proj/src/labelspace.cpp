#include "unidet/labelspace.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace unidet {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

std::string normalize_text(const std::string& raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_space = false;
  for (char ch : raw) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!out.empty()) pending_space = true;
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  return out;
}

Vocabulary make_vocab(const char* id, std::initializer_list<const char*> classes) {
  Vocabulary v;
  v.dataset_id = id;
  for (const char* c : classes) v.classes.emplace_back(c);
  return v;
}

std::vector<Vocabulary> make_builtins() {
  return {
      make_vocab("scannet",
                 {"bathtub", "bed", "bookshelf", "cabinet", "chair", "counter",
                  "curtain", "desk", "door", "garbagebin", "picture", "refrigerator",
                  "showercurtrain", "sink", "sofa", "table", "toilet", "window"}),
      make_vocab("arkitscenes",
                 {"bathtub", "bed", "cabinet", "chair", "dishwasher", "fireplace",
                  "oven", "refrigerator", "shelf", "sink", "sofa", "stool", "stove",
                  "table", "toilet", "tv monitor", "washer"}),
      make_vocab("s3dis", {"board", "bookcase", "chair", "sofa", "table"}),
      make_vocab("multiscan",
                 {"backpack", "bed", "cabinet", "chair", "curtain", "door",
                  "microwave", "pillow", "refrigerator", "sink", "sofa", "suitcase",
                  "table", "toilet", "trash can", "tv monitor", "window"}),
      make_vocab("3rscan",
                 {"bathtub", "bed", "bookshelf", "cabinet", "chair", "counter",
                  "curtain", "desk", "door", "garbagebin", "picture", "refrigerator",
                  "showercurtrain", "sink", "sofa", "table", "toilet", "window"}),
      make_vocab(
          "scannetpp",
          {"backpack",      "bag",           "basket",       "bed",
           "binder",        "blanket",       "blinds",       "book",
           "bookshelf",     "bottle",        "bowl",         "box",
           "bucket",        "cabinet",       "ceiling lamp", "chair",
           "clock",         "coat hanger",   "computer tower", "container",
           "crate",         "cup",           "curtain",      "cushion",
           "cutting board", "door",          "exhaust fan",  "file folder",
           "headphones",    "heater",        "jacket",       "jar",
           "kettle",        "keyboard",      "kitchen cabinet", "laptop",
           "light switch",  "marker",        "microwave",    "monitor",
           "mouse",         "office chair",  "painting",     "pan",
           "paper bag",     "paper towel",   "picture",      "pillow",
           "plant",         "plant pot",     "poster",       "pot",
           "power strip",   "printer",       "rack",         "refrigerator",
           "shelf",         "shoe rack",     "shoes",        "sink",
           "slippers",      "smoke detector", "soap dispenser", "socket",
           "sofa",          "speaker",       "spray bottle", "stapler",
           "storage cabinet", "suitcase",    "table",        "table lamp",
           "tap",           "telephone",     "tissue box",   "toilet",
           "toilet brush",  "toilet paper",  "towel",        "trash can",
           "tv",            "whiteboard",    "whiteboard eraser", "window"}),
  };
}

void check_vocabulary(const Vocabulary& v, const SynonymTable& synonyms) {
  if (v.dataset_id.empty()) fail("vocabulary: dataset_id must be non-empty");
  if (v.classes.empty()) fail("vocabulary '" + v.dataset_id + "': class list is empty");
  std::vector<std::string> seen;
  for (const auto& c : v.classes) {
    const std::string norm = normalize_label(c, synonyms);
    if (std::find(seen.begin(), seen.end(), norm) != seen.end()) {
      fail("vocabulary '" + v.dataset_id + "': duplicate class '" + norm + "'");
    }
    seen.push_back(norm);
  }
}

}  // namespace

Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("vocabulary: cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail("vocabulary: '" + path + "' is not valid JSON: " + e.what());
  }
  Vocabulary v;
  v.dataset_id = j.at("dataset_id").get<std::string>();
  for (const auto& c : j.at("classes")) v.classes.push_back(c.get<std::string>());
  check_vocabulary(v, SynonymTable());
  return v;
}

const std::vector<Vocabulary>& builtin_vocabularies() {
  static const std::vector<Vocabulary> vocabs = make_builtins();
  return vocabs;
}

const Vocabulary* find_builtin_vocabulary(const std::string& dataset_id) {
  for (const auto& v : builtin_vocabularies()) {
    if (v.dataset_id == dataset_id) return &v;
  }
  return nullptr;
}

SynonymTable SynonymTable::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("synonyms: cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail("synonyms: '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_array()) fail("synonyms: '" + path + "' must be a JSON array");
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& entry : j) {
    pairs.emplace_back(entry.at("from").get<std::string>(),
                       entry.at("to").get<std::string>());
  }
  return from_pairs(pairs);
}

SynonymTable SynonymTable::from_pairs(
    const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::map<std::string, std::string> direct;
  for (const auto& [from_raw, to_raw] : pairs) {
    const std::string from = normalize_text(from_raw);
    const std::string to = normalize_text(to_raw);
    if (from.empty() || to.empty()) fail("synonyms: empty label in entry");
    if (from == to) fail("synonyms: '" + from + "' maps to itself");
    auto [it, inserted] = direct.emplace(from, to);
    if (!inserted && it->second != to) {
      fail("synonyms: '" + from + "' maps to both '" + it->second + "' and '" + to + "'");
    }
  }

  SynonymTable table;
  for (const auto& [from, to] : direct) {
    std::string cur = to;
    std::vector<std::string> trail{from};
    while (true) {
      if (std::find(trail.begin(), trail.end(), cur) != trail.end()) {
        std::ostringstream os;
        os << "synonyms: cycle detected:";
        for (const auto& t : trail) os << " " << t << " ->";
        os << " " << cur;
        fail(os.str());
      }
      const auto next = direct.find(cur);
      if (next == direct.end()) break;
      trail.push_back(cur);
      cur = next->second;
    }
    table.resolved_[from] = cur;
  }
  return table;
}

const std::string& SynonymTable::resolve(const std::string& label) const {
  const auto it = resolved_.find(label);
  return it == resolved_.end() ? label : it->second;
}

std::string normalize_label(const std::string& raw, const SynonymTable& synonyms) {
  const std::string norm = normalize_text(raw);
  if (norm.empty()) fail("label: '" + raw + "' is empty after normalization");
  return synonyms.resolve(norm);
}

const char* label_mode_name(LabelMode mode) {
  switch (mode) {
    case LabelMode::kSeparate: return "separate";
    case LabelMode::kPartitioned: return "partitioned";
    case LabelMode::kUnified: return "unified";
  }
  fail("label mode: invalid value");
}

LabelMode parse_label_mode(const std::string& name) {
  if (name == "separate") return LabelMode::kSeparate;
  if (name == "partitioned") return LabelMode::kPartitioned;
  if (name == "unified") return LabelMode::kUnified;
  fail("label mode must be separate, partitioned, or unified, got '" + name + "'");
}

const LabelSpace::DatasetEntry& LabelSpace::dataset(const std::string& dataset_id) const {
  for (const auto& d : datasets) {
    if (d.dataset_id == dataset_id) return d;
  }
  fail("label space: dataset '" + dataset_id + "' is not part of this space");
}

int LabelSpace::project(const std::string& dataset_id, const std::string& raw_label,
                        const SynonymTable& synonyms) const {
  const DatasetEntry& entry = dataset(dataset_id);
  const std::string norm = normalize_label(raw_label, synonyms);
  for (std::size_t i = 0; i < entry.local_classes.size(); ++i) {
    if (entry.local_classes[i] == norm) return entry.to_global[i];
  }
  fail("label space: label '" + norm + "' is not in the vocabulary of dataset '" +
       dataset_id + "'");
}

LabelSpace build_label_space(const std::vector<Vocabulary>& vocabularies,
                             LabelMode mode, const SynonymTable& synonyms) {
  if (vocabularies.empty()) fail("label space: need at least one vocabulary");
  if (mode == LabelMode::kSeparate && vocabularies.size() != 1) {
    fail("label space: separate mode takes exactly one dataset, got " +
         std::to_string(vocabularies.size()));
  }
  for (std::size_t i = 0; i < vocabularies.size(); ++i) {
    check_vocabulary(vocabularies[i], synonyms);
    for (std::size_t j = i + 1; j < vocabularies.size(); ++j) {
      if (vocabularies[i].dataset_id == vocabularies[j].dataset_id) {
        fail("label space: dataset '" + vocabularies[i].dataset_id + "' appears twice");
      }
    }
  }

  LabelSpace space;
  space.mode = mode;
  std::size_t local_total = 0;
  for (const auto& vocab : vocabularies) {
    LabelSpace::DatasetEntry entry;
    entry.dataset_id = vocab.dataset_id;
    for (const auto& raw : vocab.classes) {
      const std::string norm = normalize_label(raw, synonyms);
      entry.local_classes.push_back(norm);
      const std::string global_name =
          mode == LabelMode::kPartitioned ? vocab.dataset_id + "/" + norm : norm;
      const auto it = std::find(space.classes.begin(), space.classes.end(), global_name);
      if (it == space.classes.end()) {
        entry.to_global.push_back(static_cast<int>(space.classes.size()));
        space.classes.push_back(global_name);
      } else {
        entry.to_global.push_back(static_cast<int>(it - space.classes.begin()));
      }
      ++local_total;
    }
    space.datasets.push_back(std::move(entry));
  }

  if (mode == LabelMode::kUnified && vocabularies.size() > 1) {
    std::ostringstream os;
    os << "unified space merged " << local_total << " dataset-local classes into "
       << space.classes.size()
       << " by exact string identity; near-duplicate names (e.g. 'tv' vs 'tv monitor')"
       << " stay distinct unless a synonym table maps them"
       << (synonyms.empty() ? " (no synonym table was given)" : "");
    space.note = os.str();
  }
  return space;
}

}  // namespace unidet
