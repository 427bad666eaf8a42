#include "halomil/semantics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_map>

namespace halomil {

Relation relation_from_symbol(const std::string& symbol) {
  if (symbol == "E") return Relation::Entailment;
  if (symbol == "C") return Relation::Contradiction;
  if (symbol == "N") return Relation::Neutral;
  throw PreconditionError("malformed relation symbol '" + symbol + "' (expected E, C or N)");
}

char relation_symbol(Relation r) {
  switch (r) {
    case Relation::Entailment: return 'E';
    case Relation::Contradiction: return 'C';
    case Relation::Neutral: return 'N';
  }
  return '?';
}

void RelationRecord::validate() const {
  const std::string who = "relation record '" + question_id + "'";
  if (samples.empty()) throw PreconditionError(who + ": needs at least one sample");
  if (relations.size() != samples.size()) {
    throw PreconditionError(who + ": relation matrix must be K x K");
  }
  for (const auto& row : relations) {
    if (row.size() != samples.size()) {
      throw PreconditionError(who + ": relation matrix must be K x K");
    }
  }
  for (const auto& s : samples) {
    if (!std::isfinite(s.log_likelihood)) {
      throw PreconditionError(who + ": non-finite log-likelihood");
    }
  }
}

std::size_t Clustering::num_clusters() const {
  if (assignment.empty()) return 0;
  return *std::max_element(assignment.begin(), assignment.end()) + 1;
}

bool semantically_equivalent(Relation ij, Relation ji) {
  using enum Relation;
  return (ij == Entailment && ji == Entailment) || (ij == Entailment && ji == Neutral) ||
         (ij == Neutral && ji == Entailment);
}

namespace {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  // Smaller root wins so every root is its component's smallest index.
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace

Clustering cluster_responses(const RelationRecord& record) {
  record.validate();
  const std::size_t k = record.size();
  DisjointSets sets(k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      if (semantically_equivalent(record.relations[i][j], record.relations[j][i])) {
        sets.unite(i, j);
      }
    }
  }
  Clustering out;
  out.assignment.resize(k);
  std::vector<std::size_t> id_of_root(k, k);
  std::size_t next = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t root = sets.find(i);
    if (id_of_root[root] == k) id_of_root[root] = next++;
    out.assignment[i] = id_of_root[root];
  }
  return out;
}

Clustering cluster_probability(const RelationRecord& record, Clustering clustering) {
  record.validate();
  if (clustering.assignment.size() != record.size()) {
    throw PreconditionError("clustering does not cover every sample");
  }
  double shift = -std::numeric_limits<double>::infinity();
  for (const auto& s : record.samples) shift = std::max(shift, s.log_likelihood);

  std::vector<double> mass(clustering.num_clusters(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < record.size(); ++i) {
    const double w = std::exp(record.samples[i].log_likelihood - shift);
    mass[clustering.assignment[i]] += w;
    total += w;
  }
  for (auto& m : mass) m = std::min(1.0, m / total);
  clustering.cluster_probs = std::move(mass);
  return clustering;
}

double assign_semantic_probability(const RelationRecord& record, const Clustering& clustering,
                                   std::size_t target_index) {
  if (target_index >= record.size()) {
    throw PreconditionError("sample index " + std::to_string(target_index) +
                            " out of range for K=" + std::to_string(record.size()));
  }
  if (clustering.cluster_probs.empty()) {
    return assign_semantic_probability(record, cluster_probability(record, clustering),
                                       target_index);
  }
  return clustering.cluster_probs.at(clustering.assignment.at(target_index));
}

RelationRecord relation_record_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw PreconditionError("relation record must be a JSON object");
  RelationRecord rec;
  try {
    rec.question_id = j.at("question_id").get<std::string>();
    for (const auto& s : j.at("samples")) {
      rec.samples.push_back({s.at("bag_id").get<std::uint64_t>(),
                             s.at("log_likelihood").get<double>()});
    }
    for (const auto& row : j.at("relations")) {
      auto& out_row = rec.relations.emplace_back();
      for (const auto& sym : row) out_row.push_back(relation_from_symbol(sym.get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw PreconditionError(std::string("malformed relation record: ") + e.what());
  }
  rec.validate();
  return rec;
}

nlohmann::json relation_record_to_json(const RelationRecord& record) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : record.samples) {
    samples.push_back({{"bag_id", s.bag_id}, {"log_likelihood", s.log_likelihood}});
  }
  nlohmann::json relations = nlohmann::json::array();
  for (const auto& row : record.relations) {
    nlohmann::json out_row = nlohmann::json::array();
    for (auto r : row) out_row.push_back(std::string(1, relation_symbol(r)));
    relations.push_back(std::move(out_row));
  }
  return {{"question_id", record.question_id}, {"samples", samples}, {"relations", relations}};
}

std::vector<RelationRecord> read_relation_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw PreconditionError(path.string() + ": " + e.what());
  }
  if (!doc.is_array()) throw PreconditionError(path.string() + ": expected a JSON array");
  std::vector<RelationRecord> records;
  records.reserve(doc.size());
  for (const auto& j : doc) records.push_back(relation_record_from_json(j));
  return records;
}

void write_relation_file(const std::vector<RelationRecord>& records,
                         const std::filesystem::path& path) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& r : records) doc.push_back(relation_record_to_json(r));
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << doc.dump(1) << '\n';
}

ClusterApplyResult apply_semantic_probabilities(DatasetStore& store,
                                                const std::vector<RelationRecord>& records) {
  std::unordered_map<std::uint64_t, std::size_t> index_of;
  for (std::size_t i = 0; i < store.size(); ++i) index_of.emplace(store[i].id, i);

  ClusterApplyResult result;
  for (const auto& rec : records) {
    const auto clustering = cluster_probability(rec, cluster_responses(rec));
    for (std::size_t s = 0; s < rec.size(); ++s) {
      const auto it = index_of.find(rec.samples[s].bag_id);
      if (it == index_of.end()) {
        ++result.samples_without_bag;
        continue;
      }
      store.set_semantic_probability(it->second,
                                     assign_semantic_probability(rec, clustering, s));
      ++result.bags_updated;
    }
  }
  return result;
}

}  // namespace halomil
