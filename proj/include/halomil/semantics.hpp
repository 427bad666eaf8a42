#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halomil/bagstore.hpp"

namespace halomil {

/// Pairwise NLI verdict between two sampled responses.
enum class Relation : std::uint8_t { Entailment, Contradiction, Neutral };

Relation relation_from_symbol(const std::string& symbol);
char relation_symbol(Relation r);

struct SampledResponse {
  std::uint64_t bag_id = 0;
  double log_likelihood = 0.0;  // natural log of P(response | question)
};

/// K sampled responses for one question plus the K x K relation matrix.
/// relations[i][j] is R(A_i, A_j); the diagonal is ignored.
struct RelationRecord {
  std::string question_id;
  std::vector<SampledResponse> samples;
  std::vector<std::vector<Relation>> relations;

  std::size_t size() const { return samples.size(); }
  void validate() const;
};

/// Partition of the K samples into semantic clusters. Cluster ids are
/// canonical: numbered in order of each cluster's smallest member index.
struct Clustering {
  std::vector<std::size_t> assignment;
  std::vector<double> cluster_probs;  // empty until cluster_probability runs

  std::size_t num_clusters() const;
};

/// True when (R_ij, R_ji) is (E,E), (E,N) or (N,E).
bool semantically_equivalent(Relation ij, Relation ji);

/// Connected components of the pairwise equivalence graph.
Clustering cluster_responses(const RelationRecord& record);

/// Fills cluster_probs with normalized likelihood mass per cluster,
/// computed from log-likelihoods with a max shift.
Clustering cluster_probability(const RelationRecord& record, Clustering clustering);

/// P_sem of sample `target_index`: probability of the cluster containing it.
double assign_semantic_probability(const RelationRecord& record, const Clustering& clustering,
                                   std::size_t target_index);

RelationRecord relation_record_from_json(const nlohmann::json& j);
nlohmann::json relation_record_to_json(const RelationRecord& record);

std::vector<RelationRecord> read_relation_file(const std::filesystem::path& path);
void write_relation_file(const std::vector<RelationRecord>& records,
                         const std::filesystem::path& path);

struct ClusterApplyResult {
  std::size_t bags_updated = 0;
  std::size_t samples_without_bag = 0;
};

/// Attaches P_sem to every bag whose id appears as a sample in `records`.
ClusterApplyResult apply_semantic_probabilities(DatasetStore& store,
                                                const std::vector<RelationRecord>& records);

}  // namespace halomil
