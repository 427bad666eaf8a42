#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halomil/bagstore.hpp"
#include "halomil/detectors.hpp"

namespace halomil {

/// Sparse-MIL generator settings. Bounds apply to informative tokens under the
/// planted parameters: activation u in [u_lo, u_hi] and ||dz/dW_j|| = ||h|| in [g_lo, g_hi].
struct SparseSpec {
  std::size_t T = 10;
  std::size_t s = 1;
  std::size_t d = 64;
  std::size_t D = 16;
  std::size_t n_bags = 256;
  double u_lo = 0.5, u_hi = 1.0;
  double g_lo = 0.5, g_hi = 1.0;
  double positive_fraction = 0.5;
  double noise = 0.3;       // norm scale of the component orthogonal to the planted span
  double distractor = 0.25; // largest negative planted coordinate of uninformative tokens
  std::uint64_t seed = 0;
  bool with_p_sem = false;

  /// Separation kept between uninformative pre-activations and zero.
  double delta() const { return 0.1 * u_lo; }
  void validate() const;
};

nlohmann::json to_json(const SparseSpec& spec);
SparseSpec sparse_spec_from_json(const nlohmann::json& j);

/// Informative token indices S_{B,j}, one list per planted channel (empty when j is not in J_B).
struct BagCertificate {
  std::uint64_t bag_id = 0;
  std::vector<std::vector<std::size_t>> informative;
};

struct SparseDataset {
  DatasetStore store;
  std::vector<BagCertificate> certificates;
};

/// Planted max-pool parameters: orthonormal W columns (needs D <= d), w = 1, b = 0.
MaxPoolParams planted_params(const SparseSpec& spec);

/// Throws PreconditionError when the bounds cannot be met by any token.
SparseDataset generate_sparse_bags(const SparseSpec& spec, const MaxPoolParams& planted);

struct AssumptionViolation {
  std::uint64_t bag_id = 0;
  std::size_t token = 0;
  std::size_t channel = 0;
  std::string kind;  // sparsity, activation, gradient, count, certificate
  double value = 0.0;
};

struct AssumptionCheck {
  bool ok = true;
  std::vector<AssumptionViolation> violations;
};

AssumptionCheck verify_assumption(const DatasetStore& store,
                                  const std::vector<BagCertificate>& certificates,
                                  const MaxPoolParams& planted, const SparseSpec& spec);

nlohmann::json certificate_json(const SparseSpec& spec, const std::vector<BagCertificate>& certs,
                                std::uint64_t planted_hash);
std::vector<BagCertificate> certificates_from_json(const nlohmann::json& j);

/// Bags whose max-pooled planted feature relu(e'h) is >= margin for positives and
/// 0 for negatives. Splits are stratified 60/20/20.
DatasetStore generate_separable_bags(std::size_t n, std::size_t d, double margin,
                                     std::uint64_t seed);

/// FNV-1a 64-bit digest.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

}  // namespace halomil
