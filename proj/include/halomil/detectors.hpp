#pragma once

#include <cstddef>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "halomil/bagstore.hpp"
#include "halomil/common.hpp"

namespace halomil {

enum class Architecture { MaxPool, MeanPool, Attention, GatedAttention, Hami, PoolFirst };

const char* to_string(Architecture arch);
Architecture architecture_from_string(const std::string& tag);

/// Feature extraction + pooling + linear classifier, shared by max pooling,
/// mean pooling and the pool-first baseline.
struct MaxPoolParams {
  Matrix W;  // d x D
  Vector w;  // D
  double b = 0.0;

  std::size_t input_dim() const { return static_cast<std::size_t>(W.rows()); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(W.cols()); }
  void validate() const;
};

struct BatchNormParams {
  Vector gamma;
  Vector beta;
  Vector running_mean;
  Vector running_std;
  double eps = 1e-5;  // floor on the standard deviation
};

/// Per-channel batch statistics used in place of the running ones while training.
struct BatchStats {
  Vector mean;
  Vector std;
};

/// Instance-level MLP, TopK aggregation and semantic-probability scaling.
struct HamiParams {
  Matrix W;  // H x d
  Vector b1;
  BatchNormParams bn;
  Vector w;  // H
  double b2 = 0.0;
  double k_frac = 0.1;
  double lambda = 0.0;

  std::size_t input_dim() const { return static_cast<std::size_t>(W.cols()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(W.rows()); }
  void validate() const;
};

/// Attention MIL pooling over raw hidden states with a linear head.
/// U is only used (and must be L x d) for gated attention.
struct AttentionParams {
  Matrix V;  // L x d
  Matrix U;  // L x d, or empty
  Vector w_att;
  Vector head_w;  // d
  double head_b = 0.0;

  std::size_t input_dim() const { return static_cast<std::size_t>(V.cols()); }
  std::size_t attention_dim() const { return static_cast<std::size_t>(V.rows()); }
  void validate(bool gated) const;
};

using DetectorParams = std::variant<MaxPoolParams, HamiParams, AttentionParams>;

struct Detector {
  Architecture arch = Architecture::MaxPool;
  DetectorParams params;

  std::size_t input_dim() const;
  void validate() const;
};

struct BagScore {
  double logit = 0.0;
  double probability = 0.5;
  std::vector<std::size_t> argmax;  // per channel, max pooling only
  std::vector<std::size_t> topk;    // TopK token indices, HaMI only
};

double sigmoid(double z);

BagScore forward_maxpool(const MaxPoolParams& params, const Bag& bag);
BagScore forward_meanpool(const MaxPoolParams& params, const Bag& bag);
BagScore forward_base_poolfirst(const MaxPoolParams& params, const Bag& bag);
BagScore forward_attention(const AttentionParams& params, const Bag& bag, bool gated);

/// Attention weights a_i (softmax over tokens).
Vector attention_weights(const AttentionParams& params, const Matrix& tokens, bool gated);

/// Instance logit z = w' ReLU(BN(W h + b1)) + b2. Uses running statistics
/// unless `batch` is given.
double hami_instance_logit(const HamiParams& params, const Eigen::Ref<const Vector>& h,
                           const BatchStats* batch = nullptr);

/// TopK size for a bag of `length` tokens: max(1, ceil(k_frac * length)).
std::size_t topk_count(double k_frac, std::size_t length);

/// Indices of the k largest values, ties broken by lowest index, ordered by rank.
std::vector<std::size_t> topk_indices(std::span<const double> values, std::size_t k);

/// Mean of the TopK instance logits with tokens scaled by (1 + scale).
BagScore hami_bag_score(const HamiParams& params, const Bag& bag, double scale = 0.0,
                        const BatchStats* batch = nullptr);

/// Copy of `bag` with every token multiplied by (1 + lambda * p_sem).
Bag apply_sp_scaling(const Bag& bag, double lambda);

/// HaMI input scale p = lambda * p_sem for this bag (0 when lambda == 0).
double hami_scale_for(const HamiParams& params, const Bag& bag);

/// Dispatches on architecture; HaMI applies its semantic scaling.
BagScore score_bag(const Detector& detector, const Bag& bag);

// ---- construction and parameter access --------------------------------------

struct DetectorShape {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 256;  // D, H or L depending on the architecture
  double k_frac = 0.1;
  double lambda = 0.0;
};

/// Uniform(+-sqrt(6 / fan_in)) weights, zero biases, identity BN.
Detector init_detector(Architecture arch, const DetectorShape& shape, std::mt19937_64& rng);

/// All-zero detector with the same shapes as `like` (used for gradients / optimizer state).
Detector zeros_like(const Detector& like);

struct ParamBlock {
  std::string name;
  std::span<double> values;
  std::vector<std::size_t> shape;
};

struct ConstParamBlock {
  std::string name;
  std::span<const double> values;
  std::vector<std::size_t> shape;
};

/// Parameters updated by gradient descent, in a fixed order.
std::vector<ParamBlock> trainable_blocks(Detector& detector);
std::vector<ConstParamBlock> trainable_blocks(const Detector& detector);

/// Trainable parameters plus BN running statistics; everything a checkpoint stores.
std::vector<ParamBlock> stored_blocks(Detector& detector);
std::vector<ConstParamBlock> stored_blocks(const Detector& detector);

// ---- checkpoint file ---------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const Detector& detector,
                                            const nlohmann::json& extra = {});
Detector decode_checkpoint(std::span<const std::uint8_t> bytes, nlohmann::json* header = nullptr);

void write_checkpoint(const Detector& detector, const std::filesystem::path& path,
                      const nlohmann::json& extra = {});
Detector read_checkpoint(const std::filesystem::path& path, nlohmann::json* header = nullptr);

}  // namespace halomil
