#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "halomil/bagstore.hpp"
#include "halomil/detectors.hpp"

namespace halomil {

/// log(1 + exp(-y z)) in overflow-free form.
double logistic_loss(double z, int y);

/// Gradients laid out exactly like the detector's parameters. Non-trainable
/// slots (BN running statistics) stay zero.
struct GradientSet {
  Detector values;
  double logit_sq_norm = 0.0;  // ||grad_theta z||^2 over trainable parameters
};

struct LogitGradient {
  double z = 0.0;
  GradientSet grads;  // grad_theta z
};

struct BagGradient {
  double loss = 0.0;
  double z = 0.0;
  GradientSet grads;  // grad_theta L; logit_sq_norm still refers to z
};

/// grad_theta z for one bag. HaMI applies its semantic scaling and uses `batch`
/// statistics as constants when given, running statistics otherwise.
LogitGradient grad_logit(const Detector& detector, const Bag& bag,
                         const BatchStats* batch = nullptr);

/// Logistic loss and its gradient; requires a known label.
BagGradient grad_bag(const Detector& detector, const Bag& bag, const BatchStats* batch = nullptr);

/// Sum of squares over the named trainable blocks (all of them when `names` is empty).
double squared_norm(const Detector& grads, const std::vector<std::string>& names = {});

enum class OptimizerKind { Sgd, Adam };

const char* to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  Architecture architecture = Architecture::Hami;
  std::size_t hidden_dim = 256;
  double k_frac = 0.1;
  double lambda = 0.0;
  std::size_t threads = 1;  // 0 = all cores

  void validate() const;
};

/// Per-architecture optimizer defaults: HaMI Adam 1e-3 / 5e-4, embedding
/// models Adam 2e-4 / 5e-3.
TrainConfig default_train_config(Architecture arch);

/// Applies `key=value` lines (blank lines and '#' comments ignored) on top of `base`.
TrainConfig parse_train_config(const std::string& text, TrainConfig base);
TrainConfig read_train_config(const std::filesystem::path& path, TrainConfig base);

/// Sets one field by its config key; throws PreconditionError for unknown keys or bad values.
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);

nlohmann::json to_json(const TrainConfig& config);

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Sgd;
  std::uint64_t step = 0;
  Detector first_moment;
  Detector second_moment;
};

OptimizerState make_optimizer_state(OptimizerKind kind, const Detector& like);

/// SGD: theta -= lr (g + wd theta). Adam: bias-corrected moments, then decoupled decay.
void optimizer_step(Detector& params, const GradientSet& grads, OptimizerState& state,
                    const TrainConfig& config);

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;
inline constexpr double kBnMomentum = 0.1;

/// Mean and (population) standard deviation of HaMI pre-activations over all
/// tokens of `bags`, each scaled by its own semantic factor.
BatchStats hami_batch_stats(const HamiParams& params, const std::vector<const Bag*>& bags);

/// running = (1 - momentum) running + momentum batch.
void update_running_stats(HamiParams& params, const BatchStats& batch,
                          double momentum = kBnMomentum);

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_auroc = 0.0;
  double margin = 0.0;  // mean validation margin y z, logit units
  double seconds = 0.0;
};

struct TrainResult {
  Detector best;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
};

/// Mini-batch training on the train split with best-checkpoint selection on
/// validation AUROC (earliest epoch wins ties).
TrainResult train(const DatasetStore& store, const TrainConfig& config);

/// Same, starting from the given parameters instead of a fresh initialization.
TrainResult train_from(const DatasetStore& store, const TrainConfig& config, Detector initial);

std::string epoch_log_csv(const std::vector<EpochLog>& log, bool include_seconds = true);

}  // namespace halomil
