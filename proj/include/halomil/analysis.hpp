#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "halomil/bagstore.hpp"
#include "halomil/detectors.hpp"

namespace halomil {

// ---- ranking -------------------------------------------------------------------

/// Mann-Whitney AUROC with average ranks for ties. labels are +1 / -1.
double auroc(std::span<const double> scores, std::span<const int> labels);

// ---- margins -------------------------------------------------------------------

struct MarginReport {
  std::vector<std::uint64_t> bag_ids;
  std::vector<double> margins;  // y * z in logit space
  double mean = 0.0;
  std::optional<double> mean_positive;
  std::optional<double> mean_negative;
  std::size_t skipped_unknown = 0;
};

/// Margins over every labeled bag (optionally one split). HaMI uses its TopK score
/// with its own semantic scaling.
MarginReport bag_margins(const Detector& detector, const DatasetStore& store,
                         std::optional<Split> split = std::nullopt, std::size_t threads = 1);

/// Margin mean of HaMI scores where every bag is scaled by (1 + lambda * p_sem),
/// regardless of the detector's own lambda.
double hami_margin_at(const HamiParams& params, const DatasetStore& store, double lambda);

// ---- sensitivity ---------------------------------------------------------------

/// C(x) = -sum_{j active} w_j gamma_j x_j / sigma_j with x = W h and the active set
/// taken at p = 0 (running BN statistics).
double sensitivity_C(const HamiParams& params, const Eigen::Ref<const Vector>& h);

/// Mean of C over the TopK set chosen at p = 0.
double bag_sensitivity(const HamiParams& params, const Bag& bag);

/// Z(p): TopK mean of instance logits with tokens scaled by (1 + p).
double hami_score_at(const HamiParams& params, const Bag& bag, double p);

/// dZ/dp at p from the activation pattern and TopK set there (one-sided from the right
/// at kinks).
double hami_score_slope(const HamiParams& params, const Bag& bag, double p);

/// -(1/p) * integral_0^p Z'(q) dq by the midpoint rule with `steps` nodes.
double path_integrated_sensitivity(const HamiParams& params, const Bag& bag, double p_target,
                                   std::size_t steps = 1000);

/// True when every ReLU sign and the TopK set agree at p = 0 and at p. Pre-activations
/// and instance logits are affine in p inside a region, so agreement at both ends
/// means the whole segment [0, p] lies in one region.
bool region_invariant(const HamiParams& params, const Bag& bag, double p);

struct ClassMeans {
  double p_sem = 0.0;
  double cbar = 0.0;
  double product = 0.0;  // E[P * Cbar]
};

struct SensitivityReport {
  std::vector<double> cbar;  // per labeled bag, store order
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  ClassMeans pos;
  ClassMeans neg;
  double gamma = 0.0;
  double inv_gamma = 0.0;
  double class_ratio = 0.0;
  bool condition_holds = false;
  bool eq1_holds = false;  // E_pos[Cbar] > 0 and E_neg[Cbar] > 0
  bool eq2_holds = false;  // E_neg[P] > E_pos[P]
  bool eq3_holds = false;  // E_neg[Cbar] > E_pos[Cbar]
  double fraction_cbar_positive = 0.0;
};

/// `cbar[i]` belongs to store bag i; unlabeled bags are ignored.
SensitivityReport gamma_and_condition(const DatasetStore& store, std::span<const double> cbar);

/// (lambda / |S|) * (sum_neg P Cbar - sum_pos P Cbar).
double predicted_margin_delta(const DatasetStore& store, std::span<const double> cbar,
                              double lambda);

/// ||grad z_max||^2 / ||grad z_mean||^2 over (W, w); absent when the mean-pooling
/// gradient vanishes.
std::optional<double> gradient_norm_ratio(const MaxPoolParams& params, const Bag& bag);

/// One SGD step of size eta on a single bag (no weight decay), compared with the
/// first-order prediction eta ||grad z||^2 / (1 + exp(m)).
struct MarginStep {
  double eta = 0.0;
  double margin = 0.0;
  double delta_margin = 0.0;
  double first_order = 0.0;
  double residual = 0.0;  // |delta_margin - first_order|
};

MarginStep margin_step(const Detector& detector, const Bag& bag, double eta);

// ---- bounds --------------------------------------------------------------------

struct BoundReport {
  double R = 0.0, B1 = 0.0, B2 = 0.0;
  double D = 0.0, d = 0.0, T = 0.0, n = 0.0;
  double feat = 0.0;
  double base = 0.0;
  std::optional<double> beta;
  std::optional<double> eta_max;
};

BoundReport rademacher_bounds(double R, double B1, double B2, double D, double d, double T,
                              double n);

/// Largest step size 2 / beta that keeps the expected margin non-decreasing.
double beta_step_bound(double beta);

// ---- throughput ----------------------------------------------------------------

struct Throughput {
  double single_thread = 0.0;  // bags per second
  double multi_thread = 0.0;
  std::size_t threads = 1;
  std::size_t samples = 0;
};

/// Best-of-`repeats` wall-clock scoring rate over the bags of `store`.
Throughput throughput_bench(const Detector& detector, const DatasetStore& store,
                            std::size_t repeats, std::size_t threads);

// ---- fitting helpers -------------------------------------------------------------

/// Least-squares slope of log(y) against log(x).
double loglog_slope(std::span<const double> x, std::span<const double> y);

/// Histogram of values into `bins` equal-width buckets as CSV (lo,hi,count).
std::string histogram_csv(std::span<const double> values, std::size_t bins);

}  // namespace halomil
