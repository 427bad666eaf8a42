#include "halomil/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "halomil/parallel.hpp"
#include "halomil/training.hpp"

namespace halomil {

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw PreconditionError("auroc: scores and labels differ in length");
  }
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 1 && labels[i] != -1) throw PreconditionError("auroc: labels must be +1 or -1");
    if (std::isnan(scores[i])) throw PreconditionError("auroc: NaN score");
    if (labels[i] == 1) ++n_pos;
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw PreconditionError("auroc: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  for (std::size_t lo = 0; lo < order.size();) {
    std::size_t hi = lo;
    while (hi + 1 < order.size() && scores[order[hi + 1]] == scores[order[lo]]) ++hi;
    // Ranks lo+1 .. hi+1 share their average.
    const double avg = 0.5 * static_cast<double>(lo + hi + 2);
    for (std::size_t i = lo; i <= hi; ++i) {
      if (labels[order[i]] == 1) rank_sum_pos += avg;
    }
    lo = hi + 1;
  }
  const double np = static_cast<double>(n_pos);
  const double u = rank_sum_pos - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

MarginReport bag_margins(const Detector& detector, const DatasetStore& store,
                         std::optional<Split> split, std::size_t threads) {
  std::vector<std::size_t> idx;
  MarginReport report;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (split && store[i].split != *split) continue;
    if (!store[i].labeled()) {
      ++report.skipped_unknown;
      continue;
    }
    idx.push_back(i);
  }
  if (idx.empty()) throw PreconditionError("no labeled bags to measure margins on");
  report.margins.resize(idx.size());
  parallel_for(idx.size(), threads, [&](std::size_t i) {
    const auto& bag = store[idx[i]];
    report.margins[i] = label_sign(bag.label) * score_bag(detector, bag).logit;
  });
  double sum = 0.0, sum_pos = 0.0, sum_neg = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    report.bag_ids.push_back(store[idx[i]].id);
    sum += report.margins[i];
    if (store[idx[i]].label == Label::Hallucinated) {
      sum_pos += report.margins[i];
      ++n_pos;
    } else {
      sum_neg += report.margins[i];
      ++n_neg;
    }
  }
  report.mean = sum / static_cast<double>(idx.size());
  if (n_pos) report.mean_positive = sum_pos / static_cast<double>(n_pos);
  if (n_neg) report.mean_negative = sum_neg / static_cast<double>(n_neg);
  return report;
}

double hami_margin_at(const HamiParams& params, const DatasetStore& store, double lambda) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& bag : store.bags()) {
    if (!bag.labeled()) continue;
    double p = 0.0;
    if (lambda != 0.0) {
      if (!bag.p_sem) {
        throw PreconditionError("bag " + std::to_string(bag.id) + " is missing p_sem");
      }
      p = lambda * *bag.p_sem;
    }
    sum += label_sign(bag.label) * hami_bag_score(params, bag, p).logit;
    ++n;
  }
  if (n == 0) throw PreconditionError("no labeled bags to measure margins on");
  return sum / static_cast<double>(n);
}

namespace {

struct HamiPieces {
  Matrix x;       // T x H, W h without bias or scaling
  Matrix normed;  // T x H at the requested p
  Vector logits;
  Vector coef;    // gamma / sigma
};

HamiPieces hami_pieces(const HamiParams& params, const Bag& bag, double p) {
  if (bag.dim() != params.input_dim()) {
    throw DimensionError("bag " + std::to_string(bag.id) + " dimension does not match HaMI input");
  }
  HamiPieces out;
  out.x = bag.tokens * params.W.transpose();
  const Vector sd = params.bn.running_std.cwiseMax(params.bn.eps);
  out.coef = params.bn.gamma.cwiseQuotient(sd);
  Matrix pre = (1.0 + p) * out.x;
  pre.rowwise() += (params.b1 - params.bn.running_mean).transpose();
  out.normed = pre.array().rowwise() * out.coef.transpose().array();
  out.normed.rowwise() += params.bn.beta.transpose();
  out.logits = (out.normed.cwiseMax(0.0) * params.w).array() + params.b2;
  return out;
}

double slope_of_token(const HamiParams& params, const HamiPieces& pc, Eigen::Index i) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < params.w.size(); ++j) {
    if (pc.normed(i, j) > 0.0) s += params.w[j] * pc.coef[j] * pc.x(i, j);
  }
  return s;
}

}  // namespace

double sensitivity_C(const HamiParams& params, const Eigen::Ref<const Vector>& h) {
  Bag single;
  single.tokens = h.transpose();
  const auto pc = hami_pieces(params, single, 0.0);
  return -slope_of_token(params, pc, 0);
}

double bag_sensitivity(const HamiParams& params, const Bag& bag) {
  const auto pc = hami_pieces(params, bag, 0.0);
  const auto k = topk_count(params.k_frac, bag.length());
  const auto top = topk_indices(std::span<const double>(pc.logits.data(), pc.logits.size()), k);
  double sum = 0.0;
  for (auto i : top) sum -= slope_of_token(params, pc, static_cast<Eigen::Index>(i));
  return sum / static_cast<double>(k);
}

double hami_score_at(const HamiParams& params, const Bag& bag, double p) {
  return hami_bag_score(params, bag, p).logit;
}

double hami_score_slope(const HamiParams& params, const Bag& bag, double p) {
  const auto pc = hami_pieces(params, bag, p);
  const auto k = topk_count(params.k_frac, bag.length());
  const auto top = topk_indices(std::span<const double>(pc.logits.data(), pc.logits.size()), k);
  double sum = 0.0;
  for (auto i : top) sum += slope_of_token(params, pc, static_cast<Eigen::Index>(i));
  return sum / static_cast<double>(k);
}

double path_integrated_sensitivity(const HamiParams& params, const Bag& bag, double p_target,
                                   std::size_t steps) {
  if (steps == 0) throw PreconditionError("path integration needs at least one step");
  if (!(p_target > 0.0) || !std::isfinite(p_target)) {
    throw PreconditionError("path integration needs p_target > 0");
  }
  const double dp = p_target / static_cast<double>(steps);
  double integral = 0.0;
  for (std::size_t k = 0; k < steps; ++k) {
    integral += hami_score_slope(params, bag, (static_cast<double>(k) + 0.5) * dp) * dp;
  }
  return -integral / p_target;
}

bool region_invariant(const HamiParams& params, const Bag& bag, double p) {
  const auto a = hami_pieces(params, bag, 0.0);
  const auto b = hami_pieces(params, bag, p);
  if (((a.normed.array() > 0.0) != (b.normed.array() > 0.0)).any()) return false;
  const auto k = topk_count(params.k_frac, bag.length());
  auto ta = topk_indices(std::span<const double>(a.logits.data(), a.logits.size()), k);
  auto tb = topk_indices(std::span<const double>(b.logits.data(), b.logits.size()), k);
  std::sort(ta.begin(), ta.end());
  std::sort(tb.begin(), tb.end());
  return ta == tb;
}

namespace {

void check_sensitivity_inputs(const DatasetStore& store, std::span<const double> cbar) {
  if (cbar.size() != store.size()) {
    throw PreconditionError("need one sensitivity value per bag in the store");
  }
  std::size_t n_pos = 0, n_neg = 0;
  for (const auto& bag : store.bags()) {
    if (!bag.labeled()) continue;
    if (!bag.p_sem) throw PreconditionError("bag " + std::to_string(bag.id) + " is missing p_sem");
    (bag.label == Label::Hallucinated ? n_pos : n_neg)++;
  }
  if (n_pos == 0 || n_neg == 0) {
    throw PreconditionError("sensitivity analysis needs both positive and negative bags");
  }
}

}  // namespace

SensitivityReport gamma_and_condition(const DatasetStore& store, std::span<const double> cbar) {
  check_sensitivity_inputs(store, cbar);
  SensitivityReport r;
  std::size_t n_positive_cbar = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& bag = store[i];
    if (!bag.labeled()) continue;
    r.cbar.push_back(cbar[i]);
    if (cbar[i] > 0.0) ++n_positive_cbar;
    auto& cm = bag.label == Label::Hallucinated ? r.pos : r.neg;
    (bag.label == Label::Hallucinated ? r.n_pos : r.n_neg)++;
    cm.p_sem += *bag.p_sem;
    cm.cbar += cbar[i];
    cm.product += *bag.p_sem * cbar[i];
  }
  for (auto [cm, n] : {std::pair{&r.pos, r.n_pos}, std::pair{&r.neg, r.n_neg}}) {
    cm->p_sem /= static_cast<double>(n);
    cm->cbar /= static_cast<double>(n);
    cm->product /= static_cast<double>(n);
  }
  if (r.pos.product == 0.0) {
    throw PreconditionError("E_pos[P * Cbar] is zero, so gamma is undefined");
  }
  r.gamma = r.neg.product / r.pos.product;
  r.inv_gamma = 1.0 / r.gamma;
  r.class_ratio = static_cast<double>(r.n_neg) / static_cast<double>(r.n_pos);
  r.condition_holds = r.class_ratio > r.inv_gamma;
  r.eq1_holds = r.pos.cbar > 0.0 && r.neg.cbar > 0.0;
  r.eq2_holds = r.neg.p_sem > r.pos.p_sem;
  r.eq3_holds = r.neg.cbar > r.pos.cbar;
  r.fraction_cbar_positive =
      static_cast<double>(n_positive_cbar) / static_cast<double>(r.cbar.size());
  return r;
}

double predicted_margin_delta(const DatasetStore& store, std::span<const double> cbar,
                              double lambda) {
  check_sensitivity_inputs(store, cbar);
  double neg = 0.0, pos = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& bag = store[i];
    if (!bag.labeled()) continue;
    ++n;
    (bag.label == Label::Hallucinated ? pos : neg) += *bag.p_sem * cbar[i];
  }
  return lambda / static_cast<double>(n) * (neg - pos);
}

std::optional<double> gradient_norm_ratio(const MaxPoolParams& params, const Bag& bag) {
  Detector max_det{Architecture::MaxPool, params};
  Detector mean_det{Architecture::MeanPool, params};
  const std::vector<std::string> theta{"W", "w"};
  const double num = squared_norm(grad_logit(max_det, bag).grads.values, theta);
  const double den = squared_norm(grad_logit(mean_det, bag).grads.values, theta);
  if (!(den > 0.0)) return std::nullopt;
  return num / den;
}

MarginStep margin_step(const Detector& detector, const Bag& bag, double eta) {
  if (!(eta > 0.0)) throw PreconditionError("margin step needs eta > 0");
  const auto g = grad_bag(detector, bag);
  const int y = label_sign(bag.label);
  MarginStep out;
  out.eta = eta;
  out.margin = y * g.z;
  Detector stepped = detector;
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::Sgd;
  cfg.learning_rate = eta;
  cfg.weight_decay = 0.0;
  auto state = make_optimizer_state(OptimizerKind::Sgd, stepped);
  optimizer_step(stepped, g.grads, state, cfg);
  out.delta_margin = y * score_bag(stepped, bag).logit - out.margin;
  out.first_order = eta * g.grads.logit_sq_norm / (1.0 + std::exp(out.margin));
  out.residual = std::abs(out.delta_margin - out.first_order);
  return out;
}

BoundReport rademacher_bounds(double R, double B1, double B2, double D, double d, double T,
                              double n) {
  for (auto [name, v] : {std::pair{"R", R}, {"B1", B1}, {"B2", B2}, {"D", D}, {"d", d}, {"T", T},
                         {"n", n}}) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw PreconditionError(std::string("rademacher bound input ") + name + " must be positive");
    }
  }
  BoundReport r;
  r.R = R;
  r.B1 = B1;
  r.B2 = B2;
  r.D = D;
  r.d = d;
  r.T = T;
  r.n = n;
  const double scale = 2.0 * R * B1 * B2 / std::sqrt(n);
  r.feat = std::sqrt(2.0) * scale * std::sqrt(D * T);
  r.base = scale * std::sqrt(D * d);
  return r;
}

double beta_step_bound(double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw PreconditionError("beta must be positive");
  return 2.0 / beta;
}

Throughput throughput_bench(const Detector& detector, const DatasetStore& store,
                            std::size_t repeats, std::size_t threads) {
  if (store.empty()) throw PreconditionError("throughput benchmark needs a non-empty store");
  if (repeats == 0) throw PreconditionError("throughput benchmark needs repeats >= 1");
  std::vector<double> sink(store.size());
  auto rate = [&](std::size_t th) {
    double best = 0.0;
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto start = std::chrono::steady_clock::now();
      parallel_for(store.size(), th, [&](std::size_t i) { sink[i] = score_bag(detector, store[i]).logit; });
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      best = std::max(best, static_cast<double>(store.size()) / std::max(secs, 1e-9));
    }
    return best;
  };
  Throughput t;
  t.samples = store.size();
  t.threads = resolve_threads(threads);
  t.single_thread = rate(1);
  t.multi_thread = t.threads == 1 ? t.single_thread : rate(t.threads);
  return t;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw PreconditionError("slope fit needs at least two matching points");
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw PreconditionError("log-log fit needs positive data");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw PreconditionError("log-log fit needs distinct x values");
  return sxy / sxx;
}

std::string histogram_csv(std::span<const double> values, std::size_t bins) {
  if (bins == 0) throw PreconditionError("histogram needs at least one bin");
  std::string out = "lo,hi,count\n";
  if (values.empty()) return out;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double lo = *mn;
  const double width = *mx > lo ? (*mx - lo) / static_cast<double>(bins) : 1.0;
  std::vector<std::size_t> counts(bins, 0);
  for (double v : values) {
    auto b = static_cast<std::size_t>((v - lo) / width);
    counts[std::min(b, bins - 1)]++;
  }
  char buf[128];
  for (std::size_t b = 0; b < bins; ++b) {
    const int n = std::snprintf(buf, sizeof buf, "%.17g,%.17g,%zu\n", lo + width * b,
                                lo + width * (b + 1), counts[b]);
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

}  // namespace halomil
