#include "halomil/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace halomil {

const char* to_string(Architecture arch) {
  switch (arch) {
    case Architecture::MaxPool: return "maxpool";
    case Architecture::MeanPool: return "meanpool";
    case Architecture::Attention: return "attention";
    case Architecture::GatedAttention: return "gated_attention";
    case Architecture::Hami: return "hami";
    case Architecture::PoolFirst: return "poolfirst";
  }
  return "?";
}

Architecture architecture_from_string(const std::string& tag) {
  for (auto arch : {Architecture::MaxPool, Architecture::MeanPool, Architecture::Attention,
                    Architecture::GatedAttention, Architecture::Hami, Architecture::PoolFirst}) {
    if (tag == to_string(arch)) return arch;
  }
  throw PreconditionError("unknown architecture tag '" + tag +
                          "' (expected maxpool, meanpool, attention, gated_attention, hami or "
                          "poolfirst)");
}

void MaxPoolParams::validate() const {
  if (W.rows() < 1 || W.cols() < 1) throw DimensionError("feature extractor W must be d x D, D >= 1");
  if (w.size() != W.cols()) throw DimensionError("classifier w must have D entries");
  if (!W.allFinite() || !w.allFinite() || !std::isfinite(b)) {
    throw PreconditionError("non-finite max-pool parameter");
  }
}

void HamiParams::validate() const {
  const auto h = W.rows();
  if (h < 1 || W.cols() < 1) throw DimensionError("HaMI W must be H x d with H >= 1");
  if (b1.size() != h || w.size() != h || bn.gamma.size() != h || bn.beta.size() != h ||
      bn.running_mean.size() != h || bn.running_std.size() != h) {
    throw DimensionError("HaMI per-channel parameters must have H entries");
  }
  if (!(k_frac > 0.0 && k_frac <= 1.0)) throw PreconditionError("k_frac must lie in (0,1]");
  if (!(lambda >= 0.0)) throw PreconditionError("lambda must be >= 0");
  for (Eigen::Index j = 0; j < h; ++j) {
    if (!(std::max(bn.running_std[j], bn.eps) > 0.0)) {
      throw PreconditionError("BN standard deviation must be positive after the eps floor");
    }
  }
}

void AttentionParams::validate(bool gated) const {
  if (V.rows() < 1 || V.cols() < 1) throw DimensionError("attention V must be L x d with L >= 1");
  if (w_att.size() != V.rows()) throw DimensionError("attention vector must have L entries");
  if (head_w.size() != V.cols()) throw DimensionError("attention head must act on d entries");
  if (gated && (U.rows() != V.rows() || U.cols() != V.cols())) {
    throw DimensionError("gated attention needs U with the shape of V");
  }
  if (!V.allFinite() || !w_att.allFinite() || !head_w.allFinite() || !std::isfinite(head_b) ||
      (gated && !U.allFinite())) {
    throw PreconditionError("non-finite attention parameter");
  }
}

std::size_t Detector::input_dim() const {
  return std::visit([](const auto& p) { return p.input_dim(); }, params);
}

void Detector::validate() const {
  switch (arch) {
    case Architecture::MaxPool:
    case Architecture::MeanPool:
    case Architecture::PoolFirst: std::get<MaxPoolParams>(params).validate(); break;
    case Architecture::Hami: std::get<HamiParams>(params).validate(); break;
    case Architecture::Attention: std::get<AttentionParams>(params).validate(false); break;
    case Architecture::GatedAttention: std::get<AttentionParams>(params).validate(true); break;
  }
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

void check_dim(const Bag& bag, std::size_t expected) {
  if (bag.length() < 1) throw PreconditionError("bag " + std::to_string(bag.id) + " has no tokens");
  if (bag.dim() != expected) {
    throw DimensionError("bag " + std::to_string(bag.id) + " has dimension " +
                         std::to_string(bag.dim()) + ", detector expects " +
                         std::to_string(expected));
  }
}

BagScore make_score(double logit) {
  BagScore s;
  s.logit = logit;
  s.probability = sigmoid(logit);
  return s;
}

}  // namespace

BagScore forward_maxpool(const MaxPoolParams& params, const Bag& bag) {
  check_dim(bag, params.input_dim());
  const Matrix u = (bag.tokens * params.W).cwiseMax(0.0);
  const auto channels = params.feature_dim();
  Vector v = Vector::Zero(static_cast<Eigen::Index>(channels));
  std::vector<std::size_t> argmax(channels, 0);
  for (std::size_t j = 0; j < channels; ++j) {
    double best = u(0, static_cast<Eigen::Index>(j));
    for (Eigen::Index i = 1; i < u.rows(); ++i) {
      if (u(i, static_cast<Eigen::Index>(j)) > best) {
        best = u(i, static_cast<Eigen::Index>(j));
        argmax[j] = static_cast<std::size_t>(i);
      }
    }
    v[static_cast<Eigen::Index>(j)] = best;
  }
  auto score = make_score(params.w.dot(v) + params.b);
  score.argmax = std::move(argmax);
  return score;
}

BagScore forward_meanpool(const MaxPoolParams& params, const Bag& bag) {
  check_dim(bag, params.input_dim());
  const Matrix u = (bag.tokens * params.W).cwiseMax(0.0);
  const Vector v = u.colwise().mean().transpose();
  return make_score(params.w.dot(v) + params.b);
}

BagScore forward_base_poolfirst(const MaxPoolParams& params, const Bag& bag) {
  check_dim(bag, params.input_dim());
  const Vector pooled = bag.tokens.colwise().maxCoeff().transpose();
  const Vector u = (params.W.transpose() * pooled).cwiseMax(0.0);
  return make_score(params.w.dot(u) + params.b);
}

Vector attention_weights(const AttentionParams& params, const Matrix& tokens, bool gated) {
  Matrix e = (tokens * params.V.transpose()).array().tanh();  // T x L
  if (gated) {
    const Matrix g = (tokens * params.U.transpose()).unaryExpr([](double x) { return sigmoid(x); });
    e = e.cwiseProduct(g);
  }
  Vector s = e * params.w_att;
  s.array() -= s.maxCoeff();
  Vector a = s.array().exp();
  a /= a.sum();
  return a;
}

BagScore forward_attention(const AttentionParams& params, const Bag& bag, bool gated) {
  check_dim(bag, params.input_dim());
  if (gated && params.U.rows() != params.V.rows()) {
    throw DimensionError("gated attention needs U with the shape of V");
  }
  const Vector a = attention_weights(params, bag.tokens, gated);
  const Vector pooled = bag.tokens.transpose() * a;
  return make_score(params.head_w.dot(pooled) + params.head_b);
}

namespace {

Vector effective_std(const HamiParams& params, const BatchStats* batch) {
  const Vector& raw = batch ? batch->std : params.bn.running_std;
  Vector s = raw.cwiseMax(params.bn.eps);
  for (Eigen::Index j = 0; j < s.size(); ++j) {
    if (!(s[j] > 0.0)) {
      throw PreconditionError("BN standard deviation must be positive after the eps floor");
    }
  }
  return s;
}

}  // namespace

double hami_instance_logit(const HamiParams& params, const Eigen::Ref<const Vector>& h,
                           const BatchStats* batch) {
  if (static_cast<std::size_t>(h.size()) != params.input_dim()) {
    throw DimensionError("instance dimension does not match HaMI input dimension");
  }
  const Vector& mean = batch ? batch->mean : params.bn.running_mean;
  const Vector sd = effective_std(params, batch);
  const Vector pre = params.W * h + params.b1;
  const Vector normed =
      params.bn.gamma.cwiseProduct((pre - mean).cwiseQuotient(sd)) + params.bn.beta;
  return params.w.dot(normed.cwiseMax(0.0)) + params.b2;
}

std::size_t topk_count(double k_frac, std::size_t length) {
  // The small slack keeps exact products such as 0.1 * 30 from rounding up.
  const double raw = std::ceil(k_frac * static_cast<double>(length) - 1e-9);
  return std::clamp<std::size_t>(raw < 1.0 ? 1 : static_cast<std::size_t>(raw), 1, length);
}

std::vector<std::size_t> topk_indices(std::span<const double> values, std::size_t k) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return values[a] > values[b] || (values[a] == values[b] && a < b);
                    });
  order.resize(k);
  return order;
}

BagScore hami_bag_score(const HamiParams& params, const Bag& bag, double scale,
                        const BatchStats* batch) {
  check_dim(bag, params.input_dim());
  const Vector& mean = batch ? batch->mean : params.bn.running_mean;
  const Vector sd = effective_std(params, batch);
  Matrix pre = (1.0 + scale) * (bag.tokens * params.W.transpose());  // T x H
  pre.rowwise() += params.b1.transpose();
  const Vector coef = params.bn.gamma.cwiseQuotient(sd);
  const Vector offset = params.bn.beta - coef.cwiseProduct(mean);
  Matrix normed = pre.array().rowwise() * coef.transpose().array();
  normed.rowwise() += offset.transpose();
  const Vector logits = (normed.cwiseMax(0.0) * params.w).array() + params.b2;

  const auto k = topk_count(params.k_frac, bag.length());
  auto top = topk_indices(std::span<const double>(logits.data(), logits.size()), k);
  double sum = 0.0;
  for (auto i : top) sum += logits[static_cast<Eigen::Index>(i)];
  auto score = make_score(sum / static_cast<double>(k));
  score.topk = std::move(top);
  return score;
}

Bag apply_sp_scaling(const Bag& bag, double lambda) {
  if (!bag.p_sem) {
    throw PreconditionError("bag " + std::to_string(bag.id) +
                            " has no p_sem; semantic scaling needs it");
  }
  Bag out = bag;
  out.tokens *= 1.0 + lambda * *bag.p_sem;
  return out;
}

double hami_scale_for(const HamiParams& params, const Bag& bag) {
  if (params.lambda == 0.0) return 0.0;
  if (!bag.p_sem) {
    throw PreconditionError("bag " + std::to_string(bag.id) +
                            " has no p_sem but lambda > 0 requires it");
  }
  return params.lambda * *bag.p_sem;
}

BagScore score_bag(const Detector& detector, const Bag& bag) {
  switch (detector.arch) {
    case Architecture::MaxPool: return forward_maxpool(std::get<MaxPoolParams>(detector.params), bag);
    case Architecture::MeanPool:
      return forward_meanpool(std::get<MaxPoolParams>(detector.params), bag);
    case Architecture::PoolFirst:
      return forward_base_poolfirst(std::get<MaxPoolParams>(detector.params), bag);
    case Architecture::Attention:
      return forward_attention(std::get<AttentionParams>(detector.params), bag, false);
    case Architecture::GatedAttention:
      return forward_attention(std::get<AttentionParams>(detector.params), bag, true);
    case Architecture::Hami: {
      const auto& p = std::get<HamiParams>(detector.params);
      return hami_bag_score(p, bag, hami_scale_for(p, bag));
    }
  }
  throw PreconditionError("unhandled architecture");
}

// ---- construction -------------------------------------------------------------

namespace {

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Vector uniform_vector(Eigen::Index n, double fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

}  // namespace

Detector init_detector(Architecture arch, const DetectorShape& shape, std::mt19937_64& rng) {
  if (shape.input_dim < 1 || shape.hidden_dim < 1) {
    throw PreconditionError("detector dimensions must be positive");
  }
  const auto d = static_cast<Eigen::Index>(shape.input_dim);
  const auto h = static_cast<Eigen::Index>(shape.hidden_dim);
  Detector det;
  det.arch = arch;
  switch (arch) {
    case Architecture::MaxPool:
    case Architecture::MeanPool:
    case Architecture::PoolFirst: {
      MaxPoolParams p;
      p.W = uniform_matrix(d, h, static_cast<double>(d), rng);
      p.w = uniform_vector(h, static_cast<double>(h), rng);
      det.params = std::move(p);
      break;
    }
    case Architecture::Hami: {
      HamiParams p;
      p.W = uniform_matrix(h, d, static_cast<double>(d), rng);
      p.b1 = Vector::Zero(h);
      p.bn.gamma = Vector::Ones(h);
      p.bn.beta = Vector::Zero(h);
      p.bn.running_mean = Vector::Zero(h);
      p.bn.running_std = Vector::Ones(h);
      p.w = uniform_vector(h, static_cast<double>(h), rng);
      p.k_frac = shape.k_frac;
      p.lambda = shape.lambda;
      det.params = std::move(p);
      break;
    }
    case Architecture::Attention:
    case Architecture::GatedAttention: {
      AttentionParams p;
      p.V = uniform_matrix(h, d, static_cast<double>(d), rng);
      if (arch == Architecture::GatedAttention) p.U = uniform_matrix(h, d, static_cast<double>(d), rng);
      p.w_att = uniform_vector(h, static_cast<double>(h), rng);
      p.head_w = uniform_vector(d, static_cast<double>(d), rng);
      det.params = std::move(p);
      break;
    }
  }
  det.validate();
  return det;
}

Detector zeros_like(const Detector& like) {
  Detector out = like;
  for (auto& block : stored_blocks(out)) std::fill(block.values.begin(), block.values.end(), 0.0);
  return out;
}

namespace {

template <typename Block, typename MatrixT, typename VectorT, typename Scalar>
struct Blocks {
  static Block of(const std::string& name, MatrixT& m) {
    return {name, {m.data(), static_cast<std::size_t>(m.size())},
            {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}};
  }
  static Block of(const std::string& name, VectorT& v) {
    return {name, {v.data(), static_cast<std::size_t>(v.size())},
            {static_cast<std::size_t>(v.size())}};
  }
  static Block of(const std::string& name, Scalar& s) { return {name, {&s, 1}, {}}; }
};

template <typename Block, typename DetectorT>
std::vector<Block> collect(DetectorT& det, bool include_running) {
  constexpr bool is_const = std::is_const_v<DetectorT>;
  using MatrixT = std::conditional_t<is_const, const Matrix, Matrix>;
  using VectorT = std::conditional_t<is_const, const Vector, Vector>;
  using Scalar = std::conditional_t<is_const, const double, double>;
  using B = Blocks<Block, MatrixT, VectorT, Scalar>;

  std::vector<Block> out;
  if (auto* p = std::get_if<MaxPoolParams>(&det.params)) {
    out.push_back(B::of("W", p->W));
    out.push_back(B::of("w", p->w));
    out.push_back(B::of("b", p->b));
  } else if (auto* p = std::get_if<HamiParams>(&det.params)) {
    out.push_back(B::of("W", p->W));
    out.push_back(B::of("b1", p->b1));
    out.push_back(B::of("bn.gamma", p->bn.gamma));
    out.push_back(B::of("bn.beta", p->bn.beta));
    out.push_back(B::of("w", p->w));
    out.push_back(B::of("b2", p->b2));
    if (include_running) {
      out.push_back(B::of("bn.running_mean", p->bn.running_mean));
      out.push_back(B::of("bn.running_std", p->bn.running_std));
    }
  } else if (auto* p = std::get_if<AttentionParams>(&det.params)) {
    out.push_back(B::of("V", p->V));
    if (det.arch == Architecture::GatedAttention) out.push_back(B::of("U", p->U));
    out.push_back(B::of("w_att", p->w_att));
    out.push_back(B::of("head.w", p->head_w));
    out.push_back(B::of("head.b", p->head_b));
  }
  return out;
}

}  // namespace

std::vector<ParamBlock> trainable_blocks(Detector& detector) {
  return collect<ParamBlock>(detector, false);
}
std::vector<ConstParamBlock> trainable_blocks(const Detector& detector) {
  return collect<ConstParamBlock>(detector, false);
}
std::vector<ParamBlock> stored_blocks(Detector& detector) {
  return collect<ParamBlock>(detector, true);
}
std::vector<ConstParamBlock> stored_blocks(const Detector& detector) {
  return collect<ConstParamBlock>(detector, true);
}

}  // namespace halomil
