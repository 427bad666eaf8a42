#include <algorithm>
#include <cmath>

#include "halomil/training.hpp"

namespace halomil {

double logistic_loss(double z, int y) {
  if (y != 1 && y != -1) throw PreconditionError("logistic loss needs y in {-1, +1}");
  const double yz = static_cast<double>(y) * z;
  return std::max(0.0, -yz) + std::log1p(std::exp(-std::abs(yz)));
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

double grad_maxpool(const MaxPoolParams& p, const Bag& bag, MaxPoolParams& g) {
  check_dim(bag, p.input_dim());
  const Matrix x = bag.tokens * p.W;  // T x D
  double z = p.b;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < x.rows(); ++i) {
      if (std::max(x(i, j), 0.0) > std::max(x(best, j), 0.0)) best = i;
    }
    const double v = std::max(x(best, j), 0.0);
    z += p.w[j] * v;
    g.w[j] = v;
    if (x(best, j) > 0.0) g.W.col(j) = p.w[j] * bag.tokens.row(best).transpose();
  }
  g.b = 1.0;
  return z;
}

double grad_meanpool(const MaxPoolParams& p, const Bag& bag, MaxPoolParams& g) {
  check_dim(bag, p.input_dim());
  const Matrix x = bag.tokens * p.W;
  const double inv_t = 1.0 / static_cast<double>(bag.length());
  const Matrix active = (x.array() > 0.0).cast<double>().matrix();
  g.w = x.cwiseMax(0.0).colwise().sum().transpose() * inv_t;
  // dz/dW_{:,j} = (w_j / T) * sum over active tokens of h_i.
  g.W = (bag.tokens.transpose() * active) * inv_t;
  g.W.array().rowwise() *= p.w.transpose().array();
  g.b = 1.0;
  return p.w.dot(g.w) + p.b;
}

double grad_poolfirst(const MaxPoolParams& p, const Bag& bag, MaxPoolParams& g) {
  check_dim(bag, p.input_dim());
  const Vector rho = bag.tokens.colwise().maxCoeff().transpose();
  const Vector x = p.W.transpose() * rho;
  g.w = x.cwiseMax(0.0);
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    if (x[j] > 0.0) g.W.col(j) = p.w[j] * rho;
  }
  g.b = 1.0;
  return p.w.dot(g.w) + p.b;
}

double grad_attention(const AttentionParams& p, const Bag& bag, bool gated, AttentionParams& g) {
  check_dim(bag, p.input_dim());
  const Matrix& h = bag.tokens;
  const Matrix t = (h * p.V.transpose()).array().tanh();  // T x L
  Matrix gate;
  Matrix e = t;
  if (gated) {
    gate = (h * p.U.transpose()).unaryExpr([](double v) { return sigmoid(v); });
    e = t.cwiseProduct(gate);
  }
  Vector s = e * p.w_att;
  s.array() -= s.maxCoeff();
  Vector a = s.array().exp();
  a /= a.sum();
  const Vector pooled = h.transpose() * a;
  const double z = p.head_w.dot(pooled) + p.head_b;

  g.head_w = pooled;
  g.head_b = 1.0;
  const Vector c = h * p.head_w;
  const Vector ds = a.cwiseProduct((c.array() - c.dot(a)).matrix());  // dz/ds_i
  g.w_att = e.transpose() * ds;
  const Matrix de = ds * p.w_att.transpose();  // T x L
  if (gated) {
    const Matrix d_v = de.cwiseProduct(gate).cwiseProduct(
        (1.0 - t.array().square()).matrix());
    const Matrix d_u = de.cwiseProduct(t).cwiseProduct(
        gate.cwiseProduct((1.0 - gate.array()).matrix()));
    g.V = d_v.transpose() * h;
    g.U = d_u.transpose() * h;
  } else {
    g.V = de.cwiseProduct((1.0 - t.array().square()).matrix()).transpose() * h;
  }
  return z;
}

double grad_hami(const HamiParams& p, const Bag& bag, const BatchStats* batch, HamiParams& g) {
  check_dim(bag, p.input_dim());
  const double scale = 1.0 + hami_scale_for(p, bag);
  const Vector& mean = batch ? batch->mean : p.bn.running_mean;
  const Vector sd = (batch ? batch->std : p.bn.running_std).cwiseMax(p.bn.eps);

  Matrix pre = scale * (bag.tokens * p.W.transpose());  // T x H
  pre.rowwise() += p.b1.transpose();
  const Vector coef = p.bn.gamma.cwiseQuotient(sd);
  Matrix normed = (pre.rowwise() - mean.transpose()).array().rowwise() * coef.transpose().array();
  normed.rowwise() += p.bn.beta.transpose();
  const Vector logits = (normed.cwiseMax(0.0) * p.w).array() + p.b2;

  const auto k = topk_count(p.k_frac, bag.length());
  const auto top = topk_indices(std::span<const double>(logits.data(), logits.size()), k);
  const double inv_k = 1.0 / static_cast<double>(k);
  double z = 0.0;
  for (auto i_u : top) {
    const auto i = static_cast<Eigen::Index>(i_u);
    z += logits[i] * inv_k;
    for (Eigen::Index j = 0; j < p.w.size(); ++j) {
      const double n = normed(i, j);
      if (n <= 0.0) continue;
      g.w[j] += n * inv_k;
      const double delta = p.w[j] * inv_k;
      g.bn.gamma[j] += delta * (pre(i, j) - mean[j]) / sd[j];
      g.bn.beta[j] += delta;
      const double d_pre = delta * coef[j];
      g.b1[j] += d_pre;
      g.W.row(j) += (d_pre * scale) * bag.tokens.row(i);
    }
  }
  g.b2 = 1.0;
  return z;
}

}  // namespace

double squared_norm(const Detector& grads, const std::vector<std::string>& names) {
  double total = 0.0;
  for (const auto& block : trainable_blocks(grads)) {
    if (!names.empty() && std::find(names.begin(), names.end(), block.name) == names.end()) {
      continue;
    }
    for (double v : block.values) total += v * v;
  }
  return total;
}

LogitGradient grad_logit(const Detector& detector, const Bag& bag, const BatchStats* batch) {
  LogitGradient out;
  out.grads.values = zeros_like(detector);
  auto& gp = out.grads.values.params;
  switch (detector.arch) {
    case Architecture::MaxPool:
      out.z = grad_maxpool(std::get<MaxPoolParams>(detector.params), bag,
                           std::get<MaxPoolParams>(gp));
      break;
    case Architecture::MeanPool:
      out.z = grad_meanpool(std::get<MaxPoolParams>(detector.params), bag,
                            std::get<MaxPoolParams>(gp));
      break;
    case Architecture::PoolFirst:
      out.z = grad_poolfirst(std::get<MaxPoolParams>(detector.params), bag,
                             std::get<MaxPoolParams>(gp));
      break;
    case Architecture::Attention:
    case Architecture::GatedAttention:
      out.z = grad_attention(std::get<AttentionParams>(detector.params), bag,
                             detector.arch == Architecture::GatedAttention,
                             std::get<AttentionParams>(gp));
      break;
    case Architecture::Hami:
      out.z = grad_hami(std::get<HamiParams>(detector.params), bag, batch,
                        std::get<HamiParams>(gp));
      break;
  }
  out.grads.logit_sq_norm = squared_norm(out.grads.values);
  return out;
}

BagGradient grad_bag(const Detector& detector, const Bag& bag, const BatchStats* batch) {
  if (!bag.labeled()) {
    throw PreconditionError("bag " + std::to_string(bag.id) + " has an unknown label");
  }
  const int y = label_sign(bag.label);
  auto lg = grad_logit(detector, bag, batch);
  BagGradient out;
  out.z = lg.z;
  out.loss = logistic_loss(lg.z, y);
  // dL/dz = -y / (1 + exp(y z)) = -y * sigmoid(-y z)
  const double dl_dz = -static_cast<double>(y) * sigmoid(-static_cast<double>(y) * lg.z);
  for (auto& block : trainable_blocks(lg.grads.values)) {
    for (double& v : block.values) v *= dl_dz;
  }
  out.grads = std::move(lg.grads);
  return out;
}

}  // namespace halomil
