#include "halomil/synthgen.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/QR>

namespace halomil {

void SparseSpec::validate() const {
  if (T < 1) throw PreconditionError("sparse spec: T must be >= 1");
  if (s < 1 || s > T) throw PreconditionError("sparse spec: need 1 <= s <= T");
  if (d < 1 || D < 1) throw PreconditionError("sparse spec: d and D must be >= 1");
  if (D > d) throw PreconditionError("sparse spec: planted D must not exceed d");
  if (!(u_lo > 0.0 && u_lo <= u_hi)) throw PreconditionError("sparse spec: need 0 < u_lo <= u_hi");
  if (!(g_lo > 0.0 && g_lo <= g_hi)) throw PreconditionError("sparse spec: need 0 < g_lo <= g_hi");
  if (!(positive_fraction >= 0.0 && positive_fraction <= 1.0)) {
    throw PreconditionError("sparse spec: positive_fraction must lie in [0,1]");
  }
  if (!(noise >= 0.0) || !(distractor >= 0.0)) {
    throw PreconditionError("sparse spec: noise and distractor must be >= 0");
  }
  // Cheapest informative token: activation u_lo, every other channel at -delta.
  const double floor_sq = u_lo * u_lo + static_cast<double>(D - 1) * delta() * delta();
  if (floor_sq > g_hi * g_hi) {
    throw PreconditionError("sparse spec infeasible: u_lo = " + std::to_string(u_lo) +
                            " with " + std::to_string(D - 1) +
                            " suppressed channels does not fit inside the norm budget g_hi = " +
                            std::to_string(g_hi));
  }
  if (D == d && u_hi * u_hi + static_cast<double>(D - 1) * 4 * delta() * delta() < g_lo * g_lo) {
    throw PreconditionError(
        "sparse spec infeasible: g_lo is unreachable without an orthogonal complement (D == d)");
  }
}

nlohmann::json to_json(const SparseSpec& s) {
  return {{"T", s.T},         {"s", s.s},           {"d", s.d},
          {"D", s.D},         {"n_bags", s.n_bags}, {"u_lo", s.u_lo},
          {"u_hi", s.u_hi},   {"g_lo", s.g_lo},     {"g_hi", s.g_hi},
          {"positive_fraction", s.positive_fraction},
          {"noise", s.noise}, {"distractor", s.distractor},
          {"seed", s.seed},   {"with_p_sem", s.with_p_sem}};
}

SparseSpec sparse_spec_from_json(const nlohmann::json& j) {
  SparseSpec s;
  s.T = j.at("T").get<std::size_t>();
  s.s = j.at("s").get<std::size_t>();
  s.d = j.at("d").get<std::size_t>();
  s.D = j.at("D").get<std::size_t>();
  s.n_bags = j.at("n_bags").get<std::size_t>();
  s.u_lo = j.at("u_lo").get<double>();
  s.u_hi = j.at("u_hi").get<double>();
  s.g_lo = j.at("g_lo").get<double>();
  s.g_hi = j.at("g_hi").get<double>();
  s.positive_fraction = j.at("positive_fraction").get<double>();
  s.noise = j.at("noise").get<double>();
  s.distractor = j.at("distractor").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.with_p_sem = j.at("with_p_sem").get<bool>();
  return s;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Unit vector orthogonal to the columns of W (zero when W spans everything).
Vector orthogonal_direction(const Matrix& W, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int attempt = 0; attempt < 8; ++attempt) {
    Vector g(W.rows());
    for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = normal(rng);
    g -= W * (W.transpose() * g);
    const double n = g.norm();
    if (n > 1e-8) return g / n;
  }
  return Vector::Zero(W.rows());
}

/// Split tags for `n` items of one class: first 60% train, next 20% validation, rest test.
Split stratified_split(std::size_t rank, std::size_t n) {
  const auto n_train = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  if (rank < n_train) return Split::Train;
  if (rank < n_train + n_val) return Split::Validation;
  return Split::Test;
}

std::vector<bool> shuffled_labels(std::size_t n, std::size_t n_pos, std::mt19937_64& rng) {
  std::vector<bool> pos(n, false);
  std::fill(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(n_pos), true);
  std::shuffle(pos.begin(), pos.end(), rng);
  return pos;
}

}  // namespace

MaxPoolParams planted_params(const SparseSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(splitmix64(spec.seed ^ 0x706c616e746564ull));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(spec.d, spec.D);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(spec.d, spec.D);
  MaxPoolParams p;
  p.W = q;
  p.w = Vector::Ones(static_cast<Eigen::Index>(spec.D));
  p.b = 0.0;
  return p;
}

SparseDataset generate_sparse_bags(const SparseSpec& spec, const MaxPoolParams& planted) {
  spec.validate();
  planted.validate();
  if (planted.input_dim() != spec.d || planted.feature_dim() != spec.D) {
    throw DimensionError("planted parameters do not match the sparse spec dimensions");
  }
  const Matrix& W = planted.W;
  const auto D = static_cast<Eigen::Index>(spec.D);
  const double delta = spec.delta();

  std::mt19937_64 label_rng(splitmix64(spec.seed));
  const auto n_pos = static_cast<std::size_t>(
      std::llround(spec.positive_fraction * static_cast<double>(spec.n_bags)));
  const auto positive = shuffled_labels(spec.n_bags, n_pos, label_rng);

  SparseDataset out{DatasetStore(spec.d), {}};
  std::size_t rank_pos = 0, rank_neg = 0;
  for (std::size_t b = 0; b < spec.n_bags; ++b) {
    std::mt19937_64 rng(splitmix64(spec.seed * 0x100000001b3ull + b + 1));
    Bag bag;
    bag.id = b;
    bag.label = positive[b] ? Label::Hallucinated : Label::Faithful;
    bag.split = positive[b] ? stratified_split(rank_pos++, n_pos)
                            : stratified_split(rank_neg++, spec.n_bags - n_pos);
    bag.tokens.resize(static_cast<Eigen::Index>(spec.T), static_cast<Eigen::Index>(spec.d));

    BagCertificate cert;
    cert.bag_id = b;
    cert.informative.assign(spec.D, {});
    std::vector<std::ptrdiff_t> owner(spec.T, -1);  // channel a token informs, or -1
    if (positive[b]) {
      const std::size_t max_channels = std::min(spec.D, spec.T / spec.s);
      const auto n_active = static_cast<std::size_t>(
          std::uniform_int_distribution<std::size_t>(1, max_channels)(rng));
      std::vector<std::size_t> channels(spec.D);
      std::iota(channels.begin(), channels.end(), std::size_t{0});
      std::shuffle(channels.begin(), channels.end(), rng);
      std::vector<std::size_t> slots(spec.T);
      std::iota(slots.begin(), slots.end(), std::size_t{0});
      std::shuffle(slots.begin(), slots.end(), rng);
      std::size_t next = 0;
      for (std::size_t c = 0; c < n_active; ++c) {
        for (std::size_t k = 0; k < spec.s; ++k) owner[slots[next++]] = static_cast<std::ptrdiff_t>(channels[c]);
      }
    }

    for (std::size_t t = 0; t < spec.T; ++t) {
      Vector coord(D);
      double r = 0.0;
      if (owner[t] >= 0) {
        const auto j = static_cast<Eigen::Index>(owner[t]);
        double cc = 0.0;
        for (Eigen::Index l = 0; l < D; ++l) {
          if (l == j) continue;
          coord[l] = -uniform(rng, delta, 2.0 * delta);
          cc += coord[l] * coord[l];
        }
        const double a_hi = std::min(spec.u_hi, std::sqrt(std::max(0.0, spec.g_hi * spec.g_hi - cc)));
        if (a_hi < spec.u_lo) throw PreconditionError("sparse spec infeasible: activation budget exhausted");
        coord[j] = uniform(rng, spec.u_lo, a_hi);
        const double used = coord[j] * coord[j] + cc;
        const double r_lo = std::sqrt(std::max(0.0, spec.g_lo * spec.g_lo - used));
        const double r_hi = std::sqrt(std::max(0.0, spec.g_hi * spec.g_hi - used));
        r = std::clamp(uniform(rng, 0.0, spec.noise), r_lo, r_hi);
        cert.informative[static_cast<std::size_t>(j)].push_back(t);
      } else {
        for (Eigen::Index l = 0; l < D; ++l) {
          coord[l] = -uniform(rng, delta, std::max(delta, spec.distractor));
        }
        r = uniform(rng, 0.0, spec.noise);
      }
      Vector h = W * coord;
      if (r > 0.0) {
        const Vector n = orthogonal_direction(W, rng);
        if (n.squaredNorm() == 0.0 && owner[t] >= 0) {
          throw PreconditionError("sparse spec infeasible: g_lo needs an orthogonal complement");
        }
        h += r * n;
      }
      bag.tokens.row(static_cast<Eigen::Index>(t)) = h.transpose();
    }
    if (spec.with_p_sem) {
      bag.p_sem = positive[b] ? uniform(rng, 0.1, 0.6) : uniform(rng, 0.4, 0.9);
    }
    out.store.add(std::move(bag));
    out.certificates.push_back(std::move(cert));
  }
  return out;
}

AssumptionCheck verify_assumption(const DatasetStore& store,
                                  const std::vector<BagCertificate>& certificates,
                                  const MaxPoolParams& planted, const SparseSpec& spec) {
  constexpr double tol = 1e-6;  // absorbs float32 storage rounding
  AssumptionCheck result;
  auto flag = [&](std::uint64_t id, std::size_t t, std::size_t j, const char* kind, double v) {
    result.violations.push_back({id, t, j, kind, v});
  };
  if (store.dim() != planted.input_dim()) {
    throw DimensionError("store dimension does not match planted parameters");
  }
  std::map<std::uint64_t, const BagCertificate*> by_id;
  for (const auto& c : certificates) by_id[c.bag_id] = &c;

  const auto D = planted.feature_dim();
  for (const auto& bag : store.bags()) {
    const auto it = by_id.find(bag.id);
    if (it == by_id.end() || it->second->informative.size() != D) {
      flag(bag.id, 0, 0, "certificate", 0.0);
      continue;
    }
    const auto& cert = *it->second;
    const Matrix x = bag.tokens * planted.W;
    for (std::size_t j = 0; j < D; ++j) {
      const auto& S = cert.informative[j];
      if (!S.empty() && S.size() != spec.s) flag(bag.id, 0, j, "count", static_cast<double>(S.size()));
      for (std::size_t t = 0; t < bag.length(); ++t) {
        const double xv = x(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j));
        if (std::find(S.begin(), S.end(), t) == S.end()) {
          if (!(xv < 0.0)) flag(bag.id, t, j, "sparsity", xv);
          continue;
        }
        if (xv < spec.u_lo - tol || xv > spec.u_hi + tol) flag(bag.id, t, j, "activation", xv);
        // Gradient vector of u_{t,j} with respect to W_j is h_t while active.
        const double g = xv > 0.0 ? bag.tokens.row(static_cast<Eigen::Index>(t)).norm() : 0.0;
        if (g < spec.g_lo - tol || g > spec.g_hi + tol) flag(bag.id, t, j, "gradient", g);
      }
    }
  }
  result.ok = result.violations.empty();
  return result;
}

nlohmann::json certificate_json(const SparseSpec& spec, const std::vector<BagCertificate>& certs,
                                std::uint64_t planted_hash) {
  nlohmann::json bags = nlohmann::json::array();
  for (const auto& c : certs) bags.push_back({{"bag_id", c.bag_id}, {"S", c.informative}});
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(planted_hash));
  return {{"spec", to_json(spec)}, {"planted_params_fnv1a64", hex}, {"bags", bags}};
}

std::vector<BagCertificate> certificates_from_json(const nlohmann::json& j) {
  std::vector<BagCertificate> out;
  try {
    for (const auto& b : j.at("bags")) {
      out.push_back({b.at("bag_id").get<std::uint64_t>(),
                     b.at("S").get<std::vector<std::vector<std::size_t>>>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw PreconditionError(std::string("malformed certificate: ") + e.what());
  }
  return out;
}

DatasetStore generate_separable_bags(std::size_t n, std::size_t d, double margin,
                                     std::uint64_t seed) {
  if (!(margin > 0.0)) throw PreconditionError("separable bags need margin > 0");
  if (d < 1) throw PreconditionError("separable bags need d >= 1");
  DatasetStore store(d);
  std::mt19937_64 label_rng(splitmix64(seed));
  const auto positive = shuffled_labels(n, n / 2, label_rng);
  const std::size_t n_pos = n / 2;
  std::size_t rank_pos = 0, rank_neg = 0;
  for (std::size_t b = 0; b < n; ++b) {
    std::mt19937_64 rng(splitmix64(seed * 0x100000001b3ull + b + 1));
    std::normal_distribution<double> normal(0.0, 1.0);
    const auto T = std::uniform_int_distribution<std::size_t>(2, 6)(rng);
    Bag bag;
    bag.id = b;
    bag.label = positive[b] ? Label::Hallucinated : Label::Faithful;
    bag.split = positive[b] ? stratified_split(rank_pos++, n_pos)
                            : stratified_split(rank_neg++, n - n_pos);
    bag.tokens.resize(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < bag.tokens.size(); ++i) bag.tokens.data()[i] = normal(rng);
    // Planted direction is the first coordinate.
    for (Eigen::Index t = 0; t < bag.tokens.rows(); ++t) bag.tokens(t, 0) = -uniform(rng, 0.1, 1.0);
    if (positive[b]) {
      const auto t = std::uniform_int_distribution<Eigen::Index>(0, bag.tokens.rows() - 1)(rng);
      bag.tokens(t, 0) = uniform(rng, margin, margin + 1.0);
    }
    store.add(std::move(bag));
  }
  return store;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace halomil
