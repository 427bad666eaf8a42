#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "halomil/analysis.hpp"
#include "halomil/synthgen.hpp"
#include "halomil/training.hpp"

namespace halomil {
namespace {

SparseSpec base_spec() {
  SparseSpec s;
  s.T = 10;
  s.s = 1;
  s.d = 32;
  s.D = 8;
  s.n_bags = 120;
  s.seed = 7;
  s.with_p_sem = true;
  return s;
}

TEST(Sparse, GeneratedDataPassesVerification) {
  for (std::size_t s : {1u, 2u, 5u}) {
    auto spec = base_spec();
    spec.T = 20;
    spec.s = s;
    const auto planted = planted_params(spec);
    const auto data = generate_sparse_bags(spec, planted);
    EXPECT_EQ(data.store.size(), spec.n_bags);
    const auto check = verify_assumption(data.store, data.certificates, planted, spec);
    EXPECT_TRUE(check.ok) << check.violations.size();
    // Float32 storage keeps the certificate valid.
    const auto reread = decode_hsb(encode_hsb(data.store));
    EXPECT_TRUE(verify_assumption(reread, data.certificates, planted, spec).ok);
  }
}

TEST(Sparse, PlantedStructure) {
  const auto spec = base_spec();
  const auto planted = planted_params(spec);
  EXPECT_TRUE((planted.W.transpose() * planted.W).isApprox(Matrix::Identity(8, 8), 1e-12));
  const auto data = generate_sparse_bags(spec, planted);
  double pos_p = 0.0, neg_p = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t b = 0; b < data.store.size(); ++b) {
    const auto& bag = data.store[b];
    const auto& cert = data.certificates[b];
    ASSERT_EQ(cert.bag_id, bag.id);
    std::size_t channels = 0;
    for (const auto& S : cert.informative) {
      if (S.empty()) continue;
      ++channels;
      EXPECT_EQ(S.size(), spec.s);
    }
    if (bag.label == Label::Hallucinated) {
      EXPECT_GE(channels, 1u);
      pos_p += *bag.p_sem;
      ++n_pos;
    } else {
      EXPECT_EQ(channels, 0u);
      neg_p += *bag.p_sem;
      ++n_neg;
    }
  }
  ASSERT_GT(n_pos, 0u);
  ASSERT_GT(n_neg, 0u);
  EXPECT_GT(neg_p / n_neg, pos_p / n_pos);
}

TEST(Sparse, SameSeedIsBitIdentical) {
  const auto spec = base_spec();
  const auto planted = planted_params(spec);
  EXPECT_EQ(encode_hsb(generate_sparse_bags(spec, planted).store),
            encode_hsb(generate_sparse_bags(spec, planted).store));
  auto other = spec;
  other.seed = 8;
  EXPECT_NE(encode_hsb(generate_sparse_bags(other, planted).store),
            encode_hsb(generate_sparse_bags(spec, planted).store));
}

TEST(Sparse, DenseDegenerateCase) {
  auto spec = base_spec();
  spec.s = spec.T;
  spec.positive_fraction = 1.0;
  const auto planted = planted_params(spec);
  const auto data = generate_sparse_bags(spec, planted);
  EXPECT_TRUE(verify_assumption(data.store, data.certificates, planted, spec).ok);
  for (std::size_t b = 0; b < data.store.size(); ++b) {
    std::size_t informative = 0;
    for (const auto& S : data.certificates[b].informative) informative += S.size();
    EXPECT_EQ(informative, spec.T);
    const auto r = gradient_norm_ratio(planted, data.store[b]);
    ASSERT_TRUE(r.has_value());
    EXPECT_GE(*r, 0.25);
  }
}

TEST(Sparse, RatioBoundForSingleInformativeToken) {
  auto spec = base_spec();
  spec.positive_fraction = 1.0;
  const auto planted = planted_params(spec);
  const auto data = generate_sparse_bags(spec, planted);
  for (const auto& b : data.store.bags()) {
    const auto r = gradient_norm_ratio(planted, b);
    ASSERT_TRUE(r.has_value());
    EXPECT_GE(*r, 0.25 * 100.0);
  }
}

TEST(Sparse, InjectedSparsityViolationIsReportedOnce) {
  const auto spec = base_spec();
  const auto planted = planted_params(spec);
  auto data = generate_sparse_bags(spec, planted);
  const auto& cert = data.certificates[0];
  std::size_t token = 0;
  while (std::any_of(cert.informative.begin(), cert.informative.end(), [&](const auto& S) {
    return std::find(S.begin(), S.end(), token) != S.end();
  })) {
    ++token;
  }
  DatasetStore changed(spec.d);
  for (std::size_t b = 0; b < data.store.size(); ++b) {
    Bag bag = data.store[b];
    if (b == 0) {
      const auto t = static_cast<Eigen::Index>(token);
      const double x = bag.tokens.row(t).dot(planted.W.col(3));
      bag.tokens.row(t) += (0.3 - x) * planted.W.col(3).transpose();
    }
    changed.add(std::move(bag));
  }
  const auto check = verify_assumption(changed, data.certificates, planted, spec);
  ASSERT_EQ(check.violations.size(), 1u);
  EXPECT_EQ(check.violations[0].kind, "sparsity");
  EXPECT_EQ(check.violations[0].bag_id, data.store[0].id);
  EXPECT_EQ(check.violations[0].token, token);
  EXPECT_EQ(check.violations[0].channel, 3u);
}

TEST(Sparse, RelaxedUpperBoundFlagsTheToken) {
  const auto spec = base_spec();
  const auto planted = planted_params(spec);
  const auto data = generate_sparse_bags(spec, planted);
  double top = 0.0;
  std::uint64_t top_bag = 0;
  std::size_t top_token = 0, top_channel = 0;
  for (std::size_t b = 0; b < data.store.size(); ++b) {
    const Matrix x = data.store[b].tokens * planted.W;
    for (std::size_t j = 0; j < spec.D; ++j) {
      for (std::size_t t : data.certificates[b].informative[j]) {
        const double v = x(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j));
        if (v > top) {
          top = v;
          top_bag = data.store[b].id;
          top_token = t;
          top_channel = j;
        }
      }
    }
  }
  auto relaxed = spec;
  relaxed.u_hi = top - 1e-4;
  const auto check = verify_assumption(data.store, data.certificates, planted, relaxed);
  EXPECT_FALSE(check.ok);
  const bool found = std::any_of(check.violations.begin(), check.violations.end(), [&](const auto& v) {
    return v.kind == "activation" && v.bag_id == top_bag && v.token == top_token &&
           v.channel == top_channel;
  });
  EXPECT_TRUE(found);
  for (const auto& v : check.violations) EXPECT_EQ(v.kind, "activation");
}

TEST(Sparse, InfeasibleSpecsAreRejected) {
  auto spec = base_spec();
  spec.u_lo = 2.0;
  spec.u_hi = 3.0;
  EXPECT_THROW(generate_sparse_bags(spec, planted_params(base_spec())), PreconditionError);
  spec = base_spec();
  spec.s = 0;
  EXPECT_THROW(spec.validate(), PreconditionError);
  spec = base_spec();
  spec.D = 64;
  EXPECT_THROW(spec.validate(), PreconditionError);
}

TEST(Sparse, CertificateJsonRoundTrip) {
  const auto spec = base_spec();
  const auto planted = planted_params(spec);
  const auto data = generate_sparse_bags(spec, planted);
  const auto j = certificate_json(spec, data.certificates, 0xabcdefULL);
  EXPECT_EQ(j["planted_params_fnv1a64"], "0000000000abcdef");
  const auto back = certificates_from_json(j);
  ASSERT_EQ(back.size(), data.certificates.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].bag_id, data.certificates[i].bag_id);
    EXPECT_EQ(back[i].informative, data.certificates[i].informative);
  }
  const auto s2 = sparse_spec_from_json(j["spec"]);
  EXPECT_EQ(s2.T, spec.T);
  EXPECT_EQ(s2.seed, spec.seed);
  EXPECT_EQ(s2.u_hi, spec.u_hi);
}

TEST(Separable, PlantedFeatureMargin) {
  EXPECT_TRUE(generate_separable_bags(0, 4, 1.0, 1).empty());
  const auto store = generate_separable_bags(64, 5, 1.0, 3);
  EXPECT_EQ(encode_hsb(store), encode_hsb(generate_separable_bags(64, 5, 1.0, 3)));
  for (const auto& bag : store.bags()) {
    const double v = std::max(0.0, bag.tokens.col(0).maxCoeff());
    if (bag.label == Label::Hallucinated) {
      EXPECT_GE(v, 1.0 - 1e-6);
    } else {
      EXPECT_EQ(v, 0.0);
    }
  }
  EXPECT_THROW(generate_separable_bags(4, 4, 0.0, 1), PreconditionError);
}

TEST(Separable, TrainedMaxPoolReachesPerfectTrainAuroc) {
  const auto store = generate_separable_bags(64, 5, 1.0, 11);
  auto cfg = default_train_config(Architecture::MaxPool);
  cfg.hidden_dim = 8;
  cfg.epochs = 100;
  cfg.batch_size = 16;
  cfg.optimizer = OptimizerKind::Sgd;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.0;
  const auto result = train(store, cfg);
  const auto tr = store.subset(Split::Train);
  std::vector<double> z;
  std::vector<int> y;
  for (const auto& b : tr.bags()) {
    z.push_back(score_bag(result.best, b).logit);
    y.push_back(label_sign(b.label));
  }
  EXPECT_EQ(auroc(z, y), 1.0);
}

TEST(Hash, Fnv1aReferenceValues) {
  EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ULL);
  const std::uint8_t a[] = {'a'};
  EXPECT_EQ(fnv1a64(a), 0xaf63dc4c8601ec8cULL);
  const std::uint8_t foobar[] = {'f', 'o', 'o', 'b', 'a', 'r'};
  EXPECT_EQ(fnv1a64(foobar), 0x85944171f73967e8ULL);
}

}  // namespace
}  // namespace halomil
