#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "halomil/semantics.hpp"
#include "test_util.hpp"

namespace halomil {
namespace {

constexpr Relation E = Relation::Entailment;
constexpr Relation C = Relation::Contradiction;
constexpr Relation N = Relation::Neutral;

RelationRecord record(std::vector<double> ll, std::vector<std::vector<Relation>> rel) {
  RelationRecord r;
  r.question_id = "q";
  for (std::size_t i = 0; i < ll.size(); ++i) r.samples.push_back({i, ll[i]});
  r.relations = std::move(rel);
  return r;
}

RelationRecord random_record(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> kd(1, 8);
  std::uniform_int_distribution<int> rd(0, 2);
  std::uniform_real_distribution<double> ld(-40.0, 0.0);
  const std::size_t K = kd(rng);
  RelationRecord r;
  r.question_id = "r";
  for (std::size_t i = 0; i < K; ++i) r.samples.push_back({100 + i, ld(rng)});
  r.relations.assign(K, std::vector<Relation>(K, C));
  // Bias towards contradictions so that clusters of several sizes appear.
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = 0; j < K; ++j) {
      const int v = rd(rng);
      r.relations[i][j] = v == 0 ? E : (v == 1 ? N : C);
      if (rd(rng) != 0) r.relations[i][j] = C;
    }
  }
  return r;
}

// Oracle: equivalence classes by repeated relaxation over the pair list.
std::vector<std::size_t> closure_labels(const RelationRecord& r) {
  const std::size_t K = r.size();
  std::vector<std::size_t> lab(K);
  std::iota(lab.begin(), lab.end(), 0);
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j) {
        if (i == j || !semantically_equivalent(r.relations[i][j], r.relations[j][i])) continue;
        const std::size_t m = std::min(lab[i], lab[j]);
        if (lab[i] != m || lab[j] != m) {
          lab[i] = lab[j] = m;
          changed = true;
        }
      }
    }
  }
  return lab;
}

TEST(Cluster, PairwiseExamples) {
  auto a = cluster_responses(record({0, 0, 0}, {{E, E, C}, {E, E, C}, {C, C, E}}));
  EXPECT_EQ(a.assignment, (std::vector<std::size_t>{0, 0, 1}));

  auto b = cluster_responses(record({0, 0, 0}, {{E, C, C}, {C, E, C}, {C, C, E}}));
  EXPECT_EQ(b.num_clusters(), 3u);

  auto c = cluster_responses(record({0, 0, 0}, {{E, E, C}, {N, E, E}, {C, E, E}}));
  EXPECT_EQ(c.assignment, (std::vector<std::size_t>{0, 0, 0}));
}

TEST(Cluster, EquivalenceTable) {
  EXPECT_TRUE(semantically_equivalent(E, E));
  EXPECT_TRUE(semantically_equivalent(E, N));
  EXPECT_TRUE(semantically_equivalent(N, E));
  EXPECT_FALSE(semantically_equivalent(N, N));
  EXPECT_FALSE(semantically_equivalent(E, C));
  EXPECT_FALSE(semantically_equivalent(C, E));
}

TEST(Cluster, DiagonalIgnored) {
  auto r = record({0, 0}, {{C, C}, {C, N}});
  EXPECT_EQ(cluster_responses(r).num_clusters(), 2u);
}

TEST(Probability, Examples) {
  auto r = record({0, 0, 0, 0, 0}, {{E, E, E, C, C},
                                    {E, E, E, C, C},
                                    {E, E, E, C, C},
                                    {C, C, C, E, E},
                                    {C, C, C, E, E}});
  auto cl = cluster_probability(r, cluster_responses(r));
  ASSERT_EQ(cl.cluster_probs.size(), 2u);
  EXPECT_NEAR(cl.cluster_probs[0], 0.6, 1e-15);
  EXPECT_NEAR(cl.cluster_probs[1], 0.4, 1e-15);
  EXPECT_NEAR(assign_semantic_probability(r, cl, 1), 0.6, 1e-15);

  auto one = record({-3.0}, {{E}});
  auto c1 = cluster_probability(one, cluster_responses(one));
  EXPECT_DOUBLE_EQ(assign_semantic_probability(one, c1, 0), 1.0);

  auto two = record({std::log(3.0), std::log(1.0)}, {{E, C}, {C, E}});
  auto c2 = cluster_probability(two, cluster_responses(two));
  EXPECT_NEAR(c2.cluster_probs[0], 0.75, 1e-15);
  EXPECT_NEAR(assign_semantic_probability(two, c2, 1), 0.25, 1e-15);
  EXPECT_THROW(assign_semantic_probability(two, c2, 2), PreconditionError);
}

TEST(Probability, ExtremeLogLikelihoodsDoNotUnderflow) {
  auto r = record({-2000.0, -2000.0 + std::log(3.0)}, {{E, C}, {C, E}});
  auto cl = cluster_probability(r, cluster_responses(r));
  EXPECT_NEAR(cl.cluster_probs[0], 0.25, 1e-12);
}

TEST(Properties, RandomRecords) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto r = random_record(rng);
    const auto cl = cluster_probability(r, cluster_responses(r));
    const auto oracle = closure_labels(r);
    for (std::size_t i = 0; i < r.size(); ++i) {
      for (std::size_t j = 0; j < r.size(); ++j) {
        EXPECT_EQ(cl.assignment[i] == cl.assignment[j], oracle[i] == oracle[j]);
      }
    }
    EXPECT_NEAR(std::accumulate(cl.cluster_probs.begin(), cl.cluster_probs.end(), 0.0), 1.0, 1e-9);

    // Permuting samples moves each sample together with its cluster partners.
    std::vector<std::size_t> perm(r.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    RelationRecord p = r;
    for (std::size_t i = 0; i < r.size(); ++i) {
      p.samples[i] = r.samples[perm[i]];
      for (std::size_t j = 0; j < r.size(); ++j) p.relations[i][j] = r.relations[perm[i]][perm[j]];
    }
    const auto pc = cluster_probability(p, cluster_responses(p));
    for (std::size_t i = 0; i < r.size(); ++i) {
      for (std::size_t j = 0; j < r.size(); ++j) {
        EXPECT_EQ(pc.assignment[i] == pc.assignment[j],
                  cl.assignment[perm[i]] == cl.assignment[perm[j]]);
      }
      EXPECT_NEAR(assign_semantic_probability(p, pc, i),
                  assign_semantic_probability(r, cl, perm[i]), 1e-12);
    }
    // Canonical ids: cluster ids appear in order of first member.
    std::size_t next = 0;
    for (std::size_t a : cl.assignment) {
      EXPECT_LE(a, next);
      if (a == next) ++next;
    }

    RelationRecord s = r;
    for (auto& x : s.samples) x.log_likelihood += 123.25;
    const auto sc = cluster_probability(s, cluster_responses(s));
    for (std::size_t c = 0; c < cl.cluster_probs.size(); ++c) {
      EXPECT_NEAR(sc.cluster_probs[c], cl.cluster_probs[c], 1e-12);
    }
  }
}

TEST(Records, ValidationAndJson) {
  auto bad = record({0, 0}, {{E, E}});
  EXPECT_THROW(bad.validate(), PreconditionError);
  auto inf = record({-INFINITY}, {{E}});
  EXPECT_THROW(inf.validate(), PreconditionError);
  EXPECT_THROW(relation_from_symbol("X"), PreconditionError);

  auto r = record({-1.5, -0.25}, {{E, N}, {C, E}});
  const auto back = relation_record_from_json(relation_record_to_json(r));
  EXPECT_EQ(back.question_id, r.question_id);
  EXPECT_EQ(back.relations, r.relations);
  EXPECT_EQ(back.samples[1].log_likelihood, -0.25);
}

TEST(Records, ApplyToStore) {
  const auto dir = test::scratch_dir("semantics_apply");
  DatasetStore store(1);
  store.add(test::make_bag(0, test::rows({{1}})));
  store.add(test::make_bag(1, test::rows({{1}})));
  store.add(test::make_bag(7, test::rows({{1}})));
  auto r = record({std::log(3.0), 0.0}, {{E, C}, {C, E}});
  r.samples.push_back({55, 0.0});
  r.relations = {{E, C, C}, {C, E, C}, {C, C, E}};
  write_relation_file({r}, dir / "rel.json");
  const auto records = read_relation_file(dir / "rel.json");
  const auto res = apply_semantic_probabilities(store, records);
  EXPECT_EQ(res.bags_updated, 2u);
  EXPECT_EQ(res.samples_without_bag, 1u);
  EXPECT_NEAR(*store[0].p_sem, 0.6, 1e-15);
  EXPECT_NEAR(*store[1].p_sem, 0.2, 1e-15);
  EXPECT_FALSE(store[2].p_sem.has_value());
}

}  // namespace
}  // namespace halomil
