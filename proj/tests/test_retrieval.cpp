#include <gtest/gtest.h>

#include <set>

#include "cfirn/error.hpp"
#include "cfirn/hash.hpp"
#include "cfirn/retrieval.hpp"
#include "metric_oracles.hpp"
#include "support.hpp"

using namespace cfirn;
using namespace cfirn::testing;

namespace {

std::vector<EmbeddingRecord> records(const std::vector<std::vector<float>>& vecs, const std::vector<int>& labels,
                                     FontRole font, const std::string& prefix) {
  std::vector<EmbeddingRecord> out;
  for (std::size_t i = 0; i < vecs.size(); ++i) {
    out.push_back({prefix + std::to_string(i), labels[i], font, vecs[i]});
  }
  return out;
}

std::vector<Ranking> rank_queries(const RetrievalIndex& index, const std::vector<std::vector<float>>& qs) {
  std::vector<Ranking> out;
  for (const auto& q : qs) out.push_back(index.rank_all(q));
  return out;
}

}  // namespace

TEST(Query, Examples) {
  std::mt19937_64 rng(1);
  std::vector<std::vector<float>> g;
  for (int i = 0; i < 10; ++i) g.push_back(unit_vector(rng, 6, false));
  const RetrievalIndex index(records(g, std::vector<int>(10, 0), FontRole::gallery, "g"));
  EXPECT_EQ(index.query(g[7], 1)[0].index, 7u);
  const auto all = index.query(g[3], 10);
  std::set<std::size_t> ids;
  for (const auto& h : all) ids.insert(h.index);
  EXPECT_EQ(ids.size(), 10u);
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_GE(all[i - 1].score, all[i].score);
  EXPECT_THROW(index.query(g[0], 11), ContractViolation);
  EXPECT_THROW(index.query(std::vector<float>(5, 0.f), 1), ContractViolation);
}

TEST(Query, TiesKeepInsertionOrder) {
  const std::vector<float> a{1, 0}, b{0, 1};
  const RetrievalIndex index(records({b, a, b, a}, {0, 1, 0, 1}, FontRole::gallery, "g"));
  const auto hits = index.query(a, 4);
  EXPECT_EQ(hits[0].index, 1u);
  EXPECT_EQ(hits[1].index, 3u);
  EXPECT_EQ(hits[2].index, 0u);
  EXPECT_EQ(hits[3].index, 2u);
}

TEST(Query, FontFilter) {
  std::mt19937_64 rng(2);
  std::vector<EmbeddingRecord> rs;
  for (int i = 0; i < 6; ++i) rs.push_back({"r" + std::to_string(i), i, i % 2 ? FontRole::query : FontRole::gallery, unit_vector(rng, 4, false)});
  const RetrievalIndex index(rs);
  const auto hits = index.query(rs[1].vector, 3, FontRole::query);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].index, 1u);
  for (const auto& h : hits) EXPECT_EQ(rs[h.index].font, FontRole::query);
  EXPECT_THROW(index.query(rs[1].vector, 4, FontRole::query), ContractViolation);
}

TEST(Query, MixedDimensionsRejected) {
  std::vector<EmbeddingRecord> rs{{"a", 0, FontRole::gallery, {1, 0}}, {"b", 0, FontRole::gallery, {1, 0, 0}}};
  EXPECT_THROW(RetrievalIndex{rs}, ContractViolation);
}

TEST(Metrics, HandBuiltExamples) {
  // Gallery labels by rank position for three queries of class 1.
  const std::vector<int> gl{1, 2, 3, 4, 5, 6};
  const std::vector<int> ql{1, 3, 9};
  const std::vector<Ranking> r{{0, 1, 2, 3, 4, 5}, {1, 3, 2, 0, 4, 5}, {0, 1, 2, 3, 4, 5}};
  EXPECT_DOUBLE_EQ(recall_at_k(r, ql, gl, 1), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(recall_at_k(r, ql, gl, 5), 2.0 / 3.0);
  // Relevant items at ranks 1 and 3 with R = 2.
  const std::vector<int> g2{7, 0, 7, 0};
  const std::vector<int> q2{7};
  const std::vector<Ranking> r2{{0, 1, 2, 3}};
  EXPECT_NEAR(average_precision(r2, q2, g2).mean_ap, (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(average_precision(std::vector<Ranking>{{2, 0, 1}}, std::vector<int>{7}, std::vector<int>{7, 7, 7}).mean_ap, 1.0);
  const ApResult ex = average_precision(r, ql, gl);
  EXPECT_EQ(ex.excluded, 1u);
  EXPECT_EQ(ex.evaluated, 2u);
  EXPECT_THROW(recall_at_k(r, std::vector<int>{1, -1, 2}, gl, 1), ContractViolation);
}

TEST(Metrics, PercentK) {
  EXPECT_EQ(percent_k(250, 1.0), 3u);
  EXPECT_EQ(percent_k(50, 1.0), 1u);
  EXPECT_EQ(percent_k(100, 1.0), 1u);
  EXPECT_EQ(percent_k(101, 1.0), 2u);
  EXPECT_EQ(percent_k(1, 1.0), 1u);
  for (std::size_t g = 1; g <= 3000; ++g) ASSERT_EQ(percent_k(g, 1.0), oracle_percent_k(g, 1.0)) << g;
}

TEST(Metrics, PerfectAndDisjointModels) {
  std::vector<EmbeddingRecord> q, g;
  for (int c = 0; c < 5; ++c) {
    std::vector<float> v(5, 0.f);
    v[c] = 1.f;
    for (int i = 0; i < 3; ++i) {
      q.push_back({"q", c, FontRole::query, v});
      g.push_back({"g", c, FontRole::gallery, v});
    }
  }
  const MetricsReport m = compute_metrics(q, RetrievalIndex(g));
  EXPECT_EQ(m.recall_at_1, 1.0);
  EXPECT_EQ(m.recall_at_5, 1.0);
  EXPECT_EQ(m.recall_at_1_percent, 1.0);
  EXPECT_EQ(m.ap, 1.0);
  for (auto& r : q) r.class_id += 100;
  const MetricsReport none = compute_metrics(q, RetrievalIndex(g));
  EXPECT_EQ(none.recall_at_10, 0.0);
  EXPECT_EQ(none.ap_excluded, q.size());
  EXPECT_THROW(compute_metrics({}, RetrievalIndex(g)), ValidationError);
}

TEST(Metrics, MatchBruteForceOracleOnRandomInstances) {
  std::mt19937_64 rng(20260);
  for (int trial = 0; trial < 200; ++trial) {
    const RetrievalInstance in = random_instance(rng);
    const RetrievalIndex index(records(in.gallery, in.gallery_labels, FontRole::gallery, "g"));
    std::vector<std::vector<std::size_t>> oracle;
    for (const auto& q : in.queries) oracle.push_back(oracle_rank(in.gallery, q));
    const auto ranks = rank_queries(index, in.queries);
    for (std::size_t q = 0; q < ranks.size(); ++q) {
      ASSERT_EQ(ranks[q], oracle[q]) << "trial " << trial;
      const std::size_t k = 1 + rng() % in.gallery.size();
      const auto hits = index.query(in.queries[q], k);
      ASSERT_EQ(hits.size(), k);
      for (std::size_t i = 0; i < k; ++i) {
        ASSERT_EQ(hits[i].index, oracle[q][i]);
        ASSERT_EQ(hits[i].score, oracle_dot(in.gallery[oracle[q][i]], in.queries[q]));
      }
    }
    double prev = 0.0;
    for (std::size_t k : {1, 2, 5, 10, 50}) {
      const double r = recall_at_k(ranks, in.query_labels, in.gallery_labels, k);
      ASSERT_EQ(r, oracle_recall(oracle, in.query_labels, in.gallery_labels, k));
      ASSERT_GE(r, prev);
      ASSERT_LE(r, 1.0);
      prev = r;
    }
    ASSERT_EQ(recall_at_percent(ranks, in.query_labels, in.gallery_labels, 1.0),
              oracle_recall(oracle, in.query_labels, in.gallery_labels, oracle_percent_k(in.gallery.size(), 1.0)));
    const ApResult ap = average_precision(ranks, in.query_labels, in.gallery_labels);
    const OracleAp oap = oracle_ap(oracle, in.query_labels, in.gallery_labels);
    ASSERT_EQ(ap.mean_ap, oap.mean);
    ASSERT_EQ(ap.excluded, oap.excluded);
  }
}

TEST(Metrics, GalleryPermutationInvariance) {
  // Continuous random vectors: all similarities distinct with probability 1.
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int dim = 4 + static_cast<int>(rng() % 29);
    const int classes = 1 + static_cast<int>(rng() % 30);
    std::vector<EmbeddingRecord> q, g;
    const std::size_t ng = 1 + rng() % 1000, nq = 1 + rng() % 20;
    for (std::size_t i = 0; i < ng; ++i) {
      g.push_back({"g" + std::to_string(i), static_cast<int>(rng() % classes), FontRole::gallery, unit_vector(rng, dim, false)});
    }
    for (std::size_t i = 0; i < nq; ++i) {
      q.push_back({"q", static_cast<int>(rng() % classes), FontRole::query, unit_vector(rng, dim, false)});
    }
    const MetricsReport a = compute_metrics(q, RetrievalIndex(g));
    std::shuffle(g.begin(), g.end(), rng);
    const MetricsReport b = compute_metrics(q, RetrievalIndex(g));
    EXPECT_EQ(a.to_json(), b.to_json()) << "trial " << trial;
  }
}

TEST(Metrics, RandomEmbeddingBaselineIsOneOverClasses) {
  // 20 classes, balanced gallery, random unit vectors: R@1 -> 1/20.
  std::mt19937_64 rng(11);
  double sum = 0.0;
  const int trials = 40;
  for (int t = 0; t < trials; ++t) {
    std::vector<EmbeddingRecord> q, g;
    for (int c = 0; c < 20; ++c) {
      for (int i = 0; i < 5; ++i) {
        q.push_back({"q", c, FontRole::query, unit_vector(rng, 32, false)});
        g.push_back({"g", c, FontRole::gallery, unit_vector(rng, 32, false)});
      }
    }
    sum += compute_metrics(q, RetrievalIndex(g)).recall_at_1;
  }
  // 4000 Bernoulli(0.05) draws: standard error ~0.0035.
  EXPECT_NEAR(sum / trials, 0.05, 0.015);
}

TEST(Metrics, ScaleInvariantRanking) {
  // Rankings on normalized features do not change when the raw vectors are
  // rescaled before normalization.
  std::mt19937_64 rng(12);
  auto normalized = [](std::vector<float> v, float s) {
    double n = 0.0;
    for (float& x : v) x *= s, n += static_cast<double>(x) * x;
    for (float& x : v) x = static_cast<float>(x / std::sqrt(n));
    return v;
  };
  std::vector<std::vector<float>> raw;
  for (int i = 0; i < 40; ++i) raw.push_back(unit_vector(rng, 16, false));
  std::vector<std::vector<float>> a, b;
  for (const auto& v : raw) {
    a.push_back(normalized(v, 1.0f));
    b.push_back(normalized(v, 0.5f + static_cast<float>(rng() % 100)));
  }
  const std::vector<int> labels(40, 0);
  const RetrievalIndex ia(records(a, labels, FontRole::gallery, "g")), ib(records(b, labels, FontRole::gallery, "g"));
  for (int q = 0; q < 40; q += 7) EXPECT_EQ(ia.rank_all(a[q]), ib.rank_all(b[q]));
}

TEST(Dump, RoundTripAndCorruption) {
  std::mt19937_64 rng(13);
  std::vector<EmbeddingRecord> rs;
  for (int i = 0; i < 12; ++i) {
    rs.push_back({"images/é_" + std::to_string(i) + ".png", i % 4 - 1, i % 2 ? FontRole::query : FontRole::gallery,
                  unit_vector(rng, 24, false)});
  }
  const auto bytes = serialize_embeddings(rs);
  EXPECT_EQ(deserialize_embeddings(bytes), rs);
  TempDir dir("dump");
  write_embeddings(dir / "e.bin", rs);
  EXPECT_EQ(read_embeddings(dir / "e.bin"), rs);
  EXPECT_EQ(RetrievalIndex(rs).hash(), sha256_hex(bytes));

  auto bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(deserialize_embeddings(bad), ValidationError);
  bad = bytes;
  bad.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_embeddings(bad), ValidationError);
  bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(deserialize_embeddings(bad), ValidationError);
  EXPECT_THROW(read_embeddings(dir / "missing.bin"), IoError);
  EXPECT_TRUE(deserialize_embeddings(serialize_embeddings({})).empty());
}

TEST(Extraction, ShapesNormsAndDeterminism) {
  TempDir dir("extract");
  SynthOptions o;
  o.image_size = 32;
  DatasetManifest m = synth_generate(5, 1, 3, dir.path(), o);
  m.entries.push_back(m.entries[0]);  // duplicated row
  m.entries.push_back({"images/absent.png", 0, FontRole::query});
  TrainConfig c = TrainConfig::desk();
  c.backbone = "micro";
  c.input_size = 16;
  CfirnModel model(c, 3);
  const ExtractionResult r = extract_embeddings(model, m, m.entries);
  EXPECT_EQ(r.records.size(), 11u);
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_NE(r.skipped[0].find("absent.png"), std::string::npos);
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec.vector.size(), 1024u);
    double n = 0.0;
    for (float x : rec.vector) n += static_cast<double>(x) * x;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  }
  EXPECT_EQ(r.records.front().vector, r.records.back().vector);
  EXPECT_EQ(extract_embeddings(model, m, m.entries).records, r.records);
}
