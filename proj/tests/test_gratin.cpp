#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.hpp"
#include "gratin/pipeline.hpp"

#include <numeric>

using namespace gratin;

namespace {

struct Trained {
  GraphDataset ds;
  GnnModel model;
};

Trained trained_toy(int count = 30, int epochs = 20) {
  Trained t{fixtures::toy_dataset(count, 11), {}};
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.hidden_dim = 8;
  cfg.seed = 3;
  Rng rng(derive_seed(cfg.seed, "init"));
  auto init = GnnModel::create(Backbone::GIN, t.ds.feature_dim, cfg.hidden_dim, cfg.num_layers,
                               t.ds.num_classes, rng);
  t.model = train(init, t.ds.graphs, cfg).model;
  return t;
}

EmbeddingSet gaussian_classes(const std::vector<int> &per_class, int d, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  EmbeddingSet e;
  const int n = std::accumulate(per_class.begin(), per_class.end(), 0);
  e.vectors.resize(n, d);
  int row = 0;
  for (int c = 0; c < static_cast<int>(per_class.size()); ++c)
    for (int i = 0; i < per_class[c]; ++i, ++row) {
      for (int j = 0; j < d; ++j)
        e.vectors(row, j) = z(rng) + 4.0 * c;
      e.labels.push_back(c);
      e.source_ids.push_back(row);
    }
  return e;
}

bool mentions(const std::vector<std::string> &warnings, const std::string &needle) {
  return std::any_of(warnings.begin(), warnings.end(),
                     [&](const std::string &w) { return w.find(needle) != std::string::npos; });
}

} // namespace

TEST_CASE("M = 0 reduces to plain head fine-tuning") {
  auto t = trained_toy();
  GratinOptions opts;
  opts.samples_per_graph = 0;
  opts.components = {2, 2};
  opts.finetune = {30, 1e-2};
  auto res = run_gratin(t.model, t.ds.graphs, opts);
  CHECK(res.batch.size() == 0);
  auto plain = finetune_head(t.model, embed_dataset(t.model, t.ds.graphs), opts.finetune);
  CHECK(res.model.params.head_weight == plain.params.head_weight);
  CHECK(res.model.params.head_bias == plain.params.head_bias);
}

TEST_CASE("GRATIN leaves the backbone untouched and labels samples by class") {
  auto t = trained_toy();
  GratinOptions opts;
  opts.samples_per_graph = 3;
  opts.components = {2, 3};
  opts.seed = 9;
  opts.finetune = {20, 1e-2};
  auto res = run_gratin(t.model, t.ds.graphs, opts);

  for (int l = 0; l < t.model.num_layers(); ++l) {
    CHECK(res.model.params.weights[l] == t.model.params.weights[l]);
    CHECK(res.model.params.biases[l] == t.model.params.biases[l]);
  }
  CHECK(res.batch.size() == 3 * 30);
  CHECK(res.batch.origin_class_counts == std::vector<int>{45, 45});
  CHECK(std::accumulate(res.batch.origin_class_counts.begin(),
                        res.batch.origin_class_counts.end(), 0) == res.batch.size());
  CHECK(res.batch.vectors.allFinite());
  for (int c = 0; c < 2; ++c)
    CHECK(std::count(res.batch.labels.begin(), res.batch.labels.end(), c) == 45);
  CHECK(res.report.per_class.size() == 2);
  CHECK(res.report.per_class[1].k == 3);
  CHECK(res.report.per_class[0].n == 15);
  CHECK(res.report.deviation.pairs == opts.deviation_pairs);
  CHECK(res.report.deviation.sup_exact);
  CHECK(res.report.deviation.sup_dev >= res.report.deviation.mean_dev);

  // Same seed, same draws.
  auto again = run_gratin(t.model, t.ds.graphs, opts);
  CHECK(again.batch.vectors == res.batch.vectors);
  CHECK(again.model.params.head_weight == res.model.params.head_weight);

  for (const auto &row : res.report.timings.rows())
    CHECK(row.seconds >= 0.0);
  auto j = res.report.to_json(true, true);
  for (const char *key : {"per_class", "mean_dev", "sup_dev", "sup_exact", "warnings", "timings"})
    CHECK(j.contains(key));
  CHECK(j["per_class"][0].contains("gmm"));
  CHECK_FALSE(res.report.to_json(false).contains("timings"));
}

TEST_CASE("each class is sampled from its own mixture") {
  auto e = gaussian_classes({200, 200}, 3, 4);
  GratinOptions opts;
  opts.samples_per_graph = 2;
  opts.components = {1, 1};
  auto batch = augment_embeddings(e, 2, opts);
  for (int c = 0; c < 2; ++c) {
    Vector mean = Vector::Zero(3);
    int n = 0;
    for (int i = 0; i < batch.size(); ++i)
      if (batch.labels[i] == c) {
        mean += batch.vectors.row(i).transpose();
        ++n;
      }
    mean /= n;
    CHECK(n == 400);
    CHECK((mean.array() - 4.0 * c).abs().maxCoeff() < 0.3);
  }
}

TEST_CASE("small and empty classes produce warnings") {
  auto e = gaussian_classes({3, 20, 0}, 2, 5);
  GratinOptions opts;
  opts.components = {5, 2, 2};
  GratinReport rep;
  auto batch = augment_embeddings(e, 3, opts, &rep);
  CHECK(rep.per_class[0].requested_k == 5);
  CHECK(rep.per_class[0].k == 3);
  CHECK(mentions(rep.warnings, "K reduced from 5 to 3"));
  CHECK(rep.per_class[2].k == 0);
  CHECK(mentions(rep.warnings, "class 2 has no training embeddings"));
  CHECK(batch.origin_class_counts == std::vector<int>{3, 20, 0});

  SUBCASE("classes beyond the component list use the default") {
    GratinReport r2;
    GratinOptions o2;
    augment_embeddings(gaussian_classes({30, 30}, 2, 6), 2, o2, &r2);
    CHECK(r2.per_class[1].requested_k == kDefaultComponents);
  }
  SUBCASE("negative sample count is rejected") {
    GratinOptions bad;
    bad.samples_per_graph = -1;
    CHECK_THROWS_AS(augment_embeddings(e, 3, bad), Error);
  }
}

TEST_CASE("embedding deviation") {
  SUBCASE("single pair") {
    Matrix a(1, 2), b(1, 2);
    a << 0, 0;
    b << 3, 4;
    auto s = embedding_deviation(a, b, 10, 1);
    CHECK(s.mean_dev == doctest::Approx(5.0));
    CHECK(s.sup_dev == doctest::Approx(5.0));
    CHECK(s.sup_exact);
  }
  SUBCASE("Monte Carlo mean against the exhaustive mean") {
    Rng rng(2);
    std::normal_distribution<double> z(0.0, 1.0);
    Matrix a(60, 4), b(80, 4);
    for (auto *m : {&a, &b})
      for (Eigen::Index i = 0; i < m->size(); ++i)
        m->data()[i] = z(rng);
    double exact = 0.0, sup = 0.0;
    for (int i = 0; i < 60; ++i)
      for (int k = 0; k < 80; ++k) {
        const double dev = (a.row(i) - b.row(k)).norm();
        exact += dev;
        sup = std::max(sup, dev);
      }
    exact /= 60.0 * 80.0;
    auto s = embedding_deviation(a, b, 200000, 3);
    CHECK(std::abs(s.mean_dev - exact) < 0.01 * exact);
    CHECK(s.sup_dev == doctest::Approx(sup).epsilon(1e-14));
    CHECK(s.sup_dev >= s.mean_dev);

    auto sampled = embedding_deviation(a, b, 1000, 3, 10);
    CHECK_FALSE(sampled.sup_exact);
    CHECK(sampled.sup_dev <= sup);
    CHECK(sampled.sup_dev >= sampled.mean_dev);
  }
  SUBCASE("empty inputs") {
    auto s = embedding_deviation(Matrix(0, 2), Matrix::Ones(3, 2), 10, 1);
    CHECK(s.pairs == 0);
  }
}

TEST_CASE("AugmentationBatch subset and merge") {
  auto e = gaussian_classes({4, 4}, 2, 7);
  GratinOptions opts;
  opts.components = {1, 1};
  auto batch = augment_embeddings(e, 2, opts);
  const std::vector<int> rows{0, 5, 7};
  auto sub = batch.subset(rows);
  CHECK(sub.size() == 3);
  CHECK(sub.origin_class_counts == std::vector<int>{1, 2});
  CHECK(sub.vectors.row(1) == batch.vectors.row(5));
  auto merged = merge(e, sub);
  CHECK(merged.size() == 11);
  CHECK(merged.source_ids.back() == -1);
  CHECK(merged.labels[8] == 0);
}

TEST_CASE("GMM fitting cost grows linearly in K") {
  auto e = gaussian_classes({3000}, 8, 8);
  auto fit_seconds = [&](int k) {
    double best = 1e300;
    for (int rep = 0; rep < 3; ++rep) {
      GratinOptions opts;
      opts.samples_per_graph = 0;
      opts.components = {k};
      opts.em.tol = -1.0;
      opts.em.max_iter = 15;
      GratinReport report;
      augment_embeddings(e, 1, opts, &report);
      for (const auto &row : report.timings.rows())
        if (row.phase == "gmm_fit")
          best = std::min(best, row.seconds);
    }
    return best;
  };
  const double ratio = fit_seconds(8) / fit_seconds(4);
  CAPTURE(ratio);
  CHECK(ratio >= 1.5);
  CHECK(ratio <= 2.8);
}
