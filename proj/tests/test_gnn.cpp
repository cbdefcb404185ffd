#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.hpp"
#include "gratin/gnn.hpp"
#include "oracles.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

using namespace gratin;
using namespace oracles;

namespace {

Matrix dense_adjacency(const Graph &g) {
  Matrix a = Matrix::Zero(g.node_count, g.node_count);
  for (auto [u, v] : g.edges)
    a(u, v) = a(v, u) = 1.0;
  return a;
}

// Layer formulas evaluated with dense matrices only.
Vector dense_embedding(const GnnModel &m, const Graph &g) {
  const Matrix a = dense_adjacency(g);
  Matrix h = g.features;
  for (int t = 0; t < m.num_layers(); ++t) {
    Matrix prop;
    if (m.backbone == Backbone::GCN) {
      Matrix at = a + Matrix::Identity(g.node_count, g.node_count);
      Vector d = at.rowwise().sum();
      Matrix dinv = d.array().rsqrt().matrix().asDiagonal();
      prop = dinv * at * dinv;
    } else {
      prop = (1.0 + m.gin_epsilon[t]) * Matrix::Identity(g.node_count, g.node_count) + a;
    }
    Matrix pre = prop * h * m.params.weights[t];
    pre.rowwise() += m.params.biases[t].transpose();
    h = pre.cwiseMax(0.0);
  }
  return h.colwise().sum().transpose();
}

Graph permuted(const Graph &g, const std::vector<int> &perm) {
  std::vector<Edge> edges;
  for (auto [u, v] : g.edges)
    edges.emplace_back(perm[u], perm[v]);
  Matrix x(g.node_count, g.features.cols());
  for (int i = 0; i < g.node_count; ++i)
    x.row(perm[i]) = g.features.row(i);
  return Graph::from_edges(g.node_count, edges, x, g.label);
}

} // namespace

TEST_CASE("isolated node under GCN reduces to relu(x W)") {
  Rng rng(1);
  auto m = GnnModel::create(Backbone::GCN, 3, 4, 1, 2, rng);
  Matrix x(1, 3);
  x << 0.5, -1.0, 2.0;
  auto g = Graph::from_edges(1, {}, x, 0);
  Vector expect = (x * m.params.weights[0]).cwiseMax(0.0).transpose();
  CHECK((forward(m, g).embedding - expect).norm() < 1e-14);
}

TEST_CASE("forward matches the dense-matrix oracle") {
  Rng rng(2);
  for (auto b : {Backbone::GCN, Backbone::GIN}) {
    for (int trial = 0; trial < 10; ++trial) {
      auto m = random_model(b, 4, 6, 2, 3, rng);
      if (b == Backbone::GIN)
        m.gin_epsilon = {0.3, -0.2};
      auto g = fixtures::random_graph(rng, 5, 0.5, 4, 1);
      auto out = forward(m, g);
      Vector oracle = dense_embedding(m, g);
      CHECK((out.embedding - oracle).norm() <= 1e-12 * (1.0 + oracle.norm()));
      Vector logits = m.params.head_weight * oracle + m.params.head_bias;
      Vector probs = logits.array().exp();
      probs /= probs.sum();
      CHECK((out.probs - probs).norm() < 1e-12);
      CHECK(std::abs(out.probs.sum() - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("permutation invariance") {
  Rng rng(3);
  for (auto b : {Backbone::GCN, Backbone::GIN}) {
    auto m = random_model(b, 3, 8, 2, 2, rng);
    for (int trial = 0; trial < 20; ++trial) {
      auto g = fixtures::random_graph(rng, 9, 0.4, 3, 0);
      std::vector<int> perm(g.node_count);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      auto a = forward(m, g).embedding;
      auto c = forward(m, permuted(g, perm)).embedding;
      CHECK((a - c).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("softmax normalization over extreme logits") {
  Rng rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double scale : {1.0, 1e2, 1e4, 1e8}) {
    for (int c : {2, 3, 7}) {
      Vector logits(c);
      for (auto &x : logits)
        x = scale * n(rng);
      CHECK(std::abs(softmax(logits).sum() - 1.0) < 1e-12);
      CHECK(log_softmax(logits).allFinite());
    }
  }
}

TEST_CASE("uniform prediction has loss log C") {
  Rng rng(5);
  auto m = GnnModel::create(Backbone::GCN, 3, 4, 2, 4, rng);
  m.params.head_weight.setZero();
  m.params.head_bias.setZero();
  auto g = fixtures::random_graph(rng, 6, 0.5, 3, 2);
  CHECK(loss_and_grad(m, g).loss == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("zero head: closed-form head gradient") {
  Rng rng(6);
  for (auto b : {Backbone::GCN, Backbone::GIN}) {
    auto m = GnnModel::create(b, 3, 5, 2, 3, rng);
    m.params.head_weight.setZero();
    m.params.head_bias.setZero();
    auto g = fixtures::random_graph(rng, 6, 0.5, 3, 1);
    auto lg = loss_and_grad(m, g);
    Vector p = Vector::Constant(3, 1.0 / 3.0);
    Vector diff = p;
    diff(1) -= 1.0;
    Vector h = forward(m, g).embedding;
    CHECK((lg.grads.head_weight - diff * h.transpose()).norm() < 1e-12);
    CHECK((lg.grads.head_bias - diff).norm() < 1e-14);
  }
}

TEST_CASE("gradients match central finite differences") {
  Rng rng(7);
  for (auto b : {Backbone::GCN, Backbone::GIN}) {
    for (int draw = 0; draw < 3; ++draw) {
      auto m = random_model(b, 4, 5, 2, 3, rng);
      auto g = fixtures::random_graph(rng, 6, 0.5, 4, draw % 3);
      // Keep logits O(1): a saturated softmax leaves only rounding noise in
      // the differences.
      const double spread = forward(m, g).logits.cwiseAbs().maxCoeff();
      m.params.head_weight /= std::max(1.0, spread / 2.0);
      const double err = fd_relative_error(m, g, 1e-5);
      CAPTURE(draw);
      CHECK(err < 1e-5);
    }
  }
}

TEST_CASE("GIN with epsilon -1 on an edgeless graph") {
  Rng rng(8);
  auto m = GnnModel::create(Backbone::GIN, 3, 4, 2, 2, rng);
  m.gin_epsilon = {-1.0, -1.0};
  Matrix x = Matrix::Random(4, 3);
  auto g = Graph::from_edges(4, {}, x, 0);
  CHECK(forward(m, g).embedding.isZero(0.0));
}

TEST_CASE("training") {
  // Class is readable from the features: one-hot column equals the label.
  GraphDataset ds;
  Rng rng(9);
  std::uniform_int_distribution<int> size(3, 7);
  for (int i = 0; i < 40; ++i) {
    const int label = i % 2;
    auto g = fixtures::random_graph(rng, size(rng), 0.5, 2, label);
    g.features.setZero();
    g.features.col(label).setOnes();
    ds.graphs.push_back(g);
  }

  SUBCASE("separable fixture: loss decreases after epoch 5, accuracy 1") {
    auto m = GnnModel::create(Backbone::GCN, 2, 8, 2, 2, rng);
    TrainConfig cfg;
    cfg.epochs = 100;
    auto res = train(m, ds.graphs, cfg);
    for (std::size_t e = 6; e < res.history.size(); ++e)
      CHECK(res.history[e].loss <= res.history[e - 1].loss);
    CHECK(res.history.back().train_acc == 1.0);
    CHECK(accuracy(res.model, ds.graphs) == 1.0);
    CHECK(std::isnan(res.history.back().val_acc));
  }

  SUBCASE("zero epochs returns the model unchanged") {
    auto m = GnnModel::create(Backbone::GIN, 2, 8, 2, 2, rng);
    TrainConfig cfg;
    cfg.epochs = 0;
    auto res = train(m, ds.graphs, cfg);
    CHECK(res.model.params.flatten() == m.params.flatten());
    CHECK(res.history.empty());
  }

  SUBCASE("same seed, same parameters") {
    for (int batch : {0, 8}) {
      TrainConfig cfg;
      cfg.epochs = 20;
      cfg.batch_size = batch;
      cfg.seed = 17;
      Rng a(3), b(3);
      auto ra = train(GnnModel::create(Backbone::GCN, 2, 8, 2, 2, a), ds.graphs, cfg);
      auto rb = train(GnnModel::create(Backbone::GCN, 2, 8, 2, 2, b), ds.graphs, cfg);
      CHECK(ra.model.params.flatten() == rb.model.params.flatten());
    }
  }

  SUBCASE("history csv columns") {
    TrainConfig cfg;
    cfg.epochs = 3;
    auto res = train(GnnModel::create(Backbone::GCN, 2, 4, 1, 2, rng), ds.graphs, cfg,
                     std::span<const Graph>(ds.graphs).subspan(0, 4));
    std::ostringstream out;
    write_history_csv(out, res.history);
    const std::string text = out.str();
    CHECK(text.rfind("epoch,loss,train_acc,val_acc\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 4);
  }

  SUBCASE("non-finite loss aborts with the graph index") {
    auto bad = ds.graphs;
    bad[5].features(0, 0) = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.epochs = 2;
    try {
      train(GnnModel::create(Backbone::GCN, 2, 4, 1, 2, rng), bad, cfg);
      FAIL("expected an error");
    } catch (const Error &e) {
      CHECK(e.category() == ErrorCategory::Numerical);
      const std::string msg = e.what();
      CHECK(msg.find("epoch") != std::string::npos);
      CHECK(msg.find("5") != std::string::npos);
    }
  }
}

TEST_CASE("embed_dataset") {
  Rng rng(10);
  auto m = GnnModel::create(Backbone::GIN, 3, 6, 2, 2, rng);
  CHECK(embed_dataset(m, {}).size() == 0);
  std::vector<Graph> gs;
  for (int i = 0; i < 5; ++i)
    gs.push_back(fixtures::random_graph(rng, 4 + i, 0.5, 3, i % 2));
  const Vector before = m.params.flatten();
  auto e = embed_dataset(m, gs);
  REQUIRE(e.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(e.vectors.row(i).transpose() == forward(m, gs[i]).embedding);
    CHECK(e.labels[i] == gs[i].label);
    CHECK(e.source_ids[i] == i);
  }
  CHECK(m.params.flatten() == before);
}

TEST_CASE("finetune_head") {
  Rng rng(11);
  auto m = GnnModel::create(Backbone::GCN, 3, 4, 2, 2, rng);
  EmbeddingSet set;
  set.vectors.resize(40, 4);
  std::normal_distribution<double> n(0.0, 0.3);
  for (int i = 0; i < 40; ++i) {
    const int label = i % 2;
    for (int j = 0; j < 4; ++j)
      set.vectors(i, j) = n(rng) + (label ? 2.0 : -2.0) * (j == 0);
    set.labels.push_back(label);
    set.source_ids.push_back(i);
  }
  auto tuned = finetune_head(m, set);
  for (int t = 0; t < m.num_layers(); ++t) {
    CHECK(tuned.params.weights[t] == m.params.weights[t]);
    CHECK(tuned.params.biases[t] == m.params.biases[t]);
  }
  auto pred = predict_from_embeddings(tuned, set.vectors);
  int hits = 0;
  for (int i = 0; i < 40; ++i)
    hits += pred[i] == set.labels[i];
  CHECK(hits == 40);

}

TEST_CASE("finetune on training embeddings equals continued head-only training") {
  Rng rng(15);
  auto m = GnnModel::create(Backbone::GIN, 3, 6, 2, 3, rng);
  std::vector<Graph> gs;
  for (int i = 0; i < 12; ++i)
    gs.push_back(fixtures::random_graph(rng, 3 + i % 5, 0.5, 3, i % 3));
  FinetuneConfig cfg{25, 1e-2};
  auto tuned = finetune_head(m, embed_dataset(m, gs), cfg);

  // Oracle: graph-level loss, head gradient only, hand-written Adam.
  auto prepared = prepare(gs, m.backbone);
  GnnModel cont = m;
  const Eigen::Index nw = cont.params.head_weight.size();
  Vector theta(nw + cont.params.head_bias.size());
  theta << cont.params.head_weight.reshaped(), cont.params.head_bias;
  Vector mom = Vector::Zero(theta.size()), vel = Vector::Zero(theta.size());
  for (int t = 1; t <= cfg.epochs; ++t) {
    auto lg = batch_loss_and_grad(cont, prepared);
    Vector g(theta.size());
    g << lg.grads.head_weight.reshaped(), lg.grads.head_bias;
    mom = 0.9 * mom + 0.1 * g;
    vel = 0.999 * vel + 0.001 * g.cwiseProduct(g);
    Vector mhat = mom / (1.0 - std::pow(0.9, t));
    Vector vhat = vel / (1.0 - std::pow(0.999, t));
    theta -= (cfg.learning_rate * mhat.array() / (vhat.array().sqrt() + 1e-8)).matrix();
    cont.params.head_weight.reshaped() = theta.head(nw);
    cont.params.head_bias = theta.tail(cont.params.head_bias.size());
  }
  CHECK((tuned.params.head_weight - cont.params.head_weight).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((tuned.params.head_bias - cont.params.head_bias).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("saturation diagnostics") {
  CHECK(entropy(Vector::Constant(4, 0.25)) == doctest::Approx(std::log(4.0)));
  Vector half(2);
  half << 0.5, 0.5;
  CHECK(entropy(half) == doctest::Approx(0.6931471805599453));
  Vector one_hot = Vector::Zero(3);
  one_hot(1) = 1.0;
  CHECK(entropy(one_hot) < 1e-9);

  Rng rng(12);
  auto m = GnnModel::create(Backbone::GIN, 3, 8, 2, 3, rng);
  std::vector<Graph> gs;
  for (int i = 0; i < 30; ++i)
    gs.push_back(fixtures::random_graph(rng, 3 + i % 7, 0.5, 3, i % 3));
  auto rep = saturation_report(m, gs);
  REQUIRE(rep.entropy.size() == gs.size());
  for (std::size_t i = 0; i < gs.size(); ++i) {
    CHECK(rep.entropy[i] >= 0.0);
    CHECK(rep.entropy[i] <= std::log(3.0) + 1e-12);
    CHECK(rep.max_confidence[i] >= 1.0 / 3.0 - 1e-12);
    CHECK(rep.max_confidence[i] <= 1.0);
  }

  m.params.head_weight.setZero();
  m.params.head_bias.setZero();
  rep = saturation_report(m, gs);
  CHECK(rep.entropy[0] == doctest::Approx(std::log(3.0)));
  CHECK(rep.max_confidence[0] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("GCN Lipschitz bound") {
  auto edge = Graph::from_edges(2, {{0, 1}}, Matrix::Ones(2, 1), 0);
  const std::vector<Graph> one = {edge};
  CHECK(gcn_lipschitz_bound(one) ==
        doctest::Approx(0.5 + 2.0 * 2.0 * 2.0 / std::pow(2.0, 2.5)));

  Rng rng(13);
  std::vector<Graph> gs;
  for (int i = 0; i < 25; ++i)
    gs.push_back(fixtures::random_graph(rng, 3 + i % 11, 0.3, 1, 0));
  // Independent scan over dense A + I.
  double delta = 1e300, big_m = 0.0, p = 0.0;
  for (const auto &g : gs) {
    Matrix at = dense_adjacency(g) + Matrix::Identity(g.node_count, g.node_count);
    delta = std::min(delta, at.rowwise().sum().minCoeff());
    big_m = std::max(big_m, at.colwise().sum().maxCoeff());
    p = std::max(p, static_cast<double>(g.node_count));
  }
  CHECK(gcn_lipschitz_bound(gs) ==
        doctest::Approx(1.0 / delta + 2.0 * big_m * p / std::pow(delta, 2.5)));

  // Adding edges never increases 1 / delta.
  auto g = fixtures::random_graph(rng, 8, 0.2, 1, 0);
  const auto d0 = g.degrees();
  double inv_delta = 1.0 / (1 + *std::min_element(d0.begin(), d0.end()));
  for (int u = 0; u < 8; ++u)
    for (int v = u + 1; v < 8; ++v) {
      auto edges = g.edges;
      edges.emplace_back(u, v);
      g = Graph::from_edges(8, edges, g.features, 0);
      auto d = g.degrees();
      const double now = 1.0 / (1 + *std::min_element(d.begin(), d.end()));
      CHECK(now <= inv_delta);
      inv_delta = now;
    }
}

TEST_CASE("checkpoint round trip") {
  Rng rng(14);
  auto m = random_model(Backbone::GIN, 5, 7, 3, 4, rng);
  m.gin_epsilon = {0.0, 0.1, 0.2};
  auto back = model_from_json(nlohmann::json::parse(to_json(m).dump()));
  CHECK(back.backbone == m.backbone);
  CHECK(back.gin_epsilon == m.gin_epsilon);
  CHECK(back.params.flatten() == m.params.flatten());
  CHECK(parse_backbone("GIN") == Backbone::GIN);
  CHECK_THROWS_AS(parse_backbone("gat"), Error);
}
