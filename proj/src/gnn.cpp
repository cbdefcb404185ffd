#include "gratin/gnn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>

namespace gratin {

std::string to_string(Backbone b) { return b == Backbone::GCN ? "gcn" : "gin"; }

Backbone parse_backbone(const std::string &s) {
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "gcn")
    return Backbone::GCN;
  if (lower == "gin")
    return Backbone::GIN;
  throw Error(ErrorCategory::Contract, "unknown backbone '" + s + "'");
}

// --- parameters -------------------------------------------------------------

Eigen::Index GnnParams::size() const {
  Eigen::Index n = head_weight.size() + head_bias.size();
  for (std::size_t t = 0; t < weights.size(); ++t)
    n += weights[t].size() + biases[t].size();
  return n;
}

Vector GnnParams::flatten() const {
  Vector flat(size());
  Eigen::Index pos = 0;
  auto put = [&](const auto &m) {
    flat.segment(pos, m.size()) = m.reshaped();
    pos += m.size();
  };
  for (std::size_t t = 0; t < weights.size(); ++t) {
    put(weights[t]);
    put(biases[t]);
  }
  put(head_weight);
  put(head_bias);
  return flat;
}

void GnnParams::assign(const Vector &flat) {
  require(flat.size() == size(), "parameter vector has the wrong length");
  Eigen::Index pos = 0;
  auto take = [&](auto &m) {
    m.reshaped() = flat.segment(pos, m.size());
    pos += m.size();
  };
  for (std::size_t t = 0; t < weights.size(); ++t) {
    take(weights[t]);
    take(biases[t]);
  }
  take(head_weight);
  take(head_bias);
}

GnnParams GnnParams::zeros_like() const {
  GnnParams z;
  for (std::size_t t = 0; t < weights.size(); ++t) {
    z.weights.push_back(Matrix::Zero(weights[t].rows(), weights[t].cols()));
    z.biases.push_back(Vector::Zero(biases[t].size()));
  }
  z.head_weight = Matrix::Zero(head_weight.rows(), head_weight.cols());
  z.head_bias = Vector::Zero(head_bias.size());
  return z;
}

namespace {

Matrix glorot(int fan_in, int fan_out, Rng &rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Matrix m(fan_in, fan_out);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      m(i, j) = u(rng);
  return m;
}

} // namespace

GnnModel GnnModel::create(Backbone backbone, int input_dim, int hidden_dim,
                          int num_layers, int num_classes, Rng &rng) {
  require(input_dim > 0 && hidden_dim > 0 && num_layers >= 1 && num_classes >= 2,
          "invalid model dimensions");
  GnnModel model;
  model.backbone = backbone;
  model.gin_epsilon.assign(num_layers, 0.0);
  int width = input_dim;
  for (int t = 0; t < num_layers; ++t) {
    model.params.weights.push_back(glorot(width, hidden_dim, rng));
    model.params.biases.push_back(Vector::Zero(hidden_dim));
    width = hidden_dim;
  }
  model.params.head_weight = glorot(hidden_dim, num_classes, rng).transpose();
  model.params.head_bias = Vector::Zero(num_classes);
  return model;
}

// --- propagation ------------------------------------------------------------

Eigen::SparseMatrix<double> shift_operator(const Graph &g, Backbone backbone) {
  Eigen::SparseMatrix<double> a = g.adjacency();
  if (backbone == Backbone::GIN)
    return a;
  const auto deg = g.degrees();
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(2 * g.edges.size() + g.node_count);
  auto inv_sqrt = [&](int v) { return 1.0 / std::sqrt(deg[v] + 1.0); };
  for (int v = 0; v < g.node_count; ++v)
    triplets.emplace_back(v, v, 1.0 / (deg[v] + 1.0));
  for (auto [u, v] : g.edges) {
    const double w = inv_sqrt(u) * inv_sqrt(v);
    triplets.emplace_back(u, v, w);
    triplets.emplace_back(v, u, w);
  }
  Eigen::SparseMatrix<double> s(g.node_count, g.node_count);
  s.setFromTriplets(triplets.begin(), triplets.end());
  return s;
}

PreparedGraph prepare(const Graph &g, Backbone backbone) {
  return {shift_operator(g, backbone), g.features, g.label};
}

std::vector<PreparedGraph> prepare(std::span<const Graph> graphs, Backbone backbone) {
  std::vector<PreparedGraph> out;
  out.reserve(graphs.size());
  for (const auto &g : graphs)
    out.push_back(prepare(g, backbone));
  return out;
}

namespace {

// Applies the (symmetric) layer operator to node rows.
Matrix propagate(const GnnModel &model, int layer, const PreparedGraph &g,
                 const Matrix &h) {
  Matrix out = g.shift * h;
  if (model.backbone == Backbone::GIN)
    out += (1.0 + model.gin_epsilon[layer]) * h;
  return out;
}

struct ForwardCache {
  std::vector<Matrix> propagated; // P_t = op(H_{t-1})
  std::vector<Matrix> pre;        // Z_t
  Matrix last;                    // H_T
  ForwardResult result;
};

ForwardCache forward_cached(const GnnModel &model, const PreparedGraph &g) {
  require(g.features.cols() == model.input_dim(),
          "feature width " + std::to_string(g.features.cols()) +
              " does not match model input " + std::to_string(model.input_dim()));
  ForwardCache cache;
  Matrix h = g.features;
  for (int t = 0; t < model.num_layers(); ++t) {
    cache.propagated.push_back(propagate(model, t, g, h));
    Matrix z = cache.propagated.back() * model.params.weights[t];
    z.rowwise() += model.params.biases[t].transpose();
    h = z.cwiseMax(0.0);
    cache.pre.push_back(std::move(z));
  }
  cache.result.embedding = h.colwise().sum().transpose();
  cache.result.logits =
      model.params.head_weight * cache.result.embedding + model.params.head_bias;
  cache.result.probs = softmax(cache.result.logits);
  cache.last = std::move(h);
  return cache;
}

} // namespace

Vector log_softmax(const Vector &logits) {
  const double shift = logits.maxCoeff();
  const double lse = shift + std::log((logits.array() - shift).exp().sum());
  return logits.array() - lse;
}

Vector softmax(const Vector &logits) {
  // Scalar exp underflows to an exact zero; the packet version clamps near -708.
  const double shift = logits.maxCoeff();
  Vector e = logits.unaryExpr([shift](double v) { return std::exp(v - shift); });
  return e / e.sum();
}

ForwardResult forward(const GnnModel &model, const PreparedGraph &g) {
  return forward_cached(model, g).result;
}

ForwardResult forward(const GnnModel &model, const Graph &g) {
  return forward(model, prepare(g, model.backbone));
}

LossAndGrad loss_and_grad(const GnnModel &model, const PreparedGraph &g) {
  require(g.label >= 0 && g.label < model.num_classes(), "label out of range");
  ForwardCache cache = forward_cached(model, g);
  const auto &p = model.params;

  LossAndGrad out;
  out.loss = -log_softmax(cache.result.logits)(g.label);
  out.grads = p.zeros_like();
  Eigen::Index arg = 0;
  cache.result.logits.maxCoeff(&arg);
  out.predicted = static_cast<int>(arg);

  Vector dlogits = cache.result.probs;
  dlogits(g.label) -= 1.0;
  out.grads.head_weight = dlogits * cache.result.embedding.transpose();
  out.grads.head_bias = dlogits;

  // Sum readout: every node row receives the embedding gradient.
  const Vector demb = p.head_weight.transpose() * dlogits;
  Matrix dh = demb.transpose().replicate(cache.last.rows(), 1);
  for (int t = model.num_layers() - 1; t >= 0; --t) {
    Matrix dz = (cache.pre[t].array() > 0.0).select(dh, 0.0);
    out.grads.weights[t] = cache.propagated[t].transpose() * dz;
    out.grads.biases[t] = dz.colwise().sum().transpose();
    if (t > 0)
      dh = propagate(model, t, g, dz * p.weights[t].transpose());
  }
  return out;
}

LossAndGrad loss_and_grad(const GnnModel &model, const Graph &g) {
  return loss_and_grad(model, prepare(g, model.backbone));
}

LossAndGrad batch_loss_and_grad(const GnnModel &model,
                                std::span<const PreparedGraph> batch,
                                std::span<const int> members, int *correct) {
  std::vector<int> all;
  if (members.empty()) {
    all.resize(batch.size());
    std::iota(all.begin(), all.end(), 0);
    members = all;
  }
  require(!members.empty(), "empty batch");
  Vector flat = Vector::Zero(model.params.size());
  double loss = 0.0;
  int hits = 0;
  for (int i : members) {
    LossAndGrad lg = loss_and_grad(model, batch[i]);
    if (!std::isfinite(lg.loss))
      throw Error(ErrorCategory::Numerical,
                  "non-finite loss on graph " + std::to_string(i));
    loss += lg.loss;
    flat += lg.grads.flatten();
    hits += (lg.predicted == batch[i].label);
  }
  const double n = static_cast<double>(members.size());
  LossAndGrad out;
  out.loss = loss / n;
  out.grads = model.params.zeros_like();
  out.grads.assign(flat / n);
  if (correct)
    *correct = hits;
  return out;
}

// --- optimization -----------------------------------------------------------

Adam::Adam(Eigen::Index size, AdamConfig config)
    : config_(config), m_(Vector::Zero(size)), v_(Vector::Zero(size)) {}

void Adam::step(Vector &params, const Vector &grads) {
  ++t_;
  m_ = config_.beta1 * m_ + (1.0 - config_.beta1) * grads;
  v_ = config_.beta2 * v_ + (1.0 - config_.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  params.array() -= config_.learning_rate * (m_.array() / c1) /
                    ((v_.array() / c2).sqrt() + config_.eps);
}

double accuracy(const GnnModel &model, std::span<const Graph> graphs) {
  if (graphs.empty())
    return std::numeric_limits<double>::quiet_NaN();
  int hits = 0;
  for (const auto &g : graphs) {
    Eigen::Index arg = 0;
    forward(model, g).logits.maxCoeff(&arg);
    hits += (arg == g.label);
  }
  return static_cast<double>(hits) / static_cast<double>(graphs.size());
}

TrainResult train(GnnModel model, std::span<const Graph> train_slice,
                  const TrainConfig &config, std::span<const Graph> val_slice,
                  const EpochAugmenter &augmenter) {
  require(!train_slice.empty(), "train: empty training slice");
  require(config.epochs >= 0 && config.learning_rate > 0.0 && config.batch_size >= 0,
          "train: invalid configuration");
  const auto base = prepare(train_slice, model.backbone);
  const auto val = prepare(val_slice, model.backbone);

  TrainResult result;
  Adam adam(model.params.size(), config.adam());
  Vector theta = model.params.flatten();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<PreparedGraph> extra;
    if (augmenter)
      for (const auto &g : augmenter(epoch))
        extra.push_back(prepare(g, model.backbone));
    std::vector<PreparedGraph> merged;
    std::span<const PreparedGraph> batch = base;
    if (!extra.empty()) {
      merged = base;
      merged.insert(merged.end(), extra.begin(), extra.end());
      batch = merged;
    }

    std::vector<int> order(batch.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t step_size =
        config.batch_size == 0 ? order.size()
                               : static_cast<std::size_t>(config.batch_size);
    if (step_size < order.size()) {
      Rng shuffle_rng(derive_seed(config.seed, "batch-order", epoch));
      std::shuffle(order.begin(), order.end(), shuffle_rng);
    }

    EpochRecord record;
    record.epoch = epoch;
    int hits_total = 0;
    double loss_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += step_size) {
      const std::size_t stop = std::min(order.size(), start + step_size);
      std::span<const int> members(order.data() + start, stop - start);
      int hits = 0;
      LossAndGrad lg;
      try {
        lg = batch_loss_and_grad(model, batch, members, &hits);
      } catch (const Error &e) {
        throw Error(e.category(), "epoch " + std::to_string(epoch) + ": " + e.what());
      }
      hits_total += hits;
      loss_total += lg.loss * static_cast<double>(members.size());
      adam.step(theta, lg.grads.flatten());
      model.params.assign(theta);
    }
    record.loss = loss_total / static_cast<double>(order.size());
    record.train_acc = static_cast<double>(hits_total) / static_cast<double>(order.size());
    if (val.empty()) {
      record.val_acc = std::numeric_limits<double>::quiet_NaN();
    } else {
      int hits = 0;
      for (const auto &g : val) {
        Eigen::Index arg = 0;
        forward(model, g).logits.maxCoeff(&arg);
        hits += (arg == g.label);
      }
      record.val_acc = static_cast<double>(hits) / static_cast<double>(val.size());
    }
    result.history.push_back(record);
  }
  result.model = std::move(model);
  return result;
}

void write_history_csv(std::ostream &out, const std::vector<EpochRecord> &history) {
  out << "epoch,loss,train_acc,val_acc\n";
  out.precision(17);
  for (const auto &r : history)
    out << r.epoch << ',' << r.loss << ',' << r.train_acc << ',' << r.val_acc << '\n';
}

EmbeddingSet embed_dataset(const GnnModel &model, std::span<const Graph> slice,
                           std::span<const int> source_ids) {
  require(source_ids.empty() || source_ids.size() == slice.size(),
          "embed_dataset: source id count mismatch");
  EmbeddingSet set;
  set.vectors.resize(static_cast<Eigen::Index>(slice.size()), model.embedding_dim());
  for (std::size_t i = 0; i < slice.size(); ++i) {
    set.vectors.row(i) = forward(model, slice[i]).embedding.transpose();
    set.labels.push_back(slice[i].label);
    set.source_ids.push_back(source_ids.empty() ? static_cast<int>(i) : source_ids[i]);
  }
  return set;
}

// --- head -------------------------------------------------------------------

HeadLoss head_loss_and_grad(const Matrix &head_weight, const Vector &head_bias,
                            const Matrix &embeddings, std::span<const int> labels) {
  require(embeddings.cols() == head_weight.cols(), "head input width mismatch");
  require(static_cast<std::size_t>(embeddings.rows()) == labels.size(),
          "label count mismatch");
  HeadLoss out;
  out.grad_weight = Matrix::Zero(head_weight.rows(), head_weight.cols());
  out.grad_bias = Vector::Zero(head_bias.size());
  const Eigen::Index n = embeddings.rows();
  if (n == 0)
    return out;
  Matrix logits = embeddings * head_weight.transpose();
  logits.rowwise() += head_bias.transpose();
  Matrix residual(n, head_weight.rows());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector row = logits.row(i).transpose();
    const Vector logp = log_softmax(row);
    out.loss -= logp(labels[i]);
    residual.row(i) = logp.array().exp().transpose();
    residual(i, labels[i]) -= 1.0;
  }
  out.loss /= static_cast<double>(n);
  out.grad_weight = residual.transpose() * embeddings / static_cast<double>(n);
  out.grad_bias = residual.colwise().sum().transpose() / static_cast<double>(n);
  return out;
}

GnnModel finetune_head(GnnModel model, const EmbeddingSet &embeddings,
                       const FinetuneConfig &config) {
  if (embeddings.size() == 0 || config.epochs == 0)
    return model;
  require(embeddings.dim() == model.embedding_dim(),
          "finetune_head: embedding width does not match the head");
  Matrix &w = model.params.head_weight;
  Vector &b = model.params.head_bias;
  const Eigen::Index nw = w.size();
  Vector theta(nw + b.size());
  theta << w.reshaped(), b;
  Adam adam(theta.size(), AdamConfig{config.learning_rate});
  Vector grad(theta.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    HeadLoss hl = head_loss_and_grad(w, b, embeddings.vectors, embeddings.labels);
    if (!std::isfinite(hl.loss))
      throw Error(ErrorCategory::Numerical,
                  "finetune_head: non-finite loss at epoch " + std::to_string(epoch));
    grad << hl.grad_weight.reshaped(), hl.grad_bias;
    adam.step(theta, grad);
    w.reshaped() = theta.head(nw);
    b = theta.tail(b.size());
  }
  return model;
}

std::vector<int> predict_from_embeddings(const GnnModel &model, const Matrix &embeddings) {
  std::vector<int> out;
  out.reserve(embeddings.rows());
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    Vector logits = model.params.head_weight * embeddings.row(i).transpose() +
                    model.params.head_bias;
    Eigen::Index arg = 0;
    logits.maxCoeff(&arg);
    out.push_back(static_cast<int>(arg));
  }
  return out;
}

// --- diagnostics ------------------------------------------------------------

double entropy(const Vector &probs) {
  double h = 0.0;
  for (double p : probs)
    h -= p * std::log(std::max(p, 1e-12));
  return std::max(h, 0.0);
}

SaturationReport saturation_report(const GnnModel &model, std::span<const Graph> slice) {
  SaturationReport report;
  for (const auto &g : slice) {
    const Vector probs = forward(model, g).probs;
    report.max_confidence.push_back(probs.maxCoeff());
    report.entropy.push_back(entropy(probs));
  }
  return report;
}

double gcn_lipschitz_bound(std::span<const Graph> slice) {
  require(!slice.empty(), "gcn_lipschitz_bound: empty slice");
  int min_degree = std::numeric_limits<int>::max();
  int max_norm = 0;
  int max_nodes = 0;
  for (const auto &g : slice) {
    for (int d : g.degrees()) {
      min_degree = std::min(min_degree, d + 1);
      max_norm = std::max(max_norm, d + 1);
    }
    max_nodes = std::max(max_nodes, g.node_count);
  }
  const double delta = min_degree;
  return 1.0 / delta + 2.0 * max_norm * max_nodes / std::pow(delta, 2.5);
}

// --- checkpoints ------------------------------------------------------------

namespace {

nlohmann::json tensor_json(const std::string &name, const Matrix &m) {
  std::vector<double> data(m.size());
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      data.data(), m.rows(), m.cols()) = m;
  return {{"name", name}, {"shape", {m.rows(), m.cols()}}, {"data", data}};
}

Matrix tensor_from_json(const nlohmann::json &t) {
  const auto rows = t.at("shape").at(0).get<Eigen::Index>();
  const auto cols = t.at("shape").at(1).get<Eigen::Index>();
  const auto data = t.at("data").get<std::vector<double>>();
  require(static_cast<Eigen::Index>(data.size()) == rows * cols,
          "tensor '" + t.at("name").get<std::string>() + "' has inconsistent shape");
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                        Eigen::RowMajor>>(data.data(), rows, cols);
}

} // namespace

nlohmann::json to_json(const GnnModel &model) {
  nlohmann::json tensors = nlohmann::json::array();
  for (int t = 0; t < model.num_layers(); ++t) {
    tensors.push_back(tensor_json("layer" + std::to_string(t) + ".weight",
                                  model.params.weights[t]));
    tensors.push_back(tensor_json("layer" + std::to_string(t) + ".bias",
                                  model.params.biases[t].transpose()));
  }
  tensors.push_back(tensor_json("head.weight", model.params.head_weight));
  tensors.push_back(tensor_json("head.bias", model.params.head_bias.transpose()));
  return {{"backbone", to_string(model.backbone)},
          {"gin_epsilon", model.gin_epsilon},
          {"tensors", tensors}};
}

GnnModel model_from_json(const nlohmann::json &j) {
  GnnModel model;
  model.backbone = parse_backbone(j.at("backbone").get<std::string>());
  model.gin_epsilon = j.at("gin_epsilon").get<std::vector<double>>();
  std::map<std::string, Matrix> by_name;
  for (const auto &t : j.at("tensors"))
    by_name[t.at("name").get<std::string>()] = tensor_from_json(t);
  auto take = [&](const std::string &name) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw Error(ErrorCategory::Parse, "checkpoint is missing tensor '" + name + "'");
    return it->second;
  };
  for (std::size_t t = 0; t < model.gin_epsilon.size(); ++t) {
    model.params.weights.push_back(take("layer" + std::to_string(t) + ".weight"));
    model.params.biases.push_back(take("layer" + std::to_string(t) + ".bias").transpose());
  }
  model.params.head_weight = take("head.weight");
  model.params.head_bias = take("head.bias").transpose();
  return model;
}

} // namespace gratin
