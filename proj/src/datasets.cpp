#include "gratin/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

namespace gratin {

namespace fs = std::filesystem;

namespace {

std::uint64_t edge_key(int u, int v) {
  if (u > v)
    std::swap(u, v);
  return (static_cast<std::uint64_t>(u) << 32) | static_cast<std::uint32_t>(v);
}

std::vector<std::string> read_lines(const fs::path &path) {
  std::ifstream in(path);
  if (!in)
    throw Error(ErrorCategory::Ingestion, "missing file: " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() &&
         lines.back().find_first_not_of(" \t") == std::string::npos)
    lines.pop_back();
  return lines;
}

long parse_int(std::string_view token, const fs::path &file, std::size_t line) {
  auto begin = token.find_first_not_of(" \t");
  auto end = token.find_last_not_of(" \t");
  auto fail = [&] {
    return Error(ErrorCategory::Parse,
                 file.filename().string() + ":" + std::to_string(line) +
                     ": expected integer, got '" + std::string(token) + "'");
  };
  if (begin == std::string_view::npos)
    throw fail();
  std::string s(token.substr(begin, end - begin + 1));
  std::size_t used = 0;
  long value = 0;
  try {
    value = std::stol(s, &used);
  } catch (const std::exception &) {
    throw fail();
  }
  if (used != s.size())
    throw fail();
  return value;
}

std::vector<long> read_int_column(const fs::path &path) {
  auto lines = read_lines(path);
  std::vector<long> values;
  values.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i)
    values.push_back(parse_int(lines[i], path, i + 1));
  return values;
}

// Maps raw values to 0..n-1 by sorted order.
std::map<long, int> index_by_sorted_value(const std::vector<long> &raw) {
  std::map<long, int> index;
  for (long v : raw)
    index.emplace(v, 0);
  int next = 0;
  for (auto &[value, id] : index)
    id = next++;
  return index;
}

bool is_one_hot(const Matrix &features) {
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    int ones = 0;
    for (Eigen::Index c = 0; c < features.cols(); ++c) {
      double x = features(r, c);
      if (x == 1.0)
        ++ones;
      else if (x != 0.0)
        return false;
    }
    if (ones != 1)
      return false;
  }
  return true;
}

} // namespace

std::vector<int> Graph::degrees() const {
  std::vector<int> deg(node_count, 0);
  for (auto [u, v] : edges) {
    ++deg[u];
    ++deg[v];
  }
  return deg;
}

Eigen::SparseMatrix<double> Graph::adjacency() const {
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(2 * edges.size());
  for (auto [u, v] : edges) {
    triplets.emplace_back(u, v, 1.0);
    triplets.emplace_back(v, u, 1.0);
  }
  Eigen::SparseMatrix<double> a(node_count, node_count);
  a.setFromTriplets(triplets.begin(), triplets.end());
  return a;
}

Graph Graph::from_edges(int node_count, std::vector<Edge> edges,
                        Matrix features, int label) {
  for (auto &e : edges)
    if (e.first > e.second)
      std::swap(e.first, e.second);
  std::erase_if(edges, [](const Edge &e) { return e.first == e.second; });
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  Graph g;
  g.node_count = node_count;
  g.edges = std::move(edges);
  g.features = std::move(features);
  g.label = label;
  return g;
}

bool Graph::operator==(const Graph &other) const {
  return node_count == other.node_count && label == other.label &&
         edges == other.edges && features.rows() == other.features.rows() &&
         features.cols() == other.features.cols() &&
         features == other.features;
}

void validate(const Graph &g) {
  require(g.node_count > 0, "graph has no nodes");
  require(g.features.rows() == g.node_count,
          "feature rows do not match node count");
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    auto [u, v] = g.edges[i];
    require(0 <= u && u < v && v < g.node_count,
            "edge (" + std::to_string(u) + "," + std::to_string(v) +
                ") is out of range or not normalized");
    require(i == 0 || g.edges[i - 1] < g.edges[i],
            "edges are not sorted and unique");
  }
}

std::vector<int> GraphDataset::class_histogram() const {
  std::vector<int> hist(num_classes, 0);
  for (const auto &g : graphs)
    ++hist[g.label];
  return hist;
}

GraphDataset GraphDataset::subset(const std::vector<int> &indices) const {
  GraphDataset out;
  out.name = name;
  out.num_classes = num_classes;
  out.feature_dim = feature_dim;
  out.graphs.reserve(indices.size());
  for (int i : indices)
    out.graphs.push_back(graphs.at(i));
  return out;
}

GraphDataset parse_tud_dataset(const fs::path &root, const std::string &name) {
  const fs::path a_path = root / (name + "_A.txt");
  const fs::path indicator_path = root / (name + "_graph_indicator.txt");
  const fs::path labels_path = root / (name + "_graph_labels.txt");
  const fs::path node_labels_path = root / (name + "_node_labels.txt");
  const fs::path node_attr_path = root / (name + "_node_attributes.txt");

  for (const auto &p : {a_path, indicator_path, labels_path})
    if (!fs::exists(p))
      throw Error(ErrorCategory::Ingestion, "missing file: " + p.string());

  const bool has_node_labels = fs::exists(node_labels_path);
  if (!has_node_labels && fs::exists(node_attr_path))
    throw Error(ErrorCategory::Ingestion,
                "real-valued node attributes are not supported (" +
                    node_attr_path.filename().string() +
                    ") and no node label file is present");

  const auto indicator = read_int_column(indicator_path);
  const auto raw_labels = read_int_column(labels_path);
  const long total_nodes = static_cast<long>(indicator.size());
  const long graph_count = static_cast<long>(raw_labels.size());
  if (graph_count == 0)
    throw Error(ErrorCategory::Ingestion, "no graphs in " + labels_path.string());

  std::vector<int> node_graph(total_nodes);
  std::vector<int> local_id(total_nodes);
  std::vector<int> node_counts(graph_count, 0);
  for (long i = 0; i < total_nodes; ++i) {
    long gid = indicator[i];
    if (gid < 1 || gid > graph_count)
      throw Error(ErrorCategory::Parse,
                  indicator_path.filename().string() + ":" +
                      std::to_string(i + 1) + ": graph id " +
                      std::to_string(gid) + " out of range");
    node_graph[i] = static_cast<int>(gid - 1);
    local_id[i] = node_counts[gid - 1]++;
  }
  for (long gi = 0; gi < graph_count; ++gi)
    if (node_counts[gi] == 0)
      throw Error(ErrorCategory::Ingestion,
                  "graph " + std::to_string(gi + 1) + " has no nodes");

  std::vector<std::vector<Edge>> edges(graph_count);
  {
    const auto lines = read_lines(a_path);
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
      const std::string &line = lines[ln];
      auto comma = line.find(',');
      if (comma == std::string::npos)
        throw Error(ErrorCategory::Parse, a_path.filename().string() + ":" +
                                              std::to_string(ln + 1) +
                                              ": expected 'u, v'");
      long u = parse_int(std::string_view(line).substr(0, comma), a_path, ln + 1);
      long v = parse_int(std::string_view(line).substr(comma + 1), a_path, ln + 1);
      for (long x : {u, v})
        if (x < 1 || x > total_nodes)
          throw Error(ErrorCategory::Parse,
                      a_path.filename().string() + ":" + std::to_string(ln + 1) +
                          ": dangling node id " + std::to_string(x));
      int gu = node_graph[u - 1];
      int gv = node_graph[v - 1];
      if (gu != gv)
        throw Error(ErrorCategory::Parse,
                    a_path.filename().string() + ":" + std::to_string(ln + 1) +
                        ": edge joins nodes of different graphs");
      edges[gu].emplace_back(local_id[u - 1], local_id[v - 1]);
    }
  }

  std::vector<long> raw_node_labels;
  std::map<long, int> node_label_index;
  if (has_node_labels) {
    raw_node_labels = read_int_column(node_labels_path);
    if (static_cast<long>(raw_node_labels.size()) != total_nodes)
      throw Error(ErrorCategory::Ingestion,
                  node_labels_path.filename().string() + " has " +
                      std::to_string(raw_node_labels.size()) +
                      " rows, expected " + std::to_string(total_nodes));
    node_label_index = index_by_sorted_value(raw_node_labels);
  }
  const auto label_index = index_by_sorted_value(raw_labels);

  GraphDataset ds;
  ds.name = name;
  ds.num_classes = static_cast<int>(label_index.size());
  ds.feature_dim = static_cast<int>(node_label_index.size());
  ds.graphs.reserve(graph_count);
  std::vector<long> first_node(graph_count + 1, 0);
  for (long gi = 0; gi < graph_count; ++gi)
    first_node[gi + 1] = first_node[gi] + node_counts[gi];

  for (long gi = 0; gi < graph_count; ++gi) {
    Matrix features = Matrix::Zero(node_counts[gi], ds.feature_dim);
    ds.graphs.push_back(Graph::from_edges(node_counts[gi], std::move(edges[gi]),
                                          std::move(features),
                                          label_index.at(raw_labels[gi])));
  }
  // Scatter by global id; contiguity of a graph's nodes is only a convention.
  if (has_node_labels)
    for (long i = 0; i < total_nodes; ++i)
      ds.graphs[node_graph[i]].features(local_id[i],
                                        node_label_index.at(raw_node_labels[i])) = 1.0;
  return ds;
}

void write_tud_dataset(const GraphDataset &dataset, const fs::path &root) {
  fs::create_directories(root);
  const std::string &name = dataset.name;
  std::ofstream a(root / (name + "_A.txt"));
  std::ofstream indicator(root / (name + "_graph_indicator.txt"));
  std::ofstream labels(root / (name + "_graph_labels.txt"));
  const bool write_node_labels =
      dataset.feature_dim > 0 &&
      std::all_of(dataset.graphs.begin(), dataset.graphs.end(),
                  [](const Graph &g) { return is_one_hot(g.features); });
  std::ofstream node_labels;
  if (write_node_labels)
    node_labels.open(root / (name + "_node_labels.txt"));
  if (!a || !indicator || !labels)
    throw Error(ErrorCategory::Io, "cannot write dataset to " + root.string());

  long offset = 1;
  for (std::size_t gi = 0; gi < dataset.graphs.size(); ++gi) {
    const Graph &g = dataset.graphs[gi];
    for (auto [u, v] : g.edges) {
      a << offset + u << ", " << offset + v << '\n';
      a << offset + v << ", " << offset + u << '\n';
    }
    for (int n = 0; n < g.node_count; ++n) {
      indicator << gi + 1 << '\n';
      if (write_node_labels) {
        Eigen::Index col = 0;
        g.features.row(n).maxCoeff(&col);
        node_labels << col << '\n';
      }
    }
    labels << g.label << '\n';
    offset += g.node_count;
  }
}

nlohmann::json dataset_manifest(const GraphDataset &dataset) {
  double nodes = 0.0;
  double edges = 0.0;
  for (const auto &g : dataset.graphs) {
    nodes += g.node_count;
    edges += g.edge_count();
  }
  const double n = std::max(1, dataset.size());
  return {
      {"name", dataset.name},
      {"graphs", dataset.size()},
      {"num_classes", dataset.num_classes},
      {"feature_dim", dataset.feature_dim},
      {"class_histogram", dataset.class_histogram()},
      {"avg_nodes", nodes / n},
      {"avg_edges", edges / n},
  };
}

int max_degree(const GraphDataset &dataset) {
  int best = 0;
  for (const auto &g : dataset.graphs) {
    auto deg = g.degrees();
    if (!deg.empty())
      best = std::max(best, *std::max_element(deg.begin(), deg.end()));
  }
  return best;
}

GraphDataset degree_onehot_features(const GraphDataset &dataset, int max_degree) {
  require(dataset.feature_dim == 0,
          "degree features requested for a dataset that already has features");
  require(max_degree >= 1, "max_degree must be positive");
  GraphDataset out = dataset;
  out.feature_dim = max_degree + 1;
  for (auto &g : out.graphs) {
    auto deg = g.degrees();
    g.features = Matrix::Zero(g.node_count, out.feature_dim);
    for (int n = 0; n < g.node_count; ++n)
      g.features(n, std::min(deg[n], max_degree)) = 1.0;
  }
  return out;
}

std::vector<FoldSplit> make_folds(const GraphDataset &dataset, int k,
                                  std::uint64_t seed) {
  const int n = dataset.size();
  require(k >= 2, "make_folds: k must be at least 2");
  require(n > 0, "make_folds: empty dataset");
  require(k <= n, "make_folds: k=" + std::to_string(k) + " exceeds " +
                      std::to_string(n) + " graphs");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  // Contiguous chunks; the first n % k chunks get one extra element.
  std::vector<std::vector<int>> chunks(k);
  int pos = 0;
  for (int f = 0; f < k; ++f) {
    int size = n / k + (f < n % k ? 1 : 0);
    chunks[f].assign(order.begin() + pos, order.begin() + pos + size);
    pos += size;
  }

  std::vector<FoldSplit> folds(k);
  for (int f = 0; f < k; ++f) {
    FoldSplit &split = folds[f];
    split.fold_index = f;
    split.test_indices = chunks[f];
    std::vector<int> rest;
    for (int step = 1; step < k; ++step) {
      const auto &c = chunks[(f + step) % k];
      rest.insert(rest.end(), c.begin(), c.end());
    }
    const auto val_size = static_cast<std::size_t>(
        std::lround(static_cast<double>(rest.size()) / 9.0));
    split.val_indices.assign(rest.begin(), rest.begin() + val_size);
    split.train_indices.assign(rest.begin() + val_size, rest.end());
  }
  return folds;
}

Graph drop_edge(const Graph &g, double p, Rng &rng) {
  require(p >= 0.0 && p <= 1.0, "drop_edge: p must be in [0, 1]");
  std::bernoulli_distribution drop(p);
  Graph out = g;
  out.edges.clear();
  for (const auto &e : g.edges)
    if (!drop(rng))
      out.edges.push_back(e);
  return out;
}

Graph drop_node(const Graph &g, double p, Rng &rng) {
  require(p >= 0.0 && p < 1.0, "drop_node: p must be in [0, 1)");
  std::bernoulli_distribution drop(p);
  std::vector<int> keep;
  for (int n = 0; n < g.node_count; ++n)
    if (!drop(rng))
      keep.push_back(n);
  if (keep.empty()) {
    std::uniform_int_distribution<int> pick(0, g.node_count - 1);
    keep.push_back(pick(rng));
  }
  std::vector<int> remap(g.node_count, -1);
  for (std::size_t i = 0; i < keep.size(); ++i)
    remap[keep[i]] = static_cast<int>(i);

  Graph out;
  out.node_count = static_cast<int>(keep.size());
  out.label = g.label;
  out.features.resize(out.node_count, g.features.cols());
  for (std::size_t i = 0; i < keep.size(); ++i)
    out.features.row(i) = g.features.row(keep[i]);
  for (auto [u, v] : g.edges)
    if (remap[u] >= 0 && remap[v] >= 0)
      out.edges.emplace_back(remap[u], remap[v]);
  return out;
}

RewireResult configuration_rewire(const Graph &g, double r, Rng &rng) {
  require(r >= 0.0 && r <= 1.0, "configuration_rewire: r must be in [0, 1]");
  std::bernoulli_distribution breaks(r);

  RewireResult result;
  std::vector<Edge> kept;
  std::vector<Edge> broken;
  std::vector<int> stubs;
  for (const auto &e : g.edges) {
    if (breaks(rng)) {
      broken.push_back(e);
      stubs.push_back(e.first);
      stubs.push_back(e.second);
    } else {
      kept.push_back(e);
    }
  }
  result.broken_edges = static_cast<int>(broken.size());
  if (broken.empty()) {
    result.graph = g;
    return result;
  }

  std::unordered_set<std::uint64_t> present;
  for (auto [u, v] : kept)
    present.insert(edge_key(u, v));

  std::shuffle(stubs.begin(), stubs.end(), rng);
  std::vector<Edge> formed;
  // Pair the first remaining stub with a uniformly drawn partner.
  while (!stubs.empty()) {
    const int a = stubs.back();
    stubs.pop_back();
    const int remaining = static_cast<int>(stubs.size());
    std::uniform_int_distribution<int> pick(0, remaining - 1);
    int idx = pick(rng);
    int attempt = 0;
    auto collides = [&](int b) { return a == b || present.count(edge_key(a, b)) > 0; };
    while (collides(stubs[idx]) && attempt < kRewireRedrawLimit) {
      ++attempt;
      ++result.redraws;
      idx = pick(rng);
    }
    const int b = stubs[idx];
    stubs[idx] = stubs.back();
    stubs.pop_back();
    if (collides(b)) {
      ++result.discarded_pairs;
      continue;
    }
    present.insert(edge_key(a, b));
    formed.emplace_back(a, b);
  }

  if (result.discarded_pairs > 0) {
    // A partial pairing would lose degree; fall back to the original edges.
    result.graph = g;
    return result;
  }
  kept.insert(kept.end(), formed.begin(), formed.end());
  result.graph = Graph::from_edges(g.node_count, std::move(kept), g.features, g.label);
  return result;
}

Graph corrupt_graph(const Graph &g, double budget, Rng &rng,
                    double removal_probability, EditCounts *counts) {
  require(budget >= 0.0 && budget < 1.0, "corrupt_structure: budget must be in [0, 1)");
  EditCounts local;
  local.requested = static_cast<int>(std::floor(budget * g.edge_count()));
  std::bernoulli_distribution remove(removal_probability);

  std::vector<Edge> edges = g.edges;
  std::unordered_set<std::uint64_t> present;
  for (auto [u, v] : edges)
    present.insert(edge_key(u, v));
  const long long max_pairs =
      static_cast<long long>(g.node_count) * (g.node_count - 1) / 2;

  for (int op = 0; op < local.requested; ++op) {
    if (remove(rng)) {
      if (edges.empty()) {
        ++local.skipped;
        continue;
      }
      std::uniform_int_distribution<std::size_t> pick(0, edges.size() - 1);
      std::size_t i = pick(rng);
      present.erase(edge_key(edges[i].first, edges[i].second));
      edges[i] = edges.back();
      edges.pop_back();
      ++local.removed;
    } else {
      const long long absent = max_pairs - static_cast<long long>(edges.size());
      if (absent <= 0) {
        ++local.skipped;
        continue;
      }
      Edge chosen{-1, -1};
      if (2 * absent >= max_pairs) {
        std::uniform_int_distribution<int> node(0, g.node_count - 1);
        while (chosen.first < 0) {
          int u = node(rng);
          int v = node(rng);
          if (u != v && !present.count(edge_key(u, v)))
            chosen = {std::min(u, v), std::max(u, v)};
        }
      } else {
        std::uniform_int_distribution<long long> pick(0, absent - 1);
        long long target = pick(rng);
        for (int u = 0; u < g.node_count && chosen.first < 0; ++u)
          for (int v = u + 1; v < g.node_count; ++v)
            if (!present.count(edge_key(u, v)) && target-- == 0) {
              chosen = {u, v};
              break;
            }
      }
      present.insert(edge_key(chosen.first, chosen.second));
      edges.push_back(chosen);
      ++local.inserted;
    }
  }
  if (counts)
    *counts = local;
  return Graph::from_edges(g.node_count, std::move(edges), g.features, g.label);
}

CorruptionResult corrupt_structure(const GraphDataset &dataset, double budget,
                                   Rng &rng, double removal_probability) {
  CorruptionResult result;
  result.dataset = dataset;
  result.edits.resize(dataset.graphs.size());
  for (std::size_t i = 0; i < dataset.graphs.size(); ++i)
    result.dataset.graphs[i] = corrupt_graph(dataset.graphs[i], budget, rng,
                                             removal_probability, &result.edits[i]);
  return result;
}

} // namespace gratin
