#pragma once

#include "gratin/datasets.hpp"

#include <filesystem>
#include <unistd.h>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace fixtures {

namespace fs = std::filesystem;

inline fs::path temp_dir(const std::string &tag) {
  static int counter = 0;
  fs::path p = fs::temp_directory_path() /
               ("gratin_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

inline void write_file(const fs::path &p, const std::string &text) {
  std::ofstream out(p);
  out << text;
}

// Erdos-Renyi graph with one-hot features over `feature_dim` random labels.
inline gratin::Graph random_graph(gratin::Rng &rng, int n, double density, int feature_dim,
                                  int label) {
  std::bernoulli_distribution edge(density);
  std::uniform_int_distribution<int> pick(0, feature_dim - 1);
  std::vector<gratin::Edge> edges;
  for (int u = 0; u < n; ++u)
    for (int v = u + 1; v < n; ++v)
      if (edge(rng))
        edges.emplace_back(u, v);
  gratin::Matrix x = gratin::Matrix::Zero(n, feature_dim);
  for (int i = 0; i < n; ++i)
    x(i, pick(rng)) = 1.0;
  return gratin::Graph::from_edges(n, std::move(edges), std::move(x), label);
}

inline gratin::Graph complete_graph(int n, int feature_dim = 1) {
  std::vector<gratin::Edge> edges;
  for (int u = 0; u < n; ++u)
    for (int v = u + 1; v < n; ++v)
      edges.emplace_back(u, v);
  return gratin::Graph::from_edges(n, std::move(edges), gratin::Matrix::Ones(n, feature_dim), 0);
}

// Two classes that differ in density and in the dominant node label.
inline gratin::GraphDataset toy_dataset(int count, std::uint64_t seed, int feature_dim = 3) {
  gratin::Rng rng(seed);
  gratin::GraphDataset ds;
  ds.name = "TOY";
  ds.num_classes = 2;
  ds.feature_dim = feature_dim;
  std::uniform_int_distribution<int> size(4, 9);
  for (int i = 0; i < count; ++i) {
    const int label = i % 2;
    gratin::Graph g = random_graph(rng, size(rng), label ? 0.6 : 0.25, feature_dim, label);
    if (label == 1)
      g.features.col(0).setOnes();
    ds.graphs.push_back(std::move(g));
  }
  return ds;
}

inline std::multiset<int> degree_multiset(const gratin::Graph &g) {
  auto d = g.degrees();
  return {d.begin(), d.end()};
}

} // namespace fixtures
