#pragma once

#include "gratin/common.hpp"

#include <Eigen/SparseCore>
#include <json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace gratin {

// Undirected edge stored with first < second.
using Edge = std::pair<int, int>;

struct Graph {
  int node_count = 0;
  std::vector<Edge> edges; // sorted, unique, no self-loops
  Matrix features;         // node_count x d
  int label = 0;

  int edge_count() const { return static_cast<int>(edges.size()); }
  int feature_dim() const { return static_cast<int>(features.cols()); }
  std::vector<int> degrees() const;
  Eigen::SparseMatrix<double> adjacency() const;

  // Builds a graph from an arbitrary edge list: orientation is normalized,
  // duplicates and self-loops are dropped.
  static Graph from_edges(int node_count, std::vector<Edge> edges,
                          Matrix features, int label);

  bool operator==(const Graph &other) const;
};

// Throws a contract error if the graph breaks its structural invariants.
void validate(const Graph &g);

struct GraphDataset {
  std::string name;
  std::vector<Graph> graphs;
  int num_classes = 0;
  int feature_dim = 0;

  int size() const { return static_cast<int>(graphs.size()); }
  std::vector<int> class_histogram() const;
  GraphDataset subset(const std::vector<int> &indices) const;
};

struct FoldSplit {
  int fold_index = 0;
  std::vector<int> train_indices;
  std::vector<int> val_indices;
  std::vector<int> test_indices;
};

// TU Benchmark text layout: <name>_A.txt, <name>_graph_indicator.txt,
// <name>_graph_labels.txt and optionally <name>_node_labels.txt.
GraphDataset parse_tud_dataset(const std::filesystem::path &root,
                               const std::string &name);

// Writes the normalized representation back in the same layout. Node labels
// are written only when features are one-hot.
void write_tud_dataset(const GraphDataset &dataset,
                       const std::filesystem::path &root);

nlohmann::json dataset_manifest(const GraphDataset &dataset);

int max_degree(const GraphDataset &dataset);

GraphDataset degree_onehot_features(const GraphDataset &dataset, int max_degree);

std::vector<FoldSplit> make_folds(const GraphDataset &dataset, int k,
                                  std::uint64_t seed);

// --- structural augmentation and corruption -------------------------------

Graph drop_edge(const Graph &g, double p, Rng &rng);

Graph drop_node(const Graph &g, double p, Rng &rng);

struct RewireResult {
  Graph graph;
  int broken_edges = 0;
  int redraws = 0;
  // Stub pairs that could not be placed without a self-loop or duplicate
  // after the redraw budget. When nonzero the broken edges are restored.
  int discarded_pairs = 0;
};

constexpr int kRewireRedrawLimit = 50;

RewireResult configuration_rewire(const Graph &g, double r, Rng &rng);

struct EditCounts {
  int requested = 0;
  int removed = 0;
  int inserted = 0;
  int skipped = 0;
};

struct CorruptionResult {
  GraphDataset dataset;
  std::vector<EditCounts> edits; // one per graph
};

// removal_probability selects removal over insertion for each edit.
CorruptionResult corrupt_structure(const GraphDataset &dataset, double budget,
                                   Rng &rng, double removal_probability = 0.5);

Graph corrupt_graph(const Graph &g, double budget, Rng &rng,
                    double removal_probability, EditCounts *counts = nullptr);

} // namespace gratin
