#include "gratin/pipeline.hpp"

#include <algorithm>

namespace gratin {

AugmentationBatch AugmentationBatch::subset(std::span<const int> rows) const {
  AugmentationBatch out;
  out.vectors.resize(static_cast<Eigen::Index>(rows.size()), vectors.cols());
  out.origin_class_counts.assign(origin_class_counts.size(), 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.vectors.row(i) = vectors.row(rows[i]);
    out.labels.push_back(labels.at(rows[i]));
    ++out.origin_class_counts.at(labels[rows[i]]);
  }
  return out;
}

EmbeddingSet merge(const EmbeddingSet &original, const AugmentationBatch &batch) {
  if (batch.size() == 0)
    return original;
  require(original.size() == 0 || batch.vectors.cols() == original.dim(),
          "merge: embedding width mismatch");
  EmbeddingSet out;
  out.vectors.resize(original.size() + batch.size(), batch.vectors.cols());
  if (original.size() > 0)
    out.vectors.topRows(original.size()) = original.vectors;
  out.vectors.bottomRows(batch.size()) = batch.vectors;
  out.labels = original.labels;
  out.labels.insert(out.labels.end(), batch.labels.begin(), batch.labels.end());
  out.source_ids = original.source_ids;
  out.source_ids.insert(out.source_ids.end(), batch.size(), -1);
  return out;
}

nlohmann::json to_json(const std::vector<TimingRow> &rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto &r : rows)
    out.push_back({{"phase", r.phase}, {"seconds", r.seconds}});
  return out;
}

nlohmann::json GratinReport::to_json(bool include_timings, bool include_gmms) const {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto &c : per_class) {
    nlohmann::json row = {{"label", c.label}, {"n", c.n}, {"K", c.k},
                          {"requested_K", c.requested_k}, {"loglik", c.loglik}};
    if (include_gmms && c.n > 0)
      row["gmm"] = gratin::to_json(c.gmm);
    classes.push_back(std::move(row));
  }
  nlohmann::json out = {{"per_class", classes},
                        {"mean_dev", deviation.mean_dev},
                        {"sup_dev", deviation.sup_dev},
                        {"sup_exact", deviation.sup_exact},
                        {"warnings", warnings}};
  if (include_timings)
    out["timings"] = gratin::to_json(timings.rows());
  return out;
}

AugmentationBatch augment_embeddings(const EmbeddingSet &embeddings, int num_classes,
                                     const GratinOptions &options, GratinReport *report) {
  require(options.samples_per_graph >= 0, "samples_per_graph must be nonnegative");
  GratinReport local;
  GratinReport &rep = report ? *report : local;

  AugmentationBatch batch;
  batch.vectors.resize(0, embeddings.dim());
  batch.origin_class_counts.assign(num_classes, 0);
  std::vector<Matrix> drawn(num_classes);

  for (int c = 0; c < num_classes; ++c) {
    std::vector<int> rows;
    for (int i = 0; i < embeddings.size(); ++i)
      if (embeddings.labels[i] == c)
        rows.push_back(i);
    ClassFit fit;
    fit.label = c;
    fit.n = static_cast<int>(rows.size());
    fit.requested_k = c < static_cast<int>(options.components.size())
                          ? options.components[c]
                          : kDefaultComponents;
    fit.k = fit.requested_k;
    if (rows.empty()) {
      fit.k = 0;
      rep.warnings.push_back("class " + std::to_string(c) +
                             " has no training embeddings; nothing sampled");
      rep.per_class.push_back(std::move(fit));
      continue;
    }
    if (fit.n < fit.k) {
      rep.warnings.push_back("class " + std::to_string(c) + ": K reduced from " +
                             std::to_string(fit.k) + " to " + std::to_string(fit.n));
      fit.k = fit.n;
    }
    Matrix data(fit.n, embeddings.dim());
    for (int i = 0; i < fit.n; ++i)
      data.row(i) = embeddings.vectors.row(rows[i]);

    EmOptions em = options.em;
    em.seed = derive_seed(options.seed, "gmm-fit", c);
    {
      auto probe = rep.timings.probe("gmm_fit");
      fit.gmm = fit_em(data, fit.k, em);
    }
    fit.loglik = fit.gmm.log_likelihood_history.back();
    for (const auto &r : fit.gmm.reseeds)
      rep.warnings.push_back("class " + std::to_string(c) + ": component " +
                             std::to_string(r.component) + " collapsed at iteration " +
                             std::to_string(r.iteration) +
                             (r.accepted ? ", re-seeded" : ", re-seed rejected"));

    const int count = options.samples_per_graph * fit.n;
    {
      auto probe = rep.timings.probe("sample");
      drawn[c] = sample(fit.gmm, count, derive_seed(options.seed, "gmm-sample", c));
    }
    batch.origin_class_counts[c] = count;
    rep.per_class.push_back(std::move(fit));
  }

  int total = 0;
  for (int c = 0; c < num_classes; ++c)
    total += batch.origin_class_counts[c];
  batch.vectors.resize(total, embeddings.dim());
  int pos = 0;
  for (int c = 0; c < num_classes; ++c) {
    const int count = batch.origin_class_counts[c];
    if (count == 0)
      continue;
    batch.vectors.middleRows(pos, count) = drawn[c];
    batch.labels.insert(batch.labels.end(), count, c);
    pos += count;
  }
  return batch;
}

GratinResult run_gratin(const GnnModel &model, std::span<const Graph> train_slice,
                        const GratinOptions &options) {
  require(!train_slice.empty(), "run_gratin: empty training slice");
  GratinResult result;
  {
    auto probe = result.report.timings.probe("embed");
    result.train_embeddings = embed_dataset(model, train_slice);
  }
  result.batch = augment_embeddings(result.train_embeddings, model.num_classes(),
                                    options, &result.report);
  if (result.batch.size() > 0)
    result.report.deviation =
        embedding_deviation(result.train_embeddings.vectors, result.batch.vectors,
                            options.deviation_pairs,
                            derive_seed(options.seed, "deviation"));
  {
    auto probe = result.report.timings.probe("finetune");
    result.model = finetune_head(model, merge(result.train_embeddings, result.batch),
                                 options.finetune);
  }
  return result;
}

DeviationStats embedding_deviation(const Matrix &originals, const Matrix &augmented,
                                   long pairs, std::uint64_t seed, long exhaustive_limit) {
  require(originals.cols() == augmented.cols(), "embedding_deviation: width mismatch");
  DeviationStats out;
  if (originals.rows() == 0 || augmented.rows() == 0)
    return out;
  require(pairs > 0, "embedding_deviation: pairs must be positive");

  Rng rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick_h(0, originals.rows() - 1);
  std::uniform_int_distribution<Eigen::Index> pick_a(0, augmented.rows() - 1);
  double total = 0.0;
  double sampled_sup = 0.0;
  for (long i = 0; i < pairs; ++i) {
    const double dev = (augmented.row(pick_a(rng)) - originals.row(pick_h(rng))).norm();
    total += dev;
    sampled_sup = std::max(sampled_sup, dev);
  }
  out.pairs = pairs;
  out.mean_dev = total / static_cast<double>(pairs);

  const long all_pairs = static_cast<long>(originals.rows()) * augmented.rows();
  if (all_pairs <= exhaustive_limit) {
    double sup = 0.0;
    for (Eigen::Index a = 0; a < augmented.rows(); ++a)
      sup = std::max(sup, (originals.rowwise() - augmented.row(a))
                              .rowwise()
                              .norm()
                              .maxCoeff());
    out.sup_dev = sup;
    out.sup_exact = true;
  } else {
    out.sup_dev = sampled_sup;
    out.sup_exact = false;
  }
  return out;
}

} // namespace gratin
