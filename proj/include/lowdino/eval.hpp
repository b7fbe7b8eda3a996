// SPDX-License-Identifier: Apache-2.0
#pragma once

// Frozen-backbone evaluation: embedding extraction, KNN and linear probes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "lowdino/datapipe.hpp"
#include "lowdino/nets.hpp"

namespace lowdino::eval {

struct EmbeddingSet {
  Tensor<float> matrix;  // [N, D]
  std::vector<int> labels;
  std::vector<std::string> ids;
  bool l2_normalized = false;

  std::size_t rows() const { return ids.size(); }
  int dim() const { return matrix.rank() == 2 ? matrix.dim(1) : 0; }
  /// Row counts agree and, if flagged, every row has unit norm.
  void validate() const;
  EmbeddingSet normalized() const;
  EmbeddingSet select(const std::vector<std::size_t>& rows) const;

  bool operator==(const EmbeddingSet&) const = default;
};

void save_embeddings(const EmbeddingSet& e, const std::filesystem::path& path);
EmbeddingSet load_embeddings(const std::filesystem::path& path);

/// Backbone features of the canonical view (full image resized to `size`),
/// computed `batch` records at a time. Unlabelled records get label -1.
EmbeddingSet extract_embeddings(const nets::Backbone& backbone, const ParameterSet& params,
                                const std::vector<data::ImageRecord>& records, int size, int batch,
                                bool l2_normalize = false);

enum class Weighting { Uniform, Temperature };
Weighting parse_weighting(const std::string& s);

struct KNNConfig {
  int k = 20;
  Weighting weighting = Weighting::Temperature;
  double vote_temp = 0.07;
};

/// Predicted label of `query` (length D) against normalised training rows.
/// A training row whose id equals `query_id` is skipped.
int knn_classify(const EmbeddingSet& train, const float* query, const KNNConfig& cfg,
                 const std::string& query_id = "");

struct KNNReport {
  double accuracy = 0;
  std::map<int, double> per_class;
  std::vector<int> predictions;
};

/// Both sets are L2-normalised internally.
KNNReport knn_accuracy(const EmbeddingSet& train, const EmbeddingSet& test, const KNNConfig& cfg);

struct LinearProbeConfig {
  int epochs = 30;
  double data_fraction = 1.0;
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 64;
  bool stratified = true;
  std::uint64_t seed = 0;
};

struct ProbeReport {
  double test_accuracy = 0;
  double train_accuracy = 0;
  std::size_t train_rows = 0;
};

ProbeReport linear_probe(const EmbeddingSet& train, const EmbeddingSet& test, const LinearProbeConfig& cfg);

/// Stratified subsample: round(fraction * class count) rows per class, at
/// least one; rows ordered by class, then by draw.
EmbeddingSet subsample_fraction(const EmbeddingSet& set, double fraction, std::uint64_t seed);

}  // namespace lowdino::eval
