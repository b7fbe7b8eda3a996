#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "knn_oracle.hpp"
#include "lowdino/eval.hpp"

using namespace lowdino;
using namespace lowdino::eval;
using lowdino::testing::oracle_predict;

namespace {

EmbeddingSet make_set(const std::vector<std::vector<float>>& rows, const std::vector<int>& labels,
                      const std::string& prefix = "r") {
  const int D = static_cast<int>(rows.front().size());
  EmbeddingSet e;
  e.matrix = Tensor<float>({static_cast<int>(rows.size()), D});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (int d = 0; d < D; ++d) e.matrix[r * D + d] = rows[r][d];
    e.ids.push_back(prefix + std::to_string(r));
  }
  e.labels = labels;
  return e;
}

EmbeddingSet random_set(std::mt19937_64& rng, int n, int d, int classes, const std::string& prefix,
                        double separation = 0.0, double noise = 1.0) {
  std::normal_distribution<double> g(0.0, noise);
  std::vector<std::vector<float>> means(classes, std::vector<float>(d));
  std::mt19937_64 mrng(12345);  // class means shared between sets
  std::normal_distribution<double> mg(0.0, 1.0);
  for (auto& m : means)
    for (auto& v : m) v = static_cast<float>(separation * mg(mrng));
  std::vector<std::vector<float>> rows;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    const int c = i % classes;
    std::vector<float> r(d);
    for (int k = 0; k < d; ++k) r[k] = static_cast<float>(means[c][k] + g(rng));
    rows.push_back(r);
    labels.push_back(c);
  }
  return make_set(rows, labels, prefix);
}

std::vector<float> at_similarity(double s) { return {static_cast<float>(s), static_cast<float>(std::sqrt(1 - s * s))}; }

}  // namespace

TEST_CASE("knn worked example: uniform and temperature votes disagree") {
  const auto train = make_set({at_similarity(0.9), at_similarity(0.8), at_similarity(0.99)}, {0, 0, 1}).normalized();
  const float q[2] = {1.0f, 0.0f};
  CHECK(knn_classify(train, q, {.k = 3, .weighting = Weighting::Uniform, .vote_temp = 0.07}) == 0);
  CHECK(knn_classify(train, q, {.k = 3, .weighting = Weighting::Temperature, .vote_temp = 0.07}) == 1);
  // the exponentials behind the temperature vote
  CHECK(std::exp(0.99 / 0.07) > std::exp(0.9 / 0.07) + std::exp(0.8 / 0.07));
}

TEST_CASE("knn query equal to a training row") {
  std::mt19937_64 rng(3);
  const auto train = random_set(rng, 50, 8, 5, "t").normalized();
  for (std::size_t r = 0; r < train.rows(); ++r)
    CHECK(knn_classify(train, train.matrix.data() + r * 8, {.k = 1, .weighting = Weighting::Uniform, .vote_temp = 0.07}) ==
          train.labels[r]);
  // self-match on identical ids is skipped
  const auto same = knn_accuracy(train, train, {.k = 1, .weighting = Weighting::Uniform, .vote_temp = 0.07});
  auto renamed = train;
  for (auto& id : renamed.ids) id += "-q";
  CHECK(knn_accuracy(train, renamed, {.k = 1, .weighting = Weighting::Uniform, .vote_temp = 0.07}).accuracy == 1.0);
  CHECK(same.accuracy < 1.0);
  CHECK_THROWS(knn_classify(train, train.matrix.data(), {.k = 51, .weighting = Weighting::Uniform, .vote_temp = 0.07}));
}

TEST_CASE("knn tie-breaking cases") {
  const float q[2] = {1.0f, 0.0f};
  const KNNConfig uni{.k = 4, .weighting = Weighting::Uniform, .vote_temp = 0.07};
  // 2-2 count tie resolved by summed similarity (1.4 vs 1.5)
  auto a = make_set({at_similarity(0.9), at_similarity(0.5), at_similarity(0.8), at_similarity(0.7),
                     at_similarity(0.1)},
                    {0, 0, 1, 1, 2})
               .normalized();
  CHECK(knn_classify(a, q, uni) == 1);
  CHECK(oracle_predict(a, q, 4, Weighting::Uniform, 0.07) == 1);
  // equal count and equal similarity: smallest label
  auto b = make_set({at_similarity(0.6), at_similarity(0.6), at_similarity(0.2)}, {7, 3, 1}).normalized();
  CHECK(knn_classify(b, q, {.k = 2, .weighting = Weighting::Uniform, .vote_temp = 0.07}) == 3);
  CHECK(knn_classify(b, q, {.k = 2, .weighting = Weighting::Temperature, .vote_temp = 0.07}) == 3);
  CHECK(oracle_predict(b, q, 2, Weighting::Uniform, 0.07) == 3);
  CHECK(oracle_predict(b, q, 2, Weighting::Temperature, 0.07) == 3);
  // equal similarity at the k-th place: lower row index is the neighbour
  auto c = make_set({at_similarity(0.3), at_similarity(0.6), at_similarity(0.6)}, {1, 5, 2}).normalized();
  CHECK(knn_classify(c, q, {.k = 1, .weighting = Weighting::Uniform, .vote_temp = 0.07}) == 5);
  CHECK(knn_classify(c, q, {.k = 1, .weighting = Weighting::Temperature, .vote_temp = 0.07}) == 5);
  CHECK(oracle_predict(c, q, 1, Weighting::Uniform, 0.07) == 5);
}

TEST_CASE("knn agrees with the exhaustive oracle on random instances") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> nd(5, 200), dd(2, 12), cd(2, 6);
  int checked = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const int n = nd(rng), d = dd(rng), classes = cd(rng);
    auto train = random_set(rng, n, d, classes, "t", 0.7).normalized();
    // duplicated rows create exact similarity ties
    if (inst % 4 == 0)
      for (int r = 1; r < n; r += 5)
        for (int k = 0; k < d; ++k) train.matrix[r * d + k] = train.matrix[(r - 1) * d + k];
    const auto test = random_set(rng, 20, d, classes, "q", 0.7).normalized();
    std::uniform_int_distribution<int> kd(1, std::min(n, 30));
    for (auto w : {Weighting::Uniform, Weighting::Temperature}) {
      const int k = kd(rng);
      const KNNConfig cfg{.k = k, .weighting = w, .vote_temp = 0.07};
      for (std::size_t qi = 0; qi < test.rows(); ++qi) {
        const float* q = test.matrix.data() + qi * d;
        CHECK(knn_classify(train, q, cfg) == oracle_predict(train, q, k, w, 0.07));
        ++checked;
      }
    }
  }
  CHECK(checked == 4000);
}

TEST_CASE("knn is invariant to positive scaling") {
  std::mt19937_64 rng(9);
  const auto train = random_set(rng, 150, 6, 4, "t", 0.5);
  const auto test = random_set(rng, 60, 6, 4, "q", 0.5);
  const KNNConfig cfg{.k = 10, .weighting = Weighting::Temperature, .vote_temp = 0.07};
  const auto base = knn_accuracy(train, test, cfg);
  for (float lambda : {0.5f, 3.7f, 1000.0f}) {
    auto tr = train, te = test;
    for (auto& v : tr.matrix.vec()) v *= lambda;
    for (auto& v : te.matrix.vec()) v *= lambda;
    CHECK(knn_accuracy(tr, te, cfg).predictions == base.predictions);
  }
}

TEST_CASE("knn accuracy with random labels is near chance") {
  std::mt19937_64 rng(2024);
  const auto train = random_set(rng, 3000, 16, 10, "t");
  const auto test = random_set(rng, 2000, 16, 10, "q");
  const auto r = knn_accuracy(train, test, {});
  CHECK(r.accuracy == doctest::Approx(0.1).epsilon(0.3));  // 0.1 +- 0.03
  CHECK(r.per_class.size() == 10);
  CHECK(r.predictions.size() == 2000);
}

TEST_CASE("knn per-class accuracy and disjoint labels") {
  const auto train = make_set({{1, 0}, {0, 1}}, {0, 1});
  const auto test = make_set({{1, 0.1f}, {0.1f, 1}, {1, 0}}, {0, 1, 1}, "q");
  const auto r = knn_accuracy(train, test, {.k = 1, .weighting = Weighting::Uniform, .vote_temp = 0.07});
  CHECK(r.accuracy == doctest::Approx(2.0 / 3));
  CHECK(r.per_class.at(0) == 1.0);
  CHECK(r.per_class.at(1) == 0.5);
  const auto other = make_set({{1, 0}}, {5}, "z");
  CHECK(knn_accuracy(train, other, {.k = 1, .weighting = Weighting::Uniform, .vote_temp = 0.07}).accuracy == 0.0);
}

TEST_CASE("subsample_fraction counts and determinism") {
  std::mt19937_64 rng(1);
  const auto set = random_set(rng, 1000, 4, 10, "s");
  const auto s = subsample_fraction(set, 0.3, 5);
  CHECK(s.rows() == 300);
  std::map<int, int> hist;
  for (int l : s.labels) ++hist[l];
  for (const auto& [l, c] : hist) CHECK(c == 30);
  CHECK(subsample_fraction(set, 0.3, 5).ids == s.ids);
  CHECK(subsample_fraction(set, 0.3, 6).ids != s.ids);

  const auto all = subsample_fraction(set, 1.0, 5);
  CHECK(std::set<std::string>(all.ids.begin(), all.ids.end()) == std::set<std::string>(set.ids.begin(), set.ids.end()));

  // uneven classes: round(fraction * count), at least one
  std::vector<std::vector<float>> rows;
  std::vector<int> labels;
  for (auto [label, count] : std::vector<std::pair<int, int>>{{0, 7}, {1, 13}, {2, 50}, {3, 2}})
    for (int i = 0; i < count; ++i) {
      rows.push_back({static_cast<float>(i), 1.0f});
      labels.push_back(label);
    }
  const auto uneven = make_set(rows, labels);
  for (double f : {0.1, 0.3, 0.5}) {
    std::map<int, int> h;
    for (int l : subsample_fraction(uneven, f, 3).labels) ++h[l];
    for (auto [label, count] : std::vector<std::pair<int, int>>{{0, 7}, {1, 13}, {2, 50}, {3, 2}})
      CHECK(h[label] == std::max<long long>(1, std::llround(f * count)));
  }
  CHECK_THROWS(subsample_fraction(uneven, 0.0, 1));
  auto unlabelled = uneven;
  unlabelled.labels[0] = -1;
  CHECK_THROWS(subsample_fraction(unlabelled, 0.5, 1));
}

TEST_CASE("linear probe on separable data") {
  std::mt19937_64 rng(4);
  const auto train = random_set(rng, 200, 5, 2, "t", 3.0, 0.3);
  const auto test = random_set(rng, 200, 5, 2, "q", 3.0, 0.3);
  const auto r = linear_probe(train, test, {});
  CHECK(r.test_accuracy == 1.0);
  CHECK(r.train_accuracy == 1.0);
  CHECK(r.train_rows == 200);
}

TEST_CASE("linear probe data fractions") {
  std::mt19937_64 rng(8);
  const auto train = random_set(rng, 1000, 12, 10, "t", 1.0, 1.0);
  const auto test = random_set(rng, 1000, 12, 10, "q", 1.0, 1.0);
  LinearProbeConfig c10{.epochs = 30, .data_fraction = 0.1, .seed = 2};
  LinearProbeConfig c30 = c10;
  c30.data_fraction = 0.3;
  const auto r10 = linear_probe(train, test, c10), r30 = linear_probe(train, test, c30);
  CHECK(r10.train_rows == 100);
  CHECK(r30.train_rows == 300);
  CHECK(r30.test_accuracy >= r10.test_accuracy);
  // better than always predicting the majority class of its own subsample
  CHECK(r10.train_accuracy >= 0.1);
  CHECK(r30.train_accuracy >= 0.1);
  CHECK(linear_probe(train, test, c10).test_accuracy == r10.test_accuracy);

  LinearProbeConfig loose = c10;
  loose.stratified = false;
  CHECK(linear_probe(train, test, loose).train_rows == 100);
}

TEST_CASE("embedding extraction is deterministic and normalised on request") {
  nets::BackboneConfig bc;
  bc.preset = "custom";
  bc.stem = 4;
  bc.widths = {8};
  bc.depths = {1};
  bc.strides = {1};
  bc.attn_dims = {8};
  bc.attn_layers = {1};
  bc.global_size = 16;
  bc.local_size = 8;
  const nets::Backbone backbone(bc);
  std::mt19937_64 rng(1);
  const auto params = nets::init_params(backbone.param_specs(), rng);
  const auto recs = data::make_synthetic_blobs(2, 3, 13, 0.05, 24).records;

  const auto a = extract_embeddings(backbone, params, recs, 16, 5);
  const auto b = extract_embeddings(backbone, params, recs, 16, 4);
  CHECK(a.rows() == 13);
  CHECK(a == b);
  CHECK(a.ids[0] == recs[0].id);
  CHECK(a.labels[4] == recs[4].label);

  const auto n = extract_embeddings(backbone, params, recs, 16, 8, true);
  CHECK(n.l2_normalized);
  for (std::size_t r = 0; r < n.rows(); ++r) {
    double s = 0;
    for (int d = 0; d < n.dim(); ++d) s += n.matrix[r * n.dim() + d] * n.matrix[r * n.dim() + d];
    CHECK(std::sqrt(s) == doctest::Approx(1.0).epsilon(1e-5));
  }

  auto dup = recs;
  dup[3].id = dup[2].id;
  CHECK_THROWS(extract_embeddings(backbone, params, dup, 16, 8));

  const auto path = std::filesystem::temp_directory_path() / "lowdino_test_embeddings.bin";
  save_embeddings(n, path);
  CHECK(load_embeddings(path) == n);
  std::filesystem::remove(path);
}

TEST_CASE("embedding set validation") {
  auto e = make_set({{3, 4}, {1, 0}}, {0, 1});
  CHECK_NOTHROW(e.validate());
  e.l2_normalized = true;
  CHECK_THROWS(e.validate());
  e.l2_normalized = false;
  CHECK(e.normalized().l2_normalized);
  CHECK_NOTHROW(e.normalized().validate());
  auto bad = make_set({{3, 4}, {1, 0}}, {0});
  CHECK_THROWS(bad.validate());
  CHECK(parse_weighting("uniform") == Weighting::Uniform);
  CHECK(parse_weighting("temperature") == Weighting::Temperature);
  CHECK_THROWS(parse_weighting("softmax?"));
}
