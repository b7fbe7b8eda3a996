// SPDX-License-Identifier: Apache-2.0
#include "lowdino/eval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "lowdino/container.hpp"

namespace lowdino::eval {

void EmbeddingSet::validate() const {
  if (matrix.rank() != 2) throw std::invalid_argument("embedding matrix must be [N,D], got " + shape_str(matrix.shape()));
  const auto n = static_cast<std::size_t>(matrix.dim(0));
  if (labels.size() != n || ids.size() != n)
    throw std::invalid_argument("embedding set: " + std::to_string(n) + " rows but " + std::to_string(labels.size()) +
                                " labels and " + std::to_string(ids.size()) + " ids");
  if (l2_normalized) {
    const int D = dim();
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0;
      for (int d = 0; d < D; ++d) s += static_cast<double>(matrix[r * D + d]) * matrix[r * D + d];
      if (std::abs(std::sqrt(s) - 1.0) > 1e-5)
        throw std::invalid_argument("embedding row " + std::to_string(r) + " is flagged normalised but has norm " +
                                    std::to_string(std::sqrt(s)));
    }
  }
}

EmbeddingSet EmbeddingSet::normalized() const {
  if (l2_normalized) return *this;
  EmbeddingSet out = *this;
  const int D = dim();
  for (std::size_t r = 0; r < rows(); ++r) {
    double s = 0;
    for (int d = 0; d < D; ++d) s += static_cast<double>(matrix[r * D + d]) * matrix[r * D + d];
    const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
    for (int d = 0; d < D; ++d) out.matrix[r * D + d] = static_cast<float>(matrix[r * D + d] * inv);
  }
  out.l2_normalized = true;
  return out;
}

EmbeddingSet EmbeddingSet::select(const std::vector<std::size_t>& rows_) const {
  EmbeddingSet out;
  const int D = dim();
  out.matrix = Tensor<float>({static_cast<int>(rows_.size()), D});
  out.l2_normalized = l2_normalized;
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    std::copy_n(matrix.data() + rows_[i] * D, D, out.matrix.data() + i * D);
    out.labels.push_back(labels.at(rows_[i]));
    out.ids.push_back(ids.at(rows_[i]));
  }
  return out;
}

void save_embeddings(const EmbeddingSet& e, const std::filesystem::path& path) {
  e.validate();
  Container c;
  c.kind = "embedding-set";
  c.meta = {{"N", e.rows()}, {"D", e.dim()}, {"l2_normalized", e.l2_normalized}, {"ids", e.ids}, {"labels", e.labels}};
  c.add("matrix", e.matrix);
  write_container(c, path);
}

EmbeddingSet load_embeddings(const std::filesystem::path& path) {
  const Container c = read_container(path, "embedding-set");
  EmbeddingSet e;
  try {
    e.ids = c.meta.at("ids").get<std::vector<std::string>>();
    e.labels = c.meta.at("labels").get<std::vector<int>>();
    e.l2_normalized = c.meta.at("l2_normalized").get<bool>();
    e.matrix = c.get("matrix");
    if (c.meta.at("N").get<std::size_t>() != e.rows() || c.meta.at("D").get<int>() != e.dim())
      throw FormatError("embedding file " + path.string() + ": header N/D disagree with the payload");
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("embedding file " + path.string() + ": malformed header: " + ex.what());
  }
  e.validate();
  return e;
}

EmbeddingSet extract_embeddings(const nets::Backbone& backbone, const ParameterSet& params,
                                const std::vector<data::ImageRecord>& records, int size, int batch, bool l2_normalize) {
  if (batch < 1) throw std::invalid_argument("extract_embeddings: batch must be >= 1");
  std::set<std::string> seen;
  EmbeddingSet out;
  const int D = backbone.embed_dim();
  out.matrix = Tensor<float>({static_cast<int>(records.size()), D});
  for (std::size_t start = 0; start < records.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(records.size(), start + static_cast<std::size_t>(batch));
    Tensor<float> x({static_cast<int>(end - start), 3, size, size});
    const std::size_t per = 3 * static_cast<std::size_t>(size) * size;
    for (std::size_t i = start; i < end; ++i) {
      const auto v = data::canonical_view(records[i], size);
      std::copy_n(v.data(), per, x.data() + (i - start) * per);
      if (!seen.insert(records[i].id).second) throw std::invalid_argument("duplicate record id '" + records[i].id + "'");
      out.ids.push_back(records[i].id);
      out.labels.push_back(records[i].label.value_or(-1));
    }
    ad::Tape<float> tape(false);
    Binding<float> bind(tape, params, false);
    const auto y = backbone.forward(bind, tape.leaf(x)).value();
    std::copy_n(y.data(), y.size(), out.matrix.data() + start * D);
  }
  return l2_normalize ? out.normalized() : out;
}

Weighting parse_weighting(const std::string& s) {
  if (s == "uniform") return Weighting::Uniform;
  if (s == "temperature") return Weighting::Temperature;
  throw std::invalid_argument("knn weighting must be 'uniform' or 'temperature', got '" + s + "'");
}

int knn_classify(const EmbeddingSet& train, const float* query, const KNNConfig& cfg, const std::string& query_id) {
  const int D = train.dim();
  const std::size_t n = train.rows();
  std::vector<std::pair<double, std::size_t>> sims;
  sims.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (!query_id.empty() && train.ids[r] == query_id) continue;
    double s = 0;
    for (int d = 0; d < D; ++d) s += static_cast<double>(train.matrix[r * D + d]) * query[d];
    sims.emplace_back(s, r);
  }
  if (cfg.k < 1 || static_cast<std::size_t>(cfg.k) > sims.size())
    throw std::invalid_argument("knn: k = " + std::to_string(cfg.k) + " but only " + std::to_string(sims.size()) +
                                " training rows are available");
  auto closer = [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; };
  std::partial_sort(sims.begin(), sims.begin() + cfg.k, sims.end(), closer);

  struct Vote {
    int count = 0;
    double sim = 0;
    double score = 0;
  };
  std::map<int, Vote> votes;  // ascending label order resolves the final tie
  for (int i = 0; i < cfg.k; ++i) {
    auto& v = votes[train.labels[sims[i].second]];
    ++v.count;
    v.sim += sims[i].first;
    v.score += std::exp(sims[i].first / cfg.vote_temp);
  }
  int best = votes.begin()->first;
  const Vote* bv = &votes.begin()->second;
  for (const auto& [label, v] : votes) {
    bool better;
    if (cfg.weighting == Weighting::Uniform)
      better = v.count > bv->count || (v.count == bv->count && v.sim > bv->sim);
    else
      better = v.score > bv->score;
    if (better) best = label, bv = &v;
  }
  return best;
}

KNNReport knn_accuracy(const EmbeddingSet& train, const EmbeddingSet& test, const KNNConfig& cfg) {
  train.validate();
  test.validate();
  if (train.rows() == 0 || test.rows() == 0) throw std::invalid_argument("knn: empty embedding set");
  if (train.dim() != test.dim())
    throw std::invalid_argument("knn: train dim " + std::to_string(train.dim()) + " vs test dim " +
                                std::to_string(test.dim()));
  const EmbeddingSet tr = train.normalized(), te = test.normalized();
  const std::set<int> train_labels(tr.labels.begin(), tr.labels.end());
  bool overlap = false;
  for (int l : te.labels) overlap |= train_labels.count(l) > 0;
  if (!overlap) spdlog::warn("knn: train and test label sets are disjoint");

  KNNReport rep;
  std::map<int, std::pair<int, int>> per;  // label -> (correct, total)
  int correct = 0;
  const int D = te.dim();
  for (std::size_t q = 0; q < te.rows(); ++q) {
    const int pred = knn_classify(tr, te.matrix.data() + q * D, cfg, te.ids[q]);
    rep.predictions.push_back(pred);
    const bool ok = pred == te.labels[q];
    correct += ok;
    per[te.labels[q]].first += ok;
    ++per[te.labels[q]].second;
  }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(te.rows());
  for (const auto& [l, ct] : per) rep.per_class[l] = static_cast<double>(ct.first) / ct.second;
  return rep;
}

EmbeddingSet subsample_fraction(const EmbeddingSet& set, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw std::invalid_argument("subsample: fraction must be in (0,1]");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t r = 0; r < set.rows(); ++r) {
    if (set.labels[r] < 0) throw std::invalid_argument("subsample: row '" + set.ids[r] + "' has no label");
    by_class[set.labels[r]].push_back(r);
  }
  std::vector<std::size_t> rows;
  for (auto& [label, idx] : by_class) {
    if (idx.empty()) throw std::invalid_argument("subsample: class " + std::to_string(label) + " is empty");
    Rng rng(derive_seed({seed, static_cast<std::uint64_t>(label)}));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto take = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * idx.size())));
    rows.insert(rows.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(take, idx.size())));
  }
  return set.select(rows);
}

namespace {

double probe_accuracy(const std::vector<double>& W, const std::vector<double>& b, int C, const EmbeddingSet& e) {
  const int D = e.dim();
  int correct = 0;
  for (std::size_t r = 0; r < e.rows(); ++r) {
    int best = 0;
    double bs = -INFINITY;
    for (int c = 0; c < C; ++c) {
      double s = b[c];
      for (int d = 0; d < D; ++d) s += W[static_cast<std::size_t>(c) * D + d] * e.matrix[r * D + d];
      if (s > bs) bs = s, best = c;
    }
    correct += best == e.labels[r];
  }
  return e.rows() ? static_cast<double>(correct) / static_cast<double>(e.rows()) : 0.0;
}

}  // namespace

ProbeReport linear_probe(const EmbeddingSet& train, const EmbeddingSet& test, const LinearProbeConfig& cfg) {
  train.validate();
  test.validate();
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.lr > 0)) throw std::invalid_argument("linear probe: bad config");
  if (train.dim() != test.dim()) throw std::invalid_argument("linear probe: train/test dims differ");

  EmbeddingSet sub;
  if (cfg.stratified) {
    sub = subsample_fraction(train, cfg.data_fraction, cfg.seed);
    const std::set<int> all(train.labels.begin(), train.labels.end()), got(sub.labels.begin(), sub.labels.end());
    if (all != got) throw std::invalid_argument("linear probe: a class is missing from the stratified subsample");
  } else {
    std::vector<std::size_t> idx(train.rows());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed({cfg.seed, 0x70726f62ULL}));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.data_fraction * idx.size()))));
    sub = train.select(idx);
  }

  int C = 0;
  for (int l : sub.labels) C = std::max(C, l + 1);
  for (int l : test.labels) C = std::max(C, l + 1);
  const int D = sub.dim();
  const std::size_t N = sub.rows();
  std::vector<double> W(static_cast<std::size_t>(C) * D, 0.0), b(static_cast<std::size_t>(C), 0.0);
  std::vector<double> mW(W.size(), 0.0), mb(b.size(), 0.0), gW(W.size()), gb(b.size()), p(static_cast<std::size_t>(C));

  const std::size_t steps_per_epoch = (N + cfg.batch_size - 1) / cfg.batch_size;
  const double total = static_cast<double>(steps_per_epoch) * cfg.epochs;
  std::size_t step = 0;
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < cfg.epochs; ++e) {
    Rng rng(derive_seed({cfg.seed, 0x6570ULL, static_cast<std::uint64_t>(e)}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < N; s += cfg.batch_size, ++step) {
      const std::size_t end = std::min(N, s + cfg.batch_size);
      std::fill(gW.begin(), gW.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t i = s; i < end; ++i) {
        const std::size_t r = order[i];
        const float* x = sub.matrix.data() + r * D;
        double mx = -INFINITY;
        for (int c = 0; c < C; ++c) {
          double z = b[c];
          for (int d = 0; d < D; ++d) z += W[static_cast<std::size_t>(c) * D + d] * x[d];
          p[c] = z;
          mx = std::max(mx, z);
        }
        double sum = 0;
        for (int c = 0; c < C; ++c) sum += p[c] = std::exp(p[c] - mx);
        for (int c = 0; c < C; ++c) {
          const double g = p[c] / sum - (c == sub.labels[r] ? 1.0 : 0.0);
          gb[c] += g;
          for (int d = 0; d < D; ++d) gW[static_cast<std::size_t>(c) * D + d] += g * x[d];
        }
      }
      const double inv = 1.0 / static_cast<double>(end - s);
      const double lr = 0.5 * cfg.lr * (1 + std::cos(std::numbers::pi * step / total));
      for (std::size_t i = 0; i < W.size(); ++i) {
        mW[i] = cfg.momentum * mW[i] + gW[i] * inv;
        W[i] -= lr * mW[i];
      }
      for (std::size_t i = 0; i < b.size(); ++i) {
        mb[i] = cfg.momentum * mb[i] + gb[i] * inv;
        b[i] -= lr * mb[i];
      }
    }
  }
  ProbeReport rep;
  rep.train_rows = N;
  rep.train_accuracy = probe_accuracy(W, b, C, sub);
  rep.test_accuracy = probe_accuracy(W, b, C, test);
  return rep;
}

}  // namespace lowdino::eval
