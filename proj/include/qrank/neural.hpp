#pragma once

// Small neural toolkit with hand-written backward passes: dense layers, a
// graph convolution stack, a mean-pooled embedding bag, softmax/NCE losses and
// Adam. Everything is float64; parameters and gradients live side by side in
// Param so an optimizer can walk a flat list.

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qrank/common.hpp"
#include "qrank/dsl.hpp"

namespace qrank::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

struct Param {
  std::string name;
  Mat value;
  Mat grad;

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)) {}
  void zero_grad() { grad.setZero(); }
};

// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
inline void glorot_uniform(Mat& m, Rng& rng, double fan_in, double fan_out) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -a, a);
}

inline void check_finite(const Mat& m, std::string_view what) {
  if (!m.allFinite()) throw ModelError("non-finite values in " + std::string(what));
}

// ---------------------------------------------------------------------------
// Dense: y = W x + b

struct Dense {
  Param W;  // out x in
  Param b;  // out x 1

  Dense() = default;
  Dense(std::string name, Eigen::Index in, Eigen::Index out)
      : W(name + ".W", out, in), b(name + ".b", out, 1) {}

  Eigen::Index in() const { return W.value.cols(); }
  Eigen::Index out() const { return W.value.rows(); }

  void init(Rng& rng) {
    glorot_uniform(W.value, rng, double(in()), double(out()));
    b.value.setZero();
  }

  Vec forward(const Vec& x) const {
    if (x.size() != in())
      throw InvalidArgument("dense layer " + W.name + " expects input width " +
                            std::to_string(in()) + ", got " + std::to_string(x.size()));
    return W.value * x + b.value.col(0);
  }

  // Accumulates dW, db; returns dx.
  Vec backward(const Vec& x, const Vec& dy) {
    if (dy.size() != out() || x.size() != in())
      throw InvalidArgument("dense backward shape mismatch in " + W.name);
    W.grad.noalias() += dy * x.transpose();
    b.grad.col(0) += dy;
    return W.value.transpose() * dy;
  }

  // Row-batched form: each row of X is one input.
  Mat forward_rows(const Mat& X) const {
    if (X.cols() != in()) throw InvalidArgument("dense layer " + W.name + " width mismatch");
    Mat Y = X * W.value.transpose();
    Y.rowwise() += b.value.col(0).transpose();
    return Y;
  }

  Mat backward_rows(const Mat& X, const Mat& dY) {
    W.grad.noalias() += dY.transpose() * X;
    b.grad.col(0) += dY.colwise().sum().transpose();
    return dY * W.value;
  }

  std::vector<Param*> params() { return {&W, &b}; }
};

inline Vec relu(const Vec& x) { return x.cwiseMax(0.0); }
inline Mat relu(const Mat& x) { return x.cwiseMax(0.0); }

// dy masked by the positive part of the pre-activation.
inline Vec relu_backward(const Vec& pre, const Vec& dy) {
  return (pre.array() > 0.0).select(dy, 0.0);
}
inline Mat relu_backward(const Mat& pre, const Mat& dy) {
  return (pre.array() > 0.0).select(dy, 0.0);
}

// Linear(ReLU(Linear(x))) with a tape for backward.
struct Mlp2 {
  Dense l1;
  Dense l2;

  Mlp2() = default;
  Mlp2(const std::string& name, Eigen::Index in, Eigen::Index hidden, Eigen::Index out)
      : l1(name + ".l1", in, hidden), l2(name + ".l2", hidden, out) {}

  void init(Rng& rng) {
    l1.init(rng);
    l2.init(rng);
  }

  struct Tape {
    Vec x, pre, h;
  };

  Vec forward(const Vec& x, Tape& t) const {
    t.x = x;
    t.pre = l1.forward(x);
    t.h = relu(t.pre);
    return l2.forward(t.h);
  }
  Vec forward(const Vec& x) const {
    Tape t;
    return forward(x, t);
  }
  Vec backward(const Tape& t, const Vec& dy) {
    const Vec dh = l2.backward(t.h, dy);
    return l1.backward(t.x, relu_backward(t.pre, dh));
  }

  struct RowTape {
    Mat x, pre, h;
  };
  Mat forward_rows(const Mat& X, RowTape& t) const {
    t.x = X;
    t.pre = l1.forward_rows(X);
    t.h = relu(t.pre);
    return l2.forward_rows(t.h);
  }
  Mat backward_rows(const RowTape& t, const Mat& dY) {
    const Mat dh = l2.backward_rows(t.h, dY);
    return l1.backward_rows(t.x, relu_backward(t.pre, dh));
  }

  std::vector<Param*> params() { return {&l1.W, &l1.b, &l2.W, &l2.b}; }
};

// ---------------------------------------------------------------------------
// Graph convolution: H^{l+1} = ReLU(Â H^l W^l), Â = D^-1/2 (A + I) D^-1/2.

struct PreparedGraph {
  Mat adj;  // Â, N x N
  Mat x;    // node features, N x F
  std::size_t root = 0;
  std::map<int, std::size_t> blanks;  // b_i (1-based) -> node

  std::size_t num_nodes() const { return static_cast<std::size_t>(x.rows()); }
};

inline PreparedGraph prepare_graph(const dsl::AstGraph& g) {
  const auto n = static_cast<Eigen::Index>(g.num_nodes());
  if (n == 0) throw InvalidArgument("graph has no nodes");
  PreparedGraph p;
  p.x = Mat::Zero(n, static_cast<Eigen::Index>(g.features.front().size()));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p.x.cols(); ++j) p.x(i, j) = g.features[i][j];
  Mat a = Mat::Identity(n, n);
  for (auto [u, v] : g.edges) {
    a(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v)) = 1.0;
    a(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(u)) = 1.0;
  }
  Vec dinv = a.rowwise().sum().cwiseSqrt().cwiseInverse();
  p.adj = dinv.asDiagonal() * a * dinv.asDiagonal();
  p.root = g.root_index;
  p.blanks = g.blank_indices;
  return p;
}

struct GcnStack {
  std::vector<Param> W;  // layer l: in x out

  GcnStack() = default;
  GcnStack(Eigen::Index in, Eigen::Index hidden, int depth) {
    if (depth < 1) throw InvalidArgument("GCN depth must be at least 1");
    for (int l = 0; l < depth; ++l)
      W.emplace_back("gcn.W" + std::to_string(l), l == 0 ? in : hidden, hidden);
  }

  int depth() const { return static_cast<int>(W.size()); }
  Eigen::Index hidden() const { return W.back().value.cols(); }
  Eigen::Index in() const { return W.front().value.rows(); }

  void init(Rng& rng) {
    for (auto& w : W) glorot_uniform(w.value, rng, double(w.value.rows()), double(w.value.cols()));
  }

  struct Tape {
    const PreparedGraph* g = nullptr;
    std::vector<std::size_t> rows;
    std::vector<Mat> h;    // input to each layer (h[0] = x)
    std::vector<Mat> agg;  // Â h (last layer: only the requested rows)
    std::vector<Mat> pre;  // agg W
  };

  // Output vectors of the requested nodes (|rows| x hidden). The last layer
  // is evaluated only for those rows.
  Mat forward(const PreparedGraph& g, const std::vector<std::size_t>& rows, Tape& t) const {
    if (g.x.cols() != in()) throw InvalidArgument("graph feature width mismatch");
    t.g = &g;
    t.rows = rows;
    t.h.assign(1, g.x);
    t.agg.clear();
    t.pre.clear();
    const int L = depth();
    for (int l = 0; l < L; ++l) {
      Mat agg;
      if (l + 1 < L) {
        agg = g.adj * t.h.back();
      } else {
        Mat sel(static_cast<Eigen::Index>(rows.size()), g.adj.cols());
        for (std::size_t r = 0; r < rows.size(); ++r)
          sel.row(static_cast<Eigen::Index>(r)) = g.adj.row(static_cast<Eigen::Index>(rows[r]));
        agg = sel * t.h.back();
      }
      Mat pre = agg * W[l].value;
      t.agg.push_back(std::move(agg));
      if (l + 1 < L) t.h.push_back(relu(pre));
      t.pre.push_back(std::move(pre));
    }
    return relu(t.pre.back());
  }

  Mat forward(const PreparedGraph& g, const std::vector<std::size_t>& rows) const {
    Tape t;
    return forward(g, rows, t);
  }

  // Every node's output vector.
  Mat encode(const PreparedGraph& g) const {
    std::vector<std::size_t> rows(g.num_nodes());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return forward(g, rows);
  }

  void backward(const Tape& t, const Mat& d_out) {
    const int L = depth();
    const PreparedGraph& g = *t.g;
    Mat dpre = relu_backward(t.pre.back(), d_out);
    Mat dh;  // gradient w.r.t. the input of the current layer
    for (int l = L - 1; l >= 0; --l) {
      W[l].grad.noalias() += t.agg[l].transpose() * dpre;
      if (l == 0) break;
      const Mat dagg = dpre * W[l].value.transpose();
      if (l == L - 1) {
        dh = Mat::Zero(g.adj.rows(), dagg.cols());
        for (std::size_t r = 0; r < t.rows.size(); ++r)
          dh.noalias() += g.adj.row(static_cast<Eigen::Index>(t.rows[r])).transpose() *
                          dagg.row(static_cast<Eigen::Index>(r));
      } else {
        dh.noalias() = g.adj.transpose() * dagg;
      }
      dpre = relu_backward(t.pre[l - 1], dh);
    }
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (auto& w : W) out.push_back(&w);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Text encoder: lowercase, split on non-alphanumerics, mean of embeddings.

inline std::vector<std::string> tokenize_text(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct TextEncoder {
  static constexpr std::string_view kOov = "<oov>";
  std::vector<std::string> vocab;  // row i <-> vocab[i]; row 0 is OOV
  std::map<std::string, int> index;
  Param E;

  TextEncoder() = default;

  // Vocabulary: tokens with at least min_count occurrences, sorted.
  static TextEncoder build(const std::vector<std::vector<std::string>>& docs,
                           Eigen::Index dim, std::size_t min_count = 2) {
    std::map<std::string, std::size_t> freq;
    for (const auto& d : docs)
      for (const auto& t : d) freq[t] += 1;
    std::vector<std::string> words = {std::string(kOov)};
    for (const auto& [w, c] : freq)
      if (c >= min_count && w != kOov) words.push_back(w);
    return from_vocab(words, dim);
  }

  static TextEncoder from_vocab(std::vector<std::string> words, Eigen::Index dim) {
    if (words.empty() || words.front() != kOov)
      words.insert(words.begin(), std::string(kOov));
    TextEncoder enc;
    enc.vocab = std::move(words);
    for (std::size_t i = 0; i < enc.vocab.size(); ++i)
      enc.index[enc.vocab[i]] = static_cast<int>(i);
    enc.E = Param("text.E", static_cast<Eigen::Index>(enc.vocab.size()), dim);
    return enc;
  }

  Eigen::Index dim() const { return E.value.cols(); }

  void init(Rng& rng) { glorot_uniform(E.value, rng, double(E.value.rows()), double(dim())); }

  std::vector<int> ids(const std::vector<std::string>& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) {
      auto it = index.find(t);
      out.push_back(it == index.end() ? 0 : it->second);
    }
    return out;
  }

  Vec forward(const std::vector<int>& ids) const {
    Vec v = Vec::Zero(dim());
    if (ids.empty()) return v;
    for (int i : ids) v += E.value.row(i).transpose();
    return v / static_cast<double>(ids.size());
  }

  void backward(const std::vector<int>& ids, const Vec& dv) {
    if (ids.empty()) return;
    const double s = 1.0 / static_cast<double>(ids.size());
    for (int i : ids) E.grad.row(i) += s * dv.transpose();
  }

  Vec encode(std::string_view text) const { return forward(ids(tokenize_text(text))); }

  std::vector<Param*> params() { return {&E}; }
};

// ---------------------------------------------------------------------------
// Losses

inline Vec softmax(const Vec& s) {
  if (s.size() == 0) return s;
  const double mx = s.maxCoeff();
  Vec e = (s.array() - mx).exp();
  return e / e.sum();
}

inline Vec log_softmax(const Vec& s) {
  const double mx = s.maxCoeff();
  const double lse = mx + std::log((s.array() - mx).exp().sum());
  return s.array() - lse;
}

struct LossGrad {
  double loss = 0;
  Vec grad;  // d loss / d scores
};

// −log softmax(scores)[target]
inline LossGrad cross_entropy(const Vec& scores, Eigen::Index target) {
  if (target < 0 || target >= scores.size()) throw InvalidArgument("target out of range");
  const Vec p = softmax(scores);
  LossGrad r;
  r.loss = -log_softmax(scores)(target);
  r.grad = p;
  r.grad(target) -= 1.0;
  return r;
}

// NCE log-loss: the positive against m sampled negatives,
// −log softmax(positive | {positive} ∪ negatives). grad[0] is the positive.
inline LossGrad nce_loss(double positive, const Vec& negatives) {
  if (negatives.size() < 1) throw InvalidArgument("NCE needs at least one negative");
  Vec s(negatives.size() + 1);
  s(0) = positive;
  s.tail(negatives.size()) = negatives;
  return cross_entropy(s, 0);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Mat> m;
  std::vector<Mat> v;

  // One update from the accumulated gradients, which are then reset to zero.
  // Throws before touching any parameter if a gradient is not finite.
  void step_params(const std::vector<Param*>& params) {
    if (m.empty()) {
      for (auto* p : params) {
        m.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
        v.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
      }
    }
    if (m.size() != params.size()) throw InvalidArgument("Adam state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (m[i].rows() != params[i]->value.rows() || m[i].cols() != params[i]->value.cols())
        throw InvalidArgument("Adam moment shape mismatch for " + params[i]->name);
      // A sum is non-finite iff some term is (or the terms overflow).
      if (!std::isfinite(params[i]->grad.sum())) check_finite(params[i]->grad, "gradient of " + params[i]->name);
    }
    ++step;
    const double c1 = 1.0 - std::pow(beta1, double(step));
    const double c2 = 1.0 - std::pow(beta2, double(step));
    const double a1 = 1.0 - beta1;
    const double a2 = 1.0 - beta2;
    const double step_size = lr / c1;
    const double inv_sqrt_c2 = 1.0 / std::sqrt(c2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      double* __restrict w = params[i]->value.data();
      double* __restrict g = params[i]->grad.data();
      double* __restrict mi = m[i].data();
      double* __restrict vi = v[i].data();
      const Eigen::Index n = params[i]->value.size();
      for (Eigen::Index j = 0; j < n; ++j) {
        const double gj = g[j];
        mi[j] = beta1 * mi[j] + a1 * gj;
        vi[j] = beta2 * vi[j] + a2 * gj * gj;
        w[j] -= step_size * mi[j] / (std::sqrt(vi[j]) * inv_sqrt_c2 + eps);
        g[j] = 0.0;
      }
    }
  }
};

inline void zero_grads(const std::vector<Param*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace qrank::nn
