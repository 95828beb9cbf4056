#pragma once

// Tape-based reverse-mode differentiation over row-major matrices.
//
// Sentences of a batch are packed row-wise into one matrix; row-local ops
// (linear, layer norm, relu, ...) run on the whole batch at once and only
// attention looks at segment boundaries.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "robomt/common.hpp"

namespace robomt::graph {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// A contiguous block of rows belonging to one sentence (or one image).
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

template <class T>
struct ParamRef {
  const Mat<T>* value = nullptr;
  Mat<T>* grad = nullptr;  // null when gradients are not wanted
};

using Var = std::size_t;

/// Per-segment, per-head attention probabilities captured during a forward
/// pass (only when Graph::capture_attention is set).
template <class T>
struct AttentionCapture {
  std::vector<std::vector<Mat<T>>> probs;  // [segment][head] -> (q_len, k_len)
};

template <class T>
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}

  bool recording() const { return record_; }
  bool capture_attention = false;
  std::vector<AttentionCapture<T>> captures;

  const Mat<T>& value(Var v) const { return nodes_[v].value; }
  Mat<T>& grad(Var v) { return nodes_[v].grad; }
  std::size_t size() const { return nodes_.size(); }

  Var input(Mat<T> m) { return push(std::move(m)); }

  /// Token embedding times `scale`, plus sinusoidal position of each row
  /// within its segment.
  Var embed(ParamRef<T> table, std::span<const std::int32_t> ids, std::span<const Segment> segs, T scale) {
    const Eigen::Index d = table.value->cols();
    Mat<T> out(static_cast<Eigen::Index>(ids.size()), d);
    for (const auto& s : segs) {
      for (std::size_t p = 0; p < s.length; ++p) {
        const auto row = static_cast<Eigen::Index>(s.offset + p);
        const auto id = ids[s.offset + p];
        if (id < 0 || id >= table.value->rows()) throw DataError("token id " + std::to_string(id) + " out of range");
        out.row(row) = table.value->row(id) * scale;
        add_position(out.row(row), p);
      }
    }
    const Var v = push(std::move(out));
    if (record_ && table.grad) {
      std::vector<std::int32_t> ids_copy(ids.begin(), ids.end());
      on_backward([this, v, table, ids_copy = std::move(ids_copy), scale] {
        const Mat<T>& g = nodes_[v].grad;
        for (std::size_t r = 0; r < ids_copy.size(); ++r) table.grad->row(ids_copy[r]) += g.row(static_cast<Eigen::Index>(r)) * scale;
      });
    }
    return v;
  }

  /// x W + b
  Var linear(Var x, ParamRef<T> w, ParamRef<T> b) {
    Mat<T> out = nodes_[x].value * *w.value;
    out.rowwise() += b.value->row(0);
    const Var v = push(std::move(out));
    if (record_) {
      on_backward([this, v, x, w, b] {
        const Mat<T>& g = nodes_[v].grad;
        if (w.grad) w.grad->noalias() += nodes_[x].value.transpose() * g;
        if (b.grad) b.grad->row(0) += g.colwise().sum();
        nodes_[x].grad.noalias() += g * w.value->transpose();
      });
    }
    return v;
  }

  Var layer_norm(Var x, ParamRef<T> gain, ParamRef<T> bias, T eps = T(1e-5)) {
    const Mat<T>& in = nodes_[x].value;
    const Eigen::Index n = in.rows(), d = in.cols();
    Mat<T> xhat(n, d);
    std::vector<T> inv_std(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r) {
      const T mu = in.row(r).mean();
      const T var = (in.row(r).array() - mu).square().mean();
      inv_std[static_cast<std::size_t>(r)] = T(1) / std::sqrt(var + eps);
      xhat.row(r) = (in.row(r).array() - mu) * inv_std[static_cast<std::size_t>(r)];
    }
    Mat<T> out = xhat.array().rowwise() * gain.value->row(0).array();
    out.rowwise() += bias.value->row(0);
    const Var v = push(std::move(out));
    if (record_) {
      on_backward([this, v, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
        const Mat<T>& g = nodes_[v].grad;
        const Eigen::Index d = g.cols();
        if (gain.grad) gain.grad->row(0) += (g.array() * xhat.array()).colwise().sum().matrix();
        if (bias.grad) bias.grad->row(0) += g.colwise().sum();
        Mat<T>& dx = nodes_[x].grad;
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const RowVec<T> dxhat = (g.row(r).array() * gain.value->row(0).array()).matrix();
          const T s1 = dxhat.sum();
          const T s2 = dxhat.dot(xhat.row(r));
          dx.row(r).array() += (inv_std[static_cast<std::size_t>(r)] / T(d)) *
                               (T(d) * dxhat.array() - s1 - xhat.row(r).array() * s2);
        }
      });
    }
    return v;
  }

  Var relu(Var x) {
    Mat<T> out = nodes_[x].value.cwiseMax(T(0));
    const Var v = push(std::move(out));
    if (record_) {
      on_backward([this, v, x] {
        nodes_[x].grad.array() += (nodes_[x].value.array() > T(0)).select(nodes_[v].grad.array(), T(0));
      });
    }
    return v;
  }

  Var add(Var a, Var b) {
    Mat<T> out = nodes_[a].value + nodes_[b].value;
    const Var v = push(std::move(out));
    if (record_) {
      on_backward([this, v, a, b] {
        nodes_[a].grad += nodes_[v].grad;
        nodes_[b].grad += nodes_[v].grad;
      });
    }
    return v;
  }

  /// Inverted dropout; identity when p == 0 or when no rng is supplied.
  Var dropout(Var x, T p, Rng* rng) {
    if (p <= T(0) || rng == nullptr) return x;
    const Mat<T>& in = nodes_[x].value;
    Mat<T> mask(in.rows(), in.cols());
    const T keep_scale = T(1) / (T(1) - p);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng->uniform() < double(p) ? T(0) : keep_scale;
    Mat<T> out = in.cwiseProduct(mask);
    const Var v = push(std::move(out));
    if (record_) {
      on_backward([this, v, x, mask = std::move(mask)] { nodes_[x].grad += nodes_[v].grad.cwiseProduct(mask); });
    }
    return v;
  }

  /// Multi-head scaled dot-product attention. Query segment i attends over
  /// key segment i; with `causal`, query row p only sees key rows <= p.
  Var attention(Var q, Var k, Var val, std::span<const Segment> qsegs, std::span<const Segment> ksegs,
                int heads, bool causal) {
    const Mat<T>& Q = nodes_[q].value;
    const Mat<T>& K = nodes_[k].value;
    const Mat<T>& V = nodes_[val].value;
    const Eigen::Index d = Q.cols();
    const Eigen::Index dk = d / heads;
    const T scale = T(1) / std::sqrt(T(dk));
    Mat<T> out = Mat<T>::Zero(Q.rows(), d);
    std::vector<Mat<T>> probs;
    probs.reserve(qsegs.size() * static_cast<std::size_t>(heads));
    AttentionCapture<T> capture;
    for (std::size_t s = 0; s < qsegs.size(); ++s) {
      const auto qo = static_cast<Eigen::Index>(qsegs[s].offset), ql = static_cast<Eigen::Index>(qsegs[s].length);
      const auto ko = static_cast<Eigen::Index>(ksegs[s].offset), kl = static_cast<Eigen::Index>(ksegs[s].length);
      if (capture_attention) capture.probs.emplace_back();
      for (int h = 0; h < heads; ++h) {
        const Eigen::Index c = h * dk;
        Mat<T> S = (Q.block(qo, c, ql, dk) * K.block(ko, c, kl, dk).transpose()) * scale;
        for (Eigen::Index i = 0; i < ql; ++i) {
          auto row = S.row(i);
          const Eigen::Index visible = causal ? std::min<Eigen::Index>(i + 1, kl) : kl;
          const T mx = row.head(visible).maxCoeff();
          row.head(visible) = (row.head(visible).array() - mx).exp().matrix();
          if (visible < kl) row.tail(kl - visible).setZero();
          row /= row.sum();
        }
        out.block(qo, c, ql, dk).noalias() = S * V.block(ko, c, kl, dk);
        if (capture_attention) capture.probs.back().push_back(S);
        probs.push_back(std::move(S));
      }
    }
    if (capture_attention) captures.push_back(std::move(capture));
    const Var v = push(std::move(out));
    if (record_) {
      std::vector<Segment> qs(qsegs.begin(), qsegs.end()), ks(ksegs.begin(), ksegs.end());
      on_backward([this, v, q, k, val, qs = std::move(qs), ks = std::move(ks), heads, dk, scale,
                   probs = std::move(probs)] {
        const Mat<T>& G = nodes_[v].grad;
        const Mat<T>& Q = nodes_[q].value;
        const Mat<T>& K = nodes_[k].value;
        const Mat<T>& V = nodes_[val].value;
        Mat<T>& dQ = nodes_[q].grad;
        Mat<T>& dK = nodes_[k].grad;
        Mat<T>& dV = nodes_[val].grad;
        std::size_t pi = 0;
        for (std::size_t s = 0; s < qs.size(); ++s) {
          const auto qo = static_cast<Eigen::Index>(qs[s].offset), ql = static_cast<Eigen::Index>(qs[s].length);
          const auto ko = static_cast<Eigen::Index>(ks[s].offset), kl = static_cast<Eigen::Index>(ks[s].length);
          for (int h = 0; h < heads; ++h, ++pi) {
            const Eigen::Index c = h * dk;
            const Mat<T>& P = probs[pi];
            const auto dO = G.block(qo, c, ql, dk);
            dV.block(ko, c, kl, dk).noalias() += P.transpose() * dO;
            Mat<T> dP = dO * V.block(ko, c, kl, dk).transpose();
            const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = (dP.array() * P.array()).rowwise().sum();
            Mat<T> dS = P.array() * (dP.array().colwise() - rs.array());
            dS *= scale;
            dQ.block(qo, c, ql, dk).noalias() += dS * K.block(ko, c, kl, dk);
            dK.block(ko, c, kl, dk).noalias() += dS.transpose() * Q.block(qo, c, ql, dk);
          }
        }
      });
    }
    return v;
  }

  /// Summed negative log-likelihood of `targets` under row-wise softmax of
  /// `logits`. Returns a 1x1 node. `correct` (optional) receives the number
  /// of rows whose argmax equals the target.
  Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::size_t* correct = nullptr) {
    const Mat<T>& L = nodes_[logits].value;
    Mat<T> probs(L.rows(), L.cols());
    T total = 0;
    std::size_t hits = 0;
    for (Eigen::Index r = 0; r < L.rows(); ++r) {
      const T mx = L.row(r).maxCoeff();
      probs.row(r) = (L.row(r).array() - mx).exp().matrix();
      const T z = probs.row(r).sum();
      probs.row(r) /= z;
      const auto t = targets[static_cast<std::size_t>(r)];
      total += std::log(z) + mx - L(r, t);
      Eigen::Index arg;
      L.row(r).maxCoeff(&arg);
      if (arg == t) ++hits;
    }
    if (correct) *correct = hits;
    Mat<T> out(1, 1);
    out(0, 0) = total;
    const Var v = push(std::move(out));
    if (record_) {
      std::vector<std::int32_t> tg(targets.begin(), targets.end());
      on_backward([this, v, logits, probs = std::move(probs), tg = std::move(tg)]() mutable {
        const T up = nodes_[v].grad(0, 0);
        if (up == T(0)) return;
        for (std::size_t r = 0; r < tg.size(); ++r) probs(static_cast<Eigen::Index>(r), tg[r]) -= T(1);
        nodes_[logits].grad += probs * up;
      });
    }
    return v;
  }

  /// Runs the tape backwards. `seeds` gives d(objective)/d(node) for scalar
  /// output nodes.
  void backward(std::span<const std::pair<Var, T>> seeds) {
    for (auto& n : nodes_) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    for (const auto& [v, g] : seeds) nodes_[v].grad(0, 0) += g;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
  };

  Var push(Mat<T> m) {
    nodes_.push_back(Node{std::move(m), {}});
    return nodes_.size() - 1;
  }

  void on_backward(std::function<void()> f) { tape_.push_back(std::move(f)); }

  template <class Row>
  static void add_position(Row&& row, std::size_t pos) {
    const Eigen::Index d = row.cols();
    for (Eigen::Index i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -double(i) / double(d));
      row(i) += T(std::sin(double(pos) * freq));
      if (i + 1 < d) row(i + 1) += T(std::cos(double(pos) * freq));
    }
  }

  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::function<void()>> tape_;
};

}  // namespace robomt::graph
