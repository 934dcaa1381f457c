#pragma once

// Small reverse-mode autodiff over Eigen matrices. A Tape owns the graph of
// one forward pass; Params persist across steps and receive gradients on
// backward(). Templated on the scalar so training runs in float while
// finite-difference checks instantiate double.

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace osf::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
struct Param {
  std::string name;
  Mat<S> value;
  Mat<S> grad;
  // AdamW state
  Mat<S> adam_m, adam_v;

  void ensure_state() {
    if (grad.size() == 0) grad = Mat<S>::Zero(value.rows(), value.cols());
    if (adam_m.size() == 0) adam_m = Mat<S>::Zero(value.rows(), value.cols());
    if (adam_v.size() == 0) adam_v = Mat<S>::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
  long size() const { return static_cast<long>(value.size()); }
};

template <class S>
class Tape;

template <class S>
struct Tensor {
  Tape<S>* tape = nullptr;
  int idx = -1;

  const Mat<S>& val() const;
  long rows() const { return val().rows(); }
  long cols() const { return val().cols(); }
};

template <class S>
class Tape {
 public:
  struct Node {
    Mat<S> val;
    Mat<S> grad;
    bool requires_grad = false;
    std::function<void()> backward;  // accumulates into parent grads
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Node& node(int i) { return nodes_[i]; }
  const Node& node(int i) const { return nodes_[i]; }
  size_t size() const { return nodes_.size(); }

  Tensor<S> make(Mat<S> val, bool requires_grad, std::function<void()> backward = nullptr) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = requires_grad;
    if (requires_grad) n.grad = Mat<S>::Zero(n.val.rows(), n.val.cols());
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Tensor<S>{this, static_cast<int>(nodes_.size() - 1)};
  }

  Tensor<S> constant(Mat<S> val) { return make(std::move(val), false); }

  Tensor<S> leaf(Param<S>& p) {
    p.ensure_state();
    Tape* self = this;
    int idx = static_cast<int>(nodes_.size());
    Param<S>* pp = &p;
    return make(p.value, true, [self, idx, pp]() { pp->grad += self->node(idx).grad; });
  }

  // Non-persistent differentiable input (for gradient probes on activations).
  Tensor<S> input(Mat<S> val) { return make(std::move(val), true); }

  void backward(const Tensor<S>& loss) {
    Node& ln = nodes_[loss.idx];
    if (ln.val.size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    if (!ln.requires_grad) return;
    ln.grad(0, 0) = S(1);
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward();
    }
  }

  // grad of a non-leaf node after backward(), for tests
  const Mat<S>& grad_of(const Tensor<S>& t) const { return nodes_[t.idx].grad; }

 private:
  std::deque<Node> nodes_;
};

template <class S>
const Mat<S>& Tensor<S>::val() const {
  return tape->node(idx).val;
}

namespace detail {

template <class S>
inline bool rg(const Tensor<S>& t) {
  return t.tape->node(t.idx).requires_grad;
}

template <class S>
inline void accum(const Tensor<S>& t, const Mat<S>& g) {
  auto& n = t.tape->node(t.idx);
  if (n.requires_grad) n.grad += g;
}

}  // namespace detail

// ---- elementwise / linear algebra ----

template <class S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
  if (a.val().rows() != b.val().rows() || a.val().cols() != b.val().cols())
    throw std::invalid_argument("add: shape mismatch");
  auto* tp = a.tape;
  Tensor<S> out = tp->make(a.val() + b.val(), detail::rg(a) || detail::rg(b));
  tp->node(out.idx).backward = [tp, out, a, b]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    detail::accum(a, g);
    detail::accum(b, g);
  };
  return out;
}

template <class S>
Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
  auto* tp = a.tape;
  Tensor<S> out = tp->make(a.val() - b.val(), detail::rg(a) || detail::rg(b));
  tp->node(out.idx).backward = [tp, out, a, b]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    detail::accum(a, g);
    detail::accum(b, Mat<S>(-g));
  };
  return out;
}

// broadcast a 1 x C row over all rows of a
template <class S>
Tensor<S> add_rowvec(Tensor<S> a, Tensor<S> row) {
  if (row.val().rows() != 1 || row.val().cols() != a.val().cols())
    throw std::invalid_argument("add_rowvec: need 1 x C row");
  auto* tp = a.tape;
  Mat<S> v = a.val();
  v.rowwise() += Eigen::Matrix<S, 1, Eigen::Dynamic>(row.val().row(0));
  Tensor<S> out = tp->make(std::move(v), detail::rg(a) || detail::rg(row));
  tp->node(out.idx).backward = [tp, out, a, row]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    detail::accum(a, g);
    detail::accum(row, Mat<S>(g.colwise().sum()));
  };
  return out;
}

template <class S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
  auto* tp = a.tape;
  Tensor<S> out =
      tp->make(Mat<S>(a.val().cwiseProduct(b.val())), detail::rg(a) || detail::rg(b));
  tp->node(out.idx).backward = [tp, out, a, b]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    detail::accum(a, Mat<S>(g.cwiseProduct(b.val())));
    detail::accum(b, Mat<S>(g.cwiseProduct(a.val())));
  };
  return out;
}

template <class S>
Tensor<S> scale(Tensor<S> a, S s) {
  auto* tp = a.tape;
  Tensor<S> out = tp->make(Mat<S>(a.val() * s), detail::rg(a));
  tp->node(out.idx).backward = [tp, out, a, s]() {
    detail::accum(a, Mat<S>(tp->node(out.idx).grad * s));
  };
  return out;
}

template <class S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
  if (a.val().cols() != b.val().rows()) throw std::invalid_argument("matmul: shape mismatch");
  auto* tp = a.tape;
  Tensor<S> out = tp->make(Mat<S>(a.val() * b.val()), detail::rg(a) || detail::rg(b));
  tp->node(out.idx).backward = [tp, out, a, b]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    if (detail::rg(a)) detail::accum(a, Mat<S>(g * b.val().transpose()));
    if (detail::rg(b)) detail::accum(b, Mat<S>(a.val().transpose() * g));
  };
  return out;
}

// y = x W + b, W: in x out, b: 1 x out
template <class S>
Tensor<S> linear(Tensor<S> x, Tensor<S> w, Tensor<S> b) {
  return add_rowvec(matmul(x, w), b);
}

template <class S>
Tensor<S> gather_rows(Tensor<S> a, std::vector<int> rows) {
  auto* tp = a.tape;
  Mat<S> v(rows.size(), a.val().cols());
  for (size_t i = 0; i < rows.size(); ++i) v.row(i) = a.val().row(rows[i]);
  Tensor<S> out = tp->make(std::move(v), detail::rg(a));
  auto rows_sp = std::make_shared<std::vector<int>>(std::move(rows));
  tp->node(out.idx).backward = [tp, out, a, rows_sp]() {
    if (!detail::rg(a)) return;
    const Mat<S>& g = tp->node(out.idx).grad;
    auto& ag = tp->node(a.idx).grad;
    for (size_t i = 0; i < rows_sp->size(); ++i) ag.row((*rows_sp)[i]) += g.row(i);
  };
  return out;
}

template <class S>
Tensor<S> gather_elements(Tensor<S> a, std::vector<std::pair<int, int>> at) {
  auto* tp = a.tape;
  Mat<S> v(at.size(), 1);
  for (size_t i = 0; i < at.size(); ++i) v(i, 0) = a.val()(at[i].first, at[i].second);
  Tensor<S> out = tp->make(std::move(v), detail::rg(a));
  auto at_sp = std::make_shared<std::vector<std::pair<int, int>>>(std::move(at));
  tp->node(out.idx).backward = [tp, out, a, at_sp]() {
    if (!detail::rg(a)) return;
    const Mat<S>& g = tp->node(out.idx).grad;
    auto& ag = tp->node(a.idx).grad;
    for (size_t i = 0; i < at_sp->size(); ++i)
      ag((*at_sp)[i].first, (*at_sp)[i].second) += g(i, 0);
  };
  return out;
}

// ---- nonlinearities ----

template <class S>
Tensor<S> gelu(Tensor<S> a) {
  auto* tp = a.tape;
  const S c = S(std::sqrt(2.0 / M_PI));
  const S k = S(0.044715);
  Mat<S> x = a.val();
  Mat<S> inner = c * (x.array() + k * x.array().cube()).matrix();
  Mat<S> t = inner.array().tanh().matrix();
  Mat<S> y = (S(0.5) * x.array() * (S(1) + t.array())).matrix();
  Tensor<S> out = tp->make(std::move(y), detail::rg(a));
  auto ctx = std::make_shared<std::pair<Mat<S>, Mat<S>>>(std::move(x), std::move(t));
  tp->node(out.idx).backward = [tp, out, a, ctx, c, k]() {
    if (!detail::rg(a)) return;
    const auto& x = ctx->first.array();
    const auto& t = ctx->second.array();
    auto sech2 = S(1) - t * t;
    auto dinner = c * (S(1) + S(3) * k * x * x);
    Mat<S> d = (S(0.5) * (S(1) + t) + S(0.5) * x * sech2 * dinner).matrix();
    detail::accum(a, Mat<S>(tp->node(out.idx).grad.cwiseProduct(d)));
  };
  return out;
}

template <class S>
Tensor<S> tanh_op(Tensor<S> a) {
  auto* tp = a.tape;
  Mat<S> y = a.val().array().tanh().matrix();
  Tensor<S> out = tp->make(y, detail::rg(a));
  auto ysp = std::make_shared<Mat<S>>(std::move(y));
  tp->node(out.idx).backward = [tp, out, a, ysp]() {
    if (!detail::rg(a)) return;
    Mat<S> d = (S(1) - ysp->array().square()).matrix();
    detail::accum(a, Mat<S>(tp->node(out.idx).grad.cwiseProduct(d)));
  };
  return out;
}

template <class S>
Tensor<S> sigmoid(Tensor<S> a) {
  auto* tp = a.tape;
  Mat<S> y = (S(1) / (S(1) + (-a.val().array()).exp())).matrix();
  Tensor<S> out = tp->make(y, detail::rg(a));
  auto ysp = std::make_shared<Mat<S>>(std::move(y));
  tp->node(out.idx).backward = [tp, out, a, ysp]() {
    if (!detail::rg(a)) return;
    Mat<S> d = (ysp->array() * (S(1) - ysp->array())).matrix();
    detail::accum(a, Mat<S>(tp->node(out.idx).grad.cwiseProduct(d)));
  };
  return out;
}

// ---- row-wise normalizations ----

template <class S>
Tensor<S> layer_norm(Tensor<S> x, Tensor<S> gain, Tensor<S> bias, S eps = S(1e-5)) {
  auto* tp = x.tape;
  const long n = x.val().cols();
  Mat<S> xv = x.val();
  Mat<S> xhat(xv.rows(), n);
  Mat<S> inv_std(xv.rows(), 1);
  for (long r = 0; r < xv.rows(); ++r) {
    S mu = xv.row(r).mean();
    S var = (xv.row(r).array() - mu).square().mean();
    S is = S(1) / std::sqrt(var + eps);
    inv_std(r, 0) = is;
    xhat.row(r) = ((xv.row(r).array() - mu) * is).matrix();
  }
  Mat<S> y = xhat;
  y.array().rowwise() *= gain.val().row(0).array();
  y.rowwise() += Eigen::Matrix<S, 1, Eigen::Dynamic>(bias.val().row(0));
  Tensor<S> out = tp->make(std::move(y), detail::rg(x) || detail::rg(gain) || detail::rg(bias));
  auto ctx = std::make_shared<std::pair<Mat<S>, Mat<S>>>(std::move(xhat), std::move(inv_std));
  tp->node(out.idx).backward = [tp, out, x, gain, bias, ctx, n]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    const Mat<S>& xhat = ctx->first;
    const Mat<S>& inv_std = ctx->second;
    detail::accum(bias, Mat<S>(g.colwise().sum()));
    detail::accum(gain, Mat<S>(g.cwiseProduct(xhat).colwise().sum()));
    if (!detail::rg(x)) return;
    Mat<S> dxhat = g;
    dxhat.array().rowwise() *= gain.val().row(0).array();
    Mat<S> dx(xhat.rows(), n);
    for (long r = 0; r < xhat.rows(); ++r) {
      S m1 = dxhat.row(r).mean();
      S m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
      dx.row(r) =
          ((dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r, 0)).matrix();
    }
    detail::accum(x, dx);
  };
  return out;
}

template <class S>
Tensor<S> softmax_rows(Tensor<S> a) {
  auto* tp = a.tape;
  Mat<S> y = a.val();
  for (long r = 0; r < y.rows(); ++r) {
    S mx = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - mx).exp();
    y.row(r) /= y.row(r).sum();
  }
  Tensor<S> out = tp->make(y, detail::rg(a));
  auto ysp = std::make_shared<Mat<S>>(std::move(y));
  tp->node(out.idx).backward = [tp, out, a, ysp]() {
    if (!detail::rg(a)) return;
    const Mat<S>& g = tp->node(out.idx).grad;
    const Mat<S>& y = *ysp;
    Mat<S> dx(y.rows(), y.cols());
    for (long r = 0; r < y.rows(); ++r) {
      S dot = g.row(r).cwiseProduct(y.row(r)).sum();
      dx.row(r) = (y.row(r).array() * (g.row(r).array() - dot)).matrix();
    }
    detail::accum(a, dx);
  };
  return out;
}

template <class S>
Tensor<S> log_softmax_rows(Tensor<S> a) {
  auto* tp = a.tape;
  Mat<S> y = a.val();
  for (long r = 0; r < y.rows(); ++r) {
    S mx = y.row(r).maxCoeff();
    S lse = std::log((y.row(r).array() - mx).exp().sum()) + mx;
    y.row(r).array() -= lse;
  }
  Tensor<S> out = tp->make(y, detail::rg(a));
  auto ysp = std::make_shared<Mat<S>>(std::move(y));
  tp->node(out.idx).backward = [tp, out, a, ysp]() {
    if (!detail::rg(a)) return;
    const Mat<S>& g = tp->node(out.idx).grad;
    Mat<S> dx(g.rows(), g.cols());
    for (long r = 0; r < g.rows(); ++r) {
      S gsum = g.row(r).sum();
      dx.row(r) = g.row(r) - (gsum * ysp->row(r).array().exp()).matrix();
    }
    detail::accum(a, dx);
  };
  return out;
}

template <class S>
Tensor<S> l2_normalize_rows(Tensor<S> a, S eps = S(1e-12)) {
  auto* tp = a.tape;
  Mat<S> y = a.val();
  Mat<S> norms(y.rows(), 1);
  for (long r = 0; r < y.rows(); ++r) {
    S n = std::max(eps, S(y.row(r).norm()));
    norms(r, 0) = n;
    y.row(r) /= n;
  }
  Tensor<S> out = tp->make(y, detail::rg(a));
  auto ctx = std::make_shared<std::pair<Mat<S>, Mat<S>>>(std::move(y), std::move(norms));
  tp->node(out.idx).backward = [tp, out, a, ctx]() {
    if (!detail::rg(a)) return;
    const Mat<S>& g = tp->node(out.idx).grad;
    const Mat<S>& y = ctx->first;
    const Mat<S>& norms = ctx->second;
    Mat<S> dx(g.rows(), g.cols());
    for (long r = 0; r < g.rows(); ++r) {
      S dot = g.row(r).cwiseProduct(y.row(r)).sum();
      dx.row(r) = (g.row(r) - dot * y.row(r)) / norms(r, 0);
    }
    detail::accum(a, dx);
  };
  return out;
}

// ---- reductions ----

template <class S>
Tensor<S> sum_all(Tensor<S> a) {
  auto* tp = a.tape;
  Mat<S> v(1, 1);
  v(0, 0) = a.val().sum();
  Tensor<S> out = tp->make(std::move(v), detail::rg(a));
  tp->node(out.idx).backward = [tp, out, a]() {
    if (!detail::rg(a)) return;
    S g = tp->node(out.idx).grad(0, 0);
    detail::accum(a, Mat<S>(Mat<S>::Constant(a.val().rows(), a.val().cols(), g)));
  };
  return out;
}

template <class S>
Tensor<S> mean_all(Tensor<S> a) {
  return scale(sum_all(a), S(1) / S(a.val().size()));
}

// sum(weight .* (pred - target)^2) / normalizer, weight and target constant
template <class S>
Tensor<S> weighted_squared_error(Tensor<S> pred, const Mat<S>& target, const Mat<S>& weight,
                                 S normalizer) {
  auto* tp = pred.tape;
  Mat<S> diff = pred.val() - target;
  Mat<S> v(1, 1);
  v(0, 0) = diff.cwiseProduct(diff).cwiseProduct(weight).sum() / normalizer;
  Tensor<S> out = tp->make(std::move(v), detail::rg(pred));
  auto ctx = std::make_shared<std::pair<Mat<S>, Mat<S>>>(std::move(diff), weight);
  tp->node(out.idx).backward = [tp, out, pred, ctx, normalizer]() {
    if (!detail::rg(pred)) return;
    S g = tp->node(out.idx).grad(0, 0);
    detail::accum(pred, Mat<S>((S(2) * g / normalizer) *
                               ctx->first.cwiseProduct(ctx->second)));
  };
  return out;
}

template <class S>
Tensor<S> mse_loss(Tensor<S> pred, const Mat<S>& target) {
  Mat<S> w = Mat<S>::Ones(target.rows(), target.cols());
  return weighted_squared_error(pred, target, w, S(target.size()));
}

// ---- structural ops for the encoder ----

// tokens: (B*Tsig) x d channel-major per example; prepends a learned CLS row
// per example -> (B*(Tsig+1)) x d
template <class S>
Tensor<S> insert_cls(Tensor<S> tokens, Tensor<S> cls, int batch) {
  auto* tp = tokens.tape;
  const long tsig = tokens.val().rows() / batch;
  const long d = tokens.val().cols();
  Mat<S> v((tsig + 1) * batch, d);
  for (int b = 0; b < batch; ++b) {
    v.row(b * (tsig + 1)) = cls.val().row(0);
    v.block(b * (tsig + 1) + 1, 0, tsig, d) = tokens.val().block(b * tsig, 0, tsig, d);
  }
  Tensor<S> out = tp->make(std::move(v), detail::rg(tokens) || detail::rg(cls));
  tp->node(out.idx).backward = [tp, out, tokens, cls, batch, tsig, d]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    if (detail::rg(cls)) {
      Mat<S> cg = Mat<S>::Zero(1, d);
      for (int b = 0; b < batch; ++b) cg.row(0) += g.row(b * (tsig + 1));
      detail::accum(cls, cg);
    }
    if (detail::rg(tokens)) {
      auto& tg = tp->node(tokens.idx).grad;
      for (int b = 0; b < batch; ++b)
        tg.block(b * tsig, 0, tsig, d) += g.block(b * (tsig + 1) + 1, 0, tsig, d);
    }
  };
  return out;
}

// adds chan_emb.row(ids[i].first) + time_emb.row(ids[i].second) to row i
template <class S>
Tensor<S> add_grid_embeddings(Tensor<S> tokens, Tensor<S> chan_emb, Tensor<S> time_emb,
                              std::vector<std::pair<int, int>> row_ids) {
  auto* tp = tokens.tape;
  if (static_cast<long>(row_ids.size()) != tokens.val().rows())
    throw std::invalid_argument("add_grid_embeddings: one (channel, window) id per row");
  Mat<S> v = tokens.val();
  for (long i = 0; i < v.rows(); ++i)
    v.row(i) += chan_emb.val().row(row_ids[i].first) + time_emb.val().row(row_ids[i].second);
  Tensor<S> out =
      tp->make(std::move(v), detail::rg(tokens) || detail::rg(chan_emb) || detail::rg(time_emb));
  auto ids = std::make_shared<std::vector<std::pair<int, int>>>(std::move(row_ids));
  tp->node(out.idx).backward = [tp, out, tokens, chan_emb, time_emb, ids]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    detail::accum(tokens, g);
    bool rc = detail::rg(chan_emb), rt = detail::rg(time_emb);
    if (!rc && !rt) return;
    Mat<S> cg = Mat<S>::Zero(chan_emb.val().rows(), chan_emb.val().cols());
    Mat<S> tg = Mat<S>::Zero(time_emb.val().rows(), time_emb.val().cols());
    for (long i = 0; i < g.rows(); ++i) {
      cg.row((*ids)[i].first) += g.row(i);
      tg.row((*ids)[i].second) += g.row(i);
    }
    if (rc) detail::accum(chan_emb, cg);
    if (rt) detail::accum(time_emb, tg);
  };
  return out;
}

// Fused multi-head self-attention on projected Q, K, V of shape (B*T) x d.
// causal masks attention to positions <= own index within each example.
template <class S>
Tensor<S> self_attention(Tensor<S> q, Tensor<S> k, Tensor<S> v, int batch, int tokens,
                         int heads, bool causal) {
  auto* tp = q.tape;
  const long d = q.val().cols();
  if (d % heads != 0) throw std::invalid_argument("self_attention: d % heads != 0");
  const long dh = d / heads;
  const S inv_sqrt = S(1) / std::sqrt(S(dh));

  auto probs = std::make_shared<std::vector<Mat<S>>>();
  probs->reserve(static_cast<size_t>(batch) * heads);
  Mat<S> out_val(q.val().rows(), d);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto Qb = q.val().block(b * tokens, h * dh, tokens, dh);
      auto Kb = k.val().block(b * tokens, h * dh, tokens, dh);
      auto Vb = v.val().block(b * tokens, h * dh, tokens, dh);
      Mat<S> scores = (Qb * Kb.transpose()) * inv_sqrt;
      if (causal)
        for (int i = 0; i < tokens; ++i)
          for (int j = i + 1; j < tokens; ++j)
            scores(i, j) = -std::numeric_limits<S>::infinity();
      for (int i = 0; i < tokens; ++i) {
        S mx = scores.row(i).maxCoeff();
        scores.row(i) = (scores.row(i).array() - mx).exp();
        scores.row(i) /= scores.row(i).sum();
      }
      out_val.block(b * tokens, h * dh, tokens, dh) = scores * Vb;
      probs->push_back(std::move(scores));
    }
  }
  Tensor<S> out =
      tp->make(std::move(out_val), detail::rg(q) || detail::rg(k) || detail::rg(v));
  tp->node(out.idx).backward = [tp, out, q, k, v, batch, tokens, heads, dh, inv_sqrt,
                                probs]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    Mat<S> dq = Mat<S>::Zero(g.rows(), g.cols());
    Mat<S> dk = Mat<S>::Zero(g.rows(), g.cols());
    Mat<S> dv = Mat<S>::Zero(g.rows(), g.cols());
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        const Mat<S>& P = (*probs)[static_cast<size_t>(b) * heads + h];
        auto Gb = g.block(b * tokens, h * dh, tokens, dh);
        auto Qb = q.val().block(b * tokens, h * dh, tokens, dh);
        auto Kb = k.val().block(b * tokens, h * dh, tokens, dh);
        auto Vb = v.val().block(b * tokens, h * dh, tokens, dh);
        dv.block(b * tokens, h * dh, tokens, dh) = P.transpose() * Gb;
        Mat<S> dP = Gb * Vb.transpose();
        Mat<S> dS(tokens, tokens);
        for (int i = 0; i < tokens; ++i) {
          S dot = dP.row(i).cwiseProduct(P.row(i)).sum();
          dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
        }
        dS *= inv_sqrt;
        dq.block(b * tokens, h * dh, tokens, dh) = dS * Kb;
        dk.block(b * tokens, h * dh, tokens, dh) = dS.transpose() * Qb;
      }
    }
    detail::accum(q, dq);
    detail::accum(k, dk);
    detail::accum(v, dv);
  };
  return out;
}

template <class S>
Tensor<S> concat_rows(Tensor<S> a, Tensor<S> b) {
  if (a.val().cols() != b.val().cols())
    throw std::invalid_argument("concat_rows: column mismatch");
  auto* tp = a.tape;
  Mat<S> v(a.val().rows() + b.val().rows(), a.val().cols());
  v << a.val(), b.val();
  Tensor<S> out = tp->make(std::move(v), detail::rg(a) || detail::rg(b));
  tp->node(out.idx).backward = [tp, out, a, b]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    detail::accum(a, Mat<S>(g.topRows(a.val().rows())));
    detail::accum(b, Mat<S>(g.bottomRows(b.val().rows())));
  };
  return out;
}

template <class S>
Tensor<S> transpose(Tensor<S> a) {
  auto* tp = a.tape;
  Tensor<S> out = tp->make(Mat<S>(a.val().transpose()), detail::rg(a));
  tp->node(out.idx).backward = [tp, out, a]() {
    detail::accum(a, Mat<S>(tp->node(out.idx).grad.transpose()));
  };
  return out;
}

// A * B^T
template <class S>
Tensor<S> matmul_nt(Tensor<S> a, Tensor<S> b) {
  if (a.val().cols() != b.val().cols())
    throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  auto* tp = a.tape;
  Tensor<S> out =
      tp->make(Mat<S>(a.val() * b.val().transpose()), detail::rg(a) || detail::rg(b));
  tp->node(out.idx).backward = [tp, out, a, b]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    if (detail::rg(a)) detail::accum(a, Mat<S>(g * b.val()));
    if (detail::rg(b)) detail::accum(b, Mat<S>(g.transpose() * a.val()));
  };
  return out;
}

template <class S>
Tensor<S> add_const(Tensor<S> a, const Mat<S>& c) {
  auto* tp = a.tape;
  Tensor<S> out = tp->make(Mat<S>(a.val() + c), detail::rg(a));
  tp->node(out.idx).backward = [tp, out, a]() {
    detail::accum(a, tp->node(out.idx).grad);
  };
  return out;
}

// out has total_rows rows; row dst_rows[i] = src.row(i), every other row =
// fill (a 1 x d row, e.g. a mask token)
template <class S>
Tensor<S> scatter_rows(Tensor<S> src, std::vector<int> dst_rows, long total_rows,
                       Tensor<S> fill) {
  auto* tp = src.tape;
  const long d = src.val().cols();
  if (static_cast<long>(dst_rows.size()) != src.val().rows())
    throw std::invalid_argument("scatter_rows: one destination per source row");
  Mat<S> v(total_rows, d);
  v.rowwise() = Eigen::Matrix<S, 1, Eigen::Dynamic>(fill.val().row(0));
  for (size_t i = 0; i < dst_rows.size(); ++i) v.row(dst_rows[i]) = src.val().row(i);
  Tensor<S> out = tp->make(std::move(v), detail::rg(src) || detail::rg(fill));
  auto ids = std::make_shared<std::vector<int>>(std::move(dst_rows));
  tp->node(out.idx).backward = [tp, out, src, fill, ids, total_rows]() {
    const Mat<S>& g = tp->node(out.idx).grad;
    if (detail::rg(src)) {
      auto& sg = tp->node(src.idx).grad;
      for (size_t i = 0; i < ids->size(); ++i) sg.row(i) += g.row((*ids)[i]);
    }
    if (detail::rg(fill)) {
      std::vector<bool> used(total_rows, false);
      for (int r : *ids) used[r] = true;
      Mat<S> fg = Mat<S>::Zero(1, g.cols());
      for (long r = 0; r < total_rows; ++r)
        if (!used[r]) fg.row(0) += g.row(r);
      detail::accum(fill, fg);
    }
  };
  return out;
}

// Forward takes the value of `hard`; gradients flow through `surrogate`.
template <class S>
Tensor<S> straight_through(const Mat<S>& hard, Tensor<S> surrogate) {
  auto* tp = surrogate.tape;
  Tensor<S> out = tp->make(hard, detail::rg(surrogate));
  tp->node(out.idx).backward = [tp, out, surrogate]() {
    detail::accum(surrogate, tp->node(out.idx).grad);
  };
  return out;
}

}  // namespace osf::nn
