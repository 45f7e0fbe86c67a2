#include "fedmepd/lacca.hpp"

#include <cmath>

namespace fedmepd::lacca {

namespace {

void check_inputs(const Tensor& features, const Tensor& anchors, const Projections& proj,
                  std::size_t n_heads) {
  if (features.rank() != 2 || anchors.rank() != 2) {
    throw DimensionError("lacca: features and anchors must be matrices");
  }
  const std::size_t c = features.cols();
  if (anchors.cols() != c) {
    throw DimensionError("lacca: anchor width " + std::to_string(anchors.cols()) +
                         " differs from feature width " + std::to_string(c));
  }
  for (const Tensor* w : {&proj.w0, &proj.w1, &proj.w2}) {
    if (w->rank() != 2 || w->rows() != c || w->cols() != c) {
      throw DimensionError("lacca: projections must be " + std::to_string(c) + "x" +
                           std::to_string(c));
    }
  }
  if (n_heads == 0 || c % n_heads != 0) {
    throw ParameterError("lacca: " + std::to_string(c) + " channels are not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  if (anchors.rows() == 0) throw ParameterError("lacca: need at least one anchor");
}

}  // namespace

Forward calibrate(const Tensor& features, const Tensor& anchors, const Projections& proj,
                  std::size_t n_heads) {
  check_inputs(features, anchors, proj, n_heads);
  const std::size_t t = features.rows(), k = anchors.rows(), c = features.cols();
  const std::size_t d = c / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Forward fwd;
  fwd.n_heads = n_heads;
  fwd.queries = matmul(features, proj.w0);
  fwd.keys = matmul(anchors, proj.w1);
  fwd.values = matmul(anchors, proj.w2);
  fwd.output = Tensor::matrix(t, c);

  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * d;
    Tensor scores = Tensor::matrix(t, k);
    for (std::size_t i = 0; i < t; ++i) {
      const double* q = &fwd.queries(i, off);
      for (std::size_t j = 0; j < k; ++j) {
        const double* kk = &fwd.keys(j, off);
        double acc = 0.0;
        for (std::size_t x = 0; x < d; ++x) acc += q[x] * kk[x];
        scores(i, j) = acc * scale;
      }
    }
    Tensor attn = softmax_rows(scores);
    for (std::size_t i = 0; i < t; ++i) {
      double* out = &fwd.output(i, off);
      for (std::size_t j = 0; j < k; ++j) {
        const double a = attn(i, j);
        const double* v = &fwd.values(j, off);
        for (std::size_t x = 0; x < d; ++x) out[x] += a * v[x];
      }
    }
    fwd.scores.push_back(std::move(scores));
    fwd.attention.push_back(std::move(attn));
  }
  return fwd;
}

Grads calibrate_backward(const Forward& fwd, const Tensor& features, const Tensor& anchors,
                         const Projections& proj, const Tensor& upstream) {
  const std::size_t t = features.rows(), k = anchors.rows(), c = features.cols();
  if (upstream.rank() != 2 || upstream.rows() != t || upstream.cols() != c) {
    throw DimensionError("lacca backward: upstream gradient shape " +
                         shape_string(upstream.shape()));
  }
  const std::size_t d = c / fwd.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor d_queries = Tensor::matrix(t, c);
  Tensor d_keys = Tensor::matrix(k, c);
  Tensor d_values = Tensor::matrix(k, c);
  std::vector<double> d_attn(k);

  for (std::size_t h = 0; h < fwd.n_heads; ++h) {
    const std::size_t off = h * d;
    const Tensor& attn = fwd.attention[h];
    for (std::size_t i = 0; i < t; ++i) {
      const double* g = &upstream(i, off);
      // dA = g · Vᵀ ; dV += Aᵀ g
      double weighted = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double* v = &fwd.values(j, off);
        double acc = 0.0;
        for (std::size_t x = 0; x < d; ++x) acc += g[x] * v[x];
        d_attn[j] = acc;
        weighted += acc * attn(i, j);
        double* dv = &d_values(j, off);
        const double a = attn(i, j);
        for (std::size_t x = 0; x < d; ++x) dv[x] += a * g[x];
      }
      // softmax Jacobian, then the score scaling
      const double* q = &fwd.queries(i, off);
      double* dq = &d_queries(i, off);
      for (std::size_t j = 0; j < k; ++j) {
        const double ds = attn(i, j) * (d_attn[j] - weighted) * scale;
        if (ds == 0.0) continue;
        const double* kk = &fwd.keys(j, off);
        double* dk = &d_keys(j, off);
        for (std::size_t x = 0; x < d; ++x) {
          dq[x] += ds * kk[x];
          dk[x] += ds * q[x];
        }
      }
    }
  }

  Grads g;
  g.w0 = matmul_tn(features, d_queries);
  g.features = matmul_nt(d_queries, proj.w0);
  g.w1 = matmul_tn(anchors, d_keys);
  g.w2 = matmul_tn(anchors, d_values);
  g.anchors = matmul_nt(d_keys, proj.w1);
  const Tensor via_values = matmul_nt(d_values, proj.w2);
  for (std::size_t i = 0; i < g.anchors.size(); ++i) g.anchors[i] += via_values[i];
  return g;
}

}  // namespace fedmepd::lacca
