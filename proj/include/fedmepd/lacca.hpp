#pragma once

#include <cstddef>
#include <vector>

#include "fedmepd/numkit.hpp"

// Localized adaptive calibration via cross-attention: a site's features are
// the queries, the server's multimodal anchors are keys and values.
namespace fedmepd::lacca {

struct Projections {
  const Tensor& w0;  // query projection, C × C
  const Tensor& w1;  // key projection, C × C
  const Tensor& w2;  // value projection, C × C
};

/// Everything the backward pass needs.
struct Forward {
  std::size_t n_heads = 1;
  Tensor queries;  // T × C   (features · w0)
  Tensor keys;     // K × C   (anchors · w1)
  Tensor values;   // K × C   (anchors · w2)
  std::vector<Tensor> scores;     // per head, T × K, already divided by √(C / n_heads)
  std::vector<Tensor> attention;  // per head, T × K, rows sum to one
  Tensor output;                  // T × C, heads concatenated along channels
};

struct Grads {
  Tensor features;
  Tensor anchors;
  Tensor w0, w1, w2;
};

/// out_h = softmax((F w0)_h (A w1)_hᵀ / √(C/h)) (A w2)_h for every head h.
Forward calibrate(const Tensor& features, const Tensor& anchors, const Projections& proj,
                  std::size_t n_heads);

/// Reverse-mode gradients of ⟨upstream, output⟩.
Grads calibrate_backward(const Forward& fwd, const Tensor& features, const Tensor& anchors,
                         const Projections& proj, const Tensor& upstream);

}  // namespace fedmepd::lacca
