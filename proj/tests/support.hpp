#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "fedmepd/numkit.hpp"
#include "fedmepd/synthdata.hpp"
#include "fedmepd/toymodel.hpp"

namespace fedmepd::testing {

inline Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Small model shape that keeps finite-difference checks fast and away from
/// ReLU kinks.
inline model::ModelShape small_shape(std::size_t heads = 2) {
  model::ModelShape s;
  s.height = 8;
  s.width = 8;
  s.enc_channels = {4, 8};
  s.dec_channels = {4, 6};
  s.n_heads = heads;
  return s;
}

inline synth::Sample random_sample(const model::ModelShape& shape, std::span<const int> modalities,
                                   Rng& rng) {
  synth::Sample s;
  s.images.resize(shape.n_modalities);
  for (int m : modalities) {
    Tensor img({shape.height, shape.width});
    for (double& v : img.values()) v = rng.uniform();
    s.images[static_cast<std::size_t>(m)] = std::move(img);
  }
  s.label = {shape.height, shape.width, std::vector<int>(shape.height * shape.width)};
  for (int& c : s.label.classes) c = static_cast<int>(rng.below(shape.n_classes));
  return s;
}

inline std::vector<Tensor> random_anchors(const model::ModelShape& shape, std::size_t n_anchors,
                                          Rng& rng) {
  std::vector<Tensor> out;
  for (std::size_t c : shape.enc_channels) out.push_back(random_matrix(n_anchors, c, rng, 0.0, 1.0));
  return out;
}

/// Relative agreement with a tiny absolute floor for numerically-zero entries.
inline bool grad_close(double analytic, double numeric, double rel = 1e-4, double floor = 1e-8) {
  return std::abs(analytic - numeric) <= rel * std::max(std::abs(analytic), std::abs(numeric)) + floor;
}

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double worst = 0.0;
};

/// Compares every parameter's analytic gradient with central differences.
inline GradCheckReport finite_difference_check(model::SiteModel m, const synth::Sample& s,
                                               std::span<const Tensor> anchors, double h = 1e-5) {
  const auto trace = model::forward(m, s, anchors);
  const auto grads = model::backward(m, trace, s.label, anchors).grads;
  auto eval = [&](const model::SiteModel& mm) {
    return model::loss(model::forward(mm, s, anchors), s.label);
  };
  GradCheckReport rep;
  auto psets = m.params.sets();
  auto gsets = grads.sets();
  for (std::size_t si = 0; si < psets.size(); ++si) {
    if (psets[si]->role == model::Role::kLacca && anchors.empty()) continue;
    for (std::size_t li = 0; li < psets[si]->layers.size(); ++li) {
      for (int part = 0; part < 2; ++part) {
        Tensor& p = part == 0 ? psets[si]->layers[li].weight : psets[si]->layers[li].bias;
        const Tensor& g = part == 0 ? gsets[si]->layers[li].weight : gsets[si]->layers[li].bias;
        for (std::size_t e = 0; e < p.size(); ++e) {
          const double orig = p[e];
          p[e] = orig + h;
          const double up = eval(m);
          p[e] = orig - h;
          const double down = eval(m);
          p[e] = orig;
          const double numeric = (up - down) / (2.0 * h);
          ++rep.checked;
          const double err = std::abs(g[e] - numeric) /
                             std::max({std::abs(g[e]), std::abs(numeric), 1e-12});
          if (!grad_close(g[e], numeric)) {
            ++rep.failed;
            rep.worst = std::max(rep.worst, err);
          }
        }
      }
    }
  }
  return rep;
}

}  // namespace fedmepd::testing

namespace fedmepd::testing {

/// Exhaustive minimum within-cluster SSE over every assignment of the points
/// to k labelled clusters (k^P candidates).
inline double brute_force_sse(const Tensor& pts, std::size_t k) {
  const std::size_t n = pts.rows(), dim = pts.cols();
  std::vector<std::size_t> assign(n, 0);
  double best = std::numeric_limits<double>::infinity();
  for (;;) {
    std::vector<double> sum(k * dim, 0.0);
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++cnt[assign[i]];
      for (std::size_t d = 0; d < dim; ++d) sum[assign[i] * dim + d] += pts(i, d);
    }
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < dim; ++d) {
        const double mean = sum[assign[i] * dim + d] / static_cast<double>(cnt[assign[i]]);
        sse += (pts(i, d) - mean) * (pts(i, d) - mean);
      }
    }
    best = std::min(best, sse);
    std::size_t pos = 0;
    while (pos < n && ++assign[pos] == k) assign[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

}  // namespace fedmepd::testing

#include "fedmepd/fedcore.hpp"

namespace fedmepd::testing {

inline model::ParamSet random_decoder(Rng& rng, double lo = -1.0, double hi = 1.0) {
  auto shape = small_shape();
  auto p = model::init_decoder(shape, rng);
  for (auto& l : p.layers) {
    for (double& v : l.weight.values()) v = rng.uniform(lo, hi);
    for (double& v : l.bias.values()) v = rng.uniform(lo, hi);
  }
  return p;
}

/// One aggregation snapshot: previous server decoder, client decoders before
/// (agg) and after (now) local training, and a mask.
struct Snapshot {
  model::ParamSet server_prev;
  std::vector<model::ParamSet> client_agg;
  std::vector<model::ParamSet> client_now;
  fed::PersonalizationMask mask;
};

inline Snapshot random_snapshot(Rng& rng, bool all_ones = false) {
  Snapshot s;
  s.server_prev = random_decoder(rng);
  const std::size_t n = 1 + rng.below(8);
  const std::size_t filters = s.server_prev.n_filters();
  s.mask = fed::PersonalizationMask::all_ones(n, filters, 3);
  if (!all_ones) {
    const double p_off = rng.uniform();
    for (auto& b : s.mask.bits) b = rng.uniform() < p_off ? 0 : 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto agg = fed::build_client_decoder(random_decoder(rng), s.server_prev, s.mask.row(i));
    auto now = agg;
    for (auto& l : now.layers) {
      for (double& v : l.weight.values()) v += rng.uniform(-0.5, 0.5) * rng.uniform();
      for (double& v : l.bias.values()) v += rng.uniform(-0.5, 0.5);
    }
    s.client_agg.push_back(std::move(agg));
    s.client_now.push_back(std::move(now));
  }
  return s;
}

inline std::vector<model::ParamSet> client_deltas(const Snapshot& s) {
  std::vector<model::ParamSet> d;
  for (std::size_t i = 0; i < s.client_now.size(); ++i)
    d.push_back(fed::difference(s.client_now[i], s.client_agg[i]));
  return d;
}

}  // namespace fedmepd::testing

#include "fedmepd/codec.hpp"

namespace fedmepd::testing {

/// Values that stress the bit-exact path: signed zeros, infinities,
/// subnormals and ordinary draws.
inline double random_value(Rng& rng) {
  switch (rng.below(12)) {
    case 0: return -0.0;
    case 1: return std::numeric_limits<double>::infinity();
    case 2: return std::numeric_limits<double>::denorm_min() * static_cast<double>(1 + rng.below(100));
    case 3: return std::numeric_limits<double>::max();
    default: return rng.normal() * std::pow(10.0, rng.uniform(-8, 8));
  }
}

inline Tensor random_tensor(Rng& rng, std::size_t max_extent = 6) {
  const std::size_t rank = rng.below(4);
  if (rank == 0) return Tensor();
  std::vector<std::size_t> shape(rank);
  for (auto& e : shape) e = rng.below(max_extent + 1);
  Tensor t(shape);
  for (double& v : t.values()) v = random_value(rng);
  return t;
}

inline model::ParamSet random_params(Rng& rng) {
  model::ParamSet p;
  p.role = static_cast<model::Role>(rng.below(3));
  p.modality = static_cast<int>(rng.below(6)) - 1;
  const std::size_t n = rng.below(4);
  for (std::size_t i = 0; i < n; ++i) {
    model::Layer l;
    for (std::size_t c = rng.below(8); c > 0; --c) l.name += static_cast<char>('a' + rng.below(26));
    l.weight = random_tensor(rng);
    l.bias = random_tensor(rng);
    p.layers.push_back(std::move(l));
  }
  return p;
}

inline std::map<int, model::ParamSet> random_param_map(Rng& rng) {
  std::map<int, model::ParamSet> m;
  for (std::size_t i = rng.below(5); i > 0; --i) m[static_cast<int>(rng.below(4))] = random_params(rng);
  return m;
}

inline anchors::AnchorBank random_bank(Rng& rng) {
  anchors::AnchorBank b;
  if (rng.below(4) == 0) return b;  // empty
  b.n_classes = 1 + rng.below(4);
  b.n_k = 1 + rng.below(4);
  b.omega = rng.uniform();
  const std::size_t levels = 1 + rng.below(3);
  b.membership_level = rng.below(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    Tensor t = Tensor::matrix(b.n_anchors(), 1 + rng.below(8));
    for (double& v : t.values()) v = random_value(rng);
    b.levels.push_back(std::move(t));
  }
  for (std::size_t c = 0; c < b.n_classes; ++c) b.stale.push_back(static_cast<std::uint8_t>(rng.below(2)));
  return b;
}

inline std::vector<std::uint8_t> random_bits(Rng& rng, std::size_t n) {
  std::vector<std::uint8_t> bits(n);
  for (auto& b : bits) b = static_cast<std::uint8_t>(rng.below(2));
  return bits;
}

inline codec::Broadcast random_broadcast(Rng& rng) {
  codec::Broadcast m;
  m.round = rng.next_u64();
  m.encoders = random_param_map(rng);
  m.decoder = random_params(rng);
  m.anchors = random_bank(rng);
  m.mask_row = random_bits(rng, rng.below(40));
  return m;
}

inline codec::Report random_report(Rng& rng) {
  codec::Report m;
  m.round = rng.next_u64();
  m.site_id = static_cast<std::uint32_t>(rng.next_u64());
  m.encoders = random_param_map(rng);
  m.decoder = random_params(rng);
  return m;
}

inline model::ModelParams random_model_params(Rng& rng) {
  model::ModelParams p;
  p.encoders = random_param_map(rng);
  p.decoder = random_params(rng);
  p.lacca = random_params(rng);
  return p;
}

inline model::SiteModel random_site_model(Rng& rng) {
  model::SiteModel m;
  m.shape.height = rng.below(64);
  m.shape.enc_channels = {rng.below(9), rng.below(9)};
  m.shape.dec_channels = {rng.below(9)};
  m.shape.n_heads = rng.below(9);
  m.modalities = {0, 2};
  m.params = random_model_params(rng);
  m.adam.step = rng.next_u64();
  m.adam.m = random_model_params(rng);
  m.adam.v = random_model_params(rng);
  return m;
}

inline codec::ExperimentState random_state(Rng& rng) {
  codec::ExperimentState s;
  s.round = rng.below(1000);
  s.config_digest = static_cast<std::uint32_t>(rng.next_u64());
  s.config_text = "seed = " + std::to_string(rng.next_u64()) + "\n";
  s.server = random_site_model(rng);
  s.server_rng = Rng(rng.next_u64());
  for (std::size_t i = rng.below(4); i > 0; --i) {
    codec::ClientState c;
    c.site_id = static_cast<std::uint32_t>(rng.below(100));
    c.model = random_site_model(rng);
    c.rng = Rng(rng.next_u64());
    c.expected_round = rng.next_u64();
    c.anchors = random_bank(rng);
    s.clients.push_back(std::move(c));
  }
  s.mask = fed::PersonalizationMask::all_ones(rng.below(5), rng.below(20), static_cast<std::uint32_t>(rng.below(20)));
  s.mask.bits = random_bits(rng, s.mask.bits.size());
  for (auto& c : s.mask.counters) c = static_cast<std::uint32_t>(rng.below(20));
  s.bank = random_bank(rng);
  for (std::size_t i = rng.below(6); i > 0; --i) {
    codec::MetricsRow r{rng.below(100), std::to_string(rng.below(9)), "0+1", random_value(rng),
                        random_value(rng), std::nullopt};
    if (rng.below(2)) r.fed_ratio = rng.uniform();
    s.history.push_back(r);
  }
  return s;
}

}  // namespace fedmepd::testing
