#include "fedmepd/toymodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fedmepd::model {

// ---- ParamSet -----------------------------------------------------------------

std::size_t ParamSet::n_filters() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.rows();
  return n;
}

std::vector<FilterRef> ParamSet::filters() const {
  std::vector<FilterRef> out;
  out.reserve(n_filters());
  for (std::size_t li = 0; li < layers.size(); ++li) {
    for (std::size_t r = 0; r < layers[li].weight.rows(); ++r) out.push_back({li, r});
  }
  return out;
}

std::size_t ParamSet::filter_size(const FilterRef& f) const {
  const auto& l = layers[f.layer];
  return l.weight.cols() + (l.bias.empty() ? 0 : 1);
}

std::vector<double> ParamSet::filter_vector(const FilterRef& f) const {
  const auto& l = layers[f.layer];
  auto row = l.weight.row(f.row);
  std::vector<double> out(row.begin(), row.end());
  if (!l.bias.empty()) out.push_back(l.bias[f.row]);
  return out;
}

void ParamSet::set_filter(const FilterRef& f, std::span<const double> values) {
  auto& l = layers[f.layer];
  if (values.size() != filter_size(f)) throw DimensionError("set_filter: wrong filter length");
  auto row = l.weight.row(f.row);
  std::copy_n(values.begin(), row.size(), row.begin());
  if (!l.bias.empty()) l.bias[f.row] = values[row.size()];
}

std::size_t ParamSet::n_elements() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out = *this;
  for (auto& l : out.layers) {
    l.weight.fill(0.0);
    l.bias.fill(0.0);
  }
  return out;
}

bool ParamSet::same_structure(const ParamSet& other) const {
  if (role != other.role || layers.size() != other.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weight.shape() != other.layers[i].weight.shape() ||
        layers[i].bias.shape() != other.layers[i].bias.shape()) {
      return false;
    }
  }
  return true;
}

bool ParamSet::all_finite() const {
  return std::all_of(layers.begin(), layers.end(),
                     [](const Layer& l) { return l.weight.all_finite() && l.bias.all_finite(); });
}

void ParamSet::axpy(double scale, const ParamSet& other) {
  if (!same_structure(other)) throw ContractError("axpy: parameter structures differ");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto w = layers[i].weight.values();
    auto ow = other.layers[i].weight.values();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] += scale * ow[j];
    auto b = layers[i].bias.values();
    auto ob = other.layers[i].bias.values();
    for (std::size_t j = 0; j < b.size(); ++j) b[j] += scale * ob[j];
  }
}

// ---- shapes and init -------------------------------------------------------------

void ModelShape::validate() const {
  if (n_modalities == 0) throw ParameterError("model: need at least one modality");
  if (n_classes < 2) throw ParameterError("model: need at least two classes");
  if (enc_channels.empty()) throw ParameterError("model: need at least one level");
  if (dec_channels.size() != enc_channels.size()) {
    throw ParameterError("model: decoder and encoder level counts differ");
  }
  const std::size_t div = std::size_t{1} << (levels() - 1);
  if (height % div != 0 || width % div != 0 || height < 8 || width < 8) {
    throw ParameterError("model: image size must be at least 8 and divisible by " +
                         std::to_string(div));
  }
  for (std::size_t c : enc_channels) {
    if (c == 0 || n_heads == 0 || c % n_heads != 0) {
      throw ParameterError("model: encoder width " + std::to_string(c) +
                           " is not divisible by n_heads = " + std::to_string(n_heads));
    }
  }
  for (std::size_t c : dec_channels) {
    if (c == 0) throw ParameterError("model: decoder widths must be positive");
  }
}

namespace {

constexpr std::size_t kPatch = 9;  // 3×3 neighbourhood

Layer dense(std::string name, std::size_t out, std::size_t in, Rng& rng, bool bias = true,
            double gain = 1.0) {
  Layer l;
  l.name = std::move(name);
  l.weight = Tensor::matrix(out, in);
  const double a = gain * std::sqrt(6.0 / static_cast<double>(in));
  for (double& w : l.weight.values()) w = rng.uniform(-a, a);
  if (bias) l.bias = Tensor({out}, 0.01);
  return l;
}

std::size_t decoder_layer(std::size_t levels, std::size_t level) { return levels - 1 - level; }

}  // namespace

ParamSet init_encoder(const ModelShape& shape, int modality, Rng& rng) {
  ParamSet p;
  p.role = Role::kEncoder;
  p.modality = modality;
  for (std::size_t l = 0; l < shape.levels(); ++l) {
    const std::size_t in = l == 0 ? kPatch : shape.enc_channels[l - 1];
    p.layers.push_back(dense("enc.l" + std::to_string(l + 1), shape.enc_channels[l], in, rng));
  }
  return p;
}

ParamSet init_decoder(const ModelShape& shape, Rng& rng) {
  ParamSet p;
  p.role = Role::kDecoder;
  const std::size_t levels = shape.levels();
  for (std::size_t i = 0; i < levels; ++i) {
    const std::size_t l = levels - 1 - i;
    const std::size_t in =
        shape.enc_channels[l] + (l + 1 < levels ? shape.dec_channels[l + 1] : 0);
    p.layers.push_back(dense("dec.l" + std::to_string(l + 1), shape.dec_channels[l], in, rng));
  }
  p.layers.push_back(dense("dec.cls", shape.n_classes, shape.dec_channels[0], rng, true, 0.5));
  return p;
}

ParamSet init_lacca(const ModelShape& shape, Rng& rng) {
  ParamSet p;
  p.role = Role::kLacca;
  for (std::size_t l = 0; l < shape.levels(); ++l) {
    const std::size_t c = shape.enc_channels[l];
    const std::string base = "lacca.l" + std::to_string(l + 1);
    // √(6/C)/√2 gives unit-variance projections; the value path starts small so
    // calibration begins as a mild residual nudge.
    p.layers.push_back(dense(base + ".w0", c, c, rng, false, std::sqrt(0.5)));
    p.layers.push_back(dense(base + ".w1", c, c, rng, false, std::sqrt(0.5)));
    p.layers.push_back(dense(base + ".w2", c, c, rng, false, 0.1));
  }
  return p;
}

SiteModel init_model(const ModelShape& shape, std::vector<int> modalities, Rng& rng) {
  shape.validate();
  std::sort(modalities.begin(), modalities.end());
  SiteModel m;
  m.shape = shape;
  m.modalities = modalities;
  for (int mod : modalities) {
    if (mod < 0 || static_cast<std::size_t>(mod) >= shape.n_modalities) {
      throw ContractError("init_model: modality " + std::to_string(mod) + " out of range");
    }
    m.params.encoders.emplace(mod, init_encoder(shape, mod, rng));
  }
  m.params.decoder = init_decoder(shape, rng);
  m.params.lacca = init_lacca(shape, rng);
  m.adam.m = m.params.zeros_like();
  m.adam.v = m.params.zeros_like();
  return m;
}

std::vector<ParamSet*> ModelParams::sets() {
  std::vector<ParamSet*> out;
  for (auto& [_, p] : encoders) out.push_back(&p);
  out.push_back(&decoder);
  out.push_back(&lacca);
  return out;
}

std::vector<const ParamSet*> ModelParams::sets() const {
  std::vector<const ParamSet*> out;
  for (const auto& [_, p] : encoders) out.push_back(&p);
  out.push_back(&decoder);
  out.push_back(&lacca);
  return out;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams out;
  for (const auto& [m, p] : encoders) out.encoders.emplace(m, p.zeros_like());
  out.decoder = decoder.zeros_like();
  out.lacca = lacca.zeros_like();
  return out;
}

// ---- spatial helpers -------------------------------------------------------------

namespace {

Tensor im2col3x3(const Tensor& img) {
  const std::size_t h = img.shape()[0], w = img.shape()[1];
  Tensor out = Tensor::matrix(h * w, kPatch);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double* row = &out(y * w + x, 0);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const auto yy = static_cast<std::ptrdiff_t>(y) + dy;
          const auto xx = static_cast<std::ptrdiff_t>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) ||
              xx >= static_cast<std::ptrdiff_t>(w)) {
            continue;
          }
          row[(dy + 1) * 3 + (dx + 1)] = img[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
        }
      }
    }
  }
  return out;
}

/// 2×2 mean pool of an (h·w) × C token grid.
Tensor pool2(const Tensor& x, std::size_t h, std::size_t w) {
  const std::size_t c = x.cols(), oh = h / 2, ow = w / 2;
  Tensor out = Tensor::matrix(oh * ow, c);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t xx = 0; xx < ow; ++xx) {
      double* o = &out(y * ow + xx, 0);
      for (std::size_t dy = 0; dy < 2; ++dy) {
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const double* src = &x((2 * y + dy) * w + 2 * xx + dx, 0);
          for (std::size_t ch = 0; ch < c; ++ch) o[ch] += 0.25 * src[ch];
        }
      }
    }
  }
  return out;
}

/// Adjoint of pool2: spreads each coarse gradient over its 2×2 block.
void pool2_adjoint_add(const Tensor& g, std::size_t h, std::size_t w, Tensor& into) {
  const std::size_t c = g.cols(), oh = h / 2, ow = w / 2;
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t xx = 0; xx < ow; ++xx) {
      const double* src = &g(y * ow + xx, 0);
      for (std::size_t dy = 0; dy < 2; ++dy) {
        for (std::size_t dx = 0; dx < 2; ++dx) {
          double* o = &into((2 * y + dy) * w + 2 * xx + dx, 0);
          for (std::size_t ch = 0; ch < c; ++ch) o[ch] += 0.25 * src[ch];
        }
      }
    }
  }
}

/// Nearest-neighbour 2× upsample of a coarse (h/2·w/2) grid to h·w.
Tensor upsample2(const Tensor& x, std::size_t h, std::size_t w) {
  const std::size_t c = x.cols(), cw = w / 2;
  Tensor out = Tensor::matrix(h * w, c);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      const double* src = &x((y / 2) * cw + xx / 2, 0);
      std::copy_n(src, c, &out(y * w + xx, 0));
    }
  }
  return out;
}

/// Adjoint of upsample2 restricted to the columns [col0, col0 + c) of g.
Tensor upsample2_adjoint(const Tensor& g, std::size_t col0, std::size_t c, std::size_t h,
                         std::size_t w) {
  const std::size_t cw = w / 2;
  Tensor out = Tensor::matrix((h / 2) * cw, c);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      const double* src = &g(y * w + xx, col0);
      double* o = &out((y / 2) * cw + xx / 2, 0);
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] += src[ch];
    }
  }
  return out;
}

/// y = x Wᵀ + b
Tensor affine(const Tensor& x, const Layer& l) {
  Tensor y = matmul_nt(x, l.weight);
  if (!l.bias.empty()) {
    for (std::size_t i = 0; i < y.rows(); ++i) {
      auto r = y.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += l.bias[j];
    }
  }
  return y;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

/// Backprop through y = x Wᵀ + b: accumulates parameter grads, returns dx.
Tensor affine_backward(const Tensor& x, const Tensor& dy, const Layer& l, Layer& grad) {
  const Tensor dw = matmul_tn(dy, x);
  for (std::size_t i = 0; i < dw.size(); ++i) grad.weight[i] += dw[i];
  if (!grad.bias.empty()) {
    for (std::size_t i = 0; i < dy.rows(); ++i) {
      auto r = dy.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) grad.bias[j] += r[j];
    }
  }
  return matmul(dy, l.weight);
}

void relu_backward_inplace(Tensor& dy, const Tensor& pre) {
  for (std::size_t i = 0; i < dy.size(); ++i) {
    if (!(pre[i] > 0.0)) dy[i] = 0.0;
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

lacca::Projections projections(const ParamSet& lacca, std::size_t level) {
  return {lacca.layers[lacca_layer(level, 0)].weight, lacca.layers[lacca_layer(level, 1)].weight,
          lacca.layers[lacca_layer(level, 2)].weight};
}

}  // namespace

// ---- forward -------------------------------------------------------------------

ForwardTrace forward(const SiteModel& model, const synth::Sample& sample,
                     std::span<const Tensor> anchors) {
  const auto& shape = model.shape;
  const std::size_t levels = shape.levels();
  if (sample.images.size() != shape.n_modalities) {
    throw ContractError("forward: sample carries " + std::to_string(sample.images.size()) +
                        " modality slots, expected " + std::to_string(shape.n_modalities));
  }
  for (std::size_t m = 0; m < sample.images.size(); ++m) {
    const bool held = std::binary_search(model.modalities.begin(), model.modalities.end(),
                                         static_cast<int>(m));
    if (held == sample.images[m].empty()) {
      throw ContractError("forward: sample modality " + std::to_string(m) +
                          (held ? " is missing" : " is not held by this site"));
    }
  }
  if (!anchors.empty() && anchors.size() != levels) {
    throw ContractError("forward: expected anchors for " + std::to_string(levels) + " levels");
  }

  ForwardTrace t;
  t.fused.resize(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    t.fused[l] = Tensor::matrix(shape.level_tokens(l), shape.enc_channels[l]);
  }
  const double inv_m = 1.0 / static_cast<double>(model.modalities.size());
  for (int m : model.modalities) {
    const Tensor& img = sample.images[static_cast<std::size_t>(m)];
    if (img.rank() != 2 || img.shape()[0] != shape.height || img.shape()[1] != shape.width) {
      throw ContractError("forward: image of modality " + std::to_string(m) + " has shape " +
                          shape_string(img.shape()));
    }
    const ParamSet& enc = model.params.encoders.at(m);
    EncoderTrace et;
    et.modality = m;
    for (std::size_t l = 0; l < levels; ++l) {
      Tensor in = l == 0 ? im2col3x3(img)
                         : pool2(et.post[l - 1], shape.level_height(l - 1), shape.level_width(l - 1));
      Tensor pre = affine(in, enc.layers[l]);
      Tensor post = relu(pre);
      for (std::size_t i = 0; i < post.size(); ++i) t.fused[l][i] += inv_m * post[i];
      et.inputs.push_back(std::move(in));
      et.pre.push_back(std::move(pre));
      et.post.push_back(std::move(post));
    }
    t.encoders.push_back(std::move(et));
  }

  t.calibrated = t.fused;
  if (!anchors.empty()) {
    for (std::size_t l = 0; l < levels; ++l) {
      auto cal = lacca::calibrate(t.fused[l], anchors[l], projections(model.params.lacca, l),
                                  shape.n_heads);
      add_into(t.calibrated[l], cal.output);
      t.calibration.push_back(std::move(cal));
    }
  }

  const auto& dec = model.params.decoder;
  t.dec_inputs.resize(levels);
  t.dec_pre.resize(levels);
  t.dec_post.resize(levels);
  for (std::size_t i = 0; i < levels; ++i) {
    const std::size_t l = levels - 1 - i;
    Tensor in;
    if (l + 1 == levels) {
      in = t.calibrated[l];
    } else {
      const Tensor up = upsample2(t.dec_post[l + 1], shape.level_height(l), shape.level_width(l));
      const std::size_t cf = t.calibrated[l].cols(), cu = up.cols();
      in = Tensor::matrix(up.rows(), cf + cu);
      for (std::size_t r = 0; r < up.rows(); ++r) {
        std::copy_n(t.calibrated[l].row(r).begin(), cf, in.row(r).begin());
        std::copy_n(up.row(r).begin(), cu, in.row(r).begin() + static_cast<std::ptrdiff_t>(cf));
      }
    }
    t.dec_pre[l] = affine(in, dec.layers[decoder_layer(levels, l)]);
    t.dec_post[l] = relu(t.dec_pre[l]);
    t.dec_inputs[l] = std::move(in);
  }
  t.logits = affine(t.dec_post[0], dec.layers[levels]);
  t.probs = softmax_rows(t.logits);
  return t;
}

// ---- loss --------------------------------------------------------------------

double loss(const ForwardTrace& trace, const synth::LabelMap& label) {
  const std::size_t n = trace.probs.rows(), k = trace.probs.cols();
  if (label.classes.size() != n) throw DimensionError("loss: label size differs from logits");
  double ce = 0.0;
  std::vector<double> inter(k, 0.0), psum(k, 0.0), ysum(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(label.classes[i]);
    auto z = trace.logits.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double se = 0.0;
    for (double v : z) se += std::exp(v - mx);
    ce += (mx + std::log(se)) - z[y];
    for (std::size_t c = 0; c < k; ++c) psum[c] += trace.probs(i, c);
    inter[y] += trace.probs(i, y);
    ysum[y] += 1.0;
  }
  double dice = 0.0;
  for (std::size_t c = 1; c < k; ++c) {
    dice += (2.0 * inter[c] + kDiceEps) / (psum[c] + ysum[c] + kDiceEps);
  }
  dice /= static_cast<double>(k - 1);
  return ce / static_cast<double>(n) + (1.0 - dice);
}

// ---- backward ------------------------------------------------------------------

Backward backward(const SiteModel& model, const ForwardTrace& t, const synth::LabelMap& label,
                  std::span<const Tensor> anchors, double loss_scale) {
  const auto& shape = model.shape;
  const std::size_t levels = shape.levels();
  const std::size_t n = t.probs.rows(), k = t.probs.cols();
  if (!anchors.empty() && t.calibration.size() != levels) {
    throw ContractError("backward: trace was produced without anchors");
  }

  // dL/dp for the Dice term, then through the softmax together with CE.
  std::vector<double> inter(k, 0.0), psum(k, 0.0), ysum(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(label.classes[i]);
    for (std::size_t c = 0; c < k; ++c) psum[c] += t.probs(i, c);
    inter[y] += t.probs(i, y);
    ysum[y] += 1.0;
  }
  const double dice_w = -1.0 / static_cast<double>(k - 1);
  std::vector<double> a_coef(k, 0.0), b_coef(k, 0.0);  // dD_c/dp_ic = a_c·y_ic − b_c
  for (std::size_t c = 1; c < k; ++c) {
    const double s = psum[c] + ysum[c] + kDiceEps;
    const double num = 2.0 * inter[c] + kDiceEps;
    a_coef[c] = 2.0 / s;
    b_coef[c] = num / (s * s);
  }
  Tensor dlogits = Tensor::matrix(n, k);
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> gp(k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(label.classes[i]);
    double inner = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      gp[c] = c == 0 ? 0.0 : dice_w * ((c == y ? a_coef[c] : 0.0) - b_coef[c]);
      inner += gp[c] * t.probs(i, c);
    }
    for (std::size_t c = 0; c < k; ++c) {
      const double p = t.probs(i, c);
      const double ce = (p - (c == y ? 1.0 : 0.0)) * inv_n;
      dlogits(i, c) = loss_scale * (ce + p * (gp[c] - inner));
    }
  }

  Backward out;
  out.grads = model.params.zeros_like();
  auto& gdec = out.grads.decoder;
  const auto& dec = model.params.decoder;

  Tensor d_post = affine_backward(t.dec_post[0], dlogits, dec.layers[levels], gdec.layers[levels]);
  std::vector<Tensor> d_cal(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    Tensor d_pre = std::move(d_post);
    relu_backward_inplace(d_pre, t.dec_pre[l]);
    const std::size_t li = decoder_layer(levels, l);
    Tensor d_in = affine_backward(t.dec_inputs[l], d_pre, dec.layers[li], gdec.layers[li]);
    const std::size_t cf = shape.enc_channels[l];
    if (l + 1 < levels) {
      d_cal[l] = Tensor::matrix(d_in.rows(), cf);
      for (std::size_t r = 0; r < d_in.rows(); ++r) {
        std::copy_n(d_in.row(r).begin(), cf, d_cal[l].row(r).begin());
      }
      d_post = upsample2_adjoint(d_in, cf, d_in.cols() - cf, shape.level_height(l),
                                 shape.level_width(l));
    } else {
      d_cal[l] = std::move(d_in);
    }
  }

  // Residual calibration: fused → fused + attn(fused).
  std::vector<Tensor> d_fused = d_cal;
  if (!t.calibration.empty()) {
    out.anchor_grads.resize(levels);
    auto& glacca = out.grads.lacca;
    for (std::size_t l = 0; l < levels; ++l) {
      auto g = lacca::calibrate_backward(t.calibration[l], t.fused[l], anchors[l],
                                         projections(model.params.lacca, l), d_cal[l]);
      add_into(d_fused[l], g.features);
      add_into(glacca.layers[lacca_layer(l, 0)].weight, g.w0);
      add_into(glacca.layers[lacca_layer(l, 1)].weight, g.w1);
      add_into(glacca.layers[lacca_layer(l, 2)].weight, g.w2);
      out.anchor_grads[l] = std::move(g.anchors);
    }
  }

  const double inv_m = 1.0 / static_cast<double>(model.modalities.size());
  for (const auto& et : t.encoders) {
    const ParamSet& enc = model.params.encoders.at(et.modality);
    ParamSet& genc = out.grads.encoders.at(et.modality);
    std::vector<Tensor> d_h(levels);
    for (std::size_t l = 0; l < levels; ++l) {
      d_h[l] = d_fused[l];
      for (double& v : d_h[l].values()) v *= inv_m;
    }
    for (std::size_t i = 0; i < levels; ++i) {
      const std::size_t l = levels - 1 - i;
      Tensor d_pre = std::move(d_h[l]);
      relu_backward_inplace(d_pre, et.pre[l]);
      Tensor d_in = affine_backward(et.inputs[l], d_pre, enc.layers[l], genc.layers[l]);
      if (l > 0) {
        pool2_adjoint_add(d_in, shape.level_height(l - 1), shape.level_width(l - 1), d_h[l - 1]);
      }
    }
  }
  return out;
}

// ---- optimization ---------------------------------------------------------------

void adam_step(SiteModel& model, const ModelParams& grads, const AdamConfig& cfg,
               bool update_lacca) {
  auto params = model.params.sets();
  auto gsets = grads.sets();
  auto msets = model.adam.m.sets();
  auto vsets = model.adam.v.sets();
  if (params.size() != gsets.size()) throw ContractError("adam_step: gradient layout differs");
  ++model.adam.step;
  const double t = static_cast<double>(model.adam.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  auto update = [&](Tensor& p, const Tensor& g, Tensor& m, Tensor& v) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p[i]);
    }
  };

  for (std::size_t s = 0; s < params.size(); ++s) {
    ParamSet& p = *params[s];
    if (p.role == Role::kLacca && !update_lacca) continue;
    if (!p.same_structure(*gsets[s])) throw ContractError("adam_step: gradient layout differs");
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
      update(p.layers[li].weight, gsets[s]->layers[li].weight, msets[s]->layers[li].weight,
             vsets[s]->layers[li].weight);
      update(p.layers[li].bias, gsets[s]->layers[li].bias, msets[s]->layers[li].bias,
             vsets[s]->layers[li].bias);
    }
  }
}

EpochStats train_epoch(SiteModel& model, const std::vector<synth::Sample>& samples,
                       std::span<const Tensor> anchors, const AdamConfig& cfg,
                       std::size_t batch_size, Rng& rng) {
  EpochStats stats;
  if (samples.empty()) return stats;
  batch_size = std::max<std::size_t>(batch_size, 1);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, rng);
  double total = 0.0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    const double scale = 1.0 / static_cast<double>(end - start);
    ModelParams acc = model.params.zeros_like();
    for (std::size_t b = start; b < end; ++b) {
      const auto& s = samples[order[b]];
      const auto trace = forward(model, s, anchors);
      total += loss(trace, s.label);
      const auto g = backward(model, trace, s.label, anchors, scale);
      auto dst = acc.sets();
      auto src = g.grads.sets();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->axpy(1.0, *src[i]);
    }
    adam_step(model, acc, cfg, !anchors.empty());
    ++stats.steps;
  }
  stats.mean_loss = total / static_cast<double>(samples.size());
  return stats;
}

// ---- evaluation ------------------------------------------------------------------

synth::LabelMap predict(const ForwardTrace& trace, std::size_t height, std::size_t width) {
  synth::LabelMap out{height, width, std::vector<int>(trace.logits.rows(), 0)};
  for (std::size_t i = 0; i < trace.logits.rows(); ++i) {
    auto r = trace.logits.row(i);
    out.classes[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

double mdsc(const synth::LabelMap& pred, const synth::LabelMap& gt, std::span<const int> classes) {
  if (pred.classes.size() != gt.classes.size()) throw DimensionError("mdsc: mask sizes differ");
  if (classes.empty()) return 1.0;
  double total = 0.0;
  for (int c : classes) {
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.classes.size(); ++i) {
      const bool in_p = pred.classes[i] == c, in_g = gt.classes[i] == c;
      p += in_p;
      g += in_g;
      both += in_p && in_g;
    }
    total += (p + g == 0) ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
  }
  return total / static_cast<double>(classes.size());
}

EvalStats evaluate(const SiteModel& model, const std::vector<synth::Sample>& samples,
                   std::span<const Tensor> anchors) {
  EvalStats stats;
  if (samples.empty()) return stats;
  std::vector<int> fg(model.shape.n_classes - 1);
  std::iota(fg.begin(), fg.end(), 1);
  for (const auto& s : samples) {
    const auto trace = forward(model, s, anchors);
    stats.loss += loss(trace, s.label);
    stats.mdsc += mdsc(predict(trace, model.shape.height, model.shape.width), s.label, fg);
  }
  stats.mdsc /= static_cast<double>(samples.size());
  stats.loss /= static_cast<double>(samples.size());
  return stats;
}

synth::Sample restrict_modalities(const synth::Sample& sample, std::span<const int> modalities) {
  synth::Sample out;
  out.id = sample.id;
  out.label = sample.label;
  out.images.resize(sample.images.size());
  for (int m : modalities) {
    if (m < 0 || static_cast<std::size_t>(m) >= sample.images.size()) {
      throw ContractError("restrict_modalities: modality " + std::to_string(m) + " not in sample");
    }
    out.images[static_cast<std::size_t>(m)] = sample.images[static_cast<std::size_t>(m)];
  }
  return out;
}

}  // namespace fedmepd::model
