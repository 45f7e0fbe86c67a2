#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedmepd/lacca.hpp"
#include "fedmepd/numkit.hpp"
#include "fedmepd/synthdata.hpp"

namespace fedmepd::model {

/// Raised when a caller violates a structural contract (wrong modalities,
/// mismatched parameter structure).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Role : std::uint8_t { kEncoder = 0, kDecoder = 1, kLacca = 2 };

/// Dense layer. `weight` is out × in for encoder/decoder layers (y = x Wᵀ + b)
/// and C × C for the LACCA projections (y = x W). `bias` may be empty.
struct Layer {
  std::string name;
  Tensor weight;
  Tensor bias;

  friend bool operator==(const Layer&, const Layer&) = default;
};

/// One filter: a row of a layer's weight plus the matching bias element.
struct FilterRef {
  std::size_t layer = 0;
  std::size_t row = 0;
};

class ParamSet {
 public:
  Role role = Role::kDecoder;
  int modality = -1;  // encoders only
  std::vector<Layer> layers;

  std::size_t n_filters() const;
  /// Flat filter index → (layer, row), layers in order, rows in order.
  std::vector<FilterRef> filters() const;
  std::size_t filter_size(const FilterRef& f) const;
  std::vector<double> filter_vector(const FilterRef& f) const;
  void set_filter(const FilterRef& f, std::span<const double> values);
  std::size_t n_elements() const;

  ParamSet zeros_like() const;
  bool same_structure(const ParamSet& other) const;
  bool all_finite() const;

  /// this += scale · other (same structure required).
  void axpy(double scale, const ParamSet& other);

  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

struct ModelShape {
  std::size_t n_modalities = 4;
  std::size_t n_classes = 4;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::size_t> enc_channels{8, 16};  // C_l per level, level 1 first
  std::vector<std::size_t> dec_channels{8, 16};  // decoder width per level
  std::size_t n_heads = 8;

  std::size_t levels() const { return enc_channels.size(); }
  std::size_t level_height(std::size_t level) const { return height >> level; }
  std::size_t level_width(std::size_t level) const { return width >> level; }
  std::size_t level_tokens(std::size_t level) const {
    return level_height(level) * level_width(level);
  }
  /// Throws ParameterError when the shape is unusable.
  void validate() const;

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Parameters (or gradients, or optimizer moments) of one site, all with the
/// same layout.
struct ModelParams {
  std::map<int, ParamSet> encoders;
  ParamSet decoder;
  ParamSet lacca;

  /// Deterministic order: encoders by modality, decoder, lacca.
  std::vector<ParamSet*> sets();
  std::vector<const ParamSet*> sets() const;
  ModelParams zeros_like() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct AdamState {
  std::uint64_t step = 0;
  ModelParams m;
  ModelParams v;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct SiteModel {
  ModelShape shape;
  std::vector<int> modalities;  // sorted
  ModelParams params;
  AdamState adam;

  friend bool operator==(const SiteModel&, const SiteModel&) = default;
};

/// Index of the LACCA projection layers for a level (0-based).
inline std::size_t lacca_layer(std::size_t level, std::size_t which) { return 3 * level + which; }

ParamSet init_encoder(const ModelShape& shape, int modality, Rng& rng);
ParamSet init_decoder(const ModelShape& shape, Rng& rng);
ParamSet init_lacca(const ModelShape& shape, Rng& rng);

/// Fresh model with zeroed optimizer state. Encoders are created for the
/// given modalities only.
SiteModel init_model(const ModelShape& shape, std::vector<int> modalities, Rng& rng);

// ---- forward / backward ------------------------------------------------------

struct EncoderTrace {
  int modality = -1;
  std::vector<Tensor> inputs;  // per level: 3×3 patches (level 1) or pooled features
  std::vector<Tensor> pre;     // pre-activation
  std::vector<Tensor> post;    // per-level features of this modality
};

struct ForwardTrace {
  std::vector<EncoderTrace> encoders;
  std::vector<Tensor> fused;       // F_l, level 1 first; level L is the most abstract
  std::vector<Tensor> calibrated;  // decoder input per level (F_l + calibration when enabled)
  std::vector<lacca::Forward> calibration;  // empty when no anchors were supplied
  std::vector<Tensor> dec_inputs;  // per level
  std::vector<Tensor> dec_pre;
  std::vector<Tensor> dec_post;
  Tensor logits;  // (H·W) × N_c
  Tensor probs;
};

/// Runs encoders for the model's modalities, fuses by mean, optionally
/// calibrates each level against `anchors` (one matrix per level, empty span
/// = no calibration) and decodes to per-pixel logits.
ForwardTrace forward(const SiteModel& model, const synth::Sample& sample,
                     std::span<const Tensor> anchors = {});

/// Mean per-pixel cross-entropy plus (1 − mean soft Dice over foreground).
double loss(const ForwardTrace& trace, const synth::LabelMap& label);

inline constexpr double kDiceEps = 1e-5;

struct Backward {
  ModelParams grads;
  /// Gradients w.r.t. the anchors, per level; computed but not applied.
  std::vector<Tensor> anchor_grads;
};

/// Exact gradients of `loss_scale · loss(trace, label)`.
Backward backward(const SiteModel& model, const ForwardTrace& trace,
                  const synth::LabelMap& label, std::span<const Tensor> anchors = {},
                  double loss_scale = 1.0);

// ---- optimization -------------------------------------------------------------

struct AdamConfig {
  double lr = 2e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam step with decoupled weight decay. LACCA parameters are left alone
/// unless `update_lacca` is set.
void adam_step(SiteModel& model, const ModelParams& grads, const AdamConfig& cfg,
               bool update_lacca);

struct EpochStats {
  double mean_loss = 0.0;
  std::size_t steps = 0;
};

/// One pass over `samples` in an rng-shuffled order, averaging gradients over
/// mini-batches of `batch_size`.
EpochStats train_epoch(SiteModel& model, const std::vector<synth::Sample>& samples,
                       std::span<const Tensor> anchors, const AdamConfig& cfg,
                       std::size_t batch_size, Rng& rng);

// ---- evaluation ---------------------------------------------------------------

synth::LabelMap predict(const ForwardTrace& trace, std::size_t height, std::size_t width);

/// Mean Dice over `classes`; a class absent from both masks scores 1.
double mdsc(const synth::LabelMap& pred, const synth::LabelMap& gt, std::span<const int> classes);

struct EvalStats {
  double mdsc = 0.0;
  double loss = 0.0;
};

EvalStats evaluate(const SiteModel& model, const std::vector<synth::Sample>& samples,
                   std::span<const Tensor> anchors);

/// Keeps only the given modalities' images; the rest become empty tensors.
synth::Sample restrict_modalities(const synth::Sample& sample, std::span<const int> modalities);

}  // namespace fedmepd::model
