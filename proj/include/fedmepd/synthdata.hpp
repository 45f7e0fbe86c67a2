#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedmepd/numkit.hpp"

namespace fedmepd::synth {

/// Per-pixel class indices for one H×W image.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> classes;

  int at(std::size_t y, std::size_t x) const { return classes[y * width + x]; }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

struct Sample {
  std::size_t id = 0;  // index into the generated pool
  /// One H×W intensity map per modality of the complete set, index = ModalityId.
  std::vector<Tensor> images;
  LabelMap label;
};

/// rows = modalities, cols = classes, entries in [0, 1].
using ContrastMatrix = std::vector<std::vector<double>>;

/// T1, T1c, T2, FLAIR analogues over {background, edema, core, enhancing}.
/// Each row separates a different pair of classes well.
ContrastMatrix default_contrast();
std::vector<std::string> default_modality_names();

struct GenerateParams {
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t n_classes = 4;
  ContrastMatrix contrast = default_contrast();
  double noise_sigma = 0.05;
};

/// Draws nested-ellipse label maps (class c sits inside class c-1) and
/// renders every modality from them.
std::vector<Sample> generate(const GenerateParams& params);

/// Draws only the latent label maps; `generate` is `draw_labels` + `render`.
std::vector<LabelMap> draw_labels(const GenerateParams& params);

/// Contrast remap of a label map plus Gaussian noise, clamped to [0, 1].
Tensor render(const LabelMap& label, std::span<const double> contrast_row, double noise_sigma,
              Rng& rng);

// ---- topology -----------------------------------------------------------

struct SitePlanEntry {
  std::vector<int> modalities;
  std::size_t n_samples = 0;
  /// Optional explicit pool indices; must not overlap any other site.
  std::vector<std::size_t> explicit_indices;
};

/// Entry 0 is the server and must be full-modal.
using SitePlan = std::vector<SitePlanEntry>;

struct SiteSpec {
  int site_id = 0;  // 0 = server
  std::vector<int> modalities;
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  std::size_t n_samples() const { return train.size() + val.size() + test.size(); }
};

/// Server plus two clients for each of the mono, dual, triple and full modal
/// combinations (T1c, T2, FLAIR/T1c, T1/T2, FLAIR/T1c/T1, FLAIR/T1/T2, and
/// two full-modal clients). Samples: server 44; clients 11, 11, 11, 10, 11,
/// 11, 17, 17.
SitePlan default_site_plan();

/// 6:2:2 split sizes for n samples; remainder goes to the test split.
struct SplitSizes {
  std::size_t train, val, test;
};
SplitSizes split_sizes(std::size_t n);

/// Assigns disjoint pool indices to every site and splits each 6:2:2.
std::vector<SiteSpec> make_topology(std::uint64_t seed, const SitePlan& plan,
                                    std::size_t pool_size, std::size_t n_modalities);

// ---- site views -----------------------------------------------------------

struct DomainShift {
  double contrast_jitter = 0.0;  // uniform ± per (modality, class) entry
  double noise_jitter = 0.0;     // uniform ± on the noise sigma
};

/// Per-site contrast matrix and noise level; the server (site 0) is never
/// shifted.
struct SiteAppearance {
  ContrastMatrix contrast;
  double noise_sigma = 0.0;
};
SiteAppearance site_appearance(const GenerateParams& base, const DomainShift& shift, int site_id);

struct SiteSamples {
  std::vector<Sample> train, val, test;
};

/// Renders the site's samples with its own appearance, keeping all modalities
/// (restriction to the site's subset happens in the model).
SiteSamples render_site(const std::vector<LabelMap>& pool, const SiteSpec& site,
                        const GenerateParams& base, const DomainShift& shift);

}  // namespace fedmepd::synth
