#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fedmepd/numkit.hpp"
#include "fedmepd/synthdata.hpp"
#include "fedmepd/toymodel.hpp"

namespace fedmepd::anchors {

/// Multi-anchor class prototypes, one matrix per feature level. Rows are laid
/// out class-major: anchor a belongs to class a / n_k.
struct AnchorBank {
  std::size_t n_classes = 0;
  std::size_t n_k = 0;
  std::size_t membership_level = 0;  // 0-based; the deepest level by default
  double omega = 0.999;
  std::vector<Tensor> levels;       // (n_k · n_classes) × C_l
  std::vector<std::uint8_t> stale;  // per class: 1 when no server sample showed it

  bool empty() const { return levels.empty(); }
  std::size_t n_anchors() const { return n_k * n_classes; }
  std::size_t class_of(std::size_t anchor) const { return anchor / n_k; }

  friend bool operator==(const AnchorBank&, const AnchorBank&) = default;
};

/// Per-(sample, class) pooled feature vectors at every level, keyed in sorted
/// (sample_id, class) order.
struct ClassFeatureSet {
  struct Key {
    std::size_t sample_id;
    int cls;
    auto operator<=>(const Key&) const = default;
  };
  std::vector<Key> keys;
  std::vector<Tensor> levels;  // keys.size() × C_l
};

/// Nearest-neighbour downsampling of a label map to a level's grid (factor 2^level).
std::vector<int> downsample_labels(const synth::LabelMap& label, std::size_t level);

/// Mean of the feature rows whose label equals `cls`; nullopt when none does.
std::optional<std::vector<double>> masked_average_pool(const Tensor& features,
                                                       std::span<const int> labels, int cls);

/// Pools the server's fused (uncalibrated) features per class at every level.
/// A key is kept only if its class is present at every level's resolution.
ClassFeatureSet extract_class_features(const model::SiteModel& server,
                                       const std::vector<synth::Sample>& samples);

/// K-means on each class's membership-level vectors, then per-level cluster
/// means under that one membership.
AnchorBank build_bank(const ClassFeatureSet& features, std::size_t n_classes, std::size_t n_k,
                      std::size_t membership_level, double omega, Rng& rng);

enum class MatchRule : std::uint8_t { kNearest = 0, kOneToOne = 1 };

/// Moves each memory anchor toward its matched fresh centroid of the same
/// class: ā ← ω·ā + (1−ω)·a. Matching is by L2 distance at the membership
/// level.
AnchorBank ema_update(const AnchorBank& bank, const AnchorBank& fresh, double omega,
                      MatchRule rule = MatchRule::kNearest);

}  // namespace fedmepd::anchors
