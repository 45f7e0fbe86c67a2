#include "fedmepd/anchorbank.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace fedmepd::anchors {

std::vector<int> downsample_labels(const synth::LabelMap& label, std::size_t level) {
  const std::size_t f = std::size_t{1} << level;
  const std::size_t h = label.height / f, w = label.width / f;
  std::vector<int> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = label.at(y * f + f / 2, x * f + f / 2);
  }
  return out;
}

std::optional<std::vector<double>> masked_average_pool(const Tensor& features,
                                                       std::span<const int> labels, int cls) {
  if (features.rows() != labels.size()) {
    throw DimensionError("masked_average_pool: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(features.rows()) + " feature rows");
  }
  std::vector<double> acc(features.cols(), 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != cls) continue;
    auto r = features.row(i);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += r[c];
    ++count;
  }
  if (count == 0) return std::nullopt;
  for (double& v : acc) v /= static_cast<double>(count);
  return acc;
}

ClassFeatureSet extract_class_features(const model::SiteModel& server,
                                       const std::vector<synth::Sample>& samples) {
  const std::size_t levels = server.shape.levels();
  const int n_classes = static_cast<int>(server.shape.n_classes);
  std::vector<std::pair<ClassFeatureSet::Key, std::vector<std::vector<double>>>> rows;
  for (const auto& s : samples) {
    const auto trace = model::forward(server, s);
    std::vector<std::vector<int>> labels(levels);
    for (std::size_t l = 0; l < levels; ++l) labels[l] = downsample_labels(s.label, l);
    for (int c = 0; c < n_classes; ++c) {
      std::vector<std::vector<double>> per_level;
      for (std::size_t l = 0; l < levels; ++l) {
        auto v = masked_average_pool(trace.fused[l], labels[l], c);
        if (!v) break;
        per_level.push_back(std::move(*v));
      }
      if (per_level.size() == levels) rows.push_back({{s.id, c}, std::move(per_level)});
    }
  }
  std::sort(rows.begin(), rows.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  ClassFeatureSet out;
  out.levels.resize(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    out.levels[l] = Tensor::matrix(rows.size(), server.shape.enc_channels[l]);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.keys.push_back(rows[i].first);
    for (std::size_t l = 0; l < levels; ++l) {
      std::copy(rows[i].second[l].begin(), rows[i].second[l].end(), out.levels[l].row(i).begin());
    }
  }
  return out;
}

AnchorBank build_bank(const ClassFeatureSet& features, std::size_t n_classes, std::size_t n_k,
                      std::size_t membership_level, double omega, Rng& rng) {
  if (n_k == 0) throw ParameterError("build_bank: n_k must be at least 1");
  if (membership_level >= features.levels.size()) {
    throw ParameterError("build_bank: membership level " + std::to_string(membership_level + 1) +
                         " exceeds the " + std::to_string(features.levels.size()) +
                         " feature levels");
  }
  if (!std::is_sorted(features.keys.begin(), features.keys.end())) {
    throw ParameterError("build_bank: feature keys must be sorted by (sample, class)");
  }
  const std::size_t levels = features.levels.size();
  AnchorBank bank;
  bank.n_classes = n_classes;
  bank.n_k = n_k;
  bank.membership_level = membership_level;
  bank.omega = omega;
  bank.stale.assign(n_classes, 0);
  for (std::size_t l = 0; l < levels; ++l) {
    bank.levels.push_back(Tensor::matrix(n_k * n_classes, features.levels[l].cols()));
  }

  for (std::size_t c = 0; c < n_classes; ++c) {
    // One stream per class, drawn in class order, so sample order cannot leak in.
    Rng class_rng = rng.fork();
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < features.keys.size(); ++i) {
      if (features.keys[i].cls == static_cast<int>(c)) rows.push_back(i);
    }
    if (rows.empty()) {
      bank.stale[c] = 1;
      continue;
    }
    const Tensor& member_feats = features.levels[membership_level];
    Tensor pts = Tensor::matrix(rows.size(), member_feats.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(member_feats.row(rows[i]).begin(), pts.cols(), pts.row(i).begin());
    }
    const auto km = kmeans(pts, n_k, class_rng);

    for (std::size_t k = 0; k < n_k; ++k) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (km.membership[i] == k) members.push_back(rows[i]);
      }
      if (members.empty()) {
        // Duplicate centroid (fewer points than anchors): borrow the closest point.
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const double d = squared_distance(pts.row(i), km.centroids.row(k));
          if (d < best_d) {
            best_d = d;
            best = i;
          }
        }
        members.push_back(rows[best]);
      }
      const std::size_t anchor = c * n_k + k;
      for (std::size_t l = 0; l < levels; ++l) {
        auto dst = bank.levels[l].row(anchor);
        for (std::size_t r : members) {
          auto src = features.levels[l].row(r);
          for (std::size_t d = 0; d < dst.size(); ++d) dst[d] += src[d];
        }
        for (double& v : dst) v /= static_cast<double>(members.size());
      }
    }
  }
  return bank;
}

namespace {

bool same_layout(const AnchorBank& a, const AnchorBank& b) {
  if (a.n_classes != b.n_classes || a.n_k != b.n_k || a.levels.size() != b.levels.size() ||
      a.membership_level != b.membership_level) {
    return false;
  }
  for (std::size_t l = 0; l < a.levels.size(); ++l) {
    if (a.levels[l].shape() != b.levels[l].shape()) return false;
  }
  return true;
}

/// match[i] = fresh anchor index (within the class) used for memory anchor i.
std::vector<std::size_t> match_class(const AnchorBank& bank, const AnchorBank& fresh,
                                     std::size_t cls, MatchRule rule) {
  const std::size_t n_k = bank.n_k;
  const Tensor& mem = bank.levels[bank.membership_level];
  const Tensor& frs = fresh.levels[fresh.membership_level];
  std::vector<std::vector<double>> cost(n_k, std::vector<double>(n_k));
  for (std::size_t i = 0; i < n_k; ++i) {
    for (std::size_t j = 0; j < n_k; ++j) {
      cost[i][j] = squared_distance(mem.row(cls * n_k + i), frs.row(cls * n_k + j));
    }
  }
  std::vector<std::size_t> match(n_k);
  if (rule == MatchRule::kNearest) {
    for (std::size_t i = 0; i < n_k; ++i) {
      match[i] = static_cast<std::size_t>(
          std::min_element(cost[i].begin(), cost[i].end()) - cost[i].begin());
    }
    return match;
  }
  // One-to-one: exhaustive over permutations; n_k is a handful of anchors.
  if (n_k > 8) throw ParameterError("ema_update: one-to-one matching supports n_k <= 8");
  std::vector<std::size_t> perm(n_k);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < n_k; ++i) total += cost[i][perm[i]];
    if (total < best) {
      best = total;
      match = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return match;
}

}  // namespace

AnchorBank ema_update(const AnchorBank& bank, const AnchorBank& fresh, double omega,
                      MatchRule rule) {
  if (!same_layout(bank, fresh)) throw DimensionError("ema_update: bank layouts differ");
  AnchorBank out = bank;
  out.omega = omega;
  const std::size_t n_k = bank.n_k;
  for (std::size_t c = 0; c < bank.n_classes; ++c) {
    if (fresh.stale[c]) continue;
    if (bank.stale[c]) {
      // Nothing to smooth against yet.
      for (std::size_t l = 0; l < bank.levels.size(); ++l) {
        for (std::size_t k = 0; k < n_k; ++k) {
          auto src = fresh.levels[l].row(c * n_k + k);
          std::copy(src.begin(), src.end(), out.levels[l].row(c * n_k + k).begin());
        }
      }
      out.stale[c] = 0;
      continue;
    }
    const auto match = match_class(bank, fresh, c, rule);
    for (std::size_t l = 0; l < bank.levels.size(); ++l) {
      for (std::size_t k = 0; k < n_k; ++k) {
        auto dst = out.levels[l].row(c * n_k + k);
        auto src = fresh.levels[l].row(c * n_k + match[k]);
        for (std::size_t d = 0; d < dst.size(); ++d) {
          dst[d] = omega * dst[d] + (1.0 - omega) * src[d];
        }
      }
    }
  }
  return out;
}

}  // namespace fedmepd::anchors
