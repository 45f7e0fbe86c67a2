#include "fedmepd/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace fedmepd::synth {

ContrastMatrix default_contrast() {
  return {
      {0.20, 0.25, 0.55, 0.60},  // T1: core vs. the rest
      {0.20, 0.20, 0.40, 0.90},  // T1c: enhancing rim
      {0.15, 0.65, 0.70, 0.65},  // T2: lesion vs. background
      {0.10, 0.85, 0.45, 0.45},  // FLAIR: edema
  };
}

std::vector<std::string> default_modality_names() { return {"T1", "T1c", "T2", "FLAIR"}; }

namespace {

void validate(const GenerateParams& p) {
  if (p.height < 8 || p.width < 8) {
    throw ParameterError("generate: image must be at least 8x8, got " + std::to_string(p.height) +
                         "x" + std::to_string(p.width));
  }
  if (p.n_classes < 2) throw ParameterError("generate: need at least 2 classes");
  if (p.contrast.empty()) throw ParameterError("generate: contrast matrix has no modalities");
  for (const auto& row : p.contrast) {
    if (row.size() != p.n_classes) {
      throw ParameterError("generate: contrast row has " + std::to_string(row.size()) +
                           " entries, expected " + std::to_string(p.n_classes));
    }
    for (double v : row) {
      if (!(v >= 0.0 && v <= 1.0)) throw ParameterError("generate: contrast entries must lie in [0,1]");
    }
  }
  if (p.noise_sigma < 0.0) throw ParameterError("generate: noise_sigma must be non-negative");
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

LabelMap draw_one(std::size_t h, std::size_t w, std::size_t n_classes, Rng& rng) {
  LabelMap label{h, w, std::vector<int>(h * w, 0)};
  const double hh = static_cast<double>(h), ww = static_cast<double>(w);
  const double cy = rng.uniform(0.35, 0.65) * hh;
  const double cx = rng.uniform(0.35, 0.65) * ww;
  const double ry = rng.uniform(0.22, 0.34) * hh;
  const double rx = rng.uniform(0.22, 0.34) * ww;
  const double theta = rng.uniform(0.0, std::numbers::pi);
  // Each inner structure shrinks and drifts a little inside its parent.
  std::vector<double> scale(n_classes, 1.0), oy(n_classes, 0.0), ox(n_classes, 0.0);
  for (std::size_t c = 2; c < n_classes; ++c) {
    scale[c] = scale[c - 1] * rng.uniform(0.5, 0.7);
    oy[c] = oy[c - 1] + rng.uniform(-0.1, 0.1) * scale[c - 1];
    ox[c] = ox[c - 1] + rng.uniform(-0.1, 0.1) * scale[c - 1];
  }
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dy = (static_cast<double>(y) + 0.5 - cy);
      const double dx = (static_cast<double>(x) + 0.5 - cx);
      const double u = (ct * dx + st * dy) / rx;
      const double v = (-st * dx + ct * dy) / ry;
      int cls = 0;
      for (std::size_t c = 1; c < n_classes; ++c) {
        const double uu = u - ox[c], vv = v - oy[c];
        if (uu * uu + vv * vv <= scale[c] * scale[c]) cls = static_cast<int>(c);
      }
      label.classes[y * w + x] = cls;
    }
  }
  return label;
}

}  // namespace

std::vector<LabelMap> draw_labels(const GenerateParams& params) {
  validate(params);
  Rng rng(mix(params.seed, 0x1abe1ULL));
  std::vector<LabelMap> out;
  out.reserve(params.n_samples);
  for (std::size_t i = 0; i < params.n_samples; ++i) {
    out.push_back(draw_one(params.height, params.width, params.n_classes, rng));
  }
  return out;
}

Tensor render(const LabelMap& label, std::span<const double> contrast_row, double noise_sigma,
              Rng& rng) {
  Tensor img({label.height, label.width});
  for (std::size_t i = 0; i < label.classes.size(); ++i) {
    double v = contrast_row[static_cast<std::size_t>(label.classes[i])];
    if (noise_sigma > 0.0) v += noise_sigma * rng.normal();
    img[i] = std::clamp(v, 0.0, 1.0);
  }
  return img;
}

std::vector<Sample> generate(const GenerateParams& params) {
  const auto labels = draw_labels(params);
  Rng rng(mix(params.seed, 0x7e4d3ULL));
  std::vector<Sample> out;
  out.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Sample s;
    s.id = i;
    s.label = labels[i];
    for (const auto& row : params.contrast) {
      s.images.push_back(render(s.label, row, params.noise_sigma, rng));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---- topology ---------------------------------------------------------------

SitePlan default_site_plan() {
  // Modality ids: 0 = T1, 1 = T1c, 2 = T2, 3 = FLAIR.
  return {
      {{0, 1, 2, 3}, 44, {}},
      {{1}, 11, {}},
      {{2}, 11, {}},
      {{1, 3}, 11, {}},
      {{0, 2}, 10, {}},
      {{0, 1, 3}, 11, {}},
      {{0, 2, 3}, 11, {}},
      {{0, 1, 2, 3}, 17, {}},
      {{0, 1, 2, 3}, 17, {}},
  };
}

SplitSizes split_sizes(std::size_t n) {
  const auto train = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
  const auto val = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  return {train, val, n - train - val};
}

std::vector<SiteSpec> make_topology(std::uint64_t seed, const SitePlan& plan,
                                    std::size_t pool_size, std::size_t n_modalities) {
  if (plan.empty()) throw ParameterError("make_topology: empty site plan");
  std::set<std::size_t> reserved;
  std::size_t requested = 0;
  for (std::size_t s = 0; s < plan.size(); ++s) {
    const auto& e = plan[s];
    auto mods = e.modalities;
    std::sort(mods.begin(), mods.end());
    if (mods.empty() || mods.size() > n_modalities ||
        std::adjacent_find(mods.begin(), mods.end()) != mods.end() || mods.front() < 0 ||
        mods.back() >= static_cast<int>(n_modalities)) {
      throw ParameterError("make_topology: site " + std::to_string(s) + " has an invalid modality set");
    }
    if (s == 0 && mods.size() != n_modalities) {
      throw ParameterError("make_topology: the server (site 0) must hold every modality");
    }
    if (!e.explicit_indices.empty()) {
      if (e.explicit_indices.size() != e.n_samples) {
        throw ParameterError("make_topology: site " + std::to_string(s) +
                             " explicit index count differs from its sample count");
      }
      for (std::size_t idx : e.explicit_indices) {
        if (idx >= pool_size) throw ParameterError("make_topology: index outside the pool");
        if (!reserved.insert(idx).second) {
          throw ParameterError("make_topology: sample " + std::to_string(idx) +
                               " requested by more than one site");
        }
      }
    }
    requested += e.n_samples;
  }
  if (requested > pool_size) {
    throw ParameterError("make_topology: plan requests " + std::to_string(requested) +
                         " samples but the pool holds " + std::to_string(pool_size));
  }

  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < pool_size; ++i) {
    if (!reserved.contains(i)) free.push_back(i);
  }
  Rng rng(mix(seed, 0x7090ULL));
  shuffle(free, rng);

  std::vector<SiteSpec> sites;
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < plan.size(); ++s) {
    const auto& e = plan[s];
    std::vector<std::size_t> idx = e.explicit_indices;
    if (idx.empty()) {
      idx.assign(free.begin() + static_cast<std::ptrdiff_t>(cursor),
                 free.begin() + static_cast<std::ptrdiff_t>(cursor + e.n_samples));
      cursor += e.n_samples;
    }
    const auto sizes = split_sizes(idx.size());
    SiteSpec spec;
    spec.site_id = static_cast<int>(s);
    spec.modalities = e.modalities;
    std::sort(spec.modalities.begin(), spec.modalities.end());
    spec.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(sizes.train));
    spec.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(sizes.train),
                    idx.begin() + static_cast<std::ptrdiff_t>(sizes.train + sizes.val));
    spec.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(sizes.train + sizes.val), idx.end());
    sites.push_back(std::move(spec));
  }
  return sites;
}

// ---- site views -------------------------------------------------------------

SiteAppearance site_appearance(const GenerateParams& base, const DomainShift& shift, int site_id) {
  SiteAppearance app{base.contrast, base.noise_sigma};
  if (site_id == 0) return app;
  Rng rng(mix(base.seed, 0x5173ULL + static_cast<std::uint64_t>(site_id)));
  for (auto& row : app.contrast) {
    for (double& v : row) {
      v = std::clamp(v + rng.uniform(-shift.contrast_jitter, shift.contrast_jitter), 0.0, 1.0);
    }
  }
  app.noise_sigma =
      std::max(0.0, base.noise_sigma + rng.uniform(-shift.noise_jitter, shift.noise_jitter));
  return app;
}

SiteSamples render_site(const std::vector<LabelMap>& pool, const SiteSpec& site,
                        const GenerateParams& base, const DomainShift& shift) {
  const auto app = site_appearance(base, shift, site.site_id);
  auto render_split = [&](const std::vector<std::size_t>& ids) {
    std::vector<Sample> out;
    out.reserve(ids.size());
    for (std::size_t id : ids) {
      if (id >= pool.size()) throw ParameterError("render_site: sample index outside the pool");
      Rng rng(mix(mix(base.seed, static_cast<std::uint64_t>(site.site_id)), id));
      Sample s;
      s.id = id;
      s.label = pool[id];
      for (const auto& row : app.contrast) {
        s.images.push_back(render(s.label, row, app.noise_sigma, rng));
      }
      out.push_back(std::move(s));
    }
    return out;
  };
  return {render_split(site.train), render_split(site.val), render_split(site.test)};
}

}  // namespace fedmepd::synth
