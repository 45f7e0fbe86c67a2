// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
// failure. The desk-scale experiments (criteria 8 to 11) share runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "fedmepd/anchorbank.hpp"
#include "fedmepd/codec.hpp"
#include "fedmepd/fedcore.hpp"
#include "fedmepd/lacca.hpp"
#include "fedmepd/numkit.hpp"
#include "fedmepd/simnet.hpp"
#include "support.hpp"

#ifndef FEDMEPD_SOURCE_DIR
#define FEDMEPD_SOURCE_DIR "."
#endif

using namespace fedmepd;
using namespace fedmepd::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt("%.4f", v[i]);
  return s + "]";
}

// ---- 1 ----------------------------------------------------------------------

Outcome gradient_correctness() {
  Rng rng(20251);
  std::size_t checked = 0, failed = 0;
  double worst = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t heads = std::size_t{1} << rng.below(3);
    const auto shape = small_shape(heads);
    std::vector<int> mods;
    for (int m = 0; m < 4; ++m) {
      if (rng.below(2)) mods.push_back(m);
    }
    if (mods.empty()) mods.push_back(static_cast<int>(rng.below(4)));
    Rng init = rng.fork();
    const auto model = model::init_model(shape, mods, init);
    const auto sample = random_sample(shape, mods, rng);
    const auto anchors = random_anchors(shape, 1 + rng.below(12), rng);
    const auto rep = finite_difference_check(model, sample, anchors, 1e-5);
    checked += rep.checked;
    failed += rep.failed;
    worst = std::max(worst, rep.worst);
  }
  return {failed == 0, std::to_string(checked) + " parameters over 20 instances, " +
                           std::to_string(failed) + " outside 1e-4 relative" +
                           (failed ? ", worst " + fmt("%.2e", worst) : "")};
}

// ---- 2 ----------------------------------------------------------------------

Outcome mask_dynamics() {
  Rng rng(7002);
  std::size_t violations = 0;
  const std::vector<std::uint32_t> patiences{0, 1, 2, 3, 5, 10};
  for (int stream = 0; stream < 1000; ++stream) {
    const std::size_t filters = 1 + rng.below(12);
    const std::size_t rounds = 1 + rng.below(40);
    const double bias = rng.uniform(-0.6, 0.6);
    const double zero_rate = rng.uniform(0.0, 0.2);
    std::vector<fed::PersonalizationMask> masks;
    for (auto p : patiences) masks.push_back(fed::PersonalizationMask::all_ones(1, filters, p));
    for (std::size_t r = 0; r < rounds; ++r) {
      std::vector<double> delta(filters);
      for (double& d : delta) {
        d = rng.uniform() < zero_rate ? 0.0 : std::clamp(rng.uniform(-1, 1) + bias, -1.0, 1.0);
      }
      for (std::size_t k = 0; k < masks.size(); ++k) {
        const auto before = masks[k];
        fed::update_mask(masks[k], 0, delta);
        const auto& m = masks[k];
        for (std::size_t j = 0; j < filters; ++j) {
          const auto b0 = before.bits[j], b1 = m.bits[j];
          if (b1 > b0) ++violations;  // never back to federated
          if (!b0) {
            if (b1 || m.counters[j] != before.counters[j]) ++violations;  // sealed
            continue;
          }
          if (m.patience == 0) {
            if (b1) ++violations;  // immediate personalization
            continue;
          }
          if (delta[j] >= 0.0) {
            if (!b1 || m.counters[j] != 0) ++violations;  // agreement resets
          } else {
            const std::uint32_t c = before.counters[j] + 1;
            if (c >= m.patience) {
              if (b1) ++violations;
            } else if (!b1 || m.counters[j] != c) {
              ++violations;
            }
          }
        }
      }
      // Smaller patience personalizes a superset.
      for (std::size_t k = 1; k < masks.size(); ++k) {
        for (std::size_t j = 0; j < filters; ++j) {
          if (masks[k - 1].bits[j] > masks[k].bits[j]) ++violations;
        }
      }
    }
  }
  return {violations == 0, "1000 streams, P in {0,1,2,3,5,10}, " + std::to_string(violations) +
                               " violations"};
}

// ---- 3 ----------------------------------------------------------------------

Outcome fedavg_reduction() {
  Rng rng(7003);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_snapshot(rng, true);
    const auto out = fed::aggregate_server_decoder(s.server_prev, s.client_now, s.mask,
                                                   client_deltas(s),
                                                   {.lambda_base = 0.0, .eta = fed::EtaRule::kUniform});
    const double n = static_cast<double>(s.client_now.size());
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
      for (int part = 0; part < 2; ++part) {
        const Tensor& got = part ? out.layers[l].bias : out.layers[l].weight;
        for (std::size_t e = 0; e < got.size(); ++e) {
          double mean = 0.0;
          for (const auto& c : s.client_now) mean += (part ? c.layers[l].bias : c.layers[l].weight)[e];
          worst = std::max(worst, std::abs(got[e] - mean / n));
        }
      }
    }
  }
  return {worst <= 1e-12, "100 snapshots, max |server - client mean| = " + fmt("%.3e", worst)};
}

// ---- 4 ----------------------------------------------------------------------

Outcome convex_hull() {
  Rng rng(7004);
  double worst = 0.0;
  std::size_t kept_checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_snapshot(rng);
    const double lambda = rng.uniform();
    const auto rule = rng.below(2) ? fed::EtaRule::kInverseNorm : fed::EtaRule::kUniform;
    const auto ds = client_deltas(s);
    const auto out = fed::aggregate_server_decoder(s.server_prev, s.client_now, s.mask, ds,
                                                   {.lambda_base = lambda, .eta = rule});
    const auto filters = s.server_prev.filters();
    for (std::size_t j = 0; j < filters.size(); ++j) {
      const auto got = out.filter_vector(filters[j]);
      const auto prev = s.server_prev.filter_vector(filters[j]);
      std::vector<double> lo = prev, hi = prev;
      for (std::size_t i = 0; i < s.client_now.size(); ++i) {
        if (!s.mask.bit(i, j)) continue;
        const auto w = s.client_now[i].filter_vector(filters[j]);
        for (std::size_t e = 0; e < w.size(); ++e) {
          lo[e] = std::min(lo[e], w[e]);
          hi[e] = std::max(hi[e], w[e]);
        }
      }
      if (s.mask.fully_personalized(j)) ++kept_checked;
      for (std::size_t e = 0; e < got.size(); ++e) {
        worst = std::max({worst, lo[e] - got[e], got[e] - hi[e]});
      }
    }
  }
  return {worst <= 1e-12, "100 snapshots (random lambda, both eta rules), max hull excursion " +
                              fmt("%.3e", std::max(worst, 0.0)) + ", " +
                              std::to_string(kept_checked) + " fully personalized filters"};
}

// ---- 5 ----------------------------------------------------------------------

double distance(const anchors::AnchorBank& a, const anchors::AnchorBank& b) {
  double s = 0.0;
  for (std::size_t l = 0; l < a.levels.size(); ++l) {
    for (std::size_t i = 0; i < a.levels[l].size(); ++i) {
      const double d = a.levels[l][i] - b.levels[l][i];
      s += d * d;
    }
  }
  return std::sqrt(s);
}

Outcome anchor_contraction() {
  Rng rng(7005);
  double worst = 0.0, worst_step = 0.0;
  for (std::size_t n_k : {1, 3}) {
    for (int trial = 0; trial < 5; ++trial) {
      anchors::AnchorBank bank;
      bank.n_classes = 4;
      bank.n_k = n_k;
      bank.stale.assign(4, 0);
      for (std::size_t c : {8, 16}) bank.levels.push_back(random_matrix(4 * n_k, c, rng));
      // One stationary centroid per class, replicated over the class's slots.
      auto target = bank;
      for (auto& t : target.levels) {
        for (std::size_t cls = 0; cls < 4; ++cls) {
          std::vector<double> centre(t.cols());
          for (double& v : centre) v = rng.uniform(-2, 2);
          for (std::size_t k = 0; k < n_k; ++k) std::copy(centre.begin(), centre.end(), t.row(cls * n_k + k).begin());
        }
      }
      const double omega = 0.999;
      const double d0 = distance(bank, target);
      auto cur = bank;
      for (int t = 1; t <= 2000; ++t) {
        const double before = distance(cur, target);
        const auto next = anchors::ema_update(cur, target, omega);
        const double moved = distance(next, cur);
        if (t == 1) worst_step = std::max(worst_step, std::abs(moved - 0.001 * before));
        cur = next;
        worst = std::max(worst, std::abs(distance(cur, target) - std::pow(omega, t) * d0));
      }
    }
  }
  return {worst <= 1e-9 && worst_step <= 1e-12,
          "2000 updates, omega 0.999: max | gap - omega^t gap0 | = " + fmt("%.2e", worst) +
              ", first-step move vs 0.1% of gap off by " + fmt("%.2e", worst_step)};
}

// ---- 6 ----------------------------------------------------------------------

Outcome kmeans_oracle() {
  Rng gen(7006);
  int optimal = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + gen.below(8);
    const std::size_t k = 1 + gen.below(3);
    const auto pts = random_matrix(n, 1 + gen.below(3), gen);
    Rng rng(gen.next_u64());
    const auto r = kmeans(pts, k, rng);
    if (within_cluster_sse(pts, r.centroids, r.membership) <= brute_force_sse(pts, k) + 1e-9) ++optimal;
  }
  return {optimal >= 48, std::to_string(optimal) + "/50 instances at the brute-force optimum (need 95%)"};
}

// ---- 7 ----------------------------------------------------------------------

/// Literal single-head computation: softmax((F·W0)(A·W1)ᵀ / √C)·(A·W2), with
/// every product written out.
Tensor literal_attention(const Tensor& f, const Tensor& a, const Tensor& w0, const Tensor& w1,
                         const Tensor& w2) {
  const std::size_t t = f.rows(), k = a.rows(), c = f.cols();
  auto mul = [](const Tensor& x, const Tensor& w) {
    Tensor out = Tensor::matrix(x.rows(), w.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < x.cols(); ++p) s += x(i, p) * w(p, j);
        out(i, j) = s;
      }
    return out;
  };
  const Tensor q = mul(f, w0), key = mul(a, w1), v = mul(a, w2);
  Tensor out = Tensor::matrix(t, c);
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> s(k);
    for (std::size_t j = 0; j < k; ++j) {
      double d = 0.0;
      for (std::size_t p = 0; p < c; ++p) d += q(i, p) * key(j, p);
      s[j] = d / std::sqrt(static_cast<double>(c));
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double& x : s) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t p = 0; p < c; ++p) out(i, p) += s[j] / z * v(j, p);
  }
  return out;
}

Outcome lacca_contract() {
  Rng rng(7007);
  double row_err = 0.0, single_err = 0.0, literal_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 8, t = 1 + rng.below(30), k = 1 + rng.below(20);
    Tensor f = random_matrix(t, c, rng, -3, 3), a = random_matrix(k, c, rng);
    Tensor w0 = random_matrix(c, c, rng), w1 = random_matrix(c, c, rng), w2 = random_matrix(c, c, rng);
    const std::size_t heads = std::size_t{1} << rng.below(4);
    const auto fwd = lacca::calibrate(f, a, {w0, w1, w2}, heads);
    for (const auto& attn : fwd.attention)
      for (std::size_t r = 0; r < attn.rows(); ++r) {
        double s = 0.0;
        for (double p : attn.row(r)) s += p;
        row_err = std::max(row_err, std::abs(s - 1.0));
      }
    const Tensor one = random_matrix(1, c, rng);
    const auto single = lacca::calibrate(f, one, {w0, w1, w2}, heads);
    const auto v = matmul(one, w2);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t x = 0; x < c; ++x) single_err = std::max(single_err, std::abs(single.output(i, x) - v(0, x)));
    const auto h1 = lacca::calibrate(f, a, {w0, w1, w2}, 1);
    const auto lit = literal_attention(f, a, w0, w1, w2);
    for (std::size_t i = 0; i < h1.output.size(); ++i) literal_err = std::max(literal_err, std::abs(h1.output[i] - lit[i]));
  }
  const bool pass = row_err <= 1e-12 && single_err <= 1e-12 && literal_err <= 1e-10;
  return {pass, "50 cases: row sums off by " + fmt("%.1e", row_err) + ", single anchor off by " +
                    fmt("%.1e", single_err) + ", single head vs literal off by " + fmt("%.1e", literal_err)};
}

// ---- 12 ---------------------------------------------------------------------

Outcome codec_property() {
  Rng rng(7012);
  std::size_t mismatches = 0;
  for (int i = 0; i < 10000; ++i) {
    if (i % 2 == 0) {
      const auto m = random_broadcast(rng);
      const auto b = codec::encode(m);
      const auto back = codec::decode_broadcast(b);
      if (codec::encode(back) != b || back.round != m.round || back.mask_row != m.mask_row) ++mismatches;
    } else {
      const auto m = random_report(rng);
      const auto b = codec::encode(m);
      const auto back = codec::decode_report(b);
      if (codec::encode(back) != b || back.site_id != m.site_id) ++mismatches;
    }
  }
  auto kind_of = [](const codec::Bytes& b) -> std::optional<codec::DecodeErrorKind> {
    try {
      (void)codec::decode_broadcast(b);
    } catch (const codec::DecodeError& e) {
      return e.kind();
    }
    return std::nullopt;
  };
  const auto good = codec::encode(random_broadcast(rng));
  using K = codec::DecodeErrorKind;
  auto bad_magic = good;
  bad_magic[1] = 'X';
  auto bad_version = good;
  bad_version[4] ^= 0xFF;
  auto bad_crc = good;
  bad_crc[codec::kHeaderSize] ^= 0x01;
  auto bad_length = good;
  const std::uint64_t huge = good.size() * 4;
  std::memcpy(bad_length.data() + 7, &huge, 8);
  const codec::Bytes cut(good.begin(), good.end() - 3);
  const bool corruption = kind_of(bad_magic) == K::kBadMagic && kind_of(bad_version) == K::kVersionMismatch &&
                          kind_of(bad_crc) == K::kBadChecksum && kind_of(bad_length) == K::kTruncated &&
                          kind_of(cut) == K::kTruncated;
  return {mismatches == 0 && corruption,
          "10000 messages, " + std::to_string(mismatches) + " mismatches; corruption errors " +
              (corruption ? "distinct and correct" : "WRONG")};
}

// ---- desk-scale experiments ---------------------------------------------------

struct RunSummary {
  double client_mdsc = 0.0;
  double ratio = 0.0;
  double mono_ratio = 0.0;
  double full_ratio = 0.0;
  std::string csv;
};

RunSummary summarize(const codec::ExperimentState& s) {
  RunSummary out;
  out.csv = sim::metrics_csv(s.history);
  const auto last = *sim::final_summary(s.history);
  out.client_mdsc = last.mdsc;
  out.ratio = last.fed_ratio.value_or(0.0);
  std::vector<double> mono, full;
  for (const auto& r : s.history) {
    if (r.round != last.round || r.site_id == "all" || r.site_id == "0") continue;
    const auto n_mods = 1 + std::count(r.modalities.begin(), r.modalities.end(), '+');
    if (n_mods == 1) mono.push_back(r.fed_ratio.value_or(0.0));
    if (n_mods == 4) full.push_back(r.fed_ratio.value_or(0.0));
  }
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  out.mono_ratio = mean(mono);
  out.full_ratio = mean(full);
  return out;
}

class Experiments {
 public:
  explicit Experiments(ExperimentConfig desk) : desk_(std::move(desk)) {}

  const ExperimentConfig& desk() const { return desk_; }

  /// Variant key: mode name, or "P<n>" for fedmepd with that patience.
  const RunSummary& get(std::uint64_t seed, const std::string& variant) {
    const auto key = std::make_pair(seed, variant);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    auto cfg = desk_;
    cfg.seed = seed;
    if (variant[0] == 'P') {
      cfg.mode = Mode::kFedMEPD;
      cfg.patience = std::stoll(variant.substr(1));
    } else {
      cfg.mode = *parse_mode(variant);
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto summary = summarize(sim::run_experiment(cfg, options()));
    std::printf("    run seed=%llu %-18s client mDSC %.4f  fed ratio %.4f  (%.1f s)\n",
                static_cast<unsigned long long>(seed), variant.c_str(), summary.client_mdsc,
                summary.ratio, seconds_since(t0));
    std::fflush(stdout);
    return cache_.emplace(key, std::move(summary)).first->second;
  }

  void put(std::uint64_t seed, const std::string& variant, RunSummary s) {
    cache_.emplace(std::make_pair(seed, variant), std::move(s));
  }

  std::vector<std::uint64_t> seeds() const {
    std::vector<std::uint64_t> s;
    for (std::uint64_t i = 0; i < 5; ++i) s.push_back(desk_.seed + i);
    return s;
  }

  std::string default_variant() const { return "P" + std::to_string(desk_.patience); }

  static sim::RunOptions options() {
    sim::RunOptions o;
    o.threads = 0;
    return o;
  }

 private:
  ExperimentConfig desk_;
  std::map<std::pair<std::uint64_t, std::string>, RunSummary> cache_;
};

Outcome determinism_and_resume(Experiments& ex) {
  const auto& cfg = ex.desk();
  const auto a = sim::run_experiment(cfg, Experiments::options());
  const auto b = sim::run_experiment(cfg, Experiments::options());
  const std::string csv_a = sim::metrics_csv(a.history), csv_b = sim::metrics_csv(b.history);
  auto stop = Experiments::options();
  stop.stop_after = cfg.rounds / 2;
  const auto half = sim::run_experiment(cfg, stop);
  const auto restored = codec::decode_state(codec::encode(half));
  const auto resumed = sim::resume(restored, sim::checkpoint_config(restored), Experiments::options());
  const bool same_runs = csv_a == csv_b && codec::encode(a) == codec::encode(b);
  const bool same_resume = sim::metrics_csv(resumed.history) == csv_a && codec::encode(resumed) == codec::encode(a);
  ex.put(cfg.seed, ex.default_variant(), summarize(a));
  return {same_runs && same_resume,
          std::to_string(cfg.sites.empty() ? 9 : cfg.sites.size()) + " sites, " + std::to_string(cfg.rounds) +
              " rounds: repeat run " + (same_runs ? "bit-identical" : "DIFFERS") + ", resume at round " +
              std::to_string(*stop.stop_after) + " " + (same_resume ? "bit-identical" : "DIFFERS")};
}

Outcome patience_ordering(Experiments& ex) {
  std::vector<double> med;
  std::string detail;
  for (int p : {2, 6, 10}) {
    std::vector<double> r;
    for (auto s : ex.seeds()) r.push_back(ex.get(s, "P" + std::to_string(p)).ratio);
    med.push_back(median(r));
    detail += "P=" + std::to_string(p) + " " + list(r) + " median " + fmt("%.4f", med.back()) + "; ";
  }
  detail.resize(detail.size() - 2);
  return {med[0] <= med[1] && med[1] <= med[2], detail};
}

Outcome modality_ordering(Experiments& ex) {
  std::vector<double> mono, full;
  for (auto s : ex.seeds()) {
    const auto& r = ex.get(s, ex.default_variant());
    mono.push_back(r.mono_ratio);
    full.push_back(r.full_ratio);
  }
  const double m = median(mono), f = median(full);
  return {m <= f, "mono-modal " + list(mono) + " median " + fmt("%.4f", m) + "; full-modal " + list(full) +
                      " median " + fmt("%.4f", f)};
}

Outcome mode_ordering(Experiments& ex) {
  std::map<std::string, double> med;
  std::string detail;
  for (const std::string& v : {ex.default_variant(), std::string("fully_personalized"), std::string("fedavg"),
                              std::string("local")}) {
    std::vector<double> d;
    for (auto s : ex.seeds()) d.push_back(ex.get(s, v).client_mdsc);
    med[v] = median(d);
    detail += (v[0] == 'P' ? "fedmepd" : v) + " " + list(d) + " median " + fmt("%.4f", med[v]) + "; ";
  }
  const double ours = med[ex.default_variant()];
  bool pass = true;
  for (const char* v : {"fully_personalized", "fedavg", "local"}) {
    const double margin = ours - med[v];
    detail += std::string("margin vs ") + v + " " + fmt("%+.4f", margin) + "; ";
    pass = pass && margin >= 0.01;
  }
  detail.resize(detail.size() - 2);
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  std::string desk_path = std::string(FEDMEPD_SOURCE_DIR) + "/configs/desk.cfg";
  if (argc > 1) desk_path = argv[1];
  Experiments ex(load_config(desk_path));

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradient_correctness},
      {2, "mask dynamics", mask_dynamics},
      {3, "fedavg reduction", fedavg_reduction},
      {4, "convex-hull aggregation", convex_hull},
      {5, "anchor EMA contraction", anchor_contraction},
      {6, "k-means oracle", kmeans_oracle},
      {7, "LACCA contract", lacca_contract},
      {8, "determinism and resume", [&] { return determinism_and_resume(ex); }},
      {9, "federated ratio grows with patience", [&] { return patience_ordering(ex); }},
      {10, "federated ratio grows with modalities", [&] { return modality_ordering(ex); }},
      {11, "client mDSC ordering across modes", [&] { return mode_ordering(ex); }},
      {12, "codec round trip and corruption", codec_property},
  };

  int failures = 0;
  std::vector<std::string> lines;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    char head[160];
    std::snprintf(head, sizeof head, "[%s] %2d %s (%.1f s): ", o.pass ? "PASS" : "FAIL", c.id, c.name,
                  seconds_since(t0));
    lines.push_back(head + o.detail);
    std::printf("%s\n", lines.back().c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  std::printf("\nsummary\n");
  for (const auto& l : lines) std::printf("%s\n", l.substr(0, l.find(':')).c_str());
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
