#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmepd/anchorbank.hpp"
#include "fedmepd/synthdata.hpp"
#include "fedmepd/toymodel.hpp"

namespace fedmepd {

enum class Mode : std::uint8_t { kFedMEPD = 0, kFedAvg = 1, kLocal = 2, kFullyPersonalized = 3 };

std::string to_string(Mode m);
/// Accepts fedmepd, fedavg, local, fully_personalized.
std::optional<Mode> parse_mode(const std::string& s);

/// A bad key, malformed value or failed validation. `field` is the dotted key
/// path; line/column are 1-based and 0 when the problem is not tied to text.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, std::size_t line, std::size_t column, const std::string& what);
  const std::string& field() const { return field_; }
  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  std::string field_;
  std::size_t line_;
  std::size_t column_;
};

struct SiteConfig {
  std::vector<int> modalities;
  std::size_t samples = 0;

  friend bool operator==(const SiteConfig&, const SiteConfig&) = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t rounds = 1000;
  std::size_t epochs_per_round = 1;
  std::int64_t patience = 10;
  double lambda_base = 0.3;
  double omega = 0.999;
  std::size_t n_k = 4;
  /// 1-based feature level used for cluster membership; empty = deepest.
  std::optional<std::size_t> membership_level;
  std::size_t n_heads = 8;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  std::size_t batch_size = 4;
  Mode mode = Mode::kFedMEPD;
  anchors::MatchRule anchor_match = anchors::MatchRule::kNearest;
  bool lacca_in_mask = false;

  std::vector<std::size_t> enc_channels{8, 16};
  std::vector<std::size_t> dec_channels{8, 16};

  std::size_t height = 32;
  std::size_t width = 32;
  double noise_sigma = 0.05;
  double contrast_jitter = 0.1;
  double noise_jitter = 0.02;
  /// Generated pool size; 0 = exactly what the site plan needs.
  std::size_t pool_size = 0;
  /// Entry 0 is the server. Empty = the default nine-site plan.
  std::vector<SiteConfig> sites;

  std::size_t levels() const { return enc_channels.size(); }
  /// 0-based membership level after resolving the default.
  std::size_t membership_index() const;

  model::ModelShape model_shape() const;
  synth::GenerateParams generate_params() const;
  synth::DomainShift domain_shift() const;
  synth::SitePlan site_plan() const;
  std::size_t resolved_pool_size() const;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Parses `key = value` lines (`#` starts a comment). Missing keys keep their
/// defaults; unknown keys, malformed values and invalid settings throw
/// ConfigError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Throws ConfigError naming the first offending field.
void validate(const ExperimentConfig& cfg);

/// Canonical text form; parse_config(serialize(c)) == c.
std::string serialize(const ExperimentConfig& cfg);

/// Identity of everything that shapes an experiment except its length, so a
/// checkpoint can be resumed with more rounds.
std::uint32_t config_digest(const ExperimentConfig& cfg);

}  // namespace fedmepd
