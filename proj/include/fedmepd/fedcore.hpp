#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "fedmepd/toymodel.hpp"

// Aggregation rules for the federated encoders and the partially personalized
// fusion decoder.
namespace fedmepd::fed {

using model::FilterRef;
using model::ParamSet;

/// Per-client, per-filter federate (1) / personalize (0) bits and the count of
/// consecutive rounds each filter disagreed with the server.
struct PersonalizationMask {
  std::size_t n_clients = 0;
  std::size_t n_filters = 0;
  std::uint32_t patience = 10;
  std::vector<std::uint8_t> bits;       // n_clients × n_filters
  std::vector<std::uint32_t> counters;  // n_clients × n_filters

  static PersonalizationMask all_ones(std::size_t n_clients, std::size_t n_filters,
                                      std::uint32_t patience);

  std::uint8_t bit(std::size_t client, std::size_t filter) const {
    return bits[client * n_filters + filter];
  }
  std::span<const std::uint8_t> row(std::size_t client) const {
    return std::span<const std::uint8_t>(bits).subspan(client * n_filters, n_filters);
  }
  std::uint32_t counter(std::size_t client, std::size_t filter) const {
    return counters[client * n_filters + filter];
  }
  /// True when every client personalizes filter j.
  bool fully_personalized(std::size_t filter) const;

  friend bool operator==(const PersonalizationMask&, const PersonalizationMask&) = default;
};

// ---- encoders ----------------------------------------------------------------

/// Elementwise mean over the reports of each modality. Modalities nobody
/// reported keep the server's parameters.
std::map<int, ParamSet> aggregate_encoders(
    const std::map<int, ParamSet>& server,
    const std::map<int, std::vector<const ParamSet*>>& reports_by_modality);

// ---- decoder -------------------------------------------------------------------

/// Filter j comes from the server when mask_row[j] == 1, otherwise from the
/// client's own previous decoder.
ParamSet build_client_decoder(const ParamSet& local_prev, const ParamSet& server_prev,
                              std::span<const std::uint8_t> mask_row);

/// this − base, elementwise.
ParamSet difference(const ParamSet& now, const ParamSet& base);

struct RoundDeltas {
  ParamSet server;               // W^{s,r} − W^{s,r−1}
  std::vector<ParamSet> clients;  // W^{i,r} − W^{i,agg}
};

RoundDeltas compute_deltas(const ParamSet& server_prev, const ParamSet& server_now,
                           std::span<const ParamSet> client_agg,
                           std::span<const ParamSet> client_now);

/// Cosine similarity of every filter (weight row + bias) of the two updates.
std::vector<double> filter_consistency(const ParamSet& server_delta, const ParamSet& client_delta);

/// Applies one round of consistency values for one client. Filters already
/// personalized are skipped; with patience 0 every federated filter drops to
/// personalized on the first call.
void update_mask(PersonalizationMask& mask, std::size_t client, std::span<const double> deltas);

enum class EtaRule : std::uint8_t { kInverseNorm = 0, kUniform = 1 };

inline constexpr double kEtaEps = 1e-8;

/// Simplex weights over the clients that federate filter j. Inverse-norm
/// weights are (1/(‖Δw‖+ε)) normalized over those clients; non-federating
/// clients get 0. Throws ContractError when nobody federates the filter.
std::vector<double> eta_weights(std::span<const ParamSet> client_deltas, const FilterRef& filter,
                                std::span<const std::uint8_t> federating,
                                EtaRule rule = EtaRule::kInverseNorm);

struct ServerAggregation {
  double lambda_base = 0.3;
  EtaRule eta = EtaRule::kInverseNorm;
};

/// Per filter: λ = 1 (keep the server's value) if every client personalizes
/// it, otherwise λ = lambda_base and the result is
/// λ·W^{s,r−1} + (1−λ)·Σ_fed η_i·W^{i,r}.
ParamSet aggregate_server_decoder(const ParamSet& server_prev, std::span<const ParamSet> client_now,
                                  const PersonalizationMask& mask,
                                  std::span<const ParamSet> client_deltas,
                                  const ServerAggregation& cfg);

struct FederatedRatio {
  double overall = 1.0;
  std::vector<double> per_client;
};

/// Share of decoder elements (weighted by filter size) still federated.
FederatedRatio federated_ratio(const PersonalizationMask& mask, const ParamSet& layout);

/// Concatenates the layers of two sets into one personalizable view, used
/// when the LACCA projections join the mask machinery.
ParamSet concat_layers(const ParamSet& first, const ParamSet& second);
/// Inverse of concat_layers given the number of layers of the first set.
std::pair<ParamSet, ParamSet> split_layers(const ParamSet& joined, std::size_t first_layers,
                                           model::Role second_role);

}  // namespace fedmepd::fed
