#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmepd/codec.hpp"
#include "fedmepd/config.hpp"

// In-process simulation of the federated protocol. Every message crosses the
// server/client boundary as encoded bytes.
namespace fedmepd::sim {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One site's data, already restricted to the modalities it holds.
struct Site {
  std::uint32_t site_id = 0;
  std::vector<int> modalities;
  synth::SiteSamples data;
};

/// Topology and rendered data; a pure function of the config.
struct World {
  ExperimentConfig config;
  std::vector<Site> sites;  // sites[0] is the server
};

World build_world(const ExperimentConfig& cfg);

/// What a mode switches on.
struct Behaviour {
  bool communicate = true;
  bool use_lacca = true;
  bool update_mask = true;
  std::uint32_t patience = 10;
  fed::ServerAggregation aggregation;
};

Behaviour behaviour(const ExperimentConfig& cfg);

/// Parameters that go through the personalization mask: the decoder, plus the
/// LACCA projections when the config says so.
model::ParamSet personalizable(const model::SiteModel& m, const ExperimentConfig& cfg);
void set_personalizable(model::SiteModel& m, const model::ParamSet& p, const ExperimentConfig& cfg);

/// Round 0: shared initialization, initial server training and anchor bank.
codec::ExperimentState initial_state(const World& world);

/// Adopts the server encoders, mixes the decoder through the mask row, trains
/// locally (with LACCA when anchors are present) and reports.
codec::Report client_update(codec::ClientState& client, const Site& site,
                            const codec::Broadcast& broadcast, const ExperimentConfig& cfg);

/// Encoder aggregation, decoder aggregation, server training, anchor update,
/// mask update; then advances the round counter. Reports may arrive in any
/// order.
void server_round(codec::ExperimentState& state, const World& world,
                  std::vector<codec::Report> reports);

/// One metrics row per site plus the "all" summary row, for state.round.
std::vector<codec::MetricsRow> evaluate_round(const codec::ExperimentState& state,
                                              const World& world);

struct RunOptions {
  /// Worker threads for client updates; 0 = hardware concurrency.
  std::size_t threads = 1;
  /// Stop once this round is complete (the state is then resumable).
  std::optional<std::uint64_t> stop_after;
  /// Called after every completed round.
  std::function<void(const codec::ExperimentState&)> on_round;
};

/// Runs one round (broadcast, client updates, server round, evaluation).
void run_round(codec::ExperimentState& state, const World& world, const RunOptions& opts);

codec::ExperimentState run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

/// Continues a checkpoint up to cfg.rounds. cfg must match the checkpoint's
/// digest (the round count may differ).
codec::ExperimentState resume(codec::ExperimentState state, const ExperimentConfig& cfg,
                              const RunOptions& opts = {});

/// Parses the config stored inside a checkpoint.
ExperimentConfig checkpoint_config(const codec::ExperimentState& state);

inline constexpr const char* kMetricsHeader = "round,site_id,modalities,mdsc,loss,fed_ratio";
std::string metrics_csv(const std::vector<codec::MetricsRow>& rows);

/// "all" row of the last round, if any.
std::optional<codec::MetricsRow> final_summary(const std::vector<codec::MetricsRow>& rows);

}  // namespace fedmepd::sim
