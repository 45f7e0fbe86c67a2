#include "fedmepd/simnet.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <thread>

namespace fedmepd::sim {

using codec::Broadcast;
using codec::ClientState;
using codec::ExperimentState;
using codec::MetricsRow;
using codec::Report;

World build_world(const ExperimentConfig& cfg) {
  validate(cfg);
  World w;
  w.config = cfg;
  const auto gen = cfg.generate_params();
  const auto pool = synth::draw_labels(gen);
  const auto topology = synth::make_topology(cfg.seed, cfg.site_plan(), pool.size(), 4);
  for (const auto& spec : topology) {
    Site s;
    s.site_id = static_cast<std::uint32_t>(spec.site_id);
    s.modalities = spec.modalities;
    std::sort(s.modalities.begin(), s.modalities.end());
    auto rendered = synth::render_site(pool, spec, gen, cfg.domain_shift());
    for (auto* part : {&rendered.train, &rendered.val, &rendered.test}) {
      for (auto& x : *part) x = model::restrict_modalities(x, s.modalities);
    }
    s.data = std::move(rendered);
    w.sites.push_back(std::move(s));
  }
  return w;
}

Behaviour behaviour(const ExperimentConfig& cfg) {
  Behaviour b;
  b.patience = static_cast<std::uint32_t>(cfg.patience);
  b.aggregation.lambda_base = cfg.lambda_base;
  switch (cfg.mode) {
    case Mode::kFedMEPD:
      break;
    case Mode::kFullyPersonalized:
      b.patience = 0;
      break;
    case Mode::kFedAvg:
      b.use_lacca = false;
      b.update_mask = false;
      b.aggregation = {.lambda_base = 0.0, .eta = fed::EtaRule::kUniform};
      break;
    case Mode::kLocal:
      b.communicate = false;
      b.use_lacca = false;
      b.update_mask = false;
      break;
  }
  return b;
}

model::ParamSet personalizable(const model::SiteModel& m, const ExperimentConfig& cfg) {
  if (!cfg.lacca_in_mask) return m.params.decoder;
  return fed::concat_layers(m.params.decoder, m.params.lacca);
}

void set_personalizable(model::SiteModel& m, const model::ParamSet& p, const ExperimentConfig& cfg) {
  if (!cfg.lacca_in_mask) {
    if (!p.same_structure(m.params.decoder)) throw ProtocolError("decoder layout does not match the model");
    m.params.decoder = p;
    return;
  }
  auto [dec, lac] = fed::split_layers(p, m.params.decoder.layers.size(), model::Role::kLacca);
  if (!dec.same_structure(m.params.decoder) || !lac.same_structure(m.params.lacca)) {
    throw ProtocolError("decoder/LACCA layout does not match the model");
  }
  m.params.decoder = std::move(dec);
  m.params.lacca = std::move(lac);
}

namespace {

model::AdamConfig adam_config(const ExperimentConfig& cfg) {
  return {.lr = cfg.lr, .weight_decay = cfg.weight_decay};
}

void train(model::SiteModel& m, const std::vector<synth::Sample>& samples,
           std::span<const Tensor> anchors, const ExperimentConfig& cfg, Rng& rng) {
  for (std::size_t e = 0; e < cfg.epochs_per_round; ++e) {
    model::train_epoch(m, samples, anchors, adam_config(cfg), cfg.batch_size, rng);
  }
}

anchors::AnchorBank fresh_bank(const model::SiteModel& server, const Site& site,
                               const ExperimentConfig& cfg, Rng& rng) {
  const auto feats = anchors::extract_class_features(server, site.data.train);
  return anchors::build_bank(feats, server.shape.n_classes, cfg.n_k, cfg.membership_index(),
                             cfg.omega, rng);
}

std::string modality_tag(const std::vector<int>& mods) {
  std::string s;
  for (std::size_t i = 0; i < mods.size(); ++i) {
    if (i) s += '+';
    s += std::to_string(mods[i]);
  }
  return s;
}

const Site& site_of(const World& w, std::uint32_t id) {
  for (const auto& s : w.sites) {
    if (s.site_id == id) return s;
  }
  throw ProtocolError("unknown site " + std::to_string(id));
}

}  // namespace

ExperimentState initial_state(const World& world) {
  const auto& cfg = world.config;
  const auto b = behaviour(cfg);
  const auto shape = cfg.model_shape();
  Rng root(cfg.seed);
  Rng init_rng = root.fork();

  ExperimentState s;
  s.config_text = serialize(cfg);
  s.config_digest = config_digest(cfg);
  s.server = model::init_model(shape, {0, 1, 2, 3}, init_rng);
  s.server_rng = root.fork();
  for (std::size_t i = 1; i < world.sites.size(); ++i) {
    const Site& site = world.sites[i];
    ClientState c;
    c.site_id = site.site_id;
    c.rng = root.fork();
    c.model.shape = shape;
    c.model.modalities = site.modalities;
    for (int m : site.modalities) c.model.params.encoders.emplace(m, s.server.params.encoders.at(m));
    c.model.params.decoder = s.server.params.decoder;
    Rng lacca_rng = c.rng.fork();
    c.model.params.lacca = model::init_lacca(shape, lacca_rng);
    c.model.adam.m = c.model.params.zeros_like();
    c.model.adam.v = c.model.params.zeros_like();
    s.clients.push_back(std::move(c));
  }
  train(s.server, world.sites[0].data.train, {}, cfg, s.server_rng);
  if (b.use_lacca) s.bank = fresh_bank(s.server, world.sites[0], cfg, s.server_rng);
  s.mask = fed::PersonalizationMask::all_ones(s.clients.size(),
                                              personalizable(s.server, cfg).n_filters(), b.patience);
  return s;
}

Report client_update(ClientState& client, const Site& site, const Broadcast& broadcast,
                     const ExperimentConfig& cfg) {
  if (broadcast.round != client.expected_round) {
    throw ProtocolError("site " + std::to_string(client.site_id) + " expected round " +
                        std::to_string(client.expected_round) + ", got broadcast for round " +
                        std::to_string(broadcast.round));
  }
  auto& m = client.model;
  for (int mod : m.modalities) {
    const auto it = broadcast.encoders.find(mod);
    if (it == broadcast.encoders.end()) {
      throw ProtocolError("broadcast lacks the encoder for modality " + std::to_string(mod));
    }
    if (!it->second.same_structure(m.params.encoders.at(mod))) {
      throw ProtocolError("encoder layout mismatch for modality " + std::to_string(mod));
    }
    m.params.encoders[mod] = it->second;
  }
  const auto local = personalizable(m, cfg);
  if (!broadcast.decoder.same_structure(local) || broadcast.mask_row.size() != local.n_filters()) {
    throw ProtocolError("broadcast decoder or mask row does not match the local layout");
  }
  set_personalizable(m, fed::build_client_decoder(local, broadcast.decoder, broadcast.mask_row), cfg);

  client.anchors = broadcast.anchors;
  train(m, site.data.train, client.anchors.levels, cfg, client.rng);

  Report r;
  r.round = broadcast.round;
  r.site_id = client.site_id;
  r.encoders = m.params.encoders;
  r.decoder = personalizable(m, cfg);
  ++client.expected_round;
  return r;
}

void server_round(ExperimentState& state, const World& world, std::vector<Report> reports) {
  const auto& cfg = world.config;
  const auto b = behaviour(cfg);
  const std::uint64_t round = state.round + 1;
  if (reports.size() != state.clients.size()) {
    throw ProtocolError("expected " + std::to_string(state.clients.size()) + " reports, got " +
                        std::to_string(reports.size()));
  }
  // Aggregation order is fixed by site id, whatever the arrival order.
  std::sort(reports.begin(), reports.end(),
            [](const Report& x, const Report& y) { return x.site_id < y.site_id; });
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& c = state.clients[i];
    if (reports[i].site_id != c.site_id) {
      throw ProtocolError("missing report from site " + std::to_string(c.site_id));
    }
    if (reports[i].round != round) {
      throw ProtocolError("report from site " + std::to_string(c.site_id) + " is for round " +
                          std::to_string(reports[i].round) + ", expected " + std::to_string(round));
    }
    for (int mod : c.model.modalities) {
      if (!reports[i].encoders.count(mod)) {
        throw ProtocolError("report from site " + std::to_string(c.site_id) +
                            " lacks modality " + std::to_string(mod));
      }
    }
  }

  std::map<int, std::vector<const model::ParamSet*>> by_modality;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    for (int mod : state.clients[i].model.modalities) {
      by_modality[mod].push_back(&reports[i].encoders.at(mod));
    }
  }
  state.server.params.encoders = fed::aggregate_encoders(state.server.params.encoders, by_modality);

  const auto server_prev = personalizable(state.server, cfg);
  std::vector<model::ParamSet> client_now, client_deltas;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    if (!reports[i].decoder.same_structure(server_prev)) {
      throw ProtocolError("report decoder layout mismatch from site " +
                          std::to_string(reports[i].site_id));
    }
    // The server knows each client's starting point for every federated
    // filter: it is the broadcast value. Personalized filters get a zero delta.
    const auto start = fed::build_client_decoder(reports[i].decoder, server_prev, state.mask.row(i));
    client_deltas.push_back(fed::difference(reports[i].decoder, start));
    client_now.push_back(std::move(reports[i].decoder));
  }
  set_personalizable(state.server,
                     fed::aggregate_server_decoder(server_prev, client_now, state.mask,
                                                   client_deltas, b.aggregation),
                     cfg);

  train(state.server, world.sites[0].data.train, {}, cfg, state.server_rng);

  if (b.use_lacca) {
    const auto fresh = fresh_bank(state.server, world.sites[0], cfg, state.server_rng);
    state.bank = anchors::ema_update(state.bank, fresh, cfg.omega, cfg.anchor_match);
  }

  if (b.update_mask) {
    const auto server_delta = fed::difference(personalizable(state.server, cfg), server_prev);
    for (std::size_t i = 0; i < client_deltas.size(); ++i) {
      fed::update_mask(state.mask, i, fed::filter_consistency(server_delta, client_deltas[i]));
    }
  }
  state.round = round;
}

std::vector<MetricsRow> evaluate_round(const ExperimentState& state, const World& world) {
  const auto& cfg = world.config;
  const auto b = behaviour(cfg);
  std::vector<MetricsRow> rows;
  const auto server_eval = model::evaluate(state.server, world.sites[0].data.test, {});
  rows.push_back({state.round, "0", modality_tag(world.sites[0].modalities), server_eval.mdsc,
                  server_eval.loss, std::nullopt});
  const auto layout = personalizable(state.server, cfg);
  const auto ratio = fed::federated_ratio(state.mask, layout);
  double sum_mdsc = 0.0, sum_loss = 0.0;
  for (std::size_t i = 0; i < state.clients.size(); ++i) {
    const auto& c = state.clients[i];
    const Site& site = site_of(world, c.site_id);
    const auto e = model::evaluate(c.model, site.data.test, c.anchors.levels);
    const double r = b.communicate ? ratio.per_client[i] : 0.0;
    rows.push_back({state.round, std::to_string(c.site_id), modality_tag(site.modalities), e.mdsc,
                    e.loss, r});
    sum_mdsc += e.mdsc;
    sum_loss += e.loss;
  }
  const double n = static_cast<double>(std::max<std::size_t>(state.clients.size(), 1));
  rows.push_back({state.round, "all", "", sum_mdsc / n, sum_loss / n,
                  b.communicate ? ratio.overall : 0.0});
  return rows;
}

namespace {

std::size_t worker_count(const RunOptions& opts, std::size_t jobs) {
  std::size_t t = opts.threads ? opts.threads : std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(t, jobs));
}

/// Runs job(i) for i in [0, n) on a small pool; rethrows the lowest-index failure.
template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& job) {
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            job(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

void run_round(ExperimentState& state, const World& world, const RunOptions& opts) {
  const auto& cfg = world.config;
  const auto b = behaviour(cfg);
  const std::uint64_t round = state.round + 1;
  const std::size_t n = state.clients.size();
  const std::size_t workers = worker_count(opts, n);

  if (!b.communicate) {
    parallel_for(n, workers, [&](std::size_t i) {
      auto& c = state.clients[i];
      train(c.model, site_of(world, c.site_id).data.train, {}, cfg, c.rng);
      ++c.expected_round;
    });
    train(state.server, world.sites[0].data.train, {}, cfg, state.server_rng);
    state.round = round;
  } else {
    const auto decoder = personalizable(state.server, cfg);
    std::vector<codec::Bytes> outbox(n), inbox(n);
    for (std::size_t i = 0; i < n; ++i) {
      Broadcast msg;
      msg.round = round;
      for (int mod : state.clients[i].model.modalities) {
        msg.encoders.emplace(mod, state.server.params.encoders.at(mod));
      }
      msg.decoder = decoder;
      if (b.use_lacca) msg.anchors = state.bank;
      const auto row = state.mask.row(i);
      msg.mask_row.assign(row.begin(), row.end());
      outbox[i] = codec::encode(msg);
    }
    parallel_for(n, workers, [&](std::size_t i) {
      auto& c = state.clients[i];
      const auto msg = codec::decode_broadcast(outbox[i]);
      inbox[i] = codec::encode(client_update(c, site_of(world, c.site_id), msg, cfg));
    });
    std::vector<Report> reports;
    reports.reserve(n);
    for (const auto& bytes : inbox) reports.push_back(codec::decode_report(bytes));
    server_round(state, world, std::move(reports));
  }
  auto rows = evaluate_round(state, world);
  state.history.insert(state.history.end(), rows.begin(), rows.end());
  if (opts.on_round) opts.on_round(state);
}

namespace {

ExperimentState drive(ExperimentState state, const World& world, const RunOptions& opts) {
  const std::uint64_t target = world.config.rounds;
  while (state.round < target) {
    if (opts.stop_after && state.round >= *opts.stop_after) break;
    run_round(state, world, opts);
  }
  return state;
}

}  // namespace

ExperimentState run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  const World world = build_world(cfg);
  return drive(initial_state(world), world, opts);
}

ExperimentConfig checkpoint_config(const ExperimentState& state) {
  return parse_config(state.config_text);
}

ExperimentState resume(ExperimentState state, const ExperimentConfig& cfg, const RunOptions& opts) {
  if (config_digest(cfg) != state.config_digest) {
    throw ProtocolError("config does not match the checkpoint (digest mismatch)");
  }
  const World world = build_world(cfg);
  if (state.clients.size() + 1 != world.sites.size()) {
    throw ProtocolError("checkpoint client count does not match the site plan");
  }
  return drive(std::move(state), world, opts);
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%llu,%s,%s,%.9f,%.9f,", static_cast<unsigned long long>(r.round),
                  r.site_id.c_str(), r.modalities.c_str(), r.mdsc, r.loss);
    out += buf;
    if (r.fed_ratio) {
      std::snprintf(buf, sizeof buf, "%.9f", *r.fed_ratio);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::optional<MetricsRow> final_summary(const std::vector<MetricsRow>& rows) {
  for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
    if (it->site_id == "all") return *it;
  }
  return std::nullopt;
}

}  // namespace fedmepd::sim
