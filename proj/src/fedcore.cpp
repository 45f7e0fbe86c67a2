#include "fedmepd/fedcore.hpp"

#include <algorithm>

namespace fedmepd::fed {

using model::ContractError;

PersonalizationMask PersonalizationMask::all_ones(std::size_t n_clients, std::size_t n_filters,
                                                  std::uint32_t patience) {
  PersonalizationMask m;
  m.n_clients = n_clients;
  m.n_filters = n_filters;
  m.patience = patience;
  m.bits.assign(n_clients * n_filters, 1);
  m.counters.assign(n_clients * n_filters, 0);
  return m;
}

bool PersonalizationMask::fully_personalized(std::size_t filter) const {
  for (std::size_t i = 0; i < n_clients; ++i) {
    if (bit(i, filter)) return false;
  }
  return true;
}

std::map<int, ParamSet> aggregate_encoders(
    const std::map<int, ParamSet>& server,
    const std::map<int, std::vector<const ParamSet*>>& reports_by_modality) {
  std::map<int, ParamSet> out = server;
  for (const auto& [m, reports] : reports_by_modality) {
    if (reports.empty()) continue;
    auto it = out.find(m);
    if (it == out.end()) {
      throw ContractError("aggregate_encoders: server has no encoder for modality " +
                          std::to_string(m));
    }
    ParamSet mean = reports.front()->zeros_like();
    if (!mean.same_structure(it->second)) {
      throw ContractError("aggregate_encoders: report shape differs for modality " +
                          std::to_string(m));
    }
    const double w = 1.0 / static_cast<double>(reports.size());
    for (const ParamSet* r : reports) {
      if (!r->same_structure(mean)) {
        throw ContractError("aggregate_encoders: report shape differs for modality " +
                            std::to_string(m));
      }
      mean.axpy(w, *r);
    }
    it->second.layers = std::move(mean.layers);
  }
  return out;
}

ParamSet build_client_decoder(const ParamSet& local_prev, const ParamSet& server_prev,
                              std::span<const std::uint8_t> mask_row) {
  if (!local_prev.same_structure(server_prev)) {
    throw ContractError("build_client_decoder: decoder structures differ");
  }
  const auto filters = local_prev.filters();
  if (mask_row.size() != filters.size()) {
    throw ContractError("build_client_decoder: mask has " + std::to_string(mask_row.size()) +
                        " entries for " + std::to_string(filters.size()) + " filters");
  }
  ParamSet out = local_prev;
  for (std::size_t j = 0; j < filters.size(); ++j) {
    if (mask_row[j]) out.set_filter(filters[j], server_prev.filter_vector(filters[j]));
  }
  return out;
}

ParamSet difference(const ParamSet& now, const ParamSet& base) {
  ParamSet out = now;
  out.axpy(-1.0, base);
  return out;
}

RoundDeltas compute_deltas(const ParamSet& server_prev, const ParamSet& server_now,
                           std::span<const ParamSet> client_agg,
                           std::span<const ParamSet> client_now) {
  if (client_agg.size() != client_now.size()) {
    throw ContractError("compute_deltas: snapshot has mismatched client lists");
  }
  RoundDeltas d;
  d.server = difference(server_now, server_prev);
  d.clients.reserve(client_now.size());
  for (std::size_t i = 0; i < client_now.size(); ++i) {
    d.clients.push_back(difference(client_now[i], client_agg[i]));
  }
  return d;
}

std::vector<double> filter_consistency(const ParamSet& server_delta, const ParamSet& client_delta) {
  if (!server_delta.same_structure(client_delta)) {
    throw ContractError("filter_consistency: decoder structures differ");
  }
  const auto filters = server_delta.filters();
  std::vector<double> out;
  out.reserve(filters.size());
  for (const auto& f : filters) {
    out.push_back(cosine(server_delta.filter_vector(f), client_delta.filter_vector(f)));
  }
  return out;
}

void update_mask(PersonalizationMask& mask, std::size_t client, std::span<const double> deltas) {
  if (client >= mask.n_clients) throw ContractError("update_mask: client out of range");
  if (deltas.size() != mask.n_filters) {
    throw ContractError("update_mask: expected " + std::to_string(mask.n_filters) +
                        " consistency values");
  }
  for (std::size_t j = 0; j < mask.n_filters; ++j) {
    const std::size_t idx = client * mask.n_filters + j;
    if (!mask.bits[idx]) continue;
    if (mask.patience == 0) {
      mask.bits[idx] = 0;
      mask.counters[idx] = 0;
      continue;
    }
    if (deltas[j] < 0.0) {
      if (++mask.counters[idx] >= mask.patience) {
        mask.bits[idx] = 0;
        mask.counters[idx] = 0;
      }
    } else {
      mask.counters[idx] = 0;
    }
  }
}

std::vector<double> eta_weights(std::span<const ParamSet> client_deltas, const FilterRef& filter,
                                std::span<const std::uint8_t> federating, EtaRule rule) {
  if (federating.size() != client_deltas.size()) {
    throw ContractError("eta_weights: one federating flag per client required");
  }
  std::vector<double> eta(client_deltas.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < client_deltas.size(); ++i) {
    if (!federating[i]) continue;
    const double w = rule == EtaRule::kUniform
                         ? 1.0
                         : 1.0 / (norm2(client_deltas[i].filter_vector(filter)) + kEtaEps);
    eta[i] = w;
    total += w;
  }
  if (total <= 0.0) throw ContractError("eta_weights: no client federates this filter");
  for (double& e : eta) e /= total;
  return eta;
}

ParamSet aggregate_server_decoder(const ParamSet& server_prev, std::span<const ParamSet> client_now,
                                  const PersonalizationMask& mask,
                                  std::span<const ParamSet> client_deltas,
                                  const ServerAggregation& cfg) {
  if (client_now.size() != mask.n_clients || client_deltas.size() != mask.n_clients) {
    throw ContractError("aggregate_server_decoder: expected " + std::to_string(mask.n_clients) +
                        " client decoders and deltas");
  }
  for (std::size_t i = 0; i < client_now.size(); ++i) {
    if (!client_now[i].same_structure(server_prev) ||
        !client_deltas[i].same_structure(server_prev)) {
      throw ContractError("aggregate_server_decoder: decoder structures differ");
    }
  }
  const auto filters = server_prev.filters();
  if (filters.size() != mask.n_filters) {
    throw ContractError("aggregate_server_decoder: mask filter count differs from decoder");
  }
  ParamSet out = server_prev;
  std::vector<std::uint8_t> fed(mask.n_clients);
  for (std::size_t j = 0; j < filters.size(); ++j) {
    if (mask.fully_personalized(j)) continue;  // λ = 1
    for (std::size_t i = 0; i < mask.n_clients; ++i) fed[i] = mask.bit(i, j);
    const auto eta = eta_weights(client_deltas, filters[j], fed, cfg.eta);
    const double lambda = cfg.lambda_base;
    std::vector<double> value = server_prev.filter_vector(filters[j]);
    for (double& v : value) v *= lambda;
    for (std::size_t i = 0; i < mask.n_clients; ++i) {  // ascending site order
      if (!fed[i]) continue;
      const auto w = client_now[i].filter_vector(filters[j]);
      const double coef = (1.0 - lambda) * eta[i];
      for (std::size_t e = 0; e < value.size(); ++e) value[e] += coef * w[e];
    }
    out.set_filter(filters[j], value);
  }
  return out;
}

FederatedRatio federated_ratio(const PersonalizationMask& mask, const ParamSet& layout) {
  const auto filters = layout.filters();
  if (filters.size() != mask.n_filters) {
    throw ContractError("federated_ratio: mask filter count differs from layout");
  }
  FederatedRatio r;
  double total_fed = 0.0, total = 0.0;
  for (std::size_t i = 0; i < mask.n_clients; ++i) {
    double fed = 0.0, all = 0.0;
    for (std::size_t j = 0; j < filters.size(); ++j) {
      const auto size = static_cast<double>(layout.filter_size(filters[j]));
      all += size;
      if (mask.bit(i, j)) fed += size;
    }
    r.per_client.push_back(all > 0.0 ? fed / all : 1.0);
    total_fed += fed;
    total += all;
  }
  r.overall = total > 0.0 ? total_fed / total : 1.0;
  return r;
}

ParamSet concat_layers(const ParamSet& first, const ParamSet& second) {
  ParamSet out = first;
  out.layers.insert(out.layers.end(), second.layers.begin(), second.layers.end());
  return out;
}

std::pair<ParamSet, ParamSet> split_layers(const ParamSet& joined, std::size_t first_layers,
                                           model::Role second_role) {
  if (first_layers > joined.layers.size()) throw ContractError("split_layers: bad split point");
  ParamSet a = joined, b = joined;
  a.layers.assign(joined.layers.begin(), joined.layers.begin() + static_cast<std::ptrdiff_t>(first_layers));
  b.layers.assign(joined.layers.begin() + static_cast<std::ptrdiff_t>(first_layers), joined.layers.end());
  b.role = second_role;
  b.modality = -1;
  return {std::move(a), std::move(b)};
}

}  // namespace fedmepd::fed
