// fedmepd: run, resume and inspect federated experiments on the synthetic
// hetero-modal segmentation task.
//
// Exit codes: 0 success, 1 usage or config error, 2 runtime error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "fedmepd/codec.hpp"
#include "fedmepd/config.hpp"
#include "fedmepd/simnet.hpp"

namespace fs = std::filesystem;
using namespace fedmepd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::optional<std::size_t> rounds;
  std::string out;
  std::size_t threads = 0;
  std::size_t checkpoint_every = 0;
};

fs::path out_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("FEDMEPD_OUT"); env && *env) return env;
  return ".";
}

ExperimentConfig resolve_config(const Common& o) {
  ExperimentConfig cfg = o.config_path.empty() ? parse_config("") : load_config(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.rounds) cfg.rounds = *o.rounds;
  if (!o.mode.empty()) {
    const auto m = parse_mode(o.mode);
    if (!m) throw UsageError("--mode: unknown mode '" + o.mode + "'");
    cfg.mode = *m;
  }
  validate(cfg);
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  f << text;
}

sim::RunOptions run_options(const Common& o, const fs::path& dir) {
  sim::RunOptions opts;
  opts.threads = o.threads;
  const std::size_t every = o.checkpoint_every;
  opts.on_round = [dir, every](const codec::ExperimentState& s) {
    std::fprintf(stderr, "round %llu done\n", static_cast<unsigned long long>(s.round));
    if (every && s.round % every == 0) {
      codec::write_file((dir / ("checkpoint-r" + std::to_string(s.round) + ".fmpd")).string(),
                        codec::encode(s));
    }
  };
  return opts;
}

void finish(const codec::ExperimentState& s, const fs::path& dir) {
  write_text(dir / "metrics.csv", sim::metrics_csv(s.history));
  codec::write_file((dir / "checkpoint.fmpd").string(), codec::encode(s));
  write_text(dir / "config.cfg", s.config_text);
  if (const auto row = sim::final_summary(s.history)) {
    std::printf("round %llu: client mDSC %.4f, federated ratio %.4f\n",
                static_cast<unsigned long long>(row->round), row->mdsc, row->fed_ratio.value_or(0.0));
  }
  std::printf("wrote %s\n", (dir / "metrics.csv").string().c_str());
}

int cmd_run(const Common& o) {
  const auto cfg = resolve_config(o);
  const fs::path dir = out_dir(o.out);
  fs::create_directories(dir);
  finish(sim::run_experiment(cfg, run_options(o, dir)), dir);
  return kExitOk;
}

int cmd_resume(const Common& o, const std::string& checkpoint) {
  auto state = codec::decode_state(codec::read_file(checkpoint));
  auto cfg = sim::checkpoint_config(state);
  if (o.rounds) cfg.rounds = *o.rounds;
  const fs::path dir = out_dir(o.out);
  fs::create_directories(dir);
  finish(sim::resume(std::move(state), cfg, run_options(o, dir)), dir);
  return kExitOk;
}

int cmd_inspect(const std::string& checkpoint) {
  const auto s = codec::decode_state(codec::read_file(checkpoint));
  const auto cfg = sim::checkpoint_config(s);
  const auto layout = sim::personalizable(s.server, cfg);
  const auto ratio = fed::federated_ratio(s.mask, layout);
  std::printf("checkpoint: %s\n", checkpoint.c_str());
  std::printf("round: %llu\n", static_cast<unsigned long long>(s.round));
  std::printf("mode: %s  seed: %llu  config digest: %08x\n", to_string(cfg.mode).c_str(),
              static_cast<unsigned long long>(cfg.seed), s.config_digest);
  std::printf("clients: %zu  filters per client: %zu  patience: %u\n", s.mask.n_clients,
              s.mask.n_filters, s.mask.patience);
  std::printf("federated ratio (overall): %.6f\n", ratio.overall);
  std::printf("%-6s %-12s %-10s %s\n", "site", "modalities", "fed_ratio", "personalized_filters");
  for (std::size_t i = 0; i < s.clients.size(); ++i) {
    std::string mods;
    for (int m : s.clients[i].model.modalities) mods += (mods.empty() ? "" : "+") + std::to_string(m);
    std::size_t off = 0;
    for (auto b : s.mask.row(i)) off += b == 0;
    std::printf("%-6u %-12s %-10.6f %zu\n", s.clients[i].site_id, mods.c_str(), ratio.per_client[i], off);
  }
  if (s.bank.empty()) {
    std::printf("anchors: none\n");
  } else {
    std::printf("anchors: %zu classes x %zu per class, %zu levels, membership level %zu\n",
                s.bank.n_classes, s.bank.n_k, s.bank.levels.size(), s.bank.membership_level + 1);
    for (std::size_t l = 0; l < s.bank.levels.size(); ++l) {
      std::printf("  level %zu norms:", l + 1);
      for (std::size_t a = 0; a < s.bank.n_anchors(); ++a) {
        std::printf("%s%.4f", a % s.bank.n_k == 0 ? "  | " : " ", norm2(s.bank.levels[l].row(a)));
      }
      std::printf("\n");
    }
    for (std::size_t c = 0; c < s.bank.n_classes; ++c) {
      if (s.bank.stale[c]) std::printf("  class %zu: stale (never observed)\n", c);
    }
  }
  std::printf("mask histogram (filters by number of federating clients):\n");
  std::map<std::size_t, std::size_t> hist;
  for (std::size_t j = 0; j < s.mask.n_filters; ++j) {
    std::size_t fed = 0;
    for (std::size_t i = 0; i < s.mask.n_clients; ++i) fed += s.mask.bit(i, j);
    ++hist[fed];
  }
  for (std::size_t k = 0; k <= s.mask.n_clients; ++k) {
    std::printf("  %2zu clients: %zu\n", k, hist.count(k) ? hist[k] : 0);
  }
  return kExitOk;
}

int cmd_gen_data(const Common& o) {
  const auto cfg = resolve_config(o);
  const fs::path dir = out_dir(o.out);
  fs::create_directories(dir);
  const auto world = sim::build_world(cfg);
  codec::Dataset all;
  std::string index = "site_id,split,sample_id,modalities\n";
  for (const auto& site : world.sites) {
    const std::pair<const char*, const std::vector<synth::Sample>*> parts[] = {
        {"train", &site.data.train}, {"val", &site.data.val}, {"test", &site.data.test}};
    for (const auto& [name, samples] : parts) {
      for (const auto& x : *samples) {
        all.samples.push_back(x);
        std::string mods;
        for (int m : site.modalities) mods += (mods.empty() ? "" : "+") + std::to_string(m);
        index += std::to_string(site.site_id) + "," + name + "," + std::to_string(x.id) + "," + mods + "\n";
      }
    }
  }
  codec::write_file((dir / "dataset.fmpd").string(), codec::encode(all));
  write_text(dir / "dataset_index.csv", index);
  std::printf("wrote %zu samples for %zu sites to %s\n", all.samples.size(), world.sites.size(),
              (dir / "dataset.fmpd").string().c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated hetero-modal segmentation simulator"};
  app.require_subcommand(1);
  Common o;
  std::string checkpoint;

  auto add_common = [&o](CLI::App* sub, bool with_config) {
    if (with_config) {
      sub->add_option("--config", o.config_path, "Config file (key = value lines)");
      sub->add_option("--seed", o.seed, "Override the seed");
      sub->add_option("--mode", o.mode, "fedmepd | fedavg | local | fully_personalized");
    }
    sub->add_option("--rounds", o.rounds, "Override the number of rounds");
    sub->add_option("--out", o.out, "Output directory (default $FEDMEPD_OUT or .)");
  };
  auto* run = app.add_subcommand("run", "Run an experiment");
  add_common(run, true);
  run->add_option("--threads", o.threads, "Client worker threads (0 = all cores)");
  run->add_option("--checkpoint-every", o.checkpoint_every, "Also checkpoint every N rounds");

  auto* res = app.add_subcommand("resume", "Continue from a checkpoint");
  res->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  add_common(res, false);
  res->add_option("--threads", o.threads, "Client worker threads (0 = all cores)");
  res->add_option("--checkpoint-every", o.checkpoint_every, "Also checkpoint every N rounds");

  auto* insp = app.add_subcommand("inspect", "Summarize a checkpoint");
  insp->add_option("checkpoint", checkpoint, "Checkpoint file")->required();

  auto* gen = app.add_subcommand("gen-data", "Dump the synthetic dataset");
  add_common(gen, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*run) return cmd_run(o);
    if (*res) return cmd_resume(o, checkpoint);
    if (*insp) return cmd_inspect(checkpoint);
    if (*gen) return cmd_gen_data(o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
