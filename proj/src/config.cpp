#include "fedmepd/config.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace fedmepd {

std::string to_string(Mode m) {
  switch (m) {
    case Mode::kFedMEPD: return "fedmepd";
    case Mode::kFedAvg: return "fedavg";
    case Mode::kLocal: return "local";
    case Mode::kFullyPersonalized: return "fully_personalized";
  }
  return "?";
}

std::optional<Mode> parse_mode(const std::string& s) {
  for (Mode m : {Mode::kFedMEPD, Mode::kFedAvg, Mode::kLocal, Mode::kFullyPersonalized}) {
    if (to_string(m) == s) return m;
  }
  return std::nullopt;
}

namespace {

std::string location(std::size_t line, std::size_t column) {
  if (line == 0) return "";
  return "line " + std::to_string(line) + ", column " + std::to_string(column) + ": ";
}

}  // namespace

ConfigError::ConfigError(std::string field, std::size_t line, std::size_t column,
                         const std::string& what)
    : std::runtime_error(location(line, column) + field + ": " + what),
      field_(std::move(field)),
      line_(line),
      column_(column) {}

std::size_t ExperimentConfig::membership_index() const {
  return membership_level ? *membership_level - 1 : levels() - 1;
}

model::ModelShape ExperimentConfig::model_shape() const {
  model::ModelShape s;
  s.height = height;
  s.width = width;
  s.enc_channels = enc_channels;
  s.dec_channels = dec_channels;
  s.n_heads = n_heads;
  return s;
}

synth::GenerateParams ExperimentConfig::generate_params() const {
  synth::GenerateParams p;
  p.seed = seed;
  p.n_samples = resolved_pool_size();
  p.height = height;
  p.width = width;
  p.noise_sigma = noise_sigma;
  return p;
}

synth::DomainShift ExperimentConfig::domain_shift() const {
  return {.contrast_jitter = contrast_jitter, .noise_jitter = noise_jitter};
}

synth::SitePlan ExperimentConfig::site_plan() const {
  if (sites.empty()) return synth::default_site_plan();
  synth::SitePlan plan;
  for (const auto& s : sites) plan.push_back({s.modalities, s.samples, {}});
  return plan;
}

std::size_t ExperimentConfig::resolved_pool_size() const {
  if (pool_size != 0) return pool_size;
  std::size_t n = 0;
  for (const auto& e : site_plan()) n += e.n_samples;
  return n;
}

namespace {

struct Cursor {
  std::size_t line;
  std::size_t column;
};

[[noreturn]] void fail(const std::string& field, Cursor at, const std::string& what) {
  throw ConfigError(field, at.line, at.column, what);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& field, const std::string& v, Cursor at) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) fail(field, at, "expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& field, const std::string& v, Cursor at) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(field, at, "expected true or false, got '" + v + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& field, const std::string& v, Cursor at) {
  std::vector<T> out;
  if (v.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = v.find(',', start);
    const std::string item = trim(std::string_view(v).substr(start, comma - start));
    out.push_back(parse_number<T>(field, item, {at.line, at.column + start}));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, Cursor)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto size_field = [&t](const std::string& key, std::size_t ExperimentConfig::*member) {
      t[key] = [key, member](ExperimentConfig& c, const std::string& v, Cursor at) {
        c.*member = parse_number<std::size_t>(key, v, at);
      };
    };
    auto double_field = [&t](const std::string& key, double ExperimentConfig::*member) {
      t[key] = [key, member](ExperimentConfig& c, const std::string& v, Cursor at) {
        c.*member = parse_number<double>(key, v, at);
      };
    };
    t["seed"] = [](ExperimentConfig& c, const std::string& v, Cursor at) {
      c.seed = parse_number<std::uint64_t>("seed", v, at);
    };
    size_field("rounds", &ExperimentConfig::rounds);
    size_field("epochs_per_round", &ExperimentConfig::epochs_per_round);
    t["patience"] = [](ExperimentConfig& c, const std::string& v, Cursor at) {
      c.patience = parse_number<std::int64_t>("patience", v, at);
    };
    double_field("lambda_base", &ExperimentConfig::lambda_base);
    double_field("omega", &ExperimentConfig::omega);
    size_field("n_k", &ExperimentConfig::n_k);
    t["membership_level"] = [](ExperimentConfig& c, const std::string& v, Cursor at) {
      if (v == "deepest") {
        c.membership_level.reset();
      } else {
        c.membership_level = parse_number<std::size_t>("membership_level", v, at);
      }
    };
    size_field("n_heads", &ExperimentConfig::n_heads);
    double_field("lr", &ExperimentConfig::lr);
    double_field("weight_decay", &ExperimentConfig::weight_decay);
    size_field("batch_size", &ExperimentConfig::batch_size);
    t["mode"] = [](ExperimentConfig& c, const std::string& v, Cursor at) {
      const auto m = parse_mode(v);
      if (!m) fail("mode", at, "unknown mode '" + v + "' (fedmepd, fedavg, local, fully_personalized)");
      c.mode = *m;
    };
    t["anchor_match"] = [](ExperimentConfig& c, const std::string& v, Cursor at) {
      if (v == "nearest") {
        c.anchor_match = anchors::MatchRule::kNearest;
      } else if (v == "one_to_one") {
        c.anchor_match = anchors::MatchRule::kOneToOne;
      } else {
        fail("anchor_match", at, "expected nearest or one_to_one, got '" + v + "'");
      }
    };
    t["lacca_in_mask"] = [](ExperimentConfig& c, const std::string& v, Cursor at) {
      c.lacca_in_mask = parse_bool("lacca_in_mask", v, at);
    };
    t["model.enc_channels"] = [](ExperimentConfig& c, const std::string& v, Cursor at) {
      c.enc_channels = parse_list<std::size_t>("model.enc_channels", v, at);
    };
    t["model.dec_channels"] = [](ExperimentConfig& c, const std::string& v, Cursor at) {
      c.dec_channels = parse_list<std::size_t>("model.dec_channels", v, at);
    };
    size_field("data.height", &ExperimentConfig::height);
    size_field("data.width", &ExperimentConfig::width);
    double_field("data.noise_sigma", &ExperimentConfig::noise_sigma);
    double_field("data.contrast_jitter", &ExperimentConfig::contrast_jitter);
    double_field("data.noise_jitter", &ExperimentConfig::noise_jitter);
    size_field("data.pool_size", &ExperimentConfig::pool_size);
    return t;
  }();
  return table;
}

/// sites.<n>.modalities / sites.<n>.samples
bool apply_site_key(ExperimentConfig& c, const std::string& key, const std::string& v, Cursor at,
                    std::set<std::size_t>& seen_sites) {
  if (key.rfind("sites.", 0) != 0) return false;
  const auto dot = key.find('.', 6);
  if (dot == std::string::npos) return false;
  const std::string idx = key.substr(6, dot - 6);
  const std::string leaf = key.substr(dot + 1);
  if (leaf != "modalities" && leaf != "samples") return false;
  std::size_t n = 0;
  const auto [ptr, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), n);
  if (ec != std::errc() || ptr != idx.data() + idx.size() || idx.empty()) return false;
  if (n > 4096) fail(key, at, "site index too large");
  if (c.sites.size() <= n) c.sites.resize(n + 1);
  seen_sites.insert(n);
  if (leaf == "modalities") {
    c.sites[n].modalities = parse_list<int>(key, v, at);
  } else {
    c.sites[n].samples = parse_number<std::size_t>(key, v, at);
  }
  return true;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::set<std::string> seen;
  std::set<std::size_t> seen_sites;
  std::map<std::string, std::size_t> key_line;
  std::map<std::string, Cursor> value_at;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = raw.substr(0, raw.find('#'));
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    const std::size_t key_col = line.find_first_not_of(" \t") + 1;
    if (eq == std::string::npos) fail("<syntax>", {line_no, key_col}, "expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const std::size_t value_start = line.find_first_not_of(" \t", eq + 1);
    const Cursor at{line_no, (value_start == std::string::npos ? line.size() : value_start) + 1};
    if (key.empty()) fail("<syntax>", {line_no, key_col}, "missing key before '='");
    if (!seen.insert(key).second) {
      fail(key, {line_no, key_col}, "duplicate key (first set on line " +
                                        std::to_string(key_line[key]) + ")");
    }
    key_line[key] = line_no;
    value_at[key] = at;
    const auto& table = setters();
    if (auto it = table.find(key); it != table.end()) {
      it->second(c, value, at);
    } else if (!apply_site_key(c, key, value, at, seen_sites)) {
      fail(key, {line_no, key_col}, "unknown key");
    }
  }
  for (std::size_t i = 0; i < c.sites.size(); ++i) {
    if (!seen_sites.count(i)) {
      throw ConfigError("sites." + std::to_string(i), 0, 0,
                        "sites must be numbered 0..N-1 without gaps");
    }
    if (!seen.count("sites." + std::to_string(i) + ".modalities")) {
      throw ConfigError("sites." + std::to_string(i) + ".modalities", 0, 0, "missing");
    }
    if (!seen.count("sites." + std::to_string(i) + ".samples")) {
      throw ConfigError("sites." + std::to_string(i) + ".samples", 0, 0, "missing");
    }
  }
  try {
    validate(c);
  } catch (const ConfigError& e) {
    const auto it = value_at.find(e.field());
    if (e.line() != 0 || it == value_at.end()) throw;
    const std::string what = e.what();
    throw ConfigError(e.field(), it->second.line, it->second.column,
                      what.substr(e.field().size() + 2));
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("<file>", 0, 0, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

void validate(const ExperimentConfig& c) {
  auto bad = [](const std::string& field, const std::string& what) {
    throw ConfigError(field, 0, 0, what);
  };
  if (c.patience < 0) bad("patience", "must be >= 0, got " + std::to_string(c.patience));
  if (c.patience > 0xFFFFFFFFll) bad("patience", "too large");
  if (!(c.lambda_base >= 0.0 && c.lambda_base <= 1.0)) bad("lambda_base", "must lie in [0, 1]");
  if (!(c.omega > 0.0 && c.omega < 1.0)) bad("omega", "must lie in (0, 1)");
  if (c.n_k < 1) bad("n_k", "must be >= 1");
  if (c.anchor_match == anchors::MatchRule::kOneToOne && c.n_k > 8) {
    bad("n_k", "one_to_one matching supports at most 8 anchors per class");
  }
  if (c.batch_size < 1) bad("batch_size", "must be >= 1");
  if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) bad("lr", "must be finite and >= 0");
  if (!(c.weight_decay >= 0.0) || !std::isfinite(c.weight_decay)) bad("weight_decay", "must be finite and >= 0");
  if (c.enc_channels.empty()) bad("model.enc_channels", "needs at least one level");
  if (c.dec_channels.size() != c.enc_channels.size()) {
    bad("model.dec_channels", "needs one width per encoder level");
  }
  for (std::size_t v : c.enc_channels) if (v == 0) bad("model.enc_channels", "widths must be positive");
  for (std::size_t v : c.dec_channels) if (v == 0) bad("model.dec_channels", "widths must be positive");
  if (c.n_heads < 1) bad("n_heads", "must be >= 1");
  for (std::size_t v : c.enc_channels) {
    if (v % c.n_heads != 0) {
      bad("n_heads", std::to_string(c.n_heads) + " heads do not divide " + std::to_string(v) + " channels");
    }
  }
  if (c.membership_level && (*c.membership_level < 1 || *c.membership_level > c.levels())) {
    bad("membership_level", "must lie in [1, " + std::to_string(c.levels()) + "]");
  }
  if (c.height < 8) bad("data.height", "must be >= 8");
  if (c.width < 8) bad("data.width", "must be >= 8");
  const std::size_t f = std::size_t{1} << (c.levels() - 1);
  if (c.levels() > 8 || c.height % f || c.width % f) {
    bad("data.height", "image size must be divisible by 2^(levels-1)");
  }
  if (!(c.noise_sigma >= 0.0)) bad("data.noise_sigma", "must be >= 0");
  if (!(c.contrast_jitter >= 0.0)) bad("data.contrast_jitter", "must be >= 0");
  if (!(c.noise_jitter >= 0.0)) bad("data.noise_jitter", "must be >= 0");
  if (!c.sites.empty()) {
    if (c.sites.size() < 2) bad("sites", "need the server (site 0) and at least one client");
    for (std::size_t i = 0; i < c.sites.size(); ++i) {
      const auto& s = c.sites[i];
      const std::string key = "sites." + std::to_string(i);
      auto mods = s.modalities;
      std::sort(mods.begin(), mods.end());
      if (mods.empty() || std::adjacent_find(mods.begin(), mods.end()) != mods.end() ||
          mods.front() < 0 || mods.back() > 3) {
        bad(key + ".modalities", "must be distinct modality indices in [0, 3]");
      }
      if (i == 0 && mods.size() != 4) bad(key + ".modalities", "the server must hold every modality");
      if (s.samples < 1) bad(key + ".samples", "must be >= 1");
    }
  }
  std::size_t need = 0;
  for (const auto& e : c.site_plan()) need += e.n_samples;
  if (c.pool_size != 0 && c.pool_size < need) {
    bad("data.pool_size", "the site plan needs " + std::to_string(need) + " samples");
  }
}

std::string serialize(const ExperimentConfig& c) {
  std::ostringstream o;
  o << "seed = " << c.seed << '\n'
    << "rounds = " << c.rounds << '\n'
    << "epochs_per_round = " << c.epochs_per_round << '\n'
    << "patience = " << c.patience << '\n'
    << "lambda_base = " << format_double(c.lambda_base) << '\n'
    << "omega = " << format_double(c.omega) << '\n'
    << "n_k = " << c.n_k << '\n'
    << "membership_level = "
    << (c.membership_level ? std::to_string(*c.membership_level) : std::string("deepest")) << '\n'
    << "n_heads = " << c.n_heads << '\n'
    << "lr = " << format_double(c.lr) << '\n'
    << "weight_decay = " << format_double(c.weight_decay) << '\n'
    << "batch_size = " << c.batch_size << '\n'
    << "mode = " << to_string(c.mode) << '\n'
    << "anchor_match = " << (c.anchor_match == anchors::MatchRule::kNearest ? "nearest" : "one_to_one") << '\n'
    << "lacca_in_mask = " << (c.lacca_in_mask ? "true" : "false") << '\n'
    << "model.enc_channels = " << join(c.enc_channels) << '\n'
    << "model.dec_channels = " << join(c.dec_channels) << '\n'
    << "data.height = " << c.height << '\n'
    << "data.width = " << c.width << '\n'
    << "data.noise_sigma = " << format_double(c.noise_sigma) << '\n'
    << "data.contrast_jitter = " << format_double(c.contrast_jitter) << '\n'
    << "data.noise_jitter = " << format_double(c.noise_jitter) << '\n'
    << "data.pool_size = " << c.pool_size << '\n';
  for (std::size_t i = 0; i < c.sites.size(); ++i) {
    o << "sites." << i << ".modalities = " << join(c.sites[i].modalities) << '\n'
      << "sites." << i << ".samples = " << c.sites[i].samples << '\n';
  }
  return o.str();
}

std::uint32_t config_digest(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.rounds = 0;
  const std::string text = serialize(c);
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size())));
}

}  // namespace fedmepd
