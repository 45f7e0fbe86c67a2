#include "fedmepd/codec.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace fedmepd::codec {

static_assert(std::endian::native == std::endian::little, "codec assumes a little-endian host");

std::string to_string(DecodeErrorKind k) {
  switch (k) {
    case DecodeErrorKind::kBadMagic: return "bad magic";
    case DecodeErrorKind::kVersionMismatch: return "version mismatch";
    case DecodeErrorKind::kBadChecksum: return "checksum mismatch";
    case DecodeErrorKind::kTruncated: return "truncated";
    case DecodeErrorKind::kTrailingBytes: return "trailing bytes";
    case DecodeErrorKind::kWrongKind: return "wrong message kind";
    case DecodeErrorKind::kMalformed: return "malformed payload";
  }
  return "?";
}

DecodeError::DecodeError(DecodeErrorKind kind, const std::string& what)
    : std::runtime_error("decode error (" + to_string(kind) + "): " + what), kind_(kind) {}

bool operator==(const Dataset& a, const Dataset& b) {
  if (a.samples.size() != b.samples.size()) return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto& x = a.samples[i];
    const auto& y = b.samples[i];
    if (x.id != y.id || x.images != y.images || x.label != y.label) return false;
  }
  return true;
}

namespace {

constexpr char kMagic[4] = {'F', 'M', 'P', 'D'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void i32(std::int32_t v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void size(std::size_t v) {
    if (v > std::numeric_limits<std::uint32_t>::max()) throw std::length_error("codec: count exceeds u32");
    u32(static_cast<std::uint32_t>(v));
  }
  void str(const std::string& s) {
    size(s.size());
    raw(s.data(), s.size());
  }
  void bytes(std::span<const std::uint8_t> b) {
    size(b.size());
    raw(b.data(), b.size());
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint16_t u16() { return scalar<std::uint16_t>(); }
  std::uint32_t u32() { return scalar<std::uint32_t>(); }
  std::uint64_t u64() { return scalar<std::uint64_t>(); }
  std::int32_t i32() { return scalar<std::int32_t>(); }
  double f64() { return scalar<double>(); }
  /// A u32 count whose elements take at least `min_elem` bytes each.
  std::size_t count(std::size_t min_elem) {
    const std::size_t n = u32();
    if (min_elem != 0 && n > remaining() / min_elem) malformed("count exceeds remaining payload");
    return n;
  }
  std::string str() {
    const std::size_t n = count(1);
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  std::vector<std::uint8_t> bytes() {
    const std::size_t n = count(1);
    std::vector<std::uint8_t> b(n);
    raw(b.data(), n);
    return b;
  }
  std::size_t remaining() const { return in_.size() - pos_; }
  [[noreturn]] void malformed(const std::string& what) const {
    throw DecodeError(DecodeErrorKind::kMalformed, what + " at payload offset " + std::to_string(pos_));
  }

 private:
  template <typename T>
  T scalar() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  void raw(void* p, std::size_t n) {
    if (n > remaining()) malformed("payload ends early");
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

// ---- framing ----

Bytes frame(Kind kind, const Bytes& payload) {
  Writer w;
  w.raw(kMagic, 4);
  w.u16(kFormatVersion);
  w.u8(static_cast<std::uint8_t>(kind));
  w.u64(payload.size());
  w.raw(payload.data(), payload.size());
  w.u32(static_cast<std::uint32_t>(crc32(0L, payload.data(), static_cast<uInt>(payload.size()))));
  return w.take();
}

struct Unframed {
  Kind kind;
  std::span<const std::uint8_t> payload;
};

Unframed unframe(std::span<const std::uint8_t> bytes) {
  const std::size_t magic_seen = std::min<std::size_t>(bytes.size(), 4);
  if (magic_seen > 0 && std::memcmp(bytes.data(), kMagic, magic_seen) != 0) {
    throw DecodeError(DecodeErrorKind::kBadMagic, "frame does not start with FMPD");
  }
  if (bytes.size() < kHeaderSize) {
    throw DecodeError(DecodeErrorKind::kTruncated,
                      "header needs " + std::to_string(kHeaderSize) + " bytes, have " +
                          std::to_string(bytes.size()));
  }
  std::uint16_t version;
  std::memcpy(&version, bytes.data() + 4, 2);
  if (version != kFormatVersion) {
    throw DecodeError(DecodeErrorKind::kVersionMismatch,
                      "format version " + std::to_string(version) + ", expected " +
                          std::to_string(kFormatVersion));
  }
  const auto kind = static_cast<Kind>(bytes[6]);
  std::uint64_t length;
  std::memcpy(&length, bytes.data() + 7, 8);
  const std::size_t body = bytes.size() - kHeaderSize;
  if (body < kTrailerSize || length > body - kTrailerSize) {
    throw DecodeError(DecodeErrorKind::kTruncated,
                      "frame declares " + std::to_string(length) + " payload bytes, " +
                          std::to_string(body < kTrailerSize ? 0 : body - kTrailerSize) + " present");
  }
  if (length < body - kTrailerSize) {
    throw DecodeError(DecodeErrorKind::kTrailingBytes,
                      std::to_string(body - kTrailerSize - length) + " bytes after the frame");
  }
  const auto payload = bytes.subspan(kHeaderSize, length);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + kHeaderSize + length, 4);
  const auto actual =
      static_cast<std::uint32_t>(crc32(0L, payload.data(), static_cast<uInt>(payload.size())));
  if (stored != actual) throw DecodeError(DecodeErrorKind::kBadChecksum, "payload CRC32 mismatch");
  return {kind, payload};
}

std::span<const std::uint8_t> expect(std::span<const std::uint8_t> bytes, Kind kind) {
  const auto u = unframe(bytes);
  if (u.kind != kind) {
    throw DecodeError(DecodeErrorKind::kWrongKind,
                      "got kind " + std::to_string(static_cast<int>(u.kind)) + ", expected " +
                          std::to_string(static_cast<int>(kind)));
  }
  return u.payload;
}

template <typename T, typename F>
T parse_all(std::span<const std::uint8_t> payload, F&& f) {
  Reader r(payload);
  T out = f(r);
  if (r.remaining() != 0) r.malformed("unparsed bytes remain");
  return out;
}

// ---- values ----

void put(Writer& w, const Tensor& t) {
  if (t.rank() > 255) throw std::length_error("codec: tensor rank exceeds u8");
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) w.size(e);
  for (double v : t.values()) w.f64(v);
}

Tensor get_tensor(Reader& r) {
  const std::size_t rank = r.u8();
  if (rank == 0) return Tensor();
  std::vector<std::size_t> shape(rank);
  for (auto& e : shape) e = r.u32();
  std::size_t n = 1;
  if (std::find(shape.begin(), shape.end(), 0) != shape.end()) {
    n = 0;
  } else {
    for (std::size_t e : shape) {
      if (n > r.remaining() / 8 / e) r.malformed("tensor extents exceed the payload");
      n *= e;
    }
  }
  std::vector<double> values(n);
  for (double& v : values) v = r.f64();
  return Tensor(std::move(shape), std::move(values));
}

void put(Writer& w, const model::ParamSet& p) {
  w.u8(static_cast<std::uint8_t>(p.role));
  w.i32(p.modality);
  w.size(p.layers.size());
  for (const auto& l : p.layers) {
    w.str(l.name);
    put(w, l.weight);
    put(w, l.bias);
  }
}

model::ParamSet get_params(Reader& r) {
  model::ParamSet p;
  const auto role = r.u8();
  if (role > 2) r.malformed("unknown parameter role");
  p.role = static_cast<model::Role>(role);
  p.modality = r.i32();
  const std::size_t n = r.count(4 + 1 + 1);
  p.layers.resize(n);
  for (auto& l : p.layers) {
    l.name = r.str();
    l.weight = get_tensor(r);
    l.bias = get_tensor(r);
  }
  return p;
}

void put(Writer& w, const std::map<int, model::ParamSet>& m) {
  w.size(m.size());
  for (const auto& [k, v] : m) {
    w.i32(k);
    put(w, v);
  }
}

std::map<int, model::ParamSet> get_param_map(Reader& r) {
  std::map<int, model::ParamSet> m;
  const std::size_t n = r.count(4 + 1 + 4 + 4);
  for (std::size_t i = 0; i < n; ++i) {
    const int k = r.i32();
    if (!m.emplace(k, get_params(r)).second) r.malformed("duplicate modality key");
  }
  return m;
}

void put(Writer& w, const model::ModelParams& p) {
  put(w, p.encoders);
  put(w, p.decoder);
  put(w, p.lacca);
}

model::ModelParams get_model_params(Reader& r) {
  model::ModelParams p;
  p.encoders = get_param_map(r);
  p.decoder = get_params(r);
  p.lacca = get_params(r);
  return p;
}

void put_sizes(Writer& w, const std::vector<std::size_t>& xs) {
  w.size(xs.size());
  for (std::size_t x : xs) w.size(x);
}

std::vector<std::size_t> get_sizes(Reader& r) {
  std::vector<std::size_t> xs(r.count(4));
  for (auto& x : xs) x = r.u32();
  return xs;
}

void put(Writer& w, const model::SiteModel& m) {
  w.size(m.shape.n_modalities);
  w.size(m.shape.n_classes);
  w.size(m.shape.height);
  w.size(m.shape.width);
  put_sizes(w, m.shape.enc_channels);
  put_sizes(w, m.shape.dec_channels);
  w.size(m.shape.n_heads);
  w.size(m.modalities.size());
  for (int mod : m.modalities) w.i32(mod);
  put(w, m.params);
  w.u64(m.adam.step);
  put(w, m.adam.m);
  put(w, m.adam.v);
}

model::SiteModel get_site_model(Reader& r) {
  model::SiteModel m;
  m.shape.n_modalities = r.u32();
  m.shape.n_classes = r.u32();
  m.shape.height = r.u32();
  m.shape.width = r.u32();
  m.shape.enc_channels = get_sizes(r);
  m.shape.dec_channels = get_sizes(r);
  m.shape.n_heads = r.u32();
  m.modalities.resize(r.count(4));
  for (int& mod : m.modalities) mod = r.i32();
  m.params = get_model_params(r);
  m.adam.step = r.u64();
  m.adam.m = get_model_params(r);
  m.adam.v = get_model_params(r);
  return m;
}

void put(Writer& w, const anchors::AnchorBank& b) {
  w.size(b.n_classes);
  w.size(b.n_k);
  w.size(b.membership_level);
  w.f64(b.omega);
  w.size(b.levels.size());  // 0 = empty bank
  for (const auto& t : b.levels) {
    w.size(t.rows());
    w.size(t.cols());
    for (double v : t.values()) w.f64(v);
  }
  w.bytes(b.stale);
}

anchors::AnchorBank get_bank(Reader& r) {
  anchors::AnchorBank b;
  b.n_classes = r.u32();
  b.n_k = r.u32();
  b.membership_level = r.u32();
  b.omega = r.f64();
  b.levels.resize(r.count(8));
  for (auto& t : b.levels) {
    const std::size_t rows = r.u32(), cols = r.u32();
    if (cols != 0 && rows > r.remaining() / 8 / cols) r.malformed("anchor block exceeds the payload");
    t = Tensor::matrix(rows, cols);
    for (double& v : t.values()) v = r.f64();
  }
  b.stale = r.bytes();
  return b;
}

void put(Writer& w, const fed::PersonalizationMask& m) {
  w.size(m.n_clients);
  w.size(m.n_filters);
  w.u32(m.patience);
  w.raw(m.bits.data(), m.bits.size());  // one byte per filter per client
  for (auto c : m.counters) w.u32(c);
}

fed::PersonalizationMask get_mask(Reader& r) {
  fed::PersonalizationMask m;
  m.n_clients = r.u32();
  m.n_filters = r.u32();
  m.patience = r.u32();
  const std::size_t cells = m.n_clients * m.n_filters;
  if (cells > r.remaining() / 5) r.malformed("mask exceeds the payload");
  m.bits.resize(cells);
  for (auto& b : m.bits) {
    b = r.u8();
    if (b > 1) r.malformed("mask bit is neither 0 nor 1");
  }
  m.counters.resize(cells);
  for (auto& c : m.counters) c = r.u32();
  return m;
}

void put(Writer& w, const Rng& rng) {
  for (auto s : rng.state()) w.u64(s);
}

Rng get_rng(Reader& r) {
  std::array<std::uint64_t, 4> s{};
  for (auto& v : s) v = r.u64();
  return Rng::from_state(s);
}

void put(Writer& w, const MetricsRow& m) {
  w.u64(m.round);
  w.str(m.site_id);
  w.str(m.modalities);
  w.f64(m.mdsc);
  w.f64(m.loss);
  w.u8(m.fed_ratio ? 1 : 0);
  if (m.fed_ratio) w.f64(*m.fed_ratio);
}

MetricsRow get_row(Reader& r) {
  MetricsRow m;
  m.round = r.u64();
  m.site_id = r.str();
  m.modalities = r.str();
  m.mdsc = r.f64();
  m.loss = r.f64();
  const auto has = r.u8();
  if (has > 1) r.malformed("bad optional flag");
  if (has) m.fed_ratio = r.f64();
  return m;
}

void put(Writer& w, const synth::LabelMap& l) {
  w.size(l.height);
  w.size(l.width);
  if (l.classes.size() != l.height * l.width) throw std::invalid_argument("codec: label map size");
  for (int c : l.classes) {
    if (c < 0 || c > 255) throw std::invalid_argument("codec: label class out of u8 range");
    w.u8(static_cast<std::uint8_t>(c));
  }
}

synth::LabelMap get_label(Reader& r) {
  synth::LabelMap l;
  l.height = r.u32();
  l.width = r.u32();
  if (l.width != 0 && l.height > r.remaining() / l.width) r.malformed("label map exceeds the payload");
  l.classes.resize(l.height * l.width);
  for (int& c : l.classes) c = r.u8();
  return l;
}

}  // namespace

Bytes encode(const Broadcast& m) {
  Writer w;
  w.u64(m.round);
  put(w, m.encoders);
  put(w, m.decoder);
  put(w, m.anchors);
  w.bytes(m.mask_row);
  return frame(Kind::kBroadcast, w.take());
}

Broadcast decode_broadcast(std::span<const std::uint8_t> bytes) {
  return parse_all<Broadcast>(expect(bytes, Kind::kBroadcast), [](Reader& r) {
    Broadcast m;
    m.round = r.u64();
    m.encoders = get_param_map(r);
    m.decoder = get_params(r);
    m.anchors = get_bank(r);
    m.mask_row = r.bytes();
    for (auto b : m.mask_row) {
      if (b > 1) r.malformed("mask bit is neither 0 nor 1");
    }
    return m;
  });
}

Bytes encode(const Report& m) {
  Writer w;
  w.u64(m.round);
  w.u32(m.site_id);
  put(w, m.encoders);
  put(w, m.decoder);
  return frame(Kind::kReport, w.take());
}

Report decode_report(std::span<const std::uint8_t> bytes) {
  return parse_all<Report>(expect(bytes, Kind::kReport), [](Reader& r) {
    Report m;
    m.round = r.u64();
    m.site_id = r.u32();
    m.encoders = get_param_map(r);
    m.decoder = get_params(r);
    return m;
  });
}

Bytes encode(const ExperimentState& s) {
  Writer w;
  w.u64(s.round);
  w.u32(s.config_digest);
  w.str(s.config_text);
  put(w, s.server);
  put(w, s.server_rng);
  w.size(s.clients.size());
  for (const auto& c : s.clients) {
    w.u32(c.site_id);
    put(w, c.model);
    put(w, c.rng);
    w.u64(c.expected_round);
    put(w, c.anchors);
  }
  put(w, s.mask);
  put(w, s.bank);
  w.size(s.history.size());
  for (const auto& row : s.history) put(w, row);
  return frame(Kind::kCheckpoint, w.take());
}

ExperimentState decode_state(std::span<const std::uint8_t> bytes) {
  return parse_all<ExperimentState>(expect(bytes, Kind::kCheckpoint), [](Reader& r) {
    ExperimentState s;
    s.round = r.u64();
    s.config_digest = r.u32();
    s.config_text = r.str();
    s.server = get_site_model(r);
    s.server_rng = get_rng(r);
    s.clients.resize(r.count(4));
    for (auto& c : s.clients) {
      c.site_id = r.u32();
      c.model = get_site_model(r);
      c.rng = get_rng(r);
      c.expected_round = r.u64();
      c.anchors = get_bank(r);
    }
    s.mask = get_mask(r);
    s.bank = get_bank(r);
    s.history.resize(r.count(8));
    for (auto& row : s.history) row = get_row(r);
    return s;
  });
}

Bytes encode(const Dataset& d) {
  Writer w;
  w.size(d.samples.size());
  for (const auto& s : d.samples) {
    w.u64(s.id);
    w.size(s.images.size());
    for (const auto& img : s.images) put(w, img);
    put(w, s.label);
  }
  return frame(Kind::kDataset, w.take());
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  return parse_all<Dataset>(expect(bytes, Kind::kDataset), [](Reader& r) {
    Dataset d;
    d.samples.resize(r.count(8));
    for (auto& s : d.samples) {
      s.id = r.u64();
      s.images.resize(r.count(1));
      for (auto& img : s.images) img = get_tensor(r);
      s.label = get_label(r);
    }
    return d;
  });
}

Kind peek_kind(std::span<const std::uint8_t> bytes) { return unframe(bytes).kind; }

void write_file(const std::string& path, const Bytes& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + tmp + "'");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot move '" + tmp + "' to '" + path + "'");
  }
}

Bytes read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  return Bytes(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace fedmepd::codec
