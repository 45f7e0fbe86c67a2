#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmepd/anchorbank.hpp"
#include "fedmepd/fedcore.hpp"
#include "fedmepd/toymodel.hpp"

// Little-endian framed binary format for round messages, checkpoints and
// dataset dumps:
//   "FMPD" | version u16 | kind u8 | payload length u64 | payload | CRC32(payload)
namespace fedmepd::codec {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderSize = 4 + 2 + 1 + 8;
inline constexpr std::size_t kTrailerSize = 4;

enum class Kind : std::uint8_t { kBroadcast = 1, kReport = 2, kCheckpoint = 3, kDataset = 4 };

enum class DecodeErrorKind : std::uint8_t {
  kBadMagic,
  kVersionMismatch,
  kBadChecksum,
  kTruncated,
  kTrailingBytes,
  kWrongKind,
  kMalformed,  // frame intact but the payload does not parse
};

std::string to_string(DecodeErrorKind k);

class DecodeError : public std::runtime_error {
 public:
  DecodeError(DecodeErrorKind kind, const std::string& what);
  DecodeErrorKind kind() const { return kind_; }

 private:
  DecodeErrorKind kind_;
};

// ---- messages -----------------------------------------------------------------

struct Broadcast {
  std::uint64_t round = 0;
  std::map<int, model::ParamSet> encoders;  // the recipient's modalities
  model::ParamSet decoder;  // personalizable parameters (decoder, plus LACCA when masked)
  anchors::AnchorBank anchors;  // may be empty
  std::vector<std::uint8_t> mask_row;

  friend bool operator==(const Broadcast&, const Broadcast&) = default;
};

struct Report {
  std::uint64_t round = 0;
  std::uint32_t site_id = 0;
  std::map<int, model::ParamSet> encoders;
  model::ParamSet decoder;

  friend bool operator==(const Report&, const Report&) = default;
};

struct MetricsRow {
  std::uint64_t round = 0;
  std::string site_id;  // "0" = server, "all" = client summary
  std::string modalities;
  double mdsc = 0.0;
  double loss = 0.0;
  std::optional<double> fed_ratio;

  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

struct ClientState {
  std::uint32_t site_id = 0;
  model::SiteModel model;
  Rng rng;
  std::uint64_t expected_round = 1;
  /// Anchors of the last broadcast, kept for evaluation.
  anchors::AnchorBank anchors;

  friend bool operator==(const ClientState&, const ClientState&) = default;
};

struct ExperimentState {
  std::uint64_t round = 0;
  std::uint32_t config_digest = 0;
  std::string config_text;
  model::SiteModel server;
  Rng server_rng;
  std::vector<ClientState> clients;
  fed::PersonalizationMask mask;
  anchors::AnchorBank bank;
  std::vector<MetricsRow> history;

  friend bool operator==(const ExperimentState&, const ExperimentState&) = default;
};

struct Dataset {
  std::vector<synth::Sample> samples;

  friend bool operator==(const Dataset& a, const Dataset& b);
};

// ---- encode / decode ----------------------------------------------------------

Bytes encode(const Broadcast& m);
Bytes encode(const Report& m);
Bytes encode(const ExperimentState& s);
Bytes encode(const Dataset& d);

Broadcast decode_broadcast(std::span<const std::uint8_t> bytes);
Report decode_report(std::span<const std::uint8_t> bytes);
ExperimentState decode_state(std::span<const std::uint8_t> bytes);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);

/// Kind of a well-formed frame (validates magic, version, length and CRC).
Kind peek_kind(std::span<const std::uint8_t> bytes);

void write_file(const std::string& path, const Bytes& bytes);
Bytes read_file(const std::string& path);

}  // namespace fedmepd::codec
