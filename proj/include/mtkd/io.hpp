#pragma once

#include "mtkd/apo.hpp"
#include "mtkd/policy.hpp"
#include "mtkd/record.hpp"

#include <filesystem>
#include <map>
#include <variant>

namespace mtkd::io {

namespace fs = std::filesystem;

struct ParseError : DataError {
  ParseError(std::size_t line, const std::string& what);
  std::size_t line;
};
struct SchemaError : DataError {
  SchemaError(std::size_t line, const std::string& what);
  std::size_t line;
};
struct HeterogeneousRows : DataError {
  using DataError::DataError;
};
struct IoError : Error {
  using Error::Error;
};

// -- corpus ------------------------------------------------------------------

/// One JSON object per line, fields in the order
/// id, context, teacher_id, tokens, step_logprobs, corpus_step, meta.
std::string serialize_record(const TrajectoryRecord& record);
TrajectoryRecord parse_record(std::string_view line, std::size_t line_number = 1);

std::vector<TrajectoryRecord> read_corpus(const fs::path& path);
void write_corpus(std::span<const TrajectoryRecord> records, const fs::path& path);

// -- preference tuples ---------------------------------------------------------

/// One JSON object per line: context, positive, negatives, weights.
std::string serialize_tuple(const PreferenceTuple& tuple);
PreferenceTuple parse_tuple(std::string_view line, std::size_t line_number = 1);
std::vector<PreferenceTuple> read_tuples(const fs::path& path);
void write_tuples(std::span<const PreferenceTuple> tuples, const fs::path& path);

// -- vocabulary sidecar --------------------------------------------------------

std::string serialize_vocab(const Vocab& vocab);
Vocab parse_vocab(std::string_view text);
Vocab read_vocab(const fs::path& path);
void write_vocab(const Vocab& vocab, const fs::path& path);

// -- checkpoints -----------------------------------------------------------------

struct Checkpoint {
  TabularPolicy policy;
  std::map<std::string, std::string> meta;
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint parse_checkpoint(std::string_view text);
Checkpoint read_checkpoint(const fs::path& path);
void write_checkpoint(const Checkpoint& checkpoint, const fs::path& path);

// -- metrics CSV -----------------------------------------------------------------

using MetricValue = std::variant<std::int64_t, double, std::string>;
using MetricRow = std::map<std::string, MetricValue>;

/// Shortest round-trip text for doubles, decimal for integers, raw strings.
std::string format_metric(const MetricValue& value);
/// RFC-4180 field quoting.
std::string csv_field(std::string_view text);
/// Header of lexicographically sorted keys, then one line per row, CRLF-free.
std::string render_metrics(std::span<const MetricRow> rows, std::span<const std::string> header = {});
void export_metrics(std::span<const MetricRow> rows, const fs::path& path,
                    std::span<const std::string> header = {});
/// Minimal RFC-4180 reader: header plus rows of string fields.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

// -- files & hashing ---------------------------------------------------------------

/// Writes via a sibling temp file and an atomic rename, holding a per-path lock.
void write_file_atomic(const fs::path& path, std::string_view contents);
std::string read_file(const fs::path& path);
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

// -- run manifest -----------------------------------------------------------------

struct ArtifactRef {
  std::string path;  // relative to the run directory
  std::string sha256;
};

struct StageRecord {
  std::string name;
  std::string input_hash;  // hash of the stage's config slice and upstream artifact hashes
  std::vector<ArtifactRef> artifacts;
};

struct RunManifest {
  std::uint64_t seed = 0;
  std::string config_json;  // canonical config snapshot
  std::vector<StageRecord> stages;

  const StageRecord* find_stage(std::string_view name) const;
  void upsert_stage(StageRecord stage);
};

std::string serialize_manifest(const RunManifest& manifest);
RunManifest parse_manifest(std::string_view text);
RunManifest read_manifest(const fs::path& path);
void write_manifest(const RunManifest& manifest, const fs::path& path);

/// Re-hashes every artifact under `run_dir`; returns the paths whose content differs.
std::vector<std::string> verify_manifest(const RunManifest& manifest, const fs::path& run_dir);

}  // namespace mtkd::io
