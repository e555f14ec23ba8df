#include "mtkd/io.hpp"

#include <json.hpp>
#include <openssl/evp.h>
#include <unistd.h>

#include <atomic>
#include <charconv>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

namespace mtkd::io {

using ojson = nlohmann::ordered_json;
using json = nlohmann::json;

ParseError::ParseError(std::size_t line_, const std::string& what)
    : DataError("line " + std::to_string(line_) + ": " + what), line(line_) {}
SchemaError::SchemaError(std::size_t line_, const std::string& what)
    : DataError("line " + std::to_string(line_) + ": " + what), line(line_) {}

// ---------------------------------------------------------------------------

namespace {

const std::set<std::string> kRecordFields = {"id",          "context",     "teacher_id", "tokens",
                                             "step_logprobs", "corpus_step", "meta"};

ojson number_or_marker(double x) {
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

double number_from(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw DataError("expected a number, got " + j.dump());
}

ojson vector_json(const Eigen::VectorXd& v) {
  ojson a = ojson::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(number_or_marker(v(i)));
  return a;
}

Eigen::VectorXd vector_from(const json& j) {
  if (!j.is_array()) throw DataError("expected an array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = number_from(j[i]);
  return v;
}

std::mutex& path_lock(const fs::path& path) {
  static std::mutex registry_guard;
  static std::map<std::string, std::unique_ptr<std::mutex>> registry;
  std::lock_guard g(registry_guard);
  auto& slot = registry[fs::absolute(path).lexically_normal().string()];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

}  // namespace

std::string serialize_record(const TrajectoryRecord& r) {
  ojson j;
  j["id"] = r.id;
  j["context"] = r.context.render();
  j["teacher_id"] = r.teacher_id;
  j["tokens"] = r.tokens;
  if (r.step_logprobs) j["step_logprobs"] = *r.step_logprobs;
  j["corpus_step"] = r.corpus_step;
  ojson meta = ojson::object();
  for (const auto& [k, v] : r.meta) meta[k] = v;
  j["meta"] = std::move(meta);
  return j.dump();
}

TrajectoryRecord parse_record(std::string_view line, std::size_t line_number) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(line_number, e.what());
  }
  if (!j.is_object()) throw ParseError(line_number, "record is not a JSON object");

  std::vector<std::string> missing;
  for (const char* f : {"id", "context", "teacher_id", "tokens"})
    if (!j.contains(f)) missing.emplace_back(f);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw SchemaError(line_number, "missing required fields: " + list);
  }
  for (const auto& [k, _] : j.items())
    if (!kRecordFields.count(k)) throw SchemaError(line_number, "unknown field '" + k + "'");

  TrajectoryRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.context = ContextId::parse(j.at("context").get<std::string>());
    r.teacher_id = j.at("teacher_id").get<std::string>();
    r.tokens = j.at("tokens").get<std::vector<Token>>();
    if (j.contains("step_logprobs")) r.step_logprobs = j["step_logprobs"].get<std::vector<double>>();
    if (j.contains("corpus_step")) r.corpus_step = j["corpus_step"].get<std::int64_t>();
    if (j.contains("meta")) {
      if (!j["meta"].is_object()) throw SchemaError(line_number, "meta must be an object");
      for (const auto& [k, v] : j["meta"].items()) {
        if (!v.is_string()) throw SchemaError(line_number, "meta field '" + k + "' must be a string");
        r.meta[k] = v.get<std::string>();
      }
    }
  } catch (const json::exception& e) {
    throw SchemaError(line_number, e.what());
  } catch (const SchemaError&) {
    throw;
  } catch (const DataError& e) {
    throw SchemaError(line_number, e.what());
  }
  try {
    r.validate();
  } catch (const DataError& e) {
    throw SchemaError(line_number, e.what());
  }
  return r;
}

std::vector<TrajectoryRecord> read_corpus(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus '" + path.string() + "'");
  std::vector<TrajectoryRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    out.push_back(parse_record(line, n));
  }
  return out;
}

void write_corpus(std::span<const TrajectoryRecord> records, const fs::path& path) {
  std::string buf;
  for (const auto& r : records) {
    r.validate();
    buf += serialize_record(r);
    buf += '\n';
  }
  write_file_atomic(path, buf);
}

// ---------------------------------------------------------------------------

std::string serialize_tuple(const PreferenceTuple& t) {
  ojson j;
  j["context"] = t.context.render();
  j["positive"] = t.positive;
  j["negatives"] = t.negatives;
  j["weights"] = t.weights;
  return j.dump();
}

PreferenceTuple parse_tuple(std::string_view line, std::size_t line_number) {
  PreferenceTuple t;
  try {
    const json j = json::parse(line);
    t.context = ContextId::parse(j.at("context").get<std::string>());
    t.positive = j.at("positive").get<std::vector<Token>>();
    t.negatives = j.at("negatives").get<std::vector<std::vector<Token>>>();
    t.weights = j.at("weights").get<std::vector<double>>();
  } catch (const json::parse_error& e) {
    throw ParseError(line_number, e.what());
  } catch (const json::exception& e) {
    throw SchemaError(line_number, e.what());
  } catch (const DataError& e) {
    throw SchemaError(line_number, e.what());
  }
  try {
    t.validate();
  } catch (const Error& e) {
    throw SchemaError(line_number, e.what());
  }
  return t;
}

std::vector<PreferenceTuple> read_tuples(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tuples '" + path.string() + "'");
  std::vector<PreferenceTuple> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty()) out.push_back(parse_tuple(line, n));
  }
  return out;
}

void write_tuples(std::span<const PreferenceTuple> tuples, const fs::path& path) {
  std::string buf;
  for (const auto& t : tuples) {
    buf += serialize_tuple(t);
    buf += '\n';
  }
  write_file_atomic(path, buf);
}

// ---------------------------------------------------------------------------

std::string serialize_vocab(const Vocab& vocab) {
  ojson j;
  j["symbols"] = vocab.symbols();
  j["sep"] = vocab.symbol(vocab.sep());
  j["eos"] = vocab.symbol(vocab.eos());
  return j.dump(2) + "\n";
}

Vocab parse_vocab(std::string_view text) {
  try {
    const json j = json::parse(text);
    return Vocab(j.at("symbols").get<std::vector<std::string>>(), j.at("sep").get<std::string>(),
                 j.at("eos").get<std::string>());
  } catch (const json::exception& e) {
    throw DataError(std::string("vocab: ") + e.what());
  }
}

Vocab read_vocab(const fs::path& path) { return parse_vocab(read_file(path)); }
void write_vocab(const Vocab& vocab, const fs::path& path) {
  write_file_atomic(path, serialize_vocab(vocab));
}

// ---------------------------------------------------------------------------

std::string serialize_checkpoint(const Checkpoint& c) {
  const auto& p = c.policy;
  ojson j;
  j["format"] = "mtkd-checkpoint/1";
  j["vocab"] = {{"symbols", p.vocab().symbols()},
                {"sep", p.vocab().symbol(p.vocab().sep())},
                {"eos", p.vocab().symbol(p.vocab().eos())}};
  j["order"] = p.order();
  j["temperature"] = p.temperature();
  j["default_logits"] = vector_json(p.default_logits());
  ojson rows = ojson::array();
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const auto& key = p.keys()[static_cast<std::size_t>(r)];
    ojson row;
    row["context"] = key.context.render();
    row["history"] = key.history;
    row["logits"] = vector_json(p.table().row(r).transpose());
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  ojson meta = ojson::object();
  for (const auto& [k, v] : c.meta) meta[k] = v;
  j["meta"] = std::move(meta);
  return j.dump() + "\n";
}

Checkpoint parse_checkpoint(std::string_view text) {
  try {
    const json j = json::parse(text);
    if (j.at("format").get<std::string>() != "mtkd-checkpoint/1")
      throw DataError("checkpoint: unsupported format");
    const auto& jv = j.at("vocab");
    Vocab vocab(jv.at("symbols").get<std::vector<std::string>>(), jv.at("sep").get<std::string>(),
                jv.at("eos").get<std::string>());
    TabularPolicy policy(std::move(vocab), j.at("order").get<int>(),
                         j.at("temperature").get<double>());
    policy.set_default_logits(vector_from(j.at("default_logits")));
    std::vector<RowKey> keys;
    for (const auto& row : j.at("rows"))
      keys.push_back({ContextId::parse(row.at("context").get<std::string>()),
                      row.at("history").get<std::vector<Token>>()});
    policy.materialize(keys);
    for (std::size_t r = 0; r < keys.size(); ++r)
      policy.set_logits(keys[r], vector_from(j.at("rows")[r].at("logits")));
    Checkpoint c{std::move(policy), {}};
    for (const auto& [k, v] : j.at("meta").items()) c.meta[k] = v.get<std::string>();
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

Checkpoint read_checkpoint(const fs::path& path) { return parse_checkpoint(read_file(path)); }
void write_checkpoint(const Checkpoint& checkpoint, const fs::path& path) {
  write_file_atomic(path, serialize_checkpoint(checkpoint));
}

// ---------------------------------------------------------------------------

std::string format_metric(const MetricValue& value) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, std::string>) {
          return v;
        } else if constexpr (std::is_same_v<T, double>) {
          if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
          char buf[64];
          auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
          return std::string(buf, end);
        } else {
          return std::to_string(v);
        }
      },
      value);
}

std::string csv_field(std::string_view text) {
  if (text.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(text);
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string render_metrics(std::span<const MetricRow> rows, std::span<const std::string> header) {
  std::vector<std::string> keys(header.begin(), header.end());
  if (keys.empty() && !rows.empty())
    for (const auto& [k, _] : rows.front()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != keys.size())
      throw HeterogeneousRows("metrics row " + std::to_string(i) + " has a different key set");
    for (const auto& k : keys)
      if (!rows[i].count(k))
        throw HeterogeneousRows("metrics row " + std::to_string(i) + " lacks key '" + k + "'");
  }
  std::string out;
  for (std::size_t i = 0; i < keys.size(); ++i) out += (i ? "," : "") + csv_field(keys[i]);
  out += '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < keys.size(); ++i)
      out += (i ? "," : "") + csv_field(format_metric(row.at(keys[i])));
    out += '\n';
  }
  return out;
}

void export_metrics(std::span<const MetricRow> rows, const fs::path& path,
                    std::span<const std::string> header) {
  write_file_atomic(path, render_metrics(rows, header));
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
      out.push_back(std::move(row));
      row.clear();
    } else {
      field += c;
      field_started = true;
    }
  }
  if (field_started || !row.empty()) {
    row.push_back(std::move(field));
    out.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_file_atomic(const fs::path& path, std::string_view contents) {
  static std::atomic<std::uint64_t> counter{0};
  std::lock_guard guard(path_lock(path));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot rename into '" + path.string() + "': " + ec.message());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr))
    throw IoError("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

// ---------------------------------------------------------------------------

const StageRecord* RunManifest::find_stage(std::string_view name) const {
  for (const auto& s : stages)
    if (s.name == name) return &s;
  return nullptr;
}

void RunManifest::upsert_stage(StageRecord stage) {
  for (auto& s : stages)
    if (s.name == stage.name) {
      s = std::move(stage);
      return;
    }
  stages.push_back(std::move(stage));
}

std::string serialize_manifest(const RunManifest& m) {
  ojson j;
  j["format"] = "mtkd-manifest/1";
  j["seed"] = m.seed;
  j["config"] = m.config_json.empty() ? ojson::object() : ojson::parse(m.config_json);
  ojson stages = ojson::array();
  for (const auto& s : m.stages) {
    ojson js;
    js["name"] = s.name;
    js["input_hash"] = s.input_hash;
    ojson arts = ojson::array();
    for (const auto& a : s.artifacts) arts.push_back({{"path", a.path}, {"sha256", a.sha256}});
    js["artifacts"] = std::move(arts);
    stages.push_back(std::move(js));
  }
  j["stages"] = std::move(stages);
  return j.dump(2) + "\n";
}

RunManifest parse_manifest(std::string_view text) {
  try {
    const ojson j = ojson::parse(text);
    RunManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_json = j.at("config").dump();
    for (const auto& js : j.at("stages")) {
      StageRecord s{js.at("name").get<std::string>(), js.at("input_hash").get<std::string>(), {}};
      for (const auto& a : js.at("artifacts"))
        s.artifacts.push_back({a.at("path").get<std::string>(), a.at("sha256").get<std::string>()});
      m.stages.push_back(std::move(s));
    }
    return m;
  } catch (const ojson::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
}

RunManifest read_manifest(const fs::path& path) { return parse_manifest(read_file(path)); }
void write_manifest(const RunManifest& manifest, const fs::path& path) {
  write_file_atomic(path, serialize_manifest(manifest));
}

std::vector<std::string> verify_manifest(const RunManifest& manifest, const fs::path& run_dir) {
  std::vector<std::string> bad;
  for (const auto& s : manifest.stages)
    for (const auto& a : s.artifacts) {
      const auto p = run_dir / a.path;
      if (!fs::exists(p) || sha256_file(p) != a.sha256) bad.push_back(a.path);
    }
  return bad;
}

}  // namespace mtkd::io
