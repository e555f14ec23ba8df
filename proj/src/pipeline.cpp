#include "mtkd/pipeline.hpp"

#include "mtkd/random.hpp"

#include <json.hpp>

#include <algorithm>

namespace mtkd {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config

namespace {

/// Reads one JSON object level, tracking the dotted path for error messages
/// and rejecting keys nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config field '" + display() + "' must be an object");
  }

  void read(const char* key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      const auto x = v->get<std::int64_t>();
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
        fail(key, "a 32-bit integer");
      out = static_cast<int>(x);
    }
  }
  void read(const char* key, std::int64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      out = v->get<std::int64_t>();
    }
  }
  void read(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  template <typename T>
  void read(const char* key, std::vector<T>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array");
      out.clear();
      for (const auto& x : *v) {
        if constexpr (std::is_integral_v<T>) {
          if (!x.is_number_integer()) fail(key, "an array of integers");
        } else {
          if (!x.is_number()) fail(key, "an array of numbers");
        }
        out.push_back(x.get<T>());
      }
    }
  }
  template <typename E>
  void read_enum(const char* key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
    std::string s;
    read(key, s);
    if (s.empty()) return;
    for (const auto& [name, value] : names)
      if (s == name) {
        out = value;
        return;
      }
    std::string options;
    for (const auto& [name, _] : names) options += (options.empty() ? "" : ", ") + std::string(name);
    fail(key, "one of " + options);
  }

  /// Runs `fn` on the child object at `key`, if present.
  template <typename Fn>
  void child(const char* key, Fn&& fn) {
    if (const json* v = take(key)) {
      Reader r(*v, field(key));
      fn(r);
      r.finish();
    }
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config field '" + field(k.c_str()) + "'");
  }

 private:
  const json* take(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }
  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string display() const { return path_.empty() ? "<root>" : path_; }
  [[noreturn]] void fail(const char* key, const std::string& expected) const {
    throw ConfigError("config field '" + field(key) + "' must be " + expected);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const char* decode_name(DecodeMode m) { return m == DecodeMode::greedy ? "greedy" : "sample"; }
const char* spd_mode_name(SpdMode m) {
  return m == SpdMode::barycenter ? "barycenter" : "cross_entropy";
}
const char* weights_name(NegativeWeights w) {
  switch (w) {
    case NegativeWeights::uniform: return "uniform";
    case NegativeWeights::supplied: return "supplied";
    case NegativeWeights::inverse_drift: return "inverse_drift";
  }
  return "uniform";
}

json config_json(const PipelineConfig& c, bool with_runtime) {
  json j;
  j["seed"] = c.seed;
  if (with_runtime) {
    j["run_dir"] = c.run_dir.string();
    j["threads"] = c.threads;
  }
  j["task"] = {{"groups", c.task.groups},
               {"contexts", c.task.contexts},
               {"answer_tokens", c.task.answer_tokens},
               {"answer_length", c.task.answer_length},
               {"rounds", c.task.rounds}};
  const auto& e = c.ensemble;
  j["ensemble"] = {{"teachers", e.teachers},
                   {"order", e.order},
                   {"orders", e.orders},
                   {"temperature", e.temperature},
                   {"temperatures", e.temperatures},
                   {"expert_peak", e.expert_peak},
                   {"off_group_noise", e.off_group_noise},
                   {"drift", e.drift},
                   {"drift_kind", e.drift_kind == DriftKind::sudden ? "sudden" : "gradual"},
                   {"drift_span", e.drift_span}};
  j["corpus"] = {{"per_context", c.per_context}, {"max_len", c.max_len}};
  j["drift"] = {{"window", c.drift.window},
                {"alpha", c.drift.alpha},
                {"permutations", c.drift.permutations},
                {"smoothing", c.drift.smoothing},
                {"bonferroni", c.drift.bonferroni}};
  j["spd"] = {{"steps", c.spd.steps},
              {"lr", c.spd.lr},
              {"momentum", c.spd.momentum},
              {"mode", spd_mode_name(c.spd.mode)},
              {"subsample_fraction", c.spd.subsample_fraction},
              {"single_teacher", c.spd_single_teacher},
              {"student_order", c.student_order}};
  j["selfdistill"] = {{"context_cap", c.selfdistill.context_cap},
                      {"decode", decode_name(c.selfdistill.decode)}};
  j["apo"] = {{"beta", c.apo.beta},
              {"lr", c.apo.lr},
              {"steps", c.apo.steps},
              {"momentum", c.apo.momentum},
              {"length_normalized", c.apo.length_normalized},
              {"weights", weights_name(c.negative_weights)},
              {"teacher_weights", c.teacher_weights}};
  return j;
}

}  // namespace

PipelineConfig config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c;
  Reader root(j, "");
  root.read("seed", c.seed);
  std::string run_dir = c.run_dir.string();
  root.read("run_dir", run_dir);
  c.run_dir = run_dir;
  root.read("threads", c.threads);
  root.child("task", [&](Reader& r) {
    r.read("groups", c.task.groups);
    r.read("contexts", c.task.contexts);
    r.read("answer_tokens", c.task.answer_tokens);
    r.read("answer_length", c.task.answer_length);
    r.read("rounds", c.task.rounds);
  });
  root.child("ensemble", [&](Reader& r) {
    auto& e = c.ensemble;
    r.read("teachers", e.teachers);
    r.read("order", e.order);
    r.read("orders", e.orders);
    r.read("temperature", e.temperature);
    r.read("temperatures", e.temperatures);
    r.read("expert_peak", e.expert_peak);
    r.read("off_group_noise", e.off_group_noise);
    r.read("drift", e.drift);
    r.read_enum("drift_kind", e.drift_kind, {{"sudden", DriftKind::sudden}, {"gradual", DriftKind::gradual}});
    r.read("drift_span", e.drift_span);
  });
  root.child("corpus", [&](Reader& r) {
    r.read("per_context", c.per_context);
    r.read("max_len", c.max_len);
  });
  root.child("drift", [&](Reader& r) {
    r.read("window", c.drift.window);
    r.read("alpha", c.drift.alpha);
    r.read("permutations", c.drift.permutations);
    r.read("smoothing", c.drift.smoothing);
    r.read("bonferroni", c.drift.bonferroni);
  });
  root.child("spd", [&](Reader& r) {
    r.read("steps", c.spd.steps);
    r.read("lr", c.spd.lr);
    r.read("momentum", c.spd.momentum);
    r.read_enum("mode", c.spd.mode,
                {{"barycenter", SpdMode::barycenter}, {"cross_entropy", SpdMode::cross_entropy}});
    r.read("subsample_fraction", c.spd.subsample_fraction);
    r.read("single_teacher", c.spd_single_teacher);
    r.read("student_order", c.student_order);
  });
  root.child("selfdistill", [&](Reader& r) {
    r.read("context_cap", c.selfdistill.context_cap);
    r.read_enum("decode", c.selfdistill.decode,
                {{"greedy", DecodeMode::greedy}, {"sample", DecodeMode::sample}});
  });
  root.child("apo", [&](Reader& r) {
    r.read("beta", c.apo.beta);
    r.read("lr", c.apo.lr);
    r.read("steps", c.apo.steps);
    r.read("momentum", c.apo.momentum);
    r.read("length_normalized", c.apo.length_normalized);
    r.read_enum("weights", c.negative_weights,
                {{"uniform", NegativeWeights::uniform},
                 {"supplied", NegativeWeights::supplied},
                 {"inverse_drift", NegativeWeights::inverse_drift}});
    r.read("teacher_weights", c.teacher_weights);
  });
  root.finish();
  return c;
}

std::string config_to_json(const PipelineConfig& config) {
  return config_json(config, true).dump(2) + "\n";
}

std::string PipelineConfig::snapshot() const { return config_json(*this, false).dump(); }

void PipelineConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(threads >= 1, "config field 'threads' must be >= 1");
  try {
    task.validate();
    ensemble.validate(task);
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("config field ") + e.what());
  }
  require(per_context >= 1, "config field 'corpus.per_context' must be >= 1");
  require(max_len > task.answer_length,
          "config field 'corpus.max_len' must exceed task.answer_length");
  require(drift.window >= 1, "config field 'drift.window' must be >= 1");
  require(drift.alpha > 0 && drift.alpha < 1, "config field 'drift.alpha' must be in (0, 1)");
  require(drift.permutations >= 1, "config field 'drift.permutations' must be >= 1");
  require(drift.smoothing > 0, "config field 'drift.smoothing' must be positive");
  require(spd.steps >= 0, "config field 'spd.steps' must be >= 0");
  require(spd.lr > 0 && std::isfinite(spd.lr), "config field 'spd.lr' must be positive");
  require(spd.momentum >= 0 && spd.momentum < 1, "config field 'spd.momentum' must be in [0, 1)");
  require(spd.subsample_fraction > 0 && spd.subsample_fraction <= 1,
          "config field 'spd.subsample_fraction' must be in (0, 1]");
  require(spd_single_teacher >= 0 && spd_single_teacher < ensemble.teachers,
          "config field 'spd.single_teacher' must index a teacher");
  require(student_order >= task.answer_length,
          "config field 'spd.student_order' must be >= task.answer_length");
  require(selfdistill.context_cap >= 2,
          "config field 'selfdistill.context_cap' must hold the 2-token context");
  require(apo.beta > 0 && std::isfinite(apo.beta), "config field 'apo.beta' must be positive");
  require(apo.lr > 0 && std::isfinite(apo.lr), "config field 'apo.lr' must be positive");
  require(apo.steps >= 0, "config field 'apo.steps' must be >= 0");
  require(apo.momentum >= 0 && apo.momentum < 1, "config field 'apo.momentum' must be in [0, 1)");
  if (negative_weights == NegativeWeights::supplied) {
    require(teacher_weights.size() == static_cast<std::size_t>(ensemble.teachers),
            "config field 'apo.teacher_weights' needs one weight per teacher");
    double total = 0;
    for (double w : teacher_weights) {
      require(w >= 0 && std::isfinite(w), "config field 'apo.teacher_weights' must be >= 0");
      total += w;
    }
    require(total > 0, "config field 'apo.teacher_weights' must not all be zero");
  }
}

TaskSpec PipelineConfig::task_spec() const {
  TaskSpec t = task;
  t.seed = derive_seed(seed, {1});
  return t;
}

EnsembleSpec PipelineConfig::ensemble_spec() const {
  EnsembleSpec e = ensemble;
  e.seed = derive_seed(seed, {2});
  return e;
}

// ---------------------------------------------------------------------------
// Runs

namespace {

constexpr const char* kCorpus = "corpus.jsonl";
constexpr const char* kVocab = "vocab.json";
constexpr const char* kSpdSingle = "spd_single.ckpt.json";
constexpr const char* kSpdMulti = "spd_mt.ckpt.json";
constexpr const char* kSpdLoss = "spd_loss.csv";
constexpr const char* kTuples = "tuples.jsonl";
constexpr const char* kApo = "apo.ckpt.json";
constexpr const char* kApoLoss = "apo_loss.csv";
constexpr const char* kManifest = "manifest.json";

const std::vector<std::string> kStageOrder = {"generate", "spd", "selfdistill", "apo", "report"};

const PipelineConfig& validated(const PipelineConfig& config) {
  config.validate();
  return config;
}

class Run {
 public:
  explicit Run(const PipelineConfig& config)
      : config_(validated(config)),
        dir_(config.run_dir),
        task_(make_task(config.task_spec())),
        ensemble_(make_ensemble(task_, config.ensemble_spec())) {
    fs::create_directories(dir_);
    const fs::path m = dir_ / kManifest;
    if (fs::exists(m)) {
      try {
        manifest_ = io::read_manifest(m);
      } catch (const DataError&) {
        manifest_ = {};
      }
    }
    manifest_.seed = config.seed;
    manifest_.config_json = config.snapshot();
  }

  const ConceptTask& task() const { return task_; }
  const TeacherEnsemble& ensemble() const { return ensemble_; }
  const fs::path& dir() const { return dir_; }

  /// Hash of a stage's config slice plus the artifact hashes it consumes.
  std::string input_hash(const std::string& stage, const std::string& slice,
                         const std::vector<std::string>& upstream) const {
    std::string text = stage + "\n" + std::to_string(config_.seed) + "\n" + slice + "\n";
    for (const auto& u : upstream) {
      const io::StageRecord* s = manifest_.find_stage(u);
      if (!s) throw MissingStageArtifact("stage '" + stage + "' needs stage '" + u + "'");
      for (const auto& a : s->artifacts) text += a.path + " " + a.sha256 + "\n";
    }
    return io::sha256_hex(text);
  }

  /// True when the manifest already holds this stage with the same inputs and
  /// intact artifacts.
  bool cached(const std::string& stage, const std::string& hash) const {
    const io::StageRecord* s = manifest_.find_stage(stage);
    if (!s || s->input_hash != hash) return false;
    for (const auto& a : s->artifacts) {
      const fs::path p = dir_ / a.path;
      if (!fs::exists(p) || io::sha256_file(p) != a.sha256) return false;
    }
    return true;
  }

  void record(const std::string& stage, const std::string& hash,
              const std::vector<std::string>& artifacts) {
    io::StageRecord s{stage, hash, {}};
    for (const auto& a : artifacts) s.artifacts.push_back({a, io::sha256_file(dir_ / a)});
    manifest_.upsert_stage(std::move(s));
  }

  void save_manifest() {
    std::stable_sort(manifest_.stages.begin(), manifest_.stages.end(),
                     [](const io::StageRecord& a, const io::StageRecord& b) {
                       auto rank = [](const std::string& n) {
                         return std::find(kStageOrder.begin(), kStageOrder.end(), n) -
                                kStageOrder.begin();
                       };
                       return rank(a.name) < rank(b.name);
                     });
    io::write_manifest(manifest_, dir_ / kManifest);
  }

  std::string slice(const char* key) const { return config_json(config_, false)[key].dump(); }

  // -- stages ------------------------------------------------------------------

  std::string generate_hash() const {
    const json j = config_json(config_, false);
    const std::string slice =
        json{{"task", j["task"]}, {"ensemble", j["ensemble"]}, {"corpus", j["corpus"]}}.dump();
    return input_hash("generate", slice, {});
  }

  std::size_t ensure_generate() {
    const auto hash = generate_hash();
    if (cached("generate", hash)) return io::read_corpus(dir_ / kCorpus).size();
    const auto corpus = generate_corpus(ensemble_, task_.stream(), config_.per_context,
                                        config_.max_len, config_.threads);
    io::write_corpus(corpus, dir_ / kCorpus);
    io::write_vocab(task_.vocab, dir_ / kVocab);
    record("generate", hash, {kCorpus, kVocab});
    return corpus.size();
  }

  std::string spd_hash() const {
    return input_hash("spd", slice("spd"), {"generate"});
  }

  void ensure_spd() {
    ensure_generate();
    const auto hash = spd_hash();
    if (cached("spd", hash)) return;
    const auto corpus = io::read_corpus(dir_ / kCorpus);
    SpdConfig cfg = config_.spd;
    cfg.seed = derive_seed(config_.seed, {3});
    const auto student = StudentPolicy::uniform(task_.vocab, config_.student_order);

    const std::size_t single = static_cast<std::size_t>(config_.spd_single_teacher);
    const TeacherEnsemble alone = select_teachers(ensemble_, std::span(&single, 1));
    std::vector<TrajectoryRecord> own;
    for (const auto& r : corpus)
      if (r.teacher_id == alone.names.front()) own.push_back(r);
    const SpdResult one = train_spd(student, alone, own, cfg);
    const SpdResult all = train_spd(student, ensemble_, corpus, cfg);

    io::write_checkpoint({one.student.policy(), {{"stage", "spd"}, {"teachers", alone.names.front()}}},
                         dir_ / kSpdSingle);
    io::write_checkpoint({all.student.policy(), {{"stage", "spd"}, {"teachers", "all"}}},
                         dir_ / kSpdMulti);
    std::vector<io::MetricRow> rows;
    for (std::size_t s = 0; s < one.loss_curve.size(); ++s)
      rows.push_back({{"step", static_cast<std::int64_t>(s)},
                      {"single_teacher_loss", one.loss_curve[s]},
                      {"multi_teacher_loss", all.loss_curve[s]}});
    const std::vector<std::string> header{"step", "single_teacher_loss", "multi_teacher_loss"};
    io::export_metrics(rows, dir_ / kSpdLoss, header);
    record("spd", hash, {kSpdSingle, kSpdMulti, kSpdLoss});
  }

  std::string selfdistill_hash() const {
    const json j = config_json(config_, false);
    return input_hash("selfdistill", j["selfdistill"].dump() + j["corpus"].dump(),
                      {"generate", "spd"});
  }

  void ensure_selfdistill() {
    const auto hash = selfdistill_hash();
    if (cached("selfdistill", hash)) return;
    const auto corpus = io::read_corpus(dir_ / kCorpus);
    const StudentPolicy reference =
        StudentPolicy(io::read_checkpoint(dir_ / kSpdMulti).policy).freeze();

    // (context -> teacher index -> replicates) in corpus order.
    std::map<ContextId, std::vector<std::vector<const TrajectoryRecord*>>> by_context;
    std::vector<ContextId> order;
    for (const auto& r : corpus) {
      const auto u = ensemble_.index_of(r.teacher_id);
      if (!u) throw DataError("record '" + r.id + "': unknown teacher '" + r.teacher_id + "'");
      auto [it, fresh] = by_context.try_emplace(r.context, ensemble_.size());
      if (fresh) order.push_back(r.context);
      it->second[*u].push_back(&r);
    }
    const std::uint64_t seed = derive_seed(config_.seed, {4});
    std::vector<PreferenceTuple> tuples;
    for (std::size_t c = 0; c < order.size(); ++c) {
      const auto& per_teacher = by_context.at(order[c]);
      std::size_t reps = std::numeric_limits<std::size_t>::max();
      for (const auto& v : per_teacher) reps = std::min(reps, v.size());
      for (std::size_t r = 0; r < reps; ++r) {
        PreferenceTuple t{order[c], {}, {}, {}};
        for (const auto& v : per_teacher) {
          t.negatives.push_back(v[r]->tokens);
          t.weights.push_back(1.0);
        }
        t.positive = self_distill(reference, order[c], t.negatives, config_.max_len,
                                  derive_seed(seed, {c, r}), config_.selfdistill);
        tuples.push_back(std::move(t));
      }
    }
    io::write_tuples(tuples, dir_ / kTuples);
    record("selfdistill", hash, {kTuples});
  }

  std::string apo_hash() const {
    const json j = config_json(config_, false);
    std::string slice = j["apo"].dump();
    if (config_.negative_weights == NegativeWeights::inverse_drift) slice += j["drift"].dump();
    return input_hash("apo", slice, {"generate", "spd", "selfdistill"});
  }

  std::vector<double> negative_weights() const {
    const std::size_t n = ensemble_.size();
    switch (config_.negative_weights) {
      case NegativeWeights::uniform: return std::vector<double>(n, 1.0);
      case NegativeWeights::supplied: return config_.teacher_weights;
      case NegativeWeights::inverse_drift: {
        const auto corpus = io::read_corpus(dir_ / kCorpus);
        std::int64_t last = 0;
        for (const auto& r : corpus) last = std::max(last, r.corpus_step);
        DriftOptions opt = config_.drift;
        opt.seed = derive_seed(config_.seed, {6});
        opt.threads = config_.threads;
        const auto report = detect_drift(corpus, last + 1, task_.vocab.size(), opt);
        std::vector<double> w(n, 1.0);
        double total = 0;
        for (const auto& t : report.per_teacher) {
          const auto u = ensemble_.index_of(t.teacher);
          if (!u) continue;
          w[*u] = 1.0 / (t.statistic + 1e-3);
        }
        for (double x : w) total += x;
        for (double& x : w) x *= static_cast<double>(n) / total;
        return w;
      }
    }
    return std::vector<double>(n, 1.0);
  }

  void ensure_apo() {
    const auto hash = apo_hash();
    if (cached("apo", hash)) return;
    auto tuples = io::read_tuples(dir_ / kTuples);
    const TabularPolicy reference = io::read_checkpoint(dir_ / kSpdMulti).policy;
    const auto w = negative_weights();
    for (auto& t : tuples) {
      if (t.negatives.size() != w.size())
        throw DataError("preference tuple has " + std::to_string(t.negatives.size()) +
                        " negatives for " + std::to_string(w.size()) + " teachers");
      t.weights = w;
    }
    ApoConfig cfg = config_.apo;
    cfg.seed = derive_seed(config_.seed, {5});
    cfg.weights = WeightsMode::supplied;
    const ApoResult result = train_apo(reference, reference, tuples, cfg);
    io::write_checkpoint({result.policy, {{"stage", "apo"}, {"weights", weights_name(config_.negative_weights)}}},
                         dir_ / kApo);
    std::vector<io::MetricRow> rows;
    for (std::size_t s = 0; s < result.loss_curve.size(); ++s)
      rows.push_back({{"step", static_cast<std::int64_t>(s)}, {"loss", result.loss_curve[s]}});
    const std::vector<std::string> header{"loss", "step"};
    io::export_metrics(rows, dir_ / kApoLoss, header);
    record("apo", hash, {kApo, kApoLoss});
  }

  /// Fails unless `stage` is recorded with inputs matching the current config.
  void require(const std::string& stage, const std::string& hash, const std::string& needed_by) const {
    if (!cached(stage, hash))
      throw MissingStageArtifact("stage '" + needed_by + "' needs the output of stage '" + stage +
                                 "' for this config; add '" + stage + "' to the requested stages");
  }
  bool has(const std::string& stage) const { return manifest_.find_stage(stage) != nullptr; }

 private:
  PipelineConfig config_;
  fs::path dir_;
  ConceptTask task_;
  TeacherEnsemble ensemble_;
  io::RunManifest manifest_;
};

io::MetricRow accuracy_row(const EvalResult& r) {
  io::MetricRow row;
  row["macro_accuracy"] = r.macro;
  for (std::size_t g = 0; g < r.group_accuracy.size(); ++g)
    row["group_" + std::to_string(g) + "_accuracy"] = r.group_accuracy[g];
  return row;
}

}  // namespace

GenerateResult cmd_generate(const PipelineConfig& config) {
  Run run(config);
  GenerateResult out{run.ensure_generate()};
  run.save_manifest();
  return out;
}

DriftReport cmd_detect_drift(const PipelineConfig& config, std::optional<std::int64_t> step) {
  config.validate();
  const fs::path dir = config.run_dir;
  const auto corpus = io::read_corpus(dir / kCorpus);
  const Vocab vocab = io::read_vocab(dir / kVocab);
  std::int64_t at = 0;
  for (const auto& r : corpus) at = std::max(at, r.corpus_step + 1);
  if (step) at = *step;
  DriftOptions opt = config.drift;
  opt.seed = derive_seed(config.seed, {6});
  opt.threads = config.threads;
  const DriftReport report = detect_drift(corpus, at, vocab.size(), opt);

  std::vector<io::MetricRow> rows;
  for (const auto& t : report.per_teacher)
    rows.push_back({{"teacher", t.teacher},
                    {"statistic", t.statistic},
                    {"threshold", t.threshold},
                    {"flagged", static_cast<std::int64_t>(t.flagged)},
                    {"unmatched_mass", t.unmatched_mass},
                    {"step", report.step}});
  rows.push_back({{"teacher", std::string("joint")},
                  {"statistic", report.joint_statistic},
                  {"threshold", report.joint_threshold},
                  {"flagged", static_cast<std::int64_t>(report.joint_flagged)},
                  {"unmatched_mass", 0.0},
                  {"step", report.step}});
  io::export_metrics(rows, dir / "drift.csv");
  return report;
}

std::optional<Stage> parse_stage(std::string_view name) {
  if (name == "spd") return Stage::spd;
  if (name == "selfdistill") return Stage::selfdistill;
  if (name == "apo") return Stage::apo;
  return std::nullopt;
}

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::spd: return "spd";
    case Stage::selfdistill: return "selfdistill";
    case Stage::apo: return "apo";
  }
  return "";
}

std::vector<io::MetricRow> cmd_pipeline(const PipelineConfig& config, const std::set<Stage>& stages) {
  if (stages.empty()) throw ConfigError("pipeline: no stages requested");
  Run run(config);
  run.ensure_generate();

  const bool want_spd = stages.count(Stage::spd) > 0;
  const bool want_sd = stages.count(Stage::selfdistill) > 0;
  const bool want_apo = stages.count(Stage::apo) > 0;

  if (want_spd) run.ensure_spd();
  if (want_sd || want_apo) {
    if (!want_spd) run.require("spd", run.spd_hash(), want_sd ? "selfdistill" : "apo");
    if (want_sd) run.ensure_selfdistill();
  }
  if (want_apo) {
    if (!want_sd) run.require("selfdistill", run.selfdistill_hash(), "apo");
    run.ensure_apo();
  }

  const auto& task = run.task();
  std::vector<io::MetricRow> rows;
  auto add_row = [&](const char* name, Stage stage, const char* checkpoint) {
    const auto policy = io::read_checkpoint(run.dir() / checkpoint).policy;
    auto row = accuracy_row(evaluate_policy(task, policy));
    row["row"] = std::string(name);
    row["stage"] = stage_name(stage);
    row["seed"] = static_cast<std::int64_t>(config.seed);
    rows.push_back(std::move(row));
  };
  if (want_spd) add_row("SPD", Stage::spd, kSpdSingle);
  if (want_sd) add_row("SPD+MT", Stage::selfdistill, kSpdMulti);
  if (want_apo) add_row("SPD+MT+APO", Stage::apo, kApo);

  std::vector<io::MetricRow> teacher_rows;
  for (std::size_t u = 0; u < run.ensemble().size(); ++u) {
    auto row = accuracy_row(evaluate_teacher(task, run.ensemble(), u));
    row["teacher"] = run.ensemble().names[u];
    row["seed"] = static_cast<std::int64_t>(config.seed);
    teacher_rows.push_back(std::move(row));
  }
  io::export_metrics(rows, run.dir() / "ablation.csv");
  io::export_metrics(teacher_rows, run.dir() / "teachers.csv");

  std::string requested;
  for (Stage s : stages) requested += stage_name(s) + ",";
  std::vector<std::string> upstream{"generate"};
  for (const char* s : {"spd", "selfdistill", "apo"})
    if (run.has(s)) upstream.emplace_back(s);
  run.record("report", run.input_hash("report", requested, upstream), {"ablation.csv", "teachers.csv"});
  run.save_manifest();
  return rows;
}

std::vector<io::MetricRow> cmd_eval(const PipelineConfig& config, const fs::path& checkpoint) {
  config.validate();
  const ConceptTask task = make_task(config.task_spec());
  const auto policy = io::read_checkpoint(checkpoint).policy;
  const EvalResult r = evaluate_policy(task, policy);
  std::vector<io::MetricRow> rows;
  int total = 0;
  for (std::size_t g = 0; g < r.group_accuracy.size(); ++g) {
    rows.push_back({{"group", std::to_string(g)},
                    {"accuracy", r.group_accuracy[g]},
                    {"contexts", static_cast<std::int64_t>(r.group_size[g])}});
    total += r.group_size[g];
  }
  rows.push_back({{"group", std::string("macro")},
                  {"accuracy", r.macro},
                  {"contexts", static_cast<std::int64_t>(total)}});
  return rows;
}

std::size_t cmd_export(const fs::path& checkpoint, const fs::path& out) {
  const auto policy = io::read_checkpoint(checkpoint).policy;
  std::vector<io::MetricRow> rows;
  for (Eigen::Index r = 0; r < policy.rows(); ++r) {
    const auto& key = policy.keys()[static_cast<std::size_t>(r)];
    std::string history;
    for (Token t : key.history)
      history += (history.empty() ? "" : " ") + (t == kNoToken ? std::string("_") : policy.vocab().symbol(t));
    const Categorical z = policy.row_distribution(key);
    for (Eigen::Index t = 0; t < policy.vocab_size(); ++t)
      rows.push_back({{"context", key.context.render()},
                      {"history", history},
                      {"token", policy.vocab().symbol(static_cast<Token>(t))},
                      {"logit", policy.table()(r, t)},
                      {"prob", z.prob(static_cast<Token>(t))}});
  }
  const std::vector<std::string> header{"context", "history", "logit", "prob", "token"};
  io::export_metrics(rows, out, header);
  return rows.size();
}

}  // namespace mtkd
