#pragma once

#include "mtkd/apo.hpp"
#include "mtkd/distill.hpp"
#include "mtkd/drift.hpp"
#include "mtkd/io.hpp"
#include "mtkd/task.hpp"

#include <set>

namespace mtkd {

/// Invalid configuration; the message names the offending field path.
struct ConfigError : Error {
  using Error::Error;
};
struct MissingStageArtifact : Error {
  using Error::Error;
};

enum class NegativeWeights {
  uniform,
  /// `apo.teacher_weights`, one per teacher.
  supplied,
  /// w_u proportional to 1 / (drift statistic of teacher u + 1e-3), mean 1.
  inverse_drift,
};

/// Everything a run needs. Every field has a default; `from_json` accepts a
/// partial object and rejects unknown keys.
struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path run_dir = "run";
  int threads = 1;

  TaskSpec task;
  EnsembleSpec ensemble;

  int per_context = 5;
  int max_len = 8;

  DriftOptions drift;

  /// Losses are means over hundreds of alignment points or tuples, so the
  /// pipeline's step sizes are far larger than the module defaults.
  SpdConfig spd{.steps = 200, .lr = 100.0};
  /// Teacher distilled alone for the single-teacher row.
  int spd_single_teacher = 0;
  int student_order = 2;

  SelfDistillOptions selfdistill{64, DecodeMode::greedy};

  ApoConfig apo{.lr = 1000.0};
  NegativeWeights negative_weights = NegativeWeights::uniform;
  std::vector<double> teacher_weights;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  /// Full config with derived per-stage seeds filled in.
  TaskSpec task_spec() const;
  EnsembleSpec ensemble_spec() const;

  /// Canonical JSON of every output-affecting field (run_dir and threads excluded).
  std::string snapshot() const;
};

PipelineConfig config_from_json(std::string_view text);
std::string config_to_json(const PipelineConfig& config);

// -- subcommands -----------------------------------------------------------------

struct GenerateResult {
  std::size_t records = 0;
};
/// Writes corpus.jsonl, vocab.json and the manifest under run_dir.
GenerateResult cmd_generate(const PipelineConfig& config);

/// Reads the run's corpus, tests for drift at `step` (default: one past the last
/// corpus step) and writes drift.csv.
DriftReport cmd_detect_drift(const PipelineConfig& config, std::optional<std::int64_t> step = {});

enum class Stage { spd, selfdistill, apo };
std::optional<Stage> parse_stage(std::string_view name);
std::string stage_name(Stage stage);

/// Runs the requested stages (reusing cached artifacts whose inputs are
/// unchanged) and returns one ablation row per requested stage:
/// spd -> "SPD" (single teacher), selfdistill -> "SPD+MT", apo -> "SPD+MT+APO".
/// Also writes ablation.csv and teachers.csv.
std::vector<io::MetricRow> cmd_pipeline(const PipelineConfig& config, const std::set<Stage>& stages);

/// Per-group and macro accuracy of a checkpoint on the configured task.
std::vector<io::MetricRow> cmd_eval(const PipelineConfig& config,
                                    const std::filesystem::path& checkpoint);

/// Dumps a checkpoint's logit table as CSV rows (context, history, token, logit, prob).
std::size_t cmd_export(const std::filesystem::path& checkpoint, const std::filesystem::path& out);

}  // namespace mtkd
