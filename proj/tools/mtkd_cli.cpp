// mtkd: generate teacher corpora, test them for drift, run the distillation
// pipeline and evaluate or export checkpoints.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.

#include "mtkd/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kDivergence = 4 };

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

void print_rows(const std::vector<mtkd::io::MetricRow>& rows) {
  std::cout << mtkd::io::render_metrics(rows);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-teacher distillation with drift detection and preference optimization"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::string run_dir;
  int threads = 1;
  auto* o_config = app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  auto* o_seed = app.add_option("--seed", seed, "Base seed");
  auto* o_run_dir = app.add_option("--run-dir", run_dir, "Directory for all artifacts");
  auto* o_threads = app.add_option("--threads", threads, "Worker threads");
  bool dump_config = false;
  app.add_flag("--dump-config", dump_config, "Print the effective config and exit");

  auto* gen = app.add_subcommand("generate", "Sample a teacher corpus");
  int teachers = 0, contexts = 0, per_context = 0;
  auto* o_teachers = gen->add_option("--teachers", teachers, "Number of teachers");
  auto* o_contexts = gen->add_option("--contexts", contexts, "Number of contexts");
  auto* o_per = gen->add_option("--per-context", per_context, "Trajectories per teacher and context");

  auto* drift = app.add_subcommand("detect-drift", "Windowed drift test over the run's corpus");
  std::int64_t step = 0;
  int window = 0, permutations = 0;
  double alpha = 0;
  auto* o_step = drift->add_option("--step", step, "Test step (default: after the last record)");
  auto* o_window = drift->add_option("--window", window, "Records per window");
  auto* o_perms = drift->add_option("--permutations", permutations, "Permutation replicates");
  auto* o_alpha = drift->add_option("--alpha", alpha, "Test level");

  auto* pipe = app.add_subcommand("pipeline", "Run distillation stages and emit the ablation table");
  std::string stages_arg = "spd,selfdistill,apo";
  double subsample = 1.0;
  std::string weights;
  pipe->add_option("--stages", stages_arg, "Comma-separated subset of spd,selfdistill,apo");
  auto* o_sub = pipe->add_option("--subsample-fraction", subsample,
                                 "Uniform random fraction of SPD alignment points kept");
  auto* o_weights = pipe->add_option("--weights", weights, "Negative weights: uniform|supplied|inverse_drift");

  auto* eval = app.add_subcommand("eval", "Accuracy of a checkpoint on the configured task");
  std::string eval_ckpt, eval_out;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--out", eval_out, "Also write the rows to this CSV");

  auto* exp = app.add_subcommand("export", "Dump a checkpoint's logit table as CSV");
  std::string exp_ckpt, exp_out;
  exp->add_option("--checkpoint", exp_ckpt, "Checkpoint file")->required();
  exp->add_option("--out", exp_out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    mtkd::PipelineConfig config;
    if (*o_config) config = mtkd::config_from_json(mtkd::io::read_file(config_path));
    if (*o_seed) config.seed = seed;
    if (*o_run_dir) config.run_dir = run_dir;
    if (*o_threads) config.threads = threads;
    if (*o_teachers) config.ensemble.teachers = teachers;
    if (*o_contexts) config.task.contexts = contexts;
    if (*o_per) config.per_context = per_context;
    if (*o_window) config.drift.window = window;
    if (*o_perms) config.drift.permutations = permutations;
    if (*o_alpha) config.drift.alpha = alpha;
    if (*o_sub) config.spd.subsample_fraction = subsample;
    if (*o_weights) {
      std::string wrapped = R"({"apo":{"weights":")" + weights + R"("}})";
      config.negative_weights = mtkd::config_from_json(wrapped).negative_weights;
    }
    if (dump_config) {
      std::cout << mtkd::config_to_json(config);
      return kOk;
    }
    config.validate();

    if (*gen) {
      const auto r = mtkd::cmd_generate(config);
      std::cout << "wrote " << r.records << " records to " << (config.run_dir / "corpus.jsonl").string()
                << "\n";
    } else if (*drift) {
      const auto report = mtkd::cmd_detect_drift(config, *o_step ? std::optional(step) : std::nullopt);
      for (const auto& t : report.per_teacher)
        std::cout << t.teacher << " statistic=" << t.statistic << " threshold=" << t.threshold
                  << (t.flagged ? " DRIFT" : "") << "\n";
      std::cout << "joint statistic=" << report.joint_statistic
                << " threshold=" << report.joint_threshold << (report.joint_flagged ? " DRIFT" : "")
                << "\n";
    } else if (*pipe) {
      std::set<mtkd::Stage> stages;
      for (const auto& name : split(stages_arg, ',')) {
        const auto s = mtkd::parse_stage(name);
        if (!s) throw mtkd::ConfigError("unknown stage '" + name + "' (expected spd, selfdistill, apo)");
        stages.insert(*s);
      }
      print_rows(mtkd::cmd_pipeline(config, stages));
    } else if (*eval) {
      const auto rows = mtkd::cmd_eval(config, eval_ckpt);
      if (!eval_out.empty()) mtkd::io::export_metrics(rows, eval_out);
      print_rows(rows);
    } else if (*exp) {
      std::cout << "wrote " << mtkd::cmd_export(exp_ckpt, exp_out) << " rows to " << exp_out << "\n";
    }
    return kOk;
  } catch (const mtkd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const mtkd::DivergenceDetected& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const mtkd::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const mtkd::MissingStageArtifact& e) {
    std::cerr << "missing stage artifact: " << e.what() << "\n";
    return kData;
  } catch (const mtkd::io::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
