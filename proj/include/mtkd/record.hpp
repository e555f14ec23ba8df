#pragma once

#include "mtkd/core.hpp"

#include <map>

namespace mtkd {

/// One teacher trajectory as stored on disk. Shape-compatible with the
/// per-teacher report rows of multi-teacher chest X-ray corpora: model names,
/// label lists and report text ride along in `meta`.
struct TrajectoryRecord {
  std::string id;
  ContextId context;
  std::string teacher_id;
  std::vector<Token> tokens;
  std::optional<std::vector<double>> step_logprobs;
  std::int64_t corpus_step = 0;
  std::map<std::string, std::string> meta;

  /// Throws DataError when tokens are empty or log-probs are misshapen.
  void validate() const;

  bool operator==(const TrajectoryRecord&) const = default;
};

}  // namespace mtkd
