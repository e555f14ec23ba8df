#pragma once

// Random APO instances shared by the unit tests and the acceptance run.

#include "oracles.hpp"

namespace oracle {

struct ApoInstance {
  mtkd::TabularPolicy theta;
  mtkd::TabularPolicy ref;
  std::vector<mtkd::PreferenceTuple> batch;
  double beta = 0.1;
};

inline mtkd::PreferenceTuple random_tuple(Rng& rng, int v, int n, bool zero_weights = false) {
  mtkd::PreferenceTuple t;
  t.context = mtkd::ContextId{uniform_int(rng, 0, 2)};
  t.positive = random_sequence(rng, v, uniform_int(rng, 1, 4));
  for (int u = 0; u < n; ++u) {
    t.negatives.push_back(random_sequence(rng, v, uniform_int(rng, 1, 4)));
    t.weights.push_back(zero_weights && uniform(rng) < 0.3 ? 0.0 : uniform(rng, 0.2, 2.0));
  }
  if (!(std::accumulate(t.weights.begin(), t.weights.end(), 0.0) > 0)) t.weights[0] = 1.0;
  return t;
}

/// theta and ref with random rows on every key the batch visits.
inline ApoInstance random_apo_instance(Rng& rng, int v, int n, double beta, int tuples = 2) {
  const int order = uniform_int(rng, 1, 2);
  ApoInstance inst{mtkd::TabularPolicy(vocab_of(v), order), mtkd::TabularPolicy(vocab_of(v), order), {}, beta};
  for (int i = 0; i < tuples; ++i) inst.batch.push_back(random_tuple(rng, v, n));
  inst.theta.set_default_logits(random_logits(rng, v));
  inst.ref.set_default_logits(random_logits(rng, v));
  mtkd::materialize_rows(inst.theta, inst.batch);
  mtkd::materialize_rows(inst.ref, inst.batch);
  for (Eigen::Index r = 0; r < inst.theta.rows(); ++r) inst.theta.table().row(r) = random_logits(rng, v).transpose();
  for (Eigen::Index r = 0; r < inst.ref.rows(); ++r) inst.ref.table().row(r) = random_logits(rng, v).transpose();
  return inst;
}

/// Max over coordinates of |g - fd| / max(|g|, |fd|, 1e-4). The floor keeps
/// coordinates whose true gradient is ~0 from dividing noise by noise.
inline double max_relative_error(const Eigen::MatrixXd& g, const Eigen::MatrixXd& fd) {
  double worst = 0;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double denom = std::max({std::abs(g(i)), std::abs(fd(i)), 1e-4});
    worst = std::max(worst, std::abs(g(i) - fd(i)) / denom);
  }
  return worst;
}

}  // namespace oracle
