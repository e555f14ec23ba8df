#include "mtkd/drift.hpp"
#include "oracles.hpp"

#include <doctest.h>

using namespace mtkd;

namespace {

TrajectoryRecord rec(std::string teacher, int ctx, std::vector<Token> tokens, std::int64_t step) {
  TrajectoryRecord r;
  r.id = teacher + "/" + std::to_string(step);
  r.context = ContextId{ctx};
  r.teacher_id = std::move(teacher);
  r.tokens = std::move(tokens);
  r.corpus_step = step;
  return r;
}

/// Records at steps [from, from + n) whose tokens are drawn from `p`, cycling over 4 contexts.
void append_stream(std::vector<TrajectoryRecord>& out, oracle::Rng& rng, const std::string& teacher,
                   const std::vector<double>& p, std::int64_t from, int n) {
  std::discrete_distribution<int> d(p.begin(), p.end());
  for (int i = 0; i < n; ++i) {
    std::vector<Token> t;
    for (int j = 0; j < 3; ++j) t.push_back(d(rng));
    out.push_back(rec(teacher, static_cast<int>((from + i) % 4), std::move(t), from + i));
  }
}

}  // namespace

TEST_CASE("identical windows have zero divergence") {
  const std::vector<TrajectoryRecord> r = {rec("a", 0, {0, 1}, 0), rec("a", 1, {2}, 1)};
  const StreamWindow w("a", r, 3);
  CHECK(stream_divergence(w, w) == 0.0);
}

TEST_CASE("bucket statistic is the symmetric KL of smoothed counts") {
  const std::vector<TrajectoryRecord> ra = {rec("a", 0, {0, 0}, 0), rec("a", 5, {1}, 1)};
  const std::vector<TrajectoryRecord> rb = {rec("a", 0, {1}, 2)};
  const StreamWindow a("a", ra, 2), b("a", rb, 2);
  const oracle::Vec p = {2.5 / 3, 0.5 / 3};
  const oracle::Vec q = {0.5 / 2, 1.5 / 2};
  const auto d = stream_divergence_detail(a, b, 0.5);
  CHECK(d.shared_contexts == 1);
  CHECK(d.statistic == doctest::Approx(oracle::kl(p, q) + oracle::kl(q, p)).epsilon(1e-13));
  // Context 5 holds 1 of 4 tokens.
  CHECK(d.unmatched_mass == doctest::Approx(0.25));
  CHECK(a.summary(ContextId{0}, 0.5).prob(0) == doctest::Approx(p[0]));
  CHECK(a.summary(ContextId{9}).prob(1) == doctest::Approx(0.5));
}

TEST_CASE("windows without a shared context are rejected") {
  const std::vector<TrajectoryRecord> ra = {rec("a", 0, {0}, 0)};
  const std::vector<TrajectoryRecord> rb = {rec("a", 1, {0}, 1)};
  CHECK_THROWS_AS(stream_divergence(StreamWindow("a", ra, 2), StreamWindow("a", rb, 2)), NoSharedContexts);
}

TEST_CASE("out-of-vocabulary tokens are data errors") {
  const std::vector<TrajectoryRecord> r = {rec("a", 0, {7}, 0)};
  CHECK_THROWS_AS(StreamWindow("a", r, 3), DataError);
}

TEST_CASE("permutation_threshold picks the ceil((1 - level) P)-th order statistic") {
  std::vector<double> reps;
  for (int i = 100; i >= 1; --i) reps.push_back(i);
  CHECK(permutation_threshold(reps, 0.05) == 95);
  CHECK(permutation_threshold(reps, 0.01) == 99);
  CHECK(permutation_threshold({3.0, 1.0, 2.0}, 0.5) == 2.0);
  CHECK(permutation_threshold({3.0, 1.0, 2.0}, 0.999) == 1.0);
  CHECK_THROWS_AS(permutation_threshold({}, 0.05), InvalidArgument);
}

TEST_CASE("detect_drift needs 2W records per teacher before the step") {
  oracle::Rng rng(1);
  std::vector<TrajectoryRecord> h;
  append_stream(h, rng, "a", {0.5, 0.5, 0}, 0, 30);
  DriftOptions o;
  o.window = 10;
  o.permutations = 100;
  CHECK_NOTHROW(detect_drift(h, 30, 3, o));
  CHECK_THROWS_AS(detect_drift(h, 19, 3, o), InsufficientHistory);
  CHECK_THROWS_AS(detect_drift({}, 5, 3, o), InsufficientHistory);
  o.permutations = 10;
  CHECK_THROWS_AS(detect_drift(h, 30, 3, o), InvalidArgument);
}

TEST_CASE("a single teacher's joint test equals its own test") {
  oracle::Rng rng(2);
  std::vector<TrajectoryRecord> h;
  append_stream(h, rng, "a", {0.2, 0.3, 0.5}, 0, 100);
  DriftOptions o;
  o.window = 50;
  o.permutations = 200;
  const auto r = detect_drift(h, 100, 3, o);
  REQUIRE(r.per_teacher.size() == 1);
  CHECK(r.joint_statistic == r.per_teacher[0].statistic);
  CHECK(r.joint_threshold == r.per_teacher[0].threshold);
  CHECK(r.joint_flagged == r.per_teacher[0].flagged);
}

TEST_CASE("a strong shift is flagged and does not depend on thread count") {
  oracle::Rng rng(3);
  std::vector<TrajectoryRecord> h;
  append_stream(h, rng, "steady", {0.4, 0.3, 0.3}, 0, 200);
  append_stream(h, rng, "shifting", {0.8, 0.1, 0.1}, 0, 100);
  append_stream(h, rng, "shifting", {0.1, 0.1, 0.8}, 100, 100);
  DriftOptions o;
  o.window = 100;
  o.permutations = 300;
  const auto r = detect_drift(h, 200, 3, o);
  REQUIRE(r.per_teacher.size() == 2);
  CHECK(r.per_teacher[0].teacher == "shifting");
  CHECK(r.per_teacher[0].flagged);
  CHECK(r.joint_flagged);
  CHECK(r.per_teacher[0].statistic > 10 * r.per_teacher[1].statistic);

  o.threads = 3;
  const auto t = detect_drift(h, 200, 3, o);
  CHECK(t.per_teacher[0].threshold == r.per_teacher[0].threshold);
  CHECK(t.joint_threshold == r.joint_threshold);
}

TEST_CASE("false alarm rate under no drift stays near alpha") {
  int flags = 0;
  constexpr int kTrials = 40;
  for (int trial = 0; trial < kTrials; ++trial) {
    oracle::Rng rng(static_cast<std::uint64_t>(100 + trial));
    std::vector<TrajectoryRecord> h;
    append_stream(h, rng, "a", {0.5, 0.3, 0.2}, 0, 100);
    DriftOptions o;
    o.window = 50;
    o.permutations = 200;
    o.seed = static_cast<std::uint64_t>(trial);
    flags += detect_drift(h, 100, 3, o).joint_flagged ? 1 : 0;
  }
  // Binomial(40, 0.05) exceeds 6 with probability about 0.004.
  CHECK(flags <= 6);
}

TEST_CASE("a designed symmetric-KL 0.8 shift is measured at close to its size") {
  // p = (a, 1 - a), q = (1 - a, a) has symmetric KL 2 (2a - 1) ln(a / (1 - a)); solve for 0.8.
  double lo = 0.5, hi = 0.99;
  for (int i = 0; i < 200; ++i) {
    const double a = 0.5 * (lo + hi);
    (2 * (2 * a - 1) * std::log(a / (1 - a)) < 0.8 ? lo : hi) = a;
  }
  const double a = lo;
  REQUIRE(oracle::kl({a, 1 - a}, {1 - a, a}) + oracle::kl({1 - a, a}, {a, 1 - a}) == doctest::Approx(0.8));

  // Sampling noise by the delta method: each of the 4 buckets sees n = 375 tokens per
  // window, and dJ/dp_hat = dJ/dq_hat in magnitude = ln(p/q) + (p - q) / (p (1 - p)).
  const double n = 500 * 3 / 4.0;
  const double grad = 2 * std::log(a / (1 - a)) + (2 * a - 1) / (a * (1 - a));
  const double sd = std::sqrt(2 * grad * grad * a * (1 - a) / n / 4);
  const double eps = 3 * sd / 0.8;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    oracle::Rng rng(seed);
    std::vector<TrajectoryRecord> before, after;
    append_stream(before, rng, "a", {a, 1 - a}, 0, 500);
    append_stream(after, rng, "a", {1 - a, a}, 500, 500);
    const double s = stream_divergence(StreamWindow("a", before, 2), StreamWindow("a", after, 2));
    CHECK(s >= 0.8 * (1 - eps));
    CHECK(s <= 0.8 * (1 + eps));
  }
}
