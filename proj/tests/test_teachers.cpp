#include "mtkd/io.hpp"
#include "mtkd/teachers.hpp"
#include "oracles.hpp"

#include <doctest.h>

using namespace mtkd;

namespace {

TeacherEnsemble small_ensemble(int n, std::uint64_t seed = 1) {
  oracle::Rng rng(seed);
  std::vector<TabularPolicy> teachers;
  for (int u = 0; u < n; ++u) {
    TabularPolicy p(Vocab::with_answer_tokens(3), 1);  // a0 a1 a2 <sep> </s>
    p.set_default_logits(oracle::random_logits(rng, p.vocab_size()));
    teachers.push_back(std::move(p));
  }
  return TeacherEnsemble(std::move(teachers), {}, seed);
}

}  // namespace

TEST_CASE("a policy that emits EOS at once yields a one-token stream") {
  const double inf = std::numeric_limits<double>::infinity();
  TabularPolicy p(Vocab::with_answer_tokens(2), 1);
  p.set_default_logits(Eigen::Vector4d(-inf, -inf, -inf, 0));
  const CotStream s = sample_trajectory(p, ContextId{0}, 10, 3);
  CHECK(s.tokens == std::vector<Token>{p.vocab().eos()});
  CHECK(s.states.size() == 1);
  CHECK_NOTHROW(s.validate());
}

TEST_CASE("sampling is deterministic per seed") {
  const auto e = small_ensemble(1);
  const CotStream a = sample_trajectory(e.teachers[0], ContextId{2}, 30, 77);
  const CotStream b = sample_trajectory(e.teachers[0], ContextId{2}, 30, 77);
  CHECK(a.tokens == b.tokens);
  CHECK_NOTHROW(a.validate());
}

TEST_CASE("EOS position under a uniform policy is geometric(1/3)") {
  TabularPolicy p(oracle::vocab_of(3), 1);  // t0, SEP=t1, EOS=t2, uniform rows
  constexpr int kSamples = 10000;
  constexpr int kBins = 11;  // lengths 1..10, then >= 11 pooled
  std::vector<double> observed(kBins, 0);
  for (int i = 0; i < kSamples; ++i) {
    const auto s = sample_trajectory(p, ContextId{0}, 50, static_cast<std::uint64_t>(i));
    const int len = static_cast<int>(s.length());
    REQUIRE((s.tokens.back() == p.vocab().eos() || len == 50));
    observed[static_cast<std::size_t>(std::min(len, kBins) - 1)] += 1;
  }
  double chi2 = 0;
  double tail = 1.0;
  for (int k = 1; k <= kBins; ++k) {
    const double prob = k < kBins ? std::pow(2.0 / 3.0, k - 1) / 3.0 : tail;
    tail -= prob;
    const double expected = prob * kSamples;
    chi2 += (observed[static_cast<std::size_t>(k - 1)] - expected) *
            (observed[static_cast<std::size_t>(k - 1)] - expected) / expected;
  }
  // 0.99 quantile of chi-square with 10 degrees of freedom.
  CHECK(chi2 < 23.209);
}

TEST_CASE("drift schedule steps must strictly increase") {
  DriftEvent a, b;
  a.step = 5;
  b.step = 5;
  CHECK_THROWS_AS(DriftSchedule({a, b}), InvalidArgument);
  b.step = 6;
  b.span = -1;
  CHECK_THROWS_AS(DriftSchedule({a, b}), InvalidArgument);
}

TEST_CASE("apply_drift boundaries and interpolation") {
  TeacherEnsemble base = small_ensemble(2);
  const RowKey key = base.teachers[0].key(ContextId{0}, {});
  const Eigen::VectorXd before = base.teachers[0].logits(key);
  const Eigen::VectorXd target = Eigen::VectorXd::LinSpaced(5, -1, 1);

  SUBCASE("empty schedule leaves the ensemble unchanged") {
    const auto out = apply_drift(base, 100);
    CHECK(out.teachers[0] == base.teachers[0]);
    CHECK(out.teachers[1] == base.teachers[1]);
  }

  SUBCASE("sudden replacement") {
    DriftEvent ev;
    ev.step = 10;
    ev.teacher = 0;
    ev.mode = PerturbationMode::replace;
    ev.rows.emplace(key, target);
    base.schedule = DriftSchedule({ev});
    CHECK(apply_drift(base, 9).teachers[0].logits(key) == before);
    const auto at = apply_drift(base, 10);
    CHECK(at.teachers[0].logits(key) == target);
    CHECK(at.schedule.empty());
    CHECK(at.teachers[1] == base.teachers[1]);
  }

  SUBCASE("gradual additive offset at the midpoint") {
    DriftEvent ev;
    ev.step = 0;
    ev.teacher = 1;
    ev.kind = DriftKind::gradual;
    ev.span = 10;
    const Eigen::VectorXd delta = Eigen::VectorXd::Constant(5, 0.6);
    ev.rows.emplace(key, delta);
    base.schedule = DriftSchedule({ev});
    const Eigen::VectorXd start = base.teachers[1].logits(key);
    const Eigen::VectorXd mid = apply_drift(base, 5).teachers[1].logits(key);
    for (Eigen::Index i = 0; i < 5; ++i) {
      // Linear interpolation recomputed by hand: offset = d * (5 - 0) / 10.
      CHECK(mid(i) == doctest::Approx(start(i) + 0.6 * 5.0 / 10.0).epsilon(1e-15));
    }
    CHECK(apply_drift(base, 30).teachers[1].logits(key) == start + delta);
  }

  SUBCASE("gradual replacement keeps matching infinities") {
    const double inf = std::numeric_limits<double>::infinity();
    base.teachers[0].set_logits(key, (Eigen::VectorXd(5) << 0, 1, -inf, -inf, 2).finished());
    DriftEvent ev;
    ev.step = 0;
    ev.kind = DriftKind::gradual;
    ev.span = 4;
    ev.mode = PerturbationMode::replace;
    ev.rows.emplace(key, (Eigen::VectorXd(5) << 1, 1, -inf, -inf, 0).finished());
    base.schedule = DriftSchedule({ev});
    const Eigen::VectorXd out = apply_drift(base, 1).teachers[0].logits(key);
    CHECK(out(0) == doctest::Approx(0.25));
    CHECK(out(2) == -inf);
    CHECK(out(4) == doctest::Approx(1.5));
  }

  SUBCASE("events naming a missing teacher are rejected") {
    DriftEvent ev;
    ev.teacher = 7;
    base.schedule = DriftSchedule({ev});
    CHECK_THROWS_AS(apply_drift(base, 0), UnknownTeacherIndex);
  }
}

TEST_CASE("select_teachers re-indexes drift events") {
  TeacherEnsemble e = small_ensemble(3);
  DriftEvent a, b;
  a.step = 1;
  a.teacher = 0;
  b.step = 2;
  b.teacher = 2;
  e.schedule = DriftSchedule({a, b});
  const std::size_t pick[] = {2};
  const auto sub = select_teachers(e, pick);
  REQUIRE(sub.size() == 1);
  CHECK(sub.names[0] == "teacher-2");
  REQUIRE(sub.schedule.events().size() == 1);
  CHECK(sub.schedule.events()[0].teacher == 0);
  CHECK(sub.schedule.events()[0].step == 2);
}

TEST_CASE("generate_corpus counts, order and determinism") {
  std::vector<ContextId> ten;
  for (int c = 0; c < 10; ++c) ten.push_back(ContextId{c});

  const auto one = generate_corpus(small_ensemble(1), std::span(ten).first(1), 1, 8);
  CHECK(one.size() == 1);

  const auto e3 = small_ensemble(3);
  const auto corpus = generate_corpus(e3, ten, 2, 8);
  CHECK(corpus.size() == 60);
  CHECK(corpus[0].id == "c0/teacher-0/0");
  CHECK(corpus[1].id == "c0/teacher-0/1");
  CHECK(corpus[2].teacher_id == "teacher-1");
  CHECK(corpus[59].corpus_step == 9);
  for (const auto& r : corpus) {
    CHECK_NOTHROW(r.validate());
    const auto idx = e3.index_of(r.teacher_id);
    REQUIRE(idx);
    const auto& t = e3.teachers[*idx];
    REQUIRE(r.step_logprobs->size() == r.tokens.size());
    for (std::size_t j = 0; j < r.tokens.size(); ++j) {
      const auto key = t.key(r.context, std::span<const Token>(r.tokens).first(j));
      const double expect = static_cast<double>(oracle::log_softmax_at(t.logits(key), t.temperature(), r.tokens[j]));
      CHECK(std::abs((*r.step_logprobs)[j] - expect) <= 1e-12);
    }
  }

  std::string a, b, threaded;
  for (const auto& r : corpus) a += io::serialize_record(r) + "\n";
  for (const auto& r : generate_corpus(e3, ten, 2, 8)) b += io::serialize_record(r) + "\n";
  for (const auto& r : generate_corpus(e3, ten, 2, 8, 4)) threaded += io::serialize_record(r) + "\n";
  CHECK(a == b);
  CHECK(a == threaded);
}

TEST_CASE("a sudden additive event moves a row by its designed total variation") {
  oracle::Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    TeacherEnsemble e = small_ensemble(2, static_cast<std::uint64_t>(trial));
    const RowKey key = e.teachers[1].key(ContextId{0}, {});
    const Eigen::VectorXd before = e.teachers[1].logits(key);
    DriftEvent ev;
    ev.step = 3;
    ev.teacher = 1;
    const Eigen::VectorXd delta = oracle::random_logits(rng, before.size(), 2.0);
    ev.rows.emplace(key, delta);
    e.schedule = DriftSchedule({ev});

    // Designed magnitude: TV between softmax(l) and softmax(l + d), by hand.
    auto probs = [](const Eigen::VectorXd& l) {
      oracle::Vec p;
      long double s = 0;
      for (Eigen::Index i = 0; i < l.size(); ++i) s += std::exp(static_cast<long double>(l(i)));
      for (Eigen::Index i = 0; i < l.size(); ++i) p.push_back(static_cast<double>(std::exp(static_cast<long double>(l(i))) / s));
      return p;
    };
    const auto p = probs(before), q = probs(before + delta);
    double designed = 0;
    for (std::size_t i = 0; i < p.size(); ++i) designed += 0.5 * std::abs(p[i] - q[i]);

    const auto drifted = apply_drift(e, 3);
    const double tv = total_variation(e.teachers[1].row_distribution(key), drifted.teachers[1].row_distribution(key));
    CHECK(std::abs(tv - designed) <= 1e-9);
  }
}

TEST_CASE("teachers with disjoint supports produce distinguishable corpora") {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<TabularPolicy> ts;
  for (int u = 0; u < 2; ++u) {
    TabularPolicy p(Vocab::with_answer_tokens(3), 1);
    Eigen::VectorXd l = Eigen::VectorXd::Constant(5, -inf);
    l(u) = 2.0;
    l(4) = 0.0;  // </s>
    p.set_default_logits(l);
    ts.push_back(std::move(p));
  }
  const TeacherEnsemble e(std::move(ts), {}, 5);
  std::vector<ContextId> ctx;
  for (int c = 0; c < 50; ++c) ctx.push_back(ContextId{c});
  const auto corpus = generate_corpus(e, ctx, 4, 8);

  std::vector<oracle::Vec> unigram(2, oracle::Vec(5, 0.0));
  for (const auto& r : corpus)
    for (Token t : r.tokens) unigram[*e.index_of(r.teacher_id)][static_cast<std::size_t>(t)] += 1;
  double tv = 0;
  for (auto& u : unigram) {
    const double n = std::accumulate(u.begin(), u.end(), 0.0);
    for (auto& x : u) x /= n;
  }
  for (std::size_t i = 0; i < 5; ++i) tv += 0.5 * std::abs(unigram[0][i] - unigram[1][i]);
  CHECK(tv > 0.5);
}
