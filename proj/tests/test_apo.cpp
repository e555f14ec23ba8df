#include "mtkd/apo.hpp"
#include "apo_instances.hpp"

#include <doctest.h>

using namespace mtkd;

namespace {

const double kInf = std::numeric_limits<double>::infinity();

PreferenceTuple tuple(std::vector<Token> pos, std::vector<std::vector<Token>> negs,
                      std::vector<double> w = {}) {
  if (w.empty()) w.assign(negs.size(), 1.0);
  return PreferenceTuple{ContextId{0}, std::move(pos), std::move(negs), std::move(w)};
}

}  // namespace

TEST_CASE("reward hand values") {
  const TabularPolicy ref(oracle::vocab_of(3), 1);  // uniform: log p = -ln 3
  TabularPolicy theta(oracle::vocab_of(3), 1);
  // p(0) = e/3 makes log p_theta(0) - log p_ref(0) = 1.
  const double a = std::log(2 * std::exp(1.0) / (3 - std::exp(1.0)));
  theta.set_logits(theta.key(ContextId{0}, {}), Eigen::Vector3d(a, 0, 0));
  const std::vector<Token> t{0};
  CHECK(reward(ref, ref, ContextId{0}, t, 0.1) == 0.0);
  CHECK(reward(theta, ref, ContextId{0}, t, 2.0) == doctest::Approx(2.0).epsilon(1e-13));
  CHECK(reward(theta, ref, ContextId{0}, t, 4.0) == doctest::Approx(2 * reward(theta, ref, ContextId{0}, t, 2.0)));
  TabularPolicy zero(oracle::vocab_of(3), 1);
  zero.set_default_logits(Eigen::Vector3d(-kInf, 0, 0));
  CHECK_THROWS_AS(reward(zero, ref, ContextId{0}, t, 1.0), ZeroProbabilityToken);
}

TEST_CASE("preference probability hand values") {
  const TabularPolicy ref(oracle::vocab_of(3), 1);
  const auto p3 = tuple({0}, {{1}, {2}, {0, 1}});
  CHECK(preference_probability(p3, ref, ref, {}) == doctest::Approx(0.25).epsilon(1e-15));

  // theta = (2/3, 1/3, 0): r+ = ln 2 for t+ = [0], r1 = 0 for [1] at beta 1.
  TabularPolicy theta(oracle::vocab_of(3), 1);
  theta.set_default_logits(Eigen::Vector3d(std::log(2.0), 0, -kInf));
  const auto t = tuple({0}, {{1}});
  CHECK(preference_probability(t, theta, ref, {1.0}) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("N = 1 reduces to the two-option preference loss") {
  oracle::Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const int v = std::array{2, 3, 5}[static_cast<std::size_t>(trial % 3)];
    const double beta = std::array{0.05, 0.1, 1.0}[static_cast<std::size_t>(trial % 3)];
    auto inst = oracle::random_apo_instance(rng, v, 1, beta, 1);
    auto& t = inst.batch[0];
    t.weights = {1.0};
    const double loss = apo_loss(inst.batch, inst.theta, inst.ref, {beta});
    const double two = oracle::two_option_loss(inst.theta, inst.ref, t.context, t.positive, t.negatives[0], beta);
    CHECK(std::abs(loss - two) <= 1e-12);
    const double r = reward(inst.theta, inst.ref, t.context, t.positive, beta) -
                     reward(inst.theta, inst.ref, t.context, t.negatives[0], beta);
    CHECK(std::abs(preference_probability(t, inst.theta, inst.ref, {beta}) - 1 / (1 + std::exp(-r))) <= 1e-12);
  }
}

TEST_CASE("loss at the reference policy is ln(1 + Sum w)") {
  const TabularPolicy ref(oracle::vocab_of(4), 2);
  const std::vector<PreferenceTuple> one = {tuple({0, 1}, {{2}})};
  CHECK(apo_loss(one, ref, ref, {}) == std::log(2.0));
  const std::vector<PreferenceTuple> three = {tuple({0}, {{1}, {2}, {0, 0}})};
  CHECK(apo_loss(three, ref, ref, {}) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  const std::vector<PreferenceTuple> weighted = {tuple({0}, {{1}, {2}}, {0.3, 2.2})};
  CHECK(apo_loss(weighted, ref, ref, {}) == doctest::Approx(std::log(1 + 2.5)).epsilon(1e-15));
}

TEST_CASE("loss matches the ratio-form oracle") {
  oracle::Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto inst = oracle::random_apo_instance(rng, 3, 2, 0.5, 1);
    const double loss = apo_loss(inst.batch, inst.theta, inst.ref, {inst.beta});
    CHECK(std::abs(loss - oracle::expanded_loss(inst.batch[0], inst.theta, inst.ref, inst.beta)) <= 1e-12);
    CHECK(std::abs(loss - apo_loss_expanded(inst.batch, inst.theta, inst.ref, {inst.beta})) <= 1e-12);
    CHECK(loss > 0);
  }
}

TEST_CASE("zero-weight negatives and permutations change nothing") {
  oracle::Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    auto inst = oracle::random_apo_instance(rng, 5, 3, 0.1, 1);
    const ApoOptions opt{inst.beta};
    const double p = preference_probability(inst.batch[0], inst.theta, inst.ref, opt);
    const double l = apo_loss(inst.batch, inst.theta, inst.ref, opt);
    const Eigen::MatrixXd g = apo_grad(inst.batch, inst.theta, inst.ref, opt);

    auto padded = inst.batch;
    padded[0].negatives.insert(padded[0].negatives.begin() + 1, inst.batch[0].negatives[0]);
    padded[0].weights.insert(padded[0].weights.begin() + 1, 0.0);
    padded[0].negatives.push_back(oracle::random_sequence(rng, 5, 2));
    padded[0].weights.push_back(0.0);
    TabularPolicy theta = inst.theta;
    materialize_rows(theta, padded);  // new rows only; existing rows keep their index
    CHECK(preference_probability(padded[0], theta, inst.ref, opt) == p);
    CHECK(apo_loss(padded, theta, inst.ref, opt) == l);
    CHECK(apo_grad(padded, theta, inst.ref, opt).topRows(g.rows()) == g);
    if (theta.rows() > g.rows())
      CHECK(apo_grad(padded, theta, inst.ref, opt).bottomRows(theta.rows() - g.rows()).isZero(0.0));

    auto shuffled = inst.batch;
    std::vector<std::size_t> perm{2, 0, 1};
    for (std::size_t i = 0; i < 3; ++i) {
      shuffled[0].negatives[i] = inst.batch[0].negatives[perm[i]];
      shuffled[0].weights[i] = inst.batch[0].weights[perm[i]];
    }
    CHECK(preference_probability(shuffled[0], inst.theta, inst.ref, opt) == p);
    CHECK(apo_loss(shuffled, inst.theta, inst.ref, opt) == l);
    CHECK(apo_grad(shuffled, inst.theta, inst.ref, opt) == g);
  }
}

TEST_CASE("preference moves with log pi(t+) and against log pi(t^u)") {
  const TabularPolicy ref(oracle::vocab_of(4), 1);
  TabularPolicy theta = ref;
  // Row [0] is visited only by t+, row [1] only by the negative.
  const PreferenceTuple t = tuple({0, 0}, {{1, 1}});
  const std::vector<PreferenceTuple> batch{t};
  materialize_rows(theta, batch);
  const auto row_pos = *theta.find_row(theta.key(ContextId{0}, std::vector<Token>{0}));
  const auto row_neg = *theta.find_row(theta.key(ContextId{0}, std::vector<Token>{1}));
  double last = preference_probability(t, theta, ref, {});
  for (int k = 0; k < 5; ++k) {
    theta.table()(row_pos, 0) += 0.5;
    const double now = preference_probability(t, theta, ref, {});
    CHECK(now > last);
    last = now;
  }
  for (int k = 0; k < 5; ++k) {
    theta.table()(row_neg, 1) += 0.5;
    const double now = preference_probability(t, theta, ref, {});
    CHECK(now < last);
    last = now;
  }
}

TEST_CASE("apo_grad matches central finite differences") {
  oracle::Rng rng(77);
  const int vs[] = {2, 3, 5};
  const int ns[] = {1, 2, 3, 5};
  const double betas[] = {0.05, 0.1, 1.0};
  for (int trial = 0; trial < 36; ++trial) {
    const int v = vs[trial % 3];
    const int n = ns[(trial / 3) % 4];
    const double beta = betas[(trial / 12) % 3];
    for (bool normalized : {false, true}) {
      auto inst = oracle::random_apo_instance(rng, v, n, beta);
      const ApoOptions opt{beta, normalized};
      const Eigen::MatrixXd g = apo_grad(inst.batch, inst.theta, inst.ref, opt);
      const Eigen::MatrixXd fd = oracle::finite_difference(
          inst.theta.table(), [&] { return apo_loss(inst.batch, inst.theta, inst.ref, opt); });
      CHECK(oracle::max_relative_error(g, fd) < 1e-5);
    }
  }
}

TEST_CASE("gradient vanishes exactly at the symmetric point") {
  oracle::Rng rng(3);
  TabularPolicy ref(oracle::vocab_of(5), 2);
  ref.set_default_logits(oracle::random_logits(rng, 5));
  for (double w : {1.0, 0.25, 7.0}) {
    const std::vector<PreferenceTuple> batch{tuple({0, 1, 2}, {{0, 1, 2}}, {w})};
    TabularPolicy theta = ref;
    materialize_rows(theta, batch);
    CHECK(apo_grad(batch, theta, ref, {}).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("training: no-op, margin growth, loss decrease, divergence") {
  oracle::Rng rng(6);
  TabularPolicy ref(oracle::vocab_of(5), 1);
  ref.set_default_logits(oracle::random_logits(rng, 5));
  const std::vector<PreferenceTuple> single{tuple({0, 1}, {{2, 1}})};

  const auto none = train_apo(ref, ref, single, ApoConfig{.steps = 0});
  CHECK(none.policy == ref);
  CHECK(none.loss_curve.empty());

  const auto trained = train_apo(ref, ref, single, ApoConfig{});
  const auto margin = [&](const TabularPolicy& p) {
    return reward(p, ref, ContextId{0}, single[0].positive, 0.1) -
           reward(p, ref, ContextId{0}, single[0].negatives[0], 0.1);
  };
  CHECK(margin(trained.policy) > margin(ref));
  CHECK(trained.loss_curve.back() < trained.loss_curve.front());
  CHECK(train_apo(ref, ref, single, ApoConfig{}).policy == trained.policy);

  auto inst = oracle::random_apo_instance(rng, 5, 3, 0.1, 6);
  const auto r = train_apo(inst.theta, inst.ref, inst.batch, ApoConfig{.weights = WeightsMode::supplied});
  for (std::size_t i = 1; i < r.loss_curve.size(); ++i) CHECK(r.loss_curve[i] <= r.loss_curve[i - 1]);

  // Two copies of one preference against one reversed copy: a huge step
  // overshoots far past the balance point.
  const std::vector<PreferenceTuple> conflict{tuple({0}, {{1}}), tuple({0}, {{1}}), tuple({1}, {{0}})};
  CHECK_THROWS_AS(train_apo(ref, ref, conflict, ApoConfig{.lr = 1e5}), DivergenceDetected);
  CHECK_THROWS_AS(train_apo(ref, ref, conflict, ApoConfig{.beta = 0}), InvalidArgument);
}

TEST_CASE("tuple validation") {
  CHECK_THROWS_AS(tuple({}, {{1}}).validate(), InvalidArgument);
  CHECK_THROWS_AS(tuple({0}, {}).validate(), InvalidArgument);
  CHECK_THROWS_AS(tuple({0}, {{1}}, {0.0}).validate(), InvalidArgument);
  CHECK_THROWS_AS(tuple({0}, {{1}, {2}}, {1.0}).validate(), InvalidArgument);
  CHECK_THROWS_AS(tuple({0}, {{1}}, {-1.0}).validate(), InvalidArgument);
  CHECK_NOTHROW(tuple({0}, {{1}, {2}}, {0.0, 1.0}).validate());
}
