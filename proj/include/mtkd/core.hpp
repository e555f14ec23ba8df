#pragma once

#include <Eigen/Core>

#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mtkd {

using Token = std::int32_t;

/// Padding marker for key slots that precede the start of a history.
inline constexpr Token kNoToken = -1;

/// Probabilities below this are treated as exact zeros.
inline constexpr double kProbFloor = 1e-300;

inline constexpr double kNormTolerance = 1e-9;

// ---------------------------------------------------------------------------
// Errors. Every library failure derives from Error so the CLI can map the
// whole family onto exit codes.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed input data (bad corpus lines, schema violations, mismatched vocabularies).
struct DataError : Error {
  using Error::Error;
};

struct ZeroProbabilityToken : Error {
  using Error::Error;
};
struct PredictiveMismatch : Error {
  using Error::Error;
};
struct AbsoluteContinuityViolation : Error {
  using Error::Error;
};
struct InvalidArgument : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------

/// Token alphabet. Tokens are indices into `symbols`; SEP and EOS are members.
class Vocab {
 public:
  Vocab(std::vector<std::string> symbols, std::string_view sep, std::string_view eos);

  /// `answers` plain symbols "a0".."a{n-1}" followed by "<sep>" and "</s>".
  static Vocab with_answer_tokens(int answers);

  Eigen::Index size() const { return static_cast<Eigen::Index>(symbols_.size()); }
  Token sep() const { return sep_; }
  Token eos() const { return eos_; }
  bool contains(Token t) const { return t >= 0 && t < static_cast<Token>(symbols_.size()); }
  const std::string& symbol(Token t) const;
  std::optional<Token> find(std::string_view symbol) const;
  const std::vector<std::string>& symbols() const { return symbols_; }

  bool operator==(const Vocab&) const = default;

 private:
  std::vector<std::string> symbols_;
  Token sep_ = 0;
  Token eos_ = 0;
};

/// Discrete stand-in for the conditioning input (image + prompt).
class ContextId {
 public:
  ContextId() = default;
  explicit ContextId(std::vector<Token> tokens);
  ContextId(std::initializer_list<Token> tokens) : ContextId(std::vector<Token>(tokens)) {}

  const std::vector<Token>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }

  /// Space-separated decimal rendering, e.g. "3 7".
  std::string render() const;
  static ContextId parse(std::string_view text);

  auto operator<=>(const ContextId&) const = default;

 private:
  std::vector<Token> tokens_;
};

// ---------------------------------------------------------------------------
// Expression-friendly numerics.

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  const auto ninf = -std::numeric_limits<Scalar>::infinity();
  return m + std::log((x.array() == ninf).select(Scalar(0), (x.array() - m).exp()).sum());
}

/// Row softmax of `logits / temperature`. -inf logits map to exact zeros.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(
    const Eigen::MatrixBase<Derived>& logits, typename Derived::Scalar temperature = 1) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> z = logits / temperature;
  const Scalar m = z.maxCoeff();
  if (!std::isfinite(m)) throw InvalidArgument("softmax: row has no finite logit");
  // Eigen's vectorized exp clamps -inf to a denormal, so masked entries are
  // zeroed explicitly.
  const auto ninf = -std::numeric_limits<Scalar>::infinity();
  z = (z.array() == ninf).select(Scalar(0), (z.array() - m).exp());
  return z / z.sum();
}

/// Sum_x p(x) log(p(x)/q(x)) with 0 log 0 = 0.
template <typename DerivedP, typename DerivedQ>
typename DerivedP::Scalar kl_divergence(const Eigen::MatrixBase<DerivedP>& p,
                                        const Eigen::MatrixBase<DerivedQ>& q) {
  using Scalar = typename DerivedP::Scalar;
  if (p.size() != q.size()) throw InvalidArgument("kl_divergence: support size mismatch");
  Scalar acc = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const Scalar pi = p(i);
    if (pi < kProbFloor) continue;
    const Scalar qi = q(i);
    if (qi < kProbFloor)
      throw AbsoluteContinuityViolation("kl_divergence: q(" + std::to_string(i) +
                                        ") = 0 where p > 0");
    acc += pi * (std::log(pi) - std::log(qi));
  }
  return acc < 0 ? Scalar(0) : acc;
}

template <typename DerivedP, typename DerivedQ>
typename DerivedP::Scalar total_variation(const Eigen::MatrixBase<DerivedP>& p,
                                          const Eigen::MatrixBase<DerivedQ>& q) {
  return (p - q).cwiseAbs().sum() / 2;
}

/// Index of the largest entry; lowest index wins ties.
template <typename Derived>
Eigen::Index argmax(const Eigen::MatrixBase<Derived>& x) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < x.size(); ++i)
    if (x(i) > x(best)) best = i;
  return best;
}

// ---------------------------------------------------------------------------

/// Normalized distribution over a vocabulary.
class Categorical {
 public:
  explicit Categorical(Eigen::VectorXd probs);

  static Categorical uniform(Eigen::Index size);
  static Categorical from_logits(const Eigen::VectorXd& logits, double temperature = 1.0);
  static Categorical one_hot(Eigen::Index size, Token t);

  const Eigen::VectorXd& probs() const { return probs_; }
  Eigen::Index size() const { return probs_.size(); }
  double prob(Token t) const { return probs_(t); }

  /// Throws ZeroProbabilityToken for entries below kProbFloor.
  double log_prob(Token t) const;
  Token argmax() const { return static_cast<Token>(mtkd::argmax(probs_)); }

 private:
  Eigen::VectorXd probs_;
};

double kl_divergence(const Categorical& p, const Categorical& q);
double total_variation(const Categorical& p, const Categorical& q);

/// s_j = (t_{<j}, z_j): a prefix and the distribution governing the next token.
struct TrajectoryState {
  std::vector<Token> prefix;
  Categorical predictive;
};

/// One autoregressive trajectory recorded state by state.
struct CotStream {
  ContextId context;
  std::vector<TrajectoryState> states;
  std::vector<Token> tokens;

  std::size_t length() const { return tokens.size(); }
  /// Checks prefix extension and nonzero support of every emitted token.
  void validate() const;
};

/// The N-tuple of per-teacher states at one alignment step.
struct MultiStreamState {
  std::vector<TrajectoryState> per_teacher;
};

/// Sum of a span in pairwise-tree order; the result depends only on the input order.
double pairwise_sum(std::span<const double> values);

}  // namespace mtkd
