#include "mtkd/core.hpp"

#include <charconv>
#include <set>

namespace mtkd {

Vocab::Vocab(std::vector<std::string> symbols, std::string_view sep, std::string_view eos)
    : symbols_(std::move(symbols)) {
  if (symbols_.size() < 2) throw InvalidArgument("vocab: need at least 2 symbols");
  std::set<std::string_view> seen;
  for (const auto& s : symbols_)
    if (!seen.insert(s).second) throw InvalidArgument("vocab: duplicate symbol '" + s + "'");
  auto sep_tok = find(sep);
  auto eos_tok = find(eos);
  if (!sep_tok || !eos_tok) throw InvalidArgument("vocab: SEP and EOS must be members");
  if (*sep_tok == *eos_tok) throw InvalidArgument("vocab: SEP and EOS must differ");
  sep_ = *sep_tok;
  eos_ = *eos_tok;
}

Vocab Vocab::with_answer_tokens(int answers) {
  if (answers < 1) throw InvalidArgument("vocab: need at least one answer token");
  std::vector<std::string> symbols;
  for (int i = 0; i < answers; ++i) symbols.push_back("a" + std::to_string(i));
  symbols.emplace_back("<sep>");
  symbols.emplace_back("</s>");
  return Vocab(std::move(symbols), "<sep>", "</s>");
}

const std::string& Vocab::symbol(Token t) const {
  if (!contains(t)) throw InvalidArgument("vocab: token " + std::to_string(t) + " out of range");
  return symbols_[static_cast<std::size_t>(t)];
}

std::optional<Token> Vocab::find(std::string_view symbol) const {
  for (std::size_t i = 0; i < symbols_.size(); ++i)
    if (symbols_[i] == symbol) return static_cast<Token>(i);
  return std::nullopt;
}

ContextId::ContextId(std::vector<Token> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.empty()) throw InvalidArgument("context: must contain at least one token");
}

std::string ContextId::render() const {
  std::string out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens_[i]);
  }
  return out;
}

ContextId ContextId::parse(std::string_view text) {
  std::vector<Token> tokens;
  const char* p = text.data();
  const char* end = p + text.size();
  while (p < end) {
    if (*p == ' ') {
      ++p;
      continue;
    }
    Token t = 0;
    auto [next, ec] = std::from_chars(p, end, t);
    if (ec != std::errc() || (next < end && *next != ' '))
      throw DataError("context: cannot parse '" + std::string(text) + "'");
    tokens.push_back(t);
    p = next;
  }
  if (tokens.empty()) throw DataError("context: empty rendering");
  return ContextId(std::move(tokens));
}

Categorical::Categorical(Eigen::VectorXd probs) : probs_(std::move(probs)) {
  if (probs_.size() < 1) throw InvalidArgument("categorical: empty support");
  if (!probs_.allFinite() || probs_.minCoeff() < 0)
    throw InvalidArgument("categorical: entries must be finite and non-negative");
  if (std::abs(probs_.sum() - 1.0) > kNormTolerance)
    throw InvalidArgument("categorical: entries sum to " + std::to_string(probs_.sum()));
}

Categorical Categorical::uniform(Eigen::Index size) {
  return Categorical(Eigen::VectorXd::Constant(size, 1.0 / static_cast<double>(size)));
}

Categorical Categorical::from_logits(const Eigen::VectorXd& logits, double temperature) {
  return Categorical(softmax(logits, temperature));
}

Categorical Categorical::one_hot(Eigen::Index size, Token t) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(size);
  p(t) = 1.0;
  return Categorical(std::move(p));
}

double Categorical::log_prob(Token t) const {
  const double p = probs_(t);
  if (p < kProbFloor)
    throw ZeroProbabilityToken("token " + std::to_string(t) + " has zero probability");
  return std::log(p);
}

double kl_divergence(const Categorical& p, const Categorical& q) {
  return kl_divergence(p.probs(), q.probs());
}

double total_variation(const Categorical& p, const Categorical& q) {
  return total_variation(p.probs(), q.probs());
}

void CotStream::validate() const {
  if (states.size() != tokens.size())
    throw InvalidArgument("cot stream: one state per emitted token required");
  for (std::size_t k = 0; k < states.size(); ++k) {
    const auto& prefix = states[k].prefix;
    if (prefix.size() != k || !std::equal(prefix.begin(), prefix.end(), tokens.begin()))
      throw InvalidArgument("cot stream: state " + std::to_string(k) +
                            " does not extend its predecessor by one token");
    if (states[k].predictive.prob(tokens[k]) < kProbFloor)
      throw InvalidArgument("cot stream: token " + std::to_string(k) + " has zero probability");
  }
}

double pairwise_sum(std::span<const double> values) {
  if (values.empty()) return 0.0;
  if (values.size() <= 8) {
    double s = 0;
    for (double v : values) s += v;
    return s;
  }
  const auto half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

}  // namespace mtkd
