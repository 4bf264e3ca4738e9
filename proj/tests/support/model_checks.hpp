#pragma once

// Shared property checks over ranking models, used by unit tests and the
// acceptance run.

#include <functional>
#include <string>
#include <vector>

#include "qrank/ranker.hpp"
#include "support/gradcheck.hpp"

namespace qrank::testing {

struct LossCheck {
  std::string loss;
  GradCheck result;
};

// Finite-difference checks of every training loss the model's mode uses, on
// one expressible example. `salt` varies the fixed negatives.
inline std::vector<LossCheck> check_losses(ranker::Model& m, const ranker::Example& ex, std::size_t salt) {
  using ranker::detail::Scored;
  std::vector<LossCheck> out;
  const std::size_t pos = *ex.truth_template;
  const auto params = m.trainable_params();
  if (m.monolithic()) {
    const auto space = m.full_space(ex);
    Scored p;
    p.t = pos;
    p.params = ex.truth_params;
    const std::vector<Scored> negs = {space[(salt * 5 + 1) % space.size()],
                                      space[(salt * 11 + 3) % space.size()]};
    out.push_back({"monolithic_nce", check_gradients(params, [&](bool bp) {
                     return m.monolithic_nce(ex, p, negs, bp);
                   })});
  } else if (m.classifier()) {
    out.push_back({"classifier_ce+p2_ce", check_gradients(params, [&](bool bp) {
                     return m.classifier_ce(ex, pos, bp) + m.p2_ce(ex, bp);
                   })});
  } else {
    const std::vector<std::size_t> negs = {(pos + 1 + salt) % m.catalog.size(),
                                           (pos + 3 + salt) % m.catalog.size()};
    out.push_back({"p1_nce", check_gradients(params, [&](bool bp) { return m.p1_nce(ex, pos, negs, bp); })});
    out.push_back({"p2_ce", check_gradients(params, [&](bool bp) { return m.p2_ce(ex, bp); })});
  }
  return out;
}

// A copy small enough to enumerate: the first four templates plus one with
// two switch blanks.
inline ranker::Model enumerable(const ranker::Model& trained) {
  ranker::Model m = trained;
  m.catalog.entries.resize(std::min<std::size_t>(m.catalog.entries.size(), 4));
  m.catalog.add(dsl::parse_template("a = filter(T, switch==_); b = filter(a, switch!=3 and switch==_);",
                                    dsl::Dialect::Network));
  m.refresh_caches();
  return m;
}

inline bool same_ranking(const std::vector<ranker::detail::Scored>& a,
                         const std::vector<ranker::detail::Scored>& b, double tol = 1e-12) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].t != b[i].t || a[i].params != b[i].params || std::abs(a[i].logp - b[i].logp) > tol) return false;
  return true;
}

// Exact log-space product identity for every ranked query: the query's
// log-probability equals log P1(T) plus the sum of its log P2 terms.
inline bool product_identity_holds(const ranker::Model& m, const ranker::Example& ex) {
  const nn::Vec lp1 = nn::log_softmax(m.template_scores(ex));
  for (const auto& q : m.ranked(ex, true)) {
    double sum = 0;
    for (std::size_t b = 0; b < q.params.size(); ++b) {
      const nn::Vec lp2 = nn::log_softmax(m.parameter_scores(ex, q.t, b));
      sum += lp2(static_cast<Eigen::Index>(*m.candidate_position(ex, q.t, b, q.params[b])));
    }
    if (q.logp != lp1(static_cast<Eigen::Index>(q.t)) + sum) return false;
  }
  return true;
}

}  // namespace qrank::testing
