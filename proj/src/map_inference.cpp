#include "udanas/map_inference.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <set>

namespace udanas {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

InferenceResult finish(const PairwiseMrf& mrf, Assignment a, bool converged, int iterations) {
  const double s = score(mrf, a);
  return {std::move(a), s, converged, iterations};
}

Eigen::VectorXd unary_or_zero(const PairwiseMrf& mrf, int var) {
  const int u = mrf.unary_of(var);
  if (u < 0) return Eigen::VectorXd::Zero(mrf.cardinality(var));
  return mrf.factors()[static_cast<std::size_t>(u)].values.col(0);
}

int argmax_lowest(const Eigen::VectorXd& v) {
  int best = 0;
  for (int l = 1; l < v.size(); ++l)
    if (v[l] > v[best]) best = l;
  return best;
}

// Copy of `mrf` with -w * (number of earlier solutions using label l) added to
// each variable's unary entry l.
PairwiseMrf augmented(const PairwiseMrf& mrf, const std::vector<Assignment>& previous, double w) {
  PairwiseMrf out = mrf;
  if (previous.empty() || w == 0.0) return out;
  for (int i = 0; i < mrf.num_variables(); ++i) {
    Eigen::VectorXd penalty = Eigen::VectorXd::Zero(mrf.cardinality(i));
    for (const auto& p : previous) penalty[p[static_cast<std::size_t>(i)]] += w;
    const int u = out.unary_of(i);
    if (u < 0) {
      out.add_unary(i, Eigen::VectorXd(-penalty));
    } else {
      out.set_values(u, out.factors()[static_cast<std::size_t>(u)].values - FactorMatrix(penalty));
    }
  }
  return out;
}

// Exact argmax over assignments not in `excluded`, lexicographic tie-break.
Assignment best_excluding(const PairwiseMrf& mrf, const std::set<Assignment>& excluded) {
  Assignment best;
  double best_score = kNegInf;
  for_each_assignment(mrf, [&](const Assignment& a) {
    if (excluded.count(a)) return;
    const double s = score(mrf, a);
    if (s > best_score) {
      best_score = s;
      best = a;
    }
  });
  return best;
}

// Used when loopy decoding lands on an excluded assignment: the best
// non-excluded single-label change, else the first free assignment in
// lexicographic order.
Assignment repair(const PairwiseMrf& mrf, const Assignment& a, const std::set<Assignment>& excluded) {
  Assignment best;
  double best_score = kNegInf;
  for (int i = 0; i < mrf.num_variables(); ++i) {
    for (int l = 0; l < mrf.cardinality(i); ++l) {
      Assignment c = a;
      c[static_cast<std::size_t>(i)] = l;
      if (excluded.count(c)) continue;
      const double s = score(mrf, c);
      if (s > best_score || (s == best_score && c < best)) {
        best_score = s;
        best = c;
      }
    }
  }
  if (best_score > kNegInf) return best;

  Assignment c(std::vector<int>(static_cast<std::size_t>(mrf.num_variables()), 0));
  while (excluded.count(c)) {
    int i = mrf.num_variables() - 1;
    while (i >= 0 && ++c[static_cast<std::size_t>(i)] == mrf.cardinality(i)) {
      c[static_cast<std::size_t>(i)] = 0;
      --i;
    }
    if (i < 0) throw CapacityError("no assignment left outside the excluded set");
  }
  return c;
}

}  // namespace

int hamming(const Assignment& a, const Assignment& b) {
  if (a.size() != b.size()) throw InvalidAssignment("hamming: assignments differ in length");
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

InferenceResult map_brute_force(const PairwiseMrf& mrf) {
  Assignment best;
  double best_score = kNegInf;
  for_each_assignment(mrf, [&](const Assignment& a) {
    const double s = score(mrf, a);
    if (s > best_score) {
      best_score = s;
      best = a;
    }
  });
  return finish(mrf, std::move(best), true, 1);
}

InferenceResult map_loopy(const PairwiseMrf& mrf, const LoopyOptions& options) {
  if (options.max_iters < 1) throw DomainError("max_iters must be >= 1");
  if (!(options.damping >= 0.0 && options.damping < 1.0)) throw DomainError("damping must lie in [0, 1)");

  const int n = mrf.num_variables();
  const auto& factors = mrf.factors();
  std::vector<Eigen::VectorXd> unary(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) unary[static_cast<std::size_t>(i)] = unary_or_zero(mrf, i);

  // msg[f][0]: scope[0] -> scope[1]; msg[f][1]: scope[1] -> scope[0].
  std::vector<std::array<Eigen::VectorXd, 2>> msg(factors.size());
  for (std::size_t f = 0; f < factors.size(); ++f) {
    if (factors[f].is_unary()) continue;
    msg[f][0] = Eigen::VectorXd::Zero(factors[f].values.cols());
    msg[f][1] = Eigen::VectorXd::Zero(factors[f].values.rows());
  }
  auto incoming = [&](const PairwiseMrf::Neighbor& nb) -> const Eigen::VectorXd& {
    return msg[static_cast<std::size_t>(nb.factor)][nb.first ? 1 : 0];
  };
  auto beliefs = [&] {
    std::vector<Eigen::VectorXd> b = unary;
    for (int i = 0; i < n; ++i)
      for (const auto& nb : mrf.neighbors(i)) b[static_cast<std::size_t>(i)] += incoming(nb);
    return b;
  };

  bool converged = false;
  int iter = 0;
  while (iter < options.max_iters && !converged) {
    ++iter;
    const auto belief = beliefs();
    auto next = msg;
    double delta = 0.0;
    for (int i = 0; i < n; ++i) {
      for (const auto& nb : mrf.neighbors(i)) {
        const auto f = static_cast<std::size_t>(nb.factor);
        const Eigen::VectorXd h = belief[static_cast<std::size_t>(i)] - incoming(nb);
        const auto& table = factors[f].values;
        const int out_card = mrf.cardinality(nb.other);
        Eigen::VectorXd m(out_card);
        for (int y = 0; y < out_card; ++y) {
          m[y] = nb.first ? (h + table.col(y)).maxCoeff() : (h + table.row(y).transpose()).maxCoeff();
        }
        m.array() -= m.maxCoeff();
        auto& slot = next[f][nb.first ? 0 : 1];
        const Eigen::VectorXd damped = (1.0 - options.damping) * m + options.damping * slot;
        delta = std::max(delta, (damped - slot).cwiseAbs().maxCoeff());
        slot = damped;
      }
    }
    msg = std::move(next);
    converged = delta < options.tolerance;
  }

  const auto belief = beliefs();
  Assignment a(std::vector<int>(static_cast<std::size_t>(n), 0));
  for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i)] = argmax_lowest(belief[static_cast<std::size_t>(i)]);
  return finish(mrf, std::move(a), converged, iter);
}

DiverseSolutionSet diverse_m_best(const PairwiseMrf& mrf, int m, double diversity_weight, bool exact,
                                  const LoopyOptions& loopy) {
  if (m < 1) throw DomainError("m must be >= 1");
  if (!(diversity_weight >= 0.0)) throw DomainError("diversity weight must be >= 0");
  if (static_cast<double>(m) > mrf.configuration_count()) {
    throw CapacityError("m = " + std::to_string(m) + " exceeds the number of configurations");
  }

  const bool distinct = diversity_weight > 0.0;
  DiverseSolutionSet out;
  std::vector<Assignment> previous;
  std::set<Assignment> excluded;
  for (int k = 0; k < m; ++k) {
    const PairwiseMrf aug = augmented(mrf, previous, diversity_weight);
    Assignment a;
    bool converged = true;
    int iterations = 1;
    if (exact) {
      a = distinct ? best_excluding(aug, excluded) : map_brute_force(aug).assignment;
    } else {
      auto r = map_loopy(aug, loopy);
      converged = r.converged;
      iterations = r.iterations_used;
      a = std::move(r.assignment);
      if (distinct && excluded.count(a)) a = repair(aug, a, excluded);
    }

    DiverseSolution sol{finish(mrf, a, converged, iterations), 0};
    if (!previous.empty()) {
      sol.hamming_to_previous = std::numeric_limits<int>::max();
      for (const auto& p : previous) sol.hamming_to_previous = std::min(sol.hamming_to_previous, hamming(a, p));
    }
    previous.push_back(a);
    excluded.insert(a);
    out.solutions.push_back(std::move(sol));
  }

  if (m > 1) {
    out.min_pairwise_hamming = std::numeric_limits<int>::max();
    for (std::size_t i = 0; i < previous.size(); ++i)
      for (std::size_t j = i + 1; j < previous.size(); ++j)
        out.min_pairwise_hamming = std::min(out.min_pairwise_hamming, hamming(previous[i], previous[j]));
  }
  return out;
}

nlohmann::json to_json(const DiverseSolutionSet& set) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : set.solutions) {
    arr.push_back({{"labels", s.result.assignment.labels},
                   {"score", s.result.score},
                   {"hamming_to_previous", s.hamming_to_previous}});
  }
  return arr;
}

}  // namespace udanas
