#pragma once

// Pairwise Markov random fields over finite label sets.
//
// The distribution is P(a) = exp(score(a)) / Z with score(a) the sum of the
// unary and pairwise factor entries selected by a. Factor tables are stored
// row-major: values(i, j) for a pairwise scope {u, v} is the entry for
// (label i of u, label j of v).

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "udanas/errors.hpp"
#include "udanas/ops.hpp"
#include "udanas/rng.hpp"

namespace udanas {

using FactorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One matrix per factor, in PairwiseMrf::factors() order and shape.
using FactorTables = std::vector<FactorMatrix>;

/// Exhaustive enumeration is refused above this many configurations.
inline constexpr double kBruteForceLimit = 1e6;

/// Factor entries are kept inside [-kFactorClamp, kFactorClamp] by update_factors.
inline constexpr double kFactorClamp = 30.0;

struct MrfVariable {
  int id = 0;
  int cardinality = 1;
  std::vector<std::string> label_names;
};

struct FactorTable {
  std::vector<int> scope;  // one or two variable ids
  FactorMatrix values;     // (card, 1) for unary, (card_a, card_b) for pairwise

  bool is_unary() const { return scope.size() == 1; }
};

struct Assignment {
  std::vector<int> labels;

  Assignment() = default;
  explicit Assignment(std::vector<int> l) : labels(std::move(l)) {}

  std::size_t size() const { return labels.size(); }
  int operator[](std::size_t i) const { return labels[i]; }
  int& operator[](std::size_t i) { return labels[i]; }
  bool operator==(const Assignment&) const = default;
  auto operator<=>(const Assignment&) const = default;
};

class PairwiseMrf {
 public:
  struct Neighbor {
    int factor;  // index into factors()
    int other;   // the other variable of the pairwise scope
    bool first;  // this variable is scope[0] (rows of the table)
  };

  PairwiseMrf() = default;

  /// Appends a variable; label names default to "0", "1", ...
  int add_variable(int cardinality, std::vector<std::string> label_names = {});
  /// Adds a unary factor, zero-initialized when `values` is omitted.
  int add_unary(int var, std::optional<Eigen::VectorXd> values = std::nullopt);
  /// Adds a pairwise factor over {a, b}, zero-initialized when `values` is omitted.
  int add_pairwise(int a, int b, std::optional<FactorMatrix> values = std::nullopt);

  int num_variables() const { return static_cast<int>(variables_.size()); }
  const std::vector<MrfVariable>& variables() const { return variables_; }
  int cardinality(int var) const { return variables_.at(static_cast<std::size_t>(var)).cardinality; }

  const std::vector<FactorTable>& factors() const { return factors_; }
  int num_factors() const { return static_cast<int>(factors_.size()); }
  /// Replaces a factor's table; shape must match and entries must be finite.
  void set_values(int factor, const FactorMatrix& values);

  /// Index of the variable's unary factor, or -1.
  int unary_of(int var) const { return unary_of_.at(static_cast<std::size_t>(var)); }
  const std::vector<Neighbor>& neighbors(int var) const {
    return neighbors_.at(static_cast<std::size_t>(var));
  }

  /// Product of cardinalities (as a double; only used for guards).
  double configuration_count() const;
  FactorTables zero_tables() const;

 private:
  std::vector<MrfVariable> variables_;
  std::vector<FactorTable> factors_;
  std::vector<int> unary_of_;
  std::vector<std::vector<Neighbor>> neighbors_;
};

void validate_assignment(const PairwiseMrf& mrf, const Assignment& a);

double score(const PairwiseMrf& mrf, const Assignment& a);

/// log Z by exhaustive enumeration, max-shifted. Throws CapacityError above kBruteForceLimit.
double partition_brute_force(const PairwiseMrf& mrf);

/// Calls fn(assignment) for every configuration in lexicographic order
/// (variable 0 most significant). Throws CapacityError when the count exceeds `limit`.
template <typename Fn>
void for_each_assignment(const PairwiseMrf& mrf, Fn&& fn, double limit = kBruteForceLimit) {
  if (mrf.configuration_count() > limit) {
    throw CapacityError("state space of " + std::to_string(mrf.configuration_count()) +
                        " configurations exceeds the enumeration limit");
  }
  const int n = mrf.num_variables();
  Assignment a(std::vector<int>(static_cast<std::size_t>(n), 0));
  while (true) {
    fn(static_cast<const Assignment&>(a));
    int i = n - 1;
    while (i >= 0 && ++a[static_cast<std::size_t>(i)] == mrf.cardinality(i)) {
      a[static_cast<std::size_t>(i)] = 0;
      --i;
    }
    if (i < 0) return;
  }
}

/// Conditional log-potentials of variable `var` given the other labels of `a`.
Eigen::VectorXd conditional_logits(const PairwiseMrf& mrf, const Assignment& a, int var);

/// Gibbs sampling with a fixed ascending scan. Each conditional draw uses the
/// Gumbel-max trick, consuming cardinality(var) Gumbel variates per visit from
/// the stream seeded by `rng_seed`; gumbel_relaxed_sample reads the same stream.
Assignment gibbs_sample(const PairwiseMrf& mrf, const Assignment& init, int sweeps,
                        std::uint64_t rng_seed);

/// Descent step psi <- clamp(psi - lr * gradient).
void update_factors(PairwiseMrf& mrf, const FactorTables& gradient, double lr);

nlohmann::json to_json(const PairwiseMrf& mrf);
PairwiseMrf mrf_from_json(const nlohmann::json& doc);

// ---------------------------------------------------------------------------
// Relaxed sampling

/// Per-variable probability vectors produced by a Gumbel-Softmax sweep, linked
/// to differentiable copies of the factor tables they were computed from.
template <typename Scalar>
struct RelaxedAssignment {
  std::vector<nn::Tensor<Scalar>> simplex;         // one vector per variable
  std::vector<nn::Tensor<Scalar>> factor_leaves;   // one per factor, mrf.factors() order

  /// Per-variable argmax, lowest label on ties.
  Assignment harden() const {
    Assignment a(std::vector<int>(simplex.size(), 0));
    for (std::size_t i = 0; i < simplex.size(); ++i) {
      const auto& p = simplex[i].value();
      Eigen::Index best = 0;
      for (Eigen::Index l = 1; l < p.size(); ++l)
        if (p[l] > p[best]) best = l;
      a[i] = static_cast<int>(best);
    }
    return a;
  }

  /// Gradients accumulated in the factor leaves by a backward pass.
  FactorTables factor_gradients() const {
    FactorTables out;
    out.reserve(factor_leaves.size());
    for (const auto& leaf : factor_leaves) {
      const Eigen::Index rows = leaf.dim(0);
      const Eigen::Index cols = leaf.rank() == 2 ? leaf.dim(1) : 1;
      const Eigen::ArrayXd g = leaf.grad().template cast<double>();
      out.push_back(Eigen::Map<const FactorMatrix>(g.data(), rows, cols));
    }
    return out;
  }
};

namespace detail {

template <typename Scalar>
RelaxedAssignment<Scalar> relaxed_sweeps(const PairwiseMrf& mrf, double temperature, int sweeps,
                                         std::uint64_t rng_seed,
                                         std::vector<nn::Tensor<Scalar>> state) {
  using TensorS = nn::Tensor<Scalar>;
  if (!(temperature > 0)) throw DomainError("Gumbel-Softmax temperature must be positive");
  if (sweeps < 1) throw DomainError("sweeps must be >= 1");

  RelaxedAssignment<Scalar> out;
  out.factor_leaves.reserve(mrf.factors().size());
  for (const auto& f : mrf.factors()) {
    nn::Shape shape = f.is_unary() ? nn::Shape{f.values.rows()} : nn::Shape{f.values.rows(), f.values.cols()};
    typename TensorS::Array v =
        Eigen::Map<const Eigen::ArrayXd>(f.values.data(), f.values.size()).template cast<Scalar>();
    out.factor_leaves.push_back(TensorS::parameter(std::move(shape), std::move(v)));
  }

  Rng rng(derive_seed(rng_seed, "mrf-sweep"));
  const int n = mrf.num_variables();
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    for (int i = 0; i < n; ++i) {
      const int card = mrf.cardinality(i);
      const int u = mrf.unary_of(i);
      TensorS logits = u >= 0 ? out.factor_leaves[static_cast<std::size_t>(u)] : TensorS::zeros({card});
      for (const auto& nb : mrf.neighbors(i)) {
        const auto& table = out.factor_leaves[static_cast<std::size_t>(nb.factor)];
        const auto& other = state[static_cast<std::size_t>(nb.other)];
        logits = logits + (nb.first ? nn::matvec(table, other) : nn::matvec_transposed(table, other));
      }
      typename TensorS::Array noise(card);
      for (int l = 0; l < card; ++l) noise[l] = static_cast<Scalar>(gumbel(rng));
      state[static_cast<std::size_t>(i)] =
          nn::softmax(logits + TensorS::constant({card}, std::move(noise)), static_cast<Scalar>(temperature));
    }
  }
  out.simplex = std::move(state);
  return out;
}

}  // namespace detail

/// Differentiable Gibbs-style sweep. Each variable's conditional is formed
/// from its unary table plus the expected pairwise scores under its
/// neighbours' current probability vectors, perturbed with Gumbel noise and
/// softened at `temperature`. Starts from uniform vectors.
template <typename Scalar>
RelaxedAssignment<Scalar> gumbel_relaxed_sample(const PairwiseMrf& mrf, double temperature,
                                                int sweeps, std::uint64_t rng_seed) {
  std::vector<nn::Tensor<Scalar>> state;
  for (int i = 0; i < mrf.num_variables(); ++i) {
    const int card = mrf.cardinality(i);
    state.push_back(nn::Tensor<Scalar>::full({card}, Scalar(1) / static_cast<Scalar>(card)));
  }
  return detail::relaxed_sweeps<Scalar>(mrf, temperature, sweeps, rng_seed, std::move(state));
}

/// Same, starting from the one-hot vectors of `init`.
template <typename Scalar>
RelaxedAssignment<Scalar> gumbel_relaxed_sample(const PairwiseMrf& mrf, double temperature,
                                                int sweeps, std::uint64_t rng_seed,
                                                const Assignment& init) {
  validate_assignment(mrf, init);
  std::vector<nn::Tensor<Scalar>> state;
  for (int i = 0; i < mrf.num_variables(); ++i) {
    const int card = mrf.cardinality(i);
    typename nn::Tensor<Scalar>::Array v = nn::Tensor<Scalar>::Array::Zero(card);
    v[init[static_cast<std::size_t>(i)]] = Scalar(1);
    state.push_back(nn::Tensor<Scalar>::constant({card}, std::move(v)));
  }
  return detail::relaxed_sweeps<Scalar>(mrf, temperature, sweeps, rng_seed, std::move(state));
}

}  // namespace udanas
