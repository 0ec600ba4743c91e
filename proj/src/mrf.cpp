#include "udanas/mrf.hpp"

#include <algorithm>
#include <cmath>

namespace udanas {

namespace {

void check_finite(const FactorMatrix& m, const char* what) {
  if (!m.allFinite()) throw NumericalError(std::string(what) + ": factor values must be finite");
}

void check_variable(const PairwiseMrf& mrf, int var) {
  if (var < 0 || var >= mrf.num_variables()) {
    throw Error("factor scope references unknown variable " + std::to_string(var));
  }
}

}  // namespace

int PairwiseMrf::add_variable(int cardinality, std::vector<std::string> label_names) {
  if (cardinality < 1) throw Error("variable cardinality must be >= 1");
  if (label_names.empty()) {
    for (int l = 0; l < cardinality; ++l) label_names.push_back(std::to_string(l));
  }
  if (static_cast<int>(label_names.size()) != cardinality) {
    throw Error("label name count does not match cardinality");
  }
  const int id = num_variables();
  variables_.push_back({id, cardinality, std::move(label_names)});
  unary_of_.push_back(-1);
  neighbors_.emplace_back();
  return id;
}

int PairwiseMrf::add_unary(int var, std::optional<Eigen::VectorXd> values) {
  check_variable(*this, var);
  if (unary_of(var) >= 0) throw Error("duplicate unary factor on variable " + std::to_string(var));
  const int card = cardinality(var);
  FactorMatrix table = values ? FactorMatrix(*values) : FactorMatrix::Zero(card, 1);
  if (table.rows() != card || table.cols() != 1) throw ShapeError("unary table shape mismatch");
  check_finite(table, "add_unary");
  factors_.push_back({{var}, std::move(table)});
  unary_of_[static_cast<std::size_t>(var)] = num_factors() - 1;
  return num_factors() - 1;
}

int PairwiseMrf::add_pairwise(int a, int b, std::optional<FactorMatrix> values) {
  check_variable(*this, a);
  check_variable(*this, b);
  if (a == b) throw Error("pairwise scope variables must be distinct");
  for (const auto& nb : neighbors(a)) {
    if (nb.other == b) {
      throw Error("duplicate pairwise factor on {" + std::to_string(a) + ", " + std::to_string(b) + "}");
    }
  }
  FactorMatrix table = values ? std::move(*values) : FactorMatrix::Zero(cardinality(a), cardinality(b));
  if (table.rows() != cardinality(a) || table.cols() != cardinality(b)) {
    throw ShapeError("pairwise table shape mismatch");
  }
  check_finite(table, "add_pairwise");
  factors_.push_back({{a, b}, std::move(table)});
  const int f = num_factors() - 1;
  neighbors_[static_cast<std::size_t>(a)].push_back({f, b, true});
  neighbors_[static_cast<std::size_t>(b)].push_back({f, a, false});
  return f;
}

void PairwiseMrf::set_values(int factor, const FactorMatrix& values) {
  auto& f = factors_.at(static_cast<std::size_t>(factor));
  if (values.rows() != f.values.rows() || values.cols() != f.values.cols()) {
    throw ShapeError("set_values: shape mismatch for factor " + std::to_string(factor));
  }
  check_finite(values, "set_values");
  f.values = values;
}

double PairwiseMrf::configuration_count() const {
  double count = 1.0;
  for (const auto& v : variables_) count *= v.cardinality;
  return count;
}

FactorTables PairwiseMrf::zero_tables() const {
  FactorTables out;
  out.reserve(factors_.size());
  for (const auto& f : factors_) out.push_back(FactorMatrix::Zero(f.values.rows(), f.values.cols()));
  return out;
}

void validate_assignment(const PairwiseMrf& mrf, const Assignment& a) {
  if (static_cast<int>(a.size()) != mrf.num_variables()) {
    throw InvalidAssignment("assignment has " + std::to_string(a.size()) + " labels for " +
                            std::to_string(mrf.num_variables()) + " variables");
  }
  for (int i = 0; i < mrf.num_variables(); ++i) {
    const int l = a[static_cast<std::size_t>(i)];
    if (l < 0 || l >= mrf.cardinality(i)) {
      throw InvalidAssignment("label " + std::to_string(l) + " out of range for variable " +
                              std::to_string(i));
    }
  }
}

double score(const PairwiseMrf& mrf, const Assignment& a) {
  validate_assignment(mrf, a);
  double total = 0.0;
  for (const auto& f : mrf.factors()) {
    const int r = a[static_cast<std::size_t>(f.scope[0])];
    total += f.is_unary() ? f.values(r, 0) : f.values(r, a[static_cast<std::size_t>(f.scope[1])]);
  }
  return total;
}

double partition_brute_force(const PairwiseMrf& mrf) {
  std::vector<double> scores;
  scores.reserve(static_cast<std::size_t>(std::min(mrf.configuration_count(), kBruteForceLimit)));
  for_each_assignment(mrf, [&](const Assignment& a) { scores.push_back(score(mrf, a)); });
  const double top = *std::max_element(scores.begin(), scores.end());
  double acc = 0.0;
  for (double s : scores) acc += std::exp(s - top);
  return top + std::log(acc);
}

Eigen::VectorXd conditional_logits(const PairwiseMrf& mrf, const Assignment& a, int var) {
  const int u = mrf.unary_of(var);
  Eigen::VectorXd logits =
      u >= 0 ? Eigen::VectorXd(mrf.factors()[static_cast<std::size_t>(u)].values.col(0))
             : Eigen::VectorXd::Zero(mrf.cardinality(var));
  for (const auto& nb : mrf.neighbors(var)) {
    const auto& table = mrf.factors()[static_cast<std::size_t>(nb.factor)].values;
    const int other = a[static_cast<std::size_t>(nb.other)];
    if (nb.first)
      logits += table.col(other);
    else
      logits += table.row(other).transpose();
  }
  return logits;
}

Assignment gibbs_sample(const PairwiseMrf& mrf, const Assignment& init, int sweeps,
                        std::uint64_t rng_seed) {
  if (sweeps < 1) throw DomainError("sweeps must be >= 1");
  validate_assignment(mrf, init);
  Assignment a = init;
  Rng rng(derive_seed(rng_seed, "mrf-sweep"));
  for (int sweep = 0; sweep < sweeps; ++sweep) {
    for (int i = 0; i < mrf.num_variables(); ++i) {
      const Eigen::VectorXd logits = conditional_logits(mrf, a, i);
      int best = 0;
      double best_value = -std::numeric_limits<double>::infinity();
      for (int l = 0; l < logits.size(); ++l) {
        const double v = logits[l] + gumbel(rng);
        if (v > best_value) {
          best_value = v;
          best = l;
        }
      }
      a[static_cast<std::size_t>(i)] = best;
    }
  }
  return a;
}

void update_factors(PairwiseMrf& mrf, const FactorTables& gradient, double lr) {
  if (static_cast<int>(gradient.size()) != mrf.num_factors()) {
    throw ShapeError("gradient has " + std::to_string(gradient.size()) + " tables for " +
                     std::to_string(mrf.num_factors()) + " factors");
  }
  for (int f = 0; f < mrf.num_factors(); ++f) {
    const auto& cur = mrf.factors()[static_cast<std::size_t>(f)].values;
    const auto& g = gradient[static_cast<std::size_t>(f)];
    if (g.rows() != cur.rows() || g.cols() != cur.cols()) {
      throw ShapeError("gradient table " + std::to_string(f) + " has the wrong shape");
    }
  }
  for (int f = 0; f < mrf.num_factors(); ++f) {
    const auto& g = gradient[static_cast<std::size_t>(f)];
    if (!g.allFinite()) throw NumericalError("non-finite factor gradient");
    FactorMatrix next = (mrf.factors()[static_cast<std::size_t>(f)].values - lr * g)
                            .cwiseMax(-kFactorClamp)
                            .cwiseMin(kFactorClamp);
    mrf.set_values(f, next);
  }
}

nlohmann::json to_json(const PairwiseMrf& mrf) {
  nlohmann::json vars = nlohmann::json::array();
  for (const auto& v : mrf.variables()) {
    vars.push_back({{"id", v.id}, {"cardinality", v.cardinality}, {"labels", v.label_names}});
  }
  nlohmann::json factors = nlohmann::json::array();
  for (const auto& f : mrf.factors()) {
    std::vector<double> values(f.values.data(), f.values.data() + f.values.size());
    factors.push_back({{"scope", f.scope}, {"values", values}});
  }
  return {{"variables", vars}, {"factors", factors}};
}

PairwiseMrf mrf_from_json(const nlohmann::json& doc) {
  PairwiseMrf mrf;
  try {
    const auto& vars = doc.at("variables");
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const auto& v = vars[i];
      if (v.at("id").get<int>() != static_cast<int>(i)) throw Error("variable ids must be dense 0..n-1");
      mrf.add_variable(v.at("cardinality").get<int>(),
                       v.value("labels", std::vector<std::string>{}));
    }
    for (const auto& f : doc.at("factors")) {
      const auto scope = f.at("scope").get<std::vector<int>>();
      const auto values = f.at("values").get<std::vector<double>>();
      if (scope.size() == 1) {
        check_variable(mrf, scope[0]);
        if (static_cast<int>(values.size()) != mrf.cardinality(scope[0])) {
          throw ShapeError("unary values length mismatch");
        }
        mrf.add_unary(scope[0], Eigen::Map<const Eigen::VectorXd>(values.data(), values.size()));
      } else if (scope.size() == 2) {
        check_variable(mrf, scope[0]);
        check_variable(mrf, scope[1]);
        const int r = mrf.cardinality(scope[0]), c = mrf.cardinality(scope[1]);
        if (static_cast<int>(values.size()) != r * c) throw ShapeError("pairwise values length mismatch");
        mrf.add_pairwise(scope[0], scope[1], FactorMatrix(Eigen::Map<const FactorMatrix>(values.data(), r, c)));
      } else {
        throw Error("factor scope must have 1 or 2 variables");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed MRF document: ") + e.what());
  }
  return mrf;
}

}  // namespace udanas
