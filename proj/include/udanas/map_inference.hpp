#pragma once

// MAP and diverse M-best inference on PairwiseMrf.

#include <nlohmann/json.hpp>

#include <vector>

#include "udanas/mrf.hpp"

namespace udanas {

struct InferenceResult {
  Assignment assignment;
  double score = 0.0;  // recomputed with score(mrf, assignment)
  bool converged = true;
  int iterations_used = 0;
};

struct DiverseSolution {
  InferenceResult result;
  int hamming_to_previous = 0;  // min distance to the earlier solutions; 0 for the first
};

struct DiverseSolutionSet {
  std::vector<DiverseSolution> solutions;
  int min_pairwise_hamming = 0;  // 0 when fewer than two solutions
};

struct LoopyOptions {
  int max_iters = 200;
  double damping = 0.5;
  double tolerance = 1e-9;
};

/// Exhaustive search; ties go to the lexicographically smallest assignment.
InferenceResult map_brute_force(const PairwiseMrf& mrf);

/// Damped synchronous max-sum belief propagation. Decodes each variable by its
/// max belief, lowest label on ties. Non-convergence is reported in the result.
InferenceResult map_loopy(const PairwiseMrf& mrf, const LoopyOptions& options = {});

/// Greedy diverse M-best: round k maximizes
///   score(a) - w * sum_{j<k} overlap(a, a_j)
/// with overlap the number of variables sharing a label. For w > 0 the earlier
/// solutions are excluded so that the rounds return distinct assignments.
DiverseSolutionSet diverse_m_best(const PairwiseMrf& mrf, int m, double diversity_weight, bool exact,
                                  const LoopyOptions& loopy = {});

int hamming(const Assignment& a, const Assignment& b);

nlohmann::json to_json(const DiverseSolutionSet& set);

}  // namespace udanas
