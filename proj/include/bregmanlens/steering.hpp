#pragma once

#include <span>
#include <utility>
#include <vector>

#include "bregmanlens/geometry.hpp"
#include "bregmanlens/model.hpp"

namespace blns {

enum class ConceptMode { activation_diff, embedding_diff };

// A binary concept: two pole token sets plus labeled prompts whose last-token
// representations define the activation-difference direction.
struct ConceptSpec {
  std::vector<int> pole_a;  // target tokens (steering success = mass on these)
  std::vector<int> pole_b;
  std::vector<std::pair<std::vector<int>, int>> prompts;  // (tokens, pole 0/1)
  ConceptMode mode = ConceptMode::activation_diff;
};

struct ConceptDirection {
  Tensor v;                     // unit primal direction [d]
  std::vector<int> target_set;  // pole_a token ids
  int layer = 0;
};

// activation_diff: normalized difference of mean last-token layer
// representations between pole-a and pole-b prompts. embedding_diff:
// normalized mean of (gamma_a - gamma_b) over pole pairs.
ConceptDirection build_concept(const SoftmaxFamily& family, const ModelState& model,
                               const ConceptSpec& spec, int layer);

// embedding_diff without a model; also the building block for synthetic
// families in tests.
ConceptDirection embedding_concept(const SoftmaxFamily& family, const std::vector<int>& pole_a,
                                   const std::vector<int>& pole_b, int layer = 0);

// lambda + eps * v.
Tensor euclidean_step(const Tensor& lambda, const Tensor& v, double eps);

// Which vector the dual solve preconditions: the fixed concept direction, or
// the gradient of log p(T | lambda) recomputed at every step.
enum class DualDirection { concept_vector, grad_log_p };

struct SteerOptions {
  int top_k = 0;                 // 0 = full vocabulary
  double damping_factor = 1e-4;  // delta = factor * trace(H)/d
  DualDirection dual_direction = DualDirection::concept_vector;
};

// u = (H + delta I)^-1 v via eigendecomposition; the step is normalized to
// Euclidean length eps so stop-threshold comparisons against euclidean_step
// are matched.
Tensor dual_step(const HessianEstimate& h, const Tensor& lambda, const Tensor& v, double eps,
                 double delta);
Tensor dual_step(const SoftmaxFamily& family, const Tensor& lambda, const Tensor& v,
                 double eps, double delta, int top_k = 0);

struct KlResult {
  double nats = 0.0;
  bool defined = false;
};

// KL(steered || base) after restricting both distributions to the complement
// of the target set and renormalizing. Undefined (flagged) when the base
// off-target mass is below 1e-12.
KlResult off_target_kl(const SoftmaxFamily& family, const Tensor& lambda_base,
                       const Tensor& lambda_steered, const std::vector<int>& target_set);

enum class SteerMethod { euclidean, dual };
const char* to_string(SteerMethod m);

struct SteeringStepRecord {
  double p_target = 0.0;
  double off_target_kl = 0.0;  // vs the unsteered start
  bool kl_defined = true;
};

struct SteeringTrace {
  SteerMethod method = SteerMethod::euclidean;
  double eps = 0.0;
  std::vector<SteeringStepRecord> steps;  // index 0 = the unsteered state
  int stop_step = -1;                     // first step with p(T) >= 0.8
  bool failed = false;                    // never reached the threshold
  Tensor final_lambda;

  // Off-target KL at the stop step; only meaningful when !failed.
  double stop_kl() const { return failed ? 0.0 : steps[size_t(stop_step)].off_target_kl; }
};

inline constexpr double kStopThreshold = 0.8;

// Iterates the chosen step from lambda0, recording p(T) and off-target KL at
// every step, until p(T) >= 0.8 or max_steps.
SteeringTrace run_steering(const SoftmaxFamily& family, const Tensor& lambda0,
                           const ConceptDirection& concept, SteerMethod method, double eps,
                           int max_steps, const SteerOptions& options = {});

struct KlAdvantage {
  double mean = 0.0;  // mean over usable pairs of KL_euclid - KL_dual
  bool defined = false;
  int n_pairs = 0;
  int n_used = 0;
  int n_euclid_failed = 0;
  int n_dual_failed = 0;
};

// Pairs are (euclidean, dual) traces from identical start states; pairs where
// either run failed are excluded and counted.
KlAdvantage kl_advantage(const std::vector<std::pair<SteeringTrace, SteeringTrace>>& pairs);

enum class CosineMode { primal_to_dual, dual_to_primal };

struct CosineResult {
  double value = 0.0;
  bool degenerate = false;
};

// Cosine between v and its dual image w = H v (default) or the damped inverse
// image (H + delta I)^-1 v. Degenerate (0, flagged) when w is crushed below
// 1e-14 * |v| * trace(H)/d, or when the Hessian has no variance at all.
CosineResult cosine_diagnostic(const HessianEstimate& h, const Tensor& v,
                               CosineMode mode = CosineMode::primal_to_dual,
                               double damping_factor = 1e-4);
CosineResult cosine_diagnostic(const SoftmaxFamily& family, const Tensor& lambda,
                               const Tensor& v, CosineMode mode = CosineMode::primal_to_dual,
                               int top_k = 0, double damping_factor = 1e-4);

// Spearman rank correlation with average ranks on ties. Returns 0 when either
// input has zero rank variance.
double spearman_rho(std::span<const double> xs, std::span<const double> ys);

}  // namespace blns
