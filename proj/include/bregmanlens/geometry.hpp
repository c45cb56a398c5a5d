#pragma once

#include <string>
#include <vector>

#include "bregmanlens/eigh.hpp"
#include "bregmanlens/tensor.hpp"

namespace blns {

// The exponential family induced by softmax over a token embedding matrix:
// p(y | lambda) = exp(lambda . gamma_y - A(lambda)), with one row gamma_y per
// token. The same matrix serves as the tied model head, so representations
// read through it live in this family's natural-parameter space.
class SoftmaxFamily {
 public:
  explicit SoftmaxFamily(Tensor embedding);

  int vocab() const { return embedding_.dim(0); }
  int dim() const { return embedding_.dim(1); }
  const Tensor& embedding() const { return embedding_; }

 private:
  Tensor embedding_;  // [V x d]
};

// A layer representation in embedding coordinates (post-LayerNorm), tagged
// with where it came from.
struct Representation {
  Tensor lambda;  // [d]
  int layer = 0;
  std::string model_id;
};

// Covariance of the token embedding under p(. | lambda), possibly restricted
// to the top_k most probable tokens and renormalized; averaged over contexts
// by aggregate_hessian.
struct HessianEstimate {
  Tensor matrix;  // [d x d], symmetric PSD up to rounding
  int n_contexts = 1;
  int top_k = 0;
  int layer = 0;
  std::string model_id;
};

// Spectral conditioning measures of a Hessian estimate.
struct SpectrumSummary {
  Tensor eigenvalues;       // descending, negatives clamped to 0
  double effective_rank = 0.0;
  double condition_number = 1.0;
  bool condition_defined = false;
  double trace = 0.0;
  int retained_rank = 0;    // eigenvalues >= rank tolerance * sigma_max
  bool degenerate = false;  // trace collapse: no positive eigenvalue
  bool rank_deficient = false;
};

// Eigenvalues below kRankTol * sigma_max do not count as retained when
// forming condition numbers; without the floor the ratio is meaningless for
// degenerate spectra.
inline constexpr double kRankTol = 1e-12;

// ---- operations -------------------------------------------------------------

// A(lambda) = log sum_y exp(lambda . gamma_y), computed with a max shift.
double log_normalizer(const SoftmaxFamily& family, const Tensor& lambda);

// p(. | lambda) over the full vocabulary.
Tensor token_probs(const SoftmaxFamily& family, const Tensor& lambda);

// eta = grad A = E[gamma | lambda]; lies in the convex hull of the rows.
Tensor dual_coords(const SoftmaxFamily& family, const Tensor& lambda);

// H(lambda) = Cov[gamma | lambda] over the top_k most probable tokens with
// renormalized probabilities. Ties in p are broken toward the lower token id.
// Requires 2 <= top_k <= V.
HessianEstimate hessian(const SoftmaxFamily& family, const Tensor& lambda, int top_k);

// Entrywise mean of per-context estimates (pairwise summation keeps the
// result independent of aggregation order to ~1e-12). All estimates must
// agree on layer, model and dimensions.
HessianEstimate aggregate_hessian(const std::vector<HessianEstimate>& estimates);

struct EffectiveRank {
  double value = 0.0;
  bool trace_collapse = false;
};

// exp of the entropy of the normalized spectrum; zero eigenvalues contribute
// nothing. All-zero spectra are flagged as trace collapse with value 0.
EffectiveRank effective_rank(const Tensor& eigenvalues);

struct ConditionNumber {
  double value = 1.0;
  bool defined = false;
  int retained_rank = 0;
  bool rank_deficient = false;
};

// sigma_max over the smallest retained eigenvalue; undefined when
// sigma_max <= 0.
ConditionNumber condition_number(const Tensor& eigenvalues);

// Full spectral summary of an estimate: eigh, clamp, measure.
SpectrumSummary summarize(const HessianEstimate& h);

}  // namespace blns
