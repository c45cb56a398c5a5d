#include "bregmanlens/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace blns {

SoftmaxFamily::SoftmaxFamily(Tensor embedding) : embedding_(std::move(embedding)) {
  if (embedding_.rank() != 2) {
    fail(ErrorKind::dimension, "embedding matrix must be rank 2 (V x d)");
  }
  if (embedding_.dim(0) < 2 || embedding_.dim(1) < 1) {
    fail(ErrorKind::validation, "softmax family needs V >= 2 and d >= 1, got V=",
         embedding_.dim(0), " d=", embedding_.dim(1));
  }
  embedding_.check_finite("embedding matrix");
}

namespace {

void check_lambda(const SoftmaxFamily& family, const Tensor& lambda) {
  if (lambda.rank() != 1 || lambda.dim(0) != family.dim()) {
    fail(ErrorKind::dimension, "representation dimension ",
         lambda.rank() == 1 ? lambda.dim(0) : -1, " does not match family dimension ",
         family.dim());
  }
}

}  // namespace

double log_normalizer(const SoftmaxFamily& family, const Tensor& lambda) {
  check_lambda(family, lambda);
  Tensor logits = matmul(family.embedding(), lambda);  // [V]
  const int v = family.vocab();
  double m = logits(0);
  for (int i = 1; i < v; ++i) m = std::max(m, logits(i));
  double sum = 0.0;
  for (int i = 0; i < v; ++i) sum += std::exp(logits(i) - m);
  return m + std::log(sum);
}

Tensor token_probs(const SoftmaxFamily& family, const Tensor& lambda) {
  check_lambda(family, lambda);
  Tensor logits = matmul(family.embedding(), lambda);
  return stable_softmax(logits);
}

Tensor dual_coords(const SoftmaxFamily& family, const Tensor& lambda) {
  Tensor p = token_probs(family, lambda);
  // eta = Gamma^T p
  return matmul_tn(family.embedding(), p);
}

HessianEstimate hessian(const SoftmaxFamily& family, const Tensor& lambda, int top_k) {
  check_lambda(family, lambda);
  const int v = family.vocab(), d = family.dim();
  if (top_k < 2 || top_k > v) {
    fail(ErrorKind::contract, "top_k must be in [2, V]; got ", top_k, " with V=", v);
  }
  Tensor p = token_probs(family, lambda);

  std::vector<int> idx(static_cast<size_t>(v));
  std::iota(idx.begin(), idx.end(), 0);
  if (top_k < v) {
    // Ties break toward the lower token id.
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return p(a) > p(b); });
    idx.resize(size_t(top_k));
  }

  double mass = 0.0;
  for (int y : idx) mass += p(y);
  const double inv_mass = 1.0 / mass;

  const Tensor& gamma = family.embedding();
  // H = M^T M - eta eta^T with M = rows gamma_y scaled by sqrt(p~_y).
  Tensor m({top_k, d});
  Tensor eta({d});
  for (int r = 0; r < top_k; ++r) {
    const int y = idx[size_t(r)];
    const double py = p(y) * inv_mass;
    const double sq = std::sqrt(py);
    for (int j = 0; j < d; ++j) {
      const double g = gamma(y, j);
      m(r, j) = sq * g;
      eta(j) += py * g;
    }
  }
  Tensor h = matmul_tn(m, m);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) h(i, j) -= eta(i) * eta(j);
  // Kill rounding asymmetry exactly.
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      const double s = 0.5 * (h(i, j) + h(j, i));
      h(i, j) = s;
      h(j, i) = s;
    }
  h.check_finite("hessian estimate");

  HessianEstimate out;
  out.matrix = std::move(h);
  out.n_contexts = 1;
  out.top_k = top_k;
  return out;
}

HessianEstimate aggregate_hessian(const std::vector<HessianEstimate>& estimates) {
  if (estimates.empty()) fail(ErrorKind::contract, "aggregate_hessian needs at least one estimate");
  const HessianEstimate& first = estimates.front();
  const int d = first.matrix.dim(0);
  int n_contexts = 0;
  for (const auto& e : estimates) {
    if (e.layer != first.layer || e.model_id != first.model_id) {
      fail(ErrorKind::validation, "aggregate_hessian saw mixed layers or models (layer ",
           e.layer, " vs ", first.layer, ")");
    }
    if (e.matrix.dim(0) != d || e.matrix.dim(1) != d) {
      fail(ErrorKind::dimension, "aggregate_hessian saw mixed matrix dimensions");
    }
    n_contexts += e.n_contexts;
  }
  HessianEstimate out;
  out.matrix = Tensor({d, d});
  const size_t n = estimates.size();
  std::vector<double> vals(n);
  for (size_t cell = 0; cell < size_t(d) * size_t(d); ++cell) {
    for (size_t k = 0; k < n; ++k) vals[k] = estimates[k].matrix.data()[cell];
    out.matrix.data()[cell] = pairwise_sum(vals.data(), n) / double(n);
  }
  out.n_contexts = n_contexts;
  out.top_k = first.top_k;
  out.layer = first.layer;
  out.model_id = first.model_id;
  return out;
}

EffectiveRank effective_rank(const Tensor& eigenvalues) {
  if (eigenvalues.rank() != 1 || eigenvalues.dim(0) < 1) {
    fail(ErrorKind::dimension, "effective_rank requires a rank-1 spectrum");
  }
  const int n = eigenvalues.dim(0);
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += std::max(eigenvalues(i), 0.0);
  if (total <= 0.0) return {0.0, true};
  double entropy = 0.0;
  for (int i = 0; i < n; ++i) {
    const double s = std::max(eigenvalues(i), 0.0) / total;
    if (s > 0.0) entropy -= s * std::log(s);
  }
  return {std::exp(entropy), false};
}

ConditionNumber condition_number(const Tensor& eigenvalues) {
  if (eigenvalues.rank() != 1 || eigenvalues.dim(0) < 1) {
    fail(ErrorKind::dimension, "condition_number requires a rank-1 spectrum");
  }
  const int n = eigenvalues.dim(0);
  double sigma_max = 0.0;
  for (int i = 0; i < n; ++i) sigma_max = std::max(sigma_max, eigenvalues(i));
  ConditionNumber out;
  if (sigma_max <= 0.0) {
    out.defined = false;
    out.retained_rank = 0;
    out.rank_deficient = true;
    return out;
  }
  const double floor = kRankTol * sigma_max;
  double sigma_min = sigma_max;
  int retained = 0;
  for (int i = 0; i < n; ++i) {
    if (eigenvalues(i) >= floor) {
      ++retained;
      sigma_min = std::min(sigma_min, eigenvalues(i));
    }
  }
  out.value = sigma_max / sigma_min;
  out.defined = true;
  out.retained_rank = retained;
  out.rank_deficient = retained < n;
  return out;
}

SpectrumSummary summarize(const HessianEstimate& h) {
  SymmetricEigen es = eigh(h.matrix);
  const int d = es.eigenvalues.dim(0);

  SpectrumSummary out;
  // Trace from the matrix diagonal; eigh guarantees the unclamped eigenvalue
  // sum matches it to 1e-10 relative.
  double tr = 0.0;
  for (int i = 0; i < d; ++i) tr += h.matrix(i, i);
  out.trace = tr;

  ConditionNumber cn = condition_number(es.eigenvalues);
  EffectiveRank er = effective_rank(es.eigenvalues);

  out.eigenvalues = Tensor({d});
  for (int i = 0; i < d; ++i) out.eigenvalues(i) = std::max(es.eigenvalues(i), 0.0);
  out.effective_rank = er.value;
  out.degenerate = er.trace_collapse;
  out.condition_number = cn.value;
  out.condition_defined = cn.defined;
  out.retained_rank = cn.retained_rank;
  out.rank_deficient = cn.rank_deficient;
  if (out.degenerate) out.trace = std::max(out.trace, 0.0);
  return out;
}

}  // namespace blns
