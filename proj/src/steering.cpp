#include "bregmanlens/steering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace blns {

const char* to_string(SteerMethod m) {
  return m == SteerMethod::euclidean ? "euclidean" : "dual";
}

namespace {

void check_target_set(const SoftmaxFamily& family, const std::vector<int>& target_set,
                      bool require_proper) {
  if (target_set.empty()) fail(ErrorKind::validation, "target set is empty");
  for (int y : target_set) {
    if (y < 0 || y >= family.vocab()) {
      fail(ErrorKind::validation, "target token ", y, " outside vocabulary of ",
           family.vocab());
    }
  }
  if (require_proper && int(target_set.size()) >= family.vocab()) {
    fail(ErrorKind::validation, "target set must be a proper subset of the vocabulary");
  }
}

Tensor normalized_or_fail(Tensor v, const char* what) {
  const double n = norm2(v);
  if (!(n > 0.0) || !v.all_finite()) {
    fail(ErrorKind::validation, what, ": direction has zero norm (degenerate concept)");
  }
  for (size_t i = 0; i < v.size(); ++i) v.data()[i] /= n;
  return v;
}

double target_mass(const Tensor& probs, const std::vector<int>& target_set) {
  double m = 0.0;
  for (int y : target_set) m += probs(y);
  return m;
}

// Direction used by the dual solve under DualDirection::grad_log_p:
// grad log p(T|lambda) = E[gamma | y in T] - E[gamma].
Tensor grad_log_p_target(const SoftmaxFamily& family, const Tensor& lambda,
                         const std::vector<int>& target_set) {
  Tensor p = token_probs(family, lambda);
  double mass = 0.0;
  for (int y : target_set) mass += p(y);
  const int d = family.dim();
  Tensor g({d});
  if (mass <= 0.0) return g;
  for (int y : target_set) {
    const double w = p(y) / mass;
    for (int j = 0; j < d; ++j) g(j) += w * family.embedding()(y, j);
  }
  Tensor eta = dual_coords(family, lambda);
  for (int j = 0; j < d; ++j) g(j) -= eta(j);
  return g;
}

}  // namespace

ConceptDirection embedding_concept(const SoftmaxFamily& family, const std::vector<int>& pole_a,
                                   const std::vector<int>& pole_b, int layer) {
  check_target_set(family, pole_a, false);
  check_target_set(family, pole_b, false);
  const int d = family.dim();
  Tensor mean_a({d}), mean_b({d});
  for (int y : pole_a)
    for (int j = 0; j < d; ++j) mean_a(j) += family.embedding()(y, j) / double(pole_a.size());
  for (int y : pole_b)
    for (int j = 0; j < d; ++j) mean_b(j) += family.embedding()(y, j) / double(pole_b.size());
  ConceptDirection c;
  c.v = normalized_or_fail(sub(mean_a, mean_b), "embedding_concept");
  c.target_set = pole_a;
  c.layer = layer;
  return c;
}

ConceptDirection build_concept(const SoftmaxFamily& family, const ModelState& model,
                               const ConceptSpec& spec, int layer) {
  if (spec.pole_a.empty() || spec.pole_b.empty()) {
    fail(ErrorKind::validation, "concept poles must be non-empty");
  }
  if (spec.mode == ConceptMode::embedding_diff) {
    return embedding_concept(family, spec.pole_a, spec.pole_b, layer);
  }
  if (layer < 0 || layer >= model.config.n_layers) {
    fail(ErrorKind::contract, "concept layer ", layer, " out of range");
  }
  bool has_a = false, has_b = false;
  for (const auto& [tokens, pole] : spec.prompts) {
    (pole == 0 ? has_a : has_b) = true;
    (void)tokens;
  }
  if (!has_a || !has_b) {
    fail(ErrorKind::validation, "activation_diff prompts must cover both poles");
  }

  const int d = family.dim();
  Tensor mean_a({d}), mean_b({d});
  int n_a = 0, n_b = 0;
  for (const auto& [tokens, pole] : spec.prompts) {
    ForwardRecord rec = forward(model, tokens);
    Representation rep = representation_at(rec, model, layer, int(tokens.size()) - 1);
    if (pole == 0) {
      axpy_inplace(mean_a, 1.0, rep.lambda);
      ++n_a;
    } else {
      axpy_inplace(mean_b, 1.0, rep.lambda);
      ++n_b;
    }
  }
  for (int j = 0; j < d; ++j) {
    mean_a(j) /= n_a;
    mean_b(j) /= n_b;
  }
  ConceptDirection c;
  c.v = normalized_or_fail(sub(mean_a, mean_b), "build_concept");
  c.target_set = spec.pole_a;
  c.layer = layer;
  return c;
}

Tensor euclidean_step(const Tensor& lambda, const Tensor& v, double eps) {
  if (!lambda.same_shape(v)) fail(ErrorKind::dimension, "euclidean_step dimension mismatch");
  Tensor out = lambda;
  axpy_inplace(out, eps, v);
  return out;
}

Tensor dual_step(const HessianEstimate& h, const Tensor& lambda, const Tensor& v, double eps,
                 double delta) {
  if (delta <= 0.0) fail(ErrorKind::contract, "dual_step damping must be > 0, got ", delta);
  SymmetricEigen es = eigh(h.matrix);
  Tensor u = damped_inverse_apply(es, delta, v);
  const double n = norm2(u);
  if (!(n > 0.0)) fail(ErrorKind::numeric, "dual direction collapsed to zero");
  Tensor out = lambda;
  axpy_inplace(out, eps / n, u);
  return out;
}

Tensor dual_step(const SoftmaxFamily& family, const Tensor& lambda, const Tensor& v,
                 double eps, double delta, int top_k) {
  const int k = top_k > 0 ? top_k : family.vocab();
  return dual_step(hessian(family, lambda, k), lambda, v, eps, delta);
}

KlResult off_target_kl(const SoftmaxFamily& family, const Tensor& lambda_base,
                       const Tensor& lambda_steered, const std::vector<int>& target_set) {
  check_target_set(family, target_set, /*require_proper=*/true);
  Tensor pb = token_probs(family, lambda_base);
  Tensor ps = token_probs(family, lambda_steered);
  std::vector<bool> in_target(size_t(family.vocab()), false);
  for (int y : target_set) in_target[size_t(y)] = true;

  double mass_b = 0.0, mass_s = 0.0;
  for (int y = 0; y < family.vocab(); ++y) {
    if (in_target[size_t(y)]) continue;
    mass_b += pb(y);
    mass_s += ps(y);
  }
  KlResult out;
  if (mass_b < 1e-12 || mass_s <= 0.0) return out;  // undefined, flagged
  double kl = 0.0;
  for (int y = 0; y < family.vocab(); ++y) {
    if (in_target[size_t(y)]) continue;
    const double qs = ps(y) / mass_s;
    const double qb = pb(y) / mass_b;
    if (qs > 0.0) kl += qs * std::log(qs / qb);
  }
  out.nats = std::max(kl, 0.0);  // clamp -0 style rounding
  out.defined = true;
  return out;
}

SteeringTrace run_steering(const SoftmaxFamily& family, const Tensor& lambda0,
                           const ConceptDirection& concept, SteerMethod method, double eps,
                           int max_steps, const SteerOptions& options) {
  check_target_set(family, concept.target_set, /*require_proper=*/true);
  if (max_steps < 0) fail(ErrorKind::contract, "max_steps must be >= 0");
  const int top_k = options.top_k > 0 ? options.top_k : family.vocab();

  SteeringTrace trace;
  trace.method = method;
  trace.eps = eps;

  Tensor lambda = lambda0;
  auto record = [&](const Tensor& lam) {
    SteeringStepRecord rec;
    Tensor p = token_probs(family, lam);
    rec.p_target = target_mass(p, concept.target_set);
    KlResult kl = off_target_kl(family, lambda0, lam, concept.target_set);
    rec.off_target_kl = kl.nats;
    rec.kl_defined = kl.defined;
    trace.steps.push_back(rec);
    return rec.p_target;
  };

  double p_t = record(lambda);
  if (p_t >= kStopThreshold) {
    trace.stop_step = 0;
    trace.final_lambda = lambda;
    return trace;
  }

  for (int step = 1; step <= max_steps; ++step) {
    if (method == SteerMethod::euclidean) {
      lambda = euclidean_step(lambda, concept.v, eps);
    } else {
      HessianEstimate h = hessian(family, lambda, top_k);
      double tr = 0.0;
      for (int i = 0; i < family.dim(); ++i) tr += h.matrix(i, i);
      const double delta =
          std::max(options.damping_factor * tr / double(family.dim()), 1e-300);
      const Tensor dir = options.dual_direction == DualDirection::concept_vector
                             ? concept.v
                             : grad_log_p_target(family, lambda, concept.target_set);
      if (norm2(dir) <= 0.0) {
        trace.failed = true;
        break;
      }
      lambda = dual_step(h, lambda, dir, eps, delta);
    }
    p_t = record(lambda);
    if (p_t >= kStopThreshold) {
      trace.stop_step = step;
      break;
    }
  }
  if (trace.stop_step < 0) trace.failed = true;
  trace.final_lambda = lambda;
  return trace;
}

KlAdvantage kl_advantage(const std::vector<std::pair<SteeringTrace, SteeringTrace>>& pairs) {
  KlAdvantage out;
  out.n_pairs = int(pairs.size());
  double sum = 0.0;
  for (const auto& [euclid, dual] : pairs) {
    if (euclid.failed) ++out.n_euclid_failed;
    if (dual.failed) ++out.n_dual_failed;
    if (euclid.failed || dual.failed) continue;
    sum += euclid.stop_kl() - dual.stop_kl();
    ++out.n_used;
  }
  if (out.n_used > 0) {
    out.mean = sum / double(out.n_used);
    out.defined = true;
  }
  return out;
}

CosineResult cosine_diagnostic(const HessianEstimate& h, const Tensor& v, CosineMode mode,
                               double damping_factor) {
  const int d = h.matrix.dim(0);
  if (v.rank() != 1 || v.dim(0) != d) {
    fail(ErrorKind::dimension, "cosine_diagnostic dimension mismatch");
  }
  const double vn = norm2(v);
  if (!(vn > 0.0)) fail(ErrorKind::validation, "cosine_diagnostic needs |v| > 0");
  double tr = 0.0;
  for (int i = 0; i < d; ++i) tr += h.matrix(i, i);
  if (tr <= 0.0) return {0.0, true};

  Tensor w;
  if (mode == CosineMode::primal_to_dual) {
    w = matmul(h.matrix, v);
  } else {
    SymmetricEigen es = eigh(h.matrix);
    w = damped_inverse_apply(es, damping_factor * tr / double(d), v);
  }
  const double wn = norm2(w);
  if (wn < 1e-14 * vn * tr / double(d)) return {0.0, true};
  return {dot(v, w) / (vn * wn), false};
}

CosineResult cosine_diagnostic(const SoftmaxFamily& family, const Tensor& lambda,
                               const Tensor& v, CosineMode mode, int top_k,
                               double damping_factor) {
  const int k = top_k > 0 ? top_k : family.vocab();
  return cosine_diagnostic(hessian(family, lambda, k), v, mode, damping_factor);
}

double spearman_rho(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) fail(ErrorKind::contract, "spearman_rho length mismatch");
  const size_t n = xs.size();
  if (n < 2) fail(ErrorKind::contract, "spearman_rho needs at least 2 points");

  auto ranks = [](std::span<const double> v) {
    const size_t m = v.size();
    std::vector<size_t> order(m);
    std::iota(order.begin(), order.end(), size_t(0));
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(m);
    size_t i = 0;
    while (i < m) {
      size_t j = i;
      while (j + 1 < m && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * (double(i) + double(j)) + 1.0;  // average rank on ties
      for (size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };

  std::vector<double> rx = ranks(xs), ry = ranks(ys);
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= double(n);
  my /= double(n);
  double cov = 0.0, vx = 0.0, vy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    cov += (rx[i] - mx) * (ry[i] - my);
    vx += (rx[i] - mx) * (rx[i] - mx);
    vy += (ry[i] - my) * (ry[i] - my);
  }
  if (vx <= 0.0 || vy <= 0.0) return 0.0;
  return cov / std::sqrt(vx * vy);
}

}  // namespace blns
