#include "bregmanlens/autograd.hpp"

#include <cmath>
#include <memory>
#include <utility>

namespace blns {

namespace {
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;
}  // namespace

int GradTape::check(Var v) const {
  if (!v.valid() || v.id >= int(nodes_.size())) {
    fail(ErrorKind::contract, "tape variable id ", v.id, " is not on this tape");
  }
  return v.id;
}

Tensor& GradTape::grad_buf(int id) {
  Node& n = nodes_[size_t(id)];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

GradTape::Var GradTape::push(Tensor value, bool needs_grad, std::function<void(GradTape&)> fn) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.backprop = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{int(nodes_.size()) - 1};
}

GradTape::Var GradTape::leaf(Tensor value, bool requires_grad) {
  return push(std::move(value), requires_grad, nullptr);
}

GradTape::Var GradTape::matmul(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  if (nodes_[size_t(ia)].value.rank() != 2 || nodes_[size_t(ib)].value.rank() != 2) {
    fail(ErrorKind::dimension, "tape matmul needs_grad rank-2 operands");
  }
  Tensor out = blns::matmul(nodes_[size_t(ia)].value, nodes_[size_t(ib)].value);
  const bool req = nodes_[size_t(ia)].needs_grad || nodes_[size_t(ib)].needs_grad;
  const int self = int(nodes_.size());
  return push(std::move(out), req, [ia, ib, self](GradTape& t) {
    const Tensor& go = t.nodes_[size_t(self)].grad;
    if (t.nodes_[size_t(ia)].needs_grad) {
      Tensor ga = blns::matmul_nt(go, t.nodes_[size_t(ib)].value);
      axpy_inplace(t.grad_buf(ia), 1.0, ga);
    }
    if (t.nodes_[size_t(ib)].needs_grad) {
      Tensor gb = blns::matmul_tn(t.nodes_[size_t(ia)].value, go);
      axpy_inplace(t.grad_buf(ib), 1.0, gb);
    }
  });
}

GradTape::Var GradTape::matmul_nt(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  if (nodes_[size_t(ia)].value.rank() != 2 || nodes_[size_t(ib)].value.rank() != 2) {
    fail(ErrorKind::dimension, "tape matmul_nt needs_grad rank-2 operands");
  }
  Tensor out = blns::matmul_nt(nodes_[size_t(ia)].value, nodes_[size_t(ib)].value);
  const bool req = nodes_[size_t(ia)].needs_grad || nodes_[size_t(ib)].needs_grad;
  const int self = int(nodes_.size());
  return push(std::move(out), req, [ia, ib, self](GradTape& t) {
    const Tensor& go = t.nodes_[size_t(self)].grad;
    if (t.nodes_[size_t(ia)].needs_grad) {
      Tensor ga = blns::matmul(go, t.nodes_[size_t(ib)].value);
      axpy_inplace(t.grad_buf(ia), 1.0, ga);
    }
    if (t.nodes_[size_t(ib)].needs_grad) {
      Tensor gb = blns::matmul_tn(go, t.nodes_[size_t(ia)].value);
      axpy_inplace(t.grad_buf(ib), 1.0, gb);
    }
  });
}

GradTape::Var GradTape::add(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  Tensor out = blns::add(nodes_[size_t(ia)].value, nodes_[size_t(ib)].value);
  const bool req = nodes_[size_t(ia)].needs_grad || nodes_[size_t(ib)].needs_grad;
  const int self = int(nodes_.size());
  return push(std::move(out), req, [ia, ib, self](GradTape& t) {
    const Tensor& go = t.nodes_[size_t(self)].grad;
    if (t.nodes_[size_t(ia)].needs_grad) axpy_inplace(t.grad_buf(ia), 1.0, go);
    if (t.nodes_[size_t(ib)].needs_grad) axpy_inplace(t.grad_buf(ib), 1.0, go);
  });
}

GradTape::Var GradTape::sub(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  Tensor out = blns::sub(nodes_[size_t(ia)].value, nodes_[size_t(ib)].value);
  const bool req = nodes_[size_t(ia)].needs_grad || nodes_[size_t(ib)].needs_grad;
  const int self = int(nodes_.size());
  return push(std::move(out), req, [ia, ib, self](GradTape& t) {
    const Tensor& go = t.nodes_[size_t(self)].grad;
    if (t.nodes_[size_t(ia)].needs_grad) axpy_inplace(t.grad_buf(ia), 1.0, go);
    if (t.nodes_[size_t(ib)].needs_grad) axpy_inplace(t.grad_buf(ib), -1.0, go);
  });
}

GradTape::Var GradTape::mul(Var a, Var b) {
  const int ia = check(a), ib = check(b);
  const Tensor& va = nodes_[size_t(ia)].value;
  const Tensor& vb = nodes_[size_t(ib)].value;
  if (!va.same_shape(vb)) fail(ErrorKind::dimension, "mul needs_grad identical shapes");
  Tensor out = va;
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] *= vb.data()[i];
  const bool req = nodes_[size_t(ia)].needs_grad || nodes_[size_t(ib)].needs_grad;
  const int self = int(nodes_.size());
  return push(std::move(out), req, [ia, ib, self](GradTape& t) {
    const Tensor& go = t.nodes_[size_t(self)].grad;
    const Tensor& va2 = t.nodes_[size_t(ia)].value;
    const Tensor& vb2 = t.nodes_[size_t(ib)].value;
    if (t.nodes_[size_t(ia)].needs_grad) {
      Tensor& ga = t.grad_buf(ia);
      for (size_t i = 0; i < ga.size(); ++i) ga.data()[i] += go.data()[i] * vb2.data()[i];
    }
    if (t.nodes_[size_t(ib)].needs_grad) {
      Tensor& gb = t.grad_buf(ib);
      for (size_t i = 0; i < gb.size(); ++i) gb.data()[i] += go.data()[i] * va2.data()[i];
    }
  });
}

GradTape::Var GradTape::scale(Var a, double c) {
  const int ia = check(a);
  Tensor out = blns::scale(nodes_[size_t(ia)].value, c);
  const int self = int(nodes_.size());
  return push(std::move(out), nodes_[size_t(ia)].needs_grad, [ia, c, self](GradTape& t) {
    if (t.nodes_[size_t(ia)].needs_grad) {
      axpy_inplace(t.grad_buf(ia), c, t.nodes_[size_t(self)].grad);
    }
  });
}

GradTape::Var GradTape::add_rowvec(Var a, Var v) {
  const int ia = check(a), iv = check(v);
  const Tensor& va = nodes_[size_t(ia)].value;
  const Tensor& vv = nodes_[size_t(iv)].value;
  if (va.rank() != 2 || vv.rank() != 1 || va.dim(1) != vv.dim(0)) {
    fail(ErrorKind::dimension, "add_rowvec needs_grad [n x d] + [d]");
  }
  const int n = va.dim(0), d = va.dim(1);
  Tensor out = va;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out(i, j) += vv(j);
  const bool req = nodes_[size_t(ia)].needs_grad || nodes_[size_t(iv)].needs_grad;
  const int self = int(nodes_.size());
  return push(std::move(out), req, [ia, iv, n, d, self](GradTape& t) {
    const Tensor& go = t.nodes_[size_t(self)].grad;
    if (t.nodes_[size_t(ia)].needs_grad) axpy_inplace(t.grad_buf(ia), 1.0, go);
    if (t.nodes_[size_t(iv)].needs_grad) {
      Tensor& gv = t.grad_buf(iv);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) gv(j) += go(i, j);
    }
  });
}

GradTape::Var GradTape::add_tiled_rows(Var a, Var b, int times) {
  const int ia = check(a), ib = check(b);
  const Tensor& va = nodes_[size_t(ia)].value;
  const Tensor& vb = nodes_[size_t(ib)].value;
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(1) ||
      va.dim(0) != vb.dim(0) * times) {
    fail(ErrorKind::dimension, "add_tiled_rows needs_grad [t*r x d] + [r x d]");
  }
  const int r = vb.dim(0), d = vb.dim(1);
  Tensor out = va;
  for (int t = 0; t < times; ++t)
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < d; ++j) out(t * r + i, j) += vb(i, j);
  const bool req = nodes_[size_t(ia)].needs_grad || nodes_[size_t(ib)].needs_grad;
  const int self = int(nodes_.size());
  return push(std::move(out), req, [ia, ib, times, r, d, self](GradTape& t) {
    const Tensor& go = t.nodes_[size_t(self)].grad;
    if (t.nodes_[size_t(ia)].needs_grad) axpy_inplace(t.grad_buf(ia), 1.0, go);
    if (t.nodes_[size_t(ib)].needs_grad) {
      Tensor& gb = t.grad_buf(ib);
      for (int k = 0; k < times; ++k)
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < d; ++j) gb(i, j) += go(k * r + i, j);
    }
  });
}

GradTape::Var GradTape::slice_rows(Var a, int begin, int count) {
  const int ia = check(a);
  const Tensor& va = nodes_[size_t(ia)].value;
  if (va.rank() != 2 || begin < 0 || count <= 0 || begin + count > va.dim(0)) {
    fail(ErrorKind::dimension, "slice_rows range out of bounds");
  }
  const int d = va.dim(1);
  Tensor out({count, d});
  std::copy(va.data() + size_t(begin) * size_t(d),
            va.data() + size_t(begin + count) * size_t(d), out.data());
  const int self = int(nodes_.size());
  return push(std::move(out), nodes_[size_t(ia)].needs_grad,
              [ia, begin, count, d, self](GradTape& t) {
                if (!t.nodes_[size_t(ia)].needs_grad) return;
                const Tensor& go = t.nodes_[size_t(self)].grad;
                Tensor& ga = t.grad_buf(ia);
                for (int i = 0; i < count; ++i)
                  for (int j = 0; j < d; ++j) ga(begin + i, j) += go(i, j);
              });
}

GradTape::Var GradTape::slice_cols(Var a, int begin, int count) {
  const int ia = check(a);
  const Tensor& va = nodes_[size_t(ia)].value;
  if (va.rank() != 2 || begin < 0 || count <= 0 || begin + count > va.dim(1)) {
    fail(ErrorKind::dimension, "slice_cols range out of bounds");
  }
  const int n = va.dim(0);
  Tensor out({n, count});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < count; ++j) out(i, j) = va(i, begin + j);
  const int self = int(nodes_.size());
  return push(std::move(out), nodes_[size_t(ia)].needs_grad,
              [ia, begin, count, n, self](GradTape& t) {
                if (!t.nodes_[size_t(ia)].needs_grad) return;
                const Tensor& go = t.nodes_[size_t(self)].grad;
                Tensor& ga = t.grad_buf(ia);
                for (int i = 0; i < n; ++i)
                  for (int j = 0; j < count; ++j) ga(i, begin + j) += go(i, j);
              });
}

GradTape::Var GradTape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorKind::contract, "concat_rows needs at least one part");
  int total = 0, d = -1;
  bool req = false;
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (Var p : parts) {
    const int ip = check(p);
    const Tensor& v = nodes_[size_t(ip)].value;
    if (v.rank() != 2) fail(ErrorKind::dimension, "concat_rows parts must be rank 2");
    if (d < 0) d = v.dim(1);
    if (v.dim(1) != d) fail(ErrorKind::dimension, "concat_rows column mismatch");
    total += v.dim(0);
    req = req || nodes_[size_t(ip)].needs_grad;
    ids.push_back(ip);
  }
  Tensor out({total, d});
  int row = 0;
  for (int ip : ids) {
    const Tensor& v = nodes_[size_t(ip)].value;
    std::copy(v.data(), v.data() + v.size(), out.data() + size_t(row) * size_t(d));
    row += v.dim(0);
  }
  const int self = int(nodes_.size());
  return push(std::move(out), req, [ids, d, self](GradTape& t) {
    const Tensor& go = t.nodes_[size_t(self)].grad;
    int r0 = 0;
    for (int ip : ids) {
      const int nr = t.nodes_[size_t(ip)].value.dim(0);
      if (t.nodes_[size_t(ip)].needs_grad) {
        Tensor& g = t.grad_buf(ip);
        for (int i = 0; i < nr; ++i)
          for (int j = 0; j < d; ++j) g(i, j) += go(r0 + i, j);
      }
      r0 += nr;
    }
  });
}

GradTape::Var GradTape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorKind::contract, "concat_cols needs at least one part");
  int total = 0, n = -1;
  bool req = false;
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (Var p : parts) {
    const int ip = check(p);
    const Tensor& v = nodes_[size_t(ip)].value;
    if (v.rank() != 2) fail(ErrorKind::dimension, "concat_cols parts must be rank 2");
    if (n < 0) n = v.dim(0);
    if (v.dim(0) != n) fail(ErrorKind::dimension, "concat_cols row mismatch");
    total += v.dim(1);
    req = req || nodes_[size_t(ip)].needs_grad;
    ids.push_back(ip);
  }
  Tensor out({n, total});
  int col = 0;
  for (int ip : ids) {
    const Tensor& v = nodes_[size_t(ip)].value;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < v.dim(1); ++j) out(i, col + j) = v(i, j);
    col += v.dim(1);
  }
  const int self = int(nodes_.size());
  return push(std::move(out), req, [ids, n, self](GradTape& t) {
    const Tensor& go = t.nodes_[size_t(self)].grad;
    int c0 = 0;
    for (int ip : ids) {
      const int nc = t.nodes_[size_t(ip)].value.dim(1);
      if (t.nodes_[size_t(ip)].needs_grad) {
        Tensor& g = t.grad_buf(ip);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < nc; ++j) g(i, j) += go(i, c0 + j);
      }
      c0 += nc;
    }
  });
}

GradTape::Var GradTape::embedding_gather(Var table, std::vector<int> ids) {
  const int it = check(table);
  const Tensor& vt = nodes_[size_t(it)].value;
  if (vt.rank() != 2) fail(ErrorKind::dimension, "embedding_gather table must be rank 2");
  const int v = vt.dim(0), d = vt.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= v) fail(ErrorKind::validation, "token id ", id, " out of range [0, ", v, ")");
  }
  Tensor out({int(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy(vt.data() + size_t(ids[i]) * size_t(d), vt.data() + size_t(ids[i] + 1) * size_t(d),
              out.data() + i * size_t(d));
  }
  const int self = int(nodes_.size());
  return push(std::move(out), nodes_[size_t(it)].needs_grad,
              [it, ids = std::move(ids), d, self](GradTape& t) {
                if (!t.nodes_[size_t(it)].needs_grad) return;
                const Tensor& go = t.nodes_[size_t(self)].grad;
                Tensor& g = t.grad_buf(it);
                for (size_t i = 0; i < ids.size(); ++i)
                  for (int j = 0; j < d; ++j) g(ids[i], j) += go(int(i), j);
              });
}

GradTape::Var GradTape::layer_norm_rows(Var x, Var gain, Var bias) {
  const int ix = check(x), ig = check(gain), ib = check(bias);
  const Tensor& vx = nodes_[size_t(ix)].value;
  const Tensor& vg = nodes_[size_t(ig)].value;
  const Tensor& vb = nodes_[size_t(ib)].value;
  if (vx.rank() != 2 || vx.dim(1) < 2) fail(ErrorKind::dimension, "layer_norm_rows needs_grad [n x d], d >= 2");
  if (vg.rank() != 1 || vg.dim(0) != vx.dim(1) || !vg.same_shape(vb)) {
    fail(ErrorKind::dimension, "layer_norm_rows gain/bias must be [d]");
  }
  const int n = vx.dim(0), d = vx.dim(1);
  Tensor out({n, d});
  // xhat and inv_std are needed by the adjoint; shared_ptr keeps them alive.
  auto xhat = std::make_shared<Tensor>(std::vector<int>{n, d});
  auto inv_std = std::make_shared<std::vector<double>>(size_t(n));
  for (int i = 0; i < n; ++i) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += vx(i, j);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = vx(i, j) - mean;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[size_t(i)] = is;
    for (int j = 0; j < d; ++j) {
      const double xh = (vx(i, j) - mean) * is;
      (*xhat)(i, j) = xh;
      out(i, j) = vg(j) * xh + vb(j);
    }
  }
  const bool req = nodes_[size_t(ix)].needs_grad || nodes_[size_t(ig)].needs_grad ||
                   nodes_[size_t(ib)].needs_grad;
  const int self = int(nodes_.size());
  return push(std::move(out), req, [ix, ig, ib, xhat, inv_std, n, d, self](GradTape& t) {
    const Tensor& go = t.nodes_[size_t(self)].grad;
    const Tensor& vg2 = t.nodes_[size_t(ig)].value;
    if (t.nodes_[size_t(ig)].needs_grad) {
      Tensor& gg = t.grad_buf(ig);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) gg(j) += go(i, j) * (*xhat)(i, j);
    }
    if (t.nodes_[size_t(ib)].needs_grad) {
      Tensor& gb = t.grad_buf(ib);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) gb(j) += go(i, j);
    }
    if (t.nodes_[size_t(ix)].needs_grad) {
      Tensor& gx = t.grad_buf(ix);
      for (int i = 0; i < n; ++i) {
        double mean_h = 0.0, mean_hx = 0.0;
        for (int j = 0; j < d; ++j) {
          const double h = go(i, j) * vg2(j);
          mean_h += h;
          mean_hx += h * (*xhat)(i, j);
        }
        mean_h /= d;
        mean_hx /= d;
        const double is = (*inv_std)[size_t(i)];
        for (int j = 0; j < d; ++j) {
          const double h = go(i, j) * vg2(j);
          gx(i, j) += is * (h - mean_h - (*xhat)(i, j) * mean_hx);
        }
      }
    }
  });
}

GradTape::Var GradTape::gelu(Var x) {
  const int ix = check(x);
  const Tensor& vx = nodes_[size_t(ix)].value;
  Tensor out = vx;
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = vx.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluK * (v + kGeluC * v * v * v)));
  }
  const int self = int(nodes_.size());
  return push(std::move(out), nodes_[size_t(ix)].needs_grad, [ix, self](GradTape& t) {
    if (!t.nodes_[size_t(ix)].needs_grad) return;
    const Tensor& go = t.nodes_[size_t(self)].grad;
    const Tensor& vx2 = t.nodes_[size_t(ix)].value;
    Tensor& gx = t.grad_buf(ix);
    for (size_t i = 0; i < gx.size(); ++i) {
      const double v = vx2.data()[i];
      const double u = kGeluK * (v + kGeluC * v * v * v);
      const double th = std::tanh(u);
      const double du = kGeluK * (1.0 + 3.0 * kGeluC * v * v);
      const double dy = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
      gx.data()[i] += go.data()[i] * dy;
    }
  });
}

GradTape::Var GradTape::sigmoid(Var x) {
  const int ix = check(x);
  const Tensor& vx = nodes_[size_t(ix)].value;
  Tensor out = vx;
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] = 1.0 / (1.0 + std::exp(-vx.data()[i]));
  const int self = int(nodes_.size());
  return push(std::move(out), nodes_[size_t(ix)].needs_grad, [ix, self](GradTape& t) {
    if (!t.nodes_[size_t(ix)].needs_grad) return;
    const Tensor& go = t.nodes_[size_t(self)].grad;
    const Tensor& y = t.nodes_[size_t(self)].value;
    Tensor& gx = t.grad_buf(ix);
    for (size_t i = 0; i < gx.size(); ++i) {
      gx.data()[i] += go.data()[i] * y.data()[i] * (1.0 - y.data()[i]);
    }
  });
}

GradTape::Var GradTape::causal_softmax_scaled(Var x, double sc) {
  const int ix = check(x);
  const Tensor& vx = nodes_[size_t(ix)].value;
  if (vx.rank() != 2 || vx.dim(0) != vx.dim(1)) {
    fail(ErrorKind::dimension, "causal_softmax needs_grad a square score matrix");
  }
  const int n = vx.dim(0);
  Tensor out({n, n});
  for (int i = 0; i < n; ++i) {
    double m = vx(i, 0) * sc;
    for (int j = 1; j <= i; ++j) m = std::max(m, vx(i, j) * sc);
    double sum = 0.0;
    for (int j = 0; j <= i; ++j) {
      const double e = std::exp(vx(i, j) * sc - m);
      out(i, j) = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j <= i; ++j) out(i, j) *= inv;
  }
  const int self = int(nodes_.size());
  return push(std::move(out), nodes_[size_t(ix)].needs_grad, [ix, sc, n, self](GradTape& t) {
    if (!t.nodes_[size_t(ix)].needs_grad) return;
    const Tensor& go = t.nodes_[size_t(self)].grad;
    const Tensor& p = t.nodes_[size_t(self)].value;
    Tensor& gx = t.grad_buf(ix);
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int j = 0; j <= i; ++j) acc += go(i, j) * p(i, j);
      for (int j = 0; j <= i; ++j) gx(i, j) += sc * p(i, j) * (go(i, j) - acc);
    }
  });
}

GradTape::Var GradTape::sum_all(Var x) {
  const int ix = check(x);
  const Tensor& vx = nodes_[size_t(ix)].value;
  double s = 0.0;
  for (size_t i = 0; i < vx.size(); ++i) s += vx.data()[i];
  const int self = int(nodes_.size());
  return push(Tensor::scalar(s), nodes_[size_t(ix)].needs_grad, [ix, self](GradTape& t) {
    if (!t.nodes_[size_t(ix)].needs_grad) return;
    const double g = t.nodes_[size_t(self)].grad.item();
    Tensor& gx = t.grad_buf(ix);
    for (size_t i = 0; i < gx.size(); ++i) gx.data()[i] += g;
  });
}

GradTape::Var GradTape::mean_all(Var x) {
  const int ix = check(x);
  const size_t n = nodes_[size_t(ix)].value.size();
  Var s = sum_all(x);
  return scale(s, 1.0 / double(n));
}

GradTape::Var GradTape::cross_entropy_mean(Var logits, std::vector<int> targets) {
  const int il = check(logits);
  const Tensor& vl = nodes_[size_t(il)].value;
  if (vl.rank() != 2) fail(ErrorKind::dimension, "cross_entropy logits must be [n x vocab]");
  const int n = vl.dim(0), vocab = vl.dim(1);
  if (int(targets.size()) != n) {
    fail(ErrorKind::dimension, "cross_entropy needs one target per logit row");
  }
  for (int tgt : targets) {
    if (tgt < 0 || tgt >= vocab) fail(ErrorKind::validation, "target id ", tgt, " out of range");
  }
  // Softmax rows are stored for the adjoint.
  auto probs = std::make_shared<Tensor>(std::vector<int>{n, vocab});
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* row = vl.data() + size_t(i) * size_t(vocab);
    double m = row[0];
    for (int j = 1; j < vocab; ++j) m = std::max(m, row[j]);
    double sum = 0.0;
    for (int j = 0; j < vocab; ++j) sum += std::exp(row[j] - m);
    const double lse = m + std::log(sum);
    total += lse - row[targets[size_t(i)]];
    const double inv = 1.0 / sum;
    double* prow = probs->data() + size_t(i) * size_t(vocab);
    for (int j = 0; j < vocab; ++j) prow[j] = std::exp(row[j] - m) * inv;
  }
  const int self = int(nodes_.size());
  return push(Tensor::scalar(total / n), nodes_[size_t(il)].needs_grad,
              [il, targets = std::move(targets), probs, n, vocab, self](GradTape& t) {
                if (!t.nodes_[size_t(il)].needs_grad) return;
                const double g = t.nodes_[size_t(self)].grad.item() / n;
                Tensor& gl = t.grad_buf(il);
                for (int i = 0; i < n; ++i) {
                  const double* prow = probs->data() + size_t(i) * size_t(vocab);
                  double* grow = gl.data() + size_t(i) * size_t(vocab);
                  for (int j = 0; j < vocab; ++j) grow[j] += g * prow[j];
                  grow[targets[size_t(i)]] -= g;
                }
              });
}

void GradTape::backward(Var loss) {
  const int il = check(loss);
  if (nodes_[size_t(il)].value.size() != 1) {
    fail(ErrorKind::contract, "backward needs_grad a scalar loss, got ",
         nodes_[size_t(il)].value.size(), " elements");
  }
  grad_buf(il).data()[0] = 1.0;
  for (int id = il; id >= 0; --id) {
    Node& n = nodes_[size_t(id)];
    if (!n.needs_grad || n.grad.empty() || !n.backprop) continue;
    n.backprop(*this);
  }
  ran_backward_ = true;
}

const Tensor& GradTape::grad(Var v) {
  const int id = check(v);
  if (!ran_backward_) fail(ErrorKind::contract, "grad() called before backward()");
  return grad_buf(id);
}

}  // namespace blns
