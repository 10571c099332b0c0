#include "duet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "duet/param_store.hpp"

namespace duet {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void mm_nn(const double* a, const double* b, double* c, int n, int k, int m) {
  std::memset(c, 0, sizeof(double) * static_cast<size_t>(n) * m);
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<size_t>(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[n,m] = a[n,k] * b[m,k]^T
void mm_nt(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
}

// c[k,m] += a[n,k]^T * b[n,m]
void mm_tn_acc(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    const double* brow = b + static_cast<size_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + static_cast<size_t>(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[n,m] += a[n,k] * b[k,m]
void mm_nn_acc(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<size_t>(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[n,m] += a[n,k] * b[m,k]^T
void mm_nt_acc(const double* a, const double* b, double* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  t.shape = std::move(shape);
  t.data.assign(static_cast<size_t>(t.numel()), 0.0);
  return t;
}

Tensor Tensor::vec(std::vector<double> values) {
  Tensor t;
  t.shape = {static_cast<int>(values.size())};
  t.data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.shape = {1};
  t.data = {v};
  return t;
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> values) {
  Tensor t;
  t.shape = {rows, cols};
  if (values.empty()) {
    t.data.assign(static_cast<size_t>(rows) * cols, 0.0);
  } else {
    if (static_cast<int64_t>(values.size()) != static_cast<int64_t>(rows) * cols)
      throw ShapeError("Tensor::matrix: value count does not match " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    t.data = std::move(values);
  }
  return t;
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void Tape::check_finite(const Tensor& t, const char* op) {
  for (double v : t.data) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> bw) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad && grad_enabled_;
  if (node.requires_grad) node.backward = std::move(bw);
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor t) {
  check_finite(t, "constant");
  return push(std::move(t), false, nullptr);
}

Var Tape::leaf(Tensor t, bool requires_grad) {
  check_finite(t, "leaf");
  return push(std::move(t), requires_grad, nullptr);
}

Var Tape::param(ParamStore& store, const std::string& name) {
  Parameter& p = store.at(name);
  for (const auto& [ptr, idx] : param_cache_) {
    if (ptr == &p) return Var{idx};
  }
  Var v = push(p.value, true, nullptr);
  nodes_[v.idx].bound_param = grad_enabled_ ? &p : nullptr;
  param_cache_.emplace_back(&p, v.idx);
  return v;
}

void Tape::ensure_grad(int idx) {
  Node& n = nodes_[idx];
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows())
    throw ShapeError("matmul: incompatible shapes " + ta.shape_str() + " x " + tb.shape_str());
  const int n = ta.rows(), k = ta.cols(), m = tb.cols();
  Tensor out = Tensor::zeros({n, m});
  mm_nn(ta.data.data(), tb.data.data(), out.data.data(), n, k, m);
  check_finite(out, "matmul");
  bool rg = nodes_[a.idx].requires_grad || nodes_[b.idx].requires_grad;
  Var self;
  self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, b, si, n, k, m](Tape& t) {
      const Tensor& g = t.nodes_[si].grad;
      if (t.nodes_[a.idx].requires_grad) {
        t.ensure_grad(a.idx);
        mm_nt_acc(g.data.data(), t.val(b).data.data(), t.grad_mut(a).data.data(), n, m, k);
      }
      if (t.nodes_[b.idx].requires_grad) {
        t.ensure_grad(b.idx);
        mm_tn_acc(t.val(a).data.data(), g.data.data(), t.grad_mut(b).data.data(), n, k, m);
      }
    };
  }
  return self;
}

Var Tape::matmul_nt(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols())
    throw ShapeError("matmul_nt: incompatible shapes " + ta.shape_str() + " x " + tb.shape_str());
  const int n = ta.rows(), k = ta.cols(), m = tb.rows();
  Tensor out = Tensor::zeros({n, m});
  mm_nt(ta.data.data(), tb.data.data(), out.data.data(), n, k, m);
  check_finite(out, "matmul_nt");
  bool rg = nodes_[a.idx].requires_grad || nodes_[b.idx].requires_grad;
  Var self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, b, si, n, k, m](Tape& t) {
      // out = A B^T: dA += G B, dB += G^T A
      const Tensor& g = t.nodes_[si].grad;
      if (t.nodes_[a.idx].requires_grad) {
        t.ensure_grad(a.idx);
        mm_nn_acc(g.data.data(), t.val(b).data.data(), t.grad_mut(a).data.data(), n, m, k);
      }
      if (t.nodes_[b.idx].requires_grad) {
        t.ensure_grad(b.idx);
        mm_tn_acc(g.data.data(), t.val(a).data.data(), t.grad_mut(b).data.data(), n, m, k);
      }
    };
  }
  return self;
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb))
    throw ShapeError("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
  check_finite(out, "add");
  bool rg = nodes_[a.idx].requires_grad || nodes_[b.idx].requires_grad;
  Var self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, b, si](Tape& t) {
      const Tensor& g = t.nodes_[si].grad;
      for (Var p : {a, b}) {
        if (!t.nodes_[p.idx].requires_grad) continue;
        t.ensure_grad(p.idx);
        Tensor& pg = t.grad_mut(p);
        for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i];
      }
    };
  }
  return self;
}

Var Tape::sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var Tape::add_rowvec(Var a, Var row) {
  const Tensor& ta = val(a);
  const Tensor& tr = val(row);
  if (ta.rank() != 2 || tr.rank() != 1 || ta.cols() != tr.cols())
    throw ShapeError("add_rowvec: shape mismatch " + ta.shape_str() + " vs " + tr.shape_str());
  Tensor out = ta;
  const int n = ta.rows(), m = ta.cols();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.data[static_cast<size_t>(i) * m + j] += tr.data[j];
  check_finite(out, "add_rowvec");
  bool rg = nodes_[a.idx].requires_grad || nodes_[row.idx].requires_grad;
  Var self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, row, si, n, m](Tape& t) {
      const Tensor& g = t.nodes_[si].grad;
      if (t.nodes_[a.idx].requires_grad) {
        t.ensure_grad(a.idx);
        Tensor& pg = t.grad_mut(a);
        for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i];
      }
      if (t.nodes_[row.idx].requires_grad) {
        t.ensure_grad(row.idx);
        Tensor& rg2 = t.grad_mut(row);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) rg2.data[j] += g.data[static_cast<size_t>(i) * m + j];
      }
    };
  }
  return self;
}

Var Tape::add_scalar_var(Var a, Var s) {
  const Tensor& ta = val(a);
  const Tensor& ts = val(s);
  if (ts.numel() != 1) throw ShapeError("add_scalar_var: scalar operand has shape " + ts.shape_str());
  Tensor out = ta;
  const double sv = ts.data[0];
  for (double& v : out.data) v += sv;
  check_finite(out, "add_scalar_var");
  bool rg = nodes_[a.idx].requires_grad || nodes_[s.idx].requires_grad;
  Var self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, s, si](Tape& t) {
      const Tensor& g = t.nodes_[si].grad;
      if (t.nodes_[a.idx].requires_grad) {
        t.ensure_grad(a.idx);
        Tensor& pg = t.grad_mut(a);
        for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i];
      }
      if (t.nodes_[s.idx].requires_grad) {
        t.ensure_grad(s.idx);
        double acc = 0.0;
        for (double v : g.data) acc += v;
        t.grad_mut(s).data[0] += acc;
      }
    };
  }
  return self;
}

Var Tape::mul_scalar_var(Var a, Var s) {
  const Tensor& ta = val(a);
  const Tensor& ts = val(s);
  if (ts.numel() != 1) throw ShapeError("mul_scalar_var: scalar operand has shape " + ts.shape_str());
  Tensor out = ta;
  const double sv = ts.data[0];
  for (double& v : out.data) v *= sv;
  check_finite(out, "mul_scalar_var");
  bool rg = nodes_[a.idx].requires_grad || nodes_[s.idx].requires_grad;
  Var self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, s, si](Tape& t) {
      const Tensor& g = t.nodes_[si].grad;
      const double sv2 = t.val(s).data[0];
      if (t.nodes_[a.idx].requires_grad) {
        t.ensure_grad(a.idx);
        Tensor& pg = t.grad_mut(a);
        for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i] * sv2;
      }
      if (t.nodes_[s.idx].requires_grad) {
        t.ensure_grad(s.idx);
        const Tensor& av = t.val(a);
        double acc = 0.0;
        for (size_t i = 0; i < g.data.size(); ++i) acc += g.data[i] * av.data[i];
        t.grad_mut(s).data[0] += acc;
      }
    };
  }
  return self;
}

Var Tape::mul_elem(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb))
    throw ShapeError("mul_elem: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
  check_finite(out, "mul_elem");
  bool rg = nodes_[a.idx].requires_grad || nodes_[b.idx].requires_grad;
  Var self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, b, si](Tape& t) {
      const Tensor& g = t.nodes_[si].grad;
      if (t.nodes_[a.idx].requires_grad) {
        t.ensure_grad(a.idx);
        Tensor& pg = t.grad_mut(a);
        const Tensor& bv = t.val(b);
        for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i] * bv.data[i];
      }
      if (t.nodes_[b.idx].requires_grad) {
        t.ensure_grad(b.idx);
        Tensor& pg = t.grad_mut(b);
        const Tensor& av = t.val(a);
        for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i] * av.data[i];
      }
    };
  }
  return self;
}

Var Tape::scale(Var a, double c) {
  Tensor out = val(a);
  for (double& v : out.data) v *= c;
  check_finite(out, "scale");
  Var self = push(std::move(out), nodes_[a.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, c, si](Tape& t) {
      t.ensure_grad(a.idx);
      const Tensor& g = t.nodes_[si].grad;
      Tensor& pg = t.grad_mut(a);
      for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i] * c;
    };
  }
  return self;
}

Var Tape::add_const(Var a, const Tensor& t) {
  const Tensor& ta = val(a);
  if (!ta.same_shape(t))
    throw ShapeError("add_const: shape mismatch " + ta.shape_str() + " vs " + t.shape_str());
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += t.data[i];
  Var self = push(std::move(out), nodes_[a.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, si](Tape& tp) {
      tp.ensure_grad(a.idx);
      const Tensor& g = tp.nodes_[si].grad;
      Tensor& pg = tp.grad_mut(a);
      for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i];
    };
  }
  return self;
}

Var Tape::gelu(Var a) {
  Tensor out = val(a);
  for (double& v : out.data) v = gelu_fwd(v);
  check_finite(out, "gelu");
  Var self = push(std::move(out), nodes_[a.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, si](Tape& t) {
      t.ensure_grad(a.idx);
      const Tensor& g = t.nodes_[si].grad;
      const Tensor& x = t.val(a);
      Tensor& pg = t.grad_mut(a);
      for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i] * gelu_grad(x.data[i]);
    };
  }
  return self;
}

Var Tape::sigmoid(Var a) {
  Tensor out = val(a);
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  check_finite(out, "sigmoid");
  Var self = push(std::move(out), nodes_[a.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, si](Tape& t) {
      t.ensure_grad(a.idx);
      const Tensor& g = t.nodes_[si].grad;
      const Tensor& y = t.nodes_[si].value;
      Tensor& pg = t.grad_mut(a);
      for (size_t i = 0; i < g.data.size(); ++i)
        pg.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
    };
  }
  return self;
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gamma);
  const Tensor& tb = val(beta);
  if (tx.rank() != 2 || tg.rank() != 1 || tb.rank() != 1 || tg.cols() != tx.cols() ||
      tb.cols() != tx.cols())
    throw ShapeError("layer_norm: shape mismatch x=" + tx.shape_str() + " gamma=" +
                     tg.shape_str() + " beta=" + tb.shape_str());
  const int n = tx.rows(), m = tx.cols();
  Tensor out = Tensor::zeros({n, m});
  Tensor xhat = Tensor::zeros({n, m});
  std::vector<double> inv_std(n);
  for (int i = 0; i < n; ++i) {
    const double* row = tx.data.data() + static_cast<size_t>(i) * m;
    double mean = 0.0;
    for (int j = 0; j < m; ++j) mean += row[j];
    mean /= m;
    double var = 0.0;
    for (int j = 0; j < m; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= m;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (int j = 0; j < m; ++j) {
      const double xh = (row[j] - mean) * is;
      xhat.data[static_cast<size_t>(i) * m + j] = xh;
      out.data[static_cast<size_t>(i) * m + j] = tg.data[j] * xh + tb.data[j];
    }
  }
  check_finite(out, "layer_norm");
  bool rg = nodes_[x.idx].requires_grad || nodes_[gamma.idx].requires_grad ||
            nodes_[beta.idx].requires_grad;
  Var self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
    nodes_[si].backward = [x, gamma, beta, si, n, m, xh, is](Tape& t) {
      const Tensor& g = t.nodes_[si].grad;
      const Tensor& tg2 = t.val(gamma);
      if (t.nodes_[beta.idx].requires_grad) {
        t.ensure_grad(beta.idx);
        Tensor& bg = t.grad_mut(beta);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) bg.data[j] += g.data[static_cast<size_t>(i) * m + j];
      }
      if (t.nodes_[gamma.idx].requires_grad) {
        t.ensure_grad(gamma.idx);
        Tensor& gg = t.grad_mut(gamma);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j)
            gg.data[j] += g.data[static_cast<size_t>(i) * m + j] *
                          xh->data[static_cast<size_t>(i) * m + j];
      }
      if (t.nodes_[x.idx].requires_grad) {
        t.ensure_grad(x.idx);
        Tensor& xg = t.grad_mut(x);
        for (int i = 0; i < n; ++i) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int j = 0; j < m; ++j) {
            const size_t o = static_cast<size_t>(i) * m + j;
            const double dxh = g.data[o] * tg2.data[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh->data[o];
          }
          mean_dxhat /= m;
          mean_dxhat_xhat /= m;
          for (int j = 0; j < m; ++j) {
            const size_t o = static_cast<size_t>(i) * m + j;
            const double dxh = g.data[o] * tg2.data[j];
            xg.data[o] += (*is)[i] * (dxh - mean_dxhat - xh->data[o] * mean_dxhat_xhat);
          }
        }
      }
    };
  }
  return self;
}

Var Tape::softmax_rows(Var logits) {
  const Tensor& tl = val(logits);
  const int n = tl.rows(), m = tl.cols();
  Tensor out = tl.rank() == 1 ? Tensor::zeros({m}) : Tensor::zeros({n, m});
  for (int i = 0; i < n; ++i) {
    const double* row = tl.data.data() + static_cast<size_t>(i) * m;
    double* orow = out.data.data() + static_cast<size_t>(i) * m;
    double mx = -1.0;
    bool any = false;
    for (int j = 0; j < m; ++j) {
      if (is_masked_value(row[j])) continue;
      mx = any ? std::max(mx, row[j]) : row[j];
      any = true;
    }
    if (!any) throw DataError("softmax: empty action set");
    double z = 0.0;
    for (int j = 0; j < m; ++j) {
      if (is_masked_value(row[j])) {
        orow[j] = 0.0;
      } else {
        orow[j] = std::exp(row[j] - mx);
        z += orow[j];
      }
    }
    for (int j = 0; j < m; ++j) orow[j] /= z;
  }
  check_finite(out, "softmax");
  Var self = push(std::move(out), nodes_[logits.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [logits, si, n, m](Tape& t) {
      t.ensure_grad(logits.idx);
      const Tensor& g = t.nodes_[si].grad;
      const Tensor& y = t.nodes_[si].value;
      Tensor& pg = t.grad_mut(logits);
      for (int i = 0; i < n; ++i) {
        const size_t base = static_cast<size_t>(i) * m;
        double dot = 0.0;
        for (int j = 0; j < m; ++j) dot += g.data[base + j] * y.data[base + j];
        for (int j = 0; j < m; ++j)
          pg.data[base + j] += y.data[base + j] * (g.data[base + j] - dot);
      }
    };
  }
  return self;
}

Var Tape::embedding(Var table, const std::vector<int>& ids) {
  const Tensor& tt = val(table);
  if (tt.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + tt.shape_str());
  const int rows = tt.rows(), d = tt.cols();
  for (int id : ids)
    if (id < 0 || id >= rows)
      throw DataError("embedding: index " + std::to_string(id) + " out of range [0," +
                      std::to_string(rows) + ")");
  const int n = static_cast<int>(ids.size());
  Tensor out = Tensor::zeros({n, d});
  for (int i = 0; i < n; ++i)
    std::memcpy(out.data.data() + static_cast<size_t>(i) * d,
                tt.data.data() + static_cast<size_t>(ids[i]) * d, sizeof(double) * d);
  Var self = push(std::move(out), nodes_[table.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    nodes_[si].backward = [table, si, d, ids_copy](Tape& t) {
      t.ensure_grad(table.idx);
      const Tensor& g = t.nodes_[si].grad;
      Tensor& pg = t.grad_mut(table);
      for (size_t i = 0; i < ids_copy->size(); ++i) {
        double* dst = pg.data.data() + static_cast<size_t>((*ids_copy)[i]) * d;
        const double* src = g.data.data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return self;
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  int cols = val(parts[0]).cols();
  int total = 0;
  bool rg = false;
  for (Var p : parts) {
    const Tensor& tp = val(p);
    if (tp.cols() != cols)
      throw ShapeError("concat_rows: column mismatch " + tp.shape_str());
    total += tp.rows();
    rg = rg || nodes_[p.idx].requires_grad;
  }
  Tensor out = Tensor::zeros({total, cols});
  int r = 0;
  for (Var p : parts) {
    const Tensor& tp = val(p);
    std::memcpy(out.data.data() + static_cast<size_t>(r) * cols, tp.data.data(),
                sizeof(double) * tp.data.size());
    r += tp.rows();
  }
  Var self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    auto parts_copy = std::make_shared<std::vector<Var>>(parts);
    nodes_[si].backward = [si, cols, parts_copy](Tape& t) {
      const Tensor& g = t.nodes_[si].grad;
      int row = 0;
      for (Var p : *parts_copy) {
        const int pr = t.val(p).rows();
        if (t.nodes_[p.idx].requires_grad) {
          t.ensure_grad(p.idx);
          Tensor& pg = t.grad_mut(p);
          for (size_t i = 0; i < pg.data.size(); ++i)
            pg.data[i] += g.data[static_cast<size_t>(row) * cols + i];
        }
        row += pr;
      }
    };
  }
  return self;
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  int rows = val(parts[0]).rows();
  int total = 0;
  bool rg = false;
  for (Var p : parts) {
    const Tensor& tp = val(p);
    if (tp.rows() != rows)
      throw ShapeError("concat_cols: row mismatch " + tp.shape_str());
    total += tp.cols();
    rg = rg || nodes_[p.idx].requires_grad;
  }
  Tensor out = Tensor::zeros({rows, total});
  int c0 = 0;
  for (Var p : parts) {
    const Tensor& tp = val(p);
    const int pc = tp.cols();
    for (int i = 0; i < rows; ++i)
      std::memcpy(out.data.data() + static_cast<size_t>(i) * total + c0,
                  tp.data.data() + static_cast<size_t>(i) * pc, sizeof(double) * pc);
    c0 += pc;
  }
  Var self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    auto parts_copy = std::make_shared<std::vector<Var>>(parts);
    nodes_[si].backward = [si, rows, total, parts_copy](Tape& t) {
      const Tensor& g = t.nodes_[si].grad;
      int col = 0;
      for (Var p : *parts_copy) {
        const int pc = t.val(p).cols();
        if (t.nodes_[p.idx].requires_grad) {
          t.ensure_grad(p.idx);
          Tensor& pg = t.grad_mut(p);
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < pc; ++j)
              pg.data[static_cast<size_t>(i) * pc + j] +=
                  g.data[static_cast<size_t>(i) * total + col + j];
        }
        col += pc;
      }
    };
  }
  return self;
}

Var Tape::slice_rows(Var a, int r0, int r1) {
  const Tensor& ta = val(a);
  if (ta.rank() != 2 || r0 < 0 || r1 > ta.rows() || r0 >= r1)
    throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") for " + ta.shape_str());
  const int m = ta.cols();
  Tensor out = Tensor::zeros({r1 - r0, m});
  std::memcpy(out.data.data(), ta.data.data() + static_cast<size_t>(r0) * m,
              sizeof(double) * out.data.size());
  Var self = push(std::move(out), nodes_[a.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, si, r0, m](Tape& t) {
      t.ensure_grad(a.idx);
      const Tensor& g = t.nodes_[si].grad;
      Tensor& pg = t.grad_mut(a);
      for (size_t i = 0; i < g.data.size(); ++i)
        pg.data[static_cast<size_t>(r0) * m + i] += g.data[i];
    };
  }
  return self;
}

Var Tape::slice_cols(Var a, int c0, int c1) {
  const Tensor& ta = val(a);
  if (ta.rank() != 2 || c0 < 0 || c1 > ta.cols() || c0 >= c1)
    throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") for " + ta.shape_str());
  const int n = ta.rows(), m = ta.cols(), w = c1 - c0;
  Tensor out = Tensor::zeros({n, w});
  for (int i = 0; i < n; ++i)
    std::memcpy(out.data.data() + static_cast<size_t>(i) * w,
                ta.data.data() + static_cast<size_t>(i) * m + c0, sizeof(double) * w);
  Var self = push(std::move(out), nodes_[a.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, si, c0, n, m, w](Tape& t) {
      t.ensure_grad(a.idx);
      const Tensor& g = t.nodes_[si].grad;
      Tensor& pg = t.grad_mut(a);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j)
          pg.data[static_cast<size_t>(i) * m + c0 + j] += g.data[static_cast<size_t>(i) * w + j];
    };
  }
  return self;
}

Var Tape::flatten(Var a) {
  const Tensor& ta = val(a);
  Tensor out;
  out.shape = {static_cast<int>(ta.data.size())};
  out.data = ta.data;
  Var self = push(std::move(out), nodes_[a.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, si](Tape& t) {
      t.ensure_grad(a.idx);
      const Tensor& g = t.nodes_[si].grad;
      Tensor& pg = t.grad_mut(a);
      for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i];
    };
  }
  return self;
}

Var Tape::mean_rows(Var a) {
  const Tensor& ta = val(a);
  if (ta.rank() != 2) throw ShapeError("mean_rows: expected 2-D, got " + ta.shape_str());
  const int n = ta.rows(), m = ta.cols();
  Tensor out = Tensor::zeros({m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.data[j] += ta.data[static_cast<size_t>(i) * m + j];
  for (double& v : out.data) v /= n;
  Var self = push(std::move(out), nodes_[a.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, si, n, m](Tape& t) {
      t.ensure_grad(a.idx);
      const Tensor& g = t.nodes_[si].grad;
      Tensor& pg = t.grad_mut(a);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) pg.data[static_cast<size_t>(i) * m + j] += g.data[j] / n;
    };
  }
  return self;
}

Var Tape::sum(Var a) {
  const Tensor& ta = val(a);
  double acc = 0.0;
  for (double v : ta.data) acc += v;
  Var self = push(Tensor::scalar(acc), nodes_[a.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [a, si](Tape& t) {
      t.ensure_grad(a.idx);
      const double g = t.nodes_[si].grad.data[0];
      for (double& v : t.grad_mut(a).data) v += g;
    };
  }
  return self;
}

Var Tape::gather(Var v, const std::vector<int>& idx) {
  const Tensor& tv = val(v);
  if (tv.rank() != 1) throw ShapeError("gather: expected 1-D, got " + tv.shape_str());
  Tensor out = Tensor::zeros({static_cast<int>(idx.size())});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= tv.cols())
      throw DataError("gather: index " + std::to_string(idx[i]) + " out of range");
    out.data[i] = tv.data[idx[i]];
  }
  Var self = push(std::move(out), nodes_[v.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    auto idx_copy = std::make_shared<std::vector<int>>(idx);
    nodes_[si].backward = [v, si, idx_copy](Tape& t) {
      t.ensure_grad(v.idx);
      const Tensor& g = t.nodes_[si].grad;
      Tensor& pg = t.grad_mut(v);
      for (size_t i = 0; i < idx_copy->size(); ++i) pg.data[(*idx_copy)[i]] += g.data[i];
    };
  }
  return self;
}

Var Tape::sum_selected(Var v, const std::vector<int>& idx) {
  const Tensor& tv = val(v);
  if (tv.rank() != 1) throw ShapeError("sum_selected: expected 1-D, got " + tv.shape_str());
  double acc = 0.0;
  for (int i : idx) {
    if (i < 0 || i >= tv.cols())
      throw DataError("sum_selected: index " + std::to_string(i) + " out of range");
    acc += tv.data[i];
  }
  Var self = push(Tensor::scalar(acc), nodes_[v.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    auto idx_copy = std::make_shared<std::vector<int>>(idx);
    nodes_[si].backward = [v, si, idx_copy](Tape& t) {
      t.ensure_grad(v.idx);
      const double g = t.nodes_[si].grad.data[0];
      Tensor& pg = t.grad_mut(v);
      for (int i : *idx_copy) pg.data[i] += g;
    };
  }
  return self;
}

namespace {

// Shared log-softmax pieces for CE/KL: returns (max, logZ) over unmasked.
std::pair<double, double> masked_logsumexp(const Tensor& t) {
  double mx = 0.0;
  bool any = false;
  for (double v : t.data) {
    if (is_masked_value(v)) continue;
    mx = any ? std::max(mx, v) : v;
    any = true;
  }
  if (!any) throw DataError("softmax: empty action set");
  double z = 0.0;
  for (double v : t.data)
    if (!is_masked_value(v)) z += std::exp(v - mx);
  return {mx, mx + std::log(z)};
}

}  // namespace

Var Tape::cross_entropy(Var logits, int target) {
  const Tensor& tl = val(logits);
  if (tl.rank() != 1) throw ShapeError("cross_entropy: expected 1-D logits, got " + tl.shape_str());
  if (target < 0 || target >= tl.cols())
    throw DataError("cross_entropy: target index " + std::to_string(target) + " out of range [0," +
                    std::to_string(tl.cols()) + ")");
  if (is_masked_value(tl.data[target]))
    throw DataError("cross_entropy: target index " + std::to_string(target) + " is masked");
  const auto [mx, logz] = masked_logsumexp(tl);
  (void)mx;
  const double loss = logz - tl.data[target];
  Var self = push(Tensor::scalar(loss), nodes_[logits.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    nodes_[si].backward = [logits, si, target, logz = logz](Tape& t) {
      t.ensure_grad(logits.idx);
      const double g = t.nodes_[si].grad.data[0];
      const Tensor& lv = t.val(logits);
      Tensor& pg = t.grad_mut(logits);
      for (int j = 0; j < lv.cols(); ++j) {
        if (is_masked_value(lv.data[j])) continue;
        const double p = std::exp(lv.data[j] - logz);
        pg.data[j] += g * (p - (j == target ? 1.0 : 0.0));
      }
    };
  }
  return self;
}

Var Tape::kl_divergence(const Tensor& p_target, Var logits) {
  const Tensor& tl = val(logits);
  if (tl.rank() != 1 || p_target.rank() != 1 || p_target.cols() != tl.cols())
    throw ShapeError("kl_divergence: shape mismatch p=" + p_target.shape_str() + " logits=" +
                     tl.shape_str());
  double psum = 0.0;
  for (double p : p_target.data) {
    if (p < 0.0) throw DataError("kl_divergence: negative probability in target");
    psum += p;
  }
  if (std::abs(psum - 1.0) > 1e-6)
    throw DataError("kl_divergence: target does not sum to 1 (sum=" + std::to_string(psum) + ")");
  const auto [mx, logz] = masked_logsumexp(tl);
  (void)mx;
  double loss = 0.0;
  for (int j = 0; j < tl.cols(); ++j) {
    const double p = p_target.data[j];
    if (p <= 0.0) continue;
    if (is_masked_value(tl.data[j]))
      throw DataError("kl_divergence: target mass on masked logit " + std::to_string(j));
    loss += p * (std::log(p) - (tl.data[j] - logz));
  }
  Var self = push(Tensor::scalar(loss), nodes_[logits.idx].requires_grad, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    auto pt = std::make_shared<Tensor>(p_target);
    nodes_[si].backward = [logits, si, pt, logz = logz](Tape& t) {
      t.ensure_grad(logits.idx);
      const double g = t.nodes_[si].grad.data[0];
      const Tensor& lv = t.val(logits);
      Tensor& pg = t.grad_mut(logits);
      for (int j = 0; j < lv.cols(); ++j) {
        if (is_masked_value(lv.data[j])) continue;
        const double q = std::exp(lv.data[j] - logz);
        pg.data[j] += g * (q - pt->data[j]);
      }
    };
  }
  return self;
}

Var Tape::compose_scores(Var source, Var fill, const std::vector<ComposeSlot>& slots) {
  const Tensor& ts = val(source);
  if (ts.rank() != 1) throw ShapeError("compose_scores: expected 1-D source, got " + ts.shape_str());
  const bool has_fill = fill.valid();
  Tensor out = Tensor::zeros({static_cast<int>(slots.size())});
  for (size_t i = 0; i < slots.size(); ++i) {
    switch (slots[i].kind) {
      case ComposeSlot::kCopy:
        if (slots[i].src_index < 0 || slots[i].src_index >= ts.cols())
          throw DataError("compose_scores: source index out of range");
        out.data[i] = ts.data[slots[i].src_index];
        break;
      case ComposeSlot::kFill:
        if (!has_fill) throw DataError("compose_scores: fill slot without fill var");
        out.data[i] = val(fill).data[0];
        break;
      case ComposeSlot::kMask:
        out.data[i] = kNegInf;
        break;
    }
  }
  bool rg = nodes_[source.idx].requires_grad || (has_fill && nodes_[fill.idx].requires_grad);
  Var self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    auto slots_copy = std::make_shared<std::vector<ComposeSlot>>(slots);
    nodes_[si].backward = [source, fill, si, slots_copy, has_fill](Tape& t) {
      const Tensor& g = t.nodes_[si].grad;
      const bool src_rg = t.nodes_[source.idx].requires_grad;
      const bool fill_rg = has_fill && t.nodes_[fill.idx].requires_grad;
      if (src_rg) t.ensure_grad(source.idx);
      if (fill_rg) t.ensure_grad(fill.idx);
      for (size_t i = 0; i < slots_copy->size(); ++i) {
        const auto& s = (*slots_copy)[i];
        if (s.kind == ComposeSlot::kCopy && src_rg)
          t.grad_mut(source).data[s.src_index] += g.data[i];
        else if (s.kind == ComposeSlot::kFill && fill_rg)
          t.grad_mut(fill).data[0] += g.data[i];
      }
    };
  }
  return self;
}

Var Tape::fuse_scores(Var a, Var b, Var sigma, const std::vector<uint8_t>& mask) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  const Tensor& ts = val(sigma);
  if (ta.rank() != 1 || !ta.same_shape(tb))
    throw ShapeError("fuse_scores: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  if (ts.numel() != 1) throw ShapeError("fuse_scores: sigma must be scalar");
  if (mask.size() != ta.data.size()) throw ShapeError("fuse_scores: mask length mismatch");
  const double sv = ts.data[0];
  Tensor out = Tensor::zeros({ta.cols()});
  for (int j = 0; j < ta.cols(); ++j)
    out.data[j] = mask[j] ? kNegInf : sv * ta.data[j] + (1.0 - sv) * tb.data[j];
  bool rg = nodes_[a.idx].requires_grad || nodes_[b.idx].requires_grad ||
            nodes_[sigma.idx].requires_grad;
  Var self = push(std::move(out), rg, nullptr);
  if (nodes_[self.idx].requires_grad) {
    int si = self.idx;
    auto mask_copy = std::make_shared<std::vector<uint8_t>>(mask);
    nodes_[si].backward = [a, b, sigma, si, mask_copy](Tape& t) {
      const Tensor& g = t.nodes_[si].grad;
      const double sv2 = t.val(sigma).data[0];
      const Tensor& av = t.val(a);
      const Tensor& bv = t.val(b);
      const bool arg = t.nodes_[a.idx].requires_grad;
      const bool brg = t.nodes_[b.idx].requires_grad;
      const bool srg = t.nodes_[sigma.idx].requires_grad;
      if (arg) t.ensure_grad(a.idx);
      if (brg) t.ensure_grad(b.idx);
      if (srg) t.ensure_grad(sigma.idx);
      double sacc = 0.0;
      for (int j = 0; j < av.cols(); ++j) {
        if ((*mask_copy)[j]) continue;
        if (arg) t.grad_mut(a).data[j] += g.data[j] * sv2;
        if (brg) t.grad_mut(b).data[j] += g.data[j] * (1.0 - sv2);
        sacc += g.data[j] * (av.data[j] - bv.data[j]);
      }
      if (srg) t.grad_mut(sigma).data[0] += sacc;
    };
  }
  return self;
}

void Tape::backward(Var loss) {
  if (!grad_enabled_) throw DataError("backward: gradients are disabled on this tape");
  Node& ln = nodes_[loss.idx];
  if (ln.value.numel() != 1) throw DataError("backward: loss must be scalar");
  // Interior and parameter-bound grads are per-pass scratch (parameters
  // accumulate in the store, plain leaves accumulate on the tape).
  for (Node& n : nodes_) {
    if (!n.grad.data.empty() && (n.backward || n.bound_param != nullptr))
      std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
  }
  ensure_grad(loss.idx);
  grad_mut(loss).data[0] += 1.0;
  for (int i = loss.idx; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.data.empty()) continue;
    if (n.backward) n.backward(*this);
    if (n.bound_param != nullptr) {
      Tensor& pg = n.bound_param->grad;
      for (size_t j = 0; j < n.grad.data.size(); ++j) pg.data[j] += n.grad.data[j];
    }
  }
}

std::vector<double> softmax_masked(const std::vector<double>& logits) {
  double mx = 0.0;
  bool any = false;
  for (double v : logits) {
    if (is_masked_value(v)) continue;
    mx = any ? std::max(mx, v) : v;
    any = true;
  }
  if (!any) throw DataError("softmax: empty action set");
  std::vector<double> out(logits.size(), 0.0);
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    if (is_masked_value(logits[i])) continue;
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

int argmax_unmasked(const std::vector<double>& scores) {
  int best = -1;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (is_masked_value(scores[i])) continue;
    if (best < 0 || scores[i] > scores[best]) best = static_cast<int>(i);
  }
  if (best < 0) throw DataError("argmax: empty action set");
  return best;
}

}  // namespace duet
