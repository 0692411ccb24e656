#include "gaze/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "gemm.hpp"

namespace gaze {

namespace {

bool track(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Strides of `shape` within the coordinate system of a broadcast target
// of rank `rank`; broadcast dims get stride 0.
std::vector<int64_t> bc_strides(const Shape& shape, const Shape& out, size_t rank) {
  std::vector<int64_t> strides(rank, 0);
  int64_t s = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    size_t di = shape.size() - 1 - i;
    size_t oi = rank - 1 - i;
    strides[oi] = (shape[di] == 1 && out[oi] != 1) ? 0 : s;
    s *= shape[di];
  }
  return strides;
}

struct BcPlan {
  Shape out_shape;
  std::vector<int64_t> sa, sb;
};

BcPlan make_bc_plan(const Shape& a, const Shape& b, const char* op) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ContractError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                          " are not broadcast-compatible");
    }
    out[rank - 1 - i] = std::max(da, db);
  }
  return BcPlan{out, bc_strides(a, out, rank), bc_strides(b, out, rank)};
}

// Invokes f(out_index, a_index, b_index) over the broadcast iteration
// space in row-major order.
template <typename F>
void bc_foreach(const BcPlan& p, F&& f) {
  const size_t rank = p.out_shape.size();
  const int64_t n = shape_numel(p.out_shape);
  if (n == 0) return;
  bool trivial = true;
  {
    int64_t s = 1;
    for (size_t i = 0; i < rank; ++i) {
      size_t d = rank - 1 - i;
      if (p.sa[d] != s || p.sb[d] != s) {
        trivial = false;
        break;
      }
      s *= p.out_shape[d];
    }
  }
  if (trivial) {
    for (int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  std::vector<int64_t> coord(rank, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (size_t d = rank; d-- > 0;) {
      ++coord[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (coord[d] < p.out_shape[d]) break;
      ia -= p.sa[d] * p.out_shape[d];
      ib -= p.sb[d] * p.out_shape[d];
      coord[d] = 0;
    }
  }
}

Tensor binary_bc(const Tensor& a, const Tensor& b, const char* op, double (*fwd)(double, double),
                 void (*bwd)(double g, double av, double bv, double& da, double& db)) {
  BcPlan plan = make_bc_plan(a.shape(), b.shape(), op);
  Tensor out = Tensor::zeros(plan.out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.mutable_values();
  bc_foreach(plan, [&](int64_t oi, int64_t ai, int64_t bi) { ov[oi] = fwd(av[ai], bv[bi]); });
  if (track({&a, &b})) {
    out.record_op({a, b}, [plan, bwd](const detail::TensorImpl& o) {
      Tensor pa = o.parents[0];
      Tensor pb = o.parents[1];
      const bool ga = pa.requires_grad();
      const bool gb = pb.requires_grad();
      double* da = ga ? pa.ensure_grad().data() : nullptr;
      double* db = gb ? pb.ensure_grad().data() : nullptr;
      const auto& avals = pa.values();
      const auto& bvals = pb.values();
      double dummy = 0.0;
      bc_foreach(plan, [&](int64_t oi, int64_t ai, int64_t bi) {
        bwd(o.grad[oi], avals[ai], bvals[bi], da ? da[ai] : dummy, db ? db[bi] : dummy);
      });
    });
  }
  return out;
}

Tensor unary(const Tensor& a, double (*fwd)(double), double (*deriv)(double)) {
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.mutable_values();
  for (size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
  if (track({&a})) {
    out.record_op({a}, [deriv](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      auto& dg = p.ensure_grad();
      const auto& pv = p.values();
      for (size_t i = 0; i < pv.size(); ++i) dg[i] += o.grad[i] * deriv(pv[i]);
    });
  }
  return out;
}

int64_t leading_rows(const Tensor& x) { return x.numel() / x.dim(-1); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_bc(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double, double& da, double& db) {
        da += g;
        db += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_bc(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double, double& da, double& db) {
        da += g;
        db -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_bc(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double x, double y, double& da, double& db) {
        da += g * y;
        db += g * x;
      });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.values();
  auto& ov = out.mutable_values();
  for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * s;
  if (track({&a})) {
    out.record_op({a}, [s](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      auto& dg = p.ensure_grad();
      for (size_t i = 0; i < dg.size(); ++i) dg[i] += o.grad[i] * s;
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
      [](double x) {
        double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
        double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        return cdf + x * pdf;
      });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor out({1}, {s});
  if (track({&a})) {
    out.record_op({a}, [](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      auto& dg = p.ensure_grad();
      const double g = o.grad[0];
      for (double& d : dg) d += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor out({1}, {s * inv});
  if (track({&a})) {
    out.record_op({a}, [inv](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      auto& dg = p.ensure_grad();
      const double g = o.grad[0] * inv;
      for (double& d : dg) d += g;
    });
  }
  return out;
}

Tensor spatial_mean(const Tensor& x) {
  if (x.ndim() != 4) throw ContractError("spatial_mean: expected [n,c,h,w], got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({n, c});
  const double inv = 1.0 / static_cast<double>(hw);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  for (int64_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    const double* p = xv.data() + i * hw;
    for (int64_t j = 0; j < hw; ++j) s += p[j];
    ov[i] = s * inv;
  }
  if (track({&x})) {
    out.record_op({x}, [hw, inv](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      auto& dg = p.ensure_grad();
      for (size_t i = 0; i < o.grad.size(); ++i) {
        const double g = o.grad[i] * inv;
        double* d = dg.data() + static_cast<int64_t>(i) * hw;
        for (int64_t j = 0; j < hw; ++j) d[j] += g;
      }
    });
  }
  return out;
}

namespace {

struct MatmulPlan {
  Shape out_shape;
  int64_t m, k, p, batches;
  std::vector<int64_t> a_base, b_base;  // per-batch matrix offsets, in matrix units
};

MatmulPlan make_matmul_plan(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw ContractError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                        " and " + shape_str(b.shape()));
  }
  if (a.dim(-1) != b.dim(-2)) {
    throw ContractError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  BcPlan bc = make_bc_plan(abatch, bbatch, "matmul");

  MatmulPlan plan;
  plan.m = a.dim(-2);
  plan.k = a.dim(-1);
  plan.p = b.dim(-1);
  plan.out_shape = bc.out_shape;
  plan.out_shape.push_back(plan.m);
  plan.out_shape.push_back(plan.p);
  plan.batches = shape_numel(bc.out_shape);
  plan.a_base.reserve(plan.batches);
  plan.b_base.reserve(plan.batches);
  bc_foreach(bc, [&](int64_t, int64_t ai, int64_t bi) {
    plan.a_base.push_back(ai);
    plan.b_base.push_back(bi);
  });
  return plan;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  MatmulPlan plan = make_matmul_plan(a, b);
  Tensor out = Tensor::zeros(plan.out_shape);
  const int64_t asz = plan.m * plan.k, bsz = plan.k * plan.p, osz = plan.m * plan.p;
  {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = out.mutable_values().data();
    for (int64_t i = 0; i < plan.batches; ++i) {
      detail::gemm_nn(av + plan.a_base[i] * asz, bv + plan.b_base[i] * bsz, ov + i * osz, plan.m,
                      plan.k, plan.p, false);
    }
  }
  if (track({&a, &b})) {
    out.record_op({a, b}, [plan, asz, bsz, osz](const detail::TensorImpl& o) {
      Tensor pa = o.parents[0];
      Tensor pb = o.parents[1];
      const double* g = o.grad.data();
      if (pa.requires_grad()) {
        double* da = pa.ensure_grad().data();
        const double* bv = pb.values().data();
        for (int64_t i = 0; i < plan.batches; ++i) {
          // dA = G * B^T
          detail::gemm_nt(g + i * osz, bv + plan.b_base[i] * bsz, da + plan.a_base[i] * asz,
                          plan.m, plan.p, plan.k, true);
        }
      }
      if (pb.requires_grad()) {
        double* db = pb.ensure_grad().data();
        const double* av = pa.values().data();
        for (int64_t i = 0; i < plan.batches; ++i) {
          // dB = A^T * G
          detail::gemm_tn(av + plan.a_base[i] * asz, g + i * osz, db + plan.b_base[i] * bsz,
                          plan.k, plan.m, plan.p, true);
        }
      }
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  if (x.ndim() < 1 || x.dim(-1) < 1) {
    throw ContractError("softmax_rows: need a non-empty last dimension");
  }
  x.check_finite("softmax_rows input");
  const int64_t m = x.dim(-1);
  const int64_t rows = leading_rows(x);
  Tensor out = Tensor::zeros(x.shape());
  const double* xv = x.values().data();
  double* ov = out.mutable_values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = xv + r * m;
    double* o = ov + r * m;
    double mx = in[0];
    for (int64_t j = 1; j < m; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < m; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < m; ++j) o[j] *= inv;
  }
  if (track({&x})) {
    out.record_op({x}, [m, rows](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      double* dx = p.ensure_grad().data();
      const double* y = o.values.data();
      const double* g = o.grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* yr = y + r * m;
        const double* gr = g + r * m;
        double dot = 0.0;
        for (int64_t j = 0; j < m; ++j) dot += gr[j] * yr[j];
        double* d = dx + r * m;
        for (int64_t j = 0; j < m; ++j) d[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

namespace {

void transpose_copy(const double* src, double* dst, int64_t batches, int64_t r, int64_t c) {
  for (int64_t b = 0; b < batches; ++b) {
    const double* s = src + b * r * c;
    double* d = dst + b * r * c;
    for (int64_t i = 0; i < r; ++i) {
      for (int64_t j = 0; j < c; ++j) d[j * r + i] = s[i * c + j];
    }
  }
}

}  // namespace

Tensor transpose_last2(const Tensor& x) {
  if (x.ndim() < 2) throw ContractError("transpose_last2: rank must be >= 2");
  const int64_t r = x.dim(-2), c = x.dim(-1);
  const int64_t batches = x.numel() / (r * c);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Tensor out = Tensor::zeros(out_shape);
  transpose_copy(x.values().data(), out.mutable_values().data(), batches, r, c);
  if (track({&x})) {
    out.record_op({x}, [batches, r, c](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      double* dx = p.ensure_grad().data();
      std::vector<double> tmp(o.grad.size());
      transpose_copy(o.grad.data(), tmp.data(), batches, c, r);
      for (size_t i = 0; i < tmp.size(); ++i) dx[i] += tmp[i];
    });
  }
  return out;
}

namespace {

void swap12_copy(const double* src, double* dst, int64_t a, int64_t b, int64_t c, int64_t d) {
  for (int64_t i = 0; i < a; ++i) {
    for (int64_t j = 0; j < b; ++j) {
      for (int64_t k = 0; k < c; ++k) {
        std::memcpy(dst + ((i * c + k) * b + j) * d, src + ((i * b + j) * c + k) * d,
                    static_cast<size_t>(d) * sizeof(double));
      }
    }
  }
}

}  // namespace

Tensor transpose_12(const Tensor& x) {
  if (x.ndim() != 4) throw ContractError("transpose_12: expected rank 4, got " + shape_str(x.shape()));
  const int64_t a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  Tensor out = Tensor::zeros({a, c, b, d});
  swap12_copy(x.values().data(), out.mutable_values().data(), a, b, c, d);
  if (track({&x})) {
    out.record_op({x}, [a, b, c, d](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      double* dx = p.ensure_grad().data();
      std::vector<double> tmp(o.grad.size());
      swap12_copy(o.grad.data(), tmp.data(), a, c, b, d);
      for (size_t i = 0; i < tmp.size(); ++i) dx[i] += tmp[i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ContractError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), x.values());
  if (track({&x})) {
    out.record_op({x}, [](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      auto& dg = p.ensure_grad();
      for (size_t i = 0; i < dg.size(); ++i) dg[i] += o.grad[i];
    });
  }
  return out;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  BcPlan plan = make_bc_plan(x.shape(), shape, "broadcast_to");
  if (plan.out_shape != shape) {
    throw ContractError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " +
                        shape_str(shape));
  }
  Tensor out = Tensor::zeros(shape);
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  bc_foreach(plan, [&](int64_t oi, int64_t ai, int64_t) { ov[oi] = xv[ai]; });
  if (track({&x})) {
    out.record_op({x}, [plan](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      double* dg = p.ensure_grad().data();
      bc_foreach(plan, [&](int64_t oi, int64_t ai, int64_t) { dg[ai] += o.grad[oi]; });
    });
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.ndim() != b.ndim() || a.ndim() < 2) {
    throw ContractError("concat_rows: rank mismatch for " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
  }
  for (size_t i = 0; i < a.ndim(); ++i) {
    if (i == a.ndim() - 2) continue;
    if (a.shape()[i] != b.shape()[i]) {
      throw ContractError("concat_rows: non-row dims disagree for " + shape_str(a.shape()) +
                          " and " + shape_str(b.shape()));
    }
  }
  const int64_t ra = a.dim(-2), rb = b.dim(-2), d = a.dim(-1);
  const int64_t batches = a.numel() / (ra * d);
  Shape out_shape = a.shape();
  out_shape[out_shape.size() - 2] = ra + rb;
  Tensor out = Tensor::zeros(out_shape);
  {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = out.mutable_values().data();
    for (int64_t i = 0; i < batches; ++i) {
      std::memcpy(ov + i * (ra + rb) * d, av + i * ra * d, static_cast<size_t>(ra * d) * sizeof(double));
      std::memcpy(ov + (i * (ra + rb) + ra) * d, bv + i * rb * d,
                  static_cast<size_t>(rb * d) * sizeof(double));
    }
  }
  if (track({&a, &b})) {
    out.record_op({a, b}, [batches, ra, rb, d](const detail::TensorImpl& o) {
      Tensor pa = o.parents[0];
      Tensor pb = o.parents[1];
      const double* g = o.grad.data();
      if (pa.requires_grad()) {
        double* da = pa.ensure_grad().data();
        for (int64_t i = 0; i < batches; ++i) {
          const double* gr = g + i * (ra + rb) * d;
          double* dr = da + i * ra * d;
          for (int64_t j = 0; j < ra * d; ++j) dr[j] += gr[j];
        }
      }
      if (pb.requires_grad()) {
        double* db = pb.ensure_grad().data();
        for (int64_t i = 0; i < batches; ++i) {
          const double* gr = g + (i * (ra + rb) + ra) * d;
          double* dr = db + i * rb * d;
          for (int64_t j = 0; j < rb * d; ++j) dr[j] += gr[j];
        }
      }
    });
  }
  return out;
}

Tensor slice_row(const Tensor& x, int64_t row) {
  if (x.ndim() < 2) throw ContractError("slice_row: rank must be >= 2");
  const int64_t s = x.dim(-2), d = x.dim(-1);
  if (row < 0 || row >= s) {
    throw ContractError("slice_row: row " + std::to_string(row) + " out of range for " +
                        shape_str(x.shape()));
  }
  const int64_t batches = x.numel() / (s * d);
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  out_shape.push_back(d);
  Tensor out = Tensor::zeros(out_shape);
  {
    const double* xv = x.values().data();
    double* ov = out.mutable_values().data();
    for (int64_t i = 0; i < batches; ++i) {
      std::memcpy(ov + i * d, xv + (i * s + row) * d, static_cast<size_t>(d) * sizeof(double));
    }
  }
  if (track({&x})) {
    out.record_op({x}, [batches, s, d, row](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      double* dx = p.ensure_grad().data();
      const double* g = o.grad.data();
      for (int64_t i = 0; i < batches; ++i) {
        double* dr = dx + (i * s + row) * d;
        const double* gr = g + i * d;
        for (int64_t j = 0; j < d; ++j) dr[j] += gr[j];
      }
    });
  }
  return out;
}

Tensor image_to_patches(const Tensor& x, int64_t grid_h, int64_t grid_w) {
  if (x.ndim() != 4) throw ContractError("image_to_patches: expected [n,c,h,w]");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (grid_h <= 0 || grid_w <= 0 || h % grid_h != 0 || w % grid_w != 0) {
    throw ContractError("image_to_patches: grid " + std::to_string(grid_h) + "x" +
                        std::to_string(grid_w) + " does not divide " + shape_str(x.shape()));
  }
  const int64_t ph = h / grid_h, pw = w / grid_w;
  const int64_t cells = grid_h * grid_w, vec = c * ph * pw;
  Tensor out = Tensor::zeros({n, cells, vec});
  const double* xv = x.values().data();
  double* ov = out.mutable_values().data();
  for (int64_t img = 0; img < n; ++img) {
    for (int64_t gy = 0; gy < grid_h; ++gy) {
      for (int64_t gx = 0; gx < grid_w; ++gx) {
        double* cell = ov + (img * cells + gy * grid_w + gx) * vec;
        for (int64_t ci = 0; ci < c; ++ci) {
          for (int64_t py = 0; py < ph; ++py) {
            const double* src = xv + ((img * c + ci) * h + gy * ph + py) * w + gx * pw;
            std::memcpy(cell + (ci * ph + py) * pw, src, static_cast<size_t>(pw) * sizeof(double));
          }
        }
      }
    }
  }
  if (track({&x})) {
    out.record_op({x}, [n, c, h, w, grid_h, grid_w, ph, pw, cells, vec](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      double* dx = p.ensure_grad().data();
      const double* g = o.grad.data();
      for (int64_t img = 0; img < n; ++img) {
        for (int64_t gy = 0; gy < grid_h; ++gy) {
          for (int64_t gx = 0; gx < grid_w; ++gx) {
            const double* cell = g + (img * cells + gy * grid_w + gx) * vec;
            for (int64_t ci = 0; ci < c; ++ci) {
              for (int64_t py = 0; py < ph; ++py) {
                double* dst = dx + ((img * c + ci) * h + gy * ph + py) * w + gx * pw;
                const double* src = cell + (ci * ph + py) * pw;
                for (int64_t px = 0; px < pw; ++px) dst[px] += src[px];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.ndim() != 2 || b.ndim() != 1 || w.dim(0) != b.dim(0)) {
    throw ContractError("linear: weight/bias shapes inconsistent: " + shape_str(w.shape()) + ", " +
                        shape_str(b.shape()));
  }
  const int64_t in = w.dim(1), out_f = w.dim(0);
  if (x.dim(-1) != in) {
    throw ContractError("linear: input width " + shape_str(x.shape()) + " does not match weight " +
                        shape_str(w.shape()));
  }
  const int64_t rows = leading_rows(x);
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor out = Tensor::zeros(out_shape);
  {
    double* ov = out.mutable_values().data();
    detail::gemm_nt(x.values().data(), w.values().data(), ov, rows, in, out_f, false);
    const double* bv = b.values().data();
    for (int64_t r = 0; r < rows; ++r) {
      double* o = ov + r * out_f;
      for (int64_t j = 0; j < out_f; ++j) o[j] += bv[j];
    }
  }
  if (track({&x, &w, &b})) {
    out.record_op({x, w, b}, [rows, in, out_f](const detail::TensorImpl& o) {
      Tensor px = o.parents[0];
      Tensor pw = o.parents[1];
      Tensor pb = o.parents[2];
      const double* g = o.grad.data();
      if (px.requires_grad()) {
        // dX = G * W
        detail::gemm_nn(g, pw.values().data(), px.ensure_grad().data(), rows, out_f, in, true);
      }
      if (pw.requires_grad()) {
        // dW = G^T * X
        detail::gemm_tn(g, px.values().data(), pw.ensure_grad().data(), out_f, rows, in, true);
      }
      if (pb.requires_grad()) {
        double* db = pb.ensure_grad().data();
        for (int64_t r = 0; r < rows; ++r) {
          const double* gr = g + r * out_f;
          for (int64_t j = 0; j < out_f; ++j) db[j] += gr[j];
        }
      }
    });
  }
  return out;
}

namespace {

struct ConvDims {
  int64_t n, cin, h, w, cout, kh, kw, oh, ow, stride, pad, kcols;
};

ConvDims conv_dims(const Tensor& x, const Tensor& kernel, int64_t stride, int64_t padding) {
  if (x.ndim() != 4 || kernel.ndim() != 4) {
    throw ContractError("conv2d: expected x [n,c,h,w] and kernel [o,c,kh,kw]");
  }
  ConvDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = kernel.dim(0);
  d.kh = kernel.dim(2);
  d.kw = kernel.dim(3);
  d.stride = stride;
  d.pad = padding;
  if (kernel.dim(1) != d.cin) {
    throw ContractError("conv2d: channel mismatch, input " + shape_str(x.shape()) + " vs kernel " +
                        shape_str(kernel.shape()));
  }
  if (stride < 1 || padding < 0) throw ContractError("conv2d: invalid stride/padding");
  if (d.kh > d.h + 2 * padding || d.kw > d.w + 2 * padding) {
    throw ContractError("conv2d: kernel " + shape_str(kernel.shape()) +
                        " larger than padded input " + shape_str(x.shape()));
  }
  d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
  d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
  d.kcols = d.cin * d.kh * d.kw;
  return d;
}

// Gather one image into columns [oh*ow, cin*kh*kw].
void im2col(const double* img, const ConvDims& d, double* cols) {
  for (int64_t oy = 0; oy < d.oh; ++oy) {
    for (int64_t ox = 0; ox < d.ow; ++ox) {
      double* col = cols + (oy * d.ow + ox) * d.kcols;
      const int64_t iy0 = oy * d.stride - d.pad;
      const int64_t ix0 = ox * d.stride - d.pad;
      for (int64_t ci = 0; ci < d.cin; ++ci) {
        const double* chan = img + ci * d.h * d.w;
        for (int64_t ky = 0; ky < d.kh; ++ky) {
          const int64_t iy = iy0 + ky;
          double* crow = col + (ci * d.kh + ky) * d.kw;
          if (iy < 0 || iy >= d.h) {
            std::memset(crow, 0, static_cast<size_t>(d.kw) * sizeof(double));
            continue;
          }
          for (int64_t kx = 0; kx < d.kw; ++kx) {
            const int64_t ix = ix0 + kx;
            crow[kx] = (ix >= 0 && ix < d.w) ? chan[iy * d.w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvDims& d, double* img) {
  for (int64_t oy = 0; oy < d.oh; ++oy) {
    for (int64_t ox = 0; ox < d.ow; ++ox) {
      const double* col = cols + (oy * d.ow + ox) * d.kcols;
      const int64_t iy0 = oy * d.stride - d.pad;
      const int64_t ix0 = ox * d.stride - d.pad;
      for (int64_t ci = 0; ci < d.cin; ++ci) {
        double* chan = img + ci * d.h * d.w;
        for (int64_t ky = 0; ky < d.kh; ++ky) {
          const int64_t iy = iy0 + ky;
          if (iy < 0 || iy >= d.h) continue;
          const double* crow = col + (ci * d.kh + ky) * d.kw;
          for (int64_t kx = 0; kx < d.kw; ++kx) {
            const int64_t ix = ix0 + kx;
            if (ix >= 0 && ix < d.w) chan[iy * d.w + ix] += crow[kx];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int64_t stride,
              int64_t padding) {
  ConvDims d = conv_dims(x, kernel, stride, padding);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != d.cout)) {
    throw ContractError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match kernel");
  }
  Tensor out = Tensor::zeros({d.n, d.cout, d.oh, d.ow});
  const int64_t ohw = d.oh * d.ow;
  {
    std::vector<double> cols(static_cast<size_t>(ohw * d.kcols));
    const double* xv = x.values().data();
    const double* kv = kernel.values().data();
    double* ov = out.mutable_values().data();
    for (int64_t img = 0; img < d.n; ++img) {
      im2col(xv + img * d.cin * d.h * d.w, d, cols.data());
      // out[img] [cout, ohw] = K [cout, kcols] * cols^T
      detail::gemm_nt(kv, cols.data(), ov + img * d.cout * ohw, d.cout, d.kcols, ohw, false);
    }
    if (has_bias) {
      const double* bv = bias.values().data();
      for (int64_t img = 0; img < d.n; ++img) {
        for (int64_t co = 0; co < d.cout; ++co) {
          double* o = ov + (img * d.cout + co) * ohw;
          const double b = bv[co];
          for (int64_t j = 0; j < ohw; ++j) o[j] += b;
        }
      }
    }
  }
  std::vector<Tensor> parents = has_bias ? std::vector<Tensor>{x, kernel, bias}
                                         : std::vector<Tensor>{x, kernel};
  bool want = false;
  for (const Tensor& p : parents) want = want || p.requires_grad();
  if (grad_enabled() && want) {
    out.record_op(std::move(parents), [d, ohw, has_bias](const detail::TensorImpl& o) {
      Tensor px = o.parents[0];
      Tensor pk = o.parents[1];
      const double* g = o.grad.data();
      const double* xv = px.values().data();
      std::vector<double> cols(static_cast<size_t>(ohw * d.kcols));
      const bool need_x = px.requires_grad();
      const bool need_k = pk.requires_grad();
      double* dx = need_x ? px.ensure_grad().data() : nullptr;
      double* dk = need_k ? pk.ensure_grad().data() : nullptr;
      std::vector<double> dcols(need_x ? static_cast<size_t>(ohw * d.kcols) : 0);
      for (int64_t img = 0; img < d.n; ++img) {
        const double* gimg = g + img * d.cout * ohw;
        if (need_k) {
          im2col(xv + img * d.cin * d.h * d.w, d, cols.data());
          // dK += G_img [cout, ohw] * cols [ohw, kcols]
          detail::gemm_nn(gimg, cols.data(), dk, d.cout, ohw, d.kcols, true);
        }
        if (need_x) {
          // dcols [ohw, kcols] = G_img^T * K
          detail::gemm_tn(gimg, pk.values().data(), dcols.data(), ohw, d.cout, d.kcols, false);
          col2im_add(dcols.data(), d, dx + img * d.cin * d.h * d.w);
        }
      }
      if (has_bias && o.parents[2].requires_grad()) {
        Tensor pb = o.parents[2];
        double* db = pb.ensure_grad().data();
        for (int64_t img = 0; img < d.n; ++img) {
          for (int64_t co = 0; co < d.cout; ++co) {
            const double* gr = g + (img * d.cout + co) * ohw;
            double s = 0.0;
            for (int64_t j = 0; j < ohw; ++j) s += gr[j];
            db[co] += s;
          }
        }
      }
    });
  }
  return out;
}

Tensor maxpool2d(const Tensor& x, int64_t k, int64_t stride) {
  if (x.ndim() != 4) throw ContractError("maxpool2d: expected [n,c,h,w]");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k < 1 || stride < 1 || k > h || k > w) {
    throw ContractError("maxpool2d: window " + std::to_string(k) + " invalid for " +
                        shape_str(x.shape()));
  }
  const int64_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  Tensor out = Tensor::zeros({n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c * oh * ow));
  {
    const double* xv = x.values().data();
    double* ov = out.mutable_values().data();
    int64_t oi = 0;
    for (int64_t img = 0; img < n * c; ++img) {
      const double* chan = xv + img * h * w;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox, ++oi) {
          int64_t best = (oy * stride) * w + ox * stride;
          double bv = chan[best];
          for (int64_t ky = 0; ky < k; ++ky) {
            for (int64_t kx = 0; kx < k; ++kx) {
              const int64_t idx = (oy * stride + ky) * w + ox * stride + kx;
              if (chan[idx] > bv) {
                bv = chan[idx];
                best = idx;
              }
            }
          }
          ov[oi] = bv;
          (*argmax)[oi] = img * h * w + best;
        }
      }
    }
  }
  if (track({&x})) {
    out.record_op({x}, [argmax](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      double* dx = p.ensure_grad().data();
      for (size_t i = 0; i < o.grad.size(); ++i) dx[(*argmax)[i]] += o.grad[i];
    });
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double epsilon) {
  const int64_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ContractError("layernorm: affine params " + shape_str(gamma.shape()) +
                        " do not match last dim of " + shape_str(x.shape()));
  }
  const int64_t rows = leading_rows(x);
  Tensor out = Tensor::zeros(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  auto means = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  {
    const double* xv = x.values().data();
    const double* gv = gamma.values().data();
    const double* bv = beta.values().data();
    double* ov = out.mutable_values().data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* in = xv + r * d;
      double mean = 0.0;
      for (int64_t j = 0; j < d; ++j) mean += in[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        const double c = in[j] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double is = 1.0 / std::sqrt(var + epsilon);
      (*means)[r] = mean;
      (*inv_std)[r] = is;
      double* o = ov + r * d;
      for (int64_t j = 0; j < d; ++j) o[j] = gv[j] * (in[j] - mean) * is + bv[j];
    }
  }
  if (track({&x, &gamma, &beta})) {
    out.record_op({x, gamma, beta}, [rows, d, means, inv_std](const detail::TensorImpl& o) {
      Tensor px = o.parents[0];
      Tensor pg = o.parents[1];
      Tensor pb = o.parents[2];
      const double* g = o.grad.data();
      const double* xv = px.values().data();
      const double* gv = pg.values().data();
      double* dx = px.requires_grad() ? px.ensure_grad().data() : nullptr;
      double* dgm = pg.requires_grad() ? pg.ensure_grad().data() : nullptr;
      double* dbt = pb.requires_grad() ? pb.ensure_grad().data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const double* in = xv + r * d;
        const double* gr = g + r * d;
        const double mean = (*means)[r];
        const double is = (*inv_std)[r];
        double s1 = 0.0, s2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          const double xh = (in[j] - mean) * is;
          const double dxh = gr[j] * gv[j];
          s1 += dxh;
          s2 += dxh * xh;
          if (dgm) dgm[j] += gr[j] * xh;
          if (dbt) dbt[j] += gr[j];
        }
        if (dx) {
          s1 /= static_cast<double>(d);
          s2 /= static_cast<double>(d);
          double* dr = dx + r * d;
          for (int64_t j = 0; j < d; ++j) {
            const double xh = (in[j] - mean) * is;
            dr[j] += is * (gr[j] * gv[j] - s1 - xh * s2);
          }
        }
      }
    });
  }
  return out;
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>& running_mean, std::vector<double>& running_var,
                   double momentum, double epsilon, bool training) {
  if (x.ndim() != 4) throw ContractError("batchnorm2d: expected [n,c,h,w]");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c ||
      static_cast<int64_t>(running_mean.size()) != c ||
      static_cast<int64_t>(running_var.size()) != c) {
    throw ContractError("batchnorm2d: per-channel buffers do not match " + shape_str(x.shape()));
  }
  const int64_t m = n * hw;
  Tensor out = Tensor::zeros(x.shape());
  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
  {
    const double* xv = x.values().data();
    if (training) {
      for (int64_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int64_t img = 0; img < n; ++img) {
          const double* p = xv + (img * c + ch) * hw;
          for (int64_t j = 0; j < hw; ++j) s += p[j];
        }
        const double mu = s / static_cast<double>(m);
        double var = 0.0;
        for (int64_t img = 0; img < n; ++img) {
          const double* p = xv + (img * c + ch) * hw;
          for (int64_t j = 0; j < hw; ++j) {
            const double d = p[j] - mu;
            var += d * d;
          }
        }
        var /= static_cast<double>(m);
        (*mean)[ch] = mu;
        (*inv_std)[ch] = 1.0 / std::sqrt(var + epsilon);
        const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mu;
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
      }
    } else {
      for (int64_t ch = 0; ch < c; ++ch) {
        (*mean)[ch] = running_mean[ch];
        (*inv_std)[ch] = 1.0 / std::sqrt(running_var[ch] + epsilon);
      }
    }
    const double* gv = gamma.values().data();
    const double* bv = beta.values().data();
    double* ov = out.mutable_values().data();
    for (int64_t img = 0; img < n; ++img) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const double mu = (*mean)[ch], is = (*inv_std)[ch], ga = gv[ch], be = bv[ch];
        const double* p = xv + (img * c + ch) * hw;
        double* o = ov + (img * c + ch) * hw;
        for (int64_t j = 0; j < hw; ++j) o[j] = ga * (p[j] - mu) * is + be;
      }
    }
  }
  if (track({&x, &gamma, &beta})) {
    out.record_op({x, gamma, beta},
                  [n, c, hw, m, mean, inv_std, training](const detail::TensorImpl& o) {
      Tensor px = o.parents[0];
      Tensor pg = o.parents[1];
      Tensor pb = o.parents[2];
      const double* g = o.grad.data();
      const double* xv = px.values().data();
      const double* gv = pg.values().data();
      double* dx = px.requires_grad() ? px.ensure_grad().data() : nullptr;
      double* dgm = pg.requires_grad() ? pg.ensure_grad().data() : nullptr;
      double* dbt = pb.requires_grad() ? pb.ensure_grad().data() : nullptr;
      for (int64_t ch = 0; ch < c; ++ch) {
        const double mu = (*mean)[ch], is = (*inv_std)[ch], ga = gv[ch];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int64_t img = 0; img < n; ++img) {
          const double* p = xv + (img * c + ch) * hw;
          const double* gr = g + (img * c + ch) * hw;
          for (int64_t j = 0; j < hw; ++j) {
            sum_g += gr[j];
            sum_gx += gr[j] * (p[j] - mu) * is;
          }
        }
        if (dgm) dgm[ch] += sum_gx;
        if (dbt) dbt[ch] += sum_g;
        if (!dx) continue;
        if (training) {
          const double inv_m = 1.0 / static_cast<double>(m);
          for (int64_t img = 0; img < n; ++img) {
            const double* p = xv + (img * c + ch) * hw;
            const double* gr = g + (img * c + ch) * hw;
            double* d = dx + (img * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) {
              const double xh = (p[j] - mu) * is;
              d[j] += ga * is * (gr[j] - sum_g * inv_m - xh * sum_gx * inv_m);
            }
          }
        } else {
          for (int64_t img = 0; img < n; ++img) {
            const double* gr = g + (img * c + ch) * hw;
            double* d = dx + (img * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) d[j] += ga * is * gr[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ContractError("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const double inv_keep = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(x.numel()));
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.mutable_values();
  for (size_t i = 0; i < xv.size(); ++i) {
    const bool keep = rng.uniform() >= rate;
    (*mask)[i] = keep;
    ov[i] = keep ? xv[i] * inv_keep : 0.0;
  }
  if (track({&x})) {
    out.record_op({x}, [mask, inv_keep](const detail::TensorImpl& o) {
      Tensor p = o.parents[0];
      if (!p.requires_grad()) return;
      double* dx = p.ensure_grad().data();
      for (size_t i = 0; i < o.grad.size(); ++i) {
        if ((*mask)[i]) dx[i] += o.grad[i] * inv_keep;
      }
    });
  }
  return out;
}

}  // namespace gaze
