#include "bvr/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "bvr/errors.hpp"

namespace bvr {

namespace {

std::string g_backward_fault;  // test hook; set only from single-threaded test code

// C (m,n) = A (m,k) · B (k,n), C pre-zeroed.
void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (m,n) = A (m,k) · B (n,k)ᵀ
void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double* arow = a + i * k;
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C (k,n) = A (m,k)ᵀ · B (m,n)
void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<std::size_t> broadcast_shape(const std::vector<std::size_t>& a,
                                         const std::vector<std::size_t>& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  std::vector<std::size_t> out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ConfigError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                        " do not broadcast");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Strides of `shape` aligned to the right of an out shape of rank out_rank;
// broadcast axes get stride 0.
std::vector<std::size_t> aligned_strides(const std::vector<std::size_t>& shape,
                                         std::size_t out_rank) {
  std::vector<std::size_t> strides(out_rank, 0);
  std::size_t s = 1;
  for (std::size_t i = shape.size(); i > 0; --i) {
    const std::size_t axis = out_rank - shape.size() + (i - 1);
    strides[axis] = shape[i - 1] == 1 ? 0 : s;
    s *= shape[i - 1];
  }
  return strides;
}

void accumulate(Array& dst, const Array& src) {
  if (!dst.defined()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

namespace testing {
void set_backward_fault(const std::string& kernel) { g_backward_fault = kernel; }
void clear_backward_fault() { g_backward_fault.clear(); }
}  // namespace testing

void ParamStore::add(const std::string& name, Array value) {
  if (params_.count(name)) throw ConfigError("parameter already registered: " + name);
  params_.emplace(name, std::move(value));
}

bool ParamStore::has(const std::string& name) const { return params_.count(name) != 0; }

Array& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const Array& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

int Tape::check(Val v, const char* op) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= values_.size()) {
    throw ConfigError(std::string(op) + ": undefined value handle");
  }
  return v.id;
}

Val Tape::push(const char* op, Array out,
               std::function<void(const Array&, std::vector<Array>&)> bwd, std::uint64_t macs) {
  if (!out.all_finite()) {
    throw NumericError(std::string("kernel ") + op + ": non-finite output");
  }
  if (counter_) {
    counter_->add_macs(macs);
    counter_->add_bytes(8ull * out.size());
  }
  const int id = static_cast<int>(values_.size());
  values_.push_back(std::move(out));
  Node node;
  node.op = op;
  if (bwd) {
    node.backward = [op, f = std::move(bwd)](const Array& gout, std::vector<Array>& grads) {
      if (!g_backward_fault.empty() && g_backward_fault == op) {
        Array corrupted = gout;
        for (std::size_t i = 0; i < corrupted.size(); ++i) corrupted[i] *= 1.5;
        f(corrupted, grads);
        return;
      }
      f(gout, grads);
    };
  }
  nodes_.push_back(std::move(node));
  return Val{id};
}

Val Tape::input(Array a) {
  if (!a.defined()) throw ConfigError("input: undefined array");
  if (!a.all_finite()) throw NumericError("kernel input: non-finite input array");
  return push("input", std::move(a), nullptr, 0);
}

Val Tape::param(const std::string& name, const Array& a) {
  auto it = param_ids_.find(name);
  if (it != param_ids_.end()) {
    if (!val(it->second).same_shape(a)) {
      throw ConfigError("parameter rebound with different shape: " + name);
    }
    return Val{it->second};
  }
  if (!a.all_finite()) throw NumericError("parameter " + name + ": non-finite values");
  Val v = push("param", a, nullptr, 0);
  params_.emplace_back(name, v.id);
  param_ids_.emplace(name, v.id);
  return v;
}

Val Tape::param_from(ParamStore& store, const std::string& name) {
  return param(name, store.at(name));
}

const Array& Tape::value(Val v) const { return val(check(v, "value")); }

double Tape::scalar(Val v) const {
  const Array& a = value(v);
  if (a.size() != 1) throw ConfigError("scalar: value has " + std::to_string(a.size()) + " elements");
  return a[0];
}

Val Tape::matmul(Val a, Val b) {
  const int ia = check(a, "matmul"), ib = check(b, "matmul");
  const Array& A = val(ia);
  const Array& B = val(ib);
  if (A.rank() != 2 || B.rank() != 2 || A.extent(1) != B.extent(0)) {
    throw ConfigError("matmul: incompatible shapes " + shape_str(A.shape()) + " x " +
                      shape_str(B.shape()));
  }
  const std::size_t m = A.extent(0), k = A.extent(1), n = B.extent(1);
  Array out({m, n});
  mm_nn(A.data(), B.data(), out.data(), m, k, n);
  auto bwd = [this, ia, ib, m, k, n](const Array& g, std::vector<Array>& grads) {
    Array da({m, k}), db({k, n});
    mm_nt(g.data(), val(ib).data(), da.data(), m, n, k);
    mm_tn(val(ia).data(), g.data(), db.data(), m, k, n);
    accumulate(grads[ia], da);
    accumulate(grads[ib], db);
  };
  return push("matmul", std::move(out), bwd, static_cast<std::uint64_t>(m) * n * k);
}

Val Tape::matmul_nt(Val a, Val b) {
  const int ia = check(a, "matmul_nt"), ib = check(b, "matmul_nt");
  const Array& A = val(ia);
  const Array& B = val(ib);
  if (A.rank() != 2 || B.rank() != 2 || A.extent(1) != B.extent(1)) {
    throw ConfigError("matmul_nt: incompatible shapes " + shape_str(A.shape()) + " x " +
                      shape_str(B.shape()) + "T");
  }
  const std::size_t m = A.extent(0), k = A.extent(1), n = B.extent(0);
  Array out({m, n});
  mm_nt(A.data(), B.data(), out.data(), m, k, n);
  auto bwd = [this, ia, ib, m, k, n](const Array& g, std::vector<Array>& grads) {
    // dA = G·B, dB = Gᵀ·A
    Array da({m, k}), db({n, k});
    mm_nn(g.data(), val(ib).data(), da.data(), m, n, k);
    mm_tn(g.data(), val(ia).data(), db.data(), m, n, k);
    accumulate(grads[ia], da);
    accumulate(grads[ib], db);
  };
  return push("matmul_nt", std::move(out), bwd, static_cast<std::uint64_t>(m) * n * k);
}

Val Tape::transpose(Val a) {
  const int ia = check(a, "transpose");
  const Array& A = val(ia);
  if (A.rank() != 2) throw ConfigError("transpose: expects rank 2, got " + shape_str(A.shape()));
  const std::size_t m = A.extent(0), n = A.extent(1);
  Array out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  auto bwd = [ia, m, n](const Array& g, std::vector<Array>& grads) {
    Array da({m, n});
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < m; ++i) da[i * n + j] = g[j * m + i];
    accumulate(grads[ia], da);
  };
  return push("transpose", std::move(out), bwd, 0);
}

namespace {

// Shared machinery for broadcasting binary elementwise ops.
struct BcastPlan {
  std::vector<std::size_t> out_shape;
  std::vector<std::size_t> sa, sb;      // input strides aligned to out
  std::vector<std::size_t> out_strides; // row-major strides of out
  bool same_shape = false;
};

BcastPlan plan_bcast(const Array& a, const Array& b, const char* op) {
  BcastPlan p;
  p.out_shape = broadcast_shape(a.shape(), b.shape(), op);
  p.same_shape = a.shape() == b.shape();
  p.sa = aligned_strides(a.shape(), p.out_shape.size());
  p.sb = aligned_strides(b.shape(), p.out_shape.size());
  p.out_strides.assign(p.out_shape.size(), 1);
  for (std::size_t i = p.out_shape.size(); i > 1; --i) {
    p.out_strides[i - 2] = p.out_strides[i - 1] * p.out_shape[i - 1];
  }
  return p;
}

// Maps a flat output index to flat input offsets under the plan.
inline void bcast_offsets(const BcastPlan& p, std::size_t flat, std::size_t& oa, std::size_t& ob) {
  oa = 0;
  ob = 0;
  for (std::size_t axis = 0; axis < p.out_shape.size(); ++axis) {
    const std::size_t idx = (flat / p.out_strides[axis]) % p.out_shape[axis];
    oa += idx * p.sa[axis];
    ob += idx * p.sb[axis];
  }
}

}  // namespace

Val Tape::add(Val a, Val b) {
  const int ia = check(a, "add"), ib = check(b, "add");
  const Array& A = val(ia);
  const Array& B = val(ib);
  BcastPlan p = plan_bcast(A, B, "add");
  Array out(p.out_shape);
  if (p.same_shape) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::size_t oa, ob;
      bcast_offsets(p, i, oa, ob);
      out[i] = A[oa] + B[ob];
    }
  }
  auto bwd = [this, ia, ib, p](const Array& g, std::vector<Array>& grads) {
    Array da(val(ia).shape()), db(val(ib).shape());
    if (p.same_shape) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] = g[i];
        db[i] = g[i];
      }
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) {
        std::size_t oa, ob;
        bcast_offsets(p, i, oa, ob);
        da[oa] += g[i];
        db[ob] += g[i];
      }
    }
    accumulate(grads[ia], da);
    accumulate(grads[ib], db);
  };
  return push("add", std::move(out), bwd, 0);
}

Val Tape::sub(Val a, Val b) {
  const int ia = check(a, "sub"), ib = check(b, "sub");
  const Array& A = val(ia);
  const Array& B = val(ib);
  BcastPlan p = plan_bcast(A, B, "sub");
  Array out(p.out_shape);
  if (p.same_shape) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::size_t oa, ob;
      bcast_offsets(p, i, oa, ob);
      out[i] = A[oa] - B[ob];
    }
  }
  auto bwd = [this, ia, ib, p](const Array& g, std::vector<Array>& grads) {
    Array da(val(ia).shape()), db(val(ib).shape());
    if (p.same_shape) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] = g[i];
        db[i] = -g[i];
      }
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) {
        std::size_t oa, ob;
        bcast_offsets(p, i, oa, ob);
        da[oa] += g[i];
        db[ob] -= g[i];
      }
    }
    accumulate(grads[ia], da);
    accumulate(grads[ib], db);
  };
  return push("sub", std::move(out), bwd, 0);
}

Val Tape::mul(Val a, Val b) {
  const int ia = check(a, "mul"), ib = check(b, "mul");
  const Array& A = val(ia);
  const Array& B = val(ib);
  BcastPlan p = plan_bcast(A, B, "mul");
  Array out(p.out_shape);
  if (p.same_shape) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::size_t oa, ob;
      bcast_offsets(p, i, oa, ob);
      out[i] = A[oa] * B[ob];
    }
  }
  auto bwd = [this, ia, ib, p](const Array& g, std::vector<Array>& grads) {
    const Array& A2 = val(ia);
    const Array& B2 = val(ib);
    Array da(A2.shape()), db(B2.shape());
    if (p.same_shape) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        da[i] = g[i] * B2[i];
        db[i] = g[i] * A2[i];
      }
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) {
        std::size_t oa, ob;
        bcast_offsets(p, i, oa, ob);
        da[oa] += g[i] * B2[ob];
        db[ob] += g[i] * A2[oa];
      }
    }
    accumulate(grads[ia], da);
    accumulate(grads[ib], db);
  };
  return push("mul", std::move(out), bwd, out.size());
}

Val Tape::scale(Val a, double s) {
  const int ia = check(a, "scale");
  if (!std::isfinite(s)) throw NumericError("kernel scale: non-finite factor");
  const Array& A = val(ia);
  Array out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * s;
  auto bwd = [ia, s](const Array& g, std::vector<Array>& grads) {
    Array da(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * s;
    accumulate(grads[ia], da);
  };
  return push("scale", std::move(out), bwd, out.size());
}

Val Tape::add_const(Val a, double c) {
  const int ia = check(a, "add_const");
  if (!std::isfinite(c)) throw NumericError("kernel add_const: non-finite constant");
  const Array& A = val(ia);
  Array out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + c;
  auto bwd = [ia](const Array& g, std::vector<Array>& grads) { accumulate(grads[ia], g); };
  return push("add_const", std::move(out), bwd, 0);
}

Val Tape::relu(Val a) {
  const int ia = check(a, "relu");
  const Array& A = val(ia);
  Array out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] > 0.0 ? A[i] : 0.0;
  auto bwd = [this, ia](const Array& g, std::vector<Array>& grads) {
    const Array& A2 = val(ia);
    Array da(A2.shape());
    for (std::size_t i = 0; i < g.size(); ++i) da[i] = A2[i] > 0.0 ? g[i] : 0.0;
    accumulate(grads[ia], da);
  };
  return push("relu", std::move(out), bwd, 0);
}

Val Tape::sigmoid(Val a) {
  const int ia = check(a, "sigmoid");
  const Array& A = val(ia);
  Array out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-A[i]));
  const int iout = static_cast<int>(values_.size());  // id this push will take
  auto bwd = [this, ia, iout](const Array& g, std::vector<Array>& grads) {
    const Array& y = val(iout);
    Array da(y.shape());
    for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * y[i] * (1.0 - y[i]);
    accumulate(grads[ia], da);
  };
  return push("sigmoid", std::move(out), bwd, val(ia).size());
}

Val Tape::log(Val a) {
  const int ia = check(a, "log");
  const Array& A = val(ia);
  Array out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(A[i]);
  auto bwd = [this, ia](const Array& g, std::vector<Array>& grads) {
    const Array& A2 = val(ia);
    Array da(A2.shape());
    for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] / A2[i];
    accumulate(grads[ia], da);
  };
  return push("log", std::move(out), bwd, A.size());
}

Val Tape::smooth_l1(Val a) {
  const int ia = check(a, "smooth_l1");
  const Array& A = val(ia);
  Array out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = A[i];
    out[i] = std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5;
  }
  auto bwd = [this, ia](const Array& g, std::vector<Array>& grads) {
    const Array& A2 = val(ia);
    Array da(A2.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = A2[i];
      da[i] = g[i] * (std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0));
    }
    accumulate(grads[ia], da);
  };
  return push("smooth_l1", std::move(out), bwd, A.size());
}

Val Tape::softmax(Val a, std::size_t axis) {
  const int ia = check(a, "softmax");
  const Array& A = val(ia);
  if (axis >= A.rank()) throw ConfigError("softmax: axis out of range for " + shape_str(A.shape()));
  std::size_t pre = 1, post = 1;
  for (std::size_t i = 0; i < axis; ++i) pre *= A.extent(i);
  for (std::size_t i = axis + 1; i < A.rank(); ++i) post *= A.extent(i);
  const std::size_t len = A.extent(axis);
  Array out(A.shape());
  for (std::size_t p = 0; p < pre; ++p) {
    for (std::size_t q = 0; q < post; ++q) {
      const std::size_t base = p * len * post + q;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, A[base + l * post]);
      double sum = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(A[base + l * post] - mx);
        out[base + l * post] = e;
        sum += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * post] /= sum;
    }
  }
  const int iout = static_cast<int>(values_.size());
  auto bwd = [this, ia, iout, pre, post, len](const Array& g, std::vector<Array>& grads) {
    const Array& y = val(iout);
    Array da(y.shape());
    for (std::size_t p = 0; p < pre; ++p) {
      for (std::size_t q = 0; q < post; ++q) {
        const std::size_t base = p * len * post + q;
        double dot = 0.0;
        for (std::size_t l = 0; l < len; ++l) dot += g[base + l * post] * y[base + l * post];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t i = base + l * post;
          da[i] = y[i] * (g[i] - dot);
        }
      }
    }
    accumulate(grads[ia], da);
  };
  return push("softmax", std::move(out), bwd, 2 * A.size());
}

Val Tape::conv3x3(Val x, Val w) {
  const int ix = check(x, "conv3x3"), iw = check(w, "conv3x3");
  const Array& X = val(ix);
  const Array& W = val(iw);
  if (X.rank() != 3 || W.rank() != 4 || W.extent(2) != 3 || W.extent(3) != 3 ||
      W.extent(1) != X.extent(0)) {
    throw ConfigError("conv3x3: incompatible shapes " + shape_str(X.shape()) + " and " +
                      shape_str(W.shape()));
  }
  const std::size_t cin = X.extent(0), h = X.extent(1), wd = X.extent(2), cout = W.extent(0);
  Array out({cout, h, wd});
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const double wv = W[((co * cin + ci) * 3 + ky) * 3 + kx];
          if (wv == 0.0) continue;
          const std::size_t y_lo = dy < 0 ? 1 : 0;
          const std::size_t y_hi = dy > 0 ? h - 1 : h;
          const std::size_t x_lo = dx < 0 ? 1 : 0;
          const std::size_t x_hi = dx > 0 ? wd - 1 : wd;
          for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
            const double* in_row = X.data() + (ci * h + oy + dy) * wd + dx;
            double* out_row = out.data() + (co * h + oy) * wd;
            for (std::size_t ox = x_lo; ox < x_hi; ++ox) out_row[ox] += wv * in_row[ox];
          }
        }
      }
    }
  }
  auto bwd = [this, ix, iw, cin, cout, h, wd](const Array& g, std::vector<Array>& grads) {
    const Array& X2 = val(ix);
    const Array& W2 = val(iw);
    Array dx_arr({cin, h, wd});
    Array dw_arr({cout, cin, 3, 3});
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < 3; ++ky) {
          const int dy = ky - 1;
          for (int kx = 0; kx < 3; ++kx) {
            const int dx = kx - 1;
            const std::size_t widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
            const double wv = W2[widx];
            double wacc = 0.0;
            const std::size_t y_lo = dy < 0 ? 1 : 0;
            const std::size_t y_hi = dy > 0 ? h - 1 : h;
            const std::size_t x_lo = dx < 0 ? 1 : 0;
            const std::size_t x_hi = dx > 0 ? wd - 1 : wd;
            for (std::size_t oy = y_lo; oy < y_hi; ++oy) {
              const double* g_row = g.data() + (co * h + oy) * wd;
              const double* in_row = X2.data() + (ci * h + oy + dy) * wd + dx;
              double* dx_row = dx_arr.data() + (ci * h + oy + dy) * wd + dx;
              for (std::size_t ox = x_lo; ox < x_hi; ++ox) {
                wacc += g_row[ox] * in_row[ox];
                dx_row[ox] += wv * g_row[ox];
              }
            }
            dw_arr[widx] = wacc;
          }
        }
      }
    }
    accumulate(grads[ix], dx_arr);
    accumulate(grads[iw], dw_arr);
  };
  return push("conv3x3", std::move(out), bwd,
              9ull * cin * cout * h * wd);
}

Val Tape::maxpool3x3(Val x) {
  const int ix = check(x, "maxpool3x3");
  const Array& X = val(ix);
  if (X.rank() != 2) throw ConfigError("maxpool3x3: expects rank 2, got " + shape_str(X.shape()));
  const std::size_t h = X.extent(0), w = X.extent(1);
  Array out({h, w});
  std::vector<std::size_t> argmax(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_idx = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        const long yy = static_cast<long>(y) + dy;
        if (yy < 0 || yy >= static_cast<long>(h)) continue;  // −inf fill
        for (int dx = -1; dx <= 1; ++dx) {
          const long xb = static_cast<long>(xx) + dx;
          if (xb < 0 || xb >= static_cast<long>(w)) continue;
          const std::size_t idx = static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xb);
          if (X[idx] > best) {
            best = X[idx];
            best_idx = idx;
          }
        }
      }
      out[y * w + xx] = best;
      argmax[y * w + xx] = best_idx;
    }
  }
  auto bwd = [ix, h, w, argmax = std::move(argmax)](const Array& g, std::vector<Array>& grads) {
    Array da({h, w});
    for (std::size_t i = 0; i < g.size(); ++i) da[argmax[i]] += g[i];
    accumulate(grads[ix], da);
  };
  return push("maxpool3x3", std::move(out), bwd, 0);
}

Val Tape::concat(const std::vector<Val>& xs, std::size_t axis) {
  if (xs.empty()) throw ConfigError("concat: no inputs");
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (Val v : xs) ids.push_back(check(v, "concat"));
  const Array& first = val(ids[0]);
  if (axis >= first.rank()) {
    throw ConfigError("concat: axis out of range for " + shape_str(first.shape()));
  }
  std::vector<std::size_t> out_shape = first.shape();
  std::size_t total_axis = 0;
  for (int id : ids) {
    const Array& a = val(id);
    if (a.rank() != first.rank()) throw ConfigError("concat: rank mismatch");
    for (std::size_t i = 0; i < a.rank(); ++i) {
      if (i != axis && a.extent(i) != first.extent(i)) {
        throw ConfigError("concat: extent mismatch off the concat axis");
      }
    }
    total_axis += a.extent(axis);
  }
  out_shape[axis] = total_axis;
  std::size_t pre = 1, post = 1;
  for (std::size_t i = 0; i < axis; ++i) pre *= out_shape[i];
  for (std::size_t i = axis + 1; i < out_shape.size(); ++i) post *= out_shape[i];
  Array out(out_shape);
  std::vector<std::size_t> axis_extents;
  for (int id : ids) axis_extents.push_back(val(id).extent(axis));
  std::size_t offset = 0;
  for (std::size_t part = 0; part < ids.size(); ++part) {
    const Array& a = val(ids[part]);
    const std::size_t len = axis_extents[part];
    for (std::size_t p = 0; p < pre; ++p) {
      std::memcpy(out.data() + (p * total_axis + offset) * post, a.data() + p * len * post,
                  len * post * sizeof(double));
    }
    offset += len;
  }
  auto bwd = [ids, axis_extents, pre, post, total_axis, axis](const Array& g,
                                                              std::vector<Array>& grads) {
    std::size_t off = 0;
    for (std::size_t part = 0; part < ids.size(); ++part) {
      const std::size_t len = axis_extents[part];
      std::vector<std::size_t> part_shape = g.shape();
      part_shape[axis] = len;
      Array da(part_shape);
      for (std::size_t p = 0; p < pre; ++p) {
        std::memcpy(da.data() + p * len * post, g.data() + (p * total_axis + off) * post,
                    len * post * sizeof(double));
      }
      accumulate(grads[ids[part]], da);
      off += len;
    }
  };
  return push("concat", std::move(out), bwd, 0);
}

Val Tape::gather(Val x, std::size_t axis, std::vector<std::size_t> indices) {
  const int ix = check(x, "gather");
  const Array& X = val(ix);
  if (axis >= X.rank()) throw ConfigError("gather: axis out of range for " + shape_str(X.shape()));
  if (indices.empty()) throw ConfigError("gather: empty index list");
  const std::size_t len = X.extent(axis);
  for (std::size_t idx : indices) {
    if (idx >= len) throw ConfigError("gather: index " + std::to_string(idx) + " out of range");
  }
  std::size_t pre = 1, post = 1;
  for (std::size_t i = 0; i < axis; ++i) pre *= X.extent(i);
  for (std::size_t i = axis + 1; i < X.rank(); ++i) post *= X.extent(i);
  std::vector<std::size_t> out_shape = X.shape();
  out_shape[axis] = indices.size();
  Array out(out_shape);
  for (std::size_t p = 0; p < pre; ++p) {
    for (std::size_t k = 0; k < indices.size(); ++k) {
      std::memcpy(out.data() + (p * indices.size() + k) * post,
                  X.data() + (p * len + indices[k]) * post, post * sizeof(double));
    }
  }
  auto bwd = [this, ix, pre, post, len, indices = std::move(indices)](const Array& g,
                                                                      std::vector<Array>& grads) {
    Array da(val(ix).shape());
    for (std::size_t p = 0; p < pre; ++p) {
      for (std::size_t k = 0; k < indices.size(); ++k) {
        const double* src = g.data() + (p * indices.size() + k) * post;
        double* dst = da.data() + (p * len + indices[k]) * post;
        for (std::size_t q = 0; q < post; ++q) dst[q] += src[q];
      }
    }
    accumulate(grads[ix], da);
  };
  return push("gather", std::move(out), bwd, 0);
}

Val Tape::reshape(Val x, std::vector<std::size_t> shape) {
  const int ix = check(x, "reshape");
  const Array& X = val(ix);
  if (shape_product(shape) != X.size()) {
    throw ConfigError("reshape: cannot view " + shape_str(X.shape()) + " as " + shape_str(shape));
  }
  Array out(shape, std::vector<double>(X.data(), X.data() + X.size()));
  auto bwd = [this, ix](const Array& g, std::vector<Array>& grads) {
    Array da(val(ix).shape(), std::vector<double>(g.data(), g.data() + g.size()));
    accumulate(grads[ix], da);
  };
  return push("reshape", std::move(out), bwd, 0);
}

Val Tape::bilinear_sample(Val grid, Val coords) {
  const int ig = check(grid, "bilinear_sample"), ic = check(coords, "bilinear_sample");
  const Array& G = val(ig);
  const Array& C = val(ic);
  if (G.rank() != 3 || C.rank() != 2 || C.extent(1) != 2) {
    throw ConfigError("bilinear_sample: expects grid (C,H,W) and coords (N,2), got " +
                      shape_str(G.shape()) + " and " + shape_str(C.shape()));
  }
  const std::size_t ch = G.extent(0), h = G.extent(1), w = G.extent(2), n = C.extent(0);
  auto sample_geom = [h, w](double cx, double cy, std::size_t& x0, std::size_t& y0, double& fx,
                            double& fy, bool& clamped_x, bool& clamped_y) {
    clamped_x = cx < 0.0 || cx > static_cast<double>(w - 1);
    clamped_y = cy < 0.0 || cy > static_cast<double>(h - 1);
    cx = std::min(std::max(cx, 0.0), static_cast<double>(w - 1));
    cy = std::min(std::max(cy, 0.0), static_cast<double>(h - 1));
    x0 = std::min(static_cast<std::size_t>(cx), w - 1);
    y0 = std::min(static_cast<std::size_t>(cy), h - 1);
    fx = cx - static_cast<double>(x0);
    fy = cy - static_cast<double>(y0);
  };
  Array out({n, ch});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t x0, y0;
    double fx, fy;
    bool clx, cly;
    sample_geom(C[i * 2], C[i * 2 + 1], x0, y0, fx, fy, clx, cly);
    const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    for (std::size_t c = 0; c < ch; ++c) {
      const double* plane = G.data() + c * h * w;
      const double v00 = plane[y0 * w + x0], v01 = plane[y0 * w + x1];
      const double v10 = plane[y1 * w + x0], v11 = plane[y1 * w + x1];
      out[i * ch + c] = v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy) + v10 * (1 - fx) * fy +
                        v11 * fx * fy;
    }
  }
  auto bwd = [this, ig, ic, ch, h, w, n, sample_geom](const Array& g, std::vector<Array>& grads) {
    const Array& G2 = val(ig);
    const Array& C2 = val(ic);
    Array dgrid({ch, h, w});
    Array dcoords({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t x0, y0;
      double fx, fy;
      bool clx, cly;
      sample_geom(C2[i * 2], C2[i * 2 + 1], x0, y0, fx, fy, clx, cly);
      const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      double dx_acc = 0.0, dy_acc = 0.0;
      for (std::size_t c = 0; c < ch; ++c) {
        const double go = g[i * ch + c];
        double* dplane = dgrid.data() + c * h * w;
        dplane[y0 * w + x0] += go * (1 - fx) * (1 - fy);
        dplane[y0 * w + x1] += go * fx * (1 - fy);
        dplane[y1 * w + x0] += go * (1 - fx) * fy;
        dplane[y1 * w + x1] += go * fx * fy;
        const double* plane = G2.data() + c * h * w;
        const double v00 = plane[y0 * w + x0], v01 = plane[y0 * w + x1];
        const double v10 = plane[y1 * w + x0], v11 = plane[y1 * w + x1];
        dx_acc += go * ((v01 - v00) * (1 - fy) + (v11 - v10) * fy);
        dy_acc += go * ((v10 - v00) * (1 - fx) + (v11 - v01) * fx);
      }
      dcoords[i * 2] = clx ? 0.0 : dx_acc;
      dcoords[i * 2 + 1] = cly ? 0.0 : dy_acc;
    }
    accumulate(grads[ig], dgrid);
    accumulate(grads[ic], dcoords);
  };
  return push("bilinear_sample", std::move(out), bwd, 4ull * n * ch);
}

Val Tape::sincos_embed(Val offsets, std::size_t d0, double inv_unit) {
  const int io = check(offsets, "sincos_embed");
  const Array& O = val(io);
  if (O.rank() != 2 || O.extent(1) != 2) {
    throw ConfigError("sincos_embed: expects (N,2), got " + shape_str(O.shape()));
  }
  if (d0 == 0 || d0 % 4 != 0) {
    throw ConfigError("sincos_embed: embedding dim must be a positive multiple of 4");
  }
  if (!std::isfinite(inv_unit)) throw NumericError("kernel sincos_embed: non-finite unit");
  const std::size_t n = O.extent(0);
  const std::size_t half = d0 / 2, pairs = d0 / 4;
  std::vector<double> inv_freq(pairs);
  for (std::size_t i = 0; i < pairs; ++i) {
    inv_freq[i] = inv_unit * std::pow(1000.0, -(4.0 * static_cast<double>(i)) / static_cast<double>(d0));
  }
  Array out({n, d0});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t axis = 0; axis < 2; ++axis) {
      const double v = O[r * 2 + axis];
      for (std::size_t i = 0; i < pairs; ++i) {
        const double angle = v * inv_freq[i];
        out[r * d0 + axis * half + 2 * i] = std::sin(angle);
        out[r * d0 + axis * half + 2 * i + 1] = std::cos(angle);
      }
    }
  }
  auto bwd = [this, io, n, d0, half, pairs, inv_freq](const Array& g, std::vector<Array>& grads) {
    const Array& O2 = val(io);
    Array da({n, 2});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t axis = 0; axis < 2; ++axis) {
        const double v = O2[r * 2 + axis];
        double acc = 0.0;
        for (std::size_t i = 0; i < pairs; ++i) {
          const double angle = v * inv_freq[i];
          acc += g[r * d0 + axis * half + 2 * i] * std::cos(angle) * inv_freq[i];
          acc -= g[r * d0 + axis * half + 2 * i + 1] * std::sin(angle) * inv_freq[i];
        }
        da[r * 2 + axis] = acc;
      }
    }
    accumulate(grads[io], da);
  };
  return push("sincos_embed", std::move(out), bwd, static_cast<std::uint64_t>(n) * d0);
}

Val Tape::pair_offsets(Val query_pts, Val key_pts) {
  const int iq = check(query_pts, "pair_offsets"), ik = check(key_pts, "pair_offsets");
  const Array& Q = val(iq);
  const Array& K = val(ik);
  if (Q.rank() != 2 || Q.extent(1) != 2 || K.rank() != 2 || K.extent(1) != 2) {
    throw ConfigError("pair_offsets: expects (Nq,2) and (K,2), got " + shape_str(Q.shape()) +
                      " and " + shape_str(K.shape()));
  }
  const std::size_t nq = Q.extent(0), nk = K.extent(0);
  Array out({nq * nk, 2});
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < nk; ++j) {
      out[(i * nk + j) * 2] = K[j * 2] - Q[i * 2];
      out[(i * nk + j) * 2 + 1] = K[j * 2 + 1] - Q[i * 2 + 1];
    }
  }
  auto bwd = [iq, ik, nq, nk](const Array& g, std::vector<Array>& grads) {
    Array dq({nq, 2}), dk({nk, 2});
    for (std::size_t i = 0; i < nq; ++i) {
      for (std::size_t j = 0; j < nk; ++j) {
        for (std::size_t c = 0; c < 2; ++c) {
          const double gv = g[(i * nk + j) * 2 + c];
          dq[i * 2 + c] -= gv;
          dk[j * 2 + c] += gv;
        }
      }
    }
    accumulate(grads[iq], dq);
    accumulate(grads[ik], dk);
  };
  return push("pair_offsets", std::move(out), bwd, 0);
}

Val Tape::reduce_sum(Val a) {
  const int ia = check(a, "reduce_sum");
  const Array& A = val(ia);
  double sum = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) sum += A[i];
  auto bwd = [this, ia](const Array& g, std::vector<Array>& grads) {
    Array da(val(ia).shape());
    for (std::size_t i = 0; i < da.size(); ++i) da[i] = g[0];
    accumulate(grads[ia], da);
  };
  return push("reduce_sum", Array::scalar(sum), bwd, 0);
}

Val Tape::reduce_mean(Val a) {
  Val s = reduce_sum(a);
  return scale(s, 1.0 / static_cast<double>(value(a).size()));
}

GradMap Tape::backward(Val loss) {
  const int il = check(loss, "backward");
  if (val(il).size() != 1) {
    throw ConfigError("backward: loss must be a scalar, got " + shape_str(val(il).shape()));
  }
  std::vector<Array> grads(values_.size());
  grads[il] = Array(val(il).shape(), {1.0});
  for (int i = il; i >= 0; --i) {
    if (nodes_[static_cast<std::size_t>(i)].backward && grads[static_cast<std::size_t>(i)].defined()) {
      nodes_[static_cast<std::size_t>(i)].backward(grads[static_cast<std::size_t>(i)], grads);
    }
  }
  GradMap out;
  for (const auto& [name, id] : params_) {
    if (grads[static_cast<std::size_t>(id)].defined()) {
      out[name] = std::move(grads[static_cast<std::size_t>(id)]);
    } else {
      out[name] = Array(val(id).shape());  // unreachable parameter: zeros
    }
  }
  return out;
}

double finite_difference_check(const std::function<Val(Tape&, Val)>& fn, const Array& point,
                               double step) {
  if (step <= 0.0) throw ConfigError("finite_difference_check: step must be positive");
  Tape t;
  Val x = t.param("x", point);
  Val loss = fn(t, x);
  if (t.value(loss).size() != 1) {
    throw ConfigError("finite_difference_check: fn must produce a scalar");
  }
  GradMap g = t.backward(loss);
  const Array& analytic = g.at("x");

  auto eval = [&](const Array& p) {
    Tape t2;
    Val x2 = t2.param("x", p);
    const double v = t2.scalar(fn(t2, x2));
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: non-finite fn output");
    return v;
  };

  Array p = point;
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + step;
    const double f1 = eval(p);
    p[i] = orig - step;
    const double f0 = eval(p);
    p[i] = orig;
    const double numeric = (f1 - f0) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

FdWorst finite_difference_check_store(
    const std::function<Val(Tape&, ParamStore&)>& build, ParamStore& store, double step,
    const std::vector<std::pair<std::string, std::size_t>>* subset) {
  if (step <= 0.0) throw ConfigError("finite_difference_check_store: step must be positive");
  GradMap analytic;
  {
    Tape t;
    Val loss = build(t, store);
    if (t.value(loss).size() != 1) {
      throw ConfigError("finite_difference_check_store: build must produce a scalar");
    }
    analytic = t.backward(loss);
  }
  auto eval = [&]() {
    Tape t;
    const double v = t.scalar(build(t, store));
    if (!std::isfinite(v)) {
      throw NumericError("finite_difference_check_store: non-finite fn output");
    }
    return v;
  };

  FdWorst worst;
  auto check_coord = [&](const std::string& name, std::size_t i) {
    Array& p = store.at(name);
    const double orig = p[i];
    p[i] = orig + step;
    const double f1 = eval();
    p[i] = orig - step;
    const double f0 = eval();
    p[i] = orig;
    const double numeric = (f1 - f0) / (2.0 * step);
    const double a = analytic.count(name) ? analytic.at(name)[i] : 0.0;
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > worst.rel_err) {
      worst.rel_err = rel;
      worst.param = name;
      worst.index = i;
    }
  };

  if (subset) {
    for (const auto& [name, idx] : *subset) check_coord(name, idx);
  } else {
    for (const auto& [name, arr] : store.entries()) {
      for (std::size_t i = 0; i < arr.size(); ++i) check_coord(name, i);
    }
  }
  return worst;
}

}  // namespace bvr
