#pragma once

#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bvr/array.hpp"
#include "bvr/opcounter.hpp"

namespace bvr {

// Handle to a value recorded on a Tape.
struct Val {
  int id = -1;
  bool valid() const { return id >= 0; }
};

using GradMap = std::map<std::string, Array>;

// Named trainable parameters. Master copies live here; each step binds them
// onto a fresh Tape and the optimizer applies updates back from the gradient
// map returned by Tape::backward.
class ParamStore {
 public:
  void add(const std::string& name, Array value);
  bool has(const std::string& name) const;
  Array& at(const std::string& name);
  const Array& at(const std::string& name) const;
  std::map<std::string, Array>& entries() { return params_; }
  const std::map<std::string, Array>& entries() const { return params_; }

 private:
  std::map<std::string, Array> params_;
};

// Reverse-mode recorder. Every operation logs its inputs and a backward rule;
// backward() replays the log in reverse execution order and yields exactly one
// gradient per trainable parameter (zeros for parameters the loss does not
// reach). Each op verifies its output is finite and reports its exact
// multiply-accumulate count to the attached OpCounter.
//
// Single writer: one recording must not be shared across threads. Separate
// tapes on separate threads are fine.
class Tape {
 public:
  explicit Tape(OpCounter* counter = nullptr) : counter_(counter) {}

  Val input(Array a);                                   // constant leaf
  Val param(const std::string& name, const Array& a);   // trainable leaf
  Val param_from(ParamStore& store, const std::string& name);

  const Array& value(Val v) const;
  double scalar(Val v) const;

  // -- kernel set ----------------------------------------------------------
  Val matmul(Val a, Val b);     // (m,k)·(k,n)
  Val matmul_nt(Val a, Val b);  // (m,k)·(n,k)ᵀ
  Val transpose(Val a);         // 2-d
  Val add(Val a, Val b);        // numpy-style broadcasting
  Val sub(Val a, Val b);
  Val mul(Val a, Val b);
  Val scale(Val a, double s);
  Val add_const(Val a, double c);
  Val relu(Val a);
  Val sigmoid(Val a);
  Val log(Val a);
  Val smooth_l1(Val a);  // 0.5x² for |x|<1, |x|−0.5 otherwise
  Val softmax(Val a, std::size_t axis);
  Val conv3x3(Val x, Val w);  // x (Cin,H,W), w (Cout,Cin,3,3); stride 1, zero pad 1
  Val maxpool3x3(Val x);      // (H,W); stride 1, pad 1, −inf fill
  Val concat(const std::vector<Val>& xs, std::size_t axis);
  Val gather(Val x, std::size_t axis, std::vector<std::size_t> indices);
  Val reshape(Val x, std::vector<std::size_t> shape);
  // grid (C,H,W) sampled at coords (N,2) as (x,y) lattice coordinates;
  // out-of-range coordinates clamp to the border. Returns (N,C).
  Val bilinear_sample(Val grid, Val coords);
  // (N,2) offsets -> (N,d0). First half encodes x, second half y; within each
  // half sin/cos alternate over frequencies 1000^(4i/d0). inv_unit rescales
  // the offsets before embedding.
  Val sincos_embed(Val offsets, std::size_t d0, double inv_unit);
  // (Nq,2),(K,2) -> (Nq·K,2) of key − query, query-major order.
  Val pair_offsets(Val query_pts, Val key_pts);
  Val reduce_sum(Val a);   // -> (1)
  Val reduce_mean(Val a);  // -> (1)

  GradMap backward(Val loss);

  std::size_t size() const { return values_.size(); }

 private:
  friend class TapeOps;
  struct Node {
    const char* op = nullptr;
    // Accumulates input gradients into grads (indexed by value id) given the
    // gradient of this node's output.
    std::function<void(const Array& gout, std::vector<Array>& grads)> backward;
  };

  Val push(const char* op, Array out, std::function<void(const Array&, std::vector<Array>&)> bwd,
           std::uint64_t macs);
  const Array& val(int id) const { return values_[static_cast<std::size_t>(id)]; }
  int check(Val v, const char* op) const;

  std::deque<Array> values_;  // deque: references from value() stay valid as ops append
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, int>> params_;
  std::map<std::string, int> param_ids_;
  OpCounter* counter_ = nullptr;
};

// Max over coordinates of |analytic − central difference| /
// max(|analytic|, |central|, 1e-8) for a scalar function of one array,
// where the analytic gradient comes from the tape.
double finite_difference_check(const std::function<Val(Tape&, Val)>& fn, const Array& point,
                               double step);

struct FdWorst {
  double rel_err = 0.0;
  std::string param;
  std::size_t index = 0;
};

// Same check across every coordinate of every parameter in the store, or a
// chosen subset of (parameter, coordinate) pairs. build must read parameters
// through Tape::param_from so perturbations take effect.
FdWorst finite_difference_check_store(
    const std::function<Val(Tape&, ParamStore&)>& build, ParamStore& store, double step,
    const std::vector<std::pair<std::string, std::size_t>>* subset = nullptr);

namespace testing {
// Fault hook for the gradcheck CLI: corrupts the named kernel's backward rule
// until cleared.
void set_backward_fault(const std::string& kernel);
void clear_backward_fault();
}  // namespace testing

}  // namespace bvr
