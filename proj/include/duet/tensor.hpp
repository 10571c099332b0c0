#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace duet {

// Error taxonomy shared across the project. The CLI maps these to exit codes.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : DataError {
  explicit ShapeError(const std::string& msg) : DataError(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Mask sentinel: "minus infinity" for score/logit entries, kept finite so
// tensors never store actual inf. Anything at or below kMaskedThreshold is
// treated as masked by softmax-family kernels.
constexpr double kNegInf = -1e9;
constexpr double kMaskedThreshold = -0.5e9;

inline bool is_masked_value(double v) { return v <= kMaskedThreshold; }

// Dense row-major tensor, rank 1 or 2.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor vec(std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor matrix(int rows, int cols, std::vector<double> values);

  int64_t numel() const {
    int64_t n = 1;
    for (int e : shape) n *= e;
    return shape.empty() ? 0 : n;
  }
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const { return rank() == 2 ? shape[0] : 1; }
  int cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 0); }
  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  std::string shape_str() const;
};

// Handle to a node on a Tape.
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

class ParamStore;
struct Parameter;

// Reverse-mode tape. One tape per forward computation (an episode, a loss);
// nodes are created in topological order and backward() walks them in
// reverse. Gradients for parameter leaves accumulate into the ParamStore.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&)> backward;
    bool requires_grad = false;
    Parameter* bound_param = nullptr;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // When disabled, ops skip recording backward closures (inference mode).
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  size_t size() const { return nodes_.size(); }

  Var constant(Tensor t);
  Var leaf(Tensor t, bool requires_grad);
  // Pulls a named parameter onto the tape (cached: one leaf per parameter).
  Var param(ParamStore& store, const std::string& name);

  const Tensor& val(Var v) const { return nodes_[v.idx].value; }
  const Tensor& grad_of(Var v) const { return nodes_[v.idx].grad; }

  // --- ops ------------------------------------------------------------
  Var matmul(Var a, Var b);               // [n,k]x[k,m]
  Var matmul_nt(Var a, Var b);            // [n,k]x[m,k]^T -> [n,m]
  Var add(Var a, Var b);                  // same shape
  Var sub(Var a, Var b);
  Var add_rowvec(Var a, Var row);         // [n,m] + [m]
  Var add_scalar_var(Var a, Var s);       // broadcast scalar parameter
  Var mul_scalar_var(Var a, Var s);
  Var mul_elem(Var a, Var b);
  Var scale(Var a, double c);
  Var add_const(Var a, const Tensor& t);  // constant offset, same shape
  Var gelu(Var a);
  Var sigmoid(Var a);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  // Row softmax. Entries at/below the mask threshold produce exactly 0 and
  // are excluded from normalization. A fully masked row is an error.
  Var softmax_rows(Var logits);
  Var embedding(Var table, const std::vector<int>& ids);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var slice_rows(Var a, int r0, int r1);
  Var slice_cols(Var a, int c0, int c1);
  Var flatten(Var a);  // reshape to 1-D
  Var mean_rows(Var a);                   // [n,m] -> [m]
  Var sum(Var a);                         // -> scalar
  Var gather(Var v, const std::vector<int>& idx);        // 1-D gather
  Var sum_selected(Var v, const std::vector<int>& idx);  // -> scalar
  // -log softmax(logits)[target], mask-aware. Throws DataError if target is
  // out of range or masked.
  Var cross_entropy(Var logits, int target);
  // sum_i p_i (log p_i - log softmax(logits)_i); p must sum to 1 +- 1e-6.
  Var kl_divergence(const Tensor& p_target, Var logits);

  // Assembles a score vector in a new index space. Each slot copies one
  // entry of `source`, or broadcasts `fill` (a scalar var), or is masked.
  struct ComposeSlot {
    enum Kind { kCopy, kFill, kMask } kind = kMask;
    int src_index = -1;
    static ComposeSlot copy(int i) { return {kCopy, i}; }
    static ComposeSlot fill() { return {kFill, -1}; }
    static ComposeSlot mask() { return {kMask, -1}; }
  };
  Var compose_scores(Var source, Var fill, const std::vector<ComposeSlot>& slots);

  // Per-entry sigma*a + (1-sigma)*b; masked positions emit the sentinel and
  // receive no gradient. mask[i] != 0 marks position i masked.
  Var fuse_scores(Var a, Var b, Var sigma, const std::vector<uint8_t>& mask);

  void backward(Var loss);

 private:
  Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> bw);
  Tensor& grad_mut(Var v) { return nodes_[v.idx].grad; }
  void ensure_grad(int idx);
  static void check_finite(const Tensor& t, const char* op);

  // deque: node references stay valid while new nodes are pushed
  std::deque<Node> nodes_;
  std::vector<std::pair<const Parameter*, int>> param_cache_;
  bool grad_enabled_ = true;
};

// Plain helpers shared with non-tape code.
std::vector<double> softmax_masked(const std::vector<double>& logits);
int argmax_unmasked(const std::vector<double>& scores);

}  // namespace duet
