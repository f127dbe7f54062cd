#pragma once
// Reverse-mode autodiff on a per-forward tape.
//
// A Tape owns every intermediate tensor of one forward pass.  Ops execute
// eagerly through the runtime-dispatched kernels and append a node; node ids
// grow in topological order, so backward() is a single reverse sweep over the
// ancestors of the loss.  Parameters live outside the tape (they survive
// across passes); binding one onto a tape aliases its storage, and backward
// accumulates straight into Parameter::grad, which is what makes minibatch
// accumulation across per-sample tapes fall out naturally.
//
// All tensors are dense row-major with shape [rows x cols]; scalars are
// [1 x 1].  Shape mismatches throw std::invalid_argument listing both shapes.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace refseg::core {

template <typename T>
struct Parameter {
  std::string name;
  std::size_t rows = 1, cols = 1;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;

  std::size_t size() const { return rows * cols; }
};

// Ordered registry of named parameters.  Order is creation order and defines
// the checkpoint/optimizer slot layout.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, std::size_t rows, std::size_t cols,
                    bool trainable = true);
  Parameter<T>* find(std::string_view name);
  const Parameter<T>* find(std::string_view name) const;

  std::size_t count() const { return params_.size(); }
  Parameter<T>& at(std::size_t i) { return *params_[i]; }
  const Parameter<T>& at(std::size_t i) const { return *params_[i]; }

  std::size_t trainable_scalars() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

enum class Op : std::uint8_t {
  leaf,
  matmul,
  matmul_nt,
  add,
  add_row,
  mul,
  scale,
  gelu,
  sigmoid,
  softmax,
  layer_norm,
  slice_rows,
  slice_cols,
  concat_rows,
  concat_cols,
  gather_rows,
  replace_rows,
  embedding,
  reshape,
  bilinear_upsample,
  bce_loss,
  sum,
};

template <typename T>
class Tape;

// Lightweight handle into a tape.
template <typename T>
struct Tensor {
  Tape<T>* tape = nullptr;
  std::int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  std::span<const T> value() const;
  std::span<const T> grad() const;
  std::size_t rows() const;
  std::size_t cols() const;
  bool requires_grad() const;
};

template <typename T>
class Tape {
 public:
  // grads=false builds an inference-only tape (no gradient buffers at all).
  explicit Tape(bool grads = true) : grads_enabled_(grads) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves -------------------------------------------------------------
  Tensor<T> input(std::span<const T> data, std::size_t rows, std::size_t cols);
  // differentiable input (for tests / probing gradients w.r.t. data)
  Tensor<T> input_grad(std::span<const T> data, std::size_t rows, std::size_t cols);
  // uninitialised input; caller fills *out before using the tensor
  Tensor<T> input_uninit(std::size_t rows, std::size_t cols, T** out);
  Tensor<T> param(Parameter<T>& p);  // memoized per parameter
  Tensor<T> detach(Tensor<T> x);     // value copy, gradient flow cut

  // ---- ops ----------------------------------------------------------------
  Tensor<T> matmul(Tensor<T> a, Tensor<T> b);
  Tensor<T> matmul_nt(Tensor<T> a, Tensor<T> b);  // a[m,k] * b[n,k]^T
  Tensor<T> add(Tensor<T> a, Tensor<T> b);
  Tensor<T> add_row(Tensor<T> x, Tensor<T> row);  // row [1,c] broadcast over x[n,c]
  Tensor<T> mul(Tensor<T> a, Tensor<T> b);
  Tensor<T> scale(Tensor<T> x, T s);
  Tensor<T> gelu(Tensor<T> x);
  Tensor<T> sigmoid(Tensor<T> x);
  Tensor<T> softmax(Tensor<T> x, int axis);
  Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta);
  Tensor<T> slice_rows(Tensor<T> x, std::size_t r0, std::size_t r1);
  Tensor<T> slice_cols(Tensor<T> x, std::size_t c0, std::size_t c1);
  Tensor<T> concat_rows(Tensor<T> a, Tensor<T> b);
  Tensor<T> concat_cols(Tensor<T> a, Tensor<T> b);
  // indices may repeat (broadcast); gradients accumulate on the source row
  Tensor<T> gather_rows(Tensor<T> x, std::span<const std::int32_t> indices);
  // indices must be unique; rep is [k,c] matching |indices|, or [1,c] broadcast
  Tensor<T> replace_rows(Tensor<T> x, std::span<const std::int32_t> indices,
                         Tensor<T> rep);
  Tensor<T> embedding(Parameter<T>& table, std::span<const std::int32_t> ids);
  Tensor<T> reshape(Tensor<T> x, std::size_t rows, std::size_t cols);
  Tensor<T> bilinear_upsample(Tensor<T> x, std::size_t out_h, std::size_t out_w);
  // Mean-reduced binary cross entropy.  Each log argument is floored at 1e-7
  // independently, so saturated wrong predictions stay finite while an exact
  // hard match (pred == target in {0,1}) scores exactly zero.
  Tensor<T> bce_loss(Tensor<T> pred, Tensor<T> target);
  Tensor<T> sum(Tensor<T> x);

  // ---- execution ----------------------------------------------------------
  // Reverse sweep from a scalar loss over its ancestors.  May be called once
  // per tape; gradients land in node buffers and bound Parameter::grad.
  void backward(Tensor<T> loss);

  // Drop all nodes but keep arena capacity (cheap per-sample reuse).
  void reset();

  std::size_t node_count() const { return nodes_.size(); }
  bool grads_enabled() const { return grads_enabled_; }

  // accessors used by Tensor
  std::span<const T> value(std::int32_t id) const;
  std::span<const T> grad(std::int32_t id) const;
  std::size_t rows(std::int32_t id) const { return nodes_[size_t(id)].rows; }
  std::size_t cols(std::int32_t id) const { return nodes_[size_t(id)].cols; }
  bool requires_grad(std::int32_t id) const {
    return nodes_[size_t(id)].requires_grad;
  }

 private:
  struct Node {
    Op op = Op::leaf;
    std::int32_t a = -1, b = -1, c = -1;
    std::uint32_t rows = 1, cols = 1;
    T* val = nullptr;
    T* grad = nullptr;
    T* aux = nullptr;  // op-specific saved statistics
    Parameter<T>* bound = nullptr;
    T scalar = T(0);
    std::int32_t i0 = 0, i1 = 0;
    std::vector<std::int32_t> idx;
    bool requires_grad = false;
  };

  // bump arena with stable chunk addresses
  class Arena {
   public:
    T* alloc(std::size_t n);
    void reset();

   private:
    struct Chunk {
      std::unique_ptr<T[]> data;
      std::size_t cap = 0, used = 0;
    };
    std::vector<Chunk> chunks_;
  };

  Node& node(std::int32_t id) { return nodes_[size_t(id)]; }
  const Node& node(std::int32_t id) const { return nodes_[size_t(id)]; }
  std::int32_t push(Node&& n);
  Tensor<T> make(Node&& n);
  T* alloc_val(std::size_t n) { return values_.alloc(n); }
  T* alloc_grad(std::size_t n);  // zero-initialised
  std::vector<T>& scratch(std::size_t n);
  void backward_node(Node& n);
  void check_same_tape(Tensor<T> t) const;

  std::vector<Node> nodes_;
  Arena values_;
  Arena grads_;
  std::vector<T> scratch_a_, scratch_b_;
  std::unordered_map<const Parameter<T>*, std::int32_t> bound_;
  bool grads_enabled_;
  bool backward_done_ = false;
};

template <typename T>
std::span<const T> Tensor<T>::value() const {
  return tape->value(id);
}
template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return tape->grad(id);
}
template <typename T>
std::size_t Tensor<T>::rows() const {
  return tape->rows(id);
}
template <typename T>
std::size_t Tensor<T>::cols() const {
  return tape->cols(id);
}
template <typename T>
bool Tensor<T>::requires_grad() const {
  return tape->requires_grad(id);
}

}  // namespace refseg::core
