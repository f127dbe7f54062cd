#include "refseg/core/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "refseg/kernels/kernels.hpp"

namespace refseg::core {

namespace {

std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + " x " + std::to_string(c) + "]";
}

[[noreturn]] void fail(const std::string& op, const std::string& why) {
  throw std::invalid_argument(op + ": " + why);
}

template <typename T>
constexpr T kBceClamp = T(1e-7);

template <typename T>
constexpr T kLnEps = T(1e-5);  // layer_norm variance epsilon

}  // namespace

// ---- ParameterSet ---------------------------------------------------------

template <typename T>
Parameter<T>& ParameterSet<T>::add(std::string name, std::size_t rows,
                                   std::size_t cols, bool trainable) {
  if (find(name) != nullptr) fail("ParameterSet::add", "duplicate name " + name);
  auto p = std::make_unique<Parameter<T>>();
  p->name = std::move(name);
  p->rows = rows;
  p->cols = cols;
  p->value.assign(rows * cols, T(0));
  p->grad.assign(rows * cols, T(0));
  p->trainable = trainable;
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
Parameter<T>* ParameterSet<T>::find(std::string_view name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

template <typename T>
const Parameter<T>* ParameterSet<T>::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

template <typename T>
std::size_t ParameterSet<T>::trainable_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p->trainable) n += p->size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) std::fill(p->grad.begin(), p->grad.end(), T(0));
}

// ---- Arena ----------------------------------------------------------------

template <typename T>
T* Tape<T>::Arena::alloc(std::size_t n) {
  constexpr std::size_t kChunk = 1u << 20;  // elements
  for (auto& ch : chunks_) {
    if (ch.cap - ch.used >= n) {
      T* out = ch.data.get() + ch.used;
      ch.used += n;
      return out;
    }
  }
  Chunk ch;
  ch.cap = std::max(kChunk, n);
  ch.data = std::make_unique<T[]>(ch.cap);
  ch.used = n;
  chunks_.push_back(std::move(ch));
  return chunks_.back().data.get();
}

template <typename T>
void Tape<T>::Arena::reset() {
  for (auto& ch : chunks_) ch.used = 0;
}

// ---- Tape plumbing --------------------------------------------------------

template <typename T>
std::int32_t Tape<T>::push(Node&& n) {
  nodes_.push_back(std::move(n));
  return std::int32_t(nodes_.size() - 1);
}

template <typename T>
Tensor<T> Tape<T>::make(Node&& n) {
  return Tensor<T>{this, push(std::move(n))};
}

template <typename T>
T* Tape<T>::alloc_grad(std::size_t n) {
  T* g = grads_.alloc(n);
  std::memset(g, 0, n * sizeof(T));
  return g;
}

template <typename T>
std::vector<T>& Tape<T>::scratch(std::size_t n) {
  if (scratch_a_.size() < n) scratch_a_.resize(n);
  return scratch_a_;
}

template <typename T>
void Tape<T>::check_same_tape(Tensor<T> t) const {
  if (t.tape != this || t.id < 0 || std::size_t(t.id) >= nodes_.size())
    fail("Tape", "tensor does not belong to this tape");
}

template <typename T>
std::span<const T> Tape<T>::value(std::int32_t id) const {
  const Node& n = nodes_[std::size_t(id)];
  return {n.val, std::size_t(n.rows) * n.cols};
}

template <typename T>
std::span<const T> Tape<T>::grad(std::int32_t id) const {
  const Node& n = nodes_[std::size_t(id)];
  if (n.grad == nullptr) return {};
  return {n.grad, std::size_t(n.rows) * n.cols};
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  values_.reset();
  grads_.reset();
  bound_.clear();
  backward_done_ = false;
}

// ---- leaves ---------------------------------------------------------------

template <typename T>
Tensor<T> Tape<T>::input(std::span<const T> data, std::size_t rows,
                         std::size_t cols) {
  if (data.size() != rows * cols)
    fail("input", "data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(rows, cols));
  Node n;
  n.rows = std::uint32_t(rows);
  n.cols = std::uint32_t(cols);
  n.val = alloc_val(data.size());
  std::memcpy(n.val, data.data(), data.size() * sizeof(T));
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::input_grad(std::span<const T> data, std::size_t rows,
                              std::size_t cols) {
  Tensor<T> t = input(data, rows, cols);
  Node& n = node(t.id);
  if (grads_enabled_) {
    n.requires_grad = true;
    n.grad = alloc_grad(data.size());
  }
  return t;
}

template <typename T>
Tensor<T> Tape<T>::input_uninit(std::size_t rows, std::size_t cols, T** out) {
  Node n;
  n.rows = std::uint32_t(rows);
  n.cols = std::uint32_t(cols);
  n.val = alloc_val(rows * cols);
  *out = n.val;
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::param(Parameter<T>& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return Tensor<T>{this, it->second};
  Node n;
  n.rows = std::uint32_t(p.rows);
  n.cols = std::uint32_t(p.cols);
  n.val = p.value.data();
  n.bound = &p;
  if (grads_enabled_ && p.trainable) {
    n.requires_grad = true;
    n.grad = p.grad.data();  // accumulate straight into the parameter
  }
  Tensor<T> t = make(std::move(n));
  bound_.emplace(&p, t.id);
  return t;
}

template <typename T>
Tensor<T> Tape<T>::detach(Tensor<T> x) {
  check_same_tape(x);
  return input(x.value(), x.rows(), x.cols());
}

// ---- op helpers -----------------------------------------------------------

#define REFSEG_NEW_NODE(opname, out_rows, out_cols)               \
  Node n;                                                         \
  n.op = Op::opname;                                              \
  n.rows = std::uint32_t(out_rows);                               \
  n.cols = std::uint32_t(out_cols);                               \
  n.val = alloc_val(std::size_t(out_rows) * (out_cols));

template <typename T>
static bool wants_grad(const Tape<T>& tape, std::initializer_list<Tensor<T>> ins) {
  if (!tape.grads_enabled()) return false;
  for (auto t : ins)
    if (t.requires_grad()) return true;
  return false;
}

// ---- binary / unary ops ---------------------------------------------------

template <typename T>
Tensor<T> Tape<T>::matmul(Tensor<T> a, Tensor<T> b) {
  check_same_tape(a);
  check_same_tape(b);
  if (a.cols() != b.rows())
    fail("matmul", "inner dimensions differ: " + shape_str(a.rows(), a.cols()) +
                       " vs " + shape_str(b.rows(), b.cols()));
  const auto& K = kern::active<T>();
  const std::size_t m = a.rows(), k = a.cols(), nn = b.cols();
  REFSEG_NEW_NODE(matmul, m, nn)
  K.gemm(node(a.id).val, node(b.id).val, n.val, m, k, nn, false);
  n.a = a.id;
  n.b = b.id;
  if (wants_grad<T>(*this, {a, b})) {
    n.requires_grad = true;
    n.grad = alloc_grad(m * nn);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::matmul_nt(Tensor<T> a, Tensor<T> b) {
  check_same_tape(a);
  check_same_tape(b);
  if (a.cols() != b.cols())
    fail("matmul_nt", "inner dimensions differ: " +
                          shape_str(a.rows(), a.cols()) + " vs " +
                          shape_str(b.rows(), b.cols()) + "^T");
  const auto& K = kern::active<T>();
  const std::size_t m = a.rows(), k = a.cols(), nn = b.rows();
  auto& bt = scratch(k * nn);
  K.transpose(node(b.id).val, bt.data(), nn, k);
  REFSEG_NEW_NODE(matmul_nt, m, nn)
  K.gemm(node(a.id).val, bt.data(), n.val, m, k, nn, false);
  n.a = a.id;
  n.b = b.id;
  if (wants_grad<T>(*this, {a, b})) {
    n.requires_grad = true;
    n.grad = alloc_grad(m * nn);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::add(Tensor<T> a, Tensor<T> b) {
  check_same_tape(a);
  check_same_tape(b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail("add", "shape mismatch: " + shape_str(a.rows(), a.cols()) + " vs " +
                    shape_str(b.rows(), b.cols()));
  const auto& K = kern::active<T>();
  const std::size_t sz = a.rows() * a.cols();
  REFSEG_NEW_NODE(add, a.rows(), a.cols())
  K.add(node(a.id).val, node(b.id).val, n.val, sz);
  n.a = a.id;
  n.b = b.id;
  if (wants_grad<T>(*this, {a, b})) {
    n.requires_grad = true;
    n.grad = alloc_grad(sz);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::add_row(Tensor<T> x, Tensor<T> row) {
  check_same_tape(x);
  check_same_tape(row);
  if (row.rows() != 1 || row.cols() != x.cols())
    fail("add_row", "row must be [1 x " + std::to_string(x.cols()) +
                        "], got " + shape_str(row.rows(), row.cols()));
  const auto& K = kern::active<T>();
  const std::size_t r = x.rows(), c = x.cols();
  REFSEG_NEW_NODE(add_row, r, c)
  const T* xv = node(x.id).val;
  const T* rv = node(row.id).val;
  for (std::size_t i = 0; i < r; ++i) K.add(xv + i * c, rv, n.val + i * c, c);
  n.a = x.id;
  n.b = row.id;
  if (wants_grad<T>(*this, {x, row})) {
    n.requires_grad = true;
    n.grad = alloc_grad(r * c);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::mul(Tensor<T> a, Tensor<T> b) {
  check_same_tape(a);
  check_same_tape(b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail("mul", "shape mismatch: " + shape_str(a.rows(), a.cols()) + " vs " +
                    shape_str(b.rows(), b.cols()));
  const auto& K = kern::active<T>();
  const std::size_t sz = a.rows() * a.cols();
  REFSEG_NEW_NODE(mul, a.rows(), a.cols())
  K.mul(node(a.id).val, node(b.id).val, n.val, sz);
  n.a = a.id;
  n.b = b.id;
  if (wants_grad<T>(*this, {a, b})) {
    n.requires_grad = true;
    n.grad = alloc_grad(sz);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::scale(Tensor<T> x, T s) {
  check_same_tape(x);
  const auto& K = kern::active<T>();
  const std::size_t sz = x.rows() * x.cols();
  REFSEG_NEW_NODE(scale, x.rows(), x.cols())
  K.scale(node(x.id).val, s, n.val, sz);
  n.a = x.id;
  n.scalar = s;
  if (wants_grad<T>(*this, {x})) {
    n.requires_grad = true;
    n.grad = alloc_grad(sz);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::gelu(Tensor<T> x) {
  check_same_tape(x);
  const auto& K = kern::active<T>();
  const std::size_t sz = x.rows() * x.cols();
  REFSEG_NEW_NODE(gelu, x.rows(), x.cols())
  const T* xv = node(x.id).val;
  // Phi(x) = 0.5 (1 + erf(x / sqrt 2)), saved for backward
  T* phi = values_.alloc(sz);
  auto& s = scratch(sz);
  const T inv_sqrt2 = T(0.7071067811865475244);
  K.scale(xv, inv_sqrt2, s.data(), sz);
  K.verf(s.data(), s.data(), sz);
  for (std::size_t i = 0; i < sz; ++i) phi[i] = T(0.5) * (T(1) + s[i]);
  K.mul(xv, phi, n.val, sz);
  n.a = x.id;
  n.aux = phi;
  if (wants_grad<T>(*this, {x})) {
    n.requires_grad = true;
    n.grad = alloc_grad(sz);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::sigmoid(Tensor<T> x) {
  check_same_tape(x);
  const auto& K = kern::active<T>();
  const std::size_t sz = x.rows() * x.cols();
  REFSEG_NEW_NODE(sigmoid, x.rows(), x.cols())
  K.vsigmoid(node(x.id).val, n.val, sz);
  n.a = x.id;
  if (wants_grad<T>(*this, {x})) {
    n.requires_grad = true;
    n.grad = alloc_grad(sz);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::softmax(Tensor<T> x, int axis) {
  check_same_tape(x);
  if (axis != 0 && axis != 1)
    fail("softmax", "axis must be 0 or 1, got " + std::to_string(axis));
  const auto& K = kern::active<T>();
  const std::size_t r = x.rows(), c = x.cols();
  REFSEG_NEW_NODE(softmax, r, c)
  n.a = x.id;
  n.i0 = axis;
  const T* xv = node(x.id).val;
  if (axis == 1) {
    auto& s = scratch(c);
    for (std::size_t i = 0; i < r; ++i) {
      const T* row = xv + i * c;
      T* out = n.val + i * c;
      const T mx = K.reduce_max(row, c);
      for (std::size_t j = 0; j < c; ++j) s[j] = row[j] - mx;
      K.vexp(s.data(), out, c);
      const T z = K.reduce_sum(out, c);
      K.scale(out, T(1) / z, out, c);
    }
  } else {
    // column softmax via transpose round-trip (cold path, op completeness)
    auto& s = scratch(2 * r * c);
    T* xt = s.data();
    T* yt = s.data() + r * c;
    K.transpose(xv, xt, r, c);
    std::vector<T> tmp(r);
    for (std::size_t j = 0; j < c; ++j) {
      const T* col = xt + j * r;
      T* out = yt + j * r;
      const T mx = K.reduce_max(col, r);
      for (std::size_t i = 0; i < r; ++i) tmp[i] = col[i] - mx;
      K.vexp(tmp.data(), out, r);
      const T z = K.reduce_sum(out, r);
      K.scale(out, T(1) / z, out, r);
    }
    K.transpose(yt, n.val, c, r);
  }
  if (wants_grad<T>(*this, {x})) {
    n.requires_grad = true;
    n.grad = alloc_grad(r * c);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::layer_norm(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta) {
  check_same_tape(x);
  check_same_tape(gamma);
  check_same_tape(beta);
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 ||
      beta.cols() != c)
    fail("layer_norm", "gamma/beta must be [1 x " + std::to_string(c) +
                           "], got " + shape_str(gamma.rows(), gamma.cols()) +
                           " and " + shape_str(beta.rows(), beta.cols()));
  const auto& K = kern::active<T>();
  REFSEG_NEW_NODE(layer_norm, r, c)
  n.a = x.id;
  n.b = gamma.id;
  n.c = beta.id;
  n.aux = values_.alloc(2 * r);  // (mean, rstd) per row
  const T* xv = node(x.id).val;
  const T* gv = node(gamma.id).val;
  const T* bv = node(beta.id).val;
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv + i * c;
    const T mean = K.reduce_sum(row, c) / T(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= T(c);
    const T rstd = T(1) / std::sqrt(var + kLnEps<T>);
    n.aux[2 * i] = mean;
    n.aux[2 * i + 1] = rstd;
    T* out = n.val + i * c;
    for (std::size_t j = 0; j < c; ++j)
      out[j] = gv[j] * ((row[j] - mean) * rstd) + bv[j];
  }
  if (wants_grad<T>(*this, {x, gamma, beta})) {
    n.requires_grad = true;
    n.grad = alloc_grad(r * c);
  }
  return make(std::move(n));
}

// ---- structural ops -------------------------------------------------------

template <typename T>
Tensor<T> Tape<T>::slice_rows(Tensor<T> x, std::size_t r0, std::size_t r1) {
  check_same_tape(x);
  if (r0 >= r1 || r1 > x.rows())
    fail("slice_rows", "bad range [" + std::to_string(r0) + ", " +
                           std::to_string(r1) + ") for " +
                           shape_str(x.rows(), x.cols()));
  const std::size_t c = x.cols(), r = r1 - r0;
  REFSEG_NEW_NODE(slice_rows, r, c)
  std::memcpy(n.val, node(x.id).val + r0 * c, r * c * sizeof(T));
  n.a = x.id;
  n.i0 = std::int32_t(r0);
  if (wants_grad<T>(*this, {x})) {
    n.requires_grad = true;
    n.grad = alloc_grad(r * c);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::slice_cols(Tensor<T> x, std::size_t c0, std::size_t c1) {
  check_same_tape(x);
  if (c0 >= c1 || c1 > x.cols())
    fail("slice_cols", "bad range [" + std::to_string(c0) + ", " +
                           std::to_string(c1) + ") for " +
                           shape_str(x.rows(), x.cols()));
  const std::size_t r = x.rows(), c = c1 - c0, xc = x.cols();
  REFSEG_NEW_NODE(slice_cols, r, c)
  const T* xv = node(x.id).val;
  for (std::size_t i = 0; i < r; ++i)
    std::memcpy(n.val + i * c, xv + i * xc + c0, c * sizeof(T));
  n.a = x.id;
  n.i0 = std::int32_t(c0);
  if (wants_grad<T>(*this, {x})) {
    n.requires_grad = true;
    n.grad = alloc_grad(r * c);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::concat_rows(Tensor<T> a, Tensor<T> b) {
  check_same_tape(a);
  check_same_tape(b);
  if (a.cols() != b.cols())
    fail("concat_rows", "column mismatch: " + shape_str(a.rows(), a.cols()) +
                            " vs " + shape_str(b.rows(), b.cols()));
  const std::size_t c = a.cols(), ra = a.rows(), rb = b.rows();
  REFSEG_NEW_NODE(concat_rows, ra + rb, c)
  std::memcpy(n.val, node(a.id).val, ra * c * sizeof(T));
  std::memcpy(n.val + ra * c, node(b.id).val, rb * c * sizeof(T));
  n.a = a.id;
  n.b = b.id;
  if (wants_grad<T>(*this, {a, b})) {
    n.requires_grad = true;
    n.grad = alloc_grad((ra + rb) * c);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::concat_cols(Tensor<T> a, Tensor<T> b) {
  check_same_tape(a);
  check_same_tape(b);
  if (a.rows() != b.rows())
    fail("concat_cols", "row mismatch: " + shape_str(a.rows(), a.cols()) +
                            " vs " + shape_str(b.rows(), b.cols()));
  const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
  REFSEG_NEW_NODE(concat_cols, r, ca + cb)
  const T* av = node(a.id).val;
  const T* bv = node(b.id).val;
  for (std::size_t i = 0; i < r; ++i) {
    std::memcpy(n.val + i * (ca + cb), av + i * ca, ca * sizeof(T));
    std::memcpy(n.val + i * (ca + cb) + ca, bv + i * cb, cb * sizeof(T));
  }
  n.a = a.id;
  n.b = b.id;
  if (wants_grad<T>(*this, {a, b})) {
    n.requires_grad = true;
    n.grad = alloc_grad(r * (ca + cb));
  }
  return make(std::move(n));
}

namespace {
template <typename T>
void check_indices(const char* op, std::span<const std::int32_t> idx,
                   std::size_t rows, bool require_unique) {
  std::vector<char> seen(rows, 0);
  for (auto i : idx) {
    if (i < 0 || std::size_t(i) >= rows)
      fail(op, "index " + std::to_string(i) + " out of range for " +
                   std::to_string(rows) + " rows");
    if (require_unique) {
      if (seen[std::size_t(i)]) fail(op, "duplicate index " + std::to_string(i));
      seen[std::size_t(i)] = 1;
    }
  }
}
}  // namespace

template <typename T>
Tensor<T> Tape<T>::gather_rows(Tensor<T> x, std::span<const std::int32_t> indices) {
  check_same_tape(x);
  // duplicates are allowed: a repeated row broadcasts, and its incoming
  // gradients accumulate on the single source row
  check_indices<T>("gather_rows", indices, x.rows(), false);
  const std::size_t c = x.cols(), k = indices.size();
  REFSEG_NEW_NODE(gather_rows, k, c)
  const T* xv = node(x.id).val;
  for (std::size_t i = 0; i < k; ++i)
    std::memcpy(n.val + i * c, xv + std::size_t(indices[i]) * c, c * sizeof(T));
  n.a = x.id;
  n.idx.assign(indices.begin(), indices.end());
  if (wants_grad<T>(*this, {x})) {
    n.requires_grad = true;
    n.grad = alloc_grad(k * c);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::replace_rows(Tensor<T> x, std::span<const std::int32_t> indices,
                                Tensor<T> rep) {
  check_same_tape(x);
  check_same_tape(rep);
  check_indices<T>("replace_rows", indices, x.rows(), true);
  const std::size_t r = x.rows(), c = x.cols();
  const bool broadcast = rep.rows() == 1;
  if (rep.cols() != c || (!broadcast && rep.rows() != indices.size()))
    fail("replace_rows",
         "replacement " + shape_str(rep.rows(), rep.cols()) + " does not fit " +
             std::to_string(indices.size()) + " rows of " + shape_str(r, c));
  REFSEG_NEW_NODE(replace_rows, r, c)
  std::memcpy(n.val, node(x.id).val, r * c * sizeof(T));
  const T* rv = node(rep.id).val;
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::memcpy(n.val + std::size_t(indices[i]) * c,
                rv + (broadcast ? 0 : i * c), c * sizeof(T));
  n.a = x.id;
  n.b = rep.id;
  n.idx.assign(indices.begin(), indices.end());
  n.i0 = broadcast ? 1 : 0;
  if (wants_grad<T>(*this, {x, rep})) {
    n.requires_grad = true;
    n.grad = alloc_grad(r * c);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::embedding(Parameter<T>& table,
                             std::span<const std::int32_t> ids) {
  Tensor<T> tp = param(table);
  for (auto id : ids)
    if (id < 0 || std::size_t(id) >= table.rows)
      fail("embedding", "unknown token id " + std::to_string(id) +
                            " (vocabulary rows: " + std::to_string(table.rows) +
                            ")");
  const std::size_t c = table.cols, k = ids.size();
  REFSEG_NEW_NODE(embedding, k, c)
  for (std::size_t i = 0; i < k; ++i)
    std::memcpy(n.val + i * c, table.value.data() + std::size_t(ids[i]) * c,
                c * sizeof(T));
  n.a = tp.id;
  n.idx.assign(ids.begin(), ids.end());
  if (wants_grad<T>(*this, {tp})) {
    n.requires_grad = true;
    n.grad = alloc_grad(k * c);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::reshape(Tensor<T> x, std::size_t rows, std::size_t cols) {
  check_same_tape(x);
  if (rows * cols != x.rows() * x.cols())
    fail("reshape", shape_str(x.rows(), x.cols()) + " cannot be viewed as " +
                        shape_str(rows, cols));
  REFSEG_NEW_NODE(reshape, rows, cols)
  std::memcpy(n.val, node(x.id).val, rows * cols * sizeof(T));
  n.a = x.id;
  if (wants_grad<T>(*this, {x})) {
    n.requires_grad = true;
    n.grad = alloc_grad(rows * cols);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::bilinear_upsample(Tensor<T> x, std::size_t out_h,
                                     std::size_t out_w) {
  check_same_tape(x);
  if (out_h == 0 || out_w == 0)
    fail("bilinear_upsample", "target resolution must be positive");
  const std::size_t h = x.rows(), w = x.cols();
  REFSEG_NEW_NODE(bilinear_upsample, out_h, out_w)
  n.a = x.id;
  // aux: per output row/col the two source taps and their weights,
  // half-pixel-centre sampling with edge clamping
  n.aux = values_.alloc(4 * (out_h + out_w));
  T* rowtab = n.aux;
  T* coltab = n.aux + 4 * out_h;
  auto fill = [](T* tab, std::size_t in_n, std::size_t out_n) {
    const double s = double(in_n) / double(out_n);
    for (std::size_t o = 0; o < out_n; ++o) {
      const double src = (double(o) + 0.5) * s - 0.5;
      std::size_t i0, i1;
      double w1;
      if (src <= 0.0) {
        i0 = i1 = 0;
        w1 = 0.0;
      } else if (src >= double(in_n - 1)) {
        i0 = i1 = in_n - 1;
        w1 = 0.0;
      } else {
        i0 = std::size_t(src);
        i1 = i0 + 1;
        w1 = src - double(i0);
      }
      tab[4 * o] = T(i0);
      tab[4 * o + 1] = T(i1);
      tab[4 * o + 2] = T(1.0 - w1);
      tab[4 * o + 3] = T(w1);
    }
  };
  fill(rowtab, h, out_h);
  fill(coltab, w, out_w);
  const T* xv = node(x.id).val;
  for (std::size_t r = 0; r < out_h; ++r) {
    const std::size_t i0 = std::size_t(rowtab[4 * r]);
    const std::size_t i1 = std::size_t(rowtab[4 * r + 1]);
    const T wr0 = rowtab[4 * r + 2], wr1 = rowtab[4 * r + 3];
    T* out = n.val + r * out_w;
    for (std::size_t c2 = 0; c2 < out_w; ++c2) {
      const std::size_t j0 = std::size_t(coltab[4 * c2]);
      const std::size_t j1 = std::size_t(coltab[4 * c2 + 1]);
      const T wc0 = coltab[4 * c2 + 2], wc1 = coltab[4 * c2 + 3];
      out[c2] = wr0 * (wc0 * xv[i0 * w + j0] + wc1 * xv[i0 * w + j1]) +
                wr1 * (wc0 * xv[i1 * w + j0] + wc1 * xv[i1 * w + j1]);
    }
  }
  if (wants_grad<T>(*this, {x})) {
    n.requires_grad = true;
    n.grad = alloc_grad(out_h * out_w);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::bce_loss(Tensor<T> pred, Tensor<T> target) {
  check_same_tape(pred);
  check_same_tape(target);
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    fail("bce_loss", "shape mismatch: " + shape_str(pred.rows(), pred.cols()) +
                         " vs " + shape_str(target.rows(), target.cols()));
  const auto& K = kern::active<T>();
  const std::size_t sz = pred.rows() * pred.cols();
  const T* pv = node(pred.id).val;
  const T* tv = node(target.id).val;
  for (std::size_t i = 0; i < sz; ++i)
    if (!std::isfinite(pv[i]) || !std::isfinite(tv[i]))
      fail("bce_loss", "non-finite value at element " + std::to_string(i));
  const T eps = kBceClamp<T>;
  // lp = ln(max(p, eps)); lq = ln(max(1-p, eps)).  Each side is floored
  // independently so that a perfect hard prediction (p == t with t in {0,1})
  // scores exactly zero while saturated wrong predictions stay finite.
  if (scratch_b_.size() < sz) scratch_b_.resize(sz);
  auto& lp = scratch(sz);
  auto& lq = scratch_b_;
  for (std::size_t i = 0; i < sz; ++i) {
    lp[i] = std::max(pv[i], eps);
    lq[i] = std::max(T(1) - pv[i], eps);
  }
  K.vlog(lp.data(), lp.data(), sz);
  K.vlog(lq.data(), lq.data(), sz);
  // loss = -(1/n) [ sum t*lp + sum (1-t)*lq ]
  const T a = K.dot(tv, lp.data(), sz);
  const T b = K.reduce_sum(lq.data(), sz) - K.dot(tv, lq.data(), sz);
  REFSEG_NEW_NODE(bce_loss, 1, 1)
  n.val[0] = -(a + b) / T(sz);
  n.a = pred.id;
  n.b = target.id;
  if (wants_grad<T>(*this, {pred, target})) {
    n.requires_grad = true;
    n.grad = alloc_grad(1);
  }
  return make(std::move(n));
}

template <typename T>
Tensor<T> Tape<T>::sum(Tensor<T> x) {
  check_same_tape(x);
  const auto& K = kern::active<T>();
  REFSEG_NEW_NODE(sum, 1, 1)
  n.val[0] = K.reduce_sum(node(x.id).val, x.rows() * x.cols());
  n.a = x.id;
  if (wants_grad<T>(*this, {x})) {
    n.requires_grad = true;
    n.grad = alloc_grad(1);
  }
  return make(std::move(n));
}

#undef REFSEG_NEW_NODE

// ---- backward -------------------------------------------------------------

template <typename T>
void Tape<T>::backward(Tensor<T> loss) {
  check_same_tape(loss);
  if (loss.rows() != 1 || loss.cols() != 1)
    fail("backward", "loss must be scalar, got " +
                         shape_str(loss.rows(), loss.cols()));
  if (backward_done_)
    throw std::logic_error("backward: tape already consumed; reset() first");
  backward_done_ = true;
  if (!node(loss.id).requires_grad) return;  // nothing trainable upstream

  // mark ancestors of the loss; only they participate in the sweep
  std::vector<char> marked(nodes_.size(), 0);
  std::vector<std::int32_t> stack{loss.id};
  marked[std::size_t(loss.id)] = 1;
  while (!stack.empty()) {
    const Node& n = nodes_[std::size_t(stack.back())];
    stack.pop_back();
    for (std::int32_t in : {n.a, n.b, n.c}) {
      if (in < 0) continue;
      const Node& m = nodes_[std::size_t(in)];
      if (m.requires_grad && !marked[std::size_t(in)]) {
        marked[std::size_t(in)] = 1;
        stack.push_back(in);
      }
    }
  }

  node(loss.id).grad[0] = T(1);
  for (std::int32_t id = loss.id; id >= 0; --id)
    if (marked[std::size_t(id)] && nodes_[std::size_t(id)].op != Op::leaf)
      backward_node(nodes_[std::size_t(id)]);
}

template <typename T>
void Tape<T>::backward_node(Node& n) {
  const auto& K = kern::active<T>();
  Node& A = nodes_[std::size_t(n.a)];
  const bool ga = A.requires_grad;
  switch (n.op) {
    case Op::matmul: {
      Node& B = nodes_[std::size_t(n.b)];
      const std::size_t m = A.rows, k = A.cols, nn = B.cols;
      if (ga) {
        auto& bt = scratch(k * nn);
        K.transpose(B.val, bt.data(), k, nn);
        K.gemm(n.grad, bt.data(), A.grad, m, nn, k, true);
      }
      if (B.requires_grad) {
        auto& at = scratch(m * k);
        K.transpose(A.val, at.data(), m, k);
        K.gemm(at.data(), n.grad, B.grad, k, m, nn, true);
      }
      break;
    }
    case Op::matmul_nt: {
      Node& B = nodes_[std::size_t(n.b)];
      const std::size_t m = A.rows, k = A.cols, nn = B.rows;
      if (ga) K.gemm(n.grad, B.val, A.grad, m, nn, k, true);
      if (B.requires_grad) {
        auto& gt = scratch(m * nn);
        K.transpose(n.grad, gt.data(), m, nn);
        K.gemm(gt.data(), A.val, B.grad, nn, m, k, true);
      }
      break;
    }
    case Op::add: {
      Node& B = nodes_[std::size_t(n.b)];
      const std::size_t sz = std::size_t(n.rows) * n.cols;
      if (ga) K.axpy(T(1), n.grad, A.grad, sz);
      if (B.requires_grad) K.axpy(T(1), n.grad, B.grad, sz);
      break;
    }
    case Op::add_row: {
      Node& R = nodes_[std::size_t(n.b)];
      const std::size_t r = n.rows, c = n.cols;
      if (ga) K.axpy(T(1), n.grad, A.grad, r * c);
      if (R.requires_grad)
        for (std::size_t i = 0; i < r; ++i) K.axpy(T(1), n.grad + i * c, R.grad, c);
      break;
    }
    case Op::mul: {
      Node& B = nodes_[std::size_t(n.b)];
      const std::size_t sz = std::size_t(n.rows) * n.cols;
      auto& s = scratch(sz);
      if (ga) {
        K.mul(n.grad, B.val, s.data(), sz);
        K.axpy(T(1), s.data(), A.grad, sz);
      }
      if (B.requires_grad) {
        K.mul(n.grad, A.val, s.data(), sz);
        K.axpy(T(1), s.data(), B.grad, sz);
      }
      break;
    }
    case Op::scale:
      if (ga) K.axpy(n.scalar, n.grad, A.grad, std::size_t(n.rows) * n.cols);
      break;
    case Op::gelu: {
      if (!ga) break;
      const std::size_t sz = std::size_t(n.rows) * n.cols;
      auto& s = scratch(sz);
      for (std::size_t i = 0; i < sz; ++i) s[i] = T(-0.5) * A.val[i] * A.val[i];
      K.vexp(s.data(), s.data(), sz);
      const T inv_sqrt_2pi = T(0.3989422804014327);
      for (std::size_t i = 0; i < sz; ++i)
        A.grad[i] += n.grad[i] * (n.aux[i] + A.val[i] * s[i] * inv_sqrt_2pi);
      break;
    }
    case Op::sigmoid: {
      if (!ga) break;
      const std::size_t sz = std::size_t(n.rows) * n.cols;
      for (std::size_t i = 0; i < sz; ++i)
        A.grad[i] += n.grad[i] * n.val[i] * (T(1) - n.val[i]);
      break;
    }
    case Op::softmax: {
      if (!ga) break;
      const std::size_t r = n.rows, c = n.cols;
      if (n.i0 == 1) {
        for (std::size_t i = 0; i < r; ++i) {
          const T* y = n.val + i * c;
          const T* dy = n.grad + i * c;
          const T d = K.dot(dy, y, c);
          T* dx = A.grad + i * c;
          for (std::size_t j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - d);
        }
      } else {
        for (std::size_t j = 0; j < c; ++j) {
          T d = T(0);
          for (std::size_t i = 0; i < r; ++i)
            d += n.grad[i * c + j] * n.val[i * c + j];
          for (std::size_t i = 0; i < r; ++i)
            A.grad[i * c + j] +=
                n.val[i * c + j] * (n.grad[i * c + j] - d);
        }
      }
      break;
    }
    case Op::layer_norm: {
      Node& G = nodes_[std::size_t(n.b)];
      Node& Bt = nodes_[std::size_t(n.c)];
      const std::size_t r = n.rows, c = n.cols;
      auto& s = scratch(c);
      for (std::size_t i = 0; i < r; ++i) {
        const T mean = n.aux[2 * i], rstd = n.aux[2 * i + 1];
        const T* x = A.val + i * c;
        const T* dy = n.grad + i * c;
        const T* gv = G.val;
        if (G.requires_grad || Bt.requires_grad) {
          for (std::size_t j = 0; j < c; ++j) {
            const T xh = (x[j] - mean) * rstd;
            if (G.requires_grad) G.grad[j] += dy[j] * xh;
            if (Bt.requires_grad) Bt.grad[j] += dy[j];
          }
        }
        if (ga) {
          // dx = rstd * (g - mean(g) - xhat * mean(g .* xhat)), g = gamma .* dy
          T s1 = T(0), s2 = T(0);
          for (std::size_t j = 0; j < c; ++j) {
            s[j] = gv[j] * dy[j];
            const T xh = (x[j] - mean) * rstd;
            s1 += s[j];
            s2 += s[j] * xh;
          }
          s1 /= T(c);
          s2 /= T(c);
          T* dx = A.grad + i * c;
          for (std::size_t j = 0; j < c; ++j) {
            const T xh = (x[j] - mean) * rstd;
            dx[j] += rstd * (s[j] - s1 - xh * s2);
          }
        }
      }
      break;
    }
    case Op::slice_rows:
      if (ga)
        K.axpy(T(1), n.grad, A.grad + std::size_t(n.i0) * n.cols,
               std::size_t(n.rows) * n.cols);
      break;
    case Op::slice_cols: {
      if (!ga) break;
      const std::size_t r = n.rows, c = n.cols, xc = A.cols;
      for (std::size_t i = 0; i < r; ++i)
        K.axpy(T(1), n.grad + i * c, A.grad + i * xc + std::size_t(n.i0), c);
      break;
    }
    case Op::concat_rows: {
      Node& B = nodes_[std::size_t(n.b)];
      const std::size_t c = n.cols, ra = A.rows;
      if (ga) K.axpy(T(1), n.grad, A.grad, ra * c);
      if (B.requires_grad)
        K.axpy(T(1), n.grad + ra * c, B.grad, std::size_t(B.rows) * c);
      break;
    }
    case Op::concat_cols: {
      Node& B = nodes_[std::size_t(n.b)];
      const std::size_t r = n.rows, ca = A.cols, cb = B.cols;
      for (std::size_t i = 0; i < r; ++i) {
        if (ga) K.axpy(T(1), n.grad + i * (ca + cb), A.grad + i * ca, ca);
        if (B.requires_grad)
          K.axpy(T(1), n.grad + i * (ca + cb) + ca, B.grad + i * cb, cb);
      }
      break;
    }
    case Op::gather_rows: {
      if (!ga) break;
      const std::size_t c = n.cols;
      for (std::size_t i = 0; i < n.idx.size(); ++i)
        K.axpy(T(1), n.grad + i * c, A.grad + std::size_t(n.idx[i]) * c, c);
      break;
    }
    case Op::replace_rows: {
      Node& R = nodes_[std::size_t(n.b)];
      const std::size_t r = n.rows, c = n.cols;
      if (ga) {
        std::vector<char> replaced(r, 0);
        for (auto i : n.idx) replaced[std::size_t(i)] = 1;
        for (std::size_t i = 0; i < r; ++i)
          if (!replaced[i]) K.axpy(T(1), n.grad + i * c, A.grad + i * c, c);
      }
      if (R.requires_grad) {
        const bool broadcast = n.i0 == 1;
        for (std::size_t i = 0; i < n.idx.size(); ++i)
          K.axpy(T(1), n.grad + std::size_t(n.idx[i]) * c,
                 R.grad + (broadcast ? 0 : i * c), c);
      }
      break;
    }
    case Op::embedding: {
      if (!ga) break;
      const std::size_t c = n.cols;
      for (std::size_t i = 0; i < n.idx.size(); ++i)
        K.axpy(T(1), n.grad + i * c, A.grad + std::size_t(n.idx[i]) * c, c);
      break;
    }
    case Op::reshape:
      if (ga) K.axpy(T(1), n.grad, A.grad, std::size_t(n.rows) * n.cols);
      break;
    case Op::bilinear_upsample: {
      if (!ga) break;
      const std::size_t H = n.rows, W = n.cols, w = A.cols;
      const T* rowtab = n.aux;
      const T* coltab = n.aux + 4 * H;
      for (std::size_t r = 0; r < H; ++r) {
        const std::size_t i0 = std::size_t(rowtab[4 * r]);
        const std::size_t i1 = std::size_t(rowtab[4 * r + 1]);
        const T wr0 = rowtab[4 * r + 2], wr1 = rowtab[4 * r + 3];
        const T* dy = n.grad + r * W;
        for (std::size_t c2 = 0; c2 < W; ++c2) {
          const std::size_t j0 = std::size_t(coltab[4 * c2]);
          const std::size_t j1 = std::size_t(coltab[4 * c2 + 1]);
          const T wc0 = coltab[4 * c2 + 2], wc1 = coltab[4 * c2 + 3];
          const T g = dy[c2];
          A.grad[i0 * w + j0] += wr0 * wc0 * g;
          A.grad[i0 * w + j1] += wr0 * wc1 * g;
          A.grad[i1 * w + j0] += wr1 * wc0 * g;
          A.grad[i1 * w + j1] += wr1 * wc1 * g;
        }
      }
      break;
    }
    case Op::bce_loss: {
      Node& Tg = nodes_[std::size_t(n.b)];
      const std::size_t sz = std::size_t(A.rows) * A.cols;
      const T eps = kBceClamp<T>;
      const T dl = n.grad[0] / T(sz);
      if (ga) {
        const T* p = A.val;
        const T* t = Tg.val;
        for (std::size_t i = 0; i < sz; ++i) {
          T g = T(0);
          if (p[i] > eps) g -= t[i] / p[i];                      // floored side is flat
          if (T(1) - p[i] > eps) g += (T(1) - t[i]) / (T(1) - p[i]);
          A.grad[i] += dl * g;
        }
      }
      if (Tg.requires_grad) {
        const T* p = A.val;
        for (std::size_t i = 0; i < sz; ++i)
          Tg.grad[i] += dl * (std::log(std::max(T(1) - p[i], eps)) -
                              std::log(std::max(p[i], eps)));
      }
      break;
    }
    case Op::sum: {
      if (!ga) break;
      const std::size_t sz = std::size_t(A.rows) * A.cols;
      const T g = n.grad[0];
      for (std::size_t i = 0; i < sz; ++i) A.grad[i] += g;
      break;
    }
    case Op::leaf:
      break;
  }
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace refseg::core
