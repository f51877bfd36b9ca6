#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "psvit/rng.hpp"

namespace psvit {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& s);

namespace detail {

struct TensorImpl;

// Per-call gradient buffers, keyed by storage. Leaf/.grad accumulation happens
// once per backward() after the walk, so repeated backward calls add exactly
// one more pass.
using GradMap = std::unordered_map<const TensorImpl*, std::vector<double>>;

struct TapeNode {
  const char* op;
  std::uint64_t seq;
  TensorImpl* output;  // owned by the tensor holding this node
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const std::vector<double>& out_grad, GradMap& grads)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until populated by backward()
  std::shared_ptr<TapeNode> node;
  std::uint64_t seq = 0;
};

std::vector<double>& grad_buffer(GradMap& grads, const TensorImpl& t);

}  // namespace detail

// Dense row-major f64 tensor with reverse-mode autodiff. Value-semantic
// handle: copies share storage. Ops record tape nodes whenever gradients are
// enabled and any input requires a gradient.
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t rows() const;  // 2-D only
  std::size_t cols() const;  // 2-D only

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double scalar() const;  // single-element tensors
  double at(std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool v);
  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  // Reverse-mode sweep from a scalar. Visits each reachable tape node once in
  // reverse creation order; accumulates into .grad of every visited tensor.
  void backward() const;

  // Storage identity, for sharing/aliasing checks.
  const void* storage_id() const { return impl_.get(); }

  std::shared_ptr<detail::TensorImpl> impl_;  // treated as private; ops need it

private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_tensor(Shape, std::vector<double>, bool);
};

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);

// Disables tape recording for the current thread while alive.
class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Output length of a windowed op: floor((L + 2p - k) / s) + 1.
// Throws ShapeError when the window exceeds the padded input.
std::size_t window_out_len(std::size_t len, std::size_t kernel, std::size_t stride,
                           std::size_t pad);

// --- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Same-shape add, or row-broadcast bias add when b is [n] or [1 x n].
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // same shape only
Tensor scale(const Tensor& a, double c);

Tensor gelu(const Tensor& x);  // tanh approximation
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x[m,k]·w[k,n] + b[n]

// x is [L x C_in], w is [C_out x C_in x k].
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad);
// x is [L x C]; pad with -inf; requires pad < kernel.
Tensor maxpool1d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad);
// x is [H x W x C_in], w is [C_out x C_in x kh x kw].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad);

Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes);  // reduced axes keep size 1
Tensor sum(const Tensor& x);                                         // scalar [1]
Tensor reshape(const Tensor& x, Shape new_shape);

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// [H x W x C] -> [(H/P * W/P) x (P*P*C)], non-overlapping patches in row-major
// patch order, each flattened row-major.
Tensor extract_patches(const Tensor& image, std::size_t patch);

// Mean over the batch of smoothed cross-entropy; logits [B x C].
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels,
                     double smoothing);

}  // namespace psvit
