#include "psvit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

#include "psvit/errors.hpp"

namespace psvit {

namespace {

std::atomic<std::uint64_t> g_seq{1};
thread_local int g_no_grad_depth = 0;

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_to_string(s));
    n *= e;
  }
  return n;
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input value");
  }
}

bool wants_grad(const detail::TensorImpl& t) { return t.requires_grad; }

}  // namespace

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

std::vector<double>& grad_buffer(GradMap& grads, const TensorImpl& t) {
  auto& buf = grads[&t];
  if (buf.empty()) buf.assign(t.data.size(), 0.0);
  return buf;
}

}  // namespace detail

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_to_string(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  impl->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return make_tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = rng.next_normal(0.0, stddev);
  return make_tensor(std::move(shape), std::move(data), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::size() const { return shape().empty() ? 0 : impl_->data.size(); }

std::size_t Tensor::rows() const {
  if (ndim() != 2) throw ShapeError("rows() requires a 2-D tensor, got " + shape_to_string(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (ndim() != 2) throw ShapeError("cols() requires a 2-D tensor, got " + shape_to_string(shape()));
  return shape()[1];
}

std::vector<double>& Tensor::data() {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->data;
}

const std::vector<double>& Tensor::data() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->data;
}

double Tensor::scalar() const {
  if (size() != 1) throw ContractError("scalar() requires a 1-element tensor, got " +
                                       shape_to_string(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  if (!impl_) throw ContractError("use of undefined tensor");
  impl_->requires_grad = v;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient; call backward() first");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

void Tensor::backward() const {
  if (!impl_) throw ContractError("backward() on undefined tensor");
  if (impl_->data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        shape_to_string(impl_->shape));
  }

  // Collect every tape node on a path from a requires_grad tensor to the loss.
  std::vector<detail::TapeNode*> nodes;
  std::unordered_map<const detail::TensorImpl*, bool> seen;
  std::vector<detail::TensorImpl*> stack{impl_.get()};
  seen[impl_.get()] = true;
  while (!stack.empty()) {
    detail::TensorImpl* t = stack.back();
    stack.pop_back();
    if (!t->node) continue;
    nodes.push_back(t->node.get());
    for (const auto& in : t->node->inputs) {
      if (!in->requires_grad) continue;
      if (!seen[in.get()]) {
        seen[in.get()] = true;
        stack.push_back(in.get());
      }
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const detail::TapeNode* a, const detail::TapeNode* b) { return a->seq > b->seq; });

  detail::GradMap grads;
  grads[impl_.get()] = {1.0};
  for (detail::TapeNode* node : nodes) {
    auto it = grads.find(node->output);
    if (it == grads.end()) continue;  // output did not influence the loss numerically
    node->backward(it->second, grads);
  }

  // One accumulation pass per backward() call.
  for (const auto& [impl, buf] : grads) {
    if (!impl->requires_grad) continue;
    auto* mut = const_cast<detail::TensorImpl*>(impl);
    if (mut->grad.empty()) mut->grad.assign(mut->data.size(), 0.0);
    for (std::size_t i = 0; i < buf.size(); ++i) mut->grad[i] += buf[i];
  }
}

namespace {

using detail::GradMap;
using detail::grad_buffer;
using detail::TensorImpl;

using BackwardFn = std::function<void(const std::vector<double>&, GradMap&)>;

Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::initializer_list<Tensor> inputs, const std::function<BackwardFn()>& make_bw) {
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  Tensor out = make_tensor(std::move(shape), std::move(data), needs);
  if (needs) {
    auto node = std::make_shared<detail::TapeNode>();
    node->op = op;
    node->seq = out.impl_->seq;
    node->output = out.impl_.get();
    for (const auto& t : inputs) node->inputs.push_back(t.impl_);
    node->backward = make_bw();
    out.impl_->node = std::move(node);
  }
  return out;
}

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) {
    throw ShapeError(std::string(op) + " requires a 2-D tensor, got " + shape_to_string(t.shape()));
  }
}

}  // namespace

std::size_t window_out_len(std::size_t len, std::size_t kernel, std::size_t stride,
                           std::size_t pad) {
  if (kernel == 0 || stride == 0) throw ShapeError("kernel and stride must be positive");
  if (len + 2 * pad < kernel) {
    throw ShapeError("window of size " + std::to_string(kernel) + " exceeds padded input length " +
                     std::to_string(len + 2 * pad));
  }
  return (len + 2 * pad - kernel) / stride + 1;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) {
    throw ShapeError("matmul: inner extents differ: " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* po = out.data() + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* pbr = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) po[j] += av * pbr[j];
    }
  }
  auto ai = a.impl_;
  auto bi = b.impl_;
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [=]() -> BackwardFn {
    return [ai, bi, m, k, n](const std::vector<double>& og, GradMap& grads) {
      if (wants_grad(*ai)) {
        auto& da = grad_buffer(grads, *ai);
        // dA += dC · B^T
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* pog = og.data() + i * n;
            const double* pb = bi->data.data() + kk * n;
            for (std::size_t j = 0; j < n; ++j) acc += pog[j] * pb[j];
            da[i * k + kk] += acc;
          }
        }
      }
      if (wants_grad(*bi)) {
        auto& db = grad_buffer(grads, *bi);
        // dB += A^T · dC
        for (std::size_t kk = 0; kk < k; ++kk) {
          double* pdb = db.data() + kk * n;
          for (std::size_t i = 0; i < m; ++i) {
            const double av = ai->data[i * k + kk];
            const double* pog = og.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) pdb[j] += av * pog[j];
          }
        }
      }
    };
  });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  auto ai = a.impl_;
  return make_op("transpose", {n, m}, std::move(out), {a}, [=]() -> BackwardFn {
    return [ai, m, n](const std::vector<double>& og, GradMap& grads) {
      if (!wants_grad(*ai)) return;
      auto& da = grad_buffer(grads, *ai);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) da[i * n + j] += og[j * m + i];
    };
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias_row = a.ndim() == 2 && ((b.ndim() == 1 && b.shape()[0] == a.cols()) ||
                                          (b.ndim() == 2 && b.rows() == 1 && b.cols() == a.cols()));
  if (!bias_row && a.shape() != b.shape()) {
    throw ShapeError("add: shapes " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()) + " are not addable");
  }
  std::vector<double> out(a.size());
  if (bias_row) {
    const std::size_t m = a.rows(), n = a.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + b.data()[j];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  }
  auto ai = a.impl_;
  auto bi = b.impl_;
  return make_op("add", a.shape(), std::move(out), {a, b}, [=]() -> BackwardFn {
    return [ai, bi, bias_row](const std::vector<double>& og, GradMap& grads) {
      if (wants_grad(*ai)) {
        auto& da = grad_buffer(grads, *ai);
        for (std::size_t i = 0; i < og.size(); ++i) da[i] += og[i];
      }
      if (wants_grad(*bi)) {
        auto& db = grad_buffer(grads, *bi);
        if (bias_row) {
          const std::size_t n = db.size();
          for (std::size_t i = 0; i < og.size(); ++i) db[i % n] += og[i];
        } else {
          for (std::size_t i = 0; i < og.size(); ++i) db[i] += og[i];
        }
      }
    };
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes differ: " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ai = a.impl_;
  auto bi = b.impl_;
  return make_op("mul", a.shape(), std::move(out), {a, b}, [=]() -> BackwardFn {
    return [ai, bi](const std::vector<double>& og, GradMap& grads) {
      if (wants_grad(*ai)) {
        auto& da = grad_buffer(grads, *ai);
        for (std::size_t i = 0; i < og.size(); ++i) da[i] += og[i] * bi->data[i];
      }
      if (wants_grad(*bi)) {
        auto& db = grad_buffer(grads, *bi);
        for (std::size_t i = 0; i < og.size(); ++i) db[i] += og[i] * ai->data[i];
      }
    };
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto ai = a.impl_;
  return make_op("scale", a.shape(), std::move(out), {a}, [=]() -> BackwardFn {
    return [ai, c](const std::vector<double>& og, GradMap& grads) {
      if (!wants_grad(*ai)) return;
      auto& da = grad_buffer(grads, *ai);
      for (std::size_t i = 0; i < og.size(); ++i) da[i] += og[i] * c;
    };
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  auto xi = x.impl_;
  return make_op("gelu", x.shape(), std::move(out), {x}, [=]() -> BackwardFn {
    return [xi](const std::vector<double>& og, GradMap& grads) {
      if (!wants_grad(*xi)) return;
      auto& dx = grad_buffer(grads, *xi);
      for (std::size_t i = 0; i < og.size(); ++i) {
        const double v = xi->data[i];
        const double u = kGeluC * (v + kGeluA * v * v * v);
        const double t = std::tanh(u);
        const double sech2 = 1.0 - t * t;
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        dx[i] += og[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du);
      }
    };
  });
}

namespace {

// Iterate all slices along `axis`; calls fn(base_offset, stride, count).
template <typename Fn>
void for_each_lane(const Shape& shape, std::size_t axis, Fn&& fn) {
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  const std::size_t n = shape[axis];
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      fn(o * n * inner + in, inner, n);
    }
  }
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_to_string(x.shape()));
  }
  check_finite(x, "softmax");
  std::vector<double> out(x.size());
  const auto& in = x.data();
  for_each_lane(x.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, in[base + i * stride]);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = std::exp(in[base + i * stride] - mx);
      out[base + i * stride] = e;
      denom += e;
    }
    for (std::size_t i = 0; i < n; ++i) out[base + i * stride] /= denom;
  });
  auto xi = x.impl_;
  auto shape = x.shape();
  auto saved = out;  // softmax values needed by the backward rule
  return make_op("softmax", x.shape(), std::move(out), {x}, [&]() -> BackwardFn {
    return [xi, shape, axis, saved = std::move(saved)](const std::vector<double>& og,
                                                       GradMap& grads) {
      if (!wants_grad(*xi)) return;
      auto& dx = grad_buffer(grads, *xi);
      for_each_lane(shape, axis, [&](std::size_t base, std::size_t stride, std::size_t n) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += og[base + i * stride] * saved[base + i * stride];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t idx = base + i * stride;
          dx[idx] += saved[idx] * (og[idx] - dot);
        }
      });
    };
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.ndim() < 1) throw ShapeError("layer_norm: empty shape");
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: gain/bias length must equal feature dim " + std::to_string(d));
  }
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  const auto& in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += px[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (px[j] - mu) * (px[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (px[j] - mu) * is;
      out[r * d + j] = xhat[r * d + j] * gain.data()[j] + bias.data()[j];
    }
  }
  auto xi = x.impl_;
  auto gi = gain.impl_;
  auto bi = bias.impl_;
  return make_op("layer_norm", x.shape(), std::move(out), {x, gain, bias}, [&]() -> BackwardFn {
    return [xi, gi, bi, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
               const std::vector<double>& og, GradMap& grads) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* pog = og.data() + r * d;
        const double* ph = xhat.data() + r * d;
        if (wants_grad(*xi)) {
          auto& dx = grad_buffer(grads, *xi);
          double sum_dy = 0.0, sum_dy_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dy = pog[j] * gi->data[j];
            sum_dy += dy;
            sum_dy_h += dy * ph[j];
          }
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dy = pog[j] * gi->data[j];
            dx[r * d + j] += inv_std[r] * (dy - inv_d * sum_dy - ph[j] * inv_d * sum_dy_h);
          }
        }
        if (wants_grad(*gi)) {
          auto& dg = grad_buffer(grads, *gi);
          for (std::size_t j = 0; j < d; ++j) dg[j] += pog[j] * ph[j];
        }
        if (wants_grad(*bi)) {
          auto& db = grad_buffer(grads, *bi);
          for (std::size_t j = 0; j < d; ++j) db[j] += pog[j];
        }
      }
    };
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad) {
  require_2d(x, "conv1d");
  if (w.ndim() != 3) throw ShapeError("conv1d: weight must be [C_out x C_in x k]");
  const std::size_t len = x.rows(), cin = x.cols();
  const std::size_t cout = w.shape()[0], wcin = w.shape()[1], k = w.shape()[2];
  if (wcin != cin) {
    throw ShapeError("conv1d: input channels " + std::to_string(cin) + " != weight channels " +
                     std::to_string(wcin));
  }
  if (b.size() != cout) throw ShapeError("conv1d: bias length must equal C_out");
  const std::size_t olen = window_out_len(len, k, stride, pad);
  std::vector<double> out(olen * cout);
  const auto& px = x.data();
  const auto& pw = w.data();
  for (std::size_t l = 0; l < olen; ++l) {
    for (std::size_t o = 0; o < cout; ++o) {
      double acc = b.data()[o];
      for (std::size_t t = 0; t < k; ++t) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l * stride + t) -
                                   static_cast<std::ptrdiff_t>(pad);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        const double* prow = px.data() + static_cast<std::size_t>(src) * cin;
        const double* pwr = pw.data() + (o * cin) * k + t;
        for (std::size_t c = 0; c < cin; ++c) acc += prow[c] * pwr[c * k];
      }
      out[l * cout + o] = acc;
    }
  }
  auto xi = x.impl_;
  auto wi = w.impl_;
  auto bi = b.impl_;
  return make_op("conv1d", {olen, cout}, std::move(out), {x, w, b}, [=]() -> BackwardFn {
    return [xi, wi, bi, len, cin, cout, k, stride, pad, olen](const std::vector<double>& og,
                                                              GradMap& grads) {
      for (std::size_t l = 0; l < olen; ++l) {
        for (std::size_t o = 0; o < cout; ++o) {
          const double g = og[l * cout + o];
          if (g == 0.0) continue;
          if (wants_grad(*bi)) grad_buffer(grads, *bi)[o] += g;
          for (std::size_t t = 0; t < k; ++t) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l * stride + t) -
                                       static_cast<std::ptrdiff_t>(pad);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
            const std::size_t row = static_cast<std::size_t>(src);
            if (wants_grad(*xi)) {
              auto& dx = grad_buffer(grads, *xi);
              for (std::size_t c = 0; c < cin; ++c)
                dx[row * cin + c] += g * wi->data[(o * cin + c) * k + t];
            }
            if (wants_grad(*wi)) {
              auto& dw = grad_buffer(grads, *wi);
              for (std::size_t c = 0; c < cin; ++c)
                dw[(o * cin + c) * k + t] += g * xi->data[row * cin + c];
            }
          }
        }
      }
    };
  });
}

Tensor maxpool1d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  require_2d(x, "maxpool1d");
  if (pad >= kernel) throw ShapeError("maxpool1d: pad must be smaller than kernel");
  const std::size_t len = x.rows(), ch = x.cols();
  const std::size_t olen = window_out_len(len, kernel, stride, pad);
  std::vector<double> out(olen * ch, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> argmax(olen * ch, 0);
  const auto& px = x.data();
  for (std::size_t l = 0; l < olen; ++l) {
    for (std::size_t t = 0; t < kernel; ++t) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l * stride + t) -
                                 static_cast<std::ptrdiff_t>(pad);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
      const std::size_t row = static_cast<std::size_t>(src);
      for (std::size_t c = 0; c < ch; ++c) {
        const double v = px[row * ch + c];
        if (v > out[l * ch + c]) {
          out[l * ch + c] = v;
          argmax[l * ch + c] = row;
        }
      }
    }
  }
  auto xi = x.impl_;
  return make_op("maxpool1d", {olen, ch}, std::move(out), {x}, [&]() -> BackwardFn {
    return [xi, ch, argmax = std::move(argmax)](const std::vector<double>& og, GradMap& grads) {
      if (!wants_grad(*xi)) return;
      auto& dx = grad_buffer(grads, *xi);
      for (std::size_t i = 0; i < og.size(); ++i) {
        dx[argmax[i] * ch + (i % ch)] += og[i];
      }
    };
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad) {
  if (x.ndim() != 3) throw ShapeError("conv2d: input must be [H x W x C]");
  if (w.ndim() != 4) throw ShapeError("conv2d: weight must be [C_out x C_in x kh x kw]");
  const std::size_t h = x.shape()[0], wd = x.shape()[1], cin = x.shape()[2];
  const std::size_t cout = w.shape()[0], wcin = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  if (wcin != cin) throw ShapeError("conv2d: channel mismatch");
  if (b.size() != cout) throw ShapeError("conv2d: bias length must equal C_out");
  const std::size_t oh = window_out_len(h, kh, stride, pad);
  const std::size_t ow = window_out_len(wd, kw, stride, pad);
  std::vector<double> out(oh * ow * cout);
  const auto& px = x.data();
  const auto& pw = w.data();
  for (std::size_t i = 0; i < oh; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = b.data()[o];
        for (std::size_t ti = 0; ti < kh; ++ti) {
          const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i * stride + ti) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t tj = 0; tj < kw; ++tj) {
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j * stride + tj) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(wd)) continue;
            const double* prow = px.data() + (static_cast<std::size_t>(si) * wd +
                                              static_cast<std::size_t>(sj)) * cin;
            for (std::size_t c = 0; c < cin; ++c) {
              acc += prow[c] * pw[((o * cin + c) * kh + ti) * kw + tj];
            }
          }
        }
        out[(i * ow + j) * cout + o] = acc;
      }
    }
  }
  auto xi = x.impl_;
  auto wi = w.impl_;
  auto bi = b.impl_;
  return make_op("conv2d", {oh, ow, cout}, std::move(out), {x, w, b}, [=]() -> BackwardFn {
    return [xi, wi, bi, h, wd, cin, cout, kh, kw, stride, pad, oh, ow](
               const std::vector<double>& og, GradMap& grads) {
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          for (std::size_t o = 0; o < cout; ++o) {
            const double g = og[(i * ow + j) * cout + o];
            if (g == 0.0) continue;
            if (wants_grad(*bi)) grad_buffer(grads, *bi)[o] += g;
            for (std::size_t ti = 0; ti < kh; ++ti) {
              const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i * stride + ti) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t tj = 0; tj < kw; ++tj) {
                const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j * stride + tj) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(wd)) continue;
                const std::size_t base = (static_cast<std::size_t>(si) * wd +
                                          static_cast<std::size_t>(sj)) * cin;
                if (wants_grad(*xi)) {
                  auto& dx = grad_buffer(grads, *xi);
                  for (std::size_t c = 0; c < cin; ++c)
                    dx[base + c] += g * wi->data[((o * cin + c) * kh + ti) * kw + tj];
                }
                if (wants_grad(*wi)) {
                  auto& dw = grad_buffer(grads, *wi);
                  for (std::size_t c = 0; c < cin; ++c)
                    dw[((o * cin + c) * kh + ti) * kw + tj] += g * xi->data[base + c];
                }
              }
            }
          }
        }
      }
    };
  });
}

Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes) {
  if (axes.empty()) throw ContractError("mean: no axes given");
  Shape out_shape = x.shape();
  std::size_t count = 1;
  for (std::size_t ax : axes) {
    if (ax >= x.ndim()) throw ShapeError("mean: axis out of range");
    count *= out_shape[ax];
    out_shape[ax] = 1;
  }
  // Map each input flat index to its output flat index.
  const Shape& in_shape = x.shape();
  std::vector<std::size_t> in_strides(in_shape.size(), 1), out_strides(in_shape.size(), 1);
  for (std::size_t i = in_shape.size(); i-- > 1;) {
    in_strides[i - 1] = in_strides[i] * in_shape[i];
    out_strides[i - 1] = out_strides[i] * out_shape[i];
  }
  std::size_t out_n = 1;
  for (std::size_t e : out_shape) out_n *= e;
  std::vector<std::size_t> index_map(x.size());
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t rem = flat, oflat = 0;
    for (std::size_t dim = 0; dim < in_shape.size(); ++dim) {
      const std::size_t coord = rem / in_strides[dim];
      rem %= in_strides[dim];
      oflat += (out_shape[dim] == 1 ? 0 : coord) * out_strides[dim];
    }
    index_map[flat] = oflat;
  }
  std::vector<double> out(out_n, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) out[index_map[i]] += x.data()[i];
  const double inv = 1.0 / static_cast<double>(count);
  for (auto& v : out) v *= inv;
  auto xi = x.impl_;
  return make_op("mean", out_shape, std::move(out), {x}, [&]() -> BackwardFn {
    return [xi, inv, index_map = std::move(index_map)](const std::vector<double>& og,
                                                       GradMap& grads) {
      if (!wants_grad(*xi)) return;
      auto& dx = grad_buffer(grads, *xi);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += og[index_map[i]] * inv;
    };
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xi = x.impl_;
  return make_op("sum", {1}, {acc}, {x}, [=]() -> BackwardFn {
    return [xi](const std::vector<double>& og, GradMap& grads) {
      if (!wants_grad(*xi)) return;
      auto& dx = grad_buffer(grads, *xi);
      for (auto& v : dx) v += og[0];
    };
  });
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  std::size_t n = 1;
  for (std::size_t e : new_shape) n *= e;
  if (n != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                     shape_to_string(new_shape));
  }
  auto xi = x.impl_;
  return make_op("reshape", std::move(new_shape), x.data(), {x}, [=]() -> BackwardFn {
    return [xi](const std::vector<double>& og, GradMap& grads) {
      if (!wants_grad(*xi)) return;
      auto& dx = grad_buffer(grads, *xi);
      for (std::size_t i = 0; i < og.size(); ++i) dx[i] += og[i];
    };
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_2d(x, "slice_rows");
  if (begin >= end || end > x.rows()) throw ShapeError("slice_rows: bad range");
  const std::size_t n = x.cols();
  std::vector<double> out(x.data().begin() + begin * n, x.data().begin() + end * n);
  auto xi = x.impl_;
  return make_op("slice_rows", {end - begin, n}, std::move(out), {x}, [=]() -> BackwardFn {
    return [xi, begin, n](const std::vector<double>& og, GradMap& grads) {
      if (!wants_grad(*xi)) return;
      auto& dx = grad_buffer(grads, *xi);
      for (std::size_t i = 0; i < og.size(); ++i) dx[begin * n + i] += og[i];
    };
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_2d(x, "slice_cols");
  if (begin >= end || end > x.cols()) throw ShapeError("slice_cols: bad range");
  const std::size_t m = x.rows(), n = x.cols(), w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.data()[i * n + begin + j];
  auto xi = x.impl_;
  return make_op("slice_cols", {m, w}, std::move(out), {x}, [=]() -> BackwardFn {
    return [xi, begin, m, n, w](const std::vector<double>& og, GradMap& grads) {
      if (!wants_grad(*xi)) return;
      auto& dx = grad_buffer(grads, *xi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) dx[i * n + begin + j] += og[i * w + j];
    };
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: empty input");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<TensorImpl>> impls;
  bool needs = false;
  for (const auto& p : parts) {
    impls.push_back(p.impl_);
    needs = needs || p.requires_grad();
  }
  needs = needs && grad_enabled();
  Tensor out_t = make_tensor({m, n}, std::move(out), needs);
  if (needs) {
    auto node = std::make_shared<detail::TapeNode>();
    node->op = "concat_rows";
    node->seq = out_t.impl_->seq;
    node->output = out_t.impl_.get();
    node->inputs = impls;
    node->backward = [impls, n](const std::vector<double>& og, GradMap& grads) {
      std::size_t row = 0;
      for (const auto& p : impls) {
        const std::size_t pr = p->data.size() / n;
        if (wants_grad(*p)) {
          auto& dp = grad_buffer(grads, *p);
          for (std::size_t i = 0; i < pr * n; ++i) dp[i] += og[row * n + i];
        }
        row += pr;
      }
    };
    out_t.impl_->node = std::move(node);
  }
  return out_t;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty input");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * n + col + j] = p.data()[i * pc + j];
    col += pc;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  bool needs = false;
  for (const auto& p : parts) {
    impls.push_back(p.impl_);
    needs = needs || p.requires_grad();
  }
  needs = needs && grad_enabled();
  Tensor out_t = make_tensor({m, n}, std::move(out), needs);
  if (needs) {
    auto node = std::make_shared<detail::TapeNode>();
    node->op = "concat_cols";
    node->seq = out_t.impl_->seq;
    node->output = out_t.impl_.get();
    node->inputs = impls;
    node->backward = [impls, m, n](const std::vector<double>& og, GradMap& grads) {
      std::size_t col = 0;
      for (const auto& p : impls) {
        const std::size_t pc = p->data.size() / m;
        if (wants_grad(*p)) {
          auto& dp = grad_buffer(grads, *p);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < pc; ++j) dp[i * pc + j] += og[i * n + col + j];
        }
        col += pc;
      }
    };
    out_t.impl_->node = std::move(node);
  }
  return out_t;
}

Tensor extract_patches(const Tensor& image, std::size_t patch) {
  if (image.ndim() != 3) throw ShapeError("extract_patches: image must be [H x W x C]");
  const std::size_t h = image.shape()[0], w = image.shape()[1], c = image.shape()[2];
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("extract_patches: image " + shape_to_string(image.shape()) +
                     " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t ph = h / patch, pw = w / patch;
  const std::size_t plen = patch * patch * c;
  std::vector<double> out(ph * pw * plen);
  const auto& px = image.data();
  for (std::size_t pi = 0; pi < ph; ++pi) {
    for (std::size_t pj = 0; pj < pw; ++pj) {
      double* dst = out.data() + (pi * pw + pj) * plen;
      for (std::size_t di = 0; di < patch; ++di) {
        const double* src = px.data() + ((pi * patch + di) * w + pj * patch) * c;
        std::copy(src, src + patch * c, dst + di * patch * c);
      }
    }
  }
  auto xi = image.impl_;
  return make_op("extract_patches", {ph * pw, plen}, std::move(out), {image}, [=]() -> BackwardFn {
    return [xi, h, w, c, patch, ph, pw, plen](const std::vector<double>& og, GradMap& grads) {
      if (!wants_grad(*xi)) return;
      auto& dx = grad_buffer(grads, *xi);
      for (std::size_t pi = 0; pi < ph; ++pi) {
        for (std::size_t pj = 0; pj < pw; ++pj) {
          const double* src = og.data() + (pi * pw + pj) * plen;
          for (std::size_t di = 0; di < patch; ++di) {
            double* dst = dx.data() + ((pi * patch + di) * w + pj * patch) * c;
            for (std::size_t t = 0; t < patch * c; ++t) dst[t] += src[di * patch * c + t];
          }
        }
      }
    };
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels,
                     double smoothing) {
  require_2d(logits, "cross_entropy");
  const std::size_t bsz = logits.rows(), classes = logits.cols();
  if (labels.size() != bsz) throw ShapeError("cross_entropy: batch/label count mismatch");
  if (smoothing < 0.0 || smoothing >= 1.0) throw ContractError("cross_entropy: bad smoothing");
  check_finite(logits, "cross_entropy");
  const double off = smoothing / static_cast<double>(classes);
  const double on = 1.0 - smoothing + off;
  std::vector<double> probs(bsz * classes);
  double loss = 0.0;
  const auto& in = logits.data();
  for (std::size_t i = 0; i < bsz; ++i) {
    if (labels[i] >= classes) throw ContractError("cross_entropy: label out of range");
    const double* row = in.data() + i * classes;
    double mx = row[0];
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < classes; ++j) denom += std::exp(row[j] - mx);
    const double log_denom = std::log(denom) + mx;
    for (std::size_t j = 0; j < classes; ++j) {
      const double logp = row[j] - log_denom;
      probs[i * classes + j] = std::exp(logp);
      const double target = (j == labels[i]) ? on : off;
      loss -= target * logp;
    }
  }
  loss /= static_cast<double>(bsz);
  auto li = logits.impl_;
  return make_op("cross_entropy", {1}, {loss}, {logits}, [&]() -> BackwardFn {
    return [li, labels, bsz, classes, on, off, probs = std::move(probs)](
               const std::vector<double>& og, GradMap& grads) {
      if (!wants_grad(*li)) return;
      auto& dl = grad_buffer(grads, *li);
      const double s = og[0] / static_cast<double>(bsz);
      for (std::size_t i = 0; i < bsz; ++i) {
        for (std::size_t j = 0; j < classes; ++j) {
          const double target = (j == labels[i]) ? on : off;
          dl[i * classes + j] += s * (probs[i * classes + j] - target);
        }
      }
    };
  });
}

}  // namespace psvit
