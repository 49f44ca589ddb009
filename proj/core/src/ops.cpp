#include "normshift/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>

namespace normshift {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw ShapeError(std::string(op) + ": operands live on different tapes");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(Var<T> x, std::size_t rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
  }
}

template <typename T>
void require_scalar(Var<T> s, const char* op) {
  if (s.value().size() != 1) throw ShapeError(std::string(op) + ": expected a one-element tensor");
}

// Eight independent accumulators so long reductions vectorize; the fixed
// lane order keeps results deterministic.
template <typename A, typename F>
A lane_sum(std::size_t n, F&& f) {
  A acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += f(i + l);
  for (; i < n; ++i) acc[i % 8] += f(i);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) {
      auto& gb = t.grad_ref(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (t.requires_grad(a)) {
      auto& ga = t.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_ref(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  return x.tape->record(std::move(out), {x}, [x, factor](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_ref(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> mul_scalar(Var<T> x, Var<T> s) {
  require_scalar(s, "mul_scalar");
  const auto& xv = x.value();
  const T sv = s.value()[0];
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sv;
  return x.tape->record(std::move(out), {x, s}, [x, s](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = x.value();
    const T sv = s.value()[0];
    if (t.requires_grad(x)) {
      auto& gx = t.grad_ref(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
    }
    if (t.requires_grad(s)) {
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      t.grad_ref(s)[0] += acc;
    }
  });
}

template <typename T>
Var<T> lerp(Var<T> a, Var<T> b, Var<T> lambda) {
  require_same_shape(a, b, "lerp");
  require_scalar(lambda, "lerp");
  const auto& av = a.value();
  const auto& bv = b.value();
  const T l = lambda.value()[0];
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = l * av[i] + (T(1) - l) * bv[i];
  return a.tape->record(std::move(out), {a, b, lambda}, [a, b, lambda](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    const T l = lambda.value()[0];
    if (t.requires_grad(a)) {
      auto& ga = t.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += l * g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_ref(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += (T(1) - l) * g[i];
    }
    if (t.requires_grad(lambda)) {
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * (av[i] - bv[i]);
      t.grad_ref(lambda)[0] += acc;
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = x.value();
    auto& gx = t.grad_ref(x);
    // Subgradient at 0 is 0.
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > T(0) ? g[i] : T(0);
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  const auto& xv = x.value();
  auto out = std::make_shared<Tensor<T>>(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) (*out)[i] = T(1) / (T(1) + std::exp(-xv[i]));
  Tensor<T> copy = *out;
  return x.tape->record(std::move(copy), {x}, [x, out](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_ref(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = (*out)[i];
      gx[i] += g[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  const auto& xv = x.value();
  auto out = std::make_shared<Tensor<T>>(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) (*out)[i] = std::tanh(xv[i]);
  Tensor<T> copy = *out;
  return x.tape->record(std::move(copy), {x}, [x, out](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_ref(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = (*out)[i];
      gx[i] += g[i] * (T(1) - y * y);
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const auto& xv = x.value();
  T acc = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  return x.tape->record(Tensor<T>::scalar(acc), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_ref(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_ref(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> index(Var<T> x, std::size_t i) {
  if (i >= x.value().size()) throw ShapeError("index out of range");
  return x.tape->record(Tensor<T>::scalar(x.value()[i]), {x},
                        [x, i](Tape<T>& t, const Tensor<T>& g) { t.grad_ref(x)[i] += g[0]; });
}

template <typename T>
Var<T> softmax(Var<T> logits, const std::vector<bool>& active) {
  require_rank(logits, 1, "softmax");
  const auto& z = logits.value();
  const std::size_t k = z.size();
  std::vector<bool> mask = active.empty() ? std::vector<bool>(k, true) : active;
  if (mask.size() != k) throw ShapeError("softmax: mask length differs from logits");
  T m = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < k; ++i)
    if (mask[i]) m = std::max(m, z[i]);
  if (!std::isfinite(m) && m < 0) throw ValidationError("softmax: every entry is masked");
  auto p = std::make_shared<Tensor<T>>(z.shape());
  T denom = 0;
  for (std::size_t i = 0; i < k; ++i)
    if (mask[i]) denom += ((*p)[i] = std::exp(z[i] - m));
  for (std::size_t i = 0; i < k; ++i) (*p)[i] /= denom;
  Tensor<T> copy = *p;
  return logits.tape->record(std::move(copy), {logits}, [logits, p](Tape<T>& t, const Tensor<T>& g) {
    T dot = 0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += (*p)[i] * g[i];
    auto& gz = t.grad_ref(logits);
    for (std::size_t i = 0; i < g.size(); ++i) gz[i] += (*p)[i] * (g[i] - dot);
  });
}

namespace {

template <typename T>
Var<T> fc_impl(Var<T> x, Var<T> w, std::optional<Var<T>> b) {
  require_rank(x, 2, "fully_connected");
  require_rank(w, 2, "fully_connected");
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto n = xv.dim(0), din = xv.dim(1), dout = wv.dim(0);
  if (wv.dim(1) != din) {
    throw ShapeError("fully_connected: input width " + std::to_string(din) + " vs weight " + shape_str(wv.shape()));
  }
  if (b && (b->value().rank() != 1 || b->value().size() != dout)) {
    throw ShapeError("fully_connected: bias shape " + shape_str(b->shape()) + " for " + std::to_string(dout) +
                     " outputs");
  }
  Tensor<T> out(Shape{n, dout});
  MapMat<T> y(out.ptr(), n, dout);
  ConstMapMat<T> xm(xv.ptr(), n, din);
  ConstMapMat<T> wm(wv.ptr(), dout, din);
  y.noalias() = xm * wm.transpose();
  if (b) {
    const auto& bv = b->value();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < dout; ++c) out[r * dout + c] += bv[c];
  }
  auto rule = [x, w, b, n, din, dout](Tape<T>& t, const Tensor<T>& g) {
    ConstMapMat<T> gm(g.ptr(), n, dout);
    if (t.requires_grad(x)) {
      auto& gx = t.grad_ref(x);
      MapMat<T>(gx.ptr(), n, din).noalias() += gm * ConstMapMat<T>(w.value().ptr(), dout, din);
    }
    if (t.requires_grad(w)) {
      auto& gw = t.grad_ref(w);
      MapMat<T>(gw.ptr(), dout, din).noalias() += gm.transpose() * ConstMapMat<T>(x.value().ptr(), n, din);
    }
    if (b && t.requires_grad(*b)) {
      auto& gb = t.grad_ref(*b);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < dout; ++c) gb[c] += g[r * dout + c];
    }
  };
  if (b) return x.tape->record(std::move(out), {x, w, *b}, rule);
  return x.tape->record(std::move(out), {x, w}, rule);
}

}  // namespace

template <typename T>
Var<T> fully_connected(Var<T> x, Var<T> weight, Var<T> bias) {
  return fc_impl(x, weight, std::optional<Var<T>>(bias));
}

template <typename T>
Var<T> fully_connected(Var<T> x, Var<T> weight) {
  return fc_impl(x, weight, std::optional<Var<T>>());
}

namespace {

struct ConvGeom {
  std::size_t n, cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad;
  std::size_t krows() const { return cin * kh * kw; }
  std::size_t opix() const { return ho * wo; }
};

// Output columns [lo, hi) whose kernel tap kj lands inside the input row.
inline std::pair<std::size_t, std::size_t> valid_cols(const ConvGeom& g, std::size_t kj) {
  const long s = g.stride, first = g.pad - static_cast<long>(kj);
  const long lo = first <= 0 ? 0 : (first + s - 1) / s;
  const long last = static_cast<long>(g.w) - 1 + first;
  const long hi = last < 0 ? 0 : std::min<long>(static_cast<long>(g.wo), last / s + 1);
  return {static_cast<std::size_t>(std::min(lo, hi)), static_cast<std::size_t>(hi)};
}

// Column matrices hold every sample side by side: row r of the (krows, n*opix)
// matrix is `ld` wide and sample s occupies columns [s*opix, (s+1)*opix).
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld;
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long ii = static_cast<long>(oi) * g.stride + static_cast<long>(ki) - g.pad;
          T* dst = row + oi * g.wo;
          if (ii < 0 || ii >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(ii)) * g.w;
          const auto [lo, hi] = valid_cols(g, kj);
          std::fill(dst, dst + lo, T(0));
          const long off = static_cast<long>(kj) - g.pad;
          if (g.stride == 1) {
            std::copy(src + static_cast<long>(lo) + off, src + static_cast<long>(hi) + off, dst + lo);
          } else {
            for (std::size_t oj = lo; oj < hi; ++oj) dst[oj] = src[static_cast<long>(oj) * g.stride + off];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* dx, std::size_t ld) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * ld;
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long ii = static_cast<long>(oi) * g.stride + static_cast<long>(ki) - g.pad;
          if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(ii)) * g.w;
          const auto [lo, hi] = valid_cols(g, kj);
          const long off = static_cast<long>(kj) - g.pad;
          const T* src = row + oi * g.wo;
          for (std::size_t oj = lo; oj < hi; ++oj) dst[static_cast<long>(oj) * g.stride + off] += src[oj];
        }
      }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  if (stride <= 0 || pad < 0) throw ShapeError("conv2d: stride must be positive and pad non-negative");
  const auto& xv = x.value();
  const auto& wv = weight.value();
  if (wv.dim(1) != xv.c()) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(wv.dim(1)) + " input channels, input has " +
                     std::to_string(xv.c()));
  }
  if (bias.value().rank() != 1 || bias.value().size() != wv.dim(0)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " for " + std::to_string(wv.dim(0)) +
                     " output channels");
  }
  ConvGeom g{xv.n(), xv.c(), xv.h(), xv.w(), wv.dim(0), wv.dim(2), wv.dim(3), 0, 0, stride, pad};
  const std::size_t ph = g.h + 2 * static_cast<std::size_t>(pad);
  const std::size_t pw = g.w + 2 * static_cast<std::size_t>(pad);
  if (g.kh > ph || g.kw > pw) {
    throw ShapeError("conv2d: kernel " + shape_str(wv.shape()) + " larger than padded input " + shape_str(xv.shape()));
  }
  g.ho = (ph - g.kh) / static_cast<std::size_t>(stride) + 1;
  g.wo = (pw - g.kw) / static_cast<std::size_t>(stride) + 1;

  const std::size_t kr = g.krows(), op = g.opix(), ld = g.n * op;
  auto cols = std::make_shared<std::vector<T>>(kr * ld);
  for (std::size_t s = 0; s < g.n; ++s) im2col(xv.ptr() + s * g.cin * g.h * g.w, g, cols->data() + s * op, ld);
  RowMat<T> y(g.cout, ld);
  y.noalias() = ConstMapMat<T>(wv.ptr(), g.cout, kr) * ConstMapMat<T>(cols->data(), kr, ld);
  Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  const auto& bv = bias.value();
  for (std::size_t s = 0; s < g.n; ++s)
    for (std::size_t c = 0; c < g.cout; ++c) {
      const T* src = y.data() + c * ld + s * op;
      T* dst = out.ptr() + (s * g.cout + c) * op;
      for (std::size_t p = 0; p < op; ++p) dst[p] = src[p] + bv[c];
    }
  return x.tape->record(std::move(out), {x, weight, bias}, [x, weight, bias, g, cols](Tape<T>& t, const Tensor<T>& gout) {
    const std::size_t kr = g.krows(), op = g.opix(), ld = g.n * op;
    RowMat<T> gm(g.cout, ld);
    for (std::size_t s = 0; s < g.n; ++s)
      for (std::size_t c = 0; c < g.cout; ++c)
        std::copy_n(gout.ptr() + (s * g.cout + c) * op, op, gm.data() + c * ld + s * op);
    if (t.requires_grad(weight)) {
      auto& gw = t.grad_ref(weight);
      MapMat<T>(gw.ptr(), g.cout, kr).noalias() += gm * ConstMapMat<T>(cols->data(), kr, ld).transpose();
    }
    if (t.requires_grad(bias)) {
      auto& gb = t.grad_ref(bias);
      for (std::size_t c = 0; c < g.cout; ++c) gb[c] += gm.row(static_cast<Eigen::Index>(c)).sum();
    }
    if (t.requires_grad(x)) {
      RowMat<T> dcols(kr, ld);
      dcols.noalias() = ConstMapMat<T>(weight.value().ptr(), g.cout, kr).transpose() * gm;
      auto& gx = t.grad_ref(x);
      for (std::size_t s = 0; s < g.n; ++s) col2im_add(dcols.data() + s * op, g, gx.ptr() + s * g.cin * g.h * g.w, ld);
    }
  });
}

template <typename T>
Var<T> maxpool2d(Var<T> x, int k, int stride) {
  require_rank(x, 4, "maxpool2d");
  if (k <= 0 || stride <= 0) throw ShapeError("maxpool2d: window and stride must be positive");
  const auto& xv = x.value();
  const std::size_t ku = static_cast<std::size_t>(k), su = static_cast<std::size_t>(stride);
  if (ku > xv.h() || ku > xv.w()) throw ShapeError("maxpool2d: window larger than input " + shape_str(xv.shape()));
  const std::size_t ho = (xv.h() - ku) / su + 1, wo = (xv.w() - ku) / su + 1;
  Tensor<T> out(Shape{xv.n(), xv.c(), ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (std::size_t n = 0; n < xv.n(); ++n)
    for (std::size_t c = 0; c < xv.c(); ++c) {
      const std::size_t base = (n * xv.c() + c) * xv.h() * xv.w();
      for (std::size_t oi = 0; oi < ho; ++oi)
        for (std::size_t oj = 0; oj < wo; ++oj, ++o) {
          std::size_t best = base + (oi * su) * xv.w() + oj * su;
          for (std::size_t a = 0; a < ku; ++a)
            for (std::size_t b = 0; b < ku; ++b) {
              const std::size_t idx = base + (oi * su + a) * xv.w() + oj * su + b;
              if (xv[idx] > xv[best]) best = idx;
            }
          out[o] = xv[best];
          (*argmax)[o] = best;
        }
    }
  return x.tape->record(std::move(out), {x}, [x, argmax](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_ref(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
  });
}

template <typename T>
CrossEntropy<T> softmax_cross_entropy(Var<T> logits, std::span<const std::int32_t> labels, Reduction reduction) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const auto& z = logits.value();
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                     " rows");
  }
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  Tensor<T> probs(Shape{n, k});
  T total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ValidationError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                            std::to_string(k) + ")");
    }
    T m = z.at(r, 0);
    for (std::size_t c = 1; c < k; ++c) m = std::max(m, z.at(r, c));
    T denom = 0;
    for (std::size_t c = 0; c < k; ++c) denom += (probs.at(r, c) = std::exp(z.at(r, c) - m));
    for (std::size_t c = 0; c < k; ++c) probs.at(r, c) /= denom;
    total += -(z.at(r, static_cast<std::size_t>(y)) - m - std::log(denom));
  }
  const T norm = reduction == Reduction::Mean ? T(1) / static_cast<T>(n) : T(1);
  auto p = std::make_shared<Tensor<T>>(probs);
  std::vector<std::int32_t> ys(labels.begin(), labels.end());
  Var<T> loss = logits.tape->record(Tensor<T>::scalar(total * norm), {logits},
                                    [logits, p, ys = std::move(ys), norm, k](Tape<T>& t, const Tensor<T>& g) {
                                      auto& gz = t.grad_ref(logits);
                                      const T s = g[0] * norm;
                                      for (std::size_t r = 0; r < ys.size(); ++r)
                                        for (std::size_t c = 0; c < k; ++c) {
                                          const T onehot = static_cast<std::size_t>(ys[r]) == c ? T(1) : T(0);
                                          gz[r * k + c] += s * ((*p)[r * k + c] - onehot);
                                        }
                                    });
  return {loss, std::move(probs)};
}

namespace {

// Shared body of the per-sample group reductions.
template <typename T>
struct GroupGeom {
  std::size_t n, groups, per_group;  // elements per (sample, group)
};

template <typename T>
GroupGeom<T> group_geom(Var<T> x, std::size_t groups, const char* op) {
  require_rank(x, 4, op);
  const auto& xv = x.value();
  if (groups == 0 || xv.c() % groups != 0) {
    throw ShapeError(std::string(op) + ": " + std::to_string(groups) + " groups do not divide " +
                     std::to_string(xv.c()) + " channels");
  }
  const std::size_t per = (xv.c() / groups) * xv.h() * xv.w();
  if (per == 0) throw ShapeError(std::string(op) + ": empty spatial extent");
  return {xv.n(), groups, per};
}

template <typename T>
void group_moments(const Tensor<T>& xv, const GroupGeom<T>& g, Tensor<T>& mean, Tensor<T>* stdev) {
  for (std::size_t k = 0; k < g.n * g.groups; ++k) {
    const T* p = xv.ptr() + k * g.per_group;
    const double s = lane_sum<double>(g.per_group, [p](std::size_t i) { return static_cast<double>(p[i]); });
    const double m = s / static_cast<double>(g.per_group);
    mean[k] = static_cast<T>(m);
    if (stdev) {
      const double q = lane_sum<double>(g.per_group, [p, m](std::size_t i) {
        const double d = static_cast<double>(p[i]) - m;
        return d * d;
      });
      (*stdev)[k] = static_cast<T>(std::sqrt(q / static_cast<double>(g.per_group)));
    }
  }
}

}  // namespace

template <typename T>
Var<T> group_mean(Var<T> x, std::size_t groups) {
  const auto g = group_geom(x, groups, "group_mean");
  Tensor<T> mean(Shape{g.n, g.groups});
  group_moments<T>(x.value(), g, mean, nullptr);
  return x.tape->record(std::move(mean), {x}, [x, g](Tape<T>& t, const Tensor<T>& gout) {
    auto& gx = t.grad_ref(x);
    const T inv = T(1) / static_cast<T>(g.per_group);
    for (std::size_t k = 0; k < g.n * g.groups; ++k) {
      T* p = gx.ptr() + k * g.per_group;
      const T v = gout[k] * inv;
      for (std::size_t i = 0; i < g.per_group; ++i) p[i] += v;
    }
  });
}

template <typename T>
Var<T> group_std(Var<T> x, std::size_t groups) {
  const auto g = group_geom(x, groups, "group_std");
  auto mean = std::make_shared<Tensor<T>>(Shape{g.n, g.groups});
  Tensor<T> sd(Shape{g.n, g.groups});
  group_moments<T>(x.value(), g, *mean, &sd);
  auto sdp = std::make_shared<Tensor<T>>(sd);
  return x.tape->record(std::move(sd), {x}, [x, g, mean, sdp](Tape<T>& t, const Tensor<T>& gout) {
    auto& gx = t.grad_ref(x);
    const auto& xv = x.value();
    for (std::size_t k = 0; k < g.n * g.groups; ++k) {
      const T s = (*sdp)[k];
      // d sigma / dx = (x - mu) / (n sigma); zero at sigma = 0 by convention.
      if (s <= T(0)) continue;
      const T coef = gout[k] / (static_cast<T>(g.per_group) * s);
      const T m = (*mean)[k];
      const T* xp = xv.ptr() + k * g.per_group;
      T* p = gx.ptr() + k * g.per_group;
      for (std::size_t i = 0; i < g.per_group; ++i) p[i] += coef * (xp[i] - m);
    }
  });
}

namespace {

template <typename T>
void batch_moments(const Tensor<T>& xv, Tensor<T>& mean, Tensor<T>* stdev) {
  const std::size_t n = xv.n(), c = xv.c(), hw = xv.h() * xv.w();
  const double cnt = static_cast<double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = xv.ptr() + (i * c + ch) * hw;
      s += lane_sum<double>(hw, [p](std::size_t j) { return static_cast<double>(p[j]); });
    }
    const double m = s / cnt;
    mean[ch] = static_cast<T>(m);
    if (stdev) {
      double q = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = xv.ptr() + (i * c + ch) * hw;
        q += lane_sum<double>(hw, [p, m](std::size_t j) {
          const double d = static_cast<double>(p[j]) - m;
          return d * d;
        });
      }
      (*stdev)[ch] = static_cast<T>(std::sqrt(q / cnt));
    }
  }
}

template <typename T>
void check_batch_input(Var<T> x, const char* op) {
  require_rank(x, 4, op);
  if (x.value().n() * x.value().h() * x.value().w() == 0) throw ShapeError(std::string(op) + ": empty input");
}

}  // namespace

template <typename T>
Var<T> batch_mean(Var<T> x) {
  check_batch_input(x, "batch_mean");
  const auto& xv = x.value();
  Tensor<T> mean(Shape{xv.c()});
  batch_moments<T>(xv, mean, nullptr);
  return x.tape->record(std::move(mean), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = x.value();
    const std::size_t n = xv.n(), c = xv.c(), hw = xv.h() * xv.w();
    const T inv = T(1) / static_cast<T>(n * hw);
    auto& gx = t.grad_ref(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        T* p = gx.ptr() + (i * c + ch) * hw;
        const T v = g[ch] * inv;
        for (std::size_t j = 0; j < hw; ++j) p[j] += v;
      }
  });
}

template <typename T>
Var<T> batch_std(Var<T> x) {
  check_batch_input(x, "batch_std");
  const auto& xv = x.value();
  auto mean = std::make_shared<Tensor<T>>(Shape{xv.c()});
  Tensor<T> sd(Shape{xv.c()});
  batch_moments<T>(xv, *mean, &sd);
  auto sdp = std::make_shared<Tensor<T>>(sd);
  return x.tape->record(std::move(sd), {x}, [x, mean, sdp](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = x.value();
    const std::size_t n = xv.n(), c = xv.c(), hw = xv.h() * xv.w();
    auto& gx = t.grad_ref(x);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T s = (*sdp)[ch];
      if (s <= T(0)) continue;
      const T coef = g[ch] / (static_cast<T>(n * hw) * s);
      const T m = (*mean)[ch];
      for (std::size_t i = 0; i < n; ++i) {
        const T* xp = xv.ptr() + (i * c + ch) * hw;
        T* p = gx.ptr() + (i * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) p[j] += coef * (xp[j] - m);
      }
    }
  });
}

template <typename T>
Var<T> expand_groups(Var<T> v, std::size_t channels) {
  require_rank(v, 2, "expand_groups");
  const auto& vv = v.value();
  const std::size_t n = vv.dim(0), groups = vv.dim(1);
  if (groups == 0 || channels % groups != 0) throw ShapeError("expand_groups: groups do not divide channels");
  const std::size_t per = channels / groups;
  Tensor<T> out(Shape{n, channels});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c) out.at(i, c) = vv.at(i, c / per);
  return v.tape->record(std::move(out), {v}, [v, n, channels, per](Tape<T>& t, const Tensor<T>& g) {
    auto& gv = t.grad_ref(v);
    const std::size_t groups = channels / per;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < channels; ++c) gv[i * groups + c / per] += g[i * channels + c];
  });
}

template <typename T>
Var<T> broadcast_rows(Var<T> v, std::size_t rows) {
  require_rank(v, 1, "broadcast_rows");
  const auto& vv = v.value();
  const std::size_t d = vv.size();
  Tensor<T> out(Shape{rows, d});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < d; ++c) out.at(r, c) = vv[c];
  return v.tape->record(std::move(out), {v}, [v, rows, d](Tape<T>& t, const Tensor<T>& g) {
    auto& gv = t.grad_ref(v);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < d; ++c) gv[c] += g[r * d + c];
  });
}

namespace {

template <typename T>
void require_stats(Var<T> x, Var<T> s, const char* what) {
  const auto& xv = x.value();
  const auto& sv = s.value();
  if (sv.rank() != 2 || sv.dim(0) != xv.n() || sv.dim(1) != xv.c()) {
    throw ShapeError(std::string("standardize: ") + what + " has shape " + shape_str(sv.shape()) + ", expected (" +
                     std::to_string(xv.n()) + "," + std::to_string(xv.c()) + ")");
  }
}

template <typename T>
Var<T> standardize_impl(Var<T> x, Var<T> mu, Var<T> sigma, std::optional<Var<T>> gamma, std::optional<Var<T>> beta,
                        T eps) {
  require_rank(x, 4, "standardize");
  require_stats(x, mu, "mu");
  require_stats(x, sigma, "sigma");
  if (gamma) require_stats(x, *gamma, "gamma");
  if (beta) require_stats(x, *beta, "beta");
  const auto& xv = x.value();
  const auto& mv = mu.value();
  const auto& sv = sigma.value();
  for (std::size_t i = 0; i < sv.size(); ++i) {
    if (!(sv[i] >= T(0))) throw ValidationError("standardize: sigma must be non-negative");
  }
  const std::size_t n = xv.n(), c = xv.c(), hw = xv.h() * xv.w();
  Tensor<T> out(xv.shape());
  for (std::size_t k = 0; k < n * c; ++k) {
    const T m = mv[k];
    const T inv = T(1) / (sv[k] + eps);
    const T gm = gamma ? gamma->value()[k] : T(1);
    const T bt = beta ? beta->value()[k] : T(0);
    const T* xp = xv.ptr() + k * hw;
    T* op = out.ptr() + k * hw;
    if (gamma || beta) {
      for (std::size_t j = 0; j < hw; ++j) op[j] = ((xp[j] - m) * inv) * gm + bt;
    } else {
      for (std::size_t j = 0; j < hw; ++j) op[j] = (xp[j] - m) * inv;
    }
  }
  auto rule = [x, mu, sigma, gamma, beta, eps, n, c, hw](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = x.value();
    const auto& mv = mu.value();
    const auto& sv = sigma.value();
    const bool nx = t.requires_grad(x), nm = t.requires_grad(mu), ns = t.requires_grad(sigma);
    const bool ng = gamma && t.requires_grad(*gamma), nb = beta && t.requires_grad(*beta);
    for (std::size_t k = 0; k < n * c; ++k) {
      const T m = mv[k];
      const T inv = T(1) / (sv[k] + eps);
      const T gm = gamma ? gamma->value()[k] : T(1);
      const T* xp = xv.ptr() + k * hw;
      const T* gp = g.ptr() + k * hw;
      const T sum_g = lane_sum<T>(hw, [gp](std::size_t j) { return gp[j]; });
      const T sum_gx = lane_sum<T>(hw, [=](std::size_t j) { return gp[j] * ((xp[j] - m) * inv); });
      if (nb) t.grad_ref(*beta)[k] += sum_g;
      if (ng) t.grad_ref(*gamma)[k] += sum_gx;
      // d/dxhat = g * gamma
      if (nm) t.grad_ref(mu)[k] += -sum_g * gm * inv;
      if (ns) t.grad_ref(sigma)[k] += -sum_gx * gm * inv;
      if (nx) {
        T* dx = t.grad_ref(x).ptr() + k * hw;
        const T f = gm * inv;
        for (std::size_t j = 0; j < hw; ++j) dx[j] += gp[j] * f;
      }
    }
  };
  if (gamma && beta) return x.tape->record(std::move(out), {x, mu, sigma, *gamma, *beta}, rule);
  return x.tape->record(std::move(out), {x, mu, sigma}, rule);
}

}  // namespace

template <typename T>
Var<T> standardize_rescale(Var<T> x, Var<T> mu, Var<T> sigma, Var<T> gamma, Var<T> beta, T eps) {
  return standardize_impl(x, mu, sigma, std::optional<Var<T>>(gamma), std::optional<Var<T>>(beta), eps);
}

template <typename T>
Var<T> standardize(Var<T> x, Var<T> mu, Var<T> sigma, T eps) {
  return standardize_impl(x, mu, sigma, std::optional<Var<T>>(), std::optional<Var<T>>(), eps);
}

template <typename T>
Var<T> channel_affine(Var<T> x, Var<T> gamma, Var<T> beta) {
  require_rank(x, 4, "channel_affine");
  require_stats(x, gamma, "gamma");
  require_stats(x, beta, "beta");
  const auto& xv = x.value();
  const std::size_t n = xv.n(), c = xv.c(), hw = xv.h() * xv.w();
  Tensor<T> out(xv.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t k = 0; k < n * c; ++k) {
    const T* xp = xv.ptr() + k * hw;
    T* op = out.ptr() + k * hw;
    for (std::size_t j = 0; j < hw; ++j) op[j] = xp[j] * gv[k] + bv[k];
  }
  return x.tape->record(std::move(out), {x, gamma, beta}, [x, gamma, beta, n, c, hw](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = x.value();
    const auto& gv = gamma.value();
    const bool nx = t.requires_grad(x), ng = t.requires_grad(gamma), nb = t.requires_grad(beta);
    for (std::size_t k = 0; k < n * c; ++k) {
      const T* xp = xv.ptr() + k * hw;
      const T* gp = g.ptr() + k * hw;
      const T sg = lane_sum<T>(hw, [gp](std::size_t j) { return gp[j]; });
      const T sgx = lane_sum<T>(hw, [=](std::size_t j) { return gp[j] * xp[j]; });
      if (nb) t.grad_ref(beta)[k] += sg;
      if (ng) t.grad_ref(gamma)[k] += sgx;
      if (nx) {
        T* dx = t.grad_ref(x).ptr() + k * hw;
        for (std::size_t j = 0; j < hw; ++j) dx[j] += gp[j] * gv[k];
      }
    }
  });
}

template <typename T>
Var<T> half_squared_distance(Var<T> a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("half_squared_distance: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto& av = a.value();
  auto diff = std::make_shared<Tensor<T>>(av.shape());
  T acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - b[i];
    (*diff)[i] = d;
    acc += d * d;
  }
  return a.tape->record(Tensor<T>::scalar(T(0.5) * acc), {a}, [a, diff](Tape<T>& t, const Tensor<T>& g) {
    auto& ga = t.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * (*diff)[i];
  });
}

#define NORMSHIFT_INSTANTIATE_OPS(T)                                                                         \
  template Var<T> add(Var<T>, Var<T>);                                                                       \
  template Var<T> sub(Var<T>, Var<T>);                                                                       \
  template Var<T> mul(Var<T>, Var<T>);                                                                       \
  template Var<T> scale(Var<T>, T);                                                                          \
  template Var<T> mul_scalar(Var<T>, Var<T>);                                                                \
  template Var<T> lerp(Var<T>, Var<T>, Var<T>);                                                              \
  template Var<T> relu(Var<T>);                                                                              \
  template Var<T> sigmoid(Var<T>);                                                                           \
  template Var<T> tanh(Var<T>);                                                                              \
  template Var<T> sum(Var<T>);                                                                               \
  template Var<T> reshape(Var<T>, Shape);                                                                    \
  template Var<T> index(Var<T>, std::size_t);                                                                \
  template Var<T> softmax(Var<T>, const std::vector<bool>&);                                                 \
  template Var<T> fully_connected(Var<T>, Var<T>, Var<T>);                                                   \
  template Var<T> fully_connected(Var<T>, Var<T>);                                                           \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int, int);                                                  \
  template Var<T> maxpool2d(Var<T>, int, int);                                                               \
  template CrossEntropy<T> softmax_cross_entropy(Var<T>, std::span<const std::int32_t>, Reduction);          \
  template Var<T> group_mean(Var<T>, std::size_t);                                                           \
  template Var<T> group_std(Var<T>, std::size_t);                                                            \
  template Var<T> batch_mean(Var<T>);                                                                        \
  template Var<T> batch_std(Var<T>);                                                                         \
  template Var<T> expand_groups(Var<T>, std::size_t);                                                        \
  template Var<T> broadcast_rows(Var<T>, std::size_t);                                                       \
  template Var<T> standardize_rescale(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, T);                            \
  template Var<T> standardize(Var<T>, Var<T>, Var<T>, T);                                                    \
  template Var<T> channel_affine(Var<T>, Var<T>, Var<T>);                                                    \
  template Var<T> half_squared_distance(Var<T>, const Tensor<T>&);

NORMSHIFT_INSTANTIATE_OPS(float)
NORMSHIFT_INSTANTIATE_OPS(double)

}  // namespace normshift
