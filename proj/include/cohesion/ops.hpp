#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cohesion/tensor.hpp"

namespace cohesion {

namespace detail {

struct AxisSplit {
    std::size_t outer;
    std::size_t len;
    std::size_t inner;
};

inline std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
    const int r = static_cast<int>(rank);
    int a = axis;
    if (a < 0) a += r;
    if (a < 0 || a >= r) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " invalid for rank-" + std::to_string(rank) + " tensor");
    }
    return static_cast<std::size_t>(a);
}

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

/// True when `small` equals the trailing axes of `big` (suffix broadcast).
inline bool is_suffix_shape(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    const std::size_t offset = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i) {
        if (big[offset + i] != small[i]) return false;
    }
    return true;
}

template <typename T>
inline T stable_sigmoid(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise add / sub / mul. The second operand may be a trailing-axes
// (suffix) shape of the first, in which case it is repeated over the leading
// axes; this is what dense-layer bias addition uses.
// ---------------------------------------------------------------------------

namespace detail {

enum class EwKind { Add, Sub, Mul };

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, EwKind kind, const char* op) {
    if (!is_suffix_shape(a.shape(), b.shape())) {
        throw DimensionError(std::string(op) + ": shape " + shape_str(b.shape()) +
                             " is not the same as (or a suffix of) " + shape_str(a.shape()));
    }
    const auto& av = a.values();
    const auto& bv = b.values();
    const std::size_t bn = bv.size();
    std::vector<T> out(av.size());
    switch (kind) {
        case EwKind::Add:
            for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % bn];
            break;
        case EwKind::Sub:
            for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i % bn];
            break;
        case EwKind::Mul:
            for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % bn];
            break;
    }
    check_finite(out, op);
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a, b},
        [kind, bn](Node<T>& self) {
            Node<T>& pa = *self.parents[0];
            Node<T>& pb = *self.parents[1];
            const std::size_t n = self.grad.size();
            if (pa.requires_grad) {
                pa.ensure_grad();
                if (kind == EwKind::Mul) {
                    for (std::size_t i = 0; i < n; ++i)
                        pa.grad[i] += self.grad[i] * pb.values[i % bn];
                } else {
                    for (std::size_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i];
                }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                switch (kind) {
                    case EwKind::Add:
                        for (std::size_t i = 0; i < n; ++i) pb.grad[i % bn] += self.grad[i];
                        break;
                    case EwKind::Sub:
                        for (std::size_t i = 0; i < n; ++i) pb.grad[i % bn] -= self.grad[i];
                        break;
                    case EwKind::Mul:
                        for (std::size_t i = 0; i < n; ++i)
                            pb.grad[i % bn] += self.grad[i] * pa.values[i];
                        break;
                }
            }
        });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise(a, b, detail::EwKind::Add, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise(a, b, detail::EwKind::Sub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise(a, b, detail::EwKind::Mul, "mul");
}

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_map(const Tensor<T>& x, const char* op, Fwd fwd, Bwd dfdx) {
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    check_finite(out, op);
    return Tensor<T>::make_op(
        x.shape(), std::move(out), {x},
        [dfdx](Node<T>& self) {
            Node<T>& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                px.grad[i] += self.grad[i] * dfdx(px.values[i], self.values[i]);
            }
        });
}

}  // namespace detail

// Scalar sugar: lowers to the same elementwise ops with a repeated constant.
template <typename T>
Tensor<T> add(const Tensor<T>& a, T c) {
    return detail::unary_map(a, "add", [c](T x) { return x + c; },
                             [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, T c) {
    return add(a, -c);
}

template <typename T>
Tensor<T> sub(T c, const Tensor<T>& a) {
    return detail::unary_map(a, "sub", [c](T x) { return c - x; },
                             [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, T c) {
    return detail::unary_map(a, "mul", [c](T x) { return x * c; },
                             [c](T, T) { return c; });
}

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T c) { return add(a, c); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, T c) { return sub(a, c); }
template <typename T> Tensor<T> operator-(T c, const Tensor<T>& a) { return sub(c, a); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T c) { return mul(a, c); }
template <typename T> Tensor<T> operator*(T c, const Tensor<T>& a) { return mul(a, c); }

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary_map(x, "relu",
                             [](T v) { return v > T(0) ? v : T(0); },
                             [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary_map(x, "sigmoid",
                             [](T v) { return detail::stable_sigmoid(v); },
                             [](T, T y) { return y * (T(1) - y); });
}

/// x * sigmoid(x)
template <typename T>
Tensor<T> swish(const Tensor<T>& x) {
    return detail::unary_map(x, "swish",
                             [](T v) { return v * detail::stable_sigmoid(v); },
                             [](T v, T) {
                                 const T s = detail::stable_sigmoid(v);
                                 return s * (T(1) + v * (T(1) - s));
                             });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary_map(x, "square", [](T v) { return v * v; },
                             [](T v, T) { return T(2) * v; });
}

/// Elementwise square root. Negative inputs surface as a numeric error.
/// The derivative at exactly zero is treated as zero.
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    return detail::unary_map(x, "sqrt", [](T v) { return std::sqrt(v); },
                             [](T, T y) { return y > T(0) ? T(1) / (T(2) * y) : T(0); });
}

/// Numerically stabilized softmax along `axis`; slices sum to 1.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    const std::size_t ax = detail::normalize_axis(axis, x.rank(), "softmax");
    const auto split = detail::split_axis(x.shape(), ax);
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t in = 0; in < split.inner; ++in) {
            const std::size_t base = o * split.len * split.inner + in;
            T mx = xv[base];
            for (std::size_t i = 1; i < split.len; ++i) {
                mx = std::max(mx, xv[base + i * split.inner]);
            }
            T sum = T(0);
            for (std::size_t i = 0; i < split.len; ++i) {
                const T e = std::exp(xv[base + i * split.inner] - mx);
                out[base + i * split.inner] = e;
                sum += e;
            }
            for (std::size_t i = 0; i < split.len; ++i) {
                out[base + i * split.inner] /= sum;
            }
        }
    }
    detail::check_finite(out, "softmax");
    return Tensor<T>::make_op(
        x.shape(), std::move(out), {x},
        [split](detail::Node<T>& self) {
            detail::Node<T>& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (std::size_t o = 0; o < split.outer; ++o) {
                for (std::size_t in = 0; in < split.inner; ++in) {
                    const std::size_t base = o * split.len * split.inner + in;
                    T dot = T(0);
                    for (std::size_t i = 0; i < split.len; ++i) {
                        const std::size_t idx = base + i * split.inner;
                        dot += self.grad[idx] * self.values[idx];
                    }
                    for (std::size_t i = 0; i < split.len; ++i) {
                        const std::size_t idx = base + i * split.inner;
                        px.grad[idx] += self.values[idx] * (self.grad[idx] - dot);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// 2-D matrix product [m,k] x [k,n] -> [m,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0];
    const std::size_t k = a.shape()[1];
    const std::size_t n = b.shape()[1];
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<T> out(m * n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            const T aval = av[i * k + l];
            const T* brow = bv.data() + l * n;
            T* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aval * brow[j];
        }
    }
    detail::check_finite(out, "matmul");
    return Tensor<T>::make_op(
        {m, n}, std::move(out), {a, b},
        [m, k, n](detail::Node<T>& self) {
            detail::Node<T>& pa = *self.parents[0];
            detail::Node<T>& pb = *self.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const T g = self.grad[i * n + j];
                        const T* brow = pb.values.data() + j;
                        T* arow = pa.grad.data() + i * k;
                        for (std::size_t l = 0; l < k; ++l) arow[l] += g * brow[l * n];
                    }
                }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t l = 0; l < k; ++l) {
                        const T aval = pa.values[i * k + l];
                        const T* grow = self.grad.data() + i * n;
                        T* brow = pb.grad.data() + l * n;
                        for (std::size_t j = 0; j < n; ++j) brow[j] += aval * grow[j];
                    }
                }
            }
        });
}

/// Valid (unpadded) 2-D cross-correlation with stride.
/// input [b,c,h,w], kernel [f,c,kh,kw] -> [b,f,h',w'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride) {
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    if (input.rank() != 4 || kernel.rank() != 4 || input.shape()[1] != kernel.shape()[1] ||
        kernel.shape()[2] > input.shape()[2] || kernel.shape()[3] > input.shape()[3]) {
        throw DimensionError("conv2d: incompatible shapes, input " + shape_str(input.shape()) +
                             " vs kernel " + shape_str(kernel.shape()));
    }
    const std::size_t bsz = input.shape()[0], ch = input.shape()[1];
    const std::size_t h = input.shape()[2], w = input.shape()[3];
    const std::size_t f = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
    const std::size_t oh = (h - kh) / stride + 1;
    const std::size_t ow = (w - kw) / stride + 1;
    const auto& xv = input.values();
    const auto& kv = kernel.values();
    std::vector<T> out(bsz * f * oh * ow, T(0));
    for (std::size_t bi = 0; bi < bsz; ++bi) {
        for (std::size_t fi = 0; fi < f; ++fi) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    T acc = T(0);
                    for (std::size_t c = 0; c < ch; ++c) {
                        const T* xplane = xv.data() + (bi * ch + c) * h * w;
                        const T* kplane = kv.data() + (fi * ch + c) * kh * kw;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const T* xrow = xplane + (oy * stride + ky) * w + ox * stride;
                            const T* krow = kplane + ky * kw;
                            for (std::size_t kx = 0; kx < kw; ++kx) acc += xrow[kx] * krow[kx];
                        }
                    }
                    out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    detail::check_finite(out, "conv2d");
    return Tensor<T>::make_op(
        {bsz, f, oh, ow}, std::move(out), {input, kernel},
        [bsz, ch, h, w, f, kh, kw, oh, ow, stride](detail::Node<T>& self) {
            detail::Node<T>& px = *self.parents[0];
            detail::Node<T>& pk = *self.parents[1];
            const bool need_x = px.requires_grad;
            const bool need_k = pk.requires_grad;
            if (need_x) px.ensure_grad();
            if (need_k) pk.ensure_grad();
            for (std::size_t bi = 0; bi < bsz; ++bi) {
                for (std::size_t fi = 0; fi < f; ++fi) {
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const T g = self.grad[((bi * f + fi) * oh + oy) * ow + ox];
                            if (g == T(0)) continue;
                            for (std::size_t c = 0; c < ch; ++c) {
                                const std::size_t xoff = (bi * ch + c) * h * w;
                                const std::size_t koff = (fi * ch + c) * kh * kw;
                                for (std::size_t ky = 0; ky < kh; ++ky) {
                                    const std::size_t xrow = xoff + (oy * stride + ky) * w + ox * stride;
                                    const std::size_t krow = koff + ky * kw;
                                    for (std::size_t kx = 0; kx < kw; ++kx) {
                                        if (need_x) px.grad[xrow + kx] += g * pk.values[krow + kx];
                                        if (need_k) pk.grad[krow + kx] += g * px.values[xrow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape target) {
    if (shape_size(target) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(target));
    }
    return Tensor<T>::make_op(std::move(target), x.values(), {x},
                              [](detail::Node<T>& self) {
                                  detail::Node<T>& px = *self.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                      px.grad[i] += self.grad[i];
                                  }
                              });
}

/// Concatenates tensors along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no tensors given");
    const std::size_t ax = detail::normalize_axis(axis, parts[0].rank(), "concat");
    Shape out_shape = parts[0].shape();
    std::size_t total = parts[0].shape()[ax];
    for (std::size_t p = 1; p < parts.size(); ++p) {
        const Shape& s = parts[p].shape();
        if (s.size() != out_shape.size()) {
            throw DimensionError("concat: rank mismatch between " + shape_str(out_shape) +
                                 " and " + shape_str(s));
        }
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != ax && s[i] != out_shape[i]) {
                throw DimensionError("concat: shape mismatch between " + shape_str(out_shape) +
                                     " and " + shape_str(s));
            }
        }
        total += s[ax];
    }
    out_shape[ax] = total;

    const auto split0 = detail::split_axis(parts[0].shape(), ax);
    std::vector<std::size_t> lens(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) lens[p] = parts[p].shape()[ax];

    std::vector<T> out(shape_size(out_shape));
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& pv = parts[p].values();
        const std::size_t plen = lens[p] * split0.inner;
        const std::size_t ostride = total * split0.inner;
        for (std::size_t o = 0; o < split0.outer; ++o) {
            std::copy(pv.begin() + o * plen, pv.begin() + (o + 1) * plen,
                      out.begin() + o * ostride + offset);
        }
        offset += plen;
    }
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), parts,
        [split0, lens, total](detail::Node<T>& self) {
            std::size_t offset = 0;
            const std::size_t ostride = total * split0.inner;
            for (std::size_t p = 0; p < self.parents.size(); ++p) {
                detail::Node<T>& pp = *self.parents[p];
                const std::size_t plen = lens[p] * split0.inner;
                if (pp.requires_grad) {
                    pp.ensure_grad();
                    for (std::size_t o = 0; o < split0.outer; ++o) {
                        for (std::size_t i = 0; i < plen; ++i) {
                            pp.grad[o * plen + i] += self.grad[o * ostride + offset + i];
                        }
                    }
                }
                offset += plen;
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline Shape drop_axis(const Shape& shape, std::size_t axis) {
    Shape out;
    out.reserve(shape.size() - 1);
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != axis) out.push_back(shape[i]);
    }
    if (out.empty()) out.push_back(1);
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, int axis) {
    const std::size_t ax = detail::normalize_axis(axis, x.rank(), "reduce_sum");
    const auto split = detail::split_axis(x.shape(), ax);
    const auto& xv = x.values();
    std::vector<T> out(split.outer * split.inner, T(0));
    for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t i = 0; i < split.len; ++i) {
            const std::size_t base = (o * split.len + i) * split.inner;
            for (std::size_t in = 0; in < split.inner; ++in) {
                out[o * split.inner + in] += xv[base + in];
            }
        }
    }
    detail::check_finite(out, "reduce_sum");
    return Tensor<T>::make_op(
        detail::drop_axis(x.shape(), ax), std::move(out), {x},
        [split](detail::Node<T>& self) {
            detail::Node<T>& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (std::size_t o = 0; o < split.outer; ++o) {
                for (std::size_t i = 0; i < split.len; ++i) {
                    const std::size_t base = (o * split.len + i) * split.inner;
                    for (std::size_t in = 0; in < split.inner; ++in) {
                        px.grad[base + in] += self.grad[o * split.inner + in];
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, int axis) {
    const std::size_t ax = detail::normalize_axis(axis, x.rank(), "reduce_mean");
    const T scale = T(1) / T(x.shape()[ax]);
    return mul(reduce_sum(x, axis), scale);
}

namespace detail {

template <typename T, typename Better>
Tensor<T> reduce_extreme(const Tensor<T>& x, int axis, const char* op, Better better) {
    const std::size_t ax = normalize_axis(axis, x.rank(), op);
    const auto split = split_axis(x.shape(), ax);
    const auto& xv = x.values();
    std::vector<T> out(split.outer * split.inner);
    // Gradient is routed to the first extremal element of each slice.
    std::vector<std::size_t> arg(out.size());
    for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t in = 0; in < split.inner; ++in) {
            std::size_t best = (o * split.len) * split.inner + in;
            T bestv = xv[best];
            for (std::size_t i = 1; i < split.len; ++i) {
                const std::size_t idx = (o * split.len + i) * split.inner + in;
                if (better(xv[idx], bestv)) {
                    bestv = xv[idx];
                    best = idx;
                }
            }
            out[o * split.inner + in] = bestv;
            arg[o * split.inner + in] = best;
        }
    }
    return Tensor<T>::make_op(
        drop_axis(x.shape(), ax), std::move(out), {x},
        [arg](Node<T>& self) {
            Node<T>& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                px.grad[arg[i]] += self.grad[i];
            }
        });
}

}  // namespace detail

template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, int axis) {
    return detail::reduce_extreme(x, axis, "reduce_max", [](T a, T b) { return a > b; });
}

template <typename T>
Tensor<T> reduce_min(const Tensor<T>& x, int axis) {
    return detail::reduce_extreme(x, axis, "reduce_min", [](T a, T b) { return a < b; });
}

/// Full reduction to a scalar (sum over every axis).
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
    const auto& xv = x.values();
    T total = T(0);
    for (const T v : xv) total += v;
    if (!std::isfinite(total)) throw NumericError("reduce_sum produced a non-finite value");
    return Tensor<T>::make_op({1}, {total}, {x},
                              [](detail::Node<T>& self) {
                                  detail::Node<T>& px = *self.parents[0];
                                  if (!px.requires_grad) return;
                                  px.ensure_grad();
                                  const T g = self.grad[0];
                                  for (auto& d : px.grad) d += g;
                              });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
    return mul(reduce_sum(x), T(1) / T(x.size()));
}

/// L2 norm along `axis`; the axis is removed from the output shape.
/// The derivative at an exactly zero slice is treated as zero.
template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x, int axis) {
    const std::size_t ax = detail::normalize_axis(axis, x.rank(), "l2_norm");
    const auto split = detail::split_axis(x.shape(), ax);
    const auto& xv = x.values();
    std::vector<T> out(split.outer * split.inner, T(0));
    for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t i = 0; i < split.len; ++i) {
            const std::size_t base = (o * split.len + i) * split.inner;
            for (std::size_t in = 0; in < split.inner; ++in) {
                const T v = xv[base + in];
                out[o * split.inner + in] += v * v;
            }
        }
    }
    for (auto& v : out) v = std::sqrt(v);
    detail::check_finite(out, "l2_norm");
    return Tensor<T>::make_op(
        detail::drop_axis(x.shape(), ax), std::move(out), {x},
        [split](detail::Node<T>& self) {
            detail::Node<T>& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (std::size_t o = 0; o < split.outer; ++o) {
                for (std::size_t in = 0; in < split.inner; ++in) {
                    const std::size_t oidx = o * split.inner + in;
                    const T norm = self.values[oidx];
                    if (norm == T(0)) continue;
                    const T scale = self.grad[oidx] / norm;
                    for (std::size_t i = 0; i < split.len; ++i) {
                        const std::size_t idx = (o * split.len + i) * split.inner + in;
                        px.grad[idx] += scale * px.values[idx];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Exponential averages of batch statistics, held as untracked tensors so
/// layers can expose them alongside parameters (for checkpoints and best-
/// epoch snapshots) without ever entering a gradient graph.
template <typename T>
struct RunningStats {
    Tensor<T> mean;
    Tensor<T> var;

    static RunningStats initial(std::size_t features) {
        RunningStats s;
        s.mean = Tensor<T>::zeros({features}, false);
        s.var = Tensor<T>::full({features}, T(1), false);
        return s;
    }
};

enum class BatchNormMode { Train, Eval };

/// Normalizes each trailing-axis feature over all leading axes.
/// Train mode uses batch statistics and updates `running`; eval mode reads
/// `running`. Requires a batch of at least 2 in train mode.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     RunningStats<T>& running, BatchNormMode mode, T epsilon = T(1e-5),
                     T momentum = T(0.9)) {
    if (input.rank() < 2) {
        throw DimensionError("batch_norm: input must have a batch axis, got " +
                             shape_str(input.shape()));
    }
    const std::size_t features = input.shape().back();
    if (gamma.size() != features || beta.size() != features ||
        running.mean.size() != features || running.var.size() != features) {
        throw DimensionError("batch_norm: gamma/beta/running stats must have " +
                             std::to_string(features) + " features");
    }
    if (mode == BatchNormMode::Train && input.shape()[0] < 2) {
        throw ConfigError("batch_norm: train mode needs batch size >= 2, got " +
                          std::to_string(input.shape()[0]));
    }
    const std::size_t rows = input.size() / features;
    const auto& xv = input.values();

    std::vector<T> mean(features, T(0));
    std::vector<T> var(features, T(0));
    if (mode == BatchNormMode::Train) {
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t f = 0; f < features; ++f) mean[f] += xv[r * features + f];
        }
        for (auto& m : mean) m /= T(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t f = 0; f < features; ++f) {
                const T d = xv[r * features + f] - mean[f];
                var[f] += d * d;
            }
        }
        for (auto& v : var) v /= T(rows);
        auto& rm = running.mean.values_mut();
        auto& rv = running.var.values_mut();
        for (std::size_t f = 0; f < features; ++f) {
            rm[f] = momentum * rm[f] + (T(1) - momentum) * mean[f];
            rv[f] = momentum * rv[f] + (T(1) - momentum) * var[f];
        }
    } else {
        mean = running.mean.values();
        var = running.var.values();
    }

    std::vector<T> inv_std(features);
    for (std::size_t f = 0; f < features; ++f) inv_std[f] = T(1) / std::sqrt(var[f] + epsilon);

    std::vector<T> xhat(xv.size());
    std::vector<T> out(xv.size());
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t f = 0; f < features; ++f) {
            const std::size_t idx = r * features + f;
            xhat[idx] = (xv[idx] - mean[f]) * inv_std[f];
            out[idx] = gv[f] * xhat[idx] + bv[f];
        }
    }
    detail::check_finite(out, "batch_norm");

    const bool train = (mode == BatchNormMode::Train);
    return Tensor<T>::make_op(
        input.shape(), std::move(out), {input, gamma, beta},
        [rows, features, xhat = std::move(xhat), inv_std = std::move(inv_std),
         train](detail::Node<T>& self) {
            detail::Node<T>& px = *self.parents[0];
            detail::Node<T>& pg = *self.parents[1];
            detail::Node<T>& pb = *self.parents[2];
            const auto& g = self.grad;
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t f = 0; f < features; ++f) {
                        pg.grad[f] += g[r * features + f] * xhat[r * features + f];
                    }
                }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t f = 0; f < features; ++f) pb.grad[f] += g[r * features + f];
                }
            }
            if (!px.requires_grad) return;
            px.ensure_grad();
            const auto& gv = pg.values;
            if (!train) {
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t f = 0; f < features; ++f) {
                        const std::size_t idx = r * features + f;
                        px.grad[idx] += g[idx] * gv[f] * inv_std[f];
                    }
                }
                return;
            }
            // Train mode: gradients flow through the batch mean and variance.
            std::vector<T> sum_dxhat(features, T(0));
            std::vector<T> sum_dxhat_xhat(features, T(0));
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t f = 0; f < features; ++f) {
                    const std::size_t idx = r * features + f;
                    const T dxhat = g[idx] * gv[f];
                    sum_dxhat[f] += dxhat;
                    sum_dxhat_xhat[f] += dxhat * xhat[idx];
                }
            }
            const T inv_rows = T(1) / T(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t f = 0; f < features; ++f) {
                    const std::size_t idx = r * features + f;
                    const T dxhat = g[idx] * gv[f];
                    px.grad[idx] += inv_std[f] * (dxhat - inv_rows * sum_dxhat[f] -
                                                  xhat[idx] * inv_rows * sum_dxhat_xhat[f]);
                }
            }
        });
}

}  // namespace cohesion
