#include "matssl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace matssl {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

namespace {

void check_shape_positive(const Shape& s) {
    for (auto d : s) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(s));
    }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape_positive(shape);
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    check_shape_positive(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

Tensor Tensor::scalar64(double value) {
    Tensor t = from({1}, {static_cast<float>(value)});
    t.impl_->scalar_f64 = value;
    t.impl_->has_scalar_f64 = true;
    return t;
}

float Tensor::value() const {
    if (numel() != 1) throw ShapeError("value() requires a scalar tensor, shape is " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::value_f64() const {
    if (impl_->has_scalar_f64) return impl_->scalar_f64;
    return static_cast<double>(value());
}

std::span<float> Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

void Tensor::zero_grad() const {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

void Tensor::check_finite(const char* what) const {
    for (float v : impl_->data) {
        if (!std::isfinite(v)) throw ValueError(std::string(what) + ": non-finite value encountered");
    }
}

// --- tape --------------------------------------------------------------------

int Tape::assign_id(const Tensor& t) {
    if (t.impl()->tape_id < 0) t.impl()->tape_id = next_id_++;
    return t.impl()->tape_id;
}

void Tape::record(const char* op, std::span<const Tensor> inputs, Tensor& output,
                  std::function<void()> backward) {
    if (!grad_enabled_) return;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return;
    Node node;
    node.op = op;
    node.input_ids.reserve(inputs.size());
    for (const auto& in : inputs) node.input_ids.push_back(assign_id(in));
    node.output_id = assign_id(output);
    node.backward = std::move(backward);
    output.set_requires_grad(true);
    nodes_.push_back(std::move(node));
}

void Tape::clear() {
    nodes_.clear();
    next_id_ = 0;
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward expects a scalar loss, shape is " + shape_str(loss.shape()));
    }
    Tensor seed = loss;
    seed.grad()[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        it->backward();
    }
}

// --- op helpers ----------------------------------------------------------------

namespace {

// Accumulate into the grad buffer of t only when it participates in the graph.
inline float* grad_ptr_if_needed(const Tensor& t) {
    if (!t.requires_grad()) return nullptr;
    return t.grad().data();
}

void require_ndim(const Tensor& t, int nd, const char* op, const char* role) {
    if (t.ndim() != nd) {
        throw ShapeError(std::string(op) + ": " + role + " must have " + std::to_string(nd) +
                         " axes, got shape " + shape_str(t.shape()));
    }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int padding) {
    require_ndim(input, 4, "conv2d", "input");
    require_ndim(kernel, 4, "conv2d", "kernel");
    require_ndim(bias, 1, "conv2d", "bias");
    const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::int64_t k = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kc != c) {
        throw ShapeError("conv2d: kernel channel axis " + std::to_string(kc) +
                         " != input channel axis " + std::to_string(c));
    }
    if (bias.dim(0) != k) {
        throw ShapeError("conv2d: bias axis " + std::to_string(bias.dim(0)) +
                         " != kernel output axis " + std::to_string(k));
    }
    if (stride < 1) throw ValueError("conv2d: stride must be >= 1, got " + std::to_string(stride));
    if (padding < 0) throw ValueError("conv2d: padding must be >= 0, got " + std::to_string(padding));
    if (kh > h + 2 * padding || kw > w + 2 * padding) {
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceeds padded input " + std::to_string(h + 2 * padding) + "x" +
                         std::to_string(w + 2 * padding));
    }
    const std::int64_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * padding - kw) / stride + 1;

    Tensor out = Tensor::zeros({n, k, oh, ow});
    const float* in = input.data().data();
    const float* ker = kernel.data().data();
    const float* bi = bias.data().data();
    float* o = out.data().data();

    // One (sample, filter) plane per iteration; planes are disjoint so the
    // parallel split cannot change results.
    parallel_for(n * k, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t nk = lo; nk < hi; ++nk) {
            const std::int64_t ni = nk / k, ki = nk % k;
            const float* in_n = in + ni * c * h * w;
            const float* ker_k = ker + ki * c * kh * kw;
            float* o_nk = o + (ni * k + ki) * oh * ow;
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    double acc = bi[ki];
                    const std::int64_t y0 = oy * stride - padding;
                    const std::int64_t x0 = ox * stride - padding;
                    for (std::int64_t ci = 0; ci < c; ++ci) {
                        const float* in_c = in_n + ci * h * w;
                        const float* ker_c = ker_k + ci * kh * kw;
                        for (std::int64_t dy = 0; dy < kh; ++dy) {
                            const std::int64_t y = y0 + dy;
                            if (y < 0 || y >= h) continue;
                            for (std::int64_t dx = 0; dx < kw; ++dx) {
                                const std::int64_t x = x0 + dx;
                                if (x < 0 || x >= w) continue;
                                acc += static_cast<double>(in_c[y * w + x]) *
                                       static_cast<double>(ker_c[dy * kw + dx]);
                            }
                        }
                    }
                    o_nk[oy * ow + ox] = static_cast<float>(acc);
                }
            }
        }
    });

    const Tensor ins[] = {input, kernel, bias};
    tape.record("conv2d", ins, out, [input, kernel, bias, out, stride, padding]() mutable {
        const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
        const std::int64_t k = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
        const std::int64_t oh = out.dim(2), ow = out.dim(3);
        const float* go = out.grad().data();
        const float* in = input.data().data();
        const float* ker = kernel.data().data();
        float* gin = grad_ptr_if_needed(input);
        float* gker = grad_ptr_if_needed(kernel);
        float* gbias = grad_ptr_if_needed(bias);
        for (std::int64_t ni = 0; ni < n; ++ni) {
            for (std::int64_t ki = 0; ki < k; ++ki) {
                const float* go_nk = go + (ni * k + ki) * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const float g = go_nk[oy * ow + ox];
                        if (g == 0.0f) continue;
                        if (gbias) gbias[ki] += g;
                        const std::int64_t y0 = oy * stride - padding;
                        const std::int64_t x0 = ox * stride - padding;
                        for (std::int64_t ci = 0; ci < c; ++ci) {
                            const std::int64_t in_base = (ni * c + ci) * h * w;
                            const std::int64_t ker_base = (ki * c + ci) * kh * kw;
                            for (std::int64_t dy = 0; dy < kh; ++dy) {
                                const std::int64_t y = y0 + dy;
                                if (y < 0 || y >= h) continue;
                                for (std::int64_t dx = 0; dx < kw; ++dx) {
                                    const std::int64_t x = x0 + dx;
                                    if (x < 0 || x >= w) continue;
                                    if (gin) gin[in_base + y * w + x] += g * ker[ker_base + dy * kw + dx];
                                    if (gker) gker[ker_base + dy * kw + dx] += g * in[in_base + y * w + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

Tensor global_average_pool(Tape& tape, const Tensor& input) {
    require_ndim(input, 4, "global_average_pool", "input");
    const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    Tensor out = Tensor::zeros({n, c});
    const float* in = input.data().data();
    float* o = out.data().data();
    const double inv = 1.0 / static_cast<double>(h * w);
    for (std::int64_t i = 0; i < n * c; ++i) {
        double acc = 0.0;
        const float* p = in + i * h * w;
        for (std::int64_t j = 0; j < h * w; ++j) acc += p[j];
        o[i] = static_cast<float>(acc * inv);
    }
    const Tensor ins[] = {input};
    tape.record("global_average_pool", ins, out, [input, out]() mutable {
        const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
        float* gin = grad_ptr_if_needed(input);
        if (!gin) return;
        const float* go = out.grad().data();
        const float inv = 1.0f / static_cast<float>(h * w);
        for (std::int64_t i = 0; i < n * c; ++i) {
            const float g = go[i] * inv;
            float* p = gin + i * h * w;
            for (std::int64_t j = 0; j < h * w; ++j) p[j] += g;
        }
    });
    return out;
}

Tensor activation(Tape& tape, const Tensor& x, Activation kind) {
    Tensor out = Tensor::zeros(x.shape());
    const float* in = x.data().data();
    float* o = out.data().data();
    const std::int64_t n = x.numel();
    if (kind == Activation::kRelu) {
        for (std::int64_t i = 0; i < n; ++i) o[i] = in[i] > 0.0f ? in[i] : 0.0f;
    } else {
        for (std::int64_t i = 0; i < n; ++i) {
            o[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(in[i]))));
        }
    }
    const Tensor ins[] = {x};
    tape.record(kind == Activation::kRelu ? "relu" : "sigmoid", ins, out, [x, out, kind]() mutable {
        float* gx = grad_ptr_if_needed(x);
        if (!gx) return;
        const float* go = out.grad().data();
        const float* o = out.data().data();
        const float* in = x.data().data();
        const std::int64_t n = x.numel();
        if (kind == Activation::kRelu) {
            for (std::int64_t i = 0; i < n; ++i) gx[i] += in[i] > 0.0f ? go[i] : 0.0f;
        } else {
            for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i] * o[i] * (1.0f - o[i]);
        }
    });
    return out;
}

Tensor relu(Tape& tape, const Tensor& x) { return activation(tape, x, Activation::kRelu); }
Tensor sigmoid(Tape& tape, const Tensor& x) { return activation(tape, x, Activation::kSigmoid); }

Tensor cosine_similarity(Tape& tape, const Tensor& a, const Tensor& b, float eps) {
    require_ndim(a, 1, "cosine_similarity", "a");
    require_ndim(b, 1, "cosine_similarity", "b");
    if (a.dim(0) != b.dim(0)) {
        throw ShapeError("cosine_similarity: length " + std::to_string(a.dim(0)) + " vs " +
                         std::to_string(b.dim(0)));
    }
    const std::int64_t d = a.dim(0);
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
        dot += static_cast<double>(pa[i]) * pb[i];
        na2 += static_cast<double>(pa[i]) * pa[i];
        nb2 += static_cast<double>(pb[i]) * pb[i];
    }
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    const double ra = std::max(na, static_cast<double>(eps));
    const double rb = std::max(nb, static_cast<double>(eps));
    const double s = dot / (ra * rb);
    Tensor out = Tensor::scalar64(s);
    const Tensor ins[] = {a, b};
    tape.record("cosine_similarity", ins, out, [a, b, out, eps, dot, na, nb, ra, rb]() mutable {
        const float g = out.grad()[0];
        const std::int64_t d = a.dim(0);
        const float* pa = a.data().data();
        const float* pb = b.data().data();
        float* ga = grad_ptr_if_needed(a);
        float* gb = grad_ptr_if_needed(b);
        const double inv = 1.0 / (ra * rb);
        // d s / d a = b/(ra*rb) - dot*a/(ra^3*rb) when |a| > eps; the norm is a
        // constant below the guard so only the numerator term survives there.
        const double ca = na > eps ? dot / (ra * ra) : 0.0;
        const double cb = nb > eps ? dot / (rb * rb) : 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            if (ga) ga[i] += static_cast<float>(g * inv * (pb[i] - ca * pa[i]));
            if (gb) gb[i] += static_cast<float>(g * inv * (pa[i] - cb * pb[i]));
        }
    });
    return out;
}

Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
    require_ndim(input, 2, "linear", "input");
    require_ndim(weight, 2, "linear", "weight");
    require_ndim(bias, 1, "linear", "bias");
    const std::int64_t n = input.dim(0), d = input.dim(1);
    const std::int64_t e = weight.dim(1);
    if (weight.dim(0) != d) {
        throw ShapeError("linear: input inner axis " + std::to_string(d) + " != weight rows " +
                         std::to_string(weight.dim(0)));
    }
    if (bias.dim(0) != e) {
        throw ShapeError("linear: bias axis " + std::to_string(bias.dim(0)) + " != weight cols " +
                         std::to_string(e));
    }
    Tensor out = Tensor::zeros({n, e});
    const float* in = input.data().data();
    const float* wt = weight.data().data();
    const float* bi = bias.data().data();
    float* o = out.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < e; ++j) {
            double acc = bi[j];
            for (std::int64_t kk = 0; kk < d; ++kk) {
                acc += static_cast<double>(in[i * d + kk]) * wt[kk * e + j];
            }
            o[i * e + j] = static_cast<float>(acc);
        }
    }
    const Tensor ins[] = {input, weight, bias};
    tape.record("linear", ins, out, [input, weight, bias, out]() mutable {
        const std::int64_t n = input.dim(0), d = input.dim(1), e = weight.dim(1);
        const float* go = out.grad().data();
        const float* in = input.data().data();
        const float* wt = weight.data().data();
        float* gin = grad_ptr_if_needed(input);
        float* gw = grad_ptr_if_needed(weight);
        float* gb = grad_ptr_if_needed(bias);
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < e; ++j) {
                const float g = go[i * e + j];
                if (g == 0.0f) continue;
                if (gb) gb[j] += g;
                for (std::int64_t kk = 0; kk < d; ++kk) {
                    if (gin) gin[i * d + kk] += g * wt[kk * e + j];
                    if (gw) gw[kk * e + j] += g * in[i * d + kk];
                }
            }
        }
    });
    return out;
}

Tensor concat(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) throw ValueError("concat: no parts given");
    const int nd = parts[0].ndim();
    if (nd != 2 && nd != 4) {
        throw ShapeError("concat: parts must be 2-D or 4-D, got " + shape_str(parts[0].shape()));
    }
    Shape out_shape = parts[0].shape();
    std::int64_t total = parts[0].dim(1);
    for (std::size_t i = 1; i < parts.size(); ++i) {
        if (parts[i].ndim() != nd) {
            throw ShapeError("concat: mixed ranks " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(parts[i].shape()));
        }
        for (int ax = 0; ax < nd; ++ax) {
            if (ax == 1) continue;
            if (parts[i].dim(ax) != parts[0].dim(ax)) {
                throw ShapeError("concat: axis " + std::to_string(ax) + " mismatch, " +
                                 shape_str(parts[0].shape()) + " vs " + shape_str(parts[i].shape()));
            }
        }
        total += parts[i].dim(1);
    }
    out_shape[1] = total;
    Tensor out = Tensor::zeros(out_shape);

    const std::int64_t n = out.dim(0);
    const std::int64_t inner = nd == 4 ? out.dim(2) * out.dim(3) : 1;
    float* o = out.data().data();
    std::int64_t col = 0;
    for (const auto& part : parts) {
        const std::int64_t pc = part.dim(1);
        const float* p = part.data().data();
        for (std::int64_t i = 0; i < n; ++i) {
            std::copy(p + i * pc * inner, p + (i + 1) * pc * inner,
                      o + (i * total + col) * inner);
        }
        col += pc;
    }

    std::vector<Tensor> parts_vec(parts.begin(), parts.end());
    tape.record("concat", parts, out, [parts_vec, out, total, inner]() mutable {
        const std::int64_t n = out.dim(0);
        const float* go = out.grad().data();
        std::int64_t col = 0;
        for (auto& part : parts_vec) {
            const std::int64_t pc = part.dim(1);
            if (float* gp = grad_ptr_if_needed(part)) {
                for (std::int64_t i = 0; i < n; ++i) {
                    const float* src = go + (i * total + col) * inner;
                    float* dst = gp + i * pc * inner;
                    for (std::int64_t j = 0; j < pc * inner; ++j) dst[j] += src[j];
                }
            }
            col += pc;
        }
    });
    return out;
}

Tensor slice_cols(Tape& tape, const Tensor& x, std::int64_t c0, std::int64_t c1) {
    require_ndim(x, 2, "slice_cols", "input");
    if (c0 < 0 || c1 > x.dim(1) || c0 >= c1) {
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") invalid for width " + std::to_string(x.dim(1)));
    }
    const std::int64_t n = x.dim(0), d = x.dim(1), m = c1 - c0;
    Tensor out = Tensor::zeros({n, m});
    const float* in = x.data().data();
    float* o = out.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy(in + i * d + c0, in + i * d + c1, o + i * m);
    }
    const Tensor ins[] = {x};
    tape.record("slice_cols", ins, out, [x, out, c0]() mutable {
        float* gx = grad_ptr_if_needed(x);
        if (!gx) return;
        const std::int64_t n = x.dim(0), d = x.dim(1), m = out.dim(1);
        const float* go = out.grad().data();
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < m; ++j) gx[i * d + c0 + j] += go[i * m + j];
        }
    });
    return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* o = out.data().data();
    for (std::int64_t i = 0; i < a.numel(); ++i) o[i] = pa[i] + pb[i];
    const Tensor ins[] = {a, b};
    tape.record("add", ins, out, [a, b, out]() mutable {
        const float* go = out.grad().data();
        const std::int64_t n = out.numel();
        if (float* ga = grad_ptr_if_needed(a)) {
            for (std::int64_t i = 0; i < n; ++i) ga[i] += go[i];
        }
        if (float* gb = grad_ptr_if_needed(b)) {
            for (std::int64_t i = 0; i < n; ++i) gb[i] += go[i];
        }
    });
    return out;
}

Tensor upsample_nearest2x(Tape& tape, const Tensor& x) {
    require_ndim(x, 4, "upsample_nearest2x", "input");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out = Tensor::zeros({n, c, 2 * h, 2 * w});
    const float* in = x.data().data();
    float* o = out.data().data();
    for (std::int64_t i = 0; i < n * c; ++i) {
        const float* src = in + i * h * w;
        float* dst = o + i * 4 * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t xx = 0; xx < w; ++xx) {
                const float v = src[y * w + xx];
                float* d0 = dst + (2 * y) * 2 * w + 2 * xx;
                d0[0] = v;
                d0[1] = v;
                d0[2 * w] = v;
                d0[2 * w + 1] = v;
            }
        }
    }
    const Tensor ins[] = {x};
    tape.record("upsample_nearest2x", ins, out, [x, out]() mutable {
        float* gx = grad_ptr_if_needed(x);
        if (!gx) return;
        const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        const float* go = out.grad().data();
        for (std::int64_t i = 0; i < n * c; ++i) {
            const float* src = go + i * 4 * h * w;
            float* dst = gx + i * h * w;
            for (std::int64_t y = 0; y < h; ++y) {
                for (std::int64_t xx = 0; xx < w; ++xx) {
                    const float* s0 = src + (2 * y) * 2 * w + 2 * xx;
                    dst[y * w + xx] += s0[0] + s0[1] + s0[2 * w] + s0[2 * w + 1];
                }
            }
        }
    });
    return out;
}

Tensor softmax_channels(Tape& tape, const Tensor& logits) {
    if (logits.ndim() != 2 && logits.ndim() != 4) {
        throw ShapeError("softmax_channels: expected [N,C] or [N,C,H,W], got " +
                         shape_str(logits.shape()));
    }
    const std::int64_t n = logits.dim(0), c = logits.dim(1);
    const std::int64_t inner = logits.ndim() == 4 ? logits.dim(2) * logits.dim(3) : 1;
    Tensor out = Tensor::zeros(logits.shape());
    const float* in = logits.data().data();
    float* o = out.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < inner; ++j) {
            const std::int64_t base = i * c * inner + j;
            double mx = in[base];
            for (std::int64_t ci = 1; ci < c; ++ci) mx = std::max(mx, static_cast<double>(in[base + ci * inner]));
            double sum = 0.0;
            for (std::int64_t ci = 0; ci < c; ++ci) sum += std::exp(static_cast<double>(in[base + ci * inner]) - mx);
            const double inv = 1.0 / sum;
            for (std::int64_t ci = 0; ci < c; ++ci) {
                o[base + ci * inner] =
                    static_cast<float>(std::exp(static_cast<double>(in[base + ci * inner]) - mx) * inv);
            }
        }
    }
    const Tensor ins[] = {logits};
    tape.record("softmax_channels", ins, out, [logits, out]() mutable {
        float* gx = grad_ptr_if_needed(logits);
        if (!gx) return;
        const std::int64_t n = logits.dim(0), c = logits.dim(1);
        const std::int64_t inner = logits.ndim() == 4 ? logits.dim(2) * logits.dim(3) : 1;
        const float* go = out.grad().data();
        const float* p = out.data().data();
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < inner; ++j) {
                const std::int64_t base = i * c * inner + j;
                double dotv = 0.0;
                for (std::int64_t ci = 0; ci < c; ++ci) {
                    dotv += static_cast<double>(go[base + ci * inner]) * p[base + ci * inner];
                }
                for (std::int64_t ci = 0; ci < c; ++ci) {
                    const std::int64_t idx = base + ci * inner;
                    gx[idx] += static_cast<float>(p[idx] * (go[idx] - dotv));
                }
            }
        }
    });
    return out;
}

Tensor reduce_sum(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    Tensor out = Tensor::scalar64(acc);
    const Tensor ins[] = {x};
    tape.record("reduce_sum", ins, out, [x, out]() mutable {
        float* gx = grad_ptr_if_needed(x);
        if (!gx) return;
        const float g = out.grad()[0];
        for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
    return out;
}

Tensor reduce_mean(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    Tensor out = Tensor::scalar64(acc * inv);
    const Tensor ins[] = {x};
    tape.record("reduce_mean", ins, out, [x, out, inv]() mutable {
        float* gx = grad_ptr_if_needed(x);
        if (!gx) return;
        const float g = static_cast<float>(out.grad()[0] * inv);
        for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
    return out;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<std::int32_t>& labels) {
    require_ndim(logits, 2, "cross_entropy", "logits");
    const std::int64_t n = logits.dim(0), c = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
    }
    for (auto l : labels) {
        if (l < 0 || l >= c) throw ValueError("cross_entropy: label " + std::to_string(l) + " out of range");
    }
    const float* in = logits.data().data();
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double mx = in[i * c];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(in[i * c + j]));
        double sum = 0.0;
        for (std::int64_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(in[i * c + j]) - mx);
        total += mx + std::log(sum) - static_cast<double>(in[i * c + labels[static_cast<std::size_t>(i)]]);
    }
    Tensor out = Tensor::scalar64(total / static_cast<double>(n));
    const Tensor ins[] = {logits};
    tape.record("cross_entropy", ins, out, [logits, out, labels]() mutable {
        float* gx = grad_ptr_if_needed(logits);
        if (!gx) return;
        const std::int64_t n = logits.dim(0), c = logits.dim(1);
        const float* in = logits.data().data();
        const float g = out.grad()[0] / static_cast<float>(n);
        for (std::int64_t i = 0; i < n; ++i) {
            double mx = in[i * c];
            for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(in[i * c + j]));
            double sum = 0.0;
            for (std::int64_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(in[i * c + j]) - mx);
            for (std::int64_t j = 0; j < c; ++j) {
                const double p = std::exp(static_cast<double>(in[i * c + j]) - mx) / sum;
                const double onehot = j == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
                gx[i * c + j] += static_cast<float>(g * (p - onehot));
            }
        }
    });
    return out;
}

double gradient_check(const std::function<Tensor(Tape&)>& make_loss, std::span<Tensor> params,
                      double h) {
    if (h <= 0.0 || h > 1e-2) throw ValueError("gradient_check: h must be in (0, 1e-2]");
    Tape tape(true);
    Tensor loss = make_loss(tape);
    if (!std::isfinite(loss.value_f64())) throw ValueError("gradient_check: non-finite loss");
    for (auto& p : params) p.zero_grad();
    tape.backward(loss);

    std::vector<std::vector<float>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
    }

    const auto eval = [&]() {
        Tape fwd(false);
        const double v = make_loss(fwd).value_f64();
        if (!std::isfinite(v)) throw ValueError("gradient_check: non-finite loss at perturbed point");
        return v;
    };

    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto data = params[pi].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const float saved = data[i];
            const float up = static_cast<float>(saved + h);
            const float down = static_cast<float>(saved - h);
            data[i] = up;
            const double fp = eval();
            data[i] = down;
            const double fm = eval();
            data[i] = saved;
            // Divide by the perturbation that was actually applied after f32
            // rounding, not the nominal 2h.
            const double numeric = (fp - fm) / (static_cast<double>(up) - static_cast<double>(down));
            const double diff = std::abs(static_cast<double>(analytic[pi][i]) - numeric);
            max_rel = std::max(max_rel, diff / std::max(1.0, std::abs(numeric)));
        }
    }
    return max_rel;
}

}  // namespace matssl
