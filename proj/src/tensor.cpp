#include "pyramid/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "pyramid/kernels.hpp"
#include "pyramid/log.hpp"

namespace pyramid {

LogLevel log_level() {
    static LogLevel level = [] {
        const char* v = std::getenv("PYRAMID_LOG");
        if (!v) return LogLevel::error;
        std::string s(v);
        if (s == "debug") return LogLevel::debug;
        if (s == "info") return LogLevel::info;
        return LogLevel::error;
    }();
    return level;
}

void log_msg(LogLevel level, const std::string& msg) {
    if (static_cast<int>(level) <= static_cast<int>(log_level())) {
        std::cerr << "[pyramid] " << msg << "\n";
    }
}

// ---- RandomSource ----

std::uint64_t RandomSource::next_u64() {
    // splitmix64
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double RandomSource::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RandomSource::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double RandomSource::gaussian() {
    const double u1 = std::max(uniform(), 1e-300);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t RandomSource::fork() { return next_u64(); }

// ---- Tensor basics ----

namespace {

int product(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::runtime_error("tensor: non-positive dimension in " + shape_str(shape));
        n *= d;
    }
    return n;
}

// Flatten any shape to [outer x last] for ops that act on the last axis.
void outer_last(const Tensor& t, int& outer, int& last) {
    if (t.shape.empty()) throw std::runtime_error("tensor: empty shape");
    last = t.shape.back();
    outer = t.numel() / last;
}

TensorPtr op_node(std::vector<int> shape, std::vector<double> data, std::vector<TensorPtr> parents) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    auto t = make_tensor(std::move(shape), std::move(data), rg);
    if (rg) t->parents = std::move(parents);
    return t;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) {
        throw std::runtime_error(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    grad.assign(data.size(), 0.0);
}

TensorPtr make_tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    const int n = product(shape);
    if (n != static_cast<int>(data.size())) {
        throw std::runtime_error("tensor: data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr zeros(std::vector<int> shape, bool requires_grad) {
    const int n = product(shape);
    return make_tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad);
}

TensorPtr full(std::vector<int> shape, double value, bool requires_grad) {
    const int n = product(shape);
    return make_tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad);
}

TensorPtr uniform_init(std::vector<int> shape, RandomSource& rng, double lo, double hi) {
    const int n = product(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& v : d) v = static_cast<double>(static_cast<float>(rng.uniform(lo, hi)));
    return make_tensor(std::move(shape), std::move(d), true);
}

// ---- elementwise ----

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(*a, *b, "add");
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] + b->data[i];
    auto out = op_node(a->shape, std::move(d), {a, b});
    if (out->requires_grad) {
        out->backward_fn = [](Tensor& self) {
            for (int k = 0; k < 2; ++k) {
                Tensor& p = *self.parents[static_cast<std::size_t>(k)];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
            }
        };
    }
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(*a, *b, "mul");
    std::vector<double> d(a->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = a->data[i] * b->data[i];
    auto out = op_node(a->shape, std::move(d), {a, b});
    if (out->requires_grad) {
        out->backward_fn = [](Tensor& self) {
            Tensor& a = *self.parents[0];
            Tensor& b = *self.parents[1];
            if (a.requires_grad) {
                a.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i] * b.data[i];
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) b.grad[i] += self.grad[i] * a.data[i];
            }
        };
    }
    return out;
}

TensorPtr scale(const TensorPtr& x, double c) {
    std::vector<double> d(x->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = x->data[i] * c;
    auto out = op_node(x->shape, std::move(d), {x});
    if (out->requires_grad) {
        out->backward_fn = [c](Tensor& self) {
            Tensor& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * c;
        };
    }
    return out;
}

TensorPtr sum(const TensorPtr& x) {
    double s = 0.0;
    for (double v : x->data) s += v;
    auto out = op_node({1}, {s}, {x});
    if (out->requires_grad) {
        out->backward_fn = [](Tensor& self) {
            Tensor& p = *self.parents[0];
            p.ensure_grad();
            const double g = self.grad[0];
            for (auto& v : p.grad) v += g;
        };
    }
    return out;
}

// ---- matmul family ----

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->cols() != b->rows()) {
        throw std::runtime_error("matmul: incompatible shapes " + shape_str(a->shape) + " and " + shape_str(b->shape));
    }
    const int m = a->rows(), k = a->cols(), n = b->cols();
    std::vector<double> d(static_cast<std::size_t>(m) * n);
    kernels::matmul(a->data.data(), b->data.data(), d.data(), m, k, n);
    auto out = op_node({m, n}, std::move(d), {a, b});
    if (out->requires_grad) {
        out->backward_fn = [m, k, n](Tensor& self) {
            Tensor& a = *self.parents[0];
            Tensor& b = *self.parents[1];
            if (a.requires_grad) {
                a.ensure_grad();
                kernels::matmul_nt(self.grad.data(), b.data.data(), a.grad.data(), m, n, k, true);
            }
            if (b.requires_grad) {
                b.ensure_grad();
                kernels::matmul_tn(a.data.data(), self.grad.data(), b.grad.data(), k, m, n, true);
            }
        };
    }
    return out;
}

TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->cols() != b->cols()) {
        throw std::runtime_error("matmul_nt: incompatible shapes " + shape_str(a->shape) + " and " + shape_str(b->shape));
    }
    const int m = a->rows(), k = a->cols(), n = b->rows();
    std::vector<double> d(static_cast<std::size_t>(m) * n);
    kernels::matmul_nt(a->data.data(), b->data.data(), d.data(), m, k, n);
    auto out = op_node({m, n}, std::move(d), {a, b});
    if (out->requires_grad) {
        out->backward_fn = [m, k, n](Tensor& self) {
            Tensor& a = *self.parents[0];
            Tensor& b = *self.parents[1];
            if (a.requires_grad) {
                a.ensure_grad();
                kernels::matmul(self.grad.data(), b.data.data(), a.grad.data(), m, n, k, true);
            }
            if (b.requires_grad) {
                b.ensure_grad();
                kernels::matmul_tn(self.grad.data(), a.data.data(), b.grad.data(), n, m, k, true);
            }
        };
    }
    return out;
}

TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    if (x->ndim() != 2 || w->ndim() != 2 || x->cols() != w->rows()) {
        throw std::runtime_error("linear: incompatible shapes " + shape_str(x->shape) + " and " + shape_str(w->shape));
    }
    const int t = x->rows(), in = x->cols(), outd = w->cols();
    if (b->numel() != outd) {
        throw std::runtime_error("linear: bias " + shape_str(b->shape) + " does not match output dim " + std::to_string(outd));
    }
    std::vector<double> d(static_cast<std::size_t>(t) * outd);
    kernels::matmul(x->data.data(), w->data.data(), d.data(), t, in, outd);
    for (int r = 0; r < t; ++r)
        for (int c = 0; c < outd; ++c) d[static_cast<std::size_t>(r) * outd + c] += b->data[static_cast<std::size_t>(c)];
    auto out = op_node({t, outd}, std::move(d), {x, w, b});
    if (out->requires_grad) {
        out->backward_fn = [t, in, outd](Tensor& self) {
            Tensor& x = *self.parents[0];
            Tensor& w = *self.parents[1];
            Tensor& b = *self.parents[2];
            if (x.requires_grad) {
                x.ensure_grad();
                kernels::matmul_nt(self.grad.data(), w.data.data(), x.grad.data(), t, outd, in, true);
            }
            if (w.requires_grad) {
                w.ensure_grad();
                kernels::matmul_tn(x.data.data(), self.grad.data(), w.grad.data(), in, t, outd, true);
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (int r = 0; r < t; ++r)
                    for (int c = 0; c < outd; ++c) b.grad[static_cast<std::size_t>(c)] += self.grad[static_cast<std::size_t>(r) * outd + c];
            }
        };
    }
    return out;
}

// ---- convolution ----

TensorPtr conv1d(const TensorPtr& x, const TensorPtr& w, int dilation, ConvMode mode, int stride) {
    if (x->ndim() != 2) throw std::runtime_error("conv1d: input must be 2-D, got " + shape_str(x->shape));
    if (dilation < 1) throw std::runtime_error("conv1d: dilation must be positive, got " + std::to_string(dilation));
    if (stride < 1) throw std::runtime_error("conv1d: stride must be positive, got " + std::to_string(stride));
    const int t_in = x->rows(), c_in = x->cols();
    const int t_out = (t_in + stride - 1) / stride;

    if (mode == ConvMode::depthwise) {
        if (w->ndim() != 2 || w->cols() != c_in) {
            throw std::runtime_error("conv1d depthwise: kernel " + shape_str(w->shape) +
                                     " does not match channels " + std::to_string(c_in));
        }
        const int ksize = w->rows();
        if (ksize % 2 == 0) throw std::runtime_error("conv1d: even kernel size " + std::to_string(ksize) + " rejected");
        const int r = (ksize - 1) / 2;
        std::vector<double> d(static_cast<std::size_t>(t_out) * c_in, 0.0);
        for (int t = 0; t < t_out; ++t) {
            for (int n = 0; n < ksize; ++n) {
                const int ti = t * stride + (n - r) * dilation;
                if (ti < 0 || ti >= t_in) continue;
                for (int c = 0; c < c_in; ++c) {
                    d[static_cast<std::size_t>(t) * c_in + c] += x->at(ti, c) * w->at(n, c);
                }
            }
        }
        auto out = op_node({t_out, c_in}, std::move(d), {x, w});
        if (out->requires_grad) {
            out->backward_fn = [t_in, c_in, ksize, r, dilation, stride, t_out](Tensor& self) {
                Tensor& x = *self.parents[0];
                Tensor& w = *self.parents[1];
                if (x.requires_grad) x.ensure_grad();
                if (w.requires_grad) w.ensure_grad();
                for (int t = 0; t < t_out; ++t) {
                    for (int n = 0; n < ksize; ++n) {
                        const int ti = t * stride + (n - r) * dilation;
                        if (ti < 0 || ti >= t_in) continue;
                        for (int c = 0; c < c_in; ++c) {
                            const double g = self.grad[static_cast<std::size_t>(t) * c_in + c];
                            if (x.requires_grad) x.grad[static_cast<std::size_t>(ti) * c_in + c] += g * w.at(n, c);
                            if (w.requires_grad) w.grad[static_cast<std::size_t>(n) * c_in + c] += g * x.at(ti, c);
                        }
                    }
                }
            };
        }
        return out;
    }

    // pointwise / full: w[K x Cin x Cout]
    if (w->ndim() != 3 || w->dim(1) != c_in) {
        throw std::runtime_error("conv1d: kernel " + shape_str(w->shape) + " does not match input " + shape_str(x->shape));
    }
    const int ksize = w->dim(0), c_out = w->dim(2);
    if (mode == ConvMode::pointwise && ksize != 1) {
        throw std::runtime_error("conv1d pointwise: kernel size must be 1, got " + std::to_string(ksize));
    }
    if (ksize % 2 == 0) throw std::runtime_error("conv1d: even kernel size " + std::to_string(ksize) + " rejected");
    const int r = (ksize - 1) / 2;
    std::vector<double> d(static_cast<std::size_t>(t_out) * c_out);
    kernels::conv1d(x->data.data(), w->data.data(), d.data(), t_in, c_in, c_out, ksize, dilation, stride);
    auto out = op_node({t_out, c_out}, std::move(d), {x, w});
    if (out->requires_grad) {
        out->backward_fn = [t_in, c_in, c_out, ksize, r, dilation, stride, t_out](Tensor& self) {
            Tensor& x = *self.parents[0];
            Tensor& w = *self.parents[1];
            if (x.requires_grad) x.ensure_grad();
            if (w.requires_grad) w.ensure_grad();
            for (int t = 0; t < t_out; ++t) {
                const double* g = self.grad.data() + static_cast<std::size_t>(t) * c_out;
                for (int n = 0; n < ksize; ++n) {
                    const int ti = t * stride + (n - r) * dilation;
                    if (ti < 0 || ti >= t_in) continue;
                    for (int ci = 0; ci < c_in; ++ci) {
                        const std::size_t wbase = (static_cast<std::size_t>(n) * c_in + ci) * c_out;
                        if (x.requires_grad) {
                            double acc = 0.0;
                            for (int co = 0; co < c_out; ++co) acc += g[co] * w.data[wbase + co];
                            x.grad[static_cast<std::size_t>(ti) * c_in + ci] += acc;
                        }
                        if (w.requires_grad) {
                            const double xv = x.data[static_cast<std::size_t>(ti) * c_in + ci];
                            for (int co = 0; co < c_out; ++co) w.grad[wbase + co] += xv * g[co];
                        }
                    }
                }
            }
        };
    }
    return out;
}

TensorPtr bias_add(const TensorPtr& x, const TensorPtr& b) {
    int outer, last;
    outer_last(*x, outer, last);
    if (b->numel() != last) {
        throw std::runtime_error("bias_add: bias " + shape_str(b->shape) + " vs features " + std::to_string(last));
    }
    std::vector<double> d(x->data.size());
    for (int o = 0; o < outer; ++o)
        for (int c = 0; c < last; ++c)
            d[static_cast<std::size_t>(o) * last + c] = x->data[static_cast<std::size_t>(o) * last + c] + b->data[static_cast<std::size_t>(c)];
    auto out = op_node(x->shape, std::move(d), {x, b});
    if (out->requires_grad) {
        out->backward_fn = [outer, last](Tensor& self) {
            Tensor& x = *self.parents[0];
            Tensor& b = *self.parents[1];
            if (x.requires_grad) {
                x.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (int o = 0; o < outer; ++o)
                    for (int c = 0; c < last; ++c) b.grad[static_cast<std::size_t>(c)] += self.grad[static_cast<std::size_t>(o) * last + c];
            }
        };
    }
    return out;
}

// ---- normalizations and softmax ----

TensorPtr softmax(const TensorPtr& x, int axis) {
    int nslices, len, stride_elem, stride_slice;
    if (x->ndim() == 1) {
        nslices = 1; len = x->dim(0); stride_elem = 1; stride_slice = 0;
    } else if (x->ndim() == 2 && axis == 1) {
        nslices = x->rows(); len = x->cols(); stride_elem = 1; stride_slice = x->cols();
    } else if (x->ndim() == 2 && axis == 0) {
        nslices = x->cols(); len = x->rows(); stride_elem = x->cols(); stride_slice = 1;
    } else {
        throw std::runtime_error("softmax: unsupported axis " + std::to_string(axis) + " for shape " + shape_str(x->shape));
    }
    std::vector<double> d(x->data.size());
    for (int s = 0; s < nslices; ++s) {
        const std::size_t base = static_cast<std::size_t>(s) * stride_slice;
        double mx = -1e300;
        for (int i = 0; i < len; ++i) mx = std::max(mx, x->data[base + static_cast<std::size_t>(i) * stride_elem]);
        double z = 0.0;
        for (int i = 0; i < len; ++i) {
            const double e = std::exp(x->data[base + static_cast<std::size_t>(i) * stride_elem] - mx);
            d[base + static_cast<std::size_t>(i) * stride_elem] = e;
            z += e;
        }
        for (int i = 0; i < len; ++i) d[base + static_cast<std::size_t>(i) * stride_elem] /= z;
    }
    auto out = op_node(x->shape, std::move(d), {x});
    if (out->requires_grad) {
        out->backward_fn = [nslices, len, stride_elem, stride_slice](Tensor& self) {
            Tensor& x = *self.parents[0];
            x.ensure_grad();
            for (int s = 0; s < nslices; ++s) {
                const std::size_t base = static_cast<std::size_t>(s) * stride_slice;
                double dot = 0.0;
                for (int i = 0; i < len; ++i) {
                    const std::size_t idx = base + static_cast<std::size_t>(i) * stride_elem;
                    dot += self.grad[idx] * self.data[idx];
                }
                for (int i = 0; i < len; ++i) {
                    const std::size_t idx = base + static_cast<std::size_t>(i) * stride_elem;
                    x.grad[idx] += self.data[idx] * (self.grad[idx] - dot);
                }
            }
        };
    }
    return out;
}

TensorPtr log_softmax(const TensorPtr& x) {
    int outer, last;
    outer_last(*x, outer, last);
    std::vector<double> d(x->data.size());
    for (int o = 0; o < outer; ++o) {
        const std::size_t base = static_cast<std::size_t>(o) * last;
        double mx = -1e300;
        for (int i = 0; i < last; ++i) mx = std::max(mx, x->data[base + i]);
        double z = 0.0;
        for (int i = 0; i < last; ++i) z += std::exp(x->data[base + i] - mx);
        const double lz = mx + std::log(z);
        for (int i = 0; i < last; ++i) d[base + i] = x->data[base + i] - lz;
    }
    auto out = op_node(x->shape, std::move(d), {x});
    if (out->requires_grad) {
        out->backward_fn = [outer, last](Tensor& self) {
            Tensor& x = *self.parents[0];
            x.ensure_grad();
            for (int o = 0; o < outer; ++o) {
                const std::size_t base = static_cast<std::size_t>(o) * last;
                double gs = 0.0;
                for (int i = 0; i < last; ++i) gs += self.grad[base + i];
                for (int i = 0; i < last; ++i) {
                    x.grad[base + i] += self.grad[base + i] - std::exp(self.data[base + i]) * gs;
                }
            }
        };
    }
    return out;
}

TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta, double eps) {
    int outer, last;
    outer_last(*x, outer, last);
    if (gamma->numel() != last || beta->numel() != last) {
        throw std::runtime_error("layer_norm: params do not match feature dim " + std::to_string(last));
    }
    std::vector<double> d(x->data.size());
    auto xhat = std::make_shared<std::vector<double>>(x->data.size());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(outer));
    for (int o = 0; o < outer; ++o) {
        const std::size_t base = static_cast<std::size_t>(o) * last;
        double mean = 0.0;
        for (int i = 0; i < last; ++i) mean += x->data[base + i];
        mean /= last;
        double var = 0.0;
        for (int i = 0; i < last; ++i) {
            const double c = x->data[base + i] - mean;
            var += c * c;
        }
        var /= last;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(o)] = is;
        for (int i = 0; i < last; ++i) {
            const double xh = (x->data[base + i] - mean) * is;
            (*xhat)[base + i] = xh;
            d[base + i] = gamma->data[static_cast<std::size_t>(i)] * xh + beta->data[static_cast<std::size_t>(i)];
        }
    }
    auto out = op_node(x->shape, std::move(d), {x, gamma, beta});
    if (out->requires_grad) {
        out->backward_fn = [outer, last, xhat, inv_std](Tensor& self) {
            Tensor& x = *self.parents[0];
            Tensor& gamma = *self.parents[1];
            Tensor& beta = *self.parents[2];
            if (x.requires_grad) x.ensure_grad();
            if (gamma.requires_grad) gamma.ensure_grad();
            if (beta.requires_grad) beta.ensure_grad();
            for (int o = 0; o < outer; ++o) {
                const std::size_t base = static_cast<std::size_t>(o) * last;
                double m_dxhat = 0.0, m_dxhat_xhat = 0.0;
                for (int i = 0; i < last; ++i) {
                    const double dxh = self.grad[base + i] * gamma.data[static_cast<std::size_t>(i)];
                    m_dxhat += dxh;
                    m_dxhat_xhat += dxh * (*xhat)[base + i];
                }
                m_dxhat /= last;
                m_dxhat_xhat /= last;
                const double is = (*inv_std)[static_cast<std::size_t>(o)];
                for (int i = 0; i < last; ++i) {
                    const double g = self.grad[base + i];
                    const double dxh = g * gamma.data[static_cast<std::size_t>(i)];
                    if (x.requires_grad) {
                        x.grad[base + i] += is * (dxh - m_dxhat - (*xhat)[base + i] * m_dxhat_xhat);
                    }
                    if (gamma.requires_grad) gamma.grad[static_cast<std::size_t>(i)] += g * (*xhat)[base + i];
                    if (beta.requires_grad) beta.grad[static_cast<std::size_t>(i)] += g;
                }
            }
        };
    }
    return out;
}

TensorPtr batch_norm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                     BatchNormState& state, Mode mode, double eps, double momentum) {
    if (x->ndim() != 2) throw std::runtime_error("batch_norm: input must be 2-D, got " + shape_str(x->shape));
    const int t = x->rows(), dfeat = x->cols();
    if (gamma->numel() != dfeat || beta->numel() != dfeat) {
        throw std::runtime_error("batch_norm: params do not match feature dim " + std::to_string(dfeat));
    }
    if (static_cast<int>(state.running_mean.size()) != dfeat) {
        state.running_mean.assign(static_cast<std::size_t>(dfeat), 0.0);
        state.running_var.assign(static_cast<std::size_t>(dfeat), 1.0);
    }

    if (mode == Mode::infer) {
        if (state.updates == 0) {
            log_msg(LogLevel::info, "batch_norm: infer before any train step, using initial running stats");
        }
        std::vector<double> d(x->data.size());
        auto scale_v = std::make_shared<std::vector<double>>(static_cast<std::size_t>(dfeat));
        for (int c = 0; c < dfeat; ++c) {
            (*scale_v)[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(state.running_var[static_cast<std::size_t>(c)] + eps);
        }
        for (int r = 0; r < t; ++r) {
            for (int c = 0; c < dfeat; ++c) {
                const double xh = (x->at(r, c) - state.running_mean[static_cast<std::size_t>(c)]) * (*scale_v)[static_cast<std::size_t>(c)];
                d[static_cast<std::size_t>(r) * dfeat + c] = gamma->data[static_cast<std::size_t>(c)] * xh + beta->data[static_cast<std::size_t>(c)];
            }
        }
        auto mean_copy = std::make_shared<std::vector<double>>(state.running_mean);
        auto out = op_node(x->shape, std::move(d), {x, gamma, beta});
        if (out->requires_grad) {
            out->backward_fn = [t, dfeat, scale_v, mean_copy](Tensor& self) {
                Tensor& x = *self.parents[0];
                Tensor& gamma = *self.parents[1];
                Tensor& beta = *self.parents[2];
                if (x.requires_grad) x.ensure_grad();
                if (gamma.requires_grad) gamma.ensure_grad();
                if (beta.requires_grad) beta.ensure_grad();
                for (int r = 0; r < t; ++r) {
                    for (int c = 0; c < dfeat; ++c) {
                        const std::size_t idx = static_cast<std::size_t>(r) * dfeat + c;
                        const double g = self.grad[idx];
                        const double is = (*scale_v)[static_cast<std::size_t>(c)];
                        if (x.requires_grad) x.grad[idx] += g * gamma.data[static_cast<std::size_t>(c)] * is;
                        if (gamma.requires_grad) {
                            gamma.grad[static_cast<std::size_t>(c)] += g * (x.data[idx] - (*mean_copy)[static_cast<std::size_t>(c)]) * is;
                        }
                        if (beta.requires_grad) beta.grad[static_cast<std::size_t>(c)] += g;
                    }
                }
            };
        }
        return out;
    }

    // train mode: normalize over the time axis per feature
    if (t < 2) throw std::runtime_error("batch_norm: train mode needs T >= 2, got T=" + std::to_string(t));
    std::vector<double> d(x->data.size());
    auto xhat = std::make_shared<std::vector<double>>(x->data.size());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(dfeat));
    for (int c = 0; c < dfeat; ++c) {
        double mean = 0.0;
        for (int r = 0; r < t; ++r) mean += x->at(r, c);
        mean /= t;
        double var = 0.0;
        for (int r = 0; r < t; ++r) {
            const double cdev = x->at(r, c) - mean;
            var += cdev * cdev;
        }
        var /= t;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(c)] = is;
        for (int r = 0; r < t; ++r) {
            const std::size_t idx = static_cast<std::size_t>(r) * dfeat + c;
            const double xh = (x->data[idx] - mean) * is;
            (*xhat)[idx] = xh;
            d[idx] = gamma->data[static_cast<std::size_t>(c)] * xh + beta->data[static_cast<std::size_t>(c)];
        }
        state.running_mean[static_cast<std::size_t>(c)] = momentum * state.running_mean[static_cast<std::size_t>(c)] + (1.0 - momentum) * mean;
        state.running_var[static_cast<std::size_t>(c)] = momentum * state.running_var[static_cast<std::size_t>(c)] + (1.0 - momentum) * var;
    }
    state.updates++;
    auto out = op_node(x->shape, std::move(d), {x, gamma, beta});
    if (out->requires_grad) {
        out->backward_fn = [t, dfeat, xhat, inv_std](Tensor& self) {
            Tensor& x = *self.parents[0];
            Tensor& gamma = *self.parents[1];
            Tensor& beta = *self.parents[2];
            if (x.requires_grad) x.ensure_grad();
            if (gamma.requires_grad) gamma.ensure_grad();
            if (beta.requires_grad) beta.ensure_grad();
            for (int c = 0; c < dfeat; ++c) {
                double m_dxhat = 0.0, m_dxhat_xhat = 0.0;
                for (int r = 0; r < t; ++r) {
                    const std::size_t idx = static_cast<std::size_t>(r) * dfeat + c;
                    const double dxh = self.grad[idx] * gamma.data[static_cast<std::size_t>(c)];
                    m_dxhat += dxh;
                    m_dxhat_xhat += dxh * (*xhat)[idx];
                }
                m_dxhat /= t;
                m_dxhat_xhat /= t;
                const double is = (*inv_std)[static_cast<std::size_t>(c)];
                for (int r = 0; r < t; ++r) {
                    const std::size_t idx = static_cast<std::size_t>(r) * dfeat + c;
                    const double g = self.grad[idx];
                    const double dxh = g * gamma.data[static_cast<std::size_t>(c)];
                    if (x.requires_grad) {
                        x.grad[idx] += is * (dxh - m_dxhat - (*xhat)[idx] * m_dxhat_xhat);
                    }
                    if (gamma.requires_grad) gamma.grad[static_cast<std::size_t>(c)] += g * (*xhat)[idx];
                    if (beta.requires_grad) beta.grad[static_cast<std::size_t>(c)] += g;
                }
            }
        };
    }
    return out;
}

// ---- activations ----

namespace {
inline double sigmoid_v(double x) { return 1.0 / (1.0 + std::exp(-x)); }

TensorPtr unary_op(const TensorPtr& x, const std::function<double(double)>& fwd,
                   const std::function<double(double, double)>& dfn) {
    std::vector<double> d(x->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = fwd(x->data[i]);
    auto out = op_node(x->shape, std::move(d), {x});
    if (out->requires_grad) {
        out->backward_fn = [dfn](Tensor& self) {
            Tensor& x = *self.parents[0];
            x.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                x.grad[i] += self.grad[i] * dfn(x.data[i], self.data[i]);
            }
        };
    }
    return out;
}
}  // namespace

TensorPtr relu(const TensorPtr& x) {
    return unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

TensorPtr sigmoid(const TensorPtr& x) {
    return unary_op(x, [](double v) { return sigmoid_v(v); },
                    [](double, double y) { return y * (1.0 - y); });
}

TensorPtr swish(const TensorPtr& x) {
    return unary_op(x, [](double v) { return v * sigmoid_v(v); },
                    [](double v, double) {
                        const double s = sigmoid_v(v);
                        return s * (1.0 + v * (1.0 - s));
                    });
}

TensorPtr glu(const TensorPtr& x) {
    int outer, last;
    outer_last(*x, outer, last);
    if (last % 2 != 0) throw std::runtime_error("glu: last dimension must be even, got " + std::to_string(last));
    const int half = last / 2;
    std::vector<int> oshape = x->shape;
    oshape.back() = half;
    std::vector<double> d(static_cast<std::size_t>(outer) * half);
    for (int o = 0; o < outer; ++o) {
        const std::size_t in_base = static_cast<std::size_t>(o) * last;
        const std::size_t out_base = static_cast<std::size_t>(o) * half;
        for (int i = 0; i < half; ++i) {
            d[out_base + i] = x->data[in_base + i] * sigmoid_v(x->data[in_base + half + i]);
        }
    }
    auto out = op_node(std::move(oshape), std::move(d), {x});
    if (out->requires_grad) {
        out->backward_fn = [outer, last, half](Tensor& self) {
            Tensor& x = *self.parents[0];
            x.ensure_grad();
            for (int o = 0; o < outer; ++o) {
                const std::size_t in_base = static_cast<std::size_t>(o) * last;
                const std::size_t out_base = static_cast<std::size_t>(o) * half;
                for (int i = 0; i < half; ++i) {
                    const double g = self.grad[out_base + i];
                    const double a = x.data[in_base + i];
                    const double s = sigmoid_v(x.data[in_base + half + i]);
                    x.grad[in_base + i] += g * s;
                    x.grad[in_base + half + i] += g * a * s * (1.0 - s);
                }
            }
        };
    }
    return out;
}

TensorPtr dropout(const TensorPtr& x, double p, Mode mode, RandomSource& rng) {
    if (p < 0.0 || p >= 1.0) throw std::runtime_error("dropout: probability must be in [0,1), got " + std::to_string(p));
    if (mode == Mode::infer || p == 0.0) {
        // exact identity; no RNG draws so infer streams stay aligned
        std::vector<double> d = x->data;
        auto out = op_node(x->shape, std::move(d), {x});
        if (out->requires_grad) {
            out->backward_fn = [](Tensor& self) {
                Tensor& x = *self.parents[0];
                x.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += self.grad[i];
            };
        }
        return out;
    }
    const double inv_keep = 1.0 / (1.0 - p);
    auto mask = std::make_shared<std::vector<char>>(x->data.size());
    std::vector<double> d(x->data.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const bool keep = rng.uniform() >= p;
        (*mask)[i] = keep ? 1 : 0;
        d[i] = keep ? x->data[i] * inv_keep : 0.0;
    }
    auto out = op_node(x->shape, std::move(d), {x});
    if (out->requires_grad) {
        out->backward_fn = [mask, inv_keep](Tensor& self) {
            Tensor& x = *self.parents[0];
            x.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if ((*mask)[i]) x.grad[i] += self.grad[i] * inv_keep;
            }
        };
    }
    return out;
}

// ---- structure ops ----

TensorPtr concat(const std::vector<TensorPtr>& xs, int axis) {
    if (xs.empty()) throw std::runtime_error("concat: no inputs");
    for (const auto& x : xs) {
        if (x->ndim() != 2) throw std::runtime_error("concat: inputs must be 2-D, got " + shape_str(x->shape));
    }
    if (axis != 0 && axis != 1) throw std::runtime_error("concat: axis must be 0 or 1");
    const int fixed = (axis == 0) ? xs[0]->cols() : xs[0]->rows();
    int total = 0;
    for (const auto& x : xs) {
        const int f = (axis == 0) ? x->cols() : x->rows();
        if (f != fixed) {
            throw std::runtime_error("concat: shape mismatch " + shape_str(xs[0]->shape) + " vs " + shape_str(x->shape));
        }
        total += (axis == 0) ? x->rows() : x->cols();
    }
    std::vector<int> oshape = (axis == 0) ? std::vector<int>{total, fixed} : std::vector<int>{fixed, total};
    std::vector<double> d(static_cast<std::size_t>(total) * fixed);
    if (axis == 0) {
        std::size_t off = 0;
        for (const auto& x : xs) {
            std::copy(x->data.begin(), x->data.end(), d.begin() + static_cast<std::ptrdiff_t>(off));
            off += x->data.size();
        }
    } else {
        int col_off = 0;
        for (const auto& x : xs) {
            for (int r = 0; r < fixed; ++r) {
                for (int c = 0; c < x->cols(); ++c) {
                    d[static_cast<std::size_t>(r) * total + col_off + c] = x->at(r, c);
                }
            }
            col_off += x->cols();
        }
    }
    auto out = op_node(std::move(oshape), std::move(d), xs);
    if (out->requires_grad) {
        out->backward_fn = [axis, total, fixed](Tensor& self) {
            if (axis == 0) {
                std::size_t off = 0;
                for (auto& pp : self.parents) {
                    Tensor& p = *pp;
                    if (p.requires_grad) {
                        p.ensure_grad();
                        for (std::size_t i = 0; i < p.data.size(); ++i) p.grad[i] += self.grad[off + i];
                    }
                    off += p.data.size();
                }
            } else {
                int col_off = 0;
                for (auto& pp : self.parents) {
                    Tensor& p = *pp;
                    if (p.requires_grad) {
                        p.ensure_grad();
                        for (int r = 0; r < fixed; ++r) {
                            for (int c = 0; c < p.cols(); ++c) {
                                p.grad[static_cast<std::size_t>(r) * p.cols() + c] +=
                                    self.grad[static_cast<std::size_t>(r) * total + col_off + c];
                            }
                        }
                    }
                    col_off += p.cols();
                }
            }
        };
    }
    return out;
}

TensorPtr slice_cols(const TensorPtr& x, int start, int len) {
    if (x->ndim() != 2) throw std::runtime_error("slice_cols: input must be 2-D");
    if (start < 0 || len <= 0 || start + len > x->cols()) {
        throw std::runtime_error("slice_cols: invalid range [" + std::to_string(start) + "," +
                                 std::to_string(start + len) + ") for " + shape_str(x->shape));
    }
    const int t = x->rows(), d_in = x->cols();
    std::vector<double> d(static_cast<std::size_t>(t) * len);
    for (int r = 0; r < t; ++r)
        for (int c = 0; c < len; ++c) d[static_cast<std::size_t>(r) * len + c] = x->at(r, start + c);
    auto out = op_node({t, len}, std::move(d), {x});
    if (out->requires_grad) {
        out->backward_fn = [t, d_in, start, len](Tensor& self) {
            Tensor& x = *self.parents[0];
            x.ensure_grad();
            for (int r = 0; r < t; ++r)
                for (int c = 0; c < len; ++c)
                    x.grad[static_cast<std::size_t>(r) * d_in + start + c] += self.grad[static_cast<std::size_t>(r) * len + c];
        };
    }
    return out;
}

TensorPtr mean_over_time(const TensorPtr& x, int valid_len) {
    if (x->ndim() != 2) throw std::runtime_error("mean_over_time: input must be 2-D");
    const int t = x->rows(), dfeat = x->cols();
    const int L = (valid_len > 0 && valid_len < t) ? valid_len : t;
    std::vector<double> d(static_cast<std::size_t>(dfeat), 0.0);
    for (int r = 0; r < L; ++r)
        for (int c = 0; c < dfeat; ++c) d[static_cast<std::size_t>(c)] += x->at(r, c);
    for (auto& v : d) v /= L;
    auto out = op_node({1, dfeat}, std::move(d), {x});
    if (out->requires_grad) {
        out->backward_fn = [L, dfeat](Tensor& self) {
            Tensor& x = *self.parents[0];
            x.ensure_grad();
            for (int r = 0; r < L; ++r)
                for (int c = 0; c < dfeat; ++c) x.grad[static_cast<std::size_t>(r) * dfeat + c] += self.grad[static_cast<std::size_t>(c)] / L;
        };
    }
    return out;
}

TensorPtr scale_channels(const TensorPtr& x, const TensorPtr& g) {
    if (x->ndim() != 2 || g->ndim() != 2 || g->rows() != 1 || g->cols() != x->cols()) {
        throw std::runtime_error("scale_channels: gate " + shape_str(g->shape) + " vs input " + shape_str(x->shape));
    }
    const int t = x->rows(), c_n = x->cols();
    std::vector<double> d(x->data.size());
    for (int r = 0; r < t; ++r)
        for (int c = 0; c < c_n; ++c) d[static_cast<std::size_t>(r) * c_n + c] = x->at(r, c) * g->data[static_cast<std::size_t>(c)];
    auto out = op_node(x->shape, std::move(d), {x, g});
    if (out->requires_grad) {
        out->backward_fn = [t, c_n](Tensor& self) {
            Tensor& x = *self.parents[0];
            Tensor& g = *self.parents[1];
            if (x.requires_grad) x.ensure_grad();
            if (g.requires_grad) g.ensure_grad();
            for (int r = 0; r < t; ++r) {
                for (int c = 0; c < c_n; ++c) {
                    const std::size_t idx = static_cast<std::size_t>(r) * c_n + c;
                    const double go = self.grad[idx];
                    if (x.requires_grad) x.grad[idx] += go * g.data[static_cast<std::size_t>(c)];
                    if (g.requires_grad) g.grad[static_cast<std::size_t>(c)] += go * x.data[idx];
                }
            }
        };
    }
    return out;
}

TensorPtr mask_keys(const TensorPtr& scores, int valid_len) {
    if (scores->ndim() != 2) throw std::runtime_error("mask_keys: input must be 2-D");
    if (valid_len > scores->cols()) {
        throw std::runtime_error("mask_keys: valid_len " + std::to_string(valid_len) + " exceeds key count " +
                                 std::to_string(scores->cols()));
    }
    if (valid_len <= 0 || valid_len == scores->cols()) return scores;
    const int t = scores->rows(), n = scores->cols();
    std::vector<double> d = scores->data;
    for (int r = 0; r < t; ++r)
        for (int c = valid_len; c < n; ++c) d[static_cast<std::size_t>(r) * n + c] = -1e30;
    auto out = op_node(scores->shape, std::move(d), {scores});
    if (out->requires_grad) {
        out->backward_fn = [t, n, valid_len](Tensor& self) {
            Tensor& x = *self.parents[0];
            x.ensure_grad();
            for (int r = 0; r < t; ++r)
                for (int c = 0; c < valid_len; ++c) {
                    const std::size_t idx = static_cast<std::size_t>(r) * n + c;
                    x.grad[idx] += self.grad[idx];
                }
        };
    }
    return out;
}

// ---- backward ----

void backward(const TensorPtr& loss) {
    if (loss->numel() != 1) {
        throw std::runtime_error("backward: loss must be scalar, got " + shape_str(loss->shape));
    }
    if (loss->backward_done) {
        throw std::runtime_error("backward: already called on this graph; rebuild the forward pass first");
    }
    loss->backward_done = true;

    // iterative DFS topological sort
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

// ---- gradient oracle ----

namespace {
double eval_scalar(const std::function<TensorPtr()>& f) {
    auto t = f();
    if (t->numel() != 1) throw std::runtime_error("grad_check: function must return a scalar");
    const double v = t->data[0];
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite function value");
    return v;
}
}  // namespace

double grad_check(const std::function<TensorPtr()>& f, const std::vector<TensorPtr>& params,
                  double step, std::uint64_t seed, int max_coords_per_tensor) {
    for (const auto& p : params) p->zero_grad();
    auto loss = f();
    if (loss->numel() != 1) throw std::runtime_error("grad_check: function must return a scalar");
    if (!std::isfinite(loss->data[0])) throw std::runtime_error("grad_check: non-finite function value");
    backward(loss);

    RandomSource pick(seed ^ 0x5bf03635ull);
    double max_err = 0.0;
    for (const auto& p : params) {
        const int n = p->numel();
        std::vector<int> coords;
        if (n <= max_coords_per_tensor) {
            coords.resize(static_cast<std::size_t>(n));
            std::iota(coords.begin(), coords.end(), 0);
        } else {
            coords.reserve(static_cast<std::size_t>(max_coords_per_tensor));
            for (int i = 0; i < max_coords_per_tensor; ++i) {
                coords.push_back(static_cast<int>(pick.next_u64() % static_cast<std::uint64_t>(n)));
            }
        }
        for (int idx : coords) {
            const double orig = p->data[static_cast<std::size_t>(idx)];
            p->data[static_cast<std::size_t>(idx)] = orig + step;
            const double fp = eval_scalar(f);
            p->data[static_cast<std::size_t>(idx)] = orig - step;
            const double fm = eval_scalar(f);
            p->data[static_cast<std::size_t>(idx)] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = p->grad.empty() ? 0.0 : p->grad[static_cast<std::size_t>(idx)];
            const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace pyramid
