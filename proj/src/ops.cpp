#include "bionas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bionas {

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 tensors, got " + a.shape_str() + " and " + b.shape_str());
    const index_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dimensions differ, " + a.shape_str() + " vs " + b.shape_str());
    Tensor out({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (index_t i = 0; i < m; ++i) {
        for (index_t j = 0; j < n; ++j) {
            double acc = 0.0;
            const double* ra = pa + i * k;
            for (index_t t = 0; t < k; ++t) acc += ra[t] * pb[t * n + j];
            po[i * n + j] = acc;
        }
    }
    return out.seal("matmul");
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank-2 tensor, got " + a.shape_str());
    const index_t m = a.dim(0), n = a.dim(1);
    Tensor out({n, m});
    for (index_t i = 0; i < m; ++i)
        for (index_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return out;
}

namespace {

struct ConvDims {
    index_t n, cin, h, w;        // input
    index_t cout, cpg, k;        // weight (cpg = channels per group)
    index_t ho, wo;              // output
    index_t groups, cin_pg, cout_pg;
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, const Conv2dSpec& sp) {
    if (xs.size() != 4 || ws.size() != 4)
        throw ShapeError("conv2d: expected 4-D input and weight");
    ConvDims d;
    d.n = xs[0]; d.cin = xs[1]; d.h = xs[2]; d.w = xs[3];
    d.cout = ws[0]; d.cpg = ws[1]; d.k = ws[2];
    if (ws[2] != ws[3]) throw ShapeError("conv2d: only square kernels supported");
    if (d.k != 1 && d.k != 3 && d.k != 5)
        throw ShapeError("conv2d: kernel size must be 1, 3, or 5, got " + std::to_string(d.k));
    if (sp.stride < 1) throw ShapeError("conv2d: invalid stride");
    if (sp.dilation < 1) throw ShapeError("conv2d: invalid dilation");
    d.groups = sp.groups;
    if (d.groups < 1 || d.cin % d.groups != 0 || d.cout % d.groups != 0)
        throw ShapeError("conv2d: groups must divide channel counts");
    d.cin_pg = d.cin / d.groups;
    d.cout_pg = d.cout / d.groups;
    if (d.cpg != d.cin_pg)
        throw ShapeError("conv2d: weight channel dim " + std::to_string(d.cpg) +
                         " != C_in/groups = " + std::to_string(d.cin_pg));
    d.ho = (d.h + 2 * sp.padding - sp.dilation * (d.k - 1) - 1) / sp.stride + 1;
    d.wo = (d.w + 2 * sp.padding - sp.dilation * (d.k - 1) - 1) / sp.stride + 1;
    if (d.h + 2 * sp.padding < sp.dilation * (d.k - 1) + 1 || d.ho < 1 || d.wo < 1)
        throw ShapeError("conv2d: non-positive output size for input " + shape_to_string(xs));
    return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Conv2dSpec& sp) {
    ConvDims d = conv_dims(x.shape(), w.shape(), sp);
    Tensor out({d.n, d.cout, d.ho, d.wo});
    const double* px = x.data();
    const double* pw = w.data();
    double* po = out.data();
    for (index_t n = 0; n < d.n; ++n) {
        for (index_t g = 0; g < d.groups; ++g) {
            for (index_t co = g * d.cout_pg; co < (g + 1) * d.cout_pg; ++co) {
                const double* wf = pw + co * d.cpg * d.k * d.k;
                for (index_t oh = 0; oh < d.ho; ++oh) {
                    for (index_t ow = 0; ow < d.wo; ++ow) {
                        double acc = 0.0;
                        for (index_t ci = 0; ci < d.cin_pg; ++ci) {
                            const double* xc = px + ((n * d.cin + g * d.cin_pg + ci) * d.h) * d.w;
                            const double* wr = wf + ci * d.k * d.k;
                            for (index_t kh = 0; kh < d.k; ++kh) {
                                const index_t ih = oh * sp.stride - sp.padding + kh * sp.dilation;
                                if (ih < 0 || ih >= d.h) continue;
                                for (index_t kw = 0; kw < d.k; ++kw) {
                                    const index_t iw = ow * sp.stride - sp.padding + kw * sp.dilation;
                                    if (iw < 0 || iw >= d.w) continue;
                                    acc += xc[ih * d.w + iw] * wr[kh * d.k + kw];
                                }
                            }
                        }
                        po[((n * d.cout + co) * d.ho + oh) * d.wo + ow] = acc;
                    }
                }
            }
        }
    }
    return out.seal("conv2d");
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Conv2dSpec& sp,
                         const Shape& input_shape) {
    ConvDims d = conv_dims(input_shape, w.shape(), sp);
    if (grad_out.shape() != Shape{d.n, d.cout, d.ho, d.wo})
        throw ShapeError("conv2d_input_grad: grad shape " + grad_out.shape_str() + " does not match");
    Tensor gx(input_shape);
    const double* pg = grad_out.data();
    const double* pw = w.data();
    double* px = gx.data();
    // Scatter each output gradient back through the window it came from;
    // loop order fixed for determinism.
    for (index_t n = 0; n < d.n; ++n) {
        for (index_t g = 0; g < d.groups; ++g) {
            for (index_t co = g * d.cout_pg; co < (g + 1) * d.cout_pg; ++co) {
                const double* wf = pw + co * d.cpg * d.k * d.k;
                for (index_t oh = 0; oh < d.ho; ++oh) {
                    for (index_t ow = 0; ow < d.wo; ++ow) {
                        const double gv = pg[((n * d.cout + co) * d.ho + oh) * d.wo + ow];
                        if (gv == 0.0) continue;
                        for (index_t ci = 0; ci < d.cin_pg; ++ci) {
                            double* xc = px + ((n * d.cin + g * d.cin_pg + ci) * d.h) * d.w;
                            const double* wr = wf + ci * d.k * d.k;
                            for (index_t kh = 0; kh < d.k; ++kh) {
                                const index_t ih = oh * sp.stride - sp.padding + kh * sp.dilation;
                                if (ih < 0 || ih >= d.h) continue;
                                for (index_t kw = 0; kw < d.k; ++kw) {
                                    const index_t iw = ow * sp.stride - sp.padding + kw * sp.dilation;
                                    if (iw < 0 || iw >= d.w) continue;
                                    xc[ih * d.w + iw] += gv * wr[kh * d.k + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return gx.seal("conv2d_input_grad");
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Conv2dSpec& sp,
                          const Shape& weight_shape) {
    ConvDims d = conv_dims(x.shape(), weight_shape, sp);
    if (grad_out.shape() != Shape{d.n, d.cout, d.ho, d.wo})
        throw ShapeError("conv2d_weight_grad: grad shape " + grad_out.shape_str() + " does not match");
    Tensor gw(weight_shape);
    const double* px = x.data();
    const double* pg = grad_out.data();
    double* pw = gw.data();
    for (index_t n = 0; n < d.n; ++n) {
        for (index_t g = 0; g < d.groups; ++g) {
            for (index_t co = g * d.cout_pg; co < (g + 1) * d.cout_pg; ++co) {
                double* wf = pw + co * d.cpg * d.k * d.k;
                for (index_t oh = 0; oh < d.ho; ++oh) {
                    for (index_t ow = 0; ow < d.wo; ++ow) {
                        const double gv = pg[((n * d.cout + co) * d.ho + oh) * d.wo + ow];
                        if (gv == 0.0) continue;
                        for (index_t ci = 0; ci < d.cin_pg; ++ci) {
                            const double* xc = px + ((n * d.cin + g * d.cin_pg + ci) * d.h) * d.w;
                            double* wr = wf + ci * d.k * d.k;
                            for (index_t kh = 0; kh < d.k; ++kh) {
                                const index_t ih = oh * sp.stride - sp.padding + kh * sp.dilation;
                                if (ih < 0 || ih >= d.h) continue;
                                for (index_t kw = 0; kw < d.k; ++kw) {
                                    const index_t iw = ow * sp.stride - sp.padding + kw * sp.dilation;
                                    if (iw < 0 || iw >= d.w) continue;
                                    wr[kh * d.k + kw] += gv * xc[ih * d.w + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return gw.seal("conv2d_weight_grad");
}

PoolResult pool2d(const Tensor& x, PoolKind kind, index_t k, index_t stride) {
    if (x.rank() != 4) throw ShapeError("pool2d: expected 4-D input, got " + x.shape_str());
    if (stride < 1) throw ShapeError("pool2d: invalid stride " + std::to_string(stride));
    if (k < 1) throw ShapeError("pool2d: invalid window " + std::to_string(k));
    const index_t pad = 1;
    const index_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const index_t ho = (h + 2 * pad - k) / stride + 1;
    const index_t wo = (w + 2 * pad - k) / stride + 1;
    if (h + 2 * pad < k || ho < 1 || wo < 1)
        throw ShapeError("pool2d: window does not fit input " + x.shape_str());
    PoolResult res;
    res.y = Tensor({n, c, ho, wo});
    if (kind == PoolKind::max) res.argmax.assign(static_cast<size_t>(res.y.numel()), -1);
    const double* px = x.data();
    double* po = res.y.data();
    const double area = static_cast<double>(k * k);
    for (index_t ni = 0; ni < n; ++ni) {
        for (index_t ci = 0; ci < c; ++ci) {
            const double* xc = px + (ni * c + ci) * h * w;
            for (index_t oh = 0; oh < ho; ++oh) {
                for (index_t ow = 0; ow < wo; ++ow) {
                    const index_t oidx = ((ni * c + ci) * ho + oh) * wo + ow;
                    if (kind == PoolKind::avg) {
                        double acc = 0.0;
                        for (index_t kh = 0; kh < k; ++kh) {
                            const index_t ih = oh * stride - pad + kh;
                            if (ih < 0 || ih >= h) continue;
                            for (index_t kw = 0; kw < k; ++kw) {
                                const index_t iw = ow * stride - pad + kw;
                                if (iw < 0 || iw >= w) continue;
                                acc += xc[ih * w + iw];
                            }
                        }
                        po[oidx] = acc / area;  // padded zeros count toward the divisor
                    } else {
                        double best = -std::numeric_limits<double>::infinity();
                        index_t best_idx = -1;
                        for (index_t kh = 0; kh < k; ++kh) {
                            const index_t ih = oh * stride - pad + kh;
                            if (ih < 0 || ih >= h) continue;
                            for (index_t kw = 0; kw < k; ++kw) {
                                const index_t iw = ow * stride - pad + kw;
                                if (iw < 0 || iw >= w) continue;
                                const double v = xc[ih * w + iw];
                                if (v > best) {
                                    best = v;
                                    best_idx = (ni * c + ci) * h * w + ih * w + iw;
                                }
                            }
                        }
                        po[oidx] = best;
                        res.argmax[static_cast<size_t>(oidx)] = best_idx;
                    }
                }
            }
        }
    }
    res.y.seal("pool2d");
    return res;
}

Tensor pool2d_input_grad(const Tensor& grad_out, PoolKind kind, const Shape& input_shape,
                         const PoolResult& fw, index_t k, index_t stride) {
    Tensor gx(input_shape);
    const index_t pad = 1;
    const index_t n = input_shape[0], c = input_shape[1], h = input_shape[2], w = input_shape[3];
    const index_t ho = grad_out.dim(2), wo = grad_out.dim(3);
    const double* pg = grad_out.data();
    double* px = gx.data();
    if (kind == PoolKind::max) {
        if (fw.argmax.size() != static_cast<size_t>(grad_out.numel()))
            throw ShapeError("pool2d_input_grad: argmax record does not match grad shape");
        for (index_t i = 0; i < grad_out.numel(); ++i) {
            const index_t src = fw.argmax[static_cast<size_t>(i)];
            if (src >= 0) px[src] += pg[i];
        }
    } else {
        const double area = static_cast<double>(k * k);
        for (index_t ni = 0; ni < n; ++ni)
            for (index_t ci = 0; ci < c; ++ci)
                for (index_t oh = 0; oh < ho; ++oh)
                    for (index_t ow = 0; ow < wo; ++ow) {
                        const double gv = pg[((ni * c + ci) * ho + oh) * wo + ow] / area;
                        for (index_t kh = 0; kh < k; ++kh) {
                            const index_t ih = oh * stride - pad + kh;
                            if (ih < 0 || ih >= h) continue;
                            for (index_t kw = 0; kw < k; ++kw) {
                                const index_t iw = ow * stride - pad + kw;
                                if (iw < 0 || iw >= w) continue;
                                px[((ni * c + ci) * h + ih) * w + iw] += gv;
                            }
                        }
                    }
    }
    return gx.seal("pool2d_input_grad");
}

ReluResult relu_forward(const Tensor& z) {
    ReluResult r;
    r.y = Tensor(z.shape());
    r.deriv = Tensor(z.shape());
    for (index_t i = 0; i < z.numel(); ++i) {
        if (z[i] > 0) {
            r.y[i] = z[i];
            r.deriv[i] = 1.0;
        }
    }
    r.y.seal("relu");
    return r;
}

SoftmaxXentResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                        double label_smoothing) {
    if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N,C]");
    const index_t n = logits.dim(0), c = logits.dim(1);
    if (static_cast<index_t>(labels.size()) != n)
        throw ShapeError("softmax_cross_entropy: label count != batch size");
    SoftmaxXentResult r;
    r.probs = Tensor({n, c});
    r.output_error = Tensor({n, c});
    const double ls = label_smoothing;
    double loss = 0.0;
    for (index_t i = 0; i < n; ++i) {
        const int y = labels[static_cast<size_t>(i)];
        if (y < 0 || y >= c)
            throw DataError("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0," +
                            std::to_string(c) + ")");
        const double* row = logits.data() + i * c;
        double m = row[0];
        for (index_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (index_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
        const double logz = std::log(z) + m;
        for (index_t j = 0; j < c; ++j) {
            const double logp = row[j] - logz;
            const double p = std::exp(logp);
            const double t = (j == y ? 1.0 - ls : 0.0) + ls / static_cast<double>(c);
            r.probs[i * c + j] = p;
            r.output_error[i * c + j] = (p - t) / static_cast<double>(n);
            loss -= t * logp;
        }
    }
    r.loss = loss / static_cast<double>(n);
    if (!std::isfinite(r.loss)) throw NumericError("softmax_cross_entropy: non-finite loss");
    r.output_error.seal("softmax_cross_entropy");
    return r;
}

MseResult mse_loss(const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target))
        throw ShapeError("mse_loss: shape mismatch " + pred.shape_str() + " vs " + target.shape_str());
    MseResult r;
    r.grad = Tensor(pred.shape());
    const double inv_n = 1.0 / static_cast<double>(pred.numel());
    double acc = 0.0;
    for (index_t i = 0; i < pred.numel(); ++i) {
        const double d = pred[i] - target[i];
        acc += 0.5 * d * d;
        r.grad[i] = d * inv_n;
    }
    r.loss = acc * inv_n;
    if (!std::isfinite(r.loss)) throw NumericError("mse_loss: non-finite loss");
    return r;
}

void weight_fans(const Shape& w_shape, index_t& fan_in, index_t& fan_out) {
    if (w_shape.size() == 2) {
        fan_out = w_shape[0];
        fan_in = w_shape[1];
    } else if (w_shape.size() == 4) {
        const index_t rf = w_shape[2] * w_shape[3];
        fan_out = w_shape[0] * rf;
        fan_in = w_shape[1] * rf;
    } else {
        throw ShapeError("weight_fans: unsupported weight shape " + shape_to_string(w_shape));
    }
}

Tensor xavier_uniform(const Shape& shape, index_t fan_in, index_t fan_out, RngStream& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(shape);
    for (index_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-a, a);
    return t.seal("xavier_uniform");
}

}  // namespace bionas
