#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bionas/rng.hpp"
#include "bionas/tensor.hpp"

namespace testutil {

using bionas::index_t;
using bionas::Tensor;

inline double rel_err(double got, double want, double floor = 1e-8) {
    return std::fabs(got - want) / std::max(std::fabs(want), floor);
}

inline double max_rel_err(const Tensor& got, const Tensor& want, double floor = 1e-8) {
    double m = 0.0;
    for (index_t i = 0; i < got.numel(); ++i) m = std::max(m, rel_err(got[i], want[i], floor));
    return m;
}

inline Tensor random_tensor(bionas::Shape shape, bionas::RngStream& rng, double lo = -1.0,
                            double hi = 1.0) {
    Tensor t(std::move(shape));
    for (index_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

/// Central finite differences of a scalar function w.r.t. every element of
/// `point`. Mutates a copy; `f` must be a pure function of the tensor.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& point,
                                double h = 1e-5) {
    Tensor grad(point.shape());
    Tensor probe = point;
    for (index_t i = 0; i < point.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = f(probe);
        probe[i] = orig - h;
        const double down = f(probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

/// Brute-force triple-loop matrix product, the independent matmul oracle.
inline Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    const index_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    for (index_t i = 0; i < m; ++i)
        for (index_t j = 0; j < n; ++j) {
            double acc = 0;
            for (index_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
            out[i * n + j] = acc;
        }
    return out;
}

/// Nested-loop cross-correlation oracle (groups=1).
inline Tensor conv2d_oracle(const Tensor& x, const Tensor& w, index_t stride, index_t pad,
                            index_t dilation) {
    const index_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
    const index_t cout = w.dim(0), k = w.dim(2);
    const index_t ho = (h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    const index_t wo = (ww + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    Tensor out({n, cout, ho, wo});
    for (index_t ni = 0; ni < n; ++ni)
        for (index_t co = 0; co < cout; ++co)
            for (index_t oh = 0; oh < ho; ++oh)
                for (index_t ow = 0; ow < wo; ++ow) {
                    double acc = 0;
                    for (index_t ci = 0; ci < cin; ++ci)
                        for (index_t kh = 0; kh < k; ++kh)
                            for (index_t kw = 0; kw < k; ++kw) {
                                const index_t ih = oh * stride - pad + kh * dilation;
                                const index_t iw = ow * stride - pad + kw * dilation;
                                if (ih < 0 || ih >= h || iw < 0 || iw >= ww) continue;
                                acc += x[((ni * cin + ci) * h + ih) * ww + iw] *
                                       w[((co * cin + ci) * k + kh) * k + kw];
                            }
                    out[((ni * cout + co) * ho + oh) * wo + ow] = acc;
                }
    return out;
}

}  // namespace testutil
