#include "bionas/tensor.hpp"

#include <cmath>
#include <sstream>

namespace bionas {

namespace {
Precision g_precision = Precision::f64;
}

void set_default_precision(Precision p) { g_precision = p; }
Precision default_precision() { return g_precision; }

index_t shape_numel(const Shape& s) {
    index_t n = 1;
    for (index_t d : s) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_to_string(s));
        n *= d;
    }
    return n;
}

std::string shape_to_string(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<index_t>(data_.size()) != shape_numel(shape_))
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_to_string(shape_));
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = value;
    return t;
}

Tensor Tensor::from(std::initializer_list<double> values, Shape shape) {
    return Tensor(std::move(shape), std::vector<double>(values));
}

Tensor Tensor::reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw ShapeError("reshape " + shape_to_string(shape_) + " -> " + shape_to_string(new_shape));
    return Tensor(std::move(new_shape), data_);
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor& Tensor::seal(const char* op) {
    if (g_precision == Precision::f32)
        for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
    for (double v : data_)
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
    return *this;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (index_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out.seal("add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (index_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out.seal("sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (index_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out.seal("mul");
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (index_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out.seal("scale");
}

Tensor sign(const Tensor& a) {
    Tensor out(a.shape());
    for (index_t i = 0; i < a.numel(); ++i) out[i] = a[i] > 0 ? 1.0 : (a[i] < 0 ? -1.0 : 0.0);
    return out;
}

Tensor abs(const Tensor& a) {
    Tensor out(a.shape());
    for (index_t i = 0; i < a.numel(); ++i) out[i] = std::fabs(a[i]);
    return out;
}

void add_inplace(Tensor& a, const Tensor& b, double factor) {
    check_same_shape(a, b, "add_inplace");
    for (index_t i = 0; i < a.numel(); ++i) a[i] += factor * b[i];
}

void scale_inplace(Tensor& a, double s) {
    for (index_t i = 0; i < a.numel(); ++i) a[i] *= s;
}

double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    double acc = 0.0;
    for (index_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
    return acc;
}

double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (index_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i]));
    return m;
}

double sum(const Tensor& a) {
    double acc = 0.0;
    for (index_t i = 0; i < a.numel(); ++i) acc += a[i];
    return acc;
}

}  // namespace bionas
