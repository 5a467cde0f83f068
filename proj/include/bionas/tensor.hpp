#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "bionas/errors.hpp"

namespace bionas {

using index_t = int64_t;
using Shape = std::vector<index_t>;

enum class Precision { f32, f64 };

/// Process-wide value precision. f64 is the default; f32 keeps storage and
/// accumulation in doubles but rounds every op output onto the f32 grid,
/// so results are exactly representable in 32 bits and runs stay
/// deterministic with a single code path.
void set_default_precision(Precision p);
Precision default_precision();

/// Dense row-major n-dimensional array of reals. Immutable by convention
/// once an op has produced it; ops return fresh tensors.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double value);
    static Tensor from(std::initializer_list<double> values, Shape shape);

    const Shape& shape() const { return shape_; }
    index_t rank() const { return static_cast<index_t>(shape_.size()); }
    index_t dim(index_t i) const { return shape_[static_cast<size_t>(i)]; }
    index_t numel() const { return static_cast<index_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](index_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](index_t i) const { return data_[static_cast<size_t>(i)]; }

    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    /// Same data, new shape; element count must match.
    Tensor reshape(Shape new_shape) const;

    /// Finiteness gate every primitive passes its output through; also
    /// applies the f32 grid rounding when that precision is active.
    /// Throws NumericError naming `op` if any element is NaN/Inf.
    Tensor& seal(const char* op);

    bool all_finite() const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    std::string shape_str() const;

private:
    Shape shape_;
    std::vector<double> data_;
};

index_t shape_numel(const Shape& s);
std::string shape_to_string(const Shape& s);

// Elementwise helpers. All check shapes and return sealed tensors.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard
Tensor scale(const Tensor& a, double s);
Tensor sign(const Tensor& a);  // sign(0) = 0
Tensor abs(const Tensor& a);
void add_inplace(Tensor& a, const Tensor& b, double factor = 1.0);
void scale_inplace(Tensor& a, double s);

double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);
double max_abs(const Tensor& a);
double sum(const Tensor& a);

}  // namespace bionas
