#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bionas/rng.hpp"
#include "bionas/tensor.hpp"

namespace bionas {

/// Labeled image set. Images live in [0,1]; the per-channel normalization
/// constants a model should apply are recorded here (and logged), never
/// baked into the pixels, so attack budgets stay in input space.
struct Dataset {
    Tensor images;  // [N,C,H,W]
    std::vector<int> labels;
    index_t num_classes = 0;
    std::vector<double> norm_mean, norm_std;
    std::string name;

    index_t size() const { return images.empty() ? 0 : images.dim(0); }
    Dataset subset(const std::vector<index_t>& idx) const;
    Dataset shuffled(uint64_t seed) const;
    /// First/second half split (the DARTS train/val convention for search).
    std::pair<Dataset, Dataset> split_half() const;
    Tensor image(index_t i) const;  // [1,C,H,W] view copy
};

/// Fills norm_mean/norm_std from the data (std floored at 1e-6).
void compute_normalization(Dataset& ds);

/// CIFAR-10 binary format: records of 3073 bytes (label, 1024 R, 1024 G,
/// 1024 B; 32x32 row-major). Pixels scaled to [0,1]. An empty file yields
/// an empty dataset; a truncated file or a label > 9 is a DataError.
Dataset load_cifar10_bin(const std::string& path);

/// Writes a dataset back out in the same binary format (requires 3x32x32).
void write_cifar10_bin(const std::string& path, const Dataset& ds);

/// Deterministic synthetic task: class c renders an oriented stripe
/// pattern of spatial frequency c+1 plus Gaussian noise, clipped to [0,1].
/// Linearly separable at noise=0. Samples are class-major; shuffle for
/// training.
Dataset gen_synthetic(int classes, int per_class, index_t side, double noise, uint64_t seed);

}  // namespace bionas
