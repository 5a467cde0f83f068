#include "bionas/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace bionas {

Dataset Dataset::subset(const std::vector<index_t>& idx) const {
    Dataset out;
    out.num_classes = num_classes;
    out.norm_mean = norm_mean;
    out.norm_std = norm_std;
    out.name = name;
    if (idx.empty()) return out;
    const index_t stride = images.numel() / size();
    Shape out_shape = images.shape();
    out_shape[0] = static_cast<index_t>(idx.size());
    out.images = Tensor(out_shape);
    out.labels.reserve(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        const index_t src = idx[i];
        if (src < 0 || src >= size()) throw DataError("subset index out of range");
        std::copy(images.data() + src * stride, images.data() + (src + 1) * stride,
                  out.images.data() + static_cast<index_t>(i) * stride);
        out.labels.push_back(labels[static_cast<size_t>(src)]);
    }
    return out;
}

Dataset Dataset::shuffled(uint64_t seed) const {
    std::vector<index_t> idx(static_cast<size_t>(size()));
    std::iota(idx.begin(), idx.end(), 0);
    RngStream rng(seed, 0x53485546);
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(i))]);
    return subset(idx);
}

std::pair<Dataset, Dataset> Dataset::split_half() const {
    const index_t n = size();
    std::vector<index_t> a, b;
    for (index_t i = 0; i < n / 2; ++i) a.push_back(i);
    for (index_t i = n / 2; i < n; ++i) b.push_back(i);
    return {subset(a), subset(b)};
}

Tensor Dataset::image(index_t i) const {
    const index_t stride = images.numel() / size();
    Shape shape = images.shape();
    shape[0] = 1;
    Tensor out(shape);
    std::copy(images.data() + i * stride, images.data() + (i + 1) * stride, out.data());
    return out;
}

void compute_normalization(Dataset& ds) {
    if (ds.size() == 0) return;
    const index_t n = ds.images.dim(0), c = ds.images.dim(1), hw = ds.images.dim(2) * ds.images.dim(3);
    ds.norm_mean.assign(static_cast<size_t>(c), 0.0);
    ds.norm_std.assign(static_cast<size_t>(c), 0.0);
    for (index_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (index_t i = 0; i < n; ++i) {
            const double* row = ds.images.data() + (i * c + j) * hw;
            for (index_t p = 0; p < hw; ++p) acc += row[p];
        }
        const double mean = acc / static_cast<double>(n * hw);
        double var = 0.0;
        for (index_t i = 0; i < n; ++i) {
            const double* row = ds.images.data() + (i * c + j) * hw;
            for (index_t p = 0; p < hw; ++p) var += (row[p] - mean) * (row[p] - mean);
        }
        ds.norm_mean[static_cast<size_t>(j)] = mean;
        ds.norm_std[static_cast<size_t>(j)] =
            std::max(std::sqrt(var / static_cast<double>(n * hw)), 1e-6);
    }
}

Dataset load_cifar10_bin(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw DataError("cannot open '" + path + "'");
    const std::streamoff bytes = f.tellg();
    f.seekg(0);
    constexpr index_t kRecord = 3073;
    constexpr index_t kSide = 32;
    Dataset ds;
    ds.name = path;
    ds.num_classes = 10;
    if (bytes == 0) return ds;  // empty file: empty dataset, not an error
    if (bytes % kRecord != 0)
        throw DataError("'" + path + "': size " + std::to_string(bytes) +
                        " not divisible by 3073 (stray bytes start at offset " +
                        std::to_string(bytes - bytes % kRecord) + ")");
    const index_t n = bytes / kRecord;
    ds.images = Tensor({n, 3, kSide, kSide});
    ds.labels.resize(static_cast<size_t>(n));
    std::vector<unsigned char> rec(static_cast<size_t>(kRecord));
    for (index_t i = 0; i < n; ++i) {
        f.read(reinterpret_cast<char*>(rec.data()), kRecord);
        if (!f) throw DataError("'" + path + "': short read at record " + std::to_string(i));
        const int label = rec[0];
        if (label > 9)
            throw DataError("'" + path + "': record " + std::to_string(i) + " has label " +
                            std::to_string(label) + " > 9");
        ds.labels[static_cast<size_t>(i)] = label;
        double* dst = ds.images.data() + i * 3 * kSide * kSide;
        for (index_t p = 0; p < 3 * kSide * kSide; ++p)
            dst[p] = static_cast<double>(rec[static_cast<size_t>(1 + p)]) / 255.0;
    }
    compute_normalization(ds);
    return ds;
}

void write_cifar10_bin(const std::string& path, const Dataset& ds) {
    if (ds.size() > 0 && (ds.images.dim(1) != 3 || ds.images.dim(2) != 32 || ds.images.dim(3) != 32))
        throw DataError("write_cifar10_bin: dataset must be 3x32x32, got " + ds.images.shape_str());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path + "'");
    const index_t plane = 3 * 32 * 32;
    for (index_t i = 0; i < ds.size(); ++i) {
        const unsigned char label = static_cast<unsigned char>(ds.labels[static_cast<size_t>(i)]);
        f.put(static_cast<char>(label));
        const double* src = ds.images.data() + i * plane;
        for (index_t p = 0; p < plane; ++p) {
            const double v = std::clamp(src[p], 0.0, 1.0);
            f.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
    }
}

Dataset gen_synthetic(int classes, int per_class, index_t side, double noise, uint64_t seed) {
    if (side < 4) throw ConfigError("gen_synthetic: side must be >= 4");
    if (classes < 1 || per_class < 1) throw ConfigError("gen_synthetic: counts must be positive");
    constexpr double kPi = 3.141592653589793238462643383279502884;
    Dataset ds;
    ds.name = "synthetic";
    ds.num_classes = classes;
    const index_t n = static_cast<index_t>(classes) * per_class;
    ds.images = Tensor({n, 3, side, side});
    ds.labels.resize(static_cast<size_t>(n));
    RngStream rng(seed, 0x53594e54);
    index_t i = 0;
    for (int c = 0; c < classes; ++c) {
        const double freq = static_cast<double>(c + 1);
        const double theta = kPi * static_cast<double>(c) / static_cast<double>(classes);
        const double cs = std::cos(theta), sn = std::sin(theta);
        for (int s = 0; s < per_class; ++s, ++i) {
            ds.labels[static_cast<size_t>(i)] = c;
            double* img = ds.images.data() + i * 3 * side * side;
            for (index_t ch = 0; ch < 3; ++ch) {
                // class-keyed per-channel contrast keeps the classes
                // distinguishable under global pooling of rectified features
                const double amp = 0.15 + 0.125 * static_cast<double>((c + ch) % 3);
                for (index_t r = 0; r < side; ++r)
                    for (index_t col = 0; col < side; ++col) {
                        const double u = (static_cast<double>(col) + 0.5) / static_cast<double>(side);
                        const double v = (static_cast<double>(r) + 0.5) / static_cast<double>(side);
                        double val = 0.5 + amp * std::sin(2.0 * kPi * freq * (u * cs + v * sn));
                        if (noise > 0) val += noise * rng.normal();
                        img[(ch * side + r) * side + col] = std::clamp(val, 0.0, 1.0);
                    }
            }
        }
    }
    compute_normalization(ds);
    return ds;
}

}  // namespace bionas
