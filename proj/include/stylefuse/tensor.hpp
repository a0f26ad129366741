#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylefuse {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

// Dense row-major tensor of doubles. All toy-scale math in this library runs in
// double so finite-difference gradient checks are meaningful.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

    static Tensor from_data(Shape shape, std::vector<double> data) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw std::invalid_argument("data size does not match shape " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_  = std::move(data);
        return t;
    }
    static Tensor scalar(double v) { return from_data({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 2-D / 3-D accessors for the common (rows,cols) and (c,h,w) layouts.
    double& at(int r, int c) { return data_[static_cast<size_t>(r) * dim(1) + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * dim(1) + c]; }
    double& at(int c, int y, int x) {
        return data_[(static_cast<size_t>(c) * dim(1) + y) * dim(2) + x];
    }
    double at(int c, int y, int x) const {
        return data_[(static_cast<size_t>(c) * dim(1) + y) * dim(2) + x];
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(s));
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
    double mean() const { return empty() ? 0.0 : sum() / static_cast<double>(numel()); }
    double min() const {
        double m = data_.at(0);
        for (double v : data_) m = std::min(m, v);
        return m;
    }
    double max() const {
        double m = data_.at(0);
        for (double v : data_) m = std::max(m, v);
        return m;
    }
    double abs_max() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::fabs(v));
        return m;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (int64_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

// FNV-1a over the raw little-endian bytes of shape + data. Used for parameter
// freeze checks and checkpoint/schedule identity.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline uint64_t tensor_hash(const Tensor& t, uint64_t h = 1469598103934665603ULL) {
    for (int d : t.shape()) {
        auto v = static_cast<int64_t>(d);
        h = fnv1a64(&v, sizeof(v), h);
    }
    if (t.numel() > 0)
        h = fnv1a64(t.data(), static_cast<size_t>(t.numel()) * sizeof(double), h);
    return h;
}

inline std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

}  // namespace stylefuse
