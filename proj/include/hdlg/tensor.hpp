#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hdlg {

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

struct ShapeError : std::runtime_error {
    ShapeError(const std::string& op, const std::string& detail)
        : std::runtime_error("shape error in " + op + ": " + detail) {}
};

// Dense row-major tensor. Rank 0/1/2 cover everything the model needs;
// scalar S is float for training, double for gradient checks.
template <typename S>
struct Tensor {
    Shape shape;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(Shape shp, S fill = S(0))
        : shape(std::move(shp)), data(static_cast<size_t>(numel(shape)), fill) {}
    Tensor(Shape shp, std::vector<S> d) : shape(std::move(shp)), data(std::move(d)) {
        if (static_cast<long long>(data.size()) != numel(shape))
            throw ShapeError("tensor", "data length " + std::to_string(data.size()) +
                                           " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape shp) { return Tensor(std::move(shp)); }
    static Tensor scalar(S v) { return Tensor(Shape{1}, std::vector<S>{v}); }

    long long size() const { return static_cast<long long>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? 1 : 0); }
    int cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 0); }

    S& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    S at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    S& operator[](size_t i) { return data[i]; }
    S operator[](size_t i) const { return data[i]; }

    S item() const {
        if (size() != 1) throw ShapeError("item", "tensor " + shape_str(shape) + " is not scalar");
        return data[0];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
    bool has_nan() const {
        for (S v : data)
            if (std::isnan(static_cast<double>(v))) return true;
        return false;
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
        return out;
    }
};

}  // namespace hdlg
