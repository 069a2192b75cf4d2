#pragma once

#include <cstddef>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace mnp {

// Raised when a computation produces NaN/Inf or an iterative routine fails
// to converge. Input-validation problems use std::invalid_argument instead.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense 64-bit float array of rank 0 (scalar), 1 (vector) or 2 (matrix).
// Row-major storage. Shape is part of the value: ops must match exactly.
struct Array {
    int rank = 0;
    std::size_t d0 = 1;  // rows (or length for rank 1)
    std::size_t d1 = 1;  // cols
    std::vector<double> v;

    Array() : v(1, 0.0) {}

    static Array scalar(double x) {
        Array a;
        a.v[0] = x;
        return a;
    }
    // sized constructor is named distinctly: vec({x}) with one double must
    // never silently pick a length overload
    static Array vec_n(std::size_t n, double fill = 0.0) {
        Array a;
        a.rank = 1;
        a.d0 = n;
        a.d1 = 1;
        a.v.assign(n, fill);
        return a;
    }
    static Array vec(std::vector<double> data) {
        Array a;
        a.rank = 1;
        a.d0 = data.size();
        a.d1 = 1;
        a.v = std::move(data);
        return a;
    }
    static Array mat(std::size_t r, std::size_t c, double fill = 0.0) {
        Array a;
        a.rank = 2;
        a.d0 = r;
        a.d1 = c;
        a.v.assign(r * c, fill);
        return a;
    }

    std::size_t numel() const { return v.size(); }

    double& at(std::size_t i, std::size_t j) { return v[i * d1 + j]; }
    double at(std::size_t i, std::size_t j) const { return v[i * d1 + j]; }
    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }

    bool same_shape(const Array& o) const {
        return rank == o.rank && d0 == o.d0 && d1 == o.d1;
    }
    std::string shape_str() const {
        if (rank == 0) return "scalar";
        if (rank == 1) return "vec[" + std::to_string(d0) + "]";
        return "mat[" + std::to_string(d0) + "x" + std::to_string(d1) + "]";
    }
    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace mnp
