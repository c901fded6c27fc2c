#pragma once

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "mavos/errors.hpp"

namespace mavos {

inline std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major tensor. Spatial maps use layout [H x W x D] (channel last),
// token matrices use [T x D]. All dimensions must be strictly positive.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(checked_numel(shape_)), T(0));
    }

    Tensor(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != static_cast<int64_t>(data_.size())) {
            throw DimensionError("tensor data size " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_to_string(shape_));
        }
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, T value) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = value;
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* ptr() { return data_.data(); }
    const T* ptr() const { return data_.data(); }
    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    // Linear index for a 2-d tensor.
    T& at2(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    const T& at2(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

    // Linear index for a 3-d tensor ([H x W x D]).
    T& at3(int h, int w, int d) {
        return data_[(static_cast<size_t>(h) * shape_[1] + w) * shape_[2] + d];
    }
    const T& at3(int h, int w, int d) const {
        return data_[(static_cast<size_t>(h) * shape_[1] + w) * shape_[2] + d];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const { return shape_to_string(shape_); }

    // Number of rows when the last axis is treated as the feature axis.
    int64_t rows() const {
        if (shape_.empty()) return 0;
        return numel() / shape_.back();
    }
    int cols() const { return shape_.empty() ? 0 : shape_.back(); }

  private:
    static int64_t checked_numel(const std::vector<int>& shape) {
        if (shape.empty()) {
            throw DimensionError("tensor shape must have at least one dimension");
        }
        int64_t n = 1;
        for (int d : shape) {
            if (d <= 0) {
                throw DimensionError("tensor shape dimensions must be strictly positive, got " +
                                     shape_to_string(shape));
            }
            n *= d;
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                             b.shape_str());
    }
}

}  // namespace mavos
