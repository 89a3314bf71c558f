#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fedst/errors.hpp"
#include "fedst/rng.hpp"

namespace fedst {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw DimensionError("tensor dims must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

/// Dense n-dimensional array of doubles with an optional gradient buffer.
///
/// Copies are shallow: a Tensor is a handle onto shared storage, so the same
/// parameter can live in a ParamTree and inside recorded operations. Values
/// are row-major. A tensor with requires_grad owns a gradient buffer of the
/// same length; gradients accumulate until zero_grad().
class Tensor {
public:
    Tensor() : impl_(std::make_shared<Impl>()) {}

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : impl_(std::make_shared<Impl>()) {
        impl_->shape = std::move(shape);
        impl_->data.assign(static_cast<std::size_t>(shape_numel(impl_->shape)), fill);
        impl_->requires_grad = requires_grad;
        if (requires_grad) impl_->grad.assign(impl_->data.size(), 0.0);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        Tensor t(Shape{1}, v, requires_grad);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        Tensor t;
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
            throw DimensionError("value count does not match shape " + shape_str(shape));
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        t.impl_->requires_grad = requires_grad;
        if (requires_grad) t.impl_->grad.assign(t.impl_->data.size(), 0.0);
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        Tensor t(std::move(shape), 0.0, requires_grad);
        for (double& v : t.impl_->data) v = rng.normal() * stddev;
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
    std::int64_t size() const { return static_cast<std::int64_t>(impl_->data.size()); }
    bool requires_grad() const { return impl_->requires_grad; }
    bool has_grad() const { return !impl_->grad.empty(); }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    std::vector<double>& grad() {
        if (impl_->grad.empty()) throw ContractError("tensor has no gradient buffer");
        return impl_->grad;
    }
    const std::vector<double>& grad() const {
        if (impl_->grad.empty()) throw ContractError("tensor has no gradient buffer");
        return impl_->grad;
    }

    void ensure_grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    }

    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    double item() const {
        if (size() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
        return impl_->data[0];
    }

    /// Value-only deep copy detached from any graph; never carries a gradient.
    Tensor detach() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        t.impl_->requires_grad = false;
        return t;
    }

    /// Deep copy preserving requires_grad (fresh zero gradient buffer).
    Tensor clone() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        t.impl_->requires_grad = impl_->requires_grad;
        if (t.impl_->requires_grad) t.impl_->grad.assign(t.impl_->data.size(), 0.0);
        return t;
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    void check_finite(const char* what) const {
        for (double v : impl_->data)
            if (!std::isfinite(v))
                throw NumericError(std::string("non-finite value after ") + what);
    }

private:
    struct Impl {
        Shape shape{1};
        std::vector<double> data{0.0};
        std::vector<double> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

/// Append-only record of executed operations. While a Tape is active on the
/// current thread every differentiable op pushes one record; backward() walks
/// the records once, in reverse append order, after seeding d(loss)/d(loss)=1.
///
/// A tape and the tensors recorded on it belong to one worker at a time.
class Tape {
public:
    Tape() {
        if (current_) throw ContractError("a Tape is already active on this thread");
        current_ = this;
    }
    ~Tape() { current_ = nullptr; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_; }

    void record(const char* op, std::function<void()> backward) {
        records_.push_back({op, std::move(backward)});
    }

    std::size_t size() const { return records_.size(); }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// requires_grad tensor reachable from the loss.
    void backward(Tensor& loss) {
        if (loss.size() != 1) throw ContractError("backward requires a scalar loss");
        if (!loss.has_grad()) throw ContractError("loss is not on the tape");
        loss.grad()[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
    }

    /// Drop all records (start a fresh forward pass on the same tape).
    void reset() { records_.clear(); }

private:
    struct Record {
        const char* op;
        std::function<void()> backward;
    };
    std::vector<Record> records_;
    static thread_local Tape* current_;
};

inline thread_local Tape* Tape::current_ = nullptr;

} // namespace fedst
