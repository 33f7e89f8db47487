#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <new>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kgg/common.hpp"

// Dense double-precision tensors (rank 1 or 2) with tape-based reverse-mode
// autodiff. A Tensor is a shared handle: copying it aliases the same storage.
// Operations allocate fresh outputs and never mutate their inputs' data.
// Gradients accumulate additively, so a tensor used several times in one
// graph receives the sum of its partials.

namespace kgg {

using Shape = std::vector<int>;

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EVec = Eigen::VectorXd;
using MatMap = Eigen::Map<EMat>;
using ConstMatMap = Eigen::Map<const EMat>;

inline long shape_numel(const Shape& s) {
    if (s.empty()) throw DimensionError("empty shape");
    long n = 1;
    for (int d : s) {
        if (d <= 0) throw DimensionError("dimensions must be positive");
        n *= d;
    }
    return n;
}

// Optional NaN/Inf screening of every op output. Off by default; tests and
// debug runs switch it on.
inline bool& debug_checks() {
    static bool enabled = false;
    return enabled;
}

class Tape;

namespace detail {

// 64-byte-aligned storage. Vectorized kernels peel loops differently for
// differently aligned buffers, which would make results depend on where the
// allocator happened to place them; uniform alignment keeps every
// computation bit-reproducible.
template <typename T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAlloc() = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U>&) {}
    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, size_t) noexcept { ::operator delete(p, alignment); }
    template <typename U>
    bool operator==(const AlignedAlloc<U>&) const {
        return true;
    }
};

}  // namespace detail

using DVec = std::vector<double, detail::AlignedAlloc<double>>;

namespace detail {

struct TensorData {
    Shape shape;
    DVec value;
    DVec grad;  // empty until backward touches it
    bool requires_grad = false;
};

using DataPtr = std::shared_ptr<TensorData>;

inline double* ensure_grad(const DataPtr& d) {
    if (d->grad.empty()) d->grad.assign(d->value.size(), 0.0);
    return d->grad.data();
}

inline Tape*& active_tape_slot() {
    static thread_local Tape* active = nullptr;
    return active;
}

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : d_(std::make_shared<detail::TensorData>()) {
        long n = shape_numel(shape);
        d_->shape = std::move(shape);
        d_->value.assign(static_cast<size_t>(n), fill);
        d_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static Tensor from(Shape shape, const std::vector<double>& values, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<long>(values.size()))
            throw DimensionError("value count does not match shape");
        Tensor t;
        t.d_ = std::make_shared<detail::TensorData>();
        t.d_->shape = std::move(shape);
        t.d_->value.assign(values.begin(), values.end());
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        Tensor t(std::move(shape), 0.0, requires_grad);
        for (double& x : t.d_->value) x = rng.normal() * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    long numel() const { return static_cast<long>(d_->value.size()); }
    int rows() const { return d_->shape[0]; }
    int cols() const { return rank() == 2 ? d_->shape[1] : 1; }
    bool is_scalar() const { return numel() == 1; }

    const DVec& data() const { return d_->value; }
    DVec& mutable_data() { return d_->value; }
    double item() const {
        if (!is_scalar()) throw ContractError("item() on non-scalar tensor");
        return d_->value[0];
    }
    double at(long i) const { return d_->value[static_cast<size_t>(i)]; }
    double operator()(int r, int c) const { return d_->value[static_cast<size_t>(r) * cols() + c]; }
    void set(long i, double v) { d_->value[static_cast<size_t>(i)] = v; }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    const DVec& grad() const {
        if (d_->grad.empty()) throw ContractError("gradient not populated");
        return d_->grad;
    }
    void zero_grad() { std::fill(d_->grad.begin(), d_->grad.end(), 0.0); }
    void drop_grad() { d_->grad.clear(); }

    // Identity of the underlying storage; two handles alias iff equal.
    const void* storage_id() const { return d_.get(); }

    detail::DataPtr ptr() const { return d_; }

    ConstMatMap mat() const { return ConstMatMap(d_->value.data(), rows(), cols()); }
    MatMap mat_mut() { return MatMap(d_->value.data(), rows(), cols()); }

  private:
    detail::DataPtr d_;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of the primitive ops of one forward pass. Creation
// order is topological order (an op's inputs always exist before it runs),
// and backward() sweeps the record exactly once in reverse.
// ---------------------------------------------------------------------------

class Tape {
  public:
    Tape() : prev_(detail::active_tape_slot()) { detail::active_tape_slot() = this; }
    ~Tape() { detail::active_tape_slot() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return detail::active_tape_slot(); }

    void record(std::vector<detail::DataPtr> inputs, detail::DataPtr output, std::function<void()> backward) {
        Node node;
        node.input_ids.reserve(inputs.size());
        for (const auto& in : inputs) node.input_ids.push_back(id_for(in));
        node.inputs = std::move(inputs);
        node.output = std::move(output);
        node.output_id = new_id(node.output);
        node.backward = std::move(backward);
        nodes_.push_back(std::move(node));
    }

    size_t num_ops() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every tensor
    // on the tape that wants them. Leaf grads are not cleared here.
    void backward(const Tensor& loss) {
        if (!loss.is_scalar()) throw ContractError("backward: loss must be scalar");
        if (nodes_.empty()) throw ContractError("backward: tape is empty");
        if (ids_.find(loss.ptr().get()) == ids_.end())
            throw ContractError("backward: loss is not on this tape");
        detail::ensure_grad(loss.ptr())[0] += 1.0;
        for (auto node = nodes_.rbegin(); node != nodes_.rend(); ++node) {
            if (node->output->grad.empty()) continue;  // branch not reaching the loss
            node->backward();
        }
    }

  private:
    struct Node {
        std::vector<int> input_ids;
        int output_id = -1;
        std::vector<detail::DataPtr> inputs;
        detail::DataPtr output;
        std::function<void()> backward;
    };

    int id_for(const detail::DataPtr& d) {
        auto it = ids_.find(d.get());
        if (it != ids_.end()) return it->second;
        return new_id(d);
    }

    int new_id(const detail::DataPtr& d) {
        int id = next_id_++;
        ids_[d.get()] = id;
        return id;
    }

    std::vector<Node> nodes_;
    std::unordered_map<const detail::TensorData*, int> ids_;
    int next_id_ = 0;
    Tape* prev_;
};

// Temporarily disables recording (detached forward passes, optimizer math).
class NoTape {
  public:
    NoTape() : saved_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
    ~NoTape() { detail::active_tape_slot() = saved_; }
    NoTape(const NoTape&) = delete;
    NoTape& operator=(const NoTape&) = delete;

  private:
    Tape* saved_;
};

// ---------------------------------------------------------------------------
// Primitive operations.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
    if (!debug_checks()) return;
    for (double v : t.data())
        if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
}

// Marks the output, records the node when a tape is live and grads are wanted.
inline void finish_op(const char* name, std::vector<Tensor> inputs, Tensor& out, std::function<void()> backward) {
    bool needs = false;
    for (const auto& in : inputs) needs |= in.requires_grad();
    out.set_requires_grad(needs);
    check_finite(out, name);
    Tape* tape = Tape::active();
    if (!tape || !needs) return;
    std::vector<DataPtr> ptrs;
    ptrs.reserve(inputs.size());
    for (const auto& in : inputs) ptrs.push_back(in.ptr());
    tape->record(std::move(ptrs), out.ptr(), std::move(backward));
}

inline MatMap grad_mat(const Tensor& t) {
    return MatMap(ensure_grad(t.ptr()), t.rows(), t.cols());
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects rank-2 tensors");
    if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions disagree");
    Tensor c({a.rows(), b.cols()});
    c.mat_mut().noalias() = a.mat() * b.mat();
    detail::finish_op("matmul", {a, b}, c, [a, b, c]() {
        ConstMatMap gc(c.ptr()->grad.data(), c.rows(), c.cols());
        if (a.requires_grad()) detail::grad_mat(a).noalias() += gc * b.mat().transpose();
        if (b.requires_grad()) detail::grad_mat(b).noalias() += a.mat().transpose() * gc;
    });
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose expects a rank-2 tensor");
    Tensor c({a.cols(), a.rows()});
    c.mat_mut().noalias() = a.mat().transpose();
    detail::finish_op("transpose", {a}, c, [a, c]() {
        ConstMatMap gc(c.ptr()->grad.data(), c.rows(), c.cols());
        detail::grad_mat(a).noalias() += gc.transpose();
    });
    return c;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
        throw DimensionError("concat_cols: row counts disagree");
    Tensor c({a.rows(), a.cols() + b.cols()});
    c.mat_mut().leftCols(a.cols()) = a.mat();
    c.mat_mut().rightCols(b.cols()) = b.mat();
    detail::finish_op("concat_cols", {a, b}, c, [a, b, c]() {
        ConstMatMap gc(c.ptr()->grad.data(), c.rows(), c.cols());
        if (a.requires_grad()) detail::grad_mat(a) += gc.leftCols(a.cols());
        if (b.requires_grad()) detail::grad_mat(b) += gc.rightCols(b.cols());
    });
    return c;
}

namespace detail {

// add/mul support equal shapes plus scalar-vs-tensor broadcasting only.
enum class BroadcastKind { same, scalar_lhs, scalar_rhs };

inline BroadcastKind broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return BroadcastKind::same;
    if (a.is_scalar()) return BroadcastKind::scalar_lhs;
    if (b.is_scalar()) return BroadcastKind::scalar_rhs;
    throw DimensionError(std::string(op) + ": shapes incompatible (only scalar broadcasting supported)");
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    auto kind = detail::broadcast_kind(a, b, "add");
    const Tensor& big = (kind == detail::BroadcastKind::scalar_lhs) ? b : a;
    Tensor c(big.shape());
    const long n = c.numel();
    switch (kind) {
        case detail::BroadcastKind::same:
            for (long i = 0; i < n; ++i) c.set(i, a.at(i) + b.at(i));
            break;
        case detail::BroadcastKind::scalar_lhs:
            for (long i = 0; i < n; ++i) c.set(i, a.item() + b.at(i));
            break;
        case detail::BroadcastKind::scalar_rhs:
            for (long i = 0; i < n; ++i) c.set(i, a.at(i) + b.item());
            break;
    }
    detail::finish_op("add", {a, b}, c, [a, b, c]() {
        const auto& gc = c.ptr()->grad;
        auto pull = [&](const Tensor& t) {
            if (!t.requires_grad()) return;
            double* g = detail::ensure_grad(t.ptr());
            if (t.numel() == static_cast<long>(gc.size())) {
                for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i];
            } else {  // scalar input: gradient is the sum of upstream
                double s = 0;
                for (double v : gc) s += v;
                g[0] += s;
            }
        };
        pull(a);
        pull(b);
    });
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    auto kind = detail::broadcast_kind(a, b, "sub");
    const Tensor& big = (kind == detail::BroadcastKind::scalar_lhs) ? b : a;
    Tensor c(big.shape());
    const long n = c.numel();
    switch (kind) {
        case detail::BroadcastKind::same:
            for (long i = 0; i < n; ++i) c.set(i, a.at(i) - b.at(i));
            break;
        case detail::BroadcastKind::scalar_lhs:
            for (long i = 0; i < n; ++i) c.set(i, a.item() - b.at(i));
            break;
        case detail::BroadcastKind::scalar_rhs:
            for (long i = 0; i < n; ++i) c.set(i, a.at(i) - b.item());
            break;
    }
    detail::finish_op("sub", {a, b}, c, [a, b, c]() {
        const auto& gc = c.ptr()->grad;
        auto pull = [&](const Tensor& t, double sign) {
            if (!t.requires_grad()) return;
            double* g = detail::ensure_grad(t.ptr());
            if (t.numel() == static_cast<long>(gc.size())) {
                for (size_t i = 0; i < gc.size(); ++i) g[i] += sign * gc[i];
            } else {
                double s = 0;
                for (double v : gc) s += v;
                g[0] += sign * s;
            }
        };
        pull(a, 1.0);
        pull(b, -1.0);
    });
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    auto kind = detail::broadcast_kind(a, b, "mul");
    const Tensor& big = (kind == detail::BroadcastKind::scalar_lhs) ? b : a;
    Tensor c(big.shape());
    const long n = c.numel();
    switch (kind) {
        case detail::BroadcastKind::same:
            for (long i = 0; i < n; ++i) c.set(i, a.at(i) * b.at(i));
            break;
        case detail::BroadcastKind::scalar_lhs:
            for (long i = 0; i < n; ++i) c.set(i, a.item() * b.at(i));
            break;
        case detail::BroadcastKind::scalar_rhs:
            for (long i = 0; i < n; ++i) c.set(i, a.at(i) * b.item());
            break;
    }
    detail::finish_op("mul", {a, b}, c, [a, b, c]() {
        const auto& gc = c.ptr()->grad;
        auto pull = [&](const Tensor& t, const Tensor& other) {
            if (!t.requires_grad()) return;
            double* g = detail::ensure_grad(t.ptr());
            if (t.numel() == static_cast<long>(gc.size())) {
                if (other.is_scalar()) {
                    double o = other.item();
                    for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i] * o;
                } else {
                    for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i] * other.at(static_cast<long>(i));
                }
            } else {  // scalar input
                double s = 0;
                for (size_t i = 0; i < gc.size(); ++i) s += gc[i] * other.at(static_cast<long>(i));
                g[0] += s;
            }
        };
        pull(a, b);
        pull(b, a);
    });
    return c;
}

inline Tensor scale(const Tensor& a, double factor) {
    Tensor c(a.shape());
    for (long i = 0; i < a.numel(); ++i) c.set(i, a.at(i) * factor);
    detail::finish_op("scale", {a}, c, [a, c, factor]() {
        const auto& gc = c.ptr()->grad;
        double* g = detail::ensure_grad(a.ptr());
        for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i] * factor;
    });
    return c;
}

inline Tensor add_scalar(const Tensor& a, double shift) {
    Tensor c(a.shape());
    for (long i = 0; i < a.numel(); ++i) c.set(i, a.at(i) + shift);
    detail::finish_op("add_scalar", {a}, c, [a, c]() {
        const auto& gc = c.ptr()->grad;
        double* g = detail::ensure_grad(a.ptr());
        for (size_t i = 0; i < gc.size(); ++i) g[i] += gc[i];
    });
    return c;
}

inline Tensor relu(const Tensor& a) {
    Tensor c(a.shape());
    for (long i = 0; i < a.numel(); ++i) c.set(i, a.at(i) > 0 ? a.at(i) : 0.0);
    detail::finish_op("relu", {a}, c, [a, c]() {
        const auto& gc = c.ptr()->grad;
        double* g = detail::ensure_grad(a.ptr());
        for (size_t i = 0; i < gc.size(); ++i)
            if (a.at(static_cast<long>(i)) > 0) g[i] += gc[i];
    });
    return c;
}

inline Tensor leaky_relu(const Tensor& a, double slope = 0.1) {
    Tensor c(a.shape());
    for (long i = 0; i < a.numel(); ++i) {
        double x = a.at(i);
        c.set(i, x > 0 ? x : slope * x);
    }
    detail::finish_op("leaky_relu", {a}, c, [a, c, slope]() {
        const auto& gc = c.ptr()->grad;
        double* g = detail::ensure_grad(a.ptr());
        for (size_t i = 0; i < gc.size(); ++i)
            g[i] += gc[i] * (a.at(static_cast<long>(i)) > 0 ? 1.0 : slope);
    });
    return c;
}

inline Tensor tanh(const Tensor& a) {
    Tensor c(a.shape());
    for (long i = 0; i < a.numel(); ++i) c.set(i, std::tanh(a.at(i)));
    detail::finish_op("tanh", {a}, c, [a, c]() {
        const auto& gc = c.ptr()->grad;
        double* g = detail::ensure_grad(a.ptr());
        for (size_t i = 0; i < gc.size(); ++i) {
            double t = c.at(static_cast<long>(i));
            g[i] += gc[i] * (1.0 - t * t);
        }
    });
    return c;
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor c(a.shape());
    for (long i = 0; i < a.numel(); ++i) c.set(i, 1.0 / (1.0 + std::exp(-a.at(i))));
    detail::finish_op("sigmoid", {a}, c, [a, c]() {
        const auto& gc = c.ptr()->grad;
        double* g = detail::ensure_grad(a.ptr());
        for (size_t i = 0; i < gc.size(); ++i) {
            double s = c.at(static_cast<long>(i));
            g[i] += gc[i] * s * (1.0 - s);
        }
    });
    return c;
}

inline Tensor sum(const Tensor& a) {
    double s = 0;
    for (long i = 0; i < a.numel(); ++i) s += a.at(i);
    Tensor c = Tensor::scalar(s);
    detail::finish_op("sum", {a}, c, [a, c]() {
        double up = c.ptr()->grad[0];
        double* g = detail::ensure_grad(a.ptr());
        for (long i = 0; i < a.numel(); ++i) g[i] += up;
    });
    return c;
}

inline Tensor mean(const Tensor& a) {
    double s = 0;
    for (long i = 0; i < a.numel(); ++i) s += a.at(i);
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    Tensor c = Tensor::scalar(s * inv_n);
    detail::finish_op("mean", {a}, c, [a, c, inv_n]() {
        double up = c.ptr()->grad[0] * inv_n;
        double* g = detail::ensure_grad(a.ptr());
        for (long i = 0; i < a.numel(); ++i) g[i] += up;
    });
    return c;
}

// Sum of squared entries.
inline Tensor sq_l2(const Tensor& a) {
    double s = 0;
    for (long i = 0; i < a.numel(); ++i) s += a.at(i) * a.at(i);
    Tensor c = Tensor::scalar(s);
    detail::finish_op("sq_l2", {a}, c, [a, c]() {
        double up = c.ptr()->grad[0];
        double* g = detail::ensure_grad(a.ptr());
        for (long i = 0; i < a.numel(); ++i) g[i] += 2.0 * up * a.at(i);
    });
    return c;
}

// Per-row sum of a matrix: [m x n] -> [m x 1].
inline Tensor row_sum(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("row_sum expects a rank-2 tensor");
    Tensor c({a.rows(), 1});
    c.mat_mut().col(0) = a.mat().rowwise().sum();
    detail::finish_op("row_sum", {a}, c, [a, c]() {
        ConstMatMap gc(c.ptr()->grad.data(), c.rows(), 1);
        detail::grad_mat(a).colwise() += gc.col(0);
    });
    return c;
}

// Adds a length-n bias vector to every row of an [m x n] matrix.
inline Tensor add_rowwise(const Tensor& a, const Tensor& bias) {
    if (a.rank() != 2 || bias.rank() != 1 || bias.numel() != a.cols())
        throw DimensionError("add_rowwise: bias length must equal column count");
    Tensor c({a.rows(), a.cols()});
    c.mat_mut() = a.mat().rowwise() + ConstMatMap(bias.data().data(), 1, bias.numel()).row(0);
    detail::finish_op("add_rowwise", {a, bias}, c, [a, bias, c]() {
        ConstMatMap gc(c.ptr()->grad.data(), c.rows(), c.cols());
        if (a.requires_grad()) detail::grad_mat(a) += gc;
        if (bias.requires_grad()) {
            MatMap gb(detail::ensure_grad(bias.ptr()), 1, bias.numel());
            gb.row(0) += gc.colwise().sum();
        }
    });
    return c;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double f) { return scale(a, f); }
inline Tensor operator*(double f, const Tensor& a) { return scale(a, f); }

}  // namespace kgg
