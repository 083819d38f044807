#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pcgen {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a forward op would produce a non-finite value.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    // Generation of the tape that produced this tensor; 0 for leaves.
    std::uint64_t tape_generation = 0;
};

/// Dense row-major float32 tensor with shared ownership.
///
/// Copies share storage. Values are treated as immutable once an op has
/// consumed them; only leaves (parameters) are mutated in place, and only
/// between tapes.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int ndim() const { return static_cast<int>(shape().size()); }
    /// Dimension size; negative indices count from the back.
    std::int64_t dim(int i) const;
    std::size_t numel() const;

    std::span<const float> data() const;
    std::span<float> mutable_data();
    const std::vector<float>& vec() const;

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool is_leaf() const;

    bool has_grad() const;
    std::span<const float> grad() const;
    std::span<float> mutable_grad();
    void zero_grad();

    float item() const;
    float at(std::initializer_list<std::int64_t> index) const;

    /// Deep copy of the values as a new leaf without gradient tracking.
    Tensor detach() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Reverse-mode tape

/// Backward closure: receives the gradient of the op output and accumulates
/// into its inputs.
using BackwardFn = std::function<void(std::span<const float> grad_out)>;

struct TapeEntry {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
};

/// Ordered record of executed differentiable ops for the calling thread.
///
/// backward() replays entries in exact reverse order. A tape may be consumed
/// once; reset() starts a new generation and releases the recorded graph.
class Tape {
public:
    static Tape& current();

    void record(std::string op, std::vector<std::shared_ptr<TensorImpl>> inputs,
                const std::shared_ptr<TensorImpl>& output, BackwardFn backward);
    void backward(const Tensor& loss);
    void reset();

    std::size_t size() const { return entries_.size(); }
    std::uint64_t generation() const { return generation_; }
    bool consumed() const { return consumed_; }
    const std::vector<TapeEntry>& entries() const { return entries_; }

    /// Test hook: scale the output gradient fed to every op named `op` during
    /// backward. Used to verify that gradient checks catch broken kernels.
    void set_corruption(std::string op, float factor);
    void clear_corruption();

private:
    std::vector<TapeEntry> entries_;
    std::uint64_t generation_ = 1;
    bool consumed_ = false;
    std::string corrupt_op_;
    float corrupt_factor_ = 1.0f;
};

void backward(const Tensor& loss);
void reset_tape();

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {

/// True when an op over these inputs must be recorded.
bool needs_grad(std::initializer_list<const Tensor*> inputs);
bool needs_grad(const std::vector<const Tensor*>& inputs);

/// Allocates (zeroed) the grad buffer on first use.
std::vector<float>& grad_buffer(TensorImpl& impl);
/// Grad buffer of `t` if it participates in backprop, else nullptr.
float* grad_of(const Tensor& t);

/// Throws NumericError naming `op` if any value is not finite.
void check_finite(std::string_view op, std::span<const float> values);

/// Builds an output tensor, checks finiteness and records it when needed.
Tensor make_result(std::string_view op, Shape shape, std::vector<float> data,
                   std::initializer_list<const Tensor*> inputs, BackwardFn backward);
Tensor make_result(std::string_view op, Shape shape, std::vector<float> data,
                   const std::vector<const Tensor*>& inputs, BackwardFn backward);

}  // namespace detail

}  // namespace pcgen
