#include "pcgen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pcgen {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

namespace {

void validate_shape(const Shape& shape) {
    for (auto d : shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

thread_local bool t_grad_enabled = true;

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    validate_shape(shape);
    auto n = static_cast<std::size_t>(shape_numel(shape));
    return from_data(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    validate_shape(shape);
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from_data({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
    if (!impl_) throw std::logic_error("use of undefined tensor");
    return impl_->shape;
}

std::int64_t Tensor::dim(int i) const {
    const auto& s = shape();
    int n = static_cast<int>(s.size());
    int k = i < 0 ? n + i : i;
    if (k < 0 || k >= n) {
        throw ShapeError("dimension index " + std::to_string(i) + " out of range for " + shape_str(s));
    }
    return s[static_cast<std::size_t>(k)];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const float> Tensor::data() const { return impl_->data; }

std::span<float> Tensor::mutable_data() { return impl_->data; }

const std::vector<float>& Tensor::vec() const { return impl_->data; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
    if (!is_leaf()) throw TapeError("requires_grad can only be changed on leaf tensors");
    impl_->requires_grad = value;
}

bool Tensor::is_leaf() const { return impl_ && impl_->tape_generation == 0; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const { return impl_->grad; }

std::span<float> Tensor::mutable_grad() { return detail::grad_buffer(*impl_); }

void Tensor::zero_grad() {
    if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

float Tensor::at(std::initializer_list<std::int64_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + shape_str(s));
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : index) {
        if (i < 0 || i >= s[k]) throw ShapeError("index out of range for " + shape_str(s));
        flat = flat * s[k] + i;
        ++k;
    }
    return impl_->data[static_cast<std::size_t>(flat)];
}

Tensor Tensor::detach() const { return from_data(shape(), impl_->data, false); }

// ---------------------------------------------------------------------------

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(std::string op, std::vector<std::shared_ptr<TensorImpl>> inputs,
                  const std::shared_ptr<TensorImpl>& output, BackwardFn backward) {
    // Recording after a backward pass starts a fresh graph; losses from the
    // consumed generation become stale.
    if (consumed_) reset();
    output->requires_grad = true;
    output->tape_generation = generation_;
    entries_.push_back(TapeEntry{std::move(op), std::move(inputs), output, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined()) throw TapeError("backward on undefined tensor");
    if (loss.numel() != 1) throw TapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw TapeError("loss does not depend on any tensor requiring grad");
    if (consumed_) throw TapeError("backward called twice on the same tape without reset");
    const auto& impl = loss.impl();
    if (impl->tape_generation != 0 && impl->tape_generation != generation_) {
        throw TapeError("stale tape: loss was recorded on a tape that has since been reset");
    }
    consumed_ = true;
    detail::grad_buffer(*impl)[0] += 1.0f;
    std::vector<float> scaled;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        const auto& out = *it->output;
        if (out.grad.empty()) continue;
        if (!corrupt_op_.empty() && it->op == corrupt_op_) {
            scaled = out.grad;
            for (auto& g : scaled) g *= corrupt_factor_;
            it->backward(scaled);
        } else {
            it->backward(out.grad);
        }
    }
}

void Tape::reset() {
    entries_.clear();
    entries_.shrink_to_fit();
    ++generation_;
    consumed_ = false;
}

void Tape::set_corruption(std::string op, float factor) {
    corrupt_op_ = std::move(op);
    corrupt_factor_ = factor;
}

void Tape::clear_corruption() {
    corrupt_op_.clear();
    corrupt_factor_ = 1.0f;
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

void reset_tape() { Tape::current().reset(); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace detail {

bool needs_grad(const std::vector<const Tensor*>& inputs) {
    if (!t_grad_enabled) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
    return needs_grad(std::vector<const Tensor*>(inputs));
}

std::vector<float>& grad_buffer(TensorImpl& impl) {
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0f);
    return impl.grad;
}

float* grad_of(const Tensor& t) {
    if (!t.defined() || !t.requires_grad()) return nullptr;
    return grad_buffer(*t.impl()).data();
}

void check_finite(std::string_view op, std::span<const float> values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NumericError(std::string(op) + ": non-finite output at flat index " + std::to_string(i));
        }
    }
}

Tensor make_result(std::string_view op, Shape shape, std::vector<float> data,
                   const std::vector<const Tensor*>& inputs, BackwardFn backward) {
    check_finite(op, data);
    Tensor out = Tensor::from_data(std::move(shape), std::move(data));
    if (needs_grad(inputs)) {
        std::vector<std::shared_ptr<TensorImpl>> in;
        for (const Tensor* t : inputs) {
            if (t && t->defined()) in.push_back(t->impl());
        }
        Tape::current().record(std::string(op), std::move(in), out.impl(), std::move(backward));
    }
    return out;
}

Tensor make_result(std::string_view op, Shape shape, std::vector<float> data,
                   std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
    return make_result(op, std::move(shape), std::move(data), std::vector<const Tensor*>(inputs),
                       std::move(backward));
}

}  // namespace detail

}  // namespace pcgen
