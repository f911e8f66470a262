#include "xmgc/tensor.hpp"

#include <numeric>
#include <sstream>
#include <utility>

namespace xmgc {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
    }
}

}  // namespace

Tensor wrap(std::shared_ptr<TensorData> data) { return Tensor(std::move(data)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    validate_shape(shape);
    auto data = std::make_shared<TensorData>();
    data->values.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    data->shape = std::move(shape);
    data->requires_grad = requires_grad;
    return wrap(std::move(data));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not fill shape " + shape_str(shape));
    }
    auto data = std::make_shared<TensorData>();
    data->shape = std::move(shape);
    data->values = std::move(values);
    data->requires_grad = requires_grad;
    return wrap(std::move(data));
}

Tensor Tensor::gaussian(Shape shape, Rng& rng, double mean, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (float& v : t.mutable_values()) v = static_cast<float>(rng.normal(mean, stddev));
    return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (float& v : t.mutable_values()) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

float Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
    }
    return data_->values[0];
}

double Tensor::item64() const {
    if (data_->scalar64) return *data_->scalar64;
    return static_cast<double>(item());
}

Tensor Tensor::detached() const {
    auto data = std::make_shared<TensorData>();
    data->shape = data_->shape;
    data->values = data_->values;  // copy keeps the original graph-owned
    data->requires_grad = false;
    data->scalar64 = data_->scalar64;
    return wrap(std::move(data));
}

Tensor Tensor::clone() const { return detached(); }

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

Tape::Scope::~Scope() { g_active_tape = previous_; }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss");
    }
    if (nodes_.empty()) {
        throw ValueError("backward on an empty tape");
    }
    auto buf = loss.data()->grad_buffer();
    buf[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output && it->output->grad.empty()) continue;  // no incoming grad
        it->backward();
    }
    nodes_.clear();
}

bool recording(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

}  // namespace xmgc
