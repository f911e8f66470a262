#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xmgc/error.hpp"
#include "xmgc/rng.hpp"

namespace xmgc {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Shared storage behind Tensor handles. Values are 32-bit floats in NCHW
/// order for image data. `grad` stays empty until backward touches it.
/// `scalar64` carries the unrounded value of reduction outputs so callers
/// that need full precision (gradcheck, loss logs) can bypass the f32 copy.
struct TensorData {
    Shape shape;
    std::vector<float> values;
    bool requires_grad = false;
    std::vector<float> grad;
    std::optional<double> scalar64;

    std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
    std::span<float> grad_buffer() {
        if (grad.empty()) grad.assign(values.size(), 0.0f);
        return grad;
    }
};

/// Value-semantics handle to shared tensor storage. Once a tensor has entered
/// a recorded computation its values are treated as immutable; only grad
/// accumulation during backward and optimizer updates between tapes write to
/// existing storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor gaussian(Shape shape, Rng& rng, double mean, double stddev,
                           bool requires_grad = false);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi,
                          bool requires_grad = false);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return data_->shape; }
    int rank() const { return static_cast<int>(data_->shape.size()); }
    int dim(int i) const { return data_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return data_->numel(); }

    std::span<const float> values() const { return data_->values; }
    /// Writable view of the storage. Reserved for leaf setup and optimizer
    /// updates between tapes.
    std::span<float> mutable_values() { return data_->values; }

    bool requires_grad() const { return data_->requires_grad; }
    void set_requires_grad(bool v) { data_->requires_grad = v; }

    bool has_grad() const { return !data_->grad.empty(); }
    std::span<const float> grad() const { return data_->grad; }
    void clear_grad() { data_->grad.clear(); }

    /// Value of a single-element tensor.
    float item() const;
    /// Full-precision value of a reduction output; falls back to item().
    double item64() const;

    /// Same storage, detached from gradient tracking.
    Tensor detached() const;
    /// Deep copy of values (fresh storage, no grad).
    Tensor clone() const;

    const std::shared_ptr<TensorData>& data() const { return data_; }

private:
    explicit Tensor(std::shared_ptr<TensorData> data) : data_(std::move(data)) {}
    std::shared_ptr<TensorData> data_;
    friend Tensor wrap(std::shared_ptr<TensorData>);
};

Tensor wrap(std::shared_ptr<TensorData> data);

/// Record of one training step's computation. Nodes are appended in
/// execution order, which is already a topological order, so one reverse
/// sweep visits every node exactly once.
class Tape {
public:
    struct Node {
        const char* op;
        std::vector<std::shared_ptr<TensorData>> inputs;
        std::shared_ptr<TensorData> output;
        std::function<void()> backward;
    };

    void record(Node node) { nodes_.push_back(std::move(node)); }
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    void clear() { nodes_.clear(); }

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse, accumulating
    /// into the grad buffer of every tensor that requires one. The tape is
    /// cleared afterwards.
    void backward(const Tensor& loss);

    /// Currently recording tape of this thread, or nullptr.
    static Tape* active();

    /// RAII activation of a tape on the current thread.
    class Scope {
    public:
        explicit Scope(Tape& tape);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* previous_;
    };

private:
    std::vector<Node> nodes_;
};

/// True when a tape is active and any of the inputs requires grad, i.e. the
/// op about to run must record a node.
bool recording(std::initializer_list<const Tensor*> inputs);

}  // namespace xmgc
