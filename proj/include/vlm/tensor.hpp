#pragma once

// Dense double-precision tensors with reverse-mode autodiff on a tape.
//
// A Tensor is a cheap handle over shared storage. Ops never mutate their
// inputs; every op validates that its output is finite and throws otherwise.
// Gradients are recorded onto the innermost active Graph (a Wengert tape:
// ops in execution order, backward replays them in reverse exactly once).

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vlm {

// Additive attention-bias sentinel for forbidden positions. Large enough
// that exp() underflows to exactly 0.0 in double, small enough to never
// produce NaN through the softmax path.
inline constexpr double kMaskBias = -1e9;

// Label value excluded from cross-entropy value and gradient.
inline constexpr std::int64_t kIgnoreIndex = -100;

class RandomSource;

namespace detail {
struct TensorImpl {
    std::vector<std::int64_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
};
}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::int64_t> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<std::int64_t> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // Gaussian init, mean 0. Draws numel values from rng in row-major order.
    static Tensor randn(std::vector<std::int64_t> shape, double stddev, RandomSource& rng,
                        bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<std::int64_t>& shape() const { return impl_->shape; }
    std::int64_t ndim() const { return static_cast<std::int64_t>(impl_->shape.size()); }
    std::int64_t dim(std::int64_t i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
    bool is_scalar() const { return impl_->shape.empty(); }

    std::span<const double> data() const { return impl_->data; }
    // Direct write access for leaves (init, optimizer updates). Not an op:
    // callers must not touch tensors that live on an active tape.
    std::span<double> raw_data() { return impl_->data; }

    double value() const;                          // scalar only
    double at(std::int64_t i) const;               // 1-d
    double at(std::int64_t i, std::int64_t j) const;  // 2-d

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const;
    std::span<double> grad_mut();
    void zero_grad();
    void accumulate_grad(std::span<const double> g);

    // Identity of the underlying storage; two handles compare equal iff
    // they share it.
    const void* id() const { return impl_.get(); }
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    detail::TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Deterministic random stream (splitmix64 core, Box-Muller normals).
// Self-contained so that seeded runs are reproducible independent of the
// standard library's distribution implementations.
class RandomSource {
public:
    explicit RandomSource(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    // Uniform in [0,1).
    double next_uniform();
    double next_normal();
    // Uniform integer in [0, n), n >= 1.
    std::uint64_t next_below(std::uint64_t n);
    // Derive an independent stream for a named purpose.
    RandomSource fork(std::uint64_t salt) const;

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Reverse-mode tape. Constructing a Graph makes it the recording target for
// ops executed in its scope; destruction restores the previous target.
class Graph {
public:
    Graph();
    ~Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, accumulating
    // into every requires_grad leaf. Throws if loss is not scalar or if
    // backward already ran on this tape without reset().
    void backward(const Tensor& loss);
    void reset();
    std::size_t size() const { return steps_.size(); }

    static Graph* current();
    static void record(std::function<void()> backward_fn);

private:
    std::vector<std::function<void()>> steps_;
    bool backward_done_ = false;
};

// ---- ops ----
// Output requires_grad is the OR of the inputs'. When a Graph is active and
// the output requires grad, a backward step is recorded.

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& a);                   // [m,n] -> [n,m]
Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor add_row_bias(const Tensor& a, const Tensor& bias);  // [m,n] + [n]
Tensor scale(const Tensor& a, double c);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::int64_t r0, std::int64_t r1);
Tensor slice_cols(const Tensor& a, std::int64_t c0, std::int64_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Gathers table rows by id; backward scatter-adds into the table.
Tensor embedding_rows(const Tensor& table, const std::vector<std::int64_t>& ids);
// Normalizes over the last axis to zero mean / unit variance, then applies
// the per-feature affine (gain, offset).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps = 1e-5);
// tanh approximation, fixed so golden values are platform-stable.
Tensor gelu(const Tensor& x);
// Row softmax of (x + bias). bias entries must be 0 or kMaskBias and must
// not require grad; a fully masked row is a hard error.
Tensor softmax_rows(const Tensor& x, const Tensor& bias);
// Mean negative log-softmax over rows whose label != ignore_index.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels,
                     std::int64_t ignore_index = kIgnoreIndex);

// Max over elements of |analytic - central_difference| / (|central| + atol).
// The analytic side comes from backward(); the central differences use only
// forward evaluations of f at perturbed copies of x.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5, double atol = 1e-6);

namespace testing {
// Deliberately corrupts the gelu backward pass so gradient checks must fail.
// Negative control for the verification tooling; never set in real runs.
void set_gelu_grad_fault(bool enabled);
}  // namespace testing

}  // namespace vlm
