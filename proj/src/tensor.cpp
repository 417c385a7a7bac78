#include "vlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace vlm {

namespace {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor: extents must be positive");
        n *= d;
    }
    return n;
}

void check_finite(const std::vector<double>& data, const char* op) {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string(op) + ": non-finite value produced");
        }
    }
}

using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;

ImplPtr make_impl(std::vector<std::int64_t> shape, std::vector<double> data, bool requires_grad) {
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return impl;
}

// Accumulate g into the grad buffer of t (allocating on first use).
void accum(Impl& t, std::span<const double> g) {
    if (!t.requires_grad) return;
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
}

void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw std::invalid_argument(std::string(op) + ": expected a 2-d tensor");
}

thread_local std::vector<Graph*> g_graph_stack;

std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

bool g_gelu_grad_fault = false;

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(make_impl(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                            requires_grad));
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value, bool requires_grad) {
    if (!std::isfinite(value)) throw std::runtime_error("Tensor::full: non-finite fill value");
    const auto n = shape_numel(shape);
    return Tensor(make_impl(std::move(shape),
                            std::vector<double>(static_cast<std::size_t>(n), value), requires_grad));
}

Tensor Tensor::from_data(std::vector<std::int64_t> shape, std::vector<double> data,
                         bool requires_grad) {
    const auto n = shape_numel(shape);
    if (n != static_cast<std::int64_t>(data.size())) {
        throw std::invalid_argument("Tensor::from_data: shape/data size mismatch");
    }
    check_finite(data, "Tensor::from_data");
    return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    if (!std::isfinite(value)) throw std::runtime_error("Tensor::scalar: non-finite value");
    return Tensor(make_impl({}, {value}, requires_grad));
}

Tensor Tensor::randn(std::vector<std::int64_t> shape, double stddev, RandomSource& rng,
                     bool requires_grad) {
    const auto n = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = stddev * rng.next_normal();
    check_finite(data, "Tensor::randn");
    return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

double Tensor::value() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::value: not a scalar");
    return impl_->data[0];
}

double Tensor::at(std::int64_t i) const {
    if (ndim() != 1) throw std::invalid_argument("Tensor::at(i): not 1-d");
    return impl_->data[static_cast<std::size_t>(i)];
}

double Tensor::at(std::int64_t i, std::int64_t j) const {
    if (ndim() != 2) throw std::invalid_argument("Tensor::at(i,j): not 2-d");
    return impl_->data[static_cast<std::size_t>(i * dim(1) + j)];
}

std::span<const double> Tensor::grad() const {
    if (impl_->grad.empty()) throw std::runtime_error("Tensor::grad: no gradient present");
    return impl_->grad;
}

std::span<double> Tensor::grad_mut() {
    if (impl_->grad.empty()) throw std::runtime_error("Tensor::grad_mut: no gradient present");
    return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::accumulate_grad(std::span<const double> g) {
    if (static_cast<std::int64_t>(g.size()) != numel()) {
        throw std::invalid_argument("Tensor::accumulate_grad: size mismatch");
    }
    accum(*impl_, g);
}

// ---- RandomSource ----

std::uint64_t RandomSource::next_u64() { return splitmix64(state_); }

double RandomSource::next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RandomSource::next_normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 in (0,1].
    double u1 = 1.0 - next_uniform();
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t RandomSource::next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("RandomSource::next_below: n must be >= 1");
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = ~0ull - (~0ull % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
}

RandomSource RandomSource::fork(std::uint64_t salt) const {
    std::uint64_t s = state_;
    std::uint64_t mixed = splitmix64(s) ^ (salt * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
    return RandomSource(mixed);
}

// ---- Graph ----

Graph::Graph() { g_graph_stack.push_back(this); }

Graph::~Graph() {
    if (!g_graph_stack.empty() && g_graph_stack.back() == this) g_graph_stack.pop_back();
}

Graph* Graph::current() { return g_graph_stack.empty() ? nullptr : g_graph_stack.back(); }

void Graph::record(std::function<void()> backward_fn) {
    Graph* g = current();
    if (g) g->steps_.push_back(std::move(backward_fn));
}

void Graph::backward(const Tensor& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("Graph::backward: loss must be scalar");
    if (!loss.requires_grad()) {
        throw std::invalid_argument("Graph::backward: loss does not require grad");
    }
    if (backward_done_) {
        throw std::runtime_error("Graph::backward: called twice without reset()");
    }
    backward_done_ = true;
    const double seed = 1.0;
    accum(*loss.impl(), std::span<const double>(&seed, 1));
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void Graph::reset() {
    steps_.clear();
    backward_done_ = false;
}

// ---- ops ----

namespace {

bool out_requires(std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// grad span of out, valid only inside a backward step (backward seeds it).
std::span<const double> out_grad(const ImplPtr& out) {
    if (out->grad.empty()) {
        // Consumer never contributed gradient; treat as zero.
        out->grad.assign(out->data.size(), 0.0);
    }
    return out->grad;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) throw std::invalid_argument("matmul: inner dimensions do not match");

    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::int64_t i = 0; i < m; ++i) {
        double* ci = out.data() + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            const double* bp = bd + p * n;
            for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
    check_finite(out, "matmul");

    Tensor result = Tensor::from_data({m, n}, std::move(out), false);
    result.set_requires_grad(out_requires({&a, &b}));
    if (result.requires_grad() && Graph::current()) {
        auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr();
        Graph::record([ai, bi, oi, m, k, n]() {
            auto g = out_grad(oi);
            if (ai->requires_grad) {
                // dA = dC * B^T; rows of dC and rows of B are both contiguous.
                std::vector<double> da(static_cast<std::size_t>(m * k));
                for (std::int64_t i = 0; i < m; ++i) {
                    const double* gi = g.data() + i * n;
                    for (std::int64_t p = 0; p < k; ++p) {
                        const double* bp = bi->data.data() + p * n;
                        double acc = 0.0;
                        for (std::int64_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
                        da[static_cast<std::size_t>(i * k + p)] = acc;
                    }
                }
                accum(*ai, da);
            }
            if (bi->requires_grad) {
                // dB = A^T * dC
                std::vector<double> db(static_cast<std::size_t>(k * n), 0.0);
                for (std::int64_t i = 0; i < m; ++i) {
                    const double* gi = g.data() + i * n;
                    for (std::int64_t p = 0; p < k; ++p) {
                        const double av = ai->data[static_cast<std::size_t>(i * k + p)];
                        double* dbp = db.data() + p * n;
                        for (std::int64_t j = 0; j < n; ++j) dbp[j] += av * gi[j];
                    }
                }
                accum(*bi, db);
            }
        });
    }
    return result;
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            out[static_cast<std::size_t>(j * m + i)] = a.data()[static_cast<std::size_t>(i * n + j)];
        }
    }
    Tensor result = Tensor::from_data({n, m}, std::move(out), false);
    result.set_requires_grad(a.requires_grad());
    if (result.requires_grad() && Graph::current()) {
        auto ai = a.impl_ptr(), oi = result.impl_ptr();
        Graph::record([ai, oi, m, n]() {
            auto g = out_grad(oi);
            std::vector<double> da(static_cast<std::size_t>(m * n));
            for (std::int64_t j = 0; j < n; ++j) {
                for (std::int64_t i = 0; i < m; ++i) {
                    da[static_cast<std::size_t>(i * n + j)] = g[static_cast<std::size_t>(j * m + i)];
                }
            }
            accum(*ai, da);
        });
    }
    return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
    check_finite(out, "add");
    Tensor result = Tensor::from_data(a.shape(), std::move(out), false);
    result.set_requires_grad(out_requires({&a, &b}));
    if (result.requires_grad() && Graph::current()) {
        auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr();
        Graph::record([ai, bi, oi]() {
            auto g = out_grad(oi);
            accum(*ai, g);
            accum(*bi, g);
        });
    }
    return result;
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
    require_2d(a, "add_row_bias");
    if (bias.ndim() != 1 || bias.dim(0) != a.dim(1)) {
        throw std::invalid_argument("add_row_bias: bias must be 1-d of width a.cols");
    }
    const std::int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(i * n + j)] += bias.data()[static_cast<std::size_t>(j)];
    }
    check_finite(out, "add_row_bias");
    Tensor result = Tensor::from_data({m, n}, std::move(out), false);
    result.set_requires_grad(out_requires({&a, &bias}));
    if (result.requires_grad() && Graph::current()) {
        auto ai = a.impl_ptr(), bi = bias.impl_ptr(), oi = result.impl_ptr();
        Graph::record([ai, bi, oi, m, n]() {
            auto g = out_grad(oi);
            accum(*ai, g);
            if (bi->requires_grad) {
                std::vector<double> db(static_cast<std::size_t>(n), 0.0);
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t j = 0; j < n; ++j) db[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * n + j)];
                }
                accum(*bi, db);
            }
        });
    }
    return result;
}

Tensor scale(const Tensor& a, double c) {
    if (!std::isfinite(c)) throw std::runtime_error("scale: non-finite factor");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= c;
    check_finite(out, "scale");
    Tensor result = Tensor::from_data(a.shape(), std::move(out), false);
    result.set_requires_grad(a.requires_grad());
    if (result.requires_grad() && Graph::current()) {
        auto ai = a.impl_ptr(), oi = result.impl_ptr();
        Graph::record([ai, oi, c]() {
            auto g = out_grad(oi);
            std::vector<double> da(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] = c * g[i];
            accum(*ai, da);
        });
    }
    return result;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const std::int64_t n = parts.front().dim(1);
    std::int64_t rows = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require_2d(p, "concat_rows");
        if (p.dim(1) != n) throw std::invalid_argument("concat_rows: column mismatch");
        rows += p.dim(0);
        rg = rg || p.requires_grad();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(rows * n));
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    Tensor result = Tensor::from_data({rows, n}, std::move(out), false);
    result.set_requires_grad(rg);
    if (rg && Graph::current()) {
        std::vector<ImplPtr> impls;
        impls.reserve(parts.size());
        for (const Tensor& p : parts) impls.push_back(p.impl_ptr());
        auto oi = result.impl_ptr();
        Graph::record([impls, oi]() {
            auto g = out_grad(oi);
            std::size_t offset = 0;
            for (const auto& pi : impls) {
                accum(*pi, g.subspan(offset, pi->data.size()));
                offset += pi->data.size();
            }
        });
    }
    return result;
}

Tensor slice_rows(const Tensor& a, std::int64_t r0, std::int64_t r1) {
    require_2d(a, "slice_rows");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    if (r0 < 0 || r1 <= r0 || r1 > m) throw std::invalid_argument("slice_rows: bad range");
    std::vector<double> out(a.data().begin() + r0 * n, a.data().begin() + r1 * n);
    Tensor result = Tensor::from_data({r1 - r0, n}, std::move(out), false);
    result.set_requires_grad(a.requires_grad());
    if (result.requires_grad() && Graph::current()) {
        auto ai = a.impl_ptr(), oi = result.impl_ptr();
        Graph::record([ai, oi, r0, n, m]() {
            auto g = out_grad(oi);
            std::vector<double> da(static_cast<std::size_t>(m * n), 0.0);
            std::copy(g.begin(), g.end(), da.begin() + r0 * n);
            accum(*ai, da);
        });
    }
    return result;
}

Tensor slice_cols(const Tensor& a, std::int64_t c0, std::int64_t c1) {
    require_2d(a, "slice_cols");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    if (c0 < 0 || c1 <= c0 || c1 > n) throw std::invalid_argument("slice_cols: bad range");
    const std::int64_t w = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(m * w));
    for (std::int64_t i = 0; i < m; ++i) {
        std::copy(a.data().begin() + i * n + c0, a.data().begin() + i * n + c1,
                  out.begin() + i * w);
    }
    Tensor result = Tensor::from_data({m, w}, std::move(out), false);
    result.set_requires_grad(a.requires_grad());
    if (result.requires_grad() && Graph::current()) {
        auto ai = a.impl_ptr(), oi = result.impl_ptr();
        Graph::record([ai, oi, m, n, c0, w]() {
            auto g = out_grad(oi);
            std::vector<double> da(static_cast<std::size_t>(m * n), 0.0);
            for (std::int64_t i = 0; i < m; ++i) {
                std::copy(g.begin() + i * w, g.begin() + (i + 1) * w, da.begin() + i * n + c0);
            }
            accum(*ai, da);
        });
    }
    return result;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const std::int64_t m = parts.front().dim(0);
    std::int64_t cols = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require_2d(p, "concat_cols");
        if (p.dim(0) != m) throw std::invalid_argument("concat_cols: row mismatch");
        cols += p.dim(1);
        rg = rg || p.requires_grad();
    }
    std::vector<double> out(static_cast<std::size_t>(m * cols));
    std::int64_t offset = 0;
    for (const Tensor& p : parts) {
        const std::int64_t w = p.dim(1);
        for (std::int64_t i = 0; i < m; ++i) {
            std::copy(p.data().begin() + i * w, p.data().begin() + (i + 1) * w,
                      out.begin() + i * cols + offset);
        }
        offset += w;
    }
    Tensor result = Tensor::from_data({m, cols}, std::move(out), false);
    result.set_requires_grad(rg);
    if (rg && Graph::current()) {
        std::vector<ImplPtr> impls;
        for (const Tensor& p : parts) impls.push_back(p.impl_ptr());
        auto oi = result.impl_ptr();
        Graph::record([impls, oi, m, cols]() {
            auto g = out_grad(oi);
            std::int64_t off = 0;
            for (const auto& pi : impls) {
                const std::int64_t w = pi->shape[1];
                if (pi->requires_grad) {
                    std::vector<double> dp(static_cast<std::size_t>(m * w));
                    for (std::int64_t i = 0; i < m; ++i) {
                        std::copy(g.begin() + i * cols + off, g.begin() + i * cols + off + w,
                                  dp.begin() + i * w);
                    }
                    accum(*pi, dp);
                }
                off += w;
            }
        });
    }
    return result;
}

Tensor embedding_rows(const Tensor& table, const std::vector<std::int64_t>& ids) {
    require_2d(table, "embedding_rows");
    if (ids.empty()) throw std::invalid_argument("embedding_rows: empty id list");
    const std::int64_t v = table.dim(0), d = table.dim(1);
    for (std::int64_t id : ids) {
        if (id < 0 || id >= v) throw std::invalid_argument("embedding_rows: id out of range");
    }
    const std::int64_t t = static_cast<std::int64_t>(ids.size());
    std::vector<double> out(static_cast<std::size_t>(t * d));
    for (std::int64_t i = 0; i < t; ++i) {
        std::copy(table.data().begin() + ids[static_cast<std::size_t>(i)] * d,
                  table.data().begin() + (ids[static_cast<std::size_t>(i)] + 1) * d,
                  out.begin() + i * d);
    }
    Tensor result = Tensor::from_data({t, d}, std::move(out), false);
    result.set_requires_grad(table.requires_grad());
    if (result.requires_grad() && Graph::current()) {
        auto ti = table.impl_ptr(), oi = result.impl_ptr();
        Graph::record([ti, oi, ids, d]() {
            auto g = out_grad(oi);
            std::vector<double> dt(ti->data.size(), 0.0);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                for (std::int64_t j = 0; j < d; ++j) {
                    dt[static_cast<std::size_t>(ids[i] * d + j)] += g[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
                }
            }
            accum(*ti, dt);
        });
    }
    return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps) {
    require_2d(x, "layer_norm");
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
    const std::int64_t m = x.dim(0), d = x.dim(1);
    if (gain.ndim() != 1 || gain.dim(0) != d || offset.ndim() != 1 || offset.dim(0) != d) {
        throw std::invalid_argument("layer_norm: gain/offset must be 1-d of width d");
    }

    std::vector<double> out(static_cast<std::size_t>(m * d));
    std::vector<double> xhat(static_cast<std::size_t>(m * d));
    std::vector<double> inv_std(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* row = x.data().data() + i * d;
        double mean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = istd;
        for (std::int64_t j = 0; j < d; ++j) {
            const double xh = (row[j] - mean) * istd;
            xhat[static_cast<std::size_t>(i * d + j)] = xh;
            out[static_cast<std::size_t>(i * d + j)] =
                gain.data()[static_cast<std::size_t>(j)] * xh + offset.data()[static_cast<std::size_t>(j)];
        }
    }
    check_finite(out, "layer_norm");

    Tensor result = Tensor::from_data({m, d}, std::move(out), false);
    result.set_requires_grad(out_requires({&x, &gain, &offset}));
    if (result.requires_grad() && Graph::current()) {
        auto xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = offset.impl_ptr(), oi = result.impl_ptr();
        Graph::record([xi, gi, bi, oi, m, d, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
            auto g = out_grad(oi);
            if (bi->requires_grad) {
                std::vector<double> db(static_cast<std::size_t>(d), 0.0);
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t j = 0; j < d; ++j) db[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * d + j)];
                }
                accum(*bi, db);
            }
            if (gi->requires_grad) {
                std::vector<double> dg(static_cast<std::size_t>(d), 0.0);
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t j = 0; j < d; ++j) {
                        dg[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * d + j)] * xhat[static_cast<std::size_t>(i * d + j)];
                    }
                }
                accum(*gi, dg);
            }
            if (xi->requires_grad) {
                std::vector<double> dx(static_cast<std::size_t>(m * d));
                for (std::int64_t i = 0; i < m; ++i) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::int64_t j = 0; j < d; ++j) {
                        const double dxh = g[static_cast<std::size_t>(i * d + j)] * gi->data[static_cast<std::size_t>(j)];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[static_cast<std::size_t>(i * d + j)];
                    }
                    mean_dxhat /= static_cast<double>(d);
                    mean_dxhat_xhat /= static_cast<double>(d);
                    const double istd = inv_std[static_cast<std::size_t>(i)];
                    for (std::int64_t j = 0; j < d; ++j) {
                        const double dxh = g[static_cast<std::size_t>(i * d + j)] * gi->data[static_cast<std::size_t>(j)];
                        dx[static_cast<std::size_t>(i * d + j)] =
                            istd * (dxh - mean_dxhat - xhat[static_cast<std::size_t>(i * d + j)] * mean_dxhat_xhat);
                    }
                }
                accum(*xi, dx);
            }
        });
    }
    return result;
}

Tensor gelu(const Tensor& x) {
    const std::size_t n = static_cast<std::size_t>(x.numel());
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        const double u = kGeluC * (v + kGeluA * v * v * v);
        out[i] = 0.5 * v * (1.0 + std::tanh(u));
    }
    check_finite(out, "gelu");
    Tensor result = Tensor::from_data(x.shape(), std::move(out), false);
    result.set_requires_grad(x.requires_grad());
    if (result.requires_grad() && Graph::current()) {
        auto xi = x.impl_ptr(), oi = result.impl_ptr();
        Graph::record([xi, oi]() {
            auto g = out_grad(oi);
            std::vector<double> dx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double v = xi->data[i];
                const double u = kGeluC * (v + kGeluA * v * v * v);
                const double t = std::tanh(u);
                const double sech2 = 1.0 - t * t;
                double slope =
                    0.5 * (1.0 + t) + 0.5 * v * sech2 * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
                if (g_gelu_grad_fault) slope *= 1.01;
                dx[i] = slope * g[i];
            }
            accum(*xi, dx);
        });
    }
    return result;
}

Tensor softmax_rows(const Tensor& x, const Tensor& bias) {
    require_2d(x, "softmax_rows");
    if (x.shape() != bias.shape()) throw std::invalid_argument("softmax_rows: bias shape mismatch");
    if (bias.requires_grad()) {
        throw std::invalid_argument("softmax_rows: bias must not require grad");
    }
    const std::int64_t m = x.dim(0), n = x.dim(1);
    std::vector<double> probs(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* xr = x.data().data() + i * n;
        const double* br = bias.data().data() + i * n;
        bool any_open = false;
        for (std::int64_t j = 0; j < n; ++j) {
            if (br[j] > kMaskBias * 0.5) {
                any_open = true;
                break;
            }
        }
        if (!any_open) throw std::runtime_error("softmax_rows: fully masked row");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < n; ++j) mx = std::max(mx, xr[j] + br[j]);
        double sum = 0.0;
        double* pr = probs.data() + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            pr[j] = std::exp(xr[j] + br[j] - mx);
            sum += pr[j];
        }
        for (std::int64_t j = 0; j < n; ++j) pr[j] /= sum;
    }
    check_finite(probs, "softmax_rows");
    Tensor result = Tensor::from_data({m, n}, std::move(probs), false);
    result.set_requires_grad(x.requires_grad());
    if (result.requires_grad() && Graph::current()) {
        auto xi = x.impl_ptr(), oi = result.impl_ptr();
        Graph::record([xi, oi, m, n]() {
            auto g = out_grad(oi);
            std::vector<double> dx(static_cast<std::size_t>(m * n));
            for (std::int64_t i = 0; i < m; ++i) {
                const double* pr = oi->data.data() + i * n;
                const double* gr = g.data() + i * n;
                double dot = 0.0;
                for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * pr[j];
                for (std::int64_t j = 0; j < n; ++j) {
                    dx[static_cast<std::size_t>(i * n + j)] = pr[j] * (gr[j] - dot);
                }
            }
            accum(*xi, dx);
        });
    }
    return result;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels,
                     std::int64_t ignore_index) {
    require_2d(logits, "cross_entropy");
    const std::int64_t m = logits.dim(0), n = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != m) {
        throw std::invalid_argument("cross_entropy: labels size must match rows");
    }
    std::int64_t used = 0;
    for (std::int64_t lab : labels) {
        if (lab == ignore_index) continue;
        if (lab < 0 || lab >= n) throw std::invalid_argument("cross_entropy: label out of range");
        ++used;
    }
    if (used == 0) throw std::runtime_error("cross_entropy: all rows ignored");

    double total = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
        if (labels[static_cast<std::size_t>(i)] == ignore_index) continue;
        const double* row = logits.data().data() + i * n;
        double mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        const double lse = mx + std::log(sum);
        total += lse - row[labels[static_cast<std::size_t>(i)]];
    }
    const double loss = total / static_cast<double>(used);
    if (!std::isfinite(loss)) throw std::runtime_error("cross_entropy: non-finite loss");

    Tensor result = Tensor::scalar(loss, false);
    result.set_requires_grad(logits.requires_grad());
    if (result.requires_grad() && Graph::current()) {
        auto li = logits.impl_ptr(), oi = result.impl_ptr();
        Graph::record([li, oi, labels, ignore_index, m, n, used]() {
            const double gout = out_grad(oi)[0];
            std::vector<double> dl(static_cast<std::size_t>(m * n), 0.0);
            const double inv = gout / static_cast<double>(used);
            for (std::int64_t i = 0; i < m; ++i) {
                const std::int64_t lab = labels[static_cast<std::size_t>(i)];
                if (lab == ignore_index) continue;
                const double* row = li->data.data() + i * n;
                double mx = row[0];
                for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
                double sum = 0.0;
                for (std::int64_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
                for (std::int64_t j = 0; j < n; ++j) {
                    const double p = std::exp(row[j] - mx) / sum;
                    dl[static_cast<std::size_t>(i * n + j)] = (p - (j == lab ? 1.0 : 0.0)) * inv;
                }
            }
            accum(*li, dl);
        });
    }
    return result;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h, double atol) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be > 0");

    // Analytic gradient at x.
    Tensor probe = Tensor::from_data(x.shape(), {x.data().begin(), x.data().end()}, true);
    {
        Graph g;
        Tensor loss = f(probe);
        g.backward(loss);
    }
    if (!probe.has_grad()) {
        throw std::runtime_error("finite_diff_check: f does not depend on x");
    }
    std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

    // Central differences, forward evaluations only.
    std::vector<double> work(x.data().begin(), x.data().end());
    double worst = 0.0;
    for (std::size_t i = 0; i < work.size(); ++i) {
        const double orig = work[i];
        work[i] = orig + h;
        const double fp = f(Tensor::from_data(x.shape(), work, false)).value();
        work[i] = orig - h;
        const double fm = f(Tensor::from_data(x.shape(), work, false)).value();
        work[i] = orig;
        const double central = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - central) / (std::abs(central) + atol);
        worst = std::max(worst, err);
    }
    return worst;
}

namespace testing {
void set_gelu_grad_fault(bool enabled) { g_gelu_grad_fault = enabled; }
}  // namespace testing

}  // namespace vlm
