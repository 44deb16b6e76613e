#include "lwm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace lwm {

namespace {

std::atomic<uint64_t> g_node_counter{1};
thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_node(Shape shape) {
    auto n = std::make_shared<detail::Node>();
    int64_t count = shape_numel(shape);
    n->shape = std::move(shape);
    n->data = std::make_shared<std::vector<double>>(count, 0.0);
    n->id = g_node_counter.fetch_add(1);
    return n;
}

void ensure_grad(detail::Node& n) {
    if (!n.grad) n.grad = std::make_shared<std::vector<double>>(n.data->size(), 0.0);
}

// Attaches tape edges when grad mode is on and some parent carries gradient.
void record(const std::shared_ptr<detail::Node>& out,
            std::vector<std::shared_ptr<detail::Node>> parents,
            std::function<void(detail::Node&)> backfn) {
    if (!g_grad_enabled) return;
    bool needs = false;
    for (const auto& p : parents)
        if (p->requires_grad || p->needs_grad) needs = true;
    if (!needs) return;
    out->needs_grad = true;
    out->parents = std::move(parents);
    out->backfn = std::move(backfn);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

} // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) {
        if (e <= 0) throw ShapeError("extent must be positive");
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// ---- Tensor basics ----

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = make_node(std::move(shape));
    n->requires_grad = requires_grad;
    n->needs_grad = requires_grad;
    return wrap(n);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data->begin(), t.node_->data->end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw ShapeError("from_data: " + shape_str(shape) + " != " + std::to_string(values.size()) + " values");
    auto n = make_node(std::move(shape));
    *n->data = std::move(values);
    n->requires_grad = requires_grad;
    n->needs_grad = requires_grad;
    return wrap(n);
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : *t.node_->data) v = rng.next_uniform(lo, hi);
    return t;
}

Tensor Tensor::rand_normal(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : *t.node_->data) v = stddev * rng.next_normal();
    return t;
}

const Shape& Tensor::shape() const {
    if (!node_) throw ContractError("undefined tensor");
    return node_->shape;
}

int64_t Tensor::numel() const { return static_cast<int64_t>(node_->data->size()); }

int64_t Tensor::dim(int i) const {
    const Shape& s = shape();
    int r = static_cast<int>(s.size());
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw IndexError("dim out of range");
    return s[i];
}

double* Tensor::data() { return node_->data->data(); }
const double* Tensor::data() const { return node_->data->data(); }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar " + shape_str(shape()));
    return (*node_->data)[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && node_->grad != nullptr; }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw ContractError("no gradient present");
    return *node_->grad;
}

std::vector<double>& Tensor::grad_mut() {
    ensure_grad(*node_);
    return *node_->grad;
}

void Tensor::zero_grad() {
    if (node_ && node_->grad) std::fill(node_->grad->begin(), node_->grad->end(), 0.0);
}

bool Tensor::all_finite() const {
    for (double v : *node_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::assert_finite(const std::string& what) const {
    if (!all_finite()) throw DomainError(what + ": non-finite value");
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- ops ----

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    record(out.node(), {a.node(), b.node()}, [](detail::Node& self) {
        const auto& g = *self.grad;
        for (auto& p : self.parents) {
            ensure_grad(*p);
            auto& pg = *p->grad;
            for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
        }
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    record(out.node(), {a.node(), b.node()}, [](detail::Node& self) {
        const auto& g = *self.grad;
        ensure_grad(*self.parents[0]);
        ensure_grad(*self.parents[1]);
        auto& ga = *self.parents[0]->grad;
        auto& gb = *self.parents[1]->grad;
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] -= g[i];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    record(out.node(), {a.node(), b.node()}, [](detail::Node& self) {
        const auto& g = *self.grad;
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        ensure_grad(pa);
        ensure_grad(pb);
        const auto& da = *pa.data;
        const auto& db = *pb.data;
        auto& ga = *pa.grad;
        auto& gb = *pb.grad;
        for (size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * db[i];
            gb[i] += g[i] * da[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
    record(out.node(), {a.node()}, [s](detail::Node& self) {
        ensure_grad(*self.parents[0]);
        auto& pg = *self.parents[0]->grad;
        const auto& g = *self.grad;
        for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * s;
    });
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + s;
    record(out.node(), {a.node()}, [](detail::Node& self) {
        ensure_grad(*self.parents[0]);
        auto& pg = *self.parents[0]->grad;
        const auto& g = *self.grad;
        for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    });
    return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor gelu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    int64_t n = a.numel();
    const double inv_sqrt2 = 0.70710678118654752440;
    for (int64_t i = 0; i < n; ++i) po[i] = 0.5 * pa[i] * (1.0 + std::erf(pa[i] * inv_sqrt2));
    record(out.node(), {a.node()}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        ensure_grad(p);
        const auto& x = *p.data;
        auto& pg = *p.grad;
        const auto& g = *self.grad;
        const double inv_sqrt2 = 0.70710678118654752440;
        const double inv_sqrt2pi = 0.39894228040143267794;
        for (size_t i = 0; i < g.size(); ++i) {
            double cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
            pg[i] += g[i] * (cdf + x[i] * pdf);
        }
    });
    return out;
}

Tensor sigmoid(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i)
        po[i] = pa[i] >= 0 ? 1.0 / (1.0 + std::exp(-pa[i]))
                           : std::exp(pa[i]) / (1.0 + std::exp(pa[i]));
    record(out.node(), {a.node()}, [out_data = out.node()->data](detail::Node& self) {
        auto& p = *self.parents[0];
        ensure_grad(p);
        auto& pg = *p.grad;
        const auto& g = *self.grad;
        const auto& y = *out_data;
        for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * y[i] * (1.0 - y[i]);
    });
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    int64_t c = x.dim(-1);
    if (bias.rank() != 1 || bias.dim(0) != c)
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " vs last dim " + std::to_string(c));
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    const double* pb = bias.data();
    double* po = out.data();
    int64_t rows = x.numel() / c;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j) po[r * c + j] = px[r * c + j] + pb[j];
    record(out.node(), {x.node(), bias.node()}, [c](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pb = *self.parents[1];
        ensure_grad(px);
        ensure_grad(pb);
        auto& gx = *px.grad;
        auto& gb = *pb.grad;
        const auto& g = *self.grad;
        int64_t rows = static_cast<int64_t>(g.size()) / c;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < c; ++j) {
                gx[r * c + j] += g[r * c + j];
                gb[j] += g[r * c + j];
            }
    });
    return out;
}

namespace {
// C += A(m x k) * B(k x n), ikj order for cache behavior
void matmul_acc(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        double* crow = C + i * n;
        for (int64_t p = 0; p < k; ++p) {
            double a = arow[p];
            if (a == 0.0) continue;
            const double* brow = B + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// C += A^T(m x k becomes k x m) * B(m x n)
void matmul_at_b(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        const double* brow = B + i * n;
        for (int64_t p = 0; p < k; ++p) {
            double a = arow[p];
            if (a == 0.0) continue;
            double* crow = C + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// C += A(m x k) * B^T(n x k becomes k x n)
void matmul_a_bt(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        double* crow = C + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* brow = B + j * k;
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}
} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 operands");
    int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out = Tensor::zeros({m, n});
    matmul_acc(a.data(), b.data(), out.data(), m, k, n);
    record(out.node(), {a.node(), b.node()}, [m, k, n](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        ensure_grad(pa);
        ensure_grad(pb);
        const double* g = self.grad->data();
        // dA += G * B^T ; dB += A^T * G
        matmul_a_bt(g, pb.data->data(), pa.grad->data(), m, n, k);
        matmul_at_b(pa.data->data(), g, pb.grad->data(), m, k, n);
    });
    return out;
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose2d expects rank-2");
    int64_t m = a.dim(0), n = a.dim(1);
    std::vector<int64_t> map(static_cast<size_t>(m * n));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) map[j * m + i] = i * n + j;
    return permute_copy(a, map, {n, m});
}

Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(new_shape);
    n->data = a.node()->data; // shared storage
    n->id = g_node_counter.fetch_add(1);
    Tensor out = Tensor::wrap(n);
    record(out.node(), {a.node()}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        ensure_grad(p);
        auto& pg = *p.grad;
        const auto& g = *self.grad;
        for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    });
    return out;
}

Tensor permute_copy(const Tensor& x, const std::vector<int64_t>& map, Shape out_shape) {
    if (shape_numel(out_shape) != static_cast<int64_t>(map.size()))
        throw ShapeError("permute_copy: map size != out shape");
    Tensor out = Tensor::zeros(std::move(out_shape));
    const double* px = x.data();
    double* po = out.data();
    int64_t n_in = x.numel();
    for (size_t i = 0; i < map.size(); ++i) {
        int64_t src = map[i];
        if (src >= n_in) throw IndexError("permute_copy: map entry out of range");
        po[i] = src < 0 ? 0.0 : px[src];
    }
    record(out.node(), {x.node()}, [map](detail::Node& self) {
        auto& p = *self.parents[0];
        ensure_grad(p);
        auto& pg = *p.grad;
        const auto& g = *self.grad;
        for (size_t i = 0; i < map.size(); ++i)
            if (map[i] >= 0) pg[map[i]] += g[i];
    });
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows) {
    if (x.rank() != 2) throw ShapeError("gather_rows expects rank-2");
    int64_t m = x.dim(0), c = x.dim(1);
    std::vector<int64_t> map(rows.size() * static_cast<size_t>(c));
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= m) throw IndexError("gather_rows: row out of range");
        for (int64_t j = 0; j < c; ++j) map[r * c + j] = rows[r] * c + j;
    }
    return permute_copy(x, map, {static_cast<int64_t>(rows.size()), c});
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty");
    int64_t c = parts[0].dim(-1);
    int64_t rows = 0;
    std::vector<std::shared_ptr<detail::Node>> parents;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != c) throw ShapeError("concat_rows: column mismatch");
        rows += p.dim(0);
        parents.push_back(p.node());
    }
    Tensor out = Tensor::zeros({rows, c});
    double* po = out.data();
    int64_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(po + off, p.data(), sizeof(double) * static_cast<size_t>(p.numel()));
        off += p.numel();
    }
    record(out.node(), std::move(parents), [](detail::Node& self) {
        const auto& g = *self.grad;
        size_t off = 0;
        for (auto& p : self.parents) {
            ensure_grad(*p);
            auto& pg = *p->grad;
            for (size_t i = 0; i < pg.size(); ++i) pg[i] += g[off + i];
            off += pg.size();
        }
    });
    return out;
}

Tensor sum_all(const Tensor& a) {
    Tensor out = Tensor::zeros({1});
    const double* pa = a.data();
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
    out.data()[0] = acc;
    record(out.node(), {a.node()}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        ensure_grad(p);
        auto& pg = *p.grad;
        double g = (*self.grad)[0];
        for (double& v : pg) v += g;
    });
    return out;
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor softmax_lastdim(const Tensor& x) { return softmax_lastdim(x, 1.0); }

Tensor softmax_lastdim(const Tensor& x, double tau) {
    if (tau <= 0.0) throw ContractError("softmax temperature must be positive");
    int64_t c = x.dim(-1);
    int64_t rows = x.numel() / c;
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * c;
        double m = row[0];
        for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double e = std::exp((row[j] - m) / tau);
            po[r * c + j] = e;
            z += e;
        }
        for (int64_t j = 0; j < c; ++j) po[r * c + j] /= z;
    }
    record(out.node(), {x.node()}, [c, tau, out_data = out.node()->data](detail::Node& self) {
        auto& p = *self.parents[0];
        ensure_grad(p);
        auto& pg = *p.grad;
        const auto& g = *self.grad;
        const auto& y = *out_data;
        int64_t rows = static_cast<int64_t>(g.size()) / c;
        for (int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int64_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
            for (int64_t j = 0; j < c; ++j)
                pg[r * c + j] += y[r * c + j] * (g[r * c + j] - dot) / tau;
        }
    });
    return out;
}

Tensor masked_softmax_lastdim(const Tensor& x, const std::vector<uint8_t>& mask) {
    int64_t c = x.dim(-1);
    int64_t rows = x.numel() / c;
    if (static_cast<int64_t>(mask.size()) != x.numel())
        throw ShapeError("masked_softmax: mask size mismatch");
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * c;
        const uint8_t* mrow = mask.data() + r * c;
        double m = 0.0;
        bool any = false;
        for (int64_t j = 0; j < c; ++j)
            if (mrow[j]) {
                m = any ? std::max(m, row[j]) : row[j];
                any = true;
            }
        if (!any) throw ContractError("masked_softmax: fully masked row");
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double e = mrow[j] ? std::exp(row[j] - m) : 0.0;
            po[r * c + j] = e;
            z += e;
        }
        for (int64_t j = 0; j < c; ++j) po[r * c + j] /= z;
    }
    record(out.node(), {x.node()}, [c, out_data = out.node()->data](detail::Node& self) {
        auto& p = *self.parents[0];
        ensure_grad(p);
        auto& pg = *p.grad;
        const auto& g = *self.grad;
        const auto& y = *out_data;
        int64_t rows = static_cast<int64_t>(g.size()) / c;
        for (int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int64_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
            // masked entries have y == 0, so they receive zero gradient
            for (int64_t j = 0; j < c; ++j) pg[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    int64_t c = x.dim(-1);
    if (gain.numel() != c || bias.numel() != c) throw ShapeError("layer_norm: gain/bias size");
    int64_t rows = x.numel() / c;
    Tensor out = Tensor::zeros(x.shape());
    auto stash = std::make_shared<std::vector<double>>(rows * 2); // mean, inv_std per row
    const double* px = x.data();
    const double* pgn = gain.data();
    const double* pbs = bias.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * c;
        double mean = 0.0;
        for (int64_t j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= c;
        double inv = 1.0 / std::sqrt(var + eps);
        (*stash)[2 * r] = mean;
        (*stash)[2 * r + 1] = inv;
        for (int64_t j = 0; j < c; ++j) po[r * c + j] = (row[j] - mean) * inv * pgn[j] + pbs[j];
    }
    record(out.node(), {x.node(), gain.node(), bias.node()}, [c, stash](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pgn = *self.parents[1];
        auto& pbs = *self.parents[2];
        ensure_grad(px);
        ensure_grad(pgn);
        ensure_grad(pbs);
        const auto& g = *self.grad;
        const auto& x = *px.data;
        const auto& gn = *pgn.data;
        auto& gx = *px.grad;
        auto& ggn = *pgn.grad;
        auto& gbs = *pbs.grad;
        int64_t rows = static_cast<int64_t>(g.size()) / c;
        for (int64_t r = 0; r < rows; ++r) {
            double mean = (*stash)[2 * r];
            double inv = (*stash)[2 * r + 1];
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (int64_t j = 0; j < c; ++j) {
                double xhat = (x[r * c + j] - mean) * inv;
                double gy = g[r * c + j] * gn[j];
                sum_gy += gy;
                sum_gy_xhat += gy * xhat;
                ggn[j] += g[r * c + j] * xhat;
                gbs[j] += g[r * c + j];
            }
            for (int64_t j = 0; j < c; ++j) {
                double xhat = (x[r * c + j] - mean) * inv;
                double gy = g[r * c + j] * gn[j];
                gx[r * c + j] += inv * (gy - sum_gy / c - xhat * sum_gy_xhat / c);
            }
        }
    });
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy expects rank-2 logits");
    int64_t n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != n) throw ShapeError("cross_entropy: target count");
    for (int64_t t : targets)
        if (t < 0 || t >= k) throw IndexError("cross_entropy: target out of range");
    Tensor out = Tensor::zeros({1});
    const double* px = logits.data();
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n * k));
    double loss = 0.0;
    for (int64_t r = 0; r < n; ++r) {
        const double* row = px + r * k;
        double m = row[0];
        for (int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
        double logz = m + std::log(z);
        loss += logz - row[targets[r]];
        for (int64_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(row[j] - logz);
    }
    out.data()[0] = loss / n;
    record(out.node(), {logits.node()}, [k, targets, probs](detail::Node& self) {
        auto& p = *self.parents[0];
        ensure_grad(p);
        auto& pg = *p.grad;
        double g = (*self.grad)[0];
        int64_t n = static_cast<int64_t>(targets.size());
        for (int64_t r = 0; r < n; ++r)
            for (int64_t j = 0; j < k; ++j) {
                double d = (*probs)[r * k + j] - (j == targets[r] ? 1.0 : 0.0);
                pg[r * k + j] += g * d / n;
            }
    });
    return out;
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
    if (static_cast<int64_t>(targets.size()) != logits.numel())
        throw ShapeError("bce_with_logits: target size");
    Tensor out = Tensor::zeros({1});
    const double* px = logits.data();
    int64_t n = logits.numel();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double x = px[i], t = targets[i];
        // max(x,0) - x*t + log(1+exp(-|x|))
        loss += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    out.data()[0] = loss / n;
    record(out.node(), {logits.node()}, [targets](detail::Node& self) {
        auto& p = *self.parents[0];
        ensure_grad(p);
        auto& pg = *p.grad;
        const auto& x = *p.data;
        double g = (*self.grad)[0];
        int64_t n = static_cast<int64_t>(targets.size());
        for (int64_t i = 0; i < n; ++i) {
            double s = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i]))
                                 : std::exp(x[i]) / (1.0 + std::exp(x[i]));
            pg[i] += g * (s - targets[i]) / n;
        }
    });
    return out;
}

Tensor ste_values(const Tensor& x, const std::vector<double>& values) {
    if (static_cast<int64_t>(values.size()) != x.numel()) throw ShapeError("ste_values: size");
    Tensor out = Tensor::zeros(x.shape());
    std::copy(values.begin(), values.end(), out.data());
    record(out.node(), {x.node()}, [](detail::Node& self) {
        auto& p = *self.parents[0];
        ensure_grad(p);
        auto& pg = *p.grad;
        const auto& g = *self.grad;
        for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    });
    return out;
}

Tensor round_ste(const Tensor& x) {
    std::vector<double> v(static_cast<size_t>(x.numel()));
    const double* px = x.data();
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::nearbyint(px[i]);
    return ste_values(x, v);
}

Tensor detach(const Tensor& a) {
    return Tensor::from_data(a.shape(), std::vector<double>(a.data(), a.data() + a.numel()));
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss");
    auto root = loss.node();
    // reachable set
    std::vector<std::shared_ptr<detail::Node>> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::shared_ptr<detail::Node>> stack{root};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents)
            if (seen.insert(p.get()).second) stack.push_back(p);
    }
    // creation ids give a topological order: parents precede children
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });
    ensure_grad(*root);
    (*root->grad)[0] = 1.0;
    for (auto& n : order) {
        if (n->backfn && n->grad) n->backfn(*n);
    }
    // clear the tape; leaf grads stay in place
    for (auto& n : order) {
        n->backfn = nullptr;
        n->parents.clear();
        if (!n->requires_grad) n->grad = nullptr;
    }
}

// ---- ParamStore / AdamW ----

Tensor ParamStore::param(const std::string& name, Shape shape, Init init) {
    auto it = params_.find(name);
    if (it != params_.end()) {
        if (it->second.shape() != shape)
            throw ShapeError("param '" + name + "' reuse with different shape");
        return it->second;
    }
    Rng rng(mix64(seed_, fnv1a64(name)));
    Tensor t;
    switch (init) {
    case Init::Zero:
        t = Tensor::zeros(shape, true);
        break;
    case Init::One:
        t = Tensor::full(shape, 1.0, true);
        break;
    case Init::XavierUniform: {
        int64_t fan_in = shape.size() >= 2 ? shape[shape.size() - 2] : shape.back();
        int64_t fan_out = shape.back();
        double b = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        t = Tensor::rand_uniform(shape, rng, -b, b, true);
        break;
    }
    case Init::Normal02:
        t = Tensor::rand_normal(shape, rng, 0.02, true);
        break;
    }
    params_.emplace(name, t);
    return t;
}

Tensor* ParamStore::find(const std::string& name) {
    auto it = params_.find(name);
    return it == params_.end() ? nullptr : &it->second;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& kv : params_) out.push_back(kv.first);
    return out;
}

void ParamStore::zero_grad_all() {
    for (auto& kv : params_) kv.second.zero_grad();
}

AdamW::AdamW(double lr, double beta1, double beta2, double eps, double weight_decay)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void AdamW::step(ParamStore& store) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& kv : const_cast<std::map<std::string, Tensor>&>(store.all())) {
        Tensor& p = kv.second;
        if (!p.has_grad()) continue;
        auto& st = state_[kv.first];
        size_t n = static_cast<size_t>(p.numel());
        if (st.m.size() != n) {
            st.m.assign(n, 0.0);
            st.v.assign(n, 0.0);
        }
        double* w = p.data();
        const auto& g = p.grad();
        for (size_t i = 0; i < n; ++i) {
            st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g[i];
            st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g[i] * g[i];
            double mh = st.m[i] / bc1;
            double vh = st.v[i] / bc2;
            w[i] -= lr_ * (mh / (std::sqrt(vh) + eps_) + weight_decay_ * w[i]);
        }
    }
}

} // namespace lwm
