#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "lwm/common.hpp"

namespace lwm {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    bool requires_grad = false; // leaf parameter flag
    bool needs_grad = false;    // true if a grad path reaches a leaf
    std::shared_ptr<std::vector<double>> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backfn;
    uint64_t id = 0;
};

} // namespace detail

// Dense row-major f64 tensor with a reverse-mode tape. Value-like handle;
// copies share storage. Ops never mutate their inputs.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);
    static Tensor rand_normal(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int64_t numel() const;
    int64_t dim(int i) const; // negative i counts from the back
    int64_t rank() const { return static_cast<int64_t>(shape().size()); }

    double* data();
    const double* data() const;
    double item() const; // scalar only

    bool requires_grad() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;
    std::vector<double>& grad_mut();
    void zero_grad();

    // true when every element is finite
    bool all_finite() const;
    void assert_finite(const std::string& what) const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n);

private:
    std::shared_ptr<detail::Node> node_;
};

// Disables tape recording in the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// ---- elementwise / linear algebra ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// rows of x get bias added over the last dimension
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// ---- shape / indexing ----
Tensor reshape(const Tensor& a, Shape new_shape); // metadata only; shares data
// out[i] = (map[i] >= 0) ? x[map[i]] : 0. Backward scatter-adds. The map is
// the single primitive behind fold/unfold, windows, shifts and up/downsampling.
Tensor permute_copy(const Tensor& x, const std::vector<int64_t>& map, Shape out_shape);
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows);
Tensor concat_rows(const std::vector<Tensor>& parts);

// ---- reductions / normalizations ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor softmax_lastdim(const Tensor& x);
// temperature-scaled variant used by samplers (tau > 0)
Tensor softmax_lastdim(const Tensor& x, double tau);
// mask: 1 = attention allowed. Disallowed entries get weight exactly 0.
Tensor masked_softmax_lastdim(const Tensor& x, const std::vector<uint8_t>& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// ---- losses ----
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets);
// mean over all elements of BCE(sigmoid(logits), targets); targets in {0,1}
Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets);

// ---- gradient plumbing ----
// forward: `values`; backward: identity into x. Shapes must match.
Tensor ste_values(const Tensor& x, const std::vector<double>& values);
Tensor round_ste(const Tensor& x);
Tensor detach(const Tensor& a);

// Populates grads of every reachable leaf, then clears the tape.
void backward(const Tensor& loss);

// ---- parameters ----
enum class Init { Zero, One, XavierUniform, Normal02 };

// Named parameter registry. Initialization is keyed by (store seed, name) so
// it does not depend on construction order.
class ParamStore {
public:
    explicit ParamStore(uint64_t seed) : seed_(seed) {}

    Tensor param(const std::string& name, Shape shape, Init init);
    Tensor* find(const std::string& name);
    const std::map<std::string, Tensor>& all() const { return params_; }
    std::vector<std::string> names() const;
    void zero_grad_all();
    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    std::map<std::string, Tensor> params_;
};

// AdamW with decoupled weight decay. State keyed by parameter name.
class AdamW {
public:
    AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
          double weight_decay = 0.0);
    void step(ParamStore& store);
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

private:
    struct State {
        std::vector<double> m, v;
    };
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    int64_t t_ = 0;
    std::map<std::string, State> state_;
};

} // namespace lwm
