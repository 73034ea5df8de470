#pragma once

// Dense 64-bit float tensors with reverse-mode automatic differentiation.
//
// Recording model: while a Graph is alive (and grad mode is on), every
// primitive that touches a grad-wanting tensor appends one node to the
// graph's tape. Nodes are appended in execution order, so the tape is
// already topologically sorted; backward() walks it once, in reverse.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sadi {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

/// Thrown when a computation produces or detects non-finite values.
class numerical_error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Flat double buffer. Unlike std::vector, sized construction leaves the
/// payload uninitialized: kernels overwrite every element anyway, and the
/// value-init pass dominated profiles.
class DBuf {
  public:
    DBuf() = default;
    explicit DBuf(std::size_t n) : p_(n ? new double[n] : nullptr), n_(n) {}
    DBuf(std::size_t n, double fill) : DBuf(n) { std::fill(begin(), end(), fill); }
    DBuf(std::initializer_list<double> xs) : DBuf(xs.size()) { std::copy(xs.begin(), xs.end(), begin()); }
    DBuf(const DBuf& o) : DBuf(o.n_) { std::copy(o.begin(), o.end(), begin()); }
    DBuf& operator=(const DBuf& o) {
        if (this != &o) {
            if (n_ != o.n_) {
                p_.reset(o.n_ ? new double[o.n_] : nullptr);
                n_ = o.n_;
            }
            std::copy(o.begin(), o.end(), begin());
        }
        return *this;
    }
    DBuf(DBuf&&) noexcept = default;
    DBuf& operator=(DBuf&&) noexcept = default;

    void assign(std::size_t n, double fill) {
        if (n_ != n) {
            p_.reset(n ? new double[n] : nullptr);
            n_ = n;
        }
        std::fill(begin(), end(), fill);
    }
    void clear() {
        p_.reset();
        n_ = 0;
    }
    bool empty() const { return n_ == 0; }
    std::size_t size() const { return n_; }
    double* data() { return p_.get(); }
    const double* data() const { return p_.get(); }
    double* begin() { return p_.get(); }
    double* end() { return p_.get() + n_; }
    const double* begin() const { return p_.get(); }
    const double* end() const { return p_.get() + n_; }
    double& operator[](std::size_t i) { return p_[i]; }
    double operator[](std::size_t i) const { return p_[i]; }
    friend bool operator==(const DBuf& a, const DBuf& b) {
        return a.n_ == b.n_ && std::equal(a.begin(), a.end(), b.begin());
    }

  private:
    std::unique_ptr<double[]> p_;
    std::size_t n_ = 0;
};

struct TensorData {
    Shape shape;
    DBuf v;  // row-major values
    DBuf g;  // gradient, empty until backward touches it
    bool requires_grad = false;
    int node = -1;  // id on the recording graph, -1 when unrecorded
};

class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : d_(std::make_shared<TensorData>()) {
        validate_shape(shape);
        d_->shape = std::move(shape);
        d_->v.assign(static_cast<std::size_t>(numel_of(d_->shape)), fill);
        d_->requires_grad = requires_grad;
    }

    /// Sized but uninitialized storage for kernels that overwrite everything.
    static Tensor uninitialized(Shape shape) {
        Tensor t;
        t.d_ = std::make_shared<TensorData>();
        validate_shape(shape);
        t.d_->shape = std::move(shape);
        t.d_->v = DBuf(static_cast<std::size_t>(numel_of(t.d_->shape)));
        return t;
    }

    static Tensor from(Shape shape, const std::vector<double>& values,
                       bool requires_grad = false) {
        Tensor t;
        t.d_ = std::make_shared<TensorData>();
        validate_shape(shape);
        if (static_cast<std::int64_t>(values.size()) != numel_of(shape)) {
            throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                        " values do not fill shape " + shape_str(shape));
        }
        t.d_->shape = std::move(shape);
        t.d_->v = DBuf(values.size());
        std::copy(values.begin(), values.end(), t.d_->v.begin());
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(d_->v.size()); }

    const DBuf& values() const { return d_->v; }
    DBuf& values() { return d_->v; }
    const double* data() const { return d_->v.data(); }
    double* data() { return d_->v.data(); }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }
    int node() const { return d_->node; }

    bool has_grad() const { return !d_->g.empty(); }
    const DBuf& grad() const {
        if (d_->g.empty()) throw std::logic_error("Tensor::grad: no gradient present");
        return d_->g;
    }
    /// Gradient buffer, zero-allocated on first use.
    DBuf& grad_buffer() {
        if (d_->g.empty()) d_->g.assign(d_->v.size(), 0.0);
        return d_->g;
    }
    void zero_grad() { d_->g.clear(); }

    double item() const {
        if (numel() != 1) {
            throw std::invalid_argument("Tensor::item: tensor of shape " + shape_str(shape()) +
                                        " is not a scalar");
        }
        return d_->v[0];
    }

    std::int64_t index(std::initializer_list<int> idx) const {
        if (static_cast<int>(idx.size()) != rank()) {
            throw std::invalid_argument("Tensor::index: rank mismatch");
        }
        std::int64_t flat = 0;
        int k = 0;
        for (int i : idx) {
            flat = flat * d_->shape[static_cast<std::size_t>(k)] + i;
            ++k;
        }
        return flat;
    }
    double at(std::initializer_list<int> idx) const { return d_->v[static_cast<std::size_t>(index(idx))]; }
    double& at(std::initializer_list<int> idx) { return d_->v[static_cast<std::size_t>(index(idx))]; }

    void fill(double x) { std::fill(d_->v.begin(), d_->v.end(), x); }

    /// Deep copy of values (grad and recording state are not copied).
    Tensor clone() const {
        Tensor t;
        t.d_ = std::make_shared<TensorData>();
        t.d_->shape = d_->shape;
        t.d_->v = d_->v;
        t.d_->requires_grad = d_->requires_grad;
        return t;
    }

    bool all_finite() const {
        for (double x : d_->v) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    const std::shared_ptr<TensorData>& rep() const { return d_; }

  private:
    static void validate_shape(const Shape& s) {
        if (s.empty()) throw std::invalid_argument("Tensor: shape must have rank >= 1");
        for (int e : s) {
            if (e <= 0) throw std::invalid_argument("Tensor: non-positive extent in shape " + shape_str(s));
        }
    }

    std::shared_ptr<TensorData> d_;
};

namespace detail {
inline int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
}
}  // namespace detail

/// Suppresses graph recording for its lifetime (evaluation / finite differences).
struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth(); }
    ~NoGradGuard() { --detail::no_grad_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Append-only tape of recorded primitive applications.
class Graph {
  public:
    struct Node {
        const char* op;
        std::vector<int> inputs;                // node ids of recorded inputs (-1 for leaves)
        std::shared_ptr<TensorData> out;
        std::function<void()> backward;         // accumulates out->g into the inputs' grads
    };

    Graph() { stack().push_back(this); }
    ~Graph() {
        for (auto& n : nodes_) n.out->node = -1;
        stack().pop_back();
    }
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    static Graph* active() {
        auto& s = stack();
        return s.empty() ? nullptr : s.back();
    }
    static bool recording() { return active() != nullptr && detail::no_grad_depth() == 0; }

    int add_node(const char* op, std::vector<int> inputs, const std::shared_ptr<TensorData>& out,
                 std::function<void()> backward) {
        const int id = static_cast<int>(nodes_.size());
        out->node = id;
        nodes_.push_back(Node{op, std::move(inputs), out, std::move(backward)});
        return id;
    }

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    /// Reverse pass from a recorded scalar. Each node runs at most once; nodes
    /// whose output never received a gradient are off the path and skipped.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) {
            throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                        shape_str(loss.shape()));
        }
        const int start = loss.node();
        if (start < 0 || start >= size()) {
            throw std::invalid_argument("backward: loss is not a recorded node of this graph");
        }
        loss.rep()->g.assign(1, 1.0);
        for (int id = start; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.out->g.empty()) n.backward();
        }
    }

    /// Id of the first node with a non-finite forward value, or -1.
    int first_nonfinite_node() const {
        for (int id = 0; id < size(); ++id) {
            for (double x : nodes_[static_cast<std::size_t>(id)].out->v) {
                if (!std::isfinite(x)) return id;
            }
        }
        return -1;
    }

  private:
    static std::vector<Graph*>& stack() {
        thread_local std::vector<Graph*> s;
        return s;
    }

    std::vector<Node> nodes_;
};

namespace detail {

inline bool wants_grad(const Tensor& t) { return t.requires_grad() || t.node() >= 0; }

inline bool takes_grad(const std::shared_ptr<TensorData>& d) {
    return d->requires_grad || d->node >= 0;
}

inline DBuf& grad_of(const std::shared_ptr<TensorData>& d) {
    if (d->g.empty()) d->g.assign(d->v.size(), 0.0);
    return d->g;
}

/// Records `out = op(ins...)` on the active graph when recording is on and at
/// least one input participates in differentiation.
inline void record(const char* op, std::initializer_list<Tensor> ins, Tensor& out,
                   std::function<void()> backward) {
    if (!Graph::recording()) return;
    bool any = false;
    for (const Tensor& t : ins) any = any || wants_grad(t);
    if (!any) return;
    std::vector<int> ids;
    ids.reserve(ins.size());
    for (const Tensor& t : ins) ids.push_back(t.node());
    Graph::active()->add_node(op, std::move(ids), out.rep(), std::move(backward));
}

}  // namespace detail

}  // namespace sadi
