#ifndef CYTRANS_TENSOR_HPP
#define CYTRANS_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace cytrans {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

struct TensorError : std::runtime_error {
    explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tape node. Each executed primitive appends one node holding the output
// buffer, parent references and a backward closure. Children own parents
// through shared_ptr, so the recorded graph is an acyclic tape that frees
// itself once the step's outputs go out of scope.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated lazily on first accumulation
    bool requires_grad = false;
    bool consumed      = false;
    uint64_t seq       = 0;
    const char* op     = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;  // owned by this node; raw self-access only

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

namespace detail {
inline uint64_t next_seq() {
    static thread_local uint64_t counter = 0;
    return ++counter;
}

template <typename T>
inline bool all_finite(const T* p, int64_t n) {
    // fabs(x) <= max is false for NaN and +-Inf; the loop vectorizes.
    const T lim = std::numeric_limits<T>::max();
    int64_t bad = 0;
    for (int64_t i = 0; i < n; ++i) bad += !(std::fabs(p[i]) <= lim);
    return bad == 0;
}
}  // namespace detail

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& s, bool requires_grad = false) {
        return Tensor(s, std::vector<T>(numel(s), T(0)), requires_grad);
    }
    static Tensor full(const Shape& s, T v, bool requires_grad = false) {
        return Tensor(s, std::vector<T>(numel(s), v), requires_grad);
    }
    static Tensor scalar(T v) { return full({1}, v); }
    static Tensor from(const Shape& s, std::vector<T> data, bool requires_grad = false) {
        if ((int64_t)data.size() != numel(s))
            throw TensorError("tensor data size does not match shape " + shape_str(s));
        return Tensor(s, std::move(data), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[i]; }
    int ndim() const { return (int)node_->shape.size(); }
    int64_t size() const { return (int64_t)node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }

    std::span<const T> value() const { return node_->value; }
    std::span<const T> grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }

    // Mutation is only legal on leaves (parameters, inputs); anything produced
    // by a primitive is immutable.
    std::span<T> leaf_data() {
        if (node_->backward_fn) throw TensorError("cannot mutate a non-leaf tensor");
        return node_->value;
    }
    std::span<T> grad_data() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

    T item() const {
        if (size() != 1) throw TensorError("item() on non-scalar tensor");
        return node_->value[0];
    }

    Tensor detach() const {
        Tensor out(node_->shape, node_->value, false);
        return out;
    }

    std::shared_ptr<Node<T>> node() const { return node_; }

    // Wrap an existing node (used by ops).
    explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

private:
    Tensor(const Shape& s, std::vector<T> data, bool requires_grad) {
        node_                = std::make_shared<Node<T>>();
        node_->shape         = s;
        node_->value         = std::move(data);
        node_->requires_grad = requires_grad;
        node_->seq           = detail::next_seq();
    }

    std::shared_ptr<Node<T>> node_;
};

// Creates the output node for a primitive, wiring parents and requires_grad.
template <typename T>
Tensor<T> make_op_output(const char* op, const Shape& s,
                         std::initializer_list<Tensor<T>> inputs) {
    auto n   = std::make_shared<Node<T>>();
    n->shape = s;
    n->value.assign(numel(s), T(0));
    n->op  = op;
    n->seq = detail::next_seq();
    for (const auto& in : inputs) {
        n->parents.push_back(in.node());
        n->requires_grad = n->requires_grad || in.requires_grad();
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
void check_finite(const Tensor<T>& t) {
    if (!detail::all_finite(t.value().data(), t.size()))
        throw TensorError(std::string("non-finite value produced by '") + t.op() + "'");
}

// Reverse-mode sweep from a scalar root. Nodes are replayed in descending
// tape order; each backward closure is released right after it runs, so the
// recorded graph is consumed as the sweep progresses.
template <typename T>
void backward(Tensor<T> root) {
    if (root.size() != 1) throw TensorError("backward requires a scalar output");
    auto rn = root.node();
    if (rn->consumed) throw TensorError("backward on an already-consumed tape");

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{rn.get()};
    seen.insert(rn.get());
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        if (n->requires_grad) order.push_back(n);
        for (auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

    rn->ensure_grad();
    rn->grad[0] = T(1);
    for (Node<T>* n : order) {
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn();
            n->backward_fn = nullptr;
            n->consumed    = true;
        }
    }
    rn->consumed = true;
}

}  // namespace cytrans

#endif
