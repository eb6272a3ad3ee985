#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lesionfuse {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API precondition unrelated to shapes is violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::optional<std::size_t> node_id;
};

inline void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
}

}  // namespace detail

class Tape;

/// Dense row-major tensor of doubles. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<detail::TensorImpl>()) {
    detail::validate_shape(shape);
    impl_->data.assign(numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<detail::TensorImpl>()) {
    detail::validate_shape(shape);
    if (numel(shape) != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       to_string(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(double value) { return Tensor(Shape{1}, value); }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> data;
    std::size_t cols = rows.begin()->size();
    for (const auto& r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data));
  }
  static Tensor vector(std::vector<double> values) {
    auto n = values.size();
    return Tensor({n}, std::move(values));
  }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl().shape.at(axis); }
  std::size_t size() const { return impl().data.size(); }

  std::span<double> data() { return impl().data; }
  std::span<const double> data() const { return impl().data; }
  double& operator[](std::size_t i) { return impl().data[i]; }
  double operator[](std::size_t i) const { return impl().data[i]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return impl().data[0];
  }

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl().requires_grad = on;
    if (!on) impl().grad.clear();
    return *this;
  }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const double> grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return impl().grad;
  }
  std::span<double> mutable_grad() {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return impl().grad;
  }
  void zero_grad() { impl().grad.clear(); }

  std::optional<std::size_t> node_id() const { return impl().node_id; }

  Tensor clone() const {
    Tensor copy(shape(), impl().data);
    copy.impl_->requires_grad = impl().requires_grad;
    return copy;
  }

  /// Copy values from a same-shape tensor without touching autograd state.
  void assign(std::span<const double> values) {
    if (values.size() != size()) throw ShapeError("assign: length mismatch");
    std::copy(values.begin(), values.end(), impl().data.begin());
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& handle() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  detail::TensorImpl& impl() const {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Record-on-execute list of differentiable operations. One tape per thread.
class Tape {
 public:
  struct Node {
    const char* name;
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void(const std::vector<double>& out_grad, const std::vector<double>& out_value)> backward;
  };

  static Tape& current() {
    thread_local Tape tape;
    return tape;
  }

  static bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  std::size_t record(const char* name, std::shared_ptr<detail::TensorImpl> output,
                     std::function<void(const std::vector<double>&, const std::vector<double>&)> backward) {
    std::size_t id = nodes_.size();
    output->node_id = id;
    nodes_.push_back(Node{name, std::move(output), std::move(backward)});
    return id;
  }

  /// Seeds d(loss)/d(loss) = 1 and runs backward rules in reverse recording order, then
  /// releases the graph.
  void backward(Tensor& loss) {
    if (loss.size() != 1)
      throw ContractError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("backward() on a loss that does not require grad");
    auto id = loss.node_id();
    if (!id || *id >= nodes_.size() || nodes_[*id].output != loss.handle())
      throw ContractError("backward() on a loss that is not recorded on the current tape");
    auto& g = loss.handle()->grad;
    if (g.empty()) g.assign(1, 0.0);
    g[0] += 1.0;
    for (std::size_t i = *id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.output->grad.empty()) continue;
      node.backward(node.output->grad, node.output->data);
    }
    clear();
  }

  void clear() {
    for (auto& n : nodes_) n.output->node_id.reset();
    nodes_.clear();
  }

 private:
  std::vector<Node> nodes_;
};

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape::grad_mode()) { Tape::grad_mode() = false; }
  ~NoGradGuard() { Tape::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline void backward(Tensor& loss) { Tape::current().backward(loss); }
inline void backward(Tensor&& loss) { Tape::current().backward(loss); }

namespace detail {

inline std::vector<double>& grad_buffer(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

/// Builds the result of an op and, when any input needs a gradient, records its backward
/// rule on the current tape.
template <class Backward>
Tensor make_result(const char* name, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs, Backward&& rule) {
  Tensor out(std::move(shape), std::move(data));
  bool needs = false;
  if (Tape::grad_mode())
    for (const Tensor* in : inputs) needs = needs || in->requires_grad();
  if (needs) {
    out.set_requires_grad(true);
    Tape::current().record(name, out.handle(), std::forward<Backward>(rule));
  }
  return out;
}

inline bool wants_grad(const std::shared_ptr<TensorImpl>& t) { return t->requires_grad; }

}  // namespace detail

}  // namespace lesionfuse
