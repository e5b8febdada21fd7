#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mantis {

// Allocator that skips zero-filling on default construction. Tensor buffers
// are always fully written by the producing kernel; explicit zeroing goes
// through zeros()/assign.
template <class T>
struct uninit_alloc : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = uninit_alloc<U>;
  };
  template <class U>
  void construct(U* p) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <class S>
using Buffer = std::vector<S, uninit_alloc<S>>;

using Shape = std::vector<int>;

inline std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// Storage node shared by tensor handles. `grad_connected` marks values that
// depend on some requires_grad leaf through recorded operations.
template <class S>
struct TensorNode {
  Shape shape;
  Buffer<S> data;
  Buffer<S> grad;
  bool requires_grad = false;
  bool grad_connected = false;

  Buffer<S>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    return grad;
  }
};

template <class S>
class GradTape;

// Value-semantics handle over a shared storage node. Copies alias the same
// buffer; material copies go through clone().
template <class S>
class BasicTensor {
 public:
  using Node = TensorNode<S>;

  BasicTensor() = default;
  // Uninitialized storage: every element must be written before reading.
  explicit BasicTensor(Shape shape) : n_(std::make_shared<Node>()) {
    n_->shape = std::move(shape);
    n_->data.resize(numel_of(n_->shape));
  }
  BasicTensor(Shape shape, Buffer<S> data) : n_(std::make_shared<Node>()) {
    if (numel_of(shape) != data.size())
      throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                  " does not match buffer of " +
                                  std::to_string(data.size()) + " values");
    n_->shape = std::move(shape);
    n_->data = std::move(data);
  }
  BasicTensor(Shape shape, const std::vector<S>& data)
      : BasicTensor(std::move(shape), Buffer<S>(data.begin(), data.end())) {}
  BasicTensor(Shape shape, std::initializer_list<S> data)
      : BasicTensor(std::move(shape), Buffer<S>(data.begin(), data.end())) {}

  static BasicTensor scalar(S v) { return BasicTensor({1}, {v}); }
  static BasicTensor zeros(Shape shape) { return full(std::move(shape), S(0)); }
  static BasicTensor full(Shape shape, S v) {
    BasicTensor t(std::move(shape));
    for (auto& x : t.vec()) x = v;
    return t;
  }
  static BasicTensor ones(Shape shape) { return full(std::move(shape), S(1)); }
  static BasicTensor randn(Shape shape, std::mt19937& rng, S stddev = S(1)) {
    BasicTensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& x : t.vec()) x = static_cast<S>(dist(rng)) * stddev;
    return t;
  }
  static BasicTensor uniform(Shape shape, std::mt19937& rng, S lo, S hi) {
    BasicTensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& x : t.vec()) x = static_cast<S>(dist(rng));
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return n_->data.size(); }

  S* data() { return n_->data.data(); }
  const S* data() const { return n_->data.data(); }
  Buffer<S>& vec() { return n_->data; }
  const Buffer<S>& vec() const { return n_->data; }

  S item() const {
    if (numel() != 1)
      throw std::invalid_argument("item(): tensor has " +
                                  std::to_string(numel()) + " elements");
    return n_->data[0];
  }

  S& at(std::initializer_list<int> idx) {
    return n_->data[offset_of(idx)];
  }
  S at(std::initializer_list<int> idx) const {
    return n_->data[offset_of(idx)];
  }

  BasicTensor& set_requires_grad(bool v = true) {
    n_->requires_grad = v;
    n_->grad_connected = v;
    return *this;
  }
  bool requires_grad() const { return n_->requires_grad; }
  bool grad_connected() const { return n_ && n_->grad_connected; }

  const Buffer<S>& grad() const { return n_->grad; }
  Buffer<S>& ensure_grad() { return n_->ensure_grad(); }
  void zero_grad() { n_->grad.assign(n_->data.size(), S(0)); }

  BasicTensor clone() const {
    BasicTensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = n_->shape;
    t.n_->data = n_->data;
    return t;
  }

  std::shared_ptr<Node> node() const { return n_; }

 private:
  std::size_t offset_of(std::initializer_list<int> idx) const {
    assert(idx.size() == n_->shape.size());
    std::size_t off = 0;
    std::size_t k = 0;
    for (int i : idx) {
      off = off * static_cast<std::size_t>(n_->shape[k]) +
            static_cast<std::size_t>(i);
      ++k;
    }
    return off;
  }

  std::shared_ptr<Node> n_;
};

// Ordered record of executed operations. Entries are appended in execution
// order, which is a topological order by construction: an operation cannot
// run before its inputs exist.
template <class S>
class GradTape {
 public:
  struct Entry {
    const char* op;
    std::vector<std::shared_ptr<TensorNode<S>>> inputs;
    std::shared_ptr<TensorNode<S>> output;
    std::function<void()> backward;
  };

  void record(Entry e) { entries_.push_back(std::move(e)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Nodes whose
  // grad buffer was never touched contribute nothing, so parameters unused
  // by the loss keep exactly-zero gradients.
  void backward(const BasicTensor<S>& loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  shape_str(loss.shape()));
    loss.node()->ensure_grad()[0] += S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // nothing flowed here
      it->backward();
    }
  }

  static GradTape*& active() {
    thread_local GradTape* tape = nullptr;
    return tape;
  }

 private:
  std::vector<Entry> entries_;
};

// RAII activation of a tape on the current thread.
template <class S>
class TapeScope {
 public:
  explicit TapeScope(GradTape<S>& tape) : prev_(GradTape<S>::active()) {
    GradTape<S>::active() = &tape;
  }
  ~TapeScope() { GradTape<S>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<S>* prev_;
};

using Tensor = BasicTensor<float>;
using Tape = GradTape<float>;

}  // namespace mantis
