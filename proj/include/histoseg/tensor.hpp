#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace histoseg {

using Shape = std::vector<int>;

[[noreturn]] inline void fail(const std::string& msg) { throw std::invalid_argument(msg); }

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    if (e <= 0) fail("tensor shape has non-positive extent " + shape_str(s));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

// Deterministic RNG. mt19937_64 plus hand-rolled uniform/normal mappings so
// streams are identical across platforms and standard library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) { return static_cast<int>(eng_() % static_cast<std::uint64_t>(n)); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    const double two_pi = 6.283185307179586476925287;
    double r = std::sqrt(-2.0 * std::log(u));
    double v = uniform();
    spare_ = r * std::sin(two_pi * v);
    have_spare_ = true;
    return r * std::cos(two_pi * v);
  }

  std::uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Fisher-Yates with our own index draws; std::shuffle's visitation order is
// not pinned by the standard.
template <typename Seq>
void shuffle(Seq& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)))]);
  }
}

inline int worker_threads() {
  if (const char* e = std::getenv("HISTOSEG_THREADS")) {
    int v = std::atoi(e);
    if (v >= 1) return v;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc ? static_cast<int>(hc) : 1;
}

// Runs fn(i) for i in [begin, end), split into contiguous chunks. Each index
// is computed independently and in a fixed per-index order, so the thread
// count never changes results.
template <typename Fn>
void parallel_for(std::int64_t begin, std::int64_t end, Fn&& fn) {
  std::int64_t count = end - begin;
  int nt = worker_threads();
  if (nt <= 1 || count < 2) {
    for (std::int64_t i = begin; i < end; ++i) fn(i);
    return;
  }
  nt = static_cast<int>(std::min<std::int64_t>(nt, count));
  std::int64_t chunk = (count + nt - 1) / nt;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(nt));
  for (int t = 0; t < nt; ++t) {
    std::int64_t lo = begin + chunk * t;
    std::int64_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

// Dense N-d tensor. Copies share the underlying data buffer and autograd
// state (clone() for a deep copy), so flipping requires_grad or allocating a
// grad buffer through any copy is visible through all of them. A tensor is
// immutable after it is produced by an op, except for its grad buffer;
// parameters are updated in place by the optimizer between steps.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape shape, T fill = T(0))
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), fill)) {}

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }
  static TensorT full(Shape shape, T v) { return TensorT(std::move(shape), v); }
  static TensorT scalar(T v) { return from({1}, {v}); }

  static TensorT from(Shape shape, std::vector<T> values) {
    TensorT t;
    t.shape_ = std::move(shape);
    if (shape_numel(t.shape_) != values.size()) {
      fail("tensor data length " + std::to_string(values.size()) + " does not match shape " +
           shape_str(t.shape_));
    }
    t.data_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static TensorT randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    TensorT t(std::move(shape));
    for (T& v : *t.data_) v = static_cast<T>(mean + stddev * rng.normal());
    return t;
  }

  static TensorT uniform(Shape shape, Rng& rng, double lo, double hi) {
    TensorT t(std::move(shape));
    for (T& v : *t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return data_ ? data_->size() : 0; }

  std::vector<T>& data() const {
    if (!data_) fail("tensor is undefined");
    return *data_;
  }
  T* ptr() { return data().data(); }
  const T* cptr() const { return data().data(); }

  T item() const {
    if (numel() != 1) fail("item() requires a scalar tensor, got shape " + shape_str(shape_));
    return (*data_)[0];
  }

  TensorT clone() const {
    TensorT t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(data());
    if (requires_grad()) t.set_requires_grad(true);
    return t;
  }

  bool requires_grad() const { return ag_->requires_grad; }

  // Allocates the grad buffer up front so every shared copy of this tensor
  // sees the same gradients.
  void set_requires_grad(bool on) {
    ag_->requires_grad = on;
    if (on && !ag_->grad) ag_->grad = std::make_shared<std::vector<T>>(numel(), T(0));
  }

  bool has_grad() const { return ag_->grad != nullptr; }
  std::vector<T>& grad() const {
    if (!ag_->grad) fail("tensor has no grad buffer");
    return *ag_->grad;
  }
  std::shared_ptr<std::vector<T>> grad_buffer() const { return ag_->grad; }
  void zero_grad() {
    if (ag_->grad) std::fill(ag_->grad->begin(), ag_->grad->end(), T(0));
  }

  int tape_id() const { return ag_->tape_id; }
  void set_tape_id(int id) { ag_->tape_id = id; }

 private:
  struct Autograd {
    bool requires_grad = false;
    std::shared_ptr<std::vector<T>> grad;
    int tape_id = -1;
  };

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<Autograd> ag_ = std::make_shared<Autograd>();
};

// Reverse-mode tape. Ops append one node each (inputs are recorded before the
// ops that consume them, so node order is topological); backward() replays
// the recorded rules in reverse from the loss node.
//
// Gradients of tensors produced on the tape are zeroed at the start of every
// backward() call; leaf gradients (parameters, inputs) accumulate across
// calls. The trainer zeroes parameter grads each step.
template <typename T>
class TapeT {
 public:
  int record(std::function<void()> backward_fn, std::shared_ptr<std::vector<T>> output_grad) {
    nodes_.push_back(Node{std::move(backward_fn), std::move(output_grad)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1) {
      fail("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad() || loss.tape_id() < 0 ||
        loss.tape_id() >= static_cast<int>(nodes_.size())) {
      fail("backward: loss tensor is not connected to this tape");
    }
    int start = loss.tape_id();
    for (int i = 0; i <= start; ++i) {
      auto& g = nodes_[static_cast<std::size_t>(i)].out_grad;
      if (g) std::fill(g->begin(), g->end(), T(0));
    }
    loss.grad()[0] = T(1);
    for (int i = start; i >= 0; --i) nodes_[static_cast<std::size_t>(i)].fn();
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  static TapeT*& current() {
    static thread_local TapeT* cur = nullptr;
    return cur;
  }

 private:
  struct Node {
    std::function<void()> fn;
    std::shared_ptr<std::vector<T>> out_grad;
  };
  std::vector<Node> nodes_;
};

// RAII activation of a tape for the current thread. Ops record onto the
// active tape; with no active tape they run forward-only.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(TapeT<T>& tape) : prev_(TapeT<T>::current()) { TapeT<T>::current() = &tape; }
  ~TapeScope() { TapeT<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  TapeT<T>* prev_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace histoseg
