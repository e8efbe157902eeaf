#pragma once

#include <cstdint>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace tsubf {

// Error taxonomy: shape/dimension mismatches, bad configuration, caller
// misuse, and file problems map to distinct exception types so the CLI can
// pick exit codes without string matching.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline std::vector<long long> row_major_strides(const Shape& s) {
  std::vector<long long> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

template <class T>
class Tape;

// Dense row-major tensor. Copies share the underlying buffer; ops always
// allocate fresh outputs, so shared buffers are never written through except
// by explicit in-place parameter updates during training.
template <class T>
class Tensor {
 public:
  Tensor() : shape_{0}, data_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(check_numel(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (numel(shape_) != static_cast<long long>(values.size()))
      throw ShapeError("tensor init: " + shape_str(shape_) + " needs " +
                       std::to_string(numel(shape_)) + " values, got " +
                       std::to_string(values.size()));
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  long long size() const { return static_cast<long long>(data_->size()); }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  std::vector<T>& vec() { return *data_; }
  const std::vector<T>& vec() const { return *data_; }

  T item() const {
    if (size() != 1)
      throw UsageError("item(): tensor " + shape_str(shape_) + " is not scalar");
    return (*data_)[0];
  }

  // Deep, untracked copy.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  // A tensor watched by a tape reverts to untracked once that tape is
  // destroyed, so long-lived values (e.g. model parameters) never leave a
  // dangling record target behind.
  bool tracked() const { return id_ >= 0 && !tape_alive_.expired(); }
  std::int64_t id() const { return id_; }
  Tape<T>* tape() const { return tracked() ? tape_ : nullptr; }

 private:
  friend class Tape<T>;

  static size_t check_numel(const Shape& s) {
    for (int d : s)
      if (d < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    return static_cast<size_t>(numel(s));
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::int64_t id_ = -1;
  Tape<T>* tape_ = nullptr;
  std::weak_ptr<const bool> tape_alive_;
};

// Reverse-mode record. One logical thread records ops and runs backward;
// gradient buffers are keyed by the ids watch() hands out.
template <class T>
class Tape {
 public:
  using Pull = std::function<void(Tape&, const Tensor<T>& gout)>;

  // Registers t as a tracked value on this tape (leaf or op output).
  void watch(Tensor<T>& t) {
    t.tape_ = this;
    t.tape_alive_ = alive_;
    t.id_ = next_id_++;
  }

  void record(const char* op, std::vector<std::int64_t> inputs, Tensor<T>& out,
              Pull pull) {
    watch(out);
    nodes_.push_back(Node{op, std::move(inputs), out.id_, out, std::move(pull)});
  }

  void backward(const Tensor<T>& loss) {
    if (loss.size() != 1)
      throw UsageError("backward: loss must be scalar, got " +
                       shape_str(loss.shape()));
    if (!loss.tracked() || loss.tape() != this)
      throw UsageError("backward: loss is not tracked on this tape");
    grad_.clear();
    grad_.emplace(loss.id(), Tensor<T>::full(loss.shape(), T(1)));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto g = grad_.find(it->output);
      if (g == grad_.end()) continue;
      it->pull(*this, g->second);
    }
  }

  bool has_grad(const Tensor<T>& t) const {
    return t.tracked() && grad_.count(t.id()) > 0;
  }

  const Tensor<T>& grad(const Tensor<T>& t) const {
    auto it = t.tracked() ? grad_.find(t.id()) : grad_.end();
    if (it == grad_.end())
      throw UsageError("grad(): no gradient recorded for this tensor");
    if (it->second.shape() != t.shape())
      throw ShapeError("grad(): gradient shape " +
                       shape_str(it->second.shape()) + " != value shape " +
                       shape_str(t.shape()));
    return it->second;
  }

  Tensor<T> grad_or_zero(const Tensor<T>& t) const {
    if (has_grad(t)) return grad(t);
    return Tensor<T>(t.shape());
  }

  // Accumulates g into the buffer for id; ignores untracked ids.
  void add_grad(std::int64_t id, const Tensor<T>& g) {
    if (id < 0) return;
    auto it = grad_.find(id);
    if (it == grad_.end()) {
      grad_.emplace(id, g.clone());
      return;
    }
    T* a = it->second.data();
    const T* b = g.data();
    const long long n = g.size();
    for (long long i = 0; i < n; ++i) a[i] += b[i];
  }

  // Name of the op that produced the first non-finite value, or "" if all
  // recorded outputs are finite. Used for NaN-abort diagnostics.
  std::string first_non_finite_op() const {
    for (const auto& n : nodes_) {
      const T* p = n.out_value.data();
      for (long long i = 0; i < n.out_value.size(); ++i)
        if (!std::isfinite(static_cast<double>(p[i]))) return n.op;
    }
    return "";
  }

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op;
    std::vector<std::int64_t> inputs;
    std::int64_t output;
    Tensor<T> out_value;
    Pull pull;
  };

  std::vector<Node> nodes_;
  std::unordered_map<std::int64_t, Tensor<T>> grad_;
  std::int64_t next_id_ = 0;
  std::shared_ptr<const bool> alive_ = std::make_shared<const bool>(true);
};

template <class T>
Tape<T>* tape_of(std::initializer_list<const Tensor<T>*> ts) {
  for (const Tensor<T>* t : ts)
    if (t->tracked()) return t->tape();
  return nullptr;
}

}  // namespace tsubf
