#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace gaze {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Thrown when an operation's inputs violate its shape/value contract.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a computation produced or met non-finite values.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

class Tensor;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first touched
  bool requires_grad = false;

  // Autodiff record. seq is a global execution-order id (0 = leaf / no
  // recorded op); backward walks reachable nodes in decreasing seq, which
  // is exactly reverse execution order.
  uint64_t seq = 0;
  std::vector<Tensor> parents;
  std::function<void(const TensorImpl&)> backward_fn;
};

uint64_t next_seq();

}  // namespace detail

// Dense row-major double tensor with reverse-mode autodiff.
//
// Values are immutable once produced by an op. Leaf tensors (parameters)
// may be mutated in place between steps through mutable_values().
// Gradients accumulate additively; zero_grad() resets them. backward()
// does not consume the graph -- the graph lives as long as the output
// tensor, and a second backward() without a grad reset doubles leaf
// gradients.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  size_t ndim() const { return impl_->shape.size(); }
  int64_t dim(int i) const;  // supports negative indices
  int64_t numel() const { return static_cast<int64_t>(impl_->values.size()); }

  const std::vector<double>& values() const { return impl_->values; }
  // In-place access for initialization and optimizer updates on leaves.
  std::vector<double>& mutable_values() { return impl_->values; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  std::vector<double>& ensure_grad();
  void zero_grad();

  double item() const;
  bool all_finite() const;
  void check_finite(const char* what) const;

  // Reverse-mode gradient of a scalar loss into every reachable
  // requires_grad leaf.
  void backward() const;

  detail::TensorImpl* impl() const { return impl_.get(); }

  // Internal: attach an autodiff record to an op output.
  void record_op(std::vector<Tensor> parents,
                 std::function<void(const detail::TensorImpl&)> backward_fn);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Scoped autograd switch; ops executed under a guard produce plain
// tensors with no graph record. Thread-local.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Deterministic RNG used for initialization, dropout masks, data
// shuffling and the synthetic generator. Wraps splitmix-seeded xoshiro-
// style draws on top of a 64-bit LCG-free engine so streams do not
// depend on libstdc++ distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  uint64_t next_u64();
  double uniform();                        // [0, 1)
  double uniform(double lo, double hi);    // [lo, hi)
  double normal(double mean, double stddev);
  int64_t uniform_int(int64_t n);          // [0, n)

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(i + 1)]);
    }
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Stable 64-bit mix for deriving per-sample / per-epoch seeds.
uint64_t hash_combine(uint64_t seed, uint64_t value);

}  // namespace gaze
