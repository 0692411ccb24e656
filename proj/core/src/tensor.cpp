#include "gaze/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace gaze {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

uint64_t next_seq() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (int64_t d : shape) {
    if (d <= 0) throw ContractError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ContractError("value buffer length " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), 0.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), value);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

int64_t Tensor::dim(int i) const {
  int n = static_cast<int>(impl_->shape.size());
  if (i < 0) i += n;
  if (i < 0 || i >= n) throw ContractError("dim index out of range");
  return impl_->shape[static_cast<size_t>(i)];
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) throw ContractError("gradient not populated; run backward() first");
  return impl_->grad;
}

std::vector<double>& Tensor::ensure_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  impl_->grad.assign(impl_->values.size(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() requires a scalar, got shape " + shape_str(shape()));
  return impl_->values[0];
}

bool Tensor::all_finite() const {
  for (double v : impl_->values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::check_finite(const char* what) const {
  if (!all_finite()) throw NumericalError(std::string(what) + ": non-finite values encountered");
}

void Tensor::record_op(std::vector<Tensor> parents,
                       std::function<void(const detail::TensorImpl&)> backward_fn) {
  impl_->seq = detail::next_seq();
  impl_->parents = std::move(parents);
  impl_->backward_fn = std::move(backward_fn);
  impl_->requires_grad = true;
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }
  check_finite("backward loss");

  // Collect recorded nodes reachable from the loss.
  std::vector<detail::TensorImpl*> nodes;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<detail::TensorImpl*> stack{impl_.get()};
  while (!stack.empty()) {
    detail::TensorImpl* cur = stack.back();
    stack.pop_back();
    if (cur->seq == 0 || !seen.insert(cur).second) continue;
    nodes.push_back(cur);
    for (const Tensor& p : cur->parents) stack.push_back(p.impl());
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const detail::TensorImpl* a, const detail::TensorImpl* b) { return a->seq > b->seq; });

  const_cast<Tensor*>(this)->ensure_grad();
  impl_->grad[0] += 1.0;
  for (detail::TensorImpl* node : nodes) {
    if (node->backward_fn) node->backward_fn(*node);
  }
}

namespace {
thread_local int g_no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

uint64_t Rng::next_u64() {
  // splitmix64
  state_ += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal(double mean, double stddev) {
  if (have_spare_) {
    have_spare_ = false;
    return mean + stddev * spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return mean + stddev * r * std::cos(a);
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw ContractError("uniform_int requires n > 0");
  // rejection sampling to avoid modulo bias
  uint64_t un = static_cast<uint64_t>(n);
  uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<int64_t>(x % un);
}

uint64_t hash_combine(uint64_t seed, uint64_t value) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL + value;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace gaze
