#include "p2v/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <unordered_set>
#include <vector>

#include "p2v/parallel.hpp"

namespace p2v {

// ---------------------------------------------------------------------------
// parallel_for: persistent pool, contiguous per-thread chunks.
// ---------------------------------------------------------------------------

namespace {

int clamp_threads(int n) { return std::max(1, std::min(n, 64)); }

int default_threads() {
  const unsigned hw = std::thread::hardware_concurrency();
  return clamp_threads(static_cast<int>(hw == 0 ? 1 : std::min(hw, 8u)));
}

std::atomic<int> g_num_threads{default_threads()};
thread_local bool t_in_parallel = false;

struct Pool {
  struct Job {
    const std::function<void(int64_t, int64_t)>* body = nullptr;
    std::vector<std::pair<int64_t, int64_t>> chunks;
    std::exception_ptr error;
  };

  std::mutex m;
  std::condition_variable cv_work;
  std::condition_variable cv_done;
  std::vector<std::thread> workers;
  Job job;
  uint64_t generation = 0;
  int pending = 0;
  bool shutdown = false;

  explicit Pool(int worker_count) {
    workers.reserve(worker_count);
    for (int i = 0; i < worker_count; ++i) {
      workers.emplace_back([this, i] { run_worker(i); });
    }
  }

  ~Pool() {
    {
      std::lock_guard lock(m);
      shutdown = true;
    }
    cv_work.notify_all();
    for (auto& w : workers) w.join();
  }

  void run_worker(int slot) {
    t_in_parallel = true;
    uint64_t seen = 0;
    for (;;) {
      std::unique_lock lock(m);
      cv_work.wait(lock, [&] { return shutdown || generation != seen; });
      if (shutdown) return;
      seen = generation;
      if (slot + 1 >= static_cast<int>(job.chunks.size())) {
        if (--pending == 0) cv_done.notify_one();
        continue;
      }
      const auto [lo, hi] = job.chunks[slot + 1];
      const auto* body = job.body;
      lock.unlock();
      try {
        (*body)(lo, hi);
      } catch (...) {
        std::lock_guard guard(m);
        if (!job.error) job.error = std::current_exception();
      }
      lock.lock();
      if (--pending == 0) cv_done.notify_one();
    }
  }

  void run(int64_t begin, int64_t end,
           const std::function<void(int64_t, int64_t)>& body, int nchunks) {
    std::vector<std::pair<int64_t, int64_t>> chunks;
    const int64_t total = end - begin;
    const int64_t per = (total + nchunks - 1) / nchunks;
    for (int64_t lo = begin; lo < end; lo += per) {
      chunks.emplace_back(lo, std::min(lo + per, end));
    }
    std::pair<int64_t, int64_t> mine = chunks.front();
    {
      std::unique_lock lock(m);
      job.body = &body;
      job.chunks = std::move(chunks);
      job.error = nullptr;
      pending = static_cast<int>(workers.size());
      ++generation;
    }
    cv_work.notify_all();
    std::exception_ptr my_error;
    try {
      body(mine.first, mine.second);
    } catch (...) {
      my_error = std::current_exception();
    }
    std::unique_lock lock(m);
    cv_done.wait(lock, [&] { return pending == 0; });
    std::exception_ptr err = my_error ? my_error : job.error;
    job.body = nullptr;
    job.error = nullptr;
    if (err) std::rethrow_exception(err);
  }
};

Pool& pool() {
  static Pool instance(std::max(1, default_threads() - 1));
  return instance;
}

}  // namespace

int num_threads() { return g_num_threads.load(std::memory_order_relaxed); }

void set_num_threads(int n) {
  g_num_threads.store(clamp_threads(n), std::memory_order_relaxed);
}

void parallel_for(int64_t begin, int64_t end,
                  const std::function<void(int64_t, int64_t)>& body,
                  int64_t grain) {
  if (begin >= end) return;
  const int threads = num_threads();
  const int64_t total = end - begin;
  if (threads <= 1 || t_in_parallel || total <= grain) {
    body(begin, end);
    return;
  }
  const int nchunks =
      static_cast<int>(std::min<int64_t>(threads, (total + grain - 1) / grain));
  if (nchunks <= 1) {
    body(begin, end);
    return;
  }
  pool().run(begin, end, body, nchunks);
}

// ---------------------------------------------------------------------------
// Tensor core
// ---------------------------------------------------------------------------

namespace {
thread_local int t_no_grad_depth = 0;
}

bool grad_enabled() { return t_no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++t_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --t_no_grad_depth; }

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (const int64_t d : shape) {
    check(d >= 0, "negative dimension in shape");
    n *= d;
  }
  return n;
}

std::string shape_string(const std::vector<int64_t>& shape) {
  std::string out = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <typename T>
TensorT<T> TensorT<T>::zeros(std::vector<int64_t> shape, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  TensorT t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::make_shared<std::vector<T>>(n, T(0));
  t.impl_->grad = std::make_shared<std::vector<T>>();
  t.impl_->requires_grad = requires_grad;
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::full(std::vector<int64_t> shape, T value) {
  TensorT t = zeros(std::move(shape), false);
  std::fill(t.impl_->values->begin(), t.impl_->values->end(), value);
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::from_values(std::vector<int64_t> shape,
                                   std::vector<T> values, bool requires_grad) {
  check(shape_numel(shape) == static_cast<int64_t>(values.size()),
        "from_values: shape ", shape_string(shape), " does not match ",
        values.size(), " values");
  TensorT t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::make_shared<std::vector<T>>(std::move(values));
  t.impl_->grad = std::make_shared<std::vector<T>>();
  t.impl_->requires_grad = requires_grad;
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::scalar(T value) {
  return from_values({}, {value});
}

template <typename T>
const std::vector<int64_t>& TensorT<T>::shape() const {
  check(defined(), "shape() on undefined tensor");
  return impl_->shape;
}

template <typename T>
int TensorT<T>::rank() const {
  return static_cast<int>(shape().size());
}

template <typename T>
int64_t TensorT<T>::dim(int i) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  if (i < 0) i += r;
  check(i >= 0 && i < r, "dim index ", i, " out of range for rank ", r);
  return s[i];
}

template <typename T>
int64_t TensorT<T>::numel() const {
  return static_cast<int64_t>(impl_->values->size());
}

template <typename T>
std::span<const T> TensorT<T>::values() const {
  check(defined(), "values() on undefined tensor");
  return {impl_->values->data(), impl_->values->size()};
}

template <typename T>
std::span<T> TensorT<T>::mutable_values() {
  check(defined(), "mutable_values() on undefined tensor");
  return {impl_->values->data(), impl_->values->size()};
}

template <typename T>
T TensorT<T>::item() const {
  check(numel() == 1, "item() requires a single-element tensor, shape is ",
        shape_string(shape()));
  return (*impl_->values)[0];
}

template <typename T>
bool TensorT<T>::requires_grad() const {
  return defined() && impl_->requires_grad;
}

template <typename T>
bool TensorT<T>::has_grad() const {
  return defined() && !impl_->grad->empty();
}

template <typename T>
void TensorT<T>::ensure_grad() {
  check(defined(), "ensure_grad() on undefined tensor");
  if (impl_->grad->empty()) impl_->grad->assign(impl_->values->size(), T(0));
}

template <typename T>
std::span<const T> TensorT<T>::grad() const {
  check(has_grad(), "gradient not available; call backward() first");
  return {impl_->grad->data(), impl_->grad->size()};
}

template <typename T>
std::span<T> TensorT<T>::mutable_grad() {
  ensure_grad();
  return {impl_->grad->data(), impl_->grad->size()};
}

template <typename T>
void TensorT<T>::zero_grad() {
  if (defined() && !impl_->grad->empty()) {
    std::fill(impl_->grad->begin(), impl_->grad->end(), T(0));
  }
}

template <typename T>
void TensorT<T>::drop_grad() {
  if (defined()) impl_->grad->clear();
}

template <typename T>
void TensorT<T>::set_node(std::shared_ptr<GradNode<T>> node) {
  impl_->node = std::move(node);
  impl_->requires_grad = true;
}

template <typename T>
const std::shared_ptr<GradNode<T>>& TensorT<T>::node() const {
  return impl_->node;
}

template <typename T>
TensorT<T> TensorT<T>::detached() const {
  check(defined(), "detached() on undefined tensor");
  TensorT t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = impl_->shape;
  t.impl_->values = impl_->values;  // shares storage
  t.impl_->grad = std::make_shared<std::vector<T>>();
  t.impl_->requires_grad = false;
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::clone() const {
  check(defined(), "clone() on undefined tensor");
  TensorT t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = impl_->shape;
  t.impl_->values = std::make_shared<std::vector<T>>(*impl_->values);
  t.impl_->grad = std::make_shared<std::vector<T>>();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::reshaped(std::vector<int64_t> new_shape) const {
  check(defined(), "reshaped() on undefined tensor");
  check(shape_numel(new_shape) == numel(), "reshape from ",
        shape_string(impl_->shape), " to ", shape_string(new_shape),
        " changes element count");
  TensorT t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(new_shape);
  t.impl_->values = impl_->values;  // same storage
  t.impl_->grad = impl_->grad;      // views share the gradient buffer
  t.impl_->requires_grad = impl_->requires_grad;
  if (grad_enabled() && impl_->requires_grad) {
    // The gradient buffer is shared, so the backward pass only needs the
    // topological edge; accumulation already lands in the parent.
    auto node = std::make_shared<GradNode<T>>();
    node->parents = {*this};
    node->backward = [](const TensorT<T>&) {};
    t.impl_->node = std::move(node);
  }
  return t;
}

template <typename T>
void TensorT<T>::accumulate_grad(std::span<const T> g) {
  ensure_grad();
  check(g.size() == impl_->grad->size(), "accumulate_grad size mismatch");
  T* dst = impl_->grad->data();
  for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename T>
void TensorT<T>::backward() {
  check(defined(), "backward() on undefined tensor");
  check(numel() == 1, "backward() requires a scalar loss, shape is ",
        shape_string(shape()));
  check(impl_->node != nullptr,
        "backward(): no graph attached (already freed by a previous call, "
        "or the loss is a leaf)");

  // Iterative post-order topological sort over the autograd DAG.
  std::vector<std::shared_ptr<Impl>> order;
  std::unordered_set<const Impl*> visited;
  struct Frame {
    std::shared_ptr<Impl> impl;
    size_t next_parent = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_, 0});
  visited.insert(impl_.get());
  while (!stack.empty()) {
    Frame& frame = stack.back();
    const auto& node = frame.impl->node;
    const size_t parent_count = node ? node->parents.size() : 0;
    if (frame.next_parent < parent_count) {
      const auto& parent = node->parents[frame.next_parent++];
      if (parent.defined() && parent.impl_ &&
          visited.insert(parent.impl_.get()).second) {
        stack.push_back({parent.impl_, 0});
      }
    } else {
      order.push_back(frame.impl);
      stack.pop_back();
    }
  }

  ensure_grad();
  (*impl_->grad)[0] = T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& impl = *it;
    if (!impl->node) continue;
    TensorT out;
    out.impl_ = impl;
    for (auto& parent : impl->node->parents) {
      if (parent.requires_grad()) parent.ensure_grad();
    }
    impl->node->backward(out);
    impl->node.reset();  // free the graph as we go
  }
}

template class TensorT<float>;
template class TensorT<double>;

}  // namespace p2v
