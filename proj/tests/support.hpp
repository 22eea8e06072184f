#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "attfuse/attfuse.hpp"

namespace testing_support {

using attfuse::Graph;
using attfuse::Rng;
using attfuse::Shape;
using attfuse::Tensor;
using attfuse::Var;

/// Large activations are reallocated every step; keeping them on the heap
/// instead of fresh mmap()s avoids repeated page faults.
inline const bool kMallocTuned = [] {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return true;
}();

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "attfuse") {
    static std::uint64_t counter = 0;
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = attfuse::uniform(rng, lo, hi);
  return t;
}

inline std::size_t random_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(attfuse::uniform01(rng) * static_cast<double>(hi - lo + 1));
}

/// Builds loss = sum(op(inputs) * R) for a fixed random R, and returns the
/// largest relative error between backward() and central differences over
/// all inputs.
inline double op_gradient_error(const std::vector<Tensor>& inputs,
                                const std::function<Var(Graph&, const std::vector<Var>&)>& op, std::uint64_t seed = 7,
                                double h = 1e-5) {
  Tensor weights;
  auto evaluate = [&](const std::vector<Tensor>& xs, std::vector<Tensor>* grads) {
    Graph g;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(grads ? g.variable(x) : g.constant(x));
    Var out = op(g, vars);
    if (weights.size() != g.value(out).size() || weights.shape() != g.value(out).shape()) {
      Rng rng(seed);
      weights = random_tensor(g.value(out).shape(), rng);
    }
    Var loss = attfuse::sum(attfuse::mul_const(out, weights));
    if (grads) {
      g.backward(loss);
      for (const auto& v : vars) grads->push_back(g.grad(v));
    }
    return g.value(loss).item();
  };
  std::vector<Tensor> analytic;
  evaluate(inputs, &analytic);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Tensor& probe) {
      std::vector<Tensor> xs = inputs;
      xs[k] = probe;
      return evaluate(xs, nullptr);
    };
    const Tensor numeric = attfuse::finite_diff_grad(f, inputs[k], h);
    worst = std::max(worst, attfuse::max_relative_error(analytic[k], numeric));
  }
  return worst;
}

}  // namespace testing_support
