#pragma once

#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "yieldnet/errors.hpp"
#include "yieldnet/tensor.hpp"

namespace yieldnet {

/// Named parameter groups with stable ordering. Ordering defines the
/// checkpoint payload layout and the optimizer state alignment, so entries
/// must be registered identically for a given model config.
template <class S>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<S> value;
    bool trainable = true;  // false for BatchNorm running buffers
    bool decay = true;      // false for biases and norm scales/shifts
  };

  int add(const std::string& name, std::vector<int64_t> shape, bool trainable, bool decay) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    Entry e;
    e.name = name;
    e.value = Tensor<S>(std::move(shape));
    e.trainable = trainable;
    e.decay = decay;
    entries_.push_back(std::move(e));
    index_[name] = static_cast<int>(entries_.size()) - 1;
    return static_cast<int>(entries_.size()) - 1;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return it->second;
  }

  Entry& at(int i) { return entries_[i]; }
  const Entry& at(int i) const { return entries_[i]; }
  Entry& at(const std::string& name) { return entries_[find(name)]; }
  const Entry& at(const std::string& name) const { return entries_[find(name)]; }

  size_t size() const { return entries_.size(); }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

/// Truncated normal init: redraw until within two standard deviations.
template <class S>
void fill_trunc_normal(Tensor<S>& t, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, std);
  for (auto& v : t.data) {
    double x = nd(rng);
    while (std::abs(x) > 2.0 * std) x = nd(rng);
    v = static_cast<S>(x);
  }
}

}  // namespace yieldnet
