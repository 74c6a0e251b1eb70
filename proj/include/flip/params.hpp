#pragma once

// Named parameter collection with stable addresses, shared by the towers,
// the optimizer, and checkpoint IO. Registration order is deterministic and
// becomes the checkpoint tensor order.

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "flip/autodiff.hpp"
#include "flip/errors.hpp"
#include "flip/rng.hpp"

namespace flip {

class ParamSet {
 public:
  Parameter& add(const std::string& name, Matrix value) {
    if (by_name_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    params_.push_back(std::make_unique<Parameter>(name, std::move(value)));
    by_name_[name] = params_.back().get();
    return *params_.back();
  }

  Parameter& at(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return *it->second;
  }

  bool has(const std::string& name) const { return by_name_.count(name) > 0; }

  std::vector<Parameter*> all() const {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  void zero_grad() {
    for (const auto& p : params_) p->zero_grad();
  }

  long total_size() const {
    long n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, Parameter*> by_name_;
};

inline Matrix uniform_init(Rng& rng, long rows, long cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

inline Matrix xavier_init(Rng& rng, long rows, long cols) {
  double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  return uniform_init(rng, rows, cols, -limit, limit);
}

}  // namespace flip
