#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace trips {

template <typename Real>
struct ParameterEntry {
  std::string name;
  std::string group;
  Tensor<Real> value;
  Tensor<Real> grad;
  Tensor<Real> first_moment;
  Tensor<Real> second_moment;
  std::int64_t step = 0;
  double learning_rate = 1e-3;
  bool enabled = true;
};

// Named registry of every optimizable array. Entry order is insertion order
// and is what serializers and reductions iterate over.
template <typename Real>
class ParameterStore {
 public:
  ParameterEntry<Real>& add(const std::string& name, const std::string& group, Tensor<Real> value,
                            double learning_rate);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  ParameterEntry<Real>& get(const std::string& name);
  const ParameterEntry<Real>& get(const std::string& name) const;
  Tensor<Real>& value(const std::string& name) { return get(name).value; }
  const Tensor<Real>& value(const std::string& name) const { return get(name).value; }
  Tensor<Real>& grad(const std::string& name) { return get(name).grad; }

  std::vector<ParameterEntry<Real>>& entries() noexcept { return entries_; }
  const std::vector<ParameterEntry<Real>>& entries() const noexcept { return entries_; }

  void zero_grad();
  void set_group_enabled(const std::string& group, bool enabled);
  void set_all_enabled(bool enabled);
  void scale_learning_rates(double factor);
  bool any_enabled() const;
  bool group_enabled(const std::string& group) const;

  // Global L2 norm over the gradients of enabled entries.
  double grad_norm() const;
  void scale_grads(double factor);

  template <typename Other>
  ParameterStore<Other> cast() const {
    ParameterStore<Other> out;
    for (const auto& e : entries_) {
      auto& o = out.add(e.name, e.group, e.value.template cast<Other>(), e.learning_rate);
      o.grad = e.grad.template cast<Other>();
      o.first_moment = e.first_moment.template cast<Other>();
      o.second_moment = e.second_moment.template cast<Other>();
      o.step = e.step;
      o.enabled = e.enabled;
    }
    return out;
  }

 private:
  std::vector<ParameterEntry<Real>> entries_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamReport {
  bool applied = true;
  std::vector<std::string> nonfinite_entries;
};

// One Adam update of every enabled entry; gradients are zeroed afterwards.
// If any enabled gradient is non-finite nothing is updated.
template <typename Real>
AdamReport adam_step(ParameterStore<Real>& store, double lr_scale, const AdamConfig& config = {});

struct GradCheckOptions {
  double step = 1e-3;
  bool relative_step = true;     // h = step * max(1, |v|)
  std::size_t max_samples = 64;  // coordinates checked per entry
  std::uint64_t seed = 1;
  double abs_floor = 1e-8;       // denominator floor for the relative error
  double kink_radius = 0;        // > 0: shrink the step (down to step/64) when the signature changes
                                 // within this radius; skip if it still changes
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

class NondeterministicFunction : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Real>
using ScalarFunction = std::function<Real(ParameterStore<Real>&)>;
template <typename Real>
using SignatureFunction = std::function<std::uint64_t(ParameterStore<Real>&)>;

// Compares the gradient already stored in `entry`'s grad tensor against central
// differences of `f`. `f` must not modify the store.
template <typename Real>
GradCheckResult finite_diff_check(const ScalarFunction<Real>& f, ParameterStore<Real>& store,
                                  const std::string& entry, const GradCheckOptions& options,
                                  const SignatureFunction<Real>& signature = {});

}  // namespace trips
