#include "params.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace trips {

template <typename Real>
ParameterEntry<Real>& ParameterStore<Real>::add(const std::string& name, const std::string& group,
                                                Tensor<Real> value, double learning_rate) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter entry: " + name);
  ParameterEntry<Real> e;
  e.name = name;
  e.group = group;
  e.grad = Tensor<Real>(value.shape());
  e.first_moment = Tensor<Real>(value.shape());
  e.second_moment = Tensor<Real>(value.shape());
  e.value = std::move(value);
  e.learning_rate = learning_rate;
  index_[name] = entries_.size();
  entries_.push_back(std::move(e));
  return entries_.back();
}

template <typename Real>
ParameterEntry<Real>& ParameterStore<Real>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter entry named " + name);
  return entries_[it->second];
}

template <typename Real>
const ParameterEntry<Real>& ParameterStore<Real>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter entry named " + name);
  return entries_[it->second];
}

template <typename Real>
void ParameterStore<Real>::zero_grad() {
  for (auto& e : entries_) e.grad.fill(Real(0));
}

template <typename Real>
void ParameterStore<Real>::set_group_enabled(const std::string& group, bool enabled) {
  for (auto& e : entries_) {
    if (e.group == group) e.enabled = enabled;
  }
}

template <typename Real>
void ParameterStore<Real>::set_all_enabled(bool enabled) {
  for (auto& e : entries_) e.enabled = enabled;
}

template <typename Real>
void ParameterStore<Real>::scale_learning_rates(double factor) {
  for (auto& e : entries_) e.learning_rate *= factor;
}

template <typename Real>
bool ParameterStore<Real>::any_enabled() const {
  return std::any_of(entries_.begin(), entries_.end(), [](const auto& e) { return e.enabled; });
}

template <typename Real>
bool ParameterStore<Real>::group_enabled(const std::string& group) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.enabled && e.group == group; });
}

template <typename Real>
double ParameterStore<Real>::grad_norm() const {
  double sum = 0;
  for (const auto& e : entries_) {
    if (!e.enabled) continue;
    for (Real g : e.grad.values()) sum += static_cast<double>(g) * g;
  }
  return std::sqrt(sum);
}

template <typename Real>
void ParameterStore<Real>::scale_grads(double factor) {
  for (auto& e : entries_) {
    for (Real& g : e.grad.values()) g = static_cast<Real>(g * factor);
  }
}

template <typename Real>
AdamReport adam_step(ParameterStore<Real>& store, double lr_scale, const AdamConfig& config) {
  AdamReport report;
  for (const auto& e : store.entries()) {
    if (e.enabled && !all_finite(e.grad)) report.nonfinite_entries.push_back(e.name);
  }
  if (!report.nonfinite_entries.empty()) {
    report.applied = false;
    store.zero_grad();
    return report;
  }
  for (auto& e : store.entries()) {
    if (!e.enabled) {
      e.grad.fill(Real(0));
      continue;
    }
    ++e.step;
    const double t = static_cast<double>(e.step);
    const double correction1 = 1.0 - std::pow(config.beta1, t);
    const double correction2 = 1.0 - std::pow(config.beta2, t);
    const double lr = e.learning_rate * lr_scale;
    const Real b1 = static_cast<Real>(config.beta1);
    const Real b2 = static_cast<Real>(config.beta2);
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const Real g = e.grad[i];
      e.first_moment[i] = b1 * e.first_moment[i] + (Real(1) - b1) * g;
      e.second_moment[i] = b2 * e.second_moment[i] + (Real(1) - b2) * g * g;
      const double m_hat = e.first_moment[i] / correction1;
      const double v_hat = e.second_moment[i] / correction2;
      e.value[i] = static_cast<Real>(e.value[i] - lr * m_hat / (std::sqrt(v_hat) + config.eps));
    }
    e.grad.fill(Real(0));
  }
  return report;
}

template <typename Real>
GradCheckResult finite_diff_check(const ScalarFunction<Real>& f, ParameterStore<Real>& store,
                                  const std::string& entry_name, const GradCheckOptions& options,
                                  const SignatureFunction<Real>& signature) {
  auto& entry = store.get(entry_name);
  const Tensor<Real> analytic = entry.grad;

  const Real base_a = f(store);
  const Real base_b = f(store);
  if (!(base_a == base_b) && !(std::isnan(base_a) && std::isnan(base_b))) {
    throw NondeterministicFunction("finite_diff_check: function value changed between identical evaluations");
  }

  std::vector<std::size_t> coords(entry.value.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (coords.size() > options.max_samples) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_samples);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckResult result;
  for (std::size_t i : coords) {
    // Re-fetch: f may not add entries, but be strict about references anyway.
    Real& v = store.get(entry_name).value[i];
    const Real original = v;
    const double scale = options.relative_step ? std::max(1.0, std::abs(static_cast<double>(original))) : 1.0;
    Real h = static_cast<Real>(options.step * scale);

    if (options.kink_radius > 0 && signature) {
      // Central differences are only valid when no discrete switch lies in
      // [v - h, v + h]. Start from the exclusion radius and shrink the
      // probe until the signature is constant; give up below step / 64.
      v = original;
      const auto mid = signature(store);
      auto clean = [&](Real r) {
        v = original - r;
        const bool lo = signature(store) == mid;
        v = original + r;
        const bool hi = lo && signature(store) == mid;
        v = original;
        return hi;
      };
      bool ok = clean(static_cast<Real>(options.kink_radius * scale));
      for (int shrink = 0; !ok && shrink < 4; ++shrink) {
        if (shrink > 0) h /= Real(4);
        ok = clean(h);
      }
      if (!ok) {
        ++result.skipped;
        continue;
      }
    }

    v = original + h;
    const Real plus = f(store);
    v = original - h;
    const Real minus = f(store);
    v = original;

    const double numeric = (static_cast<double>(plus) - static_cast<double>(minus)) / (2.0 * static_cast<double>(h));
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
    const double rel = std::abs(a - numeric) / denom;
    ++result.checked;
    if (rel > result.max_rel_error || !std::isfinite(rel)) {
      result.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
      result.worst_index = i;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template AdamReport adam_step(ParameterStore<float>&, double, const AdamConfig&);
template AdamReport adam_step(ParameterStore<double>&, double, const AdamConfig&);
template GradCheckResult finite_diff_check(const ScalarFunction<float>&, ParameterStore<float>&, const std::string&,
                                           const GradCheckOptions&, const SignatureFunction<float>&);
template GradCheckResult finite_diff_check(const ScalarFunction<double>&, ParameterStore<double>&,
                                           const std::string&, const GradCheckOptions&,
                                           const SignatureFunction<double>&);

}  // namespace trips
