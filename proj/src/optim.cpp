#include "dit/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace dit {

Tensor& ParamStore::add(std::string name, Tensor t, bool decay) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  t.set_requires_grad(true);
  params_.push_back(Param{std::move(name), std::move(t), decay, 1.0f});
  return params_.back().tensor;
}

const Param* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Param* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::size_t ParamStore::count_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void ParamStore::extend(const ParamStore& other, const std::string& prefix) {
  for (const auto& p : other.params_) {
    if (find(prefix + p.name)) throw std::invalid_argument("duplicate parameter name: " + prefix + p.name);
    params_.push_back(Param{prefix + p.name, p.tensor, p.decay, p.lr_scale});
  }
}

void adamw_update(std::span<float> param, std::span<const float> grad, std::span<float> m, std::span<float> v,
                  std::int64_t step, float lr, const AdamWConfig& cfg, bool decay) {
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(step));
  const float wd = decay ? cfg.weight_decay : 0.0f;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const float g = grad.empty() ? 0.0f : grad[i];
    m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g * g;
    const float mhat = static_cast<float>(m[i] / bc1);
    const float vhat = static_cast<float>(v[i] / bc2);
    const float theta = param[i];
    param[i] = theta - lr * mhat / (std::sqrt(vhat) + cfg.eps) - lr * wd * theta;
  }
}

AdamW::AdamW(ParamStore& store, AdamWConfig cfg) : store_(&store), cfg_(cfg) {
  for (const auto& p : store.params()) {
    state_.m.emplace_back(p.tensor.numel(), 0.0f);
    state_.v.emplace_back(p.tensor.numel(), 0.0f);
  }
}

void AdamW::step(float lr) {
  if (cfg_.grad_clip > 0.0f) clip_grad_norm(*store_, cfg_.grad_clip);
  ++state_.step;
  auto& params = store_->params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    std::span<const float> g;
    if (p.tensor.has_grad()) g = p.tensor.grad();
    adamw_update(p.tensor.data(), g, state_.m[i], state_.v[i], state_.step, lr * p.lr_scale, cfg_, p.decay);
  }
}

float clip_grad_norm(ParamStore& store, float max_norm) {
  double sq = 0.0;
  for (auto& p : store.params()) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const auto norm = static_cast<float>(std::sqrt(sq));
  if (max_norm > 0.0f && norm > max_norm) {
    const float s = max_norm / (norm + 1e-6f);
    for (auto& p : store.params()) {
      if (!p.tensor.has_grad()) continue;
      for (float& g : p.tensor.grad()) g *= s;
    }
  }
  return norm;
}

float lr_at(const LrSchedule& s, std::int64_t step) {
  if (s.warmup_steps < 0 || s.warmup_steps > s.total_steps)
    throw std::invalid_argument("lr schedule: need 0 <= warmup_steps <= total_steps");
  if (step < 0 || step > s.total_steps)
    throw std::out_of_range("lr schedule: step " + std::to_string(step) + " outside [0," +
                            std::to_string(s.total_steps) + "]");
  if (step < s.warmup_steps) {
    return s.peak_lr * static_cast<float>(step) / static_cast<float>(s.warmup_steps);
  }
  const std::int64_t span = s.total_steps - s.warmup_steps;
  if (span == 0) return s.peak_lr;
  const double t = static_cast<double>(step - s.warmup_steps) / static_cast<double>(span);
  return static_cast<float>(s.peak_lr * 0.5 * (1.0 + std::cos(M_PI * t)));
}

float grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, GradCheckOptions opts) {
  Tensor probe = Tensor::from(x.shape(), x.values(), true);
  Tensor out = f(probe);
  if (out.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
  if (std::isnan(out.item())) throw std::domain_error("grad_check: f evaluated to NaN");
  out.backward();
  std::vector<float> analytic(probe.grad().begin(), probe.grad().end());

  NoGradGuard guard;
  float worst = 0.0f;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float orig = probe.data()[i];
    probe.data()[i] = orig + opts.eps;
    const double fp = f(probe).item();
    probe.data()[i] = orig - opts.eps;
    const double fm = f(probe).item();
    probe.data()[i] = orig;
    if (std::isnan(fp) || std::isnan(fm)) throw std::domain_error("grad_check: f evaluated to NaN");
    const double fd = (fp - fm) / (2.0 * opts.eps);
    const double err = std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(fd));
    worst = std::max(worst, static_cast<float>(err));
  }
  return worst;
}

}  // namespace dit
