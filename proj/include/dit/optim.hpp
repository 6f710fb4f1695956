#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dit/tensor.hpp"

namespace dit {

/// A named, trainable tensor. `decay` is false for biases, norms, position
/// and mask embeddings. `lr_scale` carries layer-wise decay factors.
struct Param {
  std::string name;
  Tensor tensor;
  bool decay = true;
  float lr_scale = 1.0f;
};

/// Ordered collection of parameters; the order fixes checkpoint layout.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor t, bool decay = true);
  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& params() { return params_; }
  const Param* find(const std::string& name) const;
  Param* find(const std::string& name);
  std::size_t count_scalars() const;
  void zero_grad();
  /// Appends every parameter of `other` with `prefix` prepended to its name.
  void extend(const ParamStore& other, const std::string& prefix = "");

 private:
  std::vector<Param> params_;
};

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.05f;
  float grad_clip = 0.0f;  // global L2 norm; 0 disables
};

struct AdamWState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::int64_t step = 0;
};

/// Decoupled-weight-decay Adam.
class AdamW {
 public:
  AdamW(ParamStore& store, AdamWConfig cfg = {});

  /// One update using the gradients currently held by the parameters.
  void step(float lr);
  const AdamWState& state() const { return state_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  ParamStore* store_;
  AdamWConfig cfg_;
  AdamWState state_;
};

/// Single update on raw buffers; exposed for tests and tools.
void adamw_update(std::span<float> param, std::span<const float> grad, std::span<float> m, std::span<float> v,
                  std::int64_t step, float lr, const AdamWConfig& cfg, bool decay);

/// Scales all gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
float clip_grad_norm(ParamStore& store, float max_norm);

struct LrSchedule {
  float peak_lr = 1e-3f;
  std::int64_t warmup_steps = 10000;
  std::int64_t total_steps = 500000;
};

/// Linear warmup from 0 to peak, then cosine decay to 0 at total_steps.
float lr_at(const LrSchedule& s, std::int64_t step);

struct GradCheckOptions {
  float eps = 1e-3f;
};

/// Max over coordinates of |g_analytic - g_fd| / max(1, |g_fd|), with central
/// finite differences. f must map x to a scalar tensor.
float grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, GradCheckOptions opts = {});

}  // namespace dit
