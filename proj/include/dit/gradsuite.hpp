#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace dit {

/// One gradient check: run(seed) returns the max relative error of the
/// analytic gradient against central differences.
struct GradCase {
  std::string name;
  double tolerance = 1e-3;
  bool composite = false;  // whole-model checks use the looser tolerance
  std::function<double(std::uint64_t seed)> run;
};

/// Every differentiable primitive plus a one-block tiny encoder and the
/// detection loss on a tiny pyramid.
std::vector<GradCase> grad_cases();

}  // namespace dit
