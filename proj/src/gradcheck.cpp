#include "dael/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dael/errors.hpp"

namespace dael {

double grad_check(const std::function<Tensor<double>()>& f,
                  std::vector<Tensor<double>> params, double h) {
  if (!(h > 0)) throw ContractError("grad_check: step must be positive");
  for (auto& p : params) p.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double up = f().item();
      values[i] = original - h;
      const double down = f().item();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[t][i];
      worst = std::max(worst, std::abs(a - numeric) /
                                  std::max(1e-8, std::abs(a) + std::abs(numeric)));
    }
  }
  return worst;
}

}  // namespace dael
