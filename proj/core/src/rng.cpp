#include "longtail/rng.hpp"

#include <cmath>

namespace longtail {

double Rng::normal(double mean, double stddev) {
  if (have_spare_) {
    have_spare_ = false;
    return mean + stddev * spare_;
  }
  // Box-Muller; u clamped away from 0 so the log stays finite.
  double u = uniform01();
  if (u < 1e-300) u = 1e-300;
  const double v = uniform01();
  const double r = std::sqrt(-2.0 * std::log(u));
  const double theta = 2.0 * M_PI * v;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return mean + stddev * r * std::cos(theta);
}

}  // namespace longtail
