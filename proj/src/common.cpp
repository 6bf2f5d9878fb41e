#include "obsmatch/common.hpp"

#include <boost/math/distributions/normal.hpp>

namespace obsmatch {

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ValidationError("normal quantile needs p in (0, 1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

}  // namespace obsmatch
