#pragma once

#include <string>
#include <vector>

namespace crowdx {

/// Counting errors over a test set. `mse` is the root of the mean squared
/// error, the convention of the crowd-counting literature.
struct MetricPair {
  double mae = 0.0;
  double mse = 0.0;
};

/// Throws ParameterError on empty or mismatched inputs.
MetricPair mae_mse(const std::vector<double>& estimates, const std::vector<double>& truths);

/// "14.9(23.1)"
std::string format_metric(const MetricPair& m);

}  // namespace crowdx
