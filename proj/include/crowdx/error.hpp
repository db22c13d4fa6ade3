#pragma once

#include <stdexcept>
#include <string>

namespace crowdx {

/// A caller supplied an out-of-range or malformed parameter.
class ParameterError : public std::invalid_argument {
 public:
  ParameterError(const std::string& field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Inputs are well-formed but do not cover what a run needs (missing grid
/// cells, mixed resolutions, empty subsets).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A persisted file is truncated or does not match its declared layout.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rejection sampling ran out of attempts before placing every pedestrian.
class RegionTooDense : public std::runtime_error {
 public:
  RegionTooDense(std::size_t requested, std::size_t achieved)
      : std::runtime_error("region too dense: placed " + std::to_string(achieved) + " of " +
                           std::to_string(requested) + " pedestrians"),
        requested_(requested),
        achieved_(achieved) {}
  std::size_t requested() const noexcept { return requested_; }
  std::size_t achieved() const noexcept { return achieved_; }

 private:
  std::size_t requested_;
  std::size_t achieved_;
};

/// Training diverged (NaN/inf loss).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace crowdx
