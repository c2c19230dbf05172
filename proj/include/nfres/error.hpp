#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nfres {

/// Precondition on an argument (shape, range, flag) violated.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Standardization group with fewer than two elements or zero variance.
struct DegenerateGroup : std::domain_error {
  using std::domain_error::domain_error;
};

/// A NaN or Inf appeared in the result of a public operation.
struct NonFinite : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A layer cache was handed to a backward pass a second time.
struct CacheReuse : std::logic_error {
  using std::logic_error::logic_error;
};

/// Malformed input file (truncated record, out-of-range label, bad header).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss or gradient.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t batch, const std::string& detail)
      : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch) + ": " + detail),
        epoch_(epoch),
        batch_(batch) {}

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

}  // namespace nfres
