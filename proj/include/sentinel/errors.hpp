// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sentinel {

// Error taxonomy shared by the whole toolkit. The CLI maps kinds onto exit
// codes: Config/Schema -> 2, Numeric -> 3, Io/Format -> 4.
enum class ErrorKind {
  Dimension,    // shape / extent mismatch
  Index,        // out-of-range label or index
  Format,       // container parse failure
  Io,           // filesystem failure
  Method,       // operation not valid for this PEFT method
  MissingMatrix,// requested matrix not in the bundle's target set
  Singularity,  // zero column norm in DoRA denominator
  Label,        // target label out of range
  Contamination,// frozen weights changed, or trigger found in clean data
  Transfer,     // detector/bundle shape incompatibility
  Evaluation,   // empty or degenerate evaluation set
  Data,         // unusable training data (e.g. single-class)
  Layout,       // feature-transform layout mismatch
  Numeric,      // NaN/Inf or divergence
  Config,       // bad run configuration / schema violation
  Forge,        // benchmark generation failed (e.g. base never converged)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

}  // namespace sentinel
