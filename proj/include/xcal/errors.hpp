#pragma once

#include <stdexcept>
#include <string>

namespace xcal {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// input / file errors
struct ParseError : Error { using Error::Error; };
struct ValidationError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IdMismatch : Error { using Error::Error; };

// geometry / numerics
struct DepthDegenerate : Error { using Error::Error; };
struct NonPositiveVariance : Error { using Error::Error; };
struct SingularNormalMatrix : Error { using Error::Error; };
struct DivergenceError : Error { using Error::Error; };
struct InfeasibleSpacing : Error { using Error::Error; };

// kNN / cross-validation
struct InsufficientSamples : Error { using Error::Error; };
struct GridTooLarge : Error { using Error::Error; };

}  // namespace xcal
