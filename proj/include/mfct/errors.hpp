#ifndef MFCT_ERRORS_HPP
#define MFCT_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace mfct {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionMismatch : Error { using Error::Error; };
struct SizeMismatch : Error { using Error::Error; };
struct CapExceeded : Error { using Error::Error; };
struct GridMismatch : Error { using Error::Error; };

struct UnknownModel : Error { using Error::Error; };
struct InvalidParam : Error { using Error::Error; };
struct NonFiniteCoefficient : Error { using Error::Error; };

struct ActionOutOfSet : Error { using Error::Error; };
struct RefinementTooCoarse : Error { using Error::Error; };
struct NotPSD : Error { using Error::Error; };

struct NotLQ : Error { using Error::Error; };
struct RiccatiBlowup : Error { using Error::Error; };
struct AllCandidatesBlewUp : Error { using Error::Error; };

struct ConfigError : Error { using Error::Error; };

} // namespace mfct

#endif
