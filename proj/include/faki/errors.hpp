#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace faki {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define FAKI_DEFINE_ERROR(Name)          \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  };

FAKI_DEFINE_ERROR(DegenerateEnsemble)
FAKI_DEFINE_ERROR(NonFinite)
FAKI_DEFINE_ERROR(SingularSystem)
FAKI_DEFINE_ERROR(ScheduleStalled)
FAKI_DEFINE_ERROR(TrainingDiverged)
FAKI_DEFINE_ERROR(IterationCapExceeded)
FAKI_DEFINE_ERROR(GradientUnavailable)
FAKI_DEFINE_ERROR(DivergentChain)
FAKI_DEFINE_ERROR(InsufficientChain)
FAKI_DEFINE_ERROR(SizeMismatch)
FAKI_DEFINE_ERROR(EmptyInput)
FAKI_DEFINE_ERROR(InvalidConfig)
FAKI_DEFINE_ERROR(IoFailure)
FAKI_DEFINE_ERROR(MissingReference)
FAKI_DEFINE_ERROR(FormatError)

#undef FAKI_DEFINE_ERROR

/// Raised when the forward model throws or returns non-finite output.
class ForwardModelFailure : public Error {
 public:
  ForwardModelFailure(std::size_t particle, const std::string& what)
      : Error("forward model failed on particle " + std::to_string(particle) + ": " + what),
        particle_(particle) {}

  std::size_t particle() const noexcept { return particle_; }

 private:
  std::size_t particle_;
};

}  // namespace faki
