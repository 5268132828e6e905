#pragma once

#include <stdexcept>
#include <string>

namespace posediff {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define POSEDIFF_DEFINE_ERROR(Name)               \
  class Name : public Error {                     \
   public:                                        \
    explicit Name(const std::string& what)        \
        : Error(std::string(#Name ": ") + what) {} \
  }

// tensors
POSEDIFF_DEFINE_ERROR(ShapeMismatch);
POSEDIFF_DEFINE_ERROR(NotScalar);
POSEDIFF_DEFINE_ERROR(DisconnectedLoss);

// geometry
POSEDIFF_DEFINE_ERROR(InvalidPose);
POSEDIFF_DEFINE_ERROR(DegenerateDepth);
POSEDIFF_DEFINE_ERROR(DegenerateLine);
POSEDIFF_DEFINE_ERROR(ResolutionTooLarge);

// diffusion / denoiser / sampling
POSEDIFF_DEFINE_ERROR(StepOutOfRange);
POSEDIFF_DEFINE_ERROR(InvalidConfig);
POSEDIFF_DEFINE_ERROR(MissingWeightMatrix);
POSEDIFF_DEFINE_ERROR(EmptyHistory);
POSEDIFF_DEFINE_ERROR(PoseCountMismatch);
POSEDIFF_DEFINE_ERROR(TooFewAnchors);

// metrics
POSEDIFF_DEFINE_ERROR(TooSmall);
POSEDIFF_DEFINE_ERROR(LengthMismatch);

// io / config / cli
POSEDIFF_DEFINE_ERROR(IoFailure);
POSEDIFF_DEFINE_ERROR(FormatError);
POSEDIFF_DEFINE_ERROR(ParseError);
POSEDIFF_DEFINE_ERROR(UnknownKey);
POSEDIFF_DEFINE_ERROR(InvalidValue);
POSEDIFF_DEFINE_ERROR(UnknownCommand);

#undef POSEDIFF_DEFINE_ERROR

}  // namespace posediff
