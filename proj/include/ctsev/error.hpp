#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace ctsev {

/// Base of every error the library raises.
///
/// The message is mutable so that outer stages can attach context (for
/// example the patient id) and rethrow the same object with `throw;`,
/// which keeps the dynamic type intact for callers that dispatch on it.
class Error : public std::exception {
 public:
  explicit Error(std::string message) : message_(std::move(message)) {}

  const char* what() const noexcept override { return message_.c_str(); }

  void add_context(const std::string& context) {
    message_ = context + ": " + message_;
  }

 private:
  std::string message_;
};

#define CTSEV_DEFINE_ERROR(Name, Base)        \
  class Name : public Base {                  \
   public:                                    \
    using Base::Base;                         \
  }

// Validation errors (bad shapes, labels, configs, malformed documents).
CTSEV_DEFINE_ERROR(ShapeError, Error);
CTSEV_DEFINE_ERROR(AxisError, Error);
CTSEV_DEFINE_ERROR(LabelError, Error);
CTSEV_DEFINE_ERROR(ConfigError, Error);
CTSEV_DEFINE_ERROR(FormatError, Error);
CTSEV_DEFINE_ERROR(DuplicateIdError, FormatError);
CTSEV_DEFINE_ERROR(MissingSliceError, FormatError);
CTSEV_DEFINE_ERROR(SizeMismatchError, FormatError);
CTSEV_DEFINE_ERROR(EmptyBodyError, Error);
CTSEV_DEFINE_ERROR(InsufficientDepthError, Error);
CTSEV_DEFINE_ERROR(InsufficientClassError, Error);
CTSEV_DEFINE_ERROR(SamplerError, Error);
CTSEV_DEFINE_ERROR(CacheError, Error);
CTSEV_DEFINE_ERROR(SpecError, Error);

// Checkpoint failures, each distinguishable.
CTSEV_DEFINE_ERROR(CheckpointError, Error);
CTSEV_DEFINE_ERROR(CheckpointVersionError, CheckpointError);
CTSEV_DEFINE_ERROR(CheckpointDigestError, CheckpointError);
CTSEV_DEFINE_ERROR(CheckpointTruncatedError, CheckpointError);

// Filesystem failures. The CLI maps these to exit status 2.
CTSEV_DEFINE_ERROR(IoError, Error);

#undef CTSEV_DEFINE_ERROR

}  // namespace ctsev
