#pragma once

#include <stdexcept>
#include <string>

namespace scanflow {

// Every failure raised by the library derives from Error so callers can
// catch the family or a specific condition.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SCANFLOW_DEFINE_ERROR(Name)          \
  class Name : public Error {                \
   public:                                   \
    explicit Name(const std::string& what)   \
        : Error(std::string(#Name ": ") + what) {} \
  }

// workflow graph
SCANFLOW_DEFINE_ERROR(DuplicateNode);
SCANFLOW_DEFINE_ERROR(UnknownNode);
SCANFLOW_DEFINE_ERROR(CycleDetected);
SCANFLOW_DEFINE_ERROR(ConfigError);

// runtime
SCANFLOW_DEFINE_ERROR(SpawnError);
SCANFLOW_DEFINE_ERROR(Timeout);
SCANFLOW_DEFINE_ERROR(TrackerUnavailable);

// tracker / feedback
SCANFLOW_DEFINE_ERROR(NotFound);
SCANFLOW_DEFINE_ERROR(Conflict);
SCANFLOW_DEFINE_ERROR(IoError);
SCANFLOW_DEFINE_ERROR(DuplicateBatch);
SCANFLOW_DEFINE_ERROR(Incomplete);
SCANFLOW_DEFINE_ERROR(NotAnImprovement);

// data
SCANFLOW_DEFINE_ERROR(FormatError);
SCANFLOW_DEFINE_ERROR(InvalidSpec);

// numerics
SCANFLOW_DEFINE_ERROR(ShapeError);
SCANFLOW_DEFINE_ERROR(DomainError);
SCANFLOW_DEFINE_ERROR(InvalidConfig);
SCANFLOW_DEFINE_ERROR(TrainingDiverged);
SCANFLOW_DEFINE_ERROR(PairingError);
SCANFLOW_DEFINE_ERROR(InvalidLabel);
SCANFLOW_DEFINE_ERROR(EmptyInput);
SCANFLOW_DEFINE_ERROR(InvalidBandwidth);
SCANFLOW_DEFINE_ERROR(EmptyCriticalSet);
SCANFLOW_DEFINE_ERROR(EmptyFeedback);
SCANFLOW_DEFINE_ERROR(ConfigMismatch);

#undef SCANFLOW_DEFINE_ERROR

}  // namespace scanflow
