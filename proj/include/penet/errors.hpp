#pragma once

#include <stdexcept>
#include <string>

namespace penet {

/// Caller passed arguments outside an operation's precondition.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operation invoked on an object in a state it cannot handle.
class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed scene, checkpoint or config file. `field()` names the offending part.
class FormatError : public std::runtime_error {
 public:
  FormatError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Episode could not be drawn; `class_id()` is the deficient global class or -1.
class EpisodeSamplingError : public std::runtime_error {
 public:
  EpisodeSamplingError(int class_id, const std::string& what)
      : std::runtime_error(what), class_id_(class_id) {}
  int class_id() const noexcept { return class_id_; }

 private:
  int class_id_;
};

/// Non-finite loss during optimization; `step()` is the offending step index.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(long step, const std::string& what)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace penet
