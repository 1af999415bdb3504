#pragma once

#include <stdexcept>
#include <string>

namespace dfgp {

/// Base class for all library errors.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
  public:
    using Error::Error;
};

/// A footprint references a BAU outside the grid, a masked BAU, or repeats an index.
class InvalidFootprint : public Error {
  public:
    using Error::Error;
};

/// Adjacency structure defect, e.g. an isolated BAU.
class StructureError : public Error {
  public:
    StructureError(const std::string& what, long bau) : Error(what), bau_(bau) {}
    long bau() const noexcept { return bau_; }

  private:
    long bau_;
};

/// Parameter outside its admissible range (e.g. gamma, variances).
class InvalidParameter : public Error {
  public:
    using Error::Error;
};

/// Factorization or solve failed. `time()` is the 1-based time step, 0 if not time-specific.
class NumericalError : public Error {
  public:
    explicit NumericalError(const std::string& what, int time = 0)
        : Error(time > 0 ? what + " (t=" + std::to_string(time) + ")" : what), time_(time) {}
    int time() const noexcept { return time_; }

  private:
    int time_;
};

class IoError : public Error {
  public:
    using Error::Error;
};

}  // namespace dfgp
