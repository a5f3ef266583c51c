#pragma once

#include <stdexcept>
#include <string>

namespace oudefend {

// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define OUDEFEND_DEFINE_ERROR(Name)            \
  class Name : public Error {                  \
   public:                                     \
    explicit Name(const std::string& what)     \
        : Error(std::string(#Name ": ") + what) {} \
  }

OUDEFEND_DEFINE_ERROR(ShapeError);
OUDEFEND_DEFINE_ERROR(AxisError);
OUDEFEND_DEFINE_ERROR(TapeConsumedError);
OUDEFEND_DEFINE_ERROR(StatError);
OUDEFEND_DEFINE_ERROR(LabelError);
OUDEFEND_DEFINE_ERROR(ConfigError);
OUDEFEND_DEFINE_ERROR(FormatError);
OUDEFEND_DEFINE_ERROR(ParamError);
OUDEFEND_DEFINE_ERROR(ArityError);

#undef OUDEFEND_DEFINE_ERROR

}  // namespace oudefend
