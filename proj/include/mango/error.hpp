#pragma once

#include <stdexcept>
#include <string>

namespace mango {

// Stable categories; the C API maps each one onto a mango_status code.
enum class ErrorKind {
  kDimension,
  kContract,
  kPartition,
  kLayout,
  kSingularity,
  kNumeric,
  kFormat,
  kConfig,
  kInput,
  kOracle,
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define MANGO_DEFINE_ERROR(Name, Kind)                                 \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

MANGO_DEFINE_ERROR(DimensionError, kDimension)
MANGO_DEFINE_ERROR(ContractError, kContract)
MANGO_DEFINE_ERROR(PartitionError, kPartition)
MANGO_DEFINE_ERROR(LayoutError, kLayout)
MANGO_DEFINE_ERROR(SingularityError, kSingularity)
MANGO_DEFINE_ERROR(NumericError, kNumeric)
MANGO_DEFINE_ERROR(FormatError, kFormat)
MANGO_DEFINE_ERROR(ConfigError, kConfig)
MANGO_DEFINE_ERROR(InputError, kInput)
MANGO_DEFINE_ERROR(OracleError, kOracle)
MANGO_DEFINE_ERROR(IoError, kIo)

#undef MANGO_DEFINE_ERROR

}  // namespace mango
