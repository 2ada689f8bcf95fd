#pragma once

#include <stdexcept>
#include <string>

namespace s3 {

// Root of every error the library throws. `kind()` is a stable short tag used
// by the CLI when it emits machine-readable failures.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define S3_DEFINE_ERROR(Name, tag)                                       \
    class Name : public Error {                                          \
    public:                                                              \
        explicit Name(const std::string& what) : Error(tag, what) {}     \
    }

S3_DEFINE_ERROR(DimensionError, "dimension");
S3_DEFINE_ERROR(ArgumentError, "argument");
S3_DEFINE_ERROR(DegenerateInputError, "degenerate_input");
S3_DEFINE_ERROR(NumericError, "numeric");
S3_DEFINE_ERROR(ParseError, "parse");
S3_DEFINE_ERROR(NotShareableError, "not_shareable");
S3_DEFINE_ERROR(PreconditionError, "precondition");
S3_DEFINE_ERROR(MissingArtifactError, "missing_artifact");
S3_DEFINE_ERROR(ConfigError, "config");
S3_DEFINE_ERROR(IoError, "io");

#undef S3_DEFINE_ERROR

}  // namespace s3
