#pragma once

#include <stdexcept>
#include <string>

namespace uwsdf {

// Base of every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class FormatError : public Error { using Error::Error; };
class TruncationError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class BoundsError : public Error { using Error::Error; };
class DegenerateSceneError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class MissError : public Error { using Error::Error; };
class EmptyMaskError : public Error { using Error::Error; };
class EmptySurfaceError : public Error { using Error::Error; };

// Non-finite value in parameters or a loss term.
class NumericError : public Error { using Error::Error; };

}  // namespace uwsdf
