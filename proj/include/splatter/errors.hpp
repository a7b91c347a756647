// Copyright Contributors to the splatter Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace splatter {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A value violates a documented precondition (non-finite input, bad range, ...).
class InvalidParameter : public Error {
  public:
    using Error::Error;
};

/// Computation would divide by (or invert) something numerically zero.
class NumericalDegeneracy : public Error {
  public:
    using Error::Error;
};

class UnsupportedOrder : public Error {
  public:
    using Error::Error;
};

/// Two objects expressed in different coordinate frames were combined.
class FrameMismatch : public Error {
  public:
    using Error::Error;
};

class DimensionMismatch : public Error {
  public:
    using Error::Error;
};

/// Malformed binary payload; carries the byte offset at which parsing failed.
class ParseError : public Error {
  public:
    enum class Kind { BadMagic, VersionMismatch, Truncated, InvalidChannelCount, NonFinite, Invalid };

    ParseError(Kind kind, std::size_t offset, const std::string &what)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), mKind(kind),
          mOffset(offset) {}

    Kind kind() const noexcept { return mKind; }
    std::size_t offset() const noexcept { return mOffset; }

  private:
    Kind mKind;
    std::size_t mOffset;
};

/// I/O failure on the filesystem (open/read/write).
class IoError : public Error {
  public:
    using Error::Error;
};

/// An optimizer step saw a non-finite gradient; the step was not applied.
class NonFiniteGradient : public Error {
  public:
    NonFiniteGradient(std::size_t index, const std::string &what)
        : Error(what + " (parameter index " + std::to_string(index) + ")"), mIndex(index) {}

    std::size_t index() const noexcept { return mIndex; }

  private:
    std::size_t mIndex;
};

} // namespace splatter
