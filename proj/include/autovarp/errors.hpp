#pragma once

#include <stdexcept>
#include <string>

namespace avp {

// Base class for all errors raised by the library. Every failure mode maps
// to one of the classes below; callers can catch the base to get uniform
// reporting at the CLI boundary.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// --- input files ---
struct ParseError : Error {
    using Error::Error;
};
struct SchemaError : Error {
    using Error::Error;
};
struct ReferenceError : Error {
    using Error::Error;
};
struct IOError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};

// --- mesh / geometry ---
struct GeometryError : Error {
    using Error::Error;
};
struct EmptyElectrode : Error {
    using Error::Error;
};
struct MissingUVC : Error {
    using Error::Error;
};
struct UnknownCavity : Error {
    using Error::Error;
};
struct UncoveredTag : Error {
    using Error::Error;
};
struct SingularElement : Error {
    using Error::Error;
};

// --- solver / models ---
struct NumericalBlowup : Error {
    using Error::Error;
};
struct LinearSolveFailure : Error {
    using Error::Error;
};
struct LossOfCapture : Error {
    using Error::Error;
};
struct NoPropagation : Error {
    using Error::Error;
};
struct UnknownFunction : Error {
    using Error::Error;
};
struct MissingTrajectory : Error {
    using Error::Error;
};
struct TuningDiverged : Error {
    using Error::Error;
};

// --- checkpoints / staging ---
struct VersionMismatch : Error {
    using Error::Error;
};
struct NodeCountMismatch : Error {
    using Error::Error;
};
struct MissingUpstream : Error {
    using Error::Error;
};
struct MissingData : Error {
    using Error::Error;
};

}  // namespace avp
