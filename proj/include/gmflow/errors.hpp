#pragma once

#include <stdexcept>
#include <string>

namespace gmflow {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor / layer shape contract violated.
struct ShapeMismatch : Error {
    using Error::Error;
};

// No model point falls inside the camera frustum.
struct DegenerateProjection : Error {
    using Error::Error;
};

// PnP needs at least 6 usable 2D-3D correspondences.
struct InsufficientCorrespondences : Error {
    using Error::Error;
};

// Normal equations of the Gauss-Newton step are numerically singular.
struct SingularNormalEquations : Error {
    using Error::Error;
};

// backward() called without a recorded forward graph.
struct GraphNotRecorded : Error {
    using Error::Error;
};

// Requested occlusion ratio cannot be realized.
struct UnreachableRatio : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Training loss became NaN/Inf; carries a diagnostic dump.
struct NonFiniteLoss : Error {
    using Error::Error;
};

}  // namespace gmflow
