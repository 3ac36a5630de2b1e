#pragma once

#include <stdexcept>
#include <string>

namespace residscope {

// Base for all library errors. The CLI maps the two subclasses to distinct
// exit codes (validation -> 2, I/O -> 3).
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed data, bad coordinates, violated invariants.
struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error(msg) {}
};

// Intervention coordinates out of range, non-causal edges, conflicts.
struct InterventionError : ValidationError {
    explicit InterventionError(const std::string& msg) : ValidationError(msg) {}
};

// Missing files, truncated tensors, unwritable paths.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace residscope
