#pragma once

#include <stdexcept>
#include <string>

namespace stylefuse {

// Error taxonomy mirrored by the CLI exit-code table:
//   2 validation/config, 3 overwrite guard, 4 plugin failure, 5 training invariant.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

struct OverwriteRefused : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PluginError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvariantViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace stylefuse
