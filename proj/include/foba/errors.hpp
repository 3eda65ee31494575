#pragma once

#include <stdexcept>
#include <string>

namespace foba {

// Base class for all typed failures raised by the library. The CLI maps
// categories onto exit codes, tests catch the concrete types.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define FOBA_ERROR_TYPE(Name)                 \
    struct Name : Error {                     \
        using Error::Error;                   \
    }

FOBA_ERROR_TYPE(ShapeMismatch);
FOBA_ERROR_TYPE(ChannelMismatch);
FOBA_ERROR_TYPE(GroupMismatch);
FOBA_ERROR_TYPE(LabelOutOfRange);
FOBA_ERROR_TYPE(MaskInconsistent);
FOBA_ERROR_TYPE(NonFiniteGradient);
FOBA_ERROR_TYPE(NonFiniteAttention);
FOBA_ERROR_TYPE(NonFiniteState);
FOBA_ERROR_TYPE(NonFiniteLoss);
FOBA_ERROR_TYPE(DegenerateTarget);
FOBA_ERROR_TYPE(DegenerateMetric);
FOBA_ERROR_TYPE(MissingFile);
FOBA_ERROR_TYPE(UnknownColor);
FOBA_ERROR_TYPE(EmptySplit);
FOBA_ERROR_TYPE(ConfigError);
FOBA_ERROR_TYPE(IoError);

#undef FOBA_ERROR_TYPE

}  // namespace foba
