#pragma once

#include <json.hpp>

namespace lbgen {

// Library release; bump when any serialized format changes shape.
inline constexpr const char* kVersion = "0.1.0";

// Format tags riding along in run metadata so artifacts are self-describing.
inline constexpr const char* kCheckpointFormat = "LBTD0001";

inline nlohmann::json version_info() {
    return nlohmann::json{{"lbgen", kVersion}, {"checkpoint_format", kCheckpointFormat}};
}

}  // namespace lbgen
