#pragma once

namespace sadi {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace sadi
