#pragma once

namespace sgm {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace sgm
