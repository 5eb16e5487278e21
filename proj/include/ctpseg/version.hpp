#pragma once

namespace ctpseg {

// Build identifier embedded by CMake (git describe when available).
const char* version_string();

}  // namespace ctpseg
