#include "ctpseg/version.hpp"

#ifndef CTPSEG_VERSION_STRING
#define CTPSEG_VERSION_STRING "v0.1.0"
#endif

namespace ctpseg {

const char* version_string() { return CTPSEG_VERSION_STRING; }

}  // namespace ctpseg
