#include "elgan/runtime.hpp"

#include <limits>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace elgan {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace elgan
