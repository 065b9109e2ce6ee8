// Process-level tuning for the executables.
#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace probelab {

/// Raises glibc's mmap and trim thresholds so large tensor buffers are
/// reused from the heap rather than mapped and unmapped per allocation.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace probelab
