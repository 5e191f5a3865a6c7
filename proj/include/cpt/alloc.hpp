#pragma once

// Allocator tuning for the many short-lived, mid-sized tensors of a training
// step: with glibc's defaults every large buffer is an mmap/munmap pair.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cpt {

inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

}  // namespace cpt
