#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace tsvit {

/// Training allocates and frees many multi-megabyte activations per batch.
/// With glibc defaults each of those is a fresh mmap whose pages fault in
/// again on every use; keeping them on the heap roughly halves step time.
/// Call once from main(); a no-op on other C libraries.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace tsvit
