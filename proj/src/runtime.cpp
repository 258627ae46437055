#include "bevfuse/runtime.hpp"

#include <malloc.h>

namespace bevfuse {

bool keep_heap_resident() {
  // 32 MiB is the largest mmap threshold glibc accepts on 64-bit targets.
  bool ok = mallopt(M_MMAP_THRESHOLD, 32 << 20) == 1;
  ok = mallopt(M_TRIM_THRESHOLD, 512 << 20) == 1 && ok;
  ok = mallopt(M_TOP_PAD, 64 << 20) == 1 && ok;
  return ok;
}

}  // namespace bevfuse
