#pragma once

namespace bevfuse {

// Keeps freed tensor buffers in the process heap instead of returning them to
// the OS after every op. Returns false if the allocator rejected a setting.
bool keep_heap_resident();

}  // namespace bevfuse
