#pragma once

namespace dcs {

/// Keeps freed tensor buffers in the process heap instead of returning them
/// to the OS. Training allocates and frees many multi-megabyte buffers per
/// step and otherwise spends much of its time in page faults. Call once at
/// program start.
void keep_heap_resident();

}  // namespace dcs
