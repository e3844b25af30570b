#pragma once

namespace elgan {

/// Keeps large tensor buffers in the malloc heap instead of fresh mmap pages,
/// so repeated training steps reuse memory rather than page-faulting it in.
/// Safe to call more than once; a no-op where mallopt is unavailable.
void tune_allocator();

}  // namespace elgan
