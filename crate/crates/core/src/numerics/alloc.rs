//! Allocator tuning for the training loop.
//!
//! The tape allocates and frees many same-sized buffers per step. With the
//! glibc defaults, buffers above the mmap threshold are mapped and unmapped
//! every time and the heap top is trimmed repeatedly, which shows up as
//! heavy system time. Raising both thresholds keeps freed memory in the heap.

/// Call once at process start. A no-op off glibc.
pub fn tune() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        // 32 MiB is the largest threshold glibc accepts on 64-bit targets
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}
