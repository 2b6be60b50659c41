//! Allocator settings for the tape.
//!
//! Every op allocates fresh value and gradient buffers. With glibc defaults
//! buffers above 128 KiB are mapped and unmapped per call, so each step pays a
//! page fault per page touched.

/// Keeps large buffers on the heap and stops returning freed memory to the
/// system. Idempotent; a no-op off glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
