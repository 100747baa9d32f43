pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod objectives;
mod params;
pub mod tensor;
pub mod trainer;

/// Keeps freed heap memory mapped between steps.
///
/// Training allocates and frees the same large buffers every step; with the
/// default glibc thresholds each of them is returned to the kernel and
/// faulted back in. Call once at program start. No-op off glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        extern "C" {
            fn mallopt(param: i32, value: i32) -> i32;
        }
        const M_TRIM_THRESHOLD: i32 = -1;
        const M_TOP_PAD: i32 = -2;
        const M_MMAP_THRESHOLD: i32 = -3;
        // SAFETY: mallopt only adjusts allocator tunables.
        unsafe {
            mallopt(M_MMAP_THRESHOLD, 256 << 20);
            mallopt(M_TRIM_THRESHOLD, i32::MAX);
            mallopt(M_TOP_PAD, 64 << 20);
        }
    }
}
