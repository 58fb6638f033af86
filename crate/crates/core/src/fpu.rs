//! Scoped flush-to-zero for the hot loops.
//!
//! Once a model sharpens, attention weights and gradients drift into the subnormal
//! range, where x86 arithmetic runs many times slower. Values that small carry no
//! signal in single precision, so model work runs with subnormals flushed to zero.

/// Sets flush-to-zero and denormals-are-zero on this thread until dropped.
///
/// A no-op on targets without an SSE control register.
#[must_use = "flushing stops when the guard is dropped"]
pub struct FlushGuard {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
const FTZ_DAZ: u32 = 0x8040;

impl FlushGuard {
    #[allow(deprecated)]
    pub fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // SAFETY: only the denormal-handling bits of this thread's MXCSR change,
            // and they are restored on drop.
            unsafe {
                let saved = _mm_getcsr();
                _mm_setcsr(saved | FTZ_DAZ);
                Self { saved }
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        Self {}
    }
}

impl Default for FlushGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushGuard {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved);
        }
    }
}
