//! Thread-local accounting of live activation bytes.
//!
//! Every [`crate::tensor::Tensor`] registers its payload size on allocation
//! and deregisters it on drop, so `peak_bytes()` reports the high-water mark
//! of f32 activation storage since the last `reset_peak()`. Counters are
//! per-thread; parallel scans account chunk buffers on their own threads.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(bytes: usize) {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

pub(crate) fn on_free(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// Live activation bytes on this thread.
pub fn current_bytes() -> usize {
    CURRENT.with(|c| c.get())
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(|p| p.get())
}

/// Reset the peak to the current live total.
pub fn reset_peak() {
    let now = current_bytes();
    PEAK.with(|p| p.set(now));
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tensor;

    #[test]
    fn peak_tracks_tensor_lifetimes() {
        super::reset_peak();
        let base = super::current_bytes();
        {
            let _t = Tensor::zeros(&[100, 4]);
            assert_eq!(super::current_bytes(), base + 1600);
        }
        assert_eq!(super::current_bytes(), base);
        assert!(super::peak_bytes() >= base + 1600);
    }
}
