//! Key-frame selection for the human annotation stages.

use alloc::vec::Vec;

use crate::tracking::Track;

/// Default number of key-frames shown to annotators.
pub const DEFAULT_KEYFRAMES: usize = 6;

/// Up to `k` frame ids regularly spaced over the track's detections (by
/// position in the track). `k = 1` picks the middle detection.
pub fn select_keyframes(track: &Track, k: usize) -> Vec<u32> {
    let ids: Vec<u32> = track.frame_ids().collect();
    let n = ids.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    if k >= n {
        return ids;
    }
    if k == 1 {
        return alloc::vec![ids[(n - 1) / 2]];
    }
    let mut out: Vec<u32> = (0..k)
        .map(|i| {
            let pos = libm::round(i as f64 * (n - 1) as f64 / (k - 1) as f64) as usize;
            ids[pos.min(n - 1)]
        })
        .collect();
    out.dedup();
    out
}
