//! Predefined scale schedules.
//!
//! Fifteen tabulated aspect ratios, thirteen scales each. The final scale
//! times the ×16 pixel downsampling gives the output resolution (64×64 →
//! 1024×1024 for the square schedule); truncating to K=10 yields 512×512.
//! Per-scale areas at the final level sit near 4000 for every ratio so
//! packed training sequences stay comparable in length.

use crate::error::{Error, Result};

/// Spatial downsampling between pixel space and the latent grid.
pub const PIXEL_DOWNSAMPLE: usize = 16;

/// Maximum tabulated scale count.
pub const MAX_SCALES: usize = 13;

/// The built-in schedule table: (aspect ratio, 13 (h, w) entries).
pub const SCHEDULE_TABLE: [(f64, [(usize, usize); MAX_SCALES]); 15] = [
    (1.000, [(1, 1), (2, 2), (4, 4), (6, 6), (8, 8), (12, 12), (16, 16), (20, 20), (24, 24), (32, 32), (40, 40), (48, 48), (64, 64)]),
    (0.800, [(1, 1), (2, 2), (3, 3), (4, 5), (8, 10), (12, 15), (16, 20), (20, 25), (24, 30), (28, 35), (36, 45), (44, 55), (56, 70)]),
    (1.250, [(1, 1), (2, 2), (3, 3), (5, 4), (10, 8), (15, 12), (20, 16), (25, 20), (30, 24), (35, 28), (45, 36), (55, 44), (70, 56)]),
    (0.750, [(1, 1), (2, 2), (3, 4), (6, 8), (9, 12), (12, 16), (15, 20), (18, 24), (21, 28), (27, 36), (36, 48), (45, 60), (54, 72)]),
    (1.333, [(1, 1), (2, 2), (4, 3), (8, 6), (12, 9), (16, 12), (20, 15), (24, 18), (28, 21), (36, 27), (48, 36), (60, 45), (72, 54)]),
    (0.666, [(1, 1), (2, 2), (2, 3), (4, 6), (6, 9), (10, 15), (14, 21), (18, 27), (22, 33), (26, 39), (32, 48), (42, 63), (52, 78)]),
    (1.500, [(1, 1), (2, 2), (3, 2), (6, 4), (9, 6), (15, 10), (21, 14), (27, 18), (33, 22), (39, 26), (48, 32), (63, 42), (78, 52)]),
    (0.571, [(1, 1), (2, 2), (3, 3), (4, 7), (6, 11), (8, 14), (12, 21), (16, 28), (20, 35), (24, 42), (32, 56), (40, 70), (48, 84)]),
    (1.750, [(1, 1), (2, 2), (3, 3), (7, 4), (11, 6), (14, 8), (21, 12), (28, 16), (35, 20), (42, 24), (56, 32), (70, 40), (84, 48)]),
    (0.500, [(1, 1), (2, 2), (2, 4), (3, 6), (5, 10), (8, 16), (11, 22), (15, 30), (19, 38), (23, 46), (30, 60), (37, 74), (45, 90)]),
    (2.000, [(1, 1), (2, 2), (4, 2), (6, 3), (10, 5), (16, 8), (22, 11), (30, 15), (38, 19), (46, 23), (60, 30), (74, 37), (90, 45)]),
    (0.400, [(1, 1), (2, 2), (2, 5), (4, 10), (6, 15), (8, 20), (10, 25), (12, 30), (16, 40), (20, 50), (26, 65), (32, 80), (40, 100)]),
    (2.500, [(1, 1), (2, 2), (5, 2), (10, 4), (15, 6), (20, 8), (25, 10), (30, 12), (40, 16), (50, 20), (65, 26), (80, 32), (100, 40)]),
    (0.333, [(1, 1), (2, 2), (2, 6), (3, 9), (5, 15), (7, 21), (9, 27), (12, 36), (15, 45), (18, 54), (24, 72), (30, 90), (37, 111)]),
    (3.000, [(1, 1), (2, 2), (6, 2), (9, 3), (15, 5), (21, 7), (27, 9), (36, 12), (45, 15), (54, 18), (72, 24), (90, 30), (111, 37)]),
];

/// Ordered (h_k, w_k) resolutions for one aspect ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSchedule {
    ratio: f64,
    entries: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    /// First `scales` entries of the tabulated schedule for `aspect_ratio`.
    pub fn builtin(aspect_ratio: f64, scales: usize) -> Result<Self> {
        if scales == 0 || scales > MAX_SCALES {
            return Err(Error::ScaleCountOutOfRange { requested: scales, max: MAX_SCALES });
        }
        let row = SCHEDULE_TABLE
            .iter()
            .find(|(r, _)| (r - aspect_ratio).abs() < 1e-3)
            .ok_or(Error::UnknownAspectRatio(aspect_ratio))?;
        Ok(ScaleSchedule { ratio: row.0, entries: row.1[..scales].to_vec() })
    }

    /// Schedule from explicit entries, e.g. for small training analogs.
    /// The declared ratio must match the larger scales.
    pub fn custom(ratio: f64, entries: Vec<(usize, usize)>) -> Result<Self> {
        let s = ScaleSchedule { ratio, entries };
        s.check()?;
        Ok(s)
    }

    /// Reconstruct a schedule from per-scale sizes (codes loaded from a
    /// file); the ratio is taken from the final scale.
    pub fn from_sizes(sizes: Vec<(usize, usize)>) -> Result<Self> {
        let last = *sizes.last().ok_or(Error::InvalidArgument {
            context: "ScaleSchedule",
            message: "empty size list".into(),
        })?;
        Self::custom(last.0 as f64 / last.1 as f64, sizes)
    }

    fn check(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidArgument { context: "ScaleSchedule", message };
        if self.entries.is_empty() {
            return Err(bad("no entries".into()));
        }
        let mut prev = (0usize, 0usize);
        for (k, &(h, w)) in self.entries.iter().enumerate() {
            if h == 0 || w == 0 {
                return Err(bad(format!("zero extent at scale {}", k + 1)));
            }
            if h < prev.0 || w < prev.1 {
                return Err(bad(format!("extents decrease at scale {}", k + 1)));
            }
            // aspect consistency matters once the grid is big enough to
            // carry a meaningful ratio
            if k + 1 >= 4 {
                let r = h as f64 / w as f64;
                if (r - self.ratio).abs() / self.ratio > 0.35 {
                    return Err(bad(format!(
                        "scale {} ratio {r:.3} strays from {:.3}",
                        k + 1,
                        self.ratio
                    )));
                }
            }
            prev = (h, w);
        }
        Ok(())
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> (usize, usize) {
        self.entries[k]
    }

    /// Latent grid size at the final scale.
    pub fn final_size(&self) -> (usize, usize) {
        *self.entries.last().unwrap()
    }

    /// Pixel resolution implied by the final scale (×16 per side).
    pub fn pixel_size(&self) -> (usize, usize) {
        let (h, w) = self.final_size();
        (h * PIXEL_DOWNSAMPLE, w * PIXEL_DOWNSAMPLE)
    }

    /// Σ_k h_k·w_k — the generation token count.
    pub fn total_tokens(&self) -> usize {
        self.entries.iter().map(|&(h, w)| h * w).sum()
    }

    /// Truncate to the first `scales` entries.
    pub fn truncated(&self, scales: usize) -> Result<Self> {
        if scales == 0 || scales > self.entries.len() {
            return Err(Error::ScaleCountOutOfRange { requested: scales, max: self.entries.len() });
        }
        Ok(ScaleSchedule { ratio: self.ratio, entries: self.entries[..scales].to_vec() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_schedule_resolutions() {
        let full = ScaleSchedule::builtin(1.0, 13).unwrap();
        assert_eq!(full.final_size(), (64, 64));
        assert_eq!(full.pixel_size(), (1024, 1024));
        let half = ScaleSchedule::builtin(1.0, 10).unwrap();
        assert_eq!(half.final_size(), (32, 32));
        assert_eq!(half.pixel_size(), (512, 512));
    }

    #[test]
    fn square_schedule_token_count() {
        let full = ScaleSchedule::builtin(1.0, 13).unwrap();
        assert_eq!(full.total_tokens(), 10521);
    }

    #[test]
    fn all_rows_satisfy_the_type_invariants() {
        for &(ratio, _) in SCHEDULE_TABLE.iter() {
            let s = ScaleSchedule::builtin(ratio, 13).unwrap();
            s.check().unwrap();
            let (h, w) = s.final_size();
            let area = h * w;
            assert!((3800..=4200).contains(&area), "ratio {ratio}: final area {area}");
        }
    }

    #[test]
    fn unknown_ratio_and_bad_scale_counts_error() {
        assert!(matches!(
            ScaleSchedule::builtin(0.9, 13),
            Err(Error::UnknownAspectRatio(_))
        ));
        assert!(ScaleSchedule::builtin(1.0, 0).is_err());
        assert!(ScaleSchedule::builtin(1.0, 14).is_err());
    }

    #[test]
    fn custom_rejects_decreasing_and_skewed_entries() {
        assert!(ScaleSchedule::custom(1.0, vec![(2, 2), (1, 1)]).is_err());
        assert!(ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2), (4, 4), (4, 16)]).is_err());
        assert!(ScaleSchedule::custom(1.0, vec![(1, 1), (2, 2), (4, 4), (8, 8)]).is_ok());
    }
}
