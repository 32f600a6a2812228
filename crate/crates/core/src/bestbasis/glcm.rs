//! Grey-level co-occurrence statistics at unit displacement.

use serde::{Deserialize, Serialize};

use super::SignatureKind;
use crate::error::{Error, Result};
use crate::raster::RasterImage;

pub const DEFAULT_GLCM_LEVELS: usize = 32;

/// Orientations in degrees with their `(dx, dy)` displacement; image rows grow
/// downwards so 45° points up and to the right.
pub const GLCM_ANGLES: [(u16, isize, isize); 4] = [(0, 1, 0), (45, 1, -1), (90, 0, -1), (135, -1, -1)];

/// Statistics per orientation.
pub const GLCM_STATS: [GlcmStat; 4] = [
    GlcmStat::Correlation,
    GlcmStat::Energy,
    GlcmStat::Dissimilarity,
    GlcmStat::Homogeneity,
];

/// Values emitted per subband.
pub const GLCM_FEATURES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GlcmStat {
    Correlation,
    /// Angular second moment.
    Energy,
    Dissimilarity,
    Homogeneity,
}

impl GlcmStat {
    pub fn as_str(self) -> &'static str {
        match self {
            GlcmStat::Correlation => "corr",
            GlcmStat::Energy => "asm",
            GlcmStat::Dissimilarity => "diss",
            GlcmStat::Homogeneity => "homog",
        }
    }
}

/// Provenance kind of the `i`-th value of [`glcm_features`]; values are
/// grouped by orientation.
pub fn kind_of(i: usize) -> SignatureKind {
    SignatureKind::Glcm(GLCM_STATS[i % 4], GLCM_ANGLES[i / 4].0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlcmFeatures {
    /// `[corr, asm, diss, homog]` for 0°, then 45°, 90°, 135°.
    pub values: [f64; GLCM_FEATURES],
    /// Set when some orientation had zero grey-level variance, so its
    /// correlation was reported as 0.
    pub degenerate: bool,
}

/// Linear min-max quantisation onto `0..levels`. Constant input maps to 0.
pub fn quantize(img: &RasterImage, levels: usize) -> Vec<usize> {
    let (lo, hi) = img.min_max();
    let span = hi - lo;
    img.data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span * levels as f64) as usize).min(levels - 1)
            } else {
                0
            }
        })
        .collect()
}

/// Symmetric co-occurrence counts, row-major `levels x levels`.
pub fn cooccurrence(q: &[usize], width: usize, height: usize, levels: usize, dx: isize, dy: isize) -> Vec<f64> {
    let mut m = vec![0.0; levels * levels];
    for y in 0..height as isize {
        let y2 = y + dy;
        if y2 < 0 || y2 >= height as isize {
            continue;
        }
        for x in 0..width as isize {
            let x2 = x + dx;
            if x2 < 0 || x2 >= width as isize {
                continue;
            }
            let a = q[y as usize * width + x as usize];
            let b = q[y2 as usize * width + x2 as usize];
            m[a * levels + b] += 1.0;
            m[b * levels + a] += 1.0;
        }
    }
    m
}

/// `(correlation, asm, dissimilarity, homogeneity, degenerate)` of a count matrix.
fn matrix_stats(m: &[f64], levels: usize) -> (f64, f64, f64, f64, bool) {
    let total: f64 = m.iter().sum();
    if total == 0.0 {
        return (0.0, 0.0, 0.0, 0.0, true);
    }
    let (mut mu, mut asm, mut diss, mut homog) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let p = m[i * levels + j] / total;
            if p == 0.0 {
                continue;
            }
            let d = i as f64 - j as f64;
            mu += i as f64 * p;
            asm += p * p;
            diss += p * d.abs();
            homog += p / (1.0 + d * d);
        }
    }
    let (mut var, mut cov) = (0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let p = m[i * levels + j] / total;
            if p == 0.0 {
                continue;
            }
            var += p * (i as f64 - mu).powi(2);
            cov += p * (i as f64 - mu) * (j as f64 - mu);
        }
    }
    if var <= 1e-15 {
        (0.0, asm, diss, homog, true)
    } else {
        (cov / var, asm, diss, homog, false)
    }
}

/// Correlation, energy, dissimilarity and homogeneity at four orientations.
pub fn glcm_features(subband: &RasterImage, levels: usize) -> Result<GlcmFeatures> {
    if levels < 2 {
        return Err(Error::Parameter(format!(
            "GLCM quantisation needs at least 2 levels, got {levels}"
        )));
    }
    let q = quantize(subband, levels);
    let mut values = [0.0; GLCM_FEATURES];
    let mut degenerate = false;
    for (o, &(_, dx, dy)) in GLCM_ANGLES.iter().enumerate() {
        let m = cooccurrence(&q, subband.width(), subband.height(), levels, dx, dy);
        let (corr, asm, diss, homog, flat) = matrix_stats(&m, levels);
        values[o * 4..o * 4 + 4].copy_from_slice(&[corr, asm, diss, homog]);
        degenerate |= flat;
    }
    Ok(GlcmFeatures { values, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_image() {
        let img = RasterImage::filled(8, 8, 3.5).unwrap();
        let f = glcm_features(&img, 32).unwrap();
        assert!(f.degenerate);
        for o in 0..4 {
            assert_eq!(&f.values[o * 4..o * 4 + 4], &[0.0, 1.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn alternating_rows_vertical_pairs() {
        let img = RasterImage::from_fn(6, 6, |_, y| (y % 2) as f64).unwrap();
        let f = glcm_features(&img, 2).unwrap();
        let vertical = &f.values[8..12];
        assert_eq!(vertical[2], 1.0);
        assert_eq!(vertical[3], 0.5);
        assert_eq!(vertical[0], -1.0);
        // horizontal neighbours are identical
        assert_eq!(f.values[2], 0.0);
        assert_eq!(f.values[3], 1.0);
        assert_eq!(f.values[0], 1.0);
        assert!(!f.degenerate);
    }

    #[test]
    fn rejects_single_level() {
        let img = RasterImage::filled(4, 4, 0.0).unwrap();
        assert!(glcm_features(&img, 1).is_err());
    }

    #[test]
    fn provenance_layout() {
        assert_eq!(kind_of(0), SignatureKind::Glcm(GlcmStat::Correlation, 0));
        assert_eq!(kind_of(7), SignatureKind::Glcm(GlcmStat::Homogeneity, 45));
        assert_eq!(kind_of(14), SignatureKind::Glcm(GlcmStat::Dissimilarity, 135));
    }

    proptest! {
        #[test]
        fn matrices_symmetric_and_stats_bounded(vals in proptest::collection::vec(-50.0f64..50.0, 49)) {
            let img = RasterImage::new(7, 7, vals).unwrap();
            let q = quantize(&img, 8);
            for &(_, dx, dy) in &GLCM_ANGLES {
                let m = cooccurrence(&q, 7, 7, 8, dx, dy);
                for i in 0..8 {
                    for j in 0..8 {
                        prop_assert_eq!(m[i * 8 + j], m[j * 8 + i]);
                    }
                }
            }
            let f = glcm_features(&img, 8).unwrap();
            for o in 0..4 {
                let s = &f.values[o * 4..o * 4 + 4];
                prop_assert!(s[0].abs() <= 1.0 + 1e-9);
                prop_assert!(s[1] > 0.0 && s[1] <= 1.0);
                prop_assert!(s[2] >= 0.0 && s[3] > 0.0 && s[3] <= 1.0);
            }
        }
    }
}
