//! Preprocessing: channel selection, morphological gradient, and the
//! lattice shear used for deformation-robustness experiments.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{mirror_index, ColorImage, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    R,
    G,
    /// Nuclei stain contrast is strongest in the blue plane.
    #[default]
    B,
    Gray,
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r" => Ok(Channel::R),
            "g" => Ok(Channel::G),
            "b" => Ok(Channel::B),
            "gray" | "grey" => Ok(Channel::Gray),
            other => Err(Error::Parameter(format!("unknown channel '{other}'"))),
        }
    }
}

/// Extracts one plane, or the unweighted mean of the three (rounded half up).
pub fn select_channel(img: &ColorImage, channel: Channel) -> Result<RasterImage> {
    let (w, h) = (img.width(), img.height());
    let bytes: Vec<f64> = match channel {
        Channel::R => img.plane(0).iter().map(|&v| v as f64).collect(),
        Channel::G => img.plane(1).iter().map(|&v| v as f64).collect(),
        Channel::B => img.plane(2).iter().map(|&v| v as f64).collect(),
        Channel::Gray => img
            .plane(0)
            .iter()
            .zip(img.plane(1))
            .zip(img.plane(2))
            .map(|((&r, &g), &b)| {
                let sum = r as u32 + g as u32 + b as u32;
                ((2 * sum + 3) / 6) as f64
            })
            .collect(),
    };
    RasterImage::new(w, h, bytes)
}

/// Flat square structuring element of ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    size: usize,
}

impl StructuringElement {
    pub fn square(size: usize) -> Result<Self> {
        if size < 3 || size % 2 == 0 {
            return Err(Error::Parameter(format!(
                "structuring element size must be odd and >= 3, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self { size: 5 }
    }
}

fn rank_filter_1d(
    src: &[f64],
    dst: &mut [f64],
    width: usize,
    height: usize,
    radius: usize,
    horizontal: bool,
    pick: fn(f64, f64) -> f64,
) {
    let r = radius as isize;
    for y in 0..height {
        for x in 0..width {
            let mut acc = src[y * width + x];
            for o in -r..=r {
                let v = if horizontal {
                    src[y * width + mirror_index(x as isize + o, width)]
                } else {
                    src[mirror_index(y as isize + o, height) * width + x]
                };
                acc = pick(acc, v);
            }
            dst[y * width + x] = acc;
        }
    }
}

fn separable_rank(img: &RasterImage, se: &StructuringElement, pick: fn(f64, f64) -> f64) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut tmp = vec![0.0; w * h];
    let mut out = vec![0.0; w * h];
    rank_filter_1d(img.data(), &mut tmp, w, h, se.radius(), true, pick);
    rank_filter_1d(&tmp, &mut out, w, h, se.radius(), false, pick);
    out
}

/// Grey dilation under a flat square element, mirror-extended at borders.
pub fn dilate(img: &RasterImage, se: &StructuringElement) -> RasterImage {
    let data = separable_rank(img, se, f64::max);
    RasterImage::new(img.width(), img.height(), data).expect("same shape")
}

/// Grey erosion under a flat square element, mirror-extended at borders.
pub fn erode(img: &RasterImage, se: &StructuringElement) -> RasterImage {
    let data = separable_rank(img, se, f64::min);
    RasterImage::new(img.width(), img.height(), data).expect("same shape")
}

/// Dilation minus erosion.
pub fn morphological_gradient(img: &RasterImage, se: &StructuringElement) -> Result<RasterImage> {
    if se.size() > img.width().min(img.height()) {
        return Err(Error::Parameter(format!(
            "structuring element {} larger than image {}x{}",
            se.size(),
            img.width(),
            img.height()
        )));
    }
    let d = separable_rank(img, se, f64::max);
    let e = separable_rank(img, se, f64::min);
    let data = d.iter().zip(&e).map(|(a, b)| a - b).collect();
    RasterImage::new(img.width(), img.height(), data)
}

/// Linear map `x' = a x + b y`, `y' = c x + d y` in cell-local pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shear {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Shear {
    pub const IDENTITY: Shear = Shear {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
    };

    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    /// Source coordinates for an output sample.
    pub fn inverse_map(&self, x: f64, y: f64) -> (f64, f64) {
        let det = self.det();
        (
            (self.d * x - self.b * y) / det,
            (-self.c * x + self.a * y) / det,
        )
    }
}

/// Side of the deformation lattice.
pub const LATTICE: usize = 4;

/// Pixel bounds `(x0, y0, x1, y1)` of a lattice cell; cells are numbered
/// row-major `0..16`.
pub fn lattice_cell(width: usize, height: usize, cell: usize) -> (usize, usize, usize, usize) {
    let (row, col) = (cell / LATTICE, cell % LATTICE);
    (
        col * width / LATTICE,
        row * height / LATTICE,
        (col + 1) * width / LATTICE,
        (row + 1) * height / LATTICE,
    )
}

fn sample_bilinear(cell: &[f64], cw: usize, ch: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let at = |dx: isize, dy: isize| {
        cell[mirror_index(yi + dy, ch) * cw + mirror_index(xi + dx, cw)]
    };
    if fx == 0.0 && fy == 0.0 {
        return at(0, 0);
    }
    let top = at(0, 0) * (1.0 - fx) + at(1, 0) * fx;
    let bottom = at(0, 1) * (1.0 - fx) + at(1, 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Remaps the chosen lattice cells independently through `shear`, resampling
/// bilinearly with mirror extension at the cell borders. Unselected cells are
/// copied through unchanged.
pub fn shear_deform(img: &RasterImage, cells: &[usize], shear: Shear) -> Result<RasterImage> {
    if shear.det().abs() < 1e-12 || !shear.det().is_finite() {
        return Err(Error::Parameter(format!(
            "shear matrix is singular (det = {})",
            shear.det()
        )));
    }
    if img.width() < LATTICE || img.height() < LATTICE {
        return Err(Error::Parameter(format!(
            "image {}x{} too small for a {LATTICE}x{LATTICE} lattice",
            img.width(),
            img.height()
        )));
    }
    if let Some(&bad) = cells.iter().find(|&&c| c >= LATTICE * LATTICE) {
        return Err(Error::Parameter(format!("lattice cell {bad} out of range 0..16")));
    }
    let mut out = img.clone();
    for &cell in cells {
        let (x0, y0, x1, y1) = lattice_cell(img.width(), img.height(), cell);
        let (cw, ch) = (x1 - x0, y1 - y0);
        let local: Vec<f64> = (0..ch)
            .flat_map(|y| (0..cw).map(move |x| (x, y)))
            .map(|(x, y)| img.get(x0 + x, y0 + y))
            .collect();
        for y in 0..ch {
            for x in 0..cw {
                let (sx, sy) = shear.inverse_map(x as f64, y as f64);
                out.set(x0 + x, y0 + y, sample_bilinear(&local, cw, ch, sx, sy));
            }
        }
    }
    Ok(out)
}

/// Picks `count` distinct lattice cells.
pub fn pick_cells<R: Rng>(rng: &mut R, count: usize) -> Vec<usize> {
    let mut cells = sample(rng, LATTICE * LATTICE, count.min(LATTICE * LATTICE)).into_vec();
    cells.sort_unstable();
    cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;

    fn uniform_color(r: u8, g: u8, b: u8, w: usize, h: usize) -> ColorImage {
        ColorImage::new(w, h, vec![r; w * h], vec![g; w * h], vec![b; w * h]).unwrap()
    }

    #[test]
    fn blue_plane_extracted() {
        let img = uniform_color(0, 0, 200, 4, 3);
        let out = select_channel(&img, Channel::B).unwrap();
        assert!(out.data().iter().all(|&v| v == 200.0));
        assert_eq!(Channel::default(), Channel::B);
    }

    #[test]
    fn gray_is_rounded_mean() {
        let out = select_channel(&uniform_color(30, 60, 90, 2, 2), Channel::Gray).unwrap();
        assert!(out.data().iter().all(|&v| v == 60.0));
        // 1+1+2 = 4, 4/3 = 1.33 -> 1; 1+2+2 = 5, 5/3 = 1.67 -> 2; 0+0+1 -> 0.33 -> 0
        let img = ColorImage::new(3, 1, vec![1, 1, 0], vec![1, 2, 0], vec![2, 2, 1]).unwrap();
        let out = select_channel(&img, Channel::Gray).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 0.0]);
    }

    #[test]
    fn structuring_element_validation() {
        assert!(StructuringElement::square(4).is_err());
        assert!(StructuringElement::square(1).is_err());
        assert_eq!(StructuringElement::default().size(), 5);
        let img = RasterImage::filled(4, 8, 1.0).unwrap();
        assert!(morphological_gradient(&img, &StructuringElement::default()).is_err());
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let img = RasterImage::filled(7, 6, 131.0).unwrap();
        let g = morphological_gradient(&img, &StructuringElement::default()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_impulse_is_se_block() {
        let mut img = RasterImage::filled(9, 9, 0.0).unwrap();
        img.set(4, 4, 255.0);
        let g = morphological_gradient(&img, &StructuringElement::default()).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let inside = (2..=6).contains(&x) && (2..=6).contains(&y);
                assert_eq!(g.get(x, y), if inside { 255.0 } else { 0.0 }, "({x},{y})");
            }
        }
    }

    #[test]
    fn colour_constant_pipeline_gives_zero() {
        let img = uniform_color(12, 77, 201, 8, 8);
        for ch in [Channel::R, Channel::G, Channel::B, Channel::Gray] {
            let plane = select_channel(&img, ch).unwrap();
            let g = morphological_gradient(&plane, &StructuringElement::default()).unwrap();
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shear_samples_mirror_extended_source() {
        // one 32x32 cell in a 128x128 image; cell 0 occupies [0,32)x[0,32)
        let img = RasterImage::from_fn(128, 128, |x, y| (x * 1000 + y) as f64).unwrap();
        let shear = Shear::new(1.0, 0.3, 0.0, 1.0);
        let out = shear_deform(&img, &[0], shear).unwrap();
        // output (0,10) samples source (-3,10); half-sample mirror gives column 2
        assert_eq!(shear.inverse_map(0.0, 10.0), (-3.0, 10.0));
        assert_eq!(out.get(0, 10), img.get(2, 10));
        // untouched cell
        assert_eq!(out.get(40, 10), img.get(40, 10));
        assert_eq!(out.get(100, 100), img.get(100, 100));
    }

    #[test]
    fn singular_shear_rejected() {
        let img = RasterImage::filled(16, 16, 0.0).unwrap();
        assert!(shear_deform(&img, &[1], Shear::new(1.0, 2.0, 0.5, 1.0)).is_err());
        assert!(shear_deform(&img, &[16], Shear::IDENTITY).is_err());
    }

    #[test]
    fn pick_cells_distinct() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cells = pick_cells(&mut rng, 2);
        assert_eq!(cells.len(), 2);
        assert_ne!(cells[0], cells[1]);
        assert!(cells.iter().all(|&c| c < 16));
    }

    proptest! {
        #[test]
        fn identity_shear_is_bit_exact(
            w in 4usize..24, h in 4usize..24,
            seed in proptest::arbitrary::any::<u64>(),
            cells in proptest::collection::vec(0usize..16, 0..6),
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = RasterImage::from_fn(w, h, |_, _| rng.gen_range(-1e3..1e3)).unwrap();
            let out = shear_deform(&img, &cells, Shear::IDENTITY).unwrap();
            prop_assert_eq!(out, img);
        }

        #[test]
        fn gradient_bounded_and_translation_equivariant(
            seed in proptest::arbitrary::any::<u64>(), shift in 1usize..4,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..24 * 20).map(|_| rng.gen_range(0..256) as f64).collect();
            let img = RasterImage::new(24, 20, vals).unwrap();
            let se = StructuringElement::default();
            let g = morphological_gradient(&img, &se).unwrap();
            let r = se.radius() as isize;
            for y in 0..20isize {
                for x in 0..24isize {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let v = img.get_mirrored(x + dx, y + dy);
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let v = g.get(x as usize, y as usize);
                    prop_assert!(v >= 0.0 && v <= hi - lo);
                }
            }
            // shift right by `shift` columns
            let shifted = RasterImage::from_fn(24, 20, |x, y| img.get((x + 24 - shift) % 24, y)).unwrap();
            let gs = morphological_gradient(&shifted, &se).unwrap();
            let border = se.radius();
            for y in border..20 - border {
                for x in (border + shift)..(24 - border) {
                    prop_assert_eq!(gs.get(x, y), g.get(x - shift, y));
                }
            }
        }
    }
}
