//! Image containers, boundary extension and file IO.
//!
//! Every stage of the pipeline consumes and produces [`RasterImage`], a
//! row-major grid of `f64` intensities. Colour input arrives as a
//! [`ColorImage`] and is reduced to a single plane by `imgprep`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Maps an arbitrary (possibly negative or overflowing) index onto `0..len`
/// using half-sample symmetric reflection: `-1 -> 0`, `-2 -> 1`, `len -> len - 1`.
///
/// The extension is periodic with period `2 * len`, so offsets larger than the
/// image (deep à-trous filters on small images) remain well defined.
#[inline]
pub fn mirror_index(i: isize, len: usize) -> usize {
    debug_assert!(len > 0);
    let n = len as isize;
    let m = i.rem_euclid(2 * n);
    if m >= n {
        (2 * n - 1 - m) as usize
    } else {
        m as usize
    }
}

/// Row-major grid of real-valued intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Structural(format!(
                "raster must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Structural(format!(
                "raster data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel lookup with mirror extension beyond the borders.
    #[inline]
    pub fn get_mirrored(&self, x: isize, y: isize) -> f64 {
        self.get(mirror_index(x, self.width), mirror_index(y, self.height))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RasterImage> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Parameter(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        RasterImage::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    /// Rounds and clamps to 8-bit.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Affinely maps `[min, max]` onto `[0, 255]`; constant rasters map to 0.
    pub fn to_u8_rescaled(&self) -> Vec<u8> {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        self.data
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64).collect())
    }
}

/// Three 8-bit planes in R, G, B order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    planes: [Vec<u8>; 3],
}

impl ColorImage {
    pub fn new(width: usize, height: usize, r: Vec<u8>, g: Vec<u8>, b: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Structural(format!(
                "colour image must be at least 1x1, got {width}x{height}"
            )));
        }
        let n = width * height;
        for (name, plane) in [("R", &r), ("G", &g), ("B", &b)] {
            if plane.len() != n {
                return Err(Error::Structural(format!(
                    "{name} plane has {} samples, expected {n}",
                    plane.len()
                )));
            }
        }
        Ok(Self {
            width,
            height,
            planes: [r, g, b],
        })
    }

    /// Replicates a grayscale raster into all three planes.
    pub fn from_gray(img: &RasterImage) -> Self {
        let bytes = img.to_u8();
        Self {
            width: img.width(),
            height: img.height(),
            planes: [bytes.clone(), bytes.clone(), bytes],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, idx: usize) -> &[u8] {
        &self.planes[idx]
    }
}

/// Reads a PGM/PPM (P5/P6) or PNG file. Grayscale sources are replicated
/// into three identical planes.
pub fn load_color(path: impl AsRef<Path>) -> Result<ColorImage> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut r = Vec::with_capacity(w * h);
    let mut g = Vec::with_capacity(w * h);
    let mut b = Vec::with_capacity(w * h);
    for px in img.pixels() {
        r.push(px[0]);
        g.push(px[1]);
        b.push(px[2]);
    }
    ColorImage::new(w, h, r, g, b)
}

/// Writes 8-bit samples as a binary PGM (P5).
pub fn write_pgm_bytes(path: impl AsRef<Path>, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::Structural(format!(
            "pgm payload {} does not match {width}x{height}",
            bytes.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Writes a raster rounded and clamped to 8-bit.
pub fn write_pgm(path: impl AsRef<Path>, img: &RasterImage) -> Result<()> {
    write_pgm_bytes(path, img.width(), img.height(), &img.to_u8())
}

/// Writes a raster after affine rescaling of its range onto 0..=255.
pub fn write_pgm_rescaled(path: impl AsRef<Path>, img: &RasterImage) -> Result<()> {
    write_pgm_bytes(path, img.width(), img.height(), &img.to_u8_rescaled())
}

/// Writes a colour image. Grey images (identical planes) and `.pgm` targets
/// are written as P5; anything else goes through the codec chosen by extension.
pub fn save_color(path: impl AsRef<Path>, img: &ColorImage) -> Result<()> {
    let path = path.as_ref();
    let [r, g, b] = &img.planes;
    let grey = r == g && g == b;
    let pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if grey || pgm {
        if !grey {
            return Err(Error::Input(format!("{} is a colour image but the target is PGM", path.display())));
        }
        return write_pgm_bytes(path, img.width, img.height, r);
    }
    let mut buf = Vec::with_capacity(img.width * img.height * 3);
    for i in 0..img.width * img.height {
        buf.extend_from_slice(&[r[i], g[i], b[i]]);
    }
    image::save_buffer(path, &buf, img.width as u32, img.height as u32, image::ColorType::Rgb8)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_index_reflects_half_sample() {
        let got: Vec<usize> = (-4..8).map(|i| mirror_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(mirror_index(-7, 1), 0);
        assert_eq!(mirror_index(100, 1), 0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(RasterImage::new(0, 3, vec![]).is_err());
        assert!(RasterImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ColorImage::new(2, 1, vec![0; 2], vec![0; 2], vec![0; 3]).is_err());
    }

    #[test]
    fn pgm_roundtrip_through_decoder() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = RasterImage::from_fn(5, 3, |x, y| (x * 40 + y) as f64).unwrap();
        write_pgm(&p, &img).unwrap();
        let back = load_color(&p).unwrap();
        assert_eq!(back.width(), 5);
        assert_eq!(back.plane(2), img.to_u8().as_slice());
        assert_eq!(back.plane(0), back.plane(1));
    }
}
