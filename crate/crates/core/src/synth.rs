//! Synthetic textures with known structure: spectral-synthesis fBm surfaces
//! plus a few deterministic pattern families, and patient-structured corpora
//! built from them.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{write_pgm, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Fbm,
    Stripes,
    Blobs,
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: TextureKind,
    pub size: usize,
    /// Hurst exponent, FBM only.
    pub hurst: f64,
    /// Stripe / checker period in pixels.
    pub period: f64,
    /// Stripe orientation in radians.
    pub orientation: f64,
    /// Blob radius in pixels.
    pub blob_radius: f64,
    /// Std-dev of additive Gaussian noise, in units of the final 0..255 range.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn fbm(size: usize, hurst: f64, seed: u64) -> Self {
        Self {
            kind: TextureKind::Fbm,
            size,
            hurst,
            period: 16.0,
            orientation: 0.0,
            blob_radius: 6.0,
            noise: 0.0,
            seed,
        }
    }

    pub fn stripes(size: usize, period: f64, orientation: f64, seed: u64) -> Self {
        Self {
            kind: TextureKind::Stripes,
            period,
            orientation,
            noise: 8.0,
            ..Self::fbm(size, 0.5, seed)
        }
    }

    pub fn blobs(size: usize, radius: f64, seed: u64) -> Self {
        Self {
            kind: TextureKind::Blobs,
            blob_radius: radius,
            noise: 8.0,
            ..Self::fbm(size, 0.5, seed)
        }
    }

    pub fn checker(size: usize, period: f64, seed: u64) -> Self {
        Self {
            kind: TextureKind::Checker,
            period,
            noise: 8.0,
            ..Self::fbm(size, 0.5, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Parameter("texture size must be positive".into()));
        }
        match self.kind {
            TextureKind::Fbm => {
                if !(self.hurst > 0.0 && self.hurst < 1.0) {
                    return Err(Error::Parameter(format!(
                        "Hurst exponent must lie strictly inside (0, 1), got {}",
                        self.hurst
                    )));
                }
                if self.size < 64 {
                    return Err(Error::Parameter(format!(
                        "fBm synthesis needs size >= 64, got {}",
                        self.size
                    )));
                }
            }
            TextureKind::Stripes | TextureKind::Checker => {
                if self.period < 2.0 {
                    return Err(Error::Parameter("period must be >= 2 pixels".into()));
                }
            }
            TextureKind::Blobs => {
                if self.blob_radius <= 0.0 {
                    return Err(Error::Parameter("blob radius must be positive".into()));
                }
            }
        }
        if self.noise < 0.0 {
            return Err(Error::Parameter("noise must be non-negative".into()));
        }
        Ok(())
    }
}

fn fft2(data: &mut [Complex<f64>], n: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = data[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            data[y * n + x] = col[y];
        }
    }
}

#[inline]
fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

fn quantize_to_u8_range(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round()
            } else {
                0.0
            }
        })
        .collect()
}

/// Synthesis grid refinement for fBm. The field is synthesised on a grid this
/// many times finer and decimated, which keeps the small-lag structure
/// function on its power law (a band-limited field is too smooth at lags of
/// a few pixels, most visibly for small `H`).
pub const FBM_OVERSAMPLE: usize = 4;

/// Spectral-synthesis fBm: Gaussian Fourier coefficients with power falling
/// as `f^-(2H + 2)`, inverse transformed, mapped onto `[0, 255]` and rounded.
pub fn gen_fbm_surface(spec: &SynthSpec) -> Result<RasterImage> {
    if spec.kind != TextureKind::Fbm {
        return Err(Error::Parameter("gen_fbm_surface needs an FBM spec".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out_n = spec.size;
    let n = out_n * FBM_OVERSAMPLE;
    let exponent = spec.hurst + 1.0;
    let mut field = vec![Complex::new(0.0, 0.0); n * n];
    for ky in 0..n {
        let fy = signed_freq(ky, n);
        for kx in 0..n {
            let fx = signed_freq(kx, n);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            if kx == 0 && ky == 0 {
                continue;
            }
            let f = (fx * fx + fy * fy).sqrt();
            let amp = f.powf(-exponent);
            field[ky * n + kx] = Complex::new(re * amp, im * amp);
        }
    }
    fft2(&mut field, n, true);
    let real: Vec<f64> = (0..out_n * out_n)
        .map(|i| field[(i / out_n) * FBM_OVERSAMPLE * n + (i % out_n) * FBM_OVERSAMPLE].re)
        .collect();
    let mut values = quantize_to_u8_range(&real);
    add_noise(&mut values, spec.noise, &mut rng);
    RasterImage::new(out_n, out_n, values)
}

fn add_noise(values: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    for v in values.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v = (*v + sigma * e).round().clamp(0.0, 255.0);
    }
}

fn gen_stripes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.size;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (c, s) = (spec.orientation.cos(), spec.orientation.sin());
    (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            127.5 + 100.0 * (2.0 * PI * (x * c + y * s) / spec.period + phase).sin()
        })
        .collect()
}

fn gen_blobs(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.size;
    let r = spec.blob_radius;
    let area = (n * n) as f64;
    // roughly 25% coverage
    let count = ((0.25 * area) / (PI * r * r)).ceil().max(1.0) as usize;
    let mut field = vec![0.0f64; n * n];
    let reach = (3.0 * r).ceil() as isize;
    for _ in 0..count {
        let cx = rng.gen_range(0.0..n as f64);
        let cy = rng.gen_range(0.0..n as f64);
        let rr = r * rng.gen_range(0.8..1.2);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let x = (cx as isize + dx).rem_euclid(n as isize) as usize;
                let y = (cy as isize + dy).rem_euclid(n as isize) as usize;
                let ddx = cx.floor() + dx as f64 - cx;
                let ddy = cy.floor() + dy as f64 - cy;
                let d2 = ddx * ddx + ddy * ddy;
                let v = (-d2 / (2.0 * (rr * 0.6).powi(2))).exp();
                field[y * n + x] = field[y * n + x].max(v);
            }
        }
    }
    field.iter().map(|v| 40.0 + 180.0 * v).collect()
}

fn gen_checker(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.size;
    let ox = rng.gen_range(0.0..spec.period);
    let oy = rng.gen_range(0.0..spec.period);
    (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64 + ox, (i / n) as f64 + oy);
            let cx = (x / spec.period).floor() as i64;
            let cy = (y / spec.period).floor() as i64;
            if (cx + cy).rem_euclid(2) == 0 {
                60.0
            } else {
                190.0
            }
        })
        .collect()
}

/// Generates any texture kind; the output depends only on the `SynthSpec`, seed included.
pub fn generate(spec: &SynthSpec) -> Result<RasterImage> {
    spec.validate()?;
    if spec.kind == TextureKind::Fbm {
        return gen_fbm_surface(spec);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = match spec.kind {
        TextureKind::Stripes => gen_stripes(spec, &mut rng),
        TextureKind::Blobs => gen_blobs(spec, &mut rng),
        TextureKind::Checker => gen_checker(spec, &mut rng),
        TextureKind::Fbm => unreachable!(),
    };
    for v in values.iter_mut() {
        *v = v.round().clamp(0.0, 255.0);
    }
    add_noise(&mut values, spec.noise, &mut rng);
    RasterImage::new(spec.size, spec.size, values)
}

/// One class of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub label: String,
    pub spec: SynthSpec,
    pub images_per_class: usize,
    pub patients_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub filename: String,
    pub label: String,
    pub patient: String,
    /// Generator seed; absent for externally supplied images.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CorpusImage {
    pub row: ManifestRow,
    pub spec: SynthSpec,
    pub image: RasterImage,
}

/// Per-patient parameter jitter bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub hurst: f64,
    pub relative: f64,
    pub orientation: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            hurst: 0.02,
            relative: 0.05,
            orientation: 0.15,
        }
    }
}

/// SplitMix64 step, used to derive independent seed families.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn patient_spec(base: &SynthSpec, jitter: &Jitter, seed: u64) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = base.clone();
    let u = |rng: &mut ChaCha8Rng| rng.gen_range(-1.0..=1.0);
    s.hurst = (base.hurst + jitter.hurst * u(&mut rng)).clamp(0.01, 0.99);
    s.period = base.period * (1.0 + jitter.relative * u(&mut rng));
    s.blob_radius = base.blob_radius * (1.0 + jitter.relative * u(&mut rng));
    s.orientation = base.orientation + jitter.orientation * u(&mut rng);
    s
}

/// Plans the manifest of a corpus without rendering any pixels.
pub fn plan_corpus(classes: &[ClassSpec], seed: u64, jitter: &Jitter) -> Result<Vec<(ManifestRow, SynthSpec)>> {
    if classes.len() < 2 {
        return Err(Error::Parameter("a corpus needs at least two classes".into()));
    }
    let mut seen = HashSet::new();
    for c in classes {
        if !seen.insert(c.label.as_str()) {
            return Err(Error::Parameter(format!("duplicate class label '{}'", c.label)));
        }
        if c.patients_per_class < 2 {
            return Err(Error::Parameter(format!(
                "class '{}' needs at least two patients",
                c.label
            )));
        }
        if c.images_per_class < c.patients_per_class {
            return Err(Error::Parameter(format!(
                "class '{}' has fewer images than patients",
                c.label
            )));
        }
        c.spec.validate()?;
    }
    let mut rows = Vec::new();
    for (ci, c) in classes.iter().enumerate() {
        let per = c.images_per_class / c.patients_per_class;
        let extra = c.images_per_class % c.patients_per_class;
        for p in 0..c.patients_per_class {
            let pseed = derive_seed(seed, ((ci as u64) << 32) | p as u64);
            let pspec = patient_spec(&c.spec, jitter, pseed);
            let patient = format!("{}-p{:02}", c.label, p);
            let count = per + usize::from(p < extra);
            for i in 0..count {
                let iseed = derive_seed(pseed, i as u64 + 1);
                let mut spec = pspec.clone();
                spec.seed = iseed;
                rows.push((
                    ManifestRow {
                        filename: format!("{patient}-{i:03}.pgm"),
                        label: c.label.clone(),
                        patient: patient.clone(),
                        seed: iseed,
                    },
                    spec,
                ));
            }
        }
    }
    Ok(rows)
}

/// Renders a full corpus in memory.
pub fn gen_corpus(classes: &[ClassSpec], seed: u64, jitter: &Jitter) -> Result<Vec<CorpusImage>> {
    use rayon::prelude::*;
    plan_corpus(classes, seed, jitter)?
        .into_par_iter()
        .map(|(row, spec)| {
            let image = generate(&spec)?;
            Ok(CorpusImage { row, spec, image })
        })
        .collect()
}

/// Writes images as PGM plus `manifest.csv` into `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &[CorpusImage]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for item in corpus {
        write_pgm(dir.join(&item.row.filename), &item.image)?;
    }
    let rows: Vec<ManifestRow> = corpus.iter().map(|c| c.row.clone()).collect();
    write_manifest(dir.join("manifest.csv"), &rows)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(rows)
}

/// The four-class desk-scale corpus: two fBm roughness classes, stripes and blobs.
pub fn surrogate_classes(size: usize, images_per_class: usize, patients_per_class: usize) -> Vec<ClassSpec> {
    let mk = |label: &str, spec: SynthSpec| ClassSpec {
        label: label.to_string(),
        spec,
        images_per_class,
        patients_per_class,
    };
    vec![
        mk("fbm_h03", SynthSpec::fbm(size, 0.3, 0)),
        mk("fbm_h06", SynthSpec::fbm(size, 0.6, 0)),
        mk("stripes", SynthSpec::stripes(size, 12.0, PI / 4.0, 0)),
        mk("blobs", SynthSpec::blobs(size, 7.0, 0)),
    ]
}

/// Radially averaged periodogram slope fitted over `[f_lo, f_hi]` cycles per image.
pub fn spectral_slope(img: &RasterImage, f_lo: f64, f_hi: f64) -> Result<f64> {
    if img.width() != img.height() {
        return Err(Error::Parameter("spectral slope needs a square image".into()));
    }
    let n = img.width();
    let mean = img.mean();
    let mut field: Vec<Complex<f64>> = img.data().iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    fft2(&mut field, n, false);
    let nbins = n / 2;
    let mut power = vec![0.0; nbins + 1];
    let mut count = vec![0usize; nbins + 1];
    for ky in 0..n {
        for kx in 0..n {
            let f = (signed_freq(kx, n).powi(2) + signed_freq(ky, n).powi(2)).sqrt();
            let b = f.round() as usize;
            if b == 0 || b > nbins {
                continue;
            }
            power[b] += field[ky * n + kx].norm_sqr();
            count[b] += 1;
        }
    }
    let pts: Vec<(f64, f64)> = (1..=nbins)
        .filter(|&b| (b as f64) >= f_lo && (b as f64) <= f_hi && count[b] > 0 && power[b] > 0.0)
        .map(|b| ((b as f64).ln(), (power[b] / count[b] as f64).ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Parameter("not enough frequency bins for a slope fit".into()));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fbm_is_deterministic_and_8bit() {
        let spec = SynthSpec::fbm(64, 0.5, 17);
        let a = gen_fbm_surface(&spec).unwrap();
        let b = gen_fbm_surface(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v.fract() == 0.0 && (0.0..=255.0).contains(&v)));
        let (lo, hi) = a.min_max();
        assert_eq!((lo, hi), (0.0, 255.0));
    }

    #[test]
    fn fbm_parameter_checks() {
        assert!(gen_fbm_surface(&SynthSpec::fbm(64, 0.0, 1)).is_err());
        assert!(gen_fbm_surface(&SynthSpec::fbm(64, 1.0, 1)).is_err());
        assert!(gen_fbm_surface(&SynthSpec::fbm(32, 0.5, 1)).is_err());
        assert!(gen_fbm_surface(&SynthSpec::stripes(64, 8.0, 0.0, 1)).is_err());
    }

    #[test]
    fn spectral_slope_tracks_hurst() {
        for &h in &[0.2, 0.5, 0.8] {
            let img = gen_fbm_surface(&SynthSpec::fbm(256, h, 5)).unwrap();
            let slope = spectral_slope(&img, 2.0, 64.0).unwrap();
            let want = -(2.0 * h + 2.0);
            assert!((slope - want).abs() < 0.3, "H={h}: slope {slope} vs {want}");
        }
    }

    #[test]
    fn corpus_counts_and_partition() {
        let classes = surrogate_classes(64, 1, 2);
        let err = plan_corpus(&classes, 1, &Jitter::default()).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));

        let mut classes = surrogate_classes(64, 2, 2);
        classes.truncate(2);
        let corpus = gen_corpus(&classes, 1, &Jitter::default()).unwrap();
        assert_eq!(corpus.len(), 4);

        let plan = plan_corpus(&surrogate_classes(64, 80, 5), 7, &Jitter::default()).unwrap();
        assert_eq!(plan.len(), 320);
        let mut owner = std::collections::HashMap::new();
        for (row, _) in &plan {
            let prev = owner.insert(row.patient.clone(), row.label.clone());
            if let Some(prev) = prev {
                assert_eq!(prev, row.label);
            }
        }
        assert_eq!(owner.len(), 20);
    }

    #[test]
    fn duplicate_labels_rejected() {
        let mut classes = surrogate_classes(64, 4, 2);
        classes[1].label = classes[0].label.clone();
        assert!(plan_corpus(&classes, 0, &Jitter::default()).is_err());
    }

    #[test]
    fn manifest_written_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut classes = surrogate_classes(64, 2, 2);
        classes.truncate(2);
        let corpus = gen_corpus(&classes, 3, &Jitter::default()).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let rows = read_manifest(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0], corpus[0].row);
        assert!(dir.path().join(&rows[3].filename).exists());
    }

    #[test]
    fn other_kinds_render() {
        for spec in [
            SynthSpec::stripes(32, 8.0, 0.3, 1),
            SynthSpec::blobs(32, 4.0, 2),
            SynthSpec::checker(32, 8.0, 3),
        ] {
            let img = generate(&spec).unwrap();
            assert_eq!(img, generate(&spec).unwrap());
            let (lo, hi) = img.min_max();
            assert!(lo >= 0.0 && hi <= 255.0 && hi > lo);
        }
    }
}
