//! Tree-structured best-basis selection.
//!
//! `bbs_fd` expands, level by level, the child subband with the highest mean
//! fractal dimension and stops once the four siblings become
//! indistinguishable (minimum pairwise FD gap at or below `lambda`) or the
//! chosen subband's FD map is homogeneous (lacunarity at or below `lambda`).
//! The energy-guided baselines walk the tree by maximum subband energy to a
//! fixed depth and emit energies or co-occurrence statistics instead.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fractal::{fd_image_with, fd_signature, FdSignature, WindowGeometry, DEFAULT_WINDOW, NOISE_FD_CUTOFF};
use crate::raster::RasterImage;
use crate::wavelet::{split, Band, BandPath, FilterBank, MAX_DEPTH};

pub mod glcm;

pub use glcm::{glcm_features, GlcmFeatures, GlcmStat, DEFAULT_GLCM_LEVELS, GLCM_FEATURES};

/// Default stopping threshold on the sibling FD gap and lacunarity.
pub const DEFAULT_LAMBDA: f64 = 0.012;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub lambda: f64,
    pub max_levels: usize,
    pub window: usize,
    pub noise_fd_cutoff: f64,
    /// When false the walk always runs to `max_levels`; the per-level
    /// threshold test is still recorded.
    pub use_lambda: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            max_levels: MAX_DEPTH,
            window: DEFAULT_WINDOW,
            noise_fd_cutoff: NOISE_FD_CUTOFF,
            use_lambda: true,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Parameter(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.max_levels == 0 || self.max_levels > MAX_DEPTH {
            return Err(Error::Parameter(format!(
                "max levels must lie in 1..={MAX_DEPTH}, got {}",
                self.max_levels
            )));
        }
        WindowGeometry::new(self.window).map(|_| ())
    }
}

/// One value per band, serialised with the band names as keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct BandValues {
    pub LL: f64,
    pub LH: f64,
    pub HL: f64,
    pub HH: f64,
}

impl BandValues {
    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            LL: v[0],
            LH: v[1],
            HL: v[2],
            HH: v[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.LL, self.LH, self.HL, self.HH]
    }

    pub fn get(&self, band: Band) -> f64 {
        self.to_array()[band.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub chosen: Band,
    /// Mean FD of the four siblings.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fd: Option<BandValues>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lacunarities: Option<BandValues>,
    /// Guidance energies of the four siblings (energy-guided walks).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub energy: Option<BandValues>,
    /// Minimum pairwise absolute mean-FD difference among the siblings.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dm: Option<f64>,
    /// Lacunarity of the chosen sibling.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lacunarity: Option<f64>,
    /// Whether the threshold test held at this level.
    #[serde(default)]
    pub lambda_hit: bool,
    pub terminated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BasisPath {
    pub levels: Vec<LevelRecord>,
}

impl BasisPath {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn bands(&self) -> Vec<Band> {
        self.levels.iter().map(|l| l.chosen).collect()
    }

    /// Depth at which the threshold rule first fires, or the full depth.
    pub fn lambda_depth(&self) -> usize {
        self.levels
            .iter()
            .position(|l| l.lambda_hit)
            .map_or(self.depth(), |i| i + 1)
    }

    /// The first `depth` levels, with the last one marked terminated.
    pub fn truncated(&self, depth: usize) -> BasisPath {
        let mut levels: Vec<LevelRecord> = self.levels.iter().take(depth).cloned().collect();
        for l in levels.iter_mut() {
            l.terminated = false;
        }
        if let Some(last) = levels.last_mut() {
            last.terminated = true;
        }
        BasisPath { levels }
    }

    /// Path of the node expanded at each level (root first).
    pub fn expanded_nodes(&self) -> Vec<BandPath> {
        let mut out = Vec::with_capacity(self.depth());
        let mut cur = BandPath::root();
        for l in &self.levels {
            out.push(cur.clone());
            cur = cur.child(l.chosen);
        }
        out
    }
}

/// What a feature value measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignatureKind {
    Fd,
    /// Mean `|coef|^k`.
    Energy(u8),
    Glcm(GlcmStat, u16),
}

impl SignatureKind {
    pub fn tag(&self) -> String {
        match self {
            SignatureKind::Fd => "fd".to_string(),
            SignatureKind::Energy(k) => format!("e{k}"),
            SignatureKind::Glcm(stat, angle) => format!("glcm_{}_{angle}", stat.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub path: BandPath,
    pub kind: SignatureKind,
}

impl Provenance {
    pub fn level(&self) -> usize {
        self.path.level()
    }

    pub fn band(&self) -> Option<Band> {
        self.path.last()
    }

    /// Column name used in feature tables, e.g. `HH.LH:fd`.
    pub fn column_name(&self) -> String {
        format!("{}:{}", self.path, self.kind.tag())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SignatureVector {
    pub values: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl SignatureVector {
    pub fn push(&mut self, value: f64, provenance: Provenance) {
        self.values.push(value);
        self.provenance.push(provenance);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `(1/MN) * sum |I|^k` for `k` in {1, 2}.
pub fn energy_signature(subband: &RasterImage, k: u8) -> Result<f64> {
    let n = subband.data().len();
    if n == 0 {
        return Err(Error::Structural("empty subband".into()));
    }
    let sum: f64 = match k {
        1 => subband.data().iter().map(|v| v.abs()).sum(),
        2 => subband.data().iter().map(|v| v * v).sum(),
        _ => return Err(Error::Parameter(format!("energy order must be 1 or 2, got {k}"))),
    };
    Ok(sum / n as f64)
}

/// Minimum pairwise absolute difference.
fn min_pairwise_gap(v: &[f64; 4]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..4 {
        for j in i + 1..4 {
            best = best.min((v[i] - v[j]).abs());
        }
    }
    best
}

/// Index of the maximum; earlier entries win ties.
fn argmax_first(values: &[f64; 4], eligible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..4 {
        if !eligible(i) {
            continue;
        }
        match best {
            Some(b) if values[i] <= values[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Band with the highest mean FD among those below the noise cutoff. If every
/// sibling is at or above the cutoff, the plain maximum is used.
pub fn select_fd_band(mean_fd: &[f64; 4], noise_cutoff: f64) -> Band {
    let idx = argmax_first(mean_fd, |i| mean_fd[i] < noise_cutoff)
        .or_else(|| argmax_first(mean_fd, |_| true))
        .expect("four candidates");
    Band::ALL[idx]
}

/// Per-node measurements collected by a [`SubbandAnalyzer`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub fd: Option<FdSignature>,
    pub e1: Option<f64>,
    pub e2: Option<f64>,
    pub glcm: Option<Vec<f64>>,
}

/// Lazily decomposes one image and memoises per-subband statistics.
///
/// Coefficients are cached per path until [`SubbandAnalyzer::drop_coefficients`]
/// is called; statistics persist.
#[derive(Debug, Clone)]
pub struct SubbandAnalyzer {
    root: RasterImage,
    fb: FilterBank,
    geo: WindowGeometry,
    glcm_levels: usize,
    coeffs: HashMap<BandPath, RasterImage>,
    stats: HashMap<BandPath, NodeStats>,
}

impl SubbandAnalyzer {
    pub fn new(root: RasterImage, fb: FilterBank, window: usize, glcm_levels: usize) -> Result<Self> {
        if glcm_levels < 2 {
            return Err(Error::Parameter(format!(
                "GLCM quantisation needs at least 2 levels, got {glcm_levels}"
            )));
        }
        Ok(Self {
            root,
            fb,
            geo: WindowGeometry::new(window)?,
            glcm_levels,
            coeffs: HashMap::new(),
            stats: HashMap::new(),
        })
    }

    pub fn root(&self) -> &RasterImage {
        &self.root
    }

    /// Ensures the four children of `parent` are available.
    fn expand(&mut self, parent: &BandPath) -> Result<()> {
        if self.coeffs.contains_key(&parent.child(Band::LL)) {
            return Ok(());
        }
        if parent.level() >= MAX_DEPTH {
            return Err(Error::Depth {
                requested: parent.level() + 1,
                max: MAX_DEPTH,
            });
        }
        let children = {
            let src = match parent.parent() {
                None => &self.root,
                Some(gp) => {
                    self.expand(&gp)?;
                    &self.coeffs[parent]
                }
            };
            split(src, parent.level(), &self.fb)?
        };
        for (band, c) in Band::ALL.into_iter().zip(children) {
            self.coeffs.insert(parent.child(band), c);
        }
        Ok(())
    }

    pub fn subband(&mut self, path: &BandPath) -> Result<&RasterImage> {
        match path.parent() {
            None => Ok(&self.root),
            Some(parent) => {
                self.expand(&parent)?;
                Ok(&self.coeffs[path])
            }
        }
    }

    /// FD signatures of the four children of `parent`, computed concurrently.
    pub fn sibling_fd(&mut self, parent: &BandPath) -> Result<[FdSignature; 4]> {
        let paths: Vec<BandPath> = Band::ALL.iter().map(|&b| parent.child(b)).collect();
        let missing: Vec<&BandPath> = paths
            .iter()
            .filter(|p| self.stats.get(*p).and_then(|s| s.fd).is_none())
            .collect();
        if !missing.is_empty() {
            self.expand(parent)?;
            let geo = &self.geo;
            let coeffs = &self.coeffs;
            let computed: Vec<(BandPath, FdSignature)> = missing
                .par_iter()
                .map(|p| {
                    let f = fd_image_with(&coeffs[*p], geo)?;
                    Ok(((*p).clone(), fd_signature(&f)?))
                })
                .collect::<Result<_>>()?;
            for (p, sig) in computed {
                self.stats.entry(p).or_default().fd = Some(sig);
            }
        }
        let mut out = [FdSignature {
            mean_fd: 0.0,
            lacunarity: 0.0,
        }; 4];
        for (slot, p) in out.iter_mut().zip(&paths) {
            *slot = self.stats[p].fd.expect("filled above");
        }
        Ok(out)
    }

    pub fn fd(&mut self, path: &BandPath) -> Result<FdSignature> {
        match path.parent() {
            Some(parent) => Ok(self.sibling_fd(&parent)?[path.last().expect("non-root").index()]),
            None => {
                if let Some(sig) = self.stats.get(path).and_then(|s| s.fd) {
                    return Ok(sig);
                }
                let sig = fd_signature(&fd_image_with(&self.root, &self.geo)?)?;
                self.stats.entry(path.clone()).or_default().fd = Some(sig);
                Ok(sig)
            }
        }
    }

    pub fn energy(&mut self, path: &BandPath, k: u8) -> Result<f64> {
        let cached = self.stats.get(path).and_then(|s| if k == 1 { s.e1 } else { s.e2 });
        if let Some(v) = cached {
            return Ok(v);
        }
        let v = energy_signature(self.subband(path)?, k)?;
        let entry = self.stats.entry(path.clone()).or_default();
        if k == 1 {
            entry.e1 = Some(v);
        } else {
            entry.e2 = Some(v);
        }
        Ok(v)
    }

    pub fn glcm(&mut self, path: &BandPath) -> Result<Vec<f64>> {
        if let Some(v) = self.stats.get(path).and_then(|s| s.glcm.clone()) {
            return Ok(v);
        }
        let q = self.glcm_levels;
        let feats = glcm_features(self.subband(path)?, q)?;
        let v = feats.values.to_vec();
        self.stats.entry(path.clone()).or_default().glcm = Some(v.clone());
        Ok(v)
    }

    /// Frees cached coefficients, keeping statistics.
    pub fn drop_coefficients(&mut self) {
        self.coeffs.clear();
    }

    pub fn stats(&self) -> &HashMap<BandPath, NodeStats> {
        &self.stats
    }

    pub fn into_stats(self) -> HashMap<BandPath, NodeStats> {
        self.stats
    }

    /// The fractal-dimension-guided walk.
    pub fn walk_fd(&mut self, cfg: &SelectionConfig) -> Result<(BasisPath, SignatureVector)> {
        cfg.validate()?;
        if cfg.window != self.geo.window() {
            return Err(Error::Parameter(format!(
                "analyzer window {} differs from config window {}",
                self.geo.window(),
                cfg.window
            )));
        }
        let mut path = BasisPath::default();
        let mut sv = SignatureVector::default();
        let mut node = BandPath::root();
        for level in 0..cfg.max_levels {
            let sigs = self.sibling_fd(&node)?;
            let mean: [f64; 4] = std::array::from_fn(|i| sigs[i].mean_fd);
            let lac: [f64; 4] = std::array::from_fn(|i| sigs[i].lacunarity);
            for band in Band::ALL {
                sv.push(
                    mean[band.index()],
                    Provenance {
                        path: node.child(band),
                        kind: SignatureKind::Fd,
                    },
                );
            }
            let chosen = select_fd_band(&mean, cfg.noise_fd_cutoff);
            let dm = min_pairwise_gap(&mean);
            let chosen_lac = lac[chosen.index()];
            let lambda_hit = dm <= cfg.lambda || chosen_lac <= cfg.lambda;
            let terminated = (cfg.use_lambda && lambda_hit) || level + 1 == cfg.max_levels;
            path.levels.push(LevelRecord {
                chosen,
                fd: Some(BandValues::from_array(mean)),
                lacunarities: Some(BandValues::from_array(lac)),
                energy: None,
                dm: Some(dm),
                lacunarity: Some(chosen_lac),
                lambda_hit,
                terminated,
            });
            if terminated {
                break;
            }
            node = node.child(chosen);
        }
        Ok((path, sv))
    }

    /// Energy-guided walk to a fixed depth.
    pub fn walk_energy(&mut self, depth: usize, guide: EnergyGuide) -> Result<(BasisPath, SignatureVector)> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(Error::Parameter(format!(
                "baseline depth must lie in 1..={MAX_DEPTH}, got {depth}"
            )));
        }
        let k = guide.guidance_order();
        let mut path = BasisPath::default();
        let mut sv = SignatureVector::default();
        let mut node = BandPath::root();
        for level in 0..depth {
            let mut e = [0.0; 4];
            for band in Band::ALL {
                e[band.index()] = self.energy(&node.child(band), k)?;
            }
            for band in Band::ALL {
                let child = node.child(band);
                match guide {
                    EnergyGuide::E1 | EnergyGuide::E2 => sv.push(
                        e[band.index()],
                        Provenance {
                            path: child,
                            kind: SignatureKind::Energy(k),
                        },
                    ),
                    EnergyGuide::Glcm => {
                        let g = self.glcm(&child)?;
                        for (i, v) in g.into_iter().enumerate() {
                            sv.push(
                                v,
                                Provenance {
                                    path: child.clone(),
                                    kind: glcm::kind_of(i),
                                },
                            );
                        }
                    }
                }
            }
            let chosen = Band::ALL[argmax_first(&e, |_| true).expect("four candidates")];
            let terminated = level + 1 == depth;
            path.levels.push(LevelRecord {
                chosen,
                fd: None,
                lacunarities: None,
                energy: Some(BandValues::from_array(e)),
                dm: None,
                lacunarity: None,
                lambda_hit: false,
                terminated,
            });
            node = node.child(chosen);
        }
        Ok((path, sv))
    }
}

/// Guidance and feature family for the energy-based baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnergyGuide {
    /// l1 energy guides and is emitted.
    E1,
    /// l2 energy guides and is emitted.
    E2,
    /// l1 energy guides; co-occurrence statistics are emitted.
    Glcm,
}

impl EnergyGuide {
    pub fn guidance_order(self) -> u8 {
        match self {
            EnergyGuide::E2 => 2,
            EnergyGuide::E1 | EnergyGuide::Glcm => 1,
        }
    }
}

/// Fractal-dimension-guided best-basis walk over one preprocessed image.
pub fn bbs_fd(img: &RasterImage, fb: &FilterBank, cfg: &SelectionConfig) -> Result<(BasisPath, SignatureVector)> {
    let mut a = SubbandAnalyzer::new(img.clone(), *fb, cfg.window, DEFAULT_GLCM_LEVELS)?;
    a.walk_fd(cfg)
}

/// Energy-guided baseline walk to a fixed `depth`.
pub fn bbs_energy_guided(
    img: &RasterImage,
    fb: &FilterBank,
    depth: usize,
    guide: EnergyGuide,
    glcm_levels: usize,
) -> Result<(BasisPath, SignatureVector)> {
    let mut a = SubbandAnalyzer::new(img.clone(), *fb, DEFAULT_WINDOW, glcm_levels)?;
    a.walk_energy(depth, guide)
}
