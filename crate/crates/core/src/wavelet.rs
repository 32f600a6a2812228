//! Undecimated (à-trous) 2-D wavelet packet decomposition with the 8-tap
//! Daubechies analysis filter.
//!
//! Subbands keep the root image's dimensions at every depth. At depth `l`
//! the filters are dilated by `2^l` (zeros inserted between taps) so that
//! repeated application stays shift-invariant.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{mirror_index, RasterImage};

pub const TAPS: usize = 8;

/// Deepest decomposition level supported.
pub const MAX_DEPTH: usize = 10;

/// 8-tap Daubechies lowpass analysis filter as tabulated (sum 1.00000031).
pub const DAUBECHIES8_LOWPASS: [f64; TAPS] = [
    0.16290184,
    0.50547316,
    0.44610023,
    -0.01978767,
    -0.13225371,
    0.02180788,
    0.02325179,
    -0.00749321,
];

/// Quadrature-mirror highpass: `g(k) = (-1)^k h(7 - k)`.
pub fn derive_highpass(h: &[f64]) -> Result<[f64; TAPS]> {
    if h.len() != TAPS {
        return Err(Error::Parameter(format!(
            "expected {TAPS} filter taps, got {}",
            h.len()
        )));
    }
    let mut g = [0.0; TAPS];
    for (k, gk) in g.iter_mut().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        *gk = sign * h[TAPS - 1 - k];
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub lowpass: [f64; TAPS],
    pub highpass: [f64; TAPS],
}

impl FilterBank {
    pub fn from_lowpass(h: &[f64]) -> Result<Self> {
        let highpass = derive_highpass(h)?;
        let mut lowpass = [0.0; TAPS];
        lowpass.copy_from_slice(h);
        Ok(Self { lowpass, highpass })
    }

    /// The tabulated taps rescaled to unit DC gain, so a constant image
    /// passes through LL unchanged.
    pub fn daubechies8() -> Self {
        let sum: f64 = DAUBECHIES8_LOWPASS.iter().sum();
        Self::from_lowpass(&DAUBECHIES8_LOWPASS.map(|v| v / sum)).expect("8 taps")
    }
}

impl Default for FilterBank {
    fn default() -> Self {
        Self::daubechies8()
    }
}

/// Subband label. The first letter is the horizontal (along-row) filter,
/// the second the vertical (along-column) filter. The derived ordering
/// `LL < LH < HL < HH` is used for tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Band {
    LL,
    LH,
    HL,
    HH,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Band::LL => "LL",
            Band::LH => "LH",
            Band::HL => "HL",
            Band::HH => "HH",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LL" => Ok(Band::LL),
            "LH" => Ok(Band::LH),
            "HL" => Ok(Band::HL),
            "HH" => Ok(Band::HH),
            other => Err(Error::Parameter(format!("unknown band '{other}'"))),
        }
    }
}

/// Sequence of band choices from the root. Empty means the original image.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BandPath(Vec<Band>);

impl BandPath {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn new(bands: Vec<Band>) -> Self {
        Self(bands)
    }

    pub fn level(&self) -> usize {
        self.0.len()
    }

    pub fn bands(&self) -> &[Band] {
        &self.0
    }

    pub fn child(&self, band: Band) -> Self {
        let mut v = self.0.clone();
        v.push(band);
        Self(v)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Some(Self(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn last(&self) -> Option<Band> {
        self.0.last().copied()
    }
}

impl fmt::Display for BandPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("root");
        }
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            f.write_str(b.as_str())?;
        }
        Ok(())
    }
}

impl FromStr for BandPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() || s == "root" {
            return Ok(Self::root());
        }
        s.split('.').map(Band::from_str).collect::<Result<Vec<_>>>().map(Self)
    }
}

impl Serialize for BandPath {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BandPath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubbandNode {
    pub path: BandPath,
    pub coeffs: RasterImage,
}

impl SubbandNode {
    pub fn root(img: RasterImage) -> Self {
        Self {
            path: BandPath::root(),
            coeffs: img,
        }
    }

    pub fn level(&self) -> usize {
        self.path.level()
    }
}

/// Source index table for a dilated 8-tap filter along an axis of length `len`.
fn tap_indices(len: usize, dilation: usize) -> Vec<[usize; TAPS]> {
    let offset = (TAPS / 2) as isize;
    let d = dilation as isize;
    (0..len)
        .map(|p| {
            let mut idx = [0usize; TAPS];
            for (k, slot) in idx.iter_mut().enumerate() {
                *slot = mirror_index(p as isize + (offset - k as isize) * d, len);
            }
            idx
        })
        .collect()
}

fn filter_rows(src: &[f64], w: usize, h: usize, idx: &[[usize; TAPS]], taps: &[f64; TAPS]) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, slot) in dst.iter_mut().enumerate() {
            let ix = &idx[x];
            let mut acc = 0.0;
            for k in 0..TAPS {
                acc += taps[k] * row[ix[k]];
            }
            *slot = acc;
        }
    }
    out
}

fn filter_cols(src: &[f64], w: usize, h: usize, idx: &[[usize; TAPS]], taps: &[f64; TAPS]) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let iy = &idx[y];
        let dst = &mut out[y * w..(y + 1) * w];
        for k in 0..TAPS {
            let c = taps[k];
            let row = &src[iy[k] * w..(iy[k] + 1) * w];
            for (d, &s) in dst.iter_mut().zip(row) {
                *d += c * s;
            }
        }
    }
    out
}

/// Splits a raster at decomposition level `level` (0 for the root) into its
/// four same-size children, ordered `[LL, LH, HL, HH]`.
pub fn split(coeffs: &RasterImage, level: usize, fb: &FilterBank) -> Result<[RasterImage; 4]> {
    if level >= MAX_DEPTH {
        return Err(Error::Depth {
            requested: level + 1,
            max: MAX_DEPTH,
        });
    }
    let (w, h) = (coeffs.width(), coeffs.height());
    let dilation = 1usize << level;
    let ix = tap_indices(w, dilation);
    let iy = tap_indices(h, dilation);
    let lo_x = filter_rows(coeffs.data(), w, h, &ix, &fb.lowpass);
    let hi_x = filter_rows(coeffs.data(), w, h, &ix, &fb.highpass);
    let ll = filter_cols(&lo_x, w, h, &iy, &fb.lowpass);
    let lh = filter_cols(&lo_x, w, h, &iy, &fb.highpass);
    let hl = filter_cols(&hi_x, w, h, &iy, &fb.lowpass);
    let hh = filter_cols(&hi_x, w, h, &iy, &fb.highpass);
    Ok([
        RasterImage::new(w, h, ll)?,
        RasterImage::new(w, h, lh)?,
        RasterImage::new(w, h, hl)?,
        RasterImage::new(w, h, hh)?,
    ])
}

/// Decomposes a node into its four children.
pub fn decompose_level(node: &SubbandNode, fb: &FilterBank) -> Result<[SubbandNode; 4]> {
    let [ll, lh, hl, hh] = split(&node.coeffs, node.level(), fb)?;
    let mk = |band: Band, coeffs: RasterImage| SubbandNode {
        path: node.path.child(band),
        coeffs,
    };
    Ok([
        mk(Band::LL, ll),
        mk(Band::LH, lh),
        mk(Band::HL, hl),
        mk(Band::HH, hh),
    ])
}

/// Recomputes the subband at `path` by descending from the root.
pub fn subband_at(root: &RasterImage, path: &BandPath, fb: &FilterBank) -> Result<RasterImage> {
    let mut cur = root.clone();
    for (level, band) in path.bands().iter().enumerate() {
        let children = split(&cur, level, fb)?;
        cur = children[band.index()].clone();
    }
    Ok(cur)
}

/// A partially expanded wavelet packet quad-tree. Each node has either no
/// children or all four.
#[derive(Debug, Clone)]
pub struct WpTree {
    fb: FilterBank,
    nodes: BTreeMap<BandPath, RasterImage>,
}

impl WpTree {
    pub fn new(root: RasterImage, fb: FilterBank) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(BandPath::root(), root);
        Self { fb, nodes }
    }

    pub fn get(&self, path: &BandPath) -> Option<&RasterImage> {
        self.nodes.get(path)
    }

    pub fn is_expanded(&self, path: &BandPath) -> bool {
        self.nodes.contains_key(&path.child(Band::LL))
    }

    /// Expands a leaf; expanding an already expanded node is a no-op.
    pub fn expand(&mut self, path: &BandPath) -> Result<()> {
        if self.is_expanded(path) {
            return Ok(());
        }
        let coeffs = self
            .nodes
            .get(path)
            .ok_or_else(|| Error::Input(format!("node {path} not present in tree")))?;
        let children = split(coeffs, path.level(), &self.fb)?;
        for (band, c) in Band::ALL.into_iter().zip(children) {
            self.nodes.insert(path.child(band), c);
        }
        Ok(())
    }

    /// Children of an expanded node in band order.
    pub fn children(&self, path: &BandPath) -> Option<[&RasterImage; 4]> {
        let ll = self.nodes.get(&path.child(Band::LL))?;
        let lh = self.nodes.get(&path.child(Band::LH))?;
        let hl = self.nodes.get(&path.child(Band::HL))?;
        let hh = self.nodes.get(&path.child(Band::HH))?;
        Some([ll, lh, hl, hh])
    }

    pub fn paths(&self) -> impl Iterator<Item = &BandPath> {
        self.nodes.keys()
    }
}
