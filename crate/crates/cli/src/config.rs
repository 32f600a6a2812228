use std::path::Path;

use fractex::bestbasis::{SelectionConfig, DEFAULT_LAMBDA};
use fractex::classify::{ClassifierConfig, ClassifierKind, SvmGrid, DEFAULT_INNER_FOLDS, DEFAULT_K};
use fractex::eval::{BrodatzConfig, PipelineConfig};
use fractex::features::{DepthRule, Method, DEFAULT_CORRELATION_THRESHOLD};
use fractex::fractal::{DEFAULT_WINDOW, NOISE_FD_CUTOFF};
use fractex::imgprep::{Channel, Shear, StructuringElement, LATTICE};
use fractex::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub size: usize,
    pub images_per_class: usize,
    pub patients_per_class: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size: 256,
            images_per_class: 80,
            patients_per_class: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformParams {
    /// Lattice cells sheared in every image; `None` draws `count` per image.
    pub cells: Option<Vec<usize>>,
    pub count: usize,
    /// Row-major 2x2 matrix `[a, b, c, d]`.
    pub shear: [f64; 4],
}

impl Default for DeformParams {
    fn default() -> Self {
        Self {
            cells: None,
            count: 2,
            shear: [1.0, 0.3, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoldoutParams {
    pub patch: usize,
    pub per_axis: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for HoldoutParams {
    fn default() -> Self {
        let b = BrodatzConfig::default();
        Self {
            patch: b.patch,
            per_axis: b.per_axis,
            train_per_class: b.train_per_class,
            test_per_class: b.test_per_class,
        }
    }
}

/// Every tunable of a run. Loaded from JSON, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub channel: Channel,
    /// Morphological gradient structuring element; `None` skips the gradient.
    pub se_size: Option<usize>,
    pub lambda: f64,
    pub max_levels: usize,
    /// Forced decomposition depth; `None` stops on the threshold.
    pub levels: Option<usize>,
    pub window: usize,
    pub noise_fd_cutoff: f64,
    pub methods: Vec<Method>,
    pub classifier: ClassifierKind,
    pub grid_c: Vec<i32>,
    pub grid_gamma: Vec<i32>,
    pub inner_folds: usize,
    pub bag_members: Option<usize>,
    pub k: usize,
    pub prune: Option<f64>,
    pub threshold: f64,
    pub seed: u64,
    pub synth: SynthParams,
    pub deform: DeformParams,
    pub holdout: HoldoutParams,
}

fn exponents(lo: i32, hi: i32, step: i32) -> Vec<i32> {
    (lo..=hi).step_by(step as usize).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            channel: Channel::default(),
            se_size: Some(StructuringElement::default().size()),
            lambda: DEFAULT_LAMBDA,
            max_levels: 4,
            levels: None,
            window: DEFAULT_WINDOW,
            noise_fd_cutoff: NOISE_FD_CUTOFF,
            methods: vec![Method::BbsFd],
            classifier: ClassifierKind::Svm,
            grid_c: exponents(-5, 25, 2),
            grid_gamma: exponents(-15, 3, 2),
            inner_folds: DEFAULT_INNER_FOLDS,
            bag_members: None,
            k: DEFAULT_K,
            prune: None,
            threshold: DEFAULT_CORRELATION_THRESHOLD,
            seed: 0,
            synth: SynthParams::default(),
            deform: DeformParams::default(),
            holdout: HoldoutParams::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.selection().validate()?;
        self.structuring_element()?;
        if self.methods.is_empty() {
            return Err(Error::Parameter("at least one method is required".into()));
        }
        if let Some(l) = self.levels {
            if l == 0 || l > self.max_levels {
                return Err(Error::Parameter(format!(
                    "levels must lie in 1..={}, got {l}",
                    self.max_levels
                )));
            }
        }
        self.grid().validate()?;
        if self.inner_folds < 2 {
            return Err(Error::Parameter("inner folds must be at least 2".into()));
        }
        if let Some(b) = self.bag_members {
            if b < 3 || b % 2 == 0 {
                return Err(Error::Parameter(format!("bag members must be odd and >= 3, got {b}")));
            }
        }
        if let Some(&bad) = self.deform.cells.iter().flatten().find(|&&c| c >= LATTICE * LATTICE) {
            return Err(Error::Parameter(format!("lattice cell {bad} out of range 0..{}", LATTICE * LATTICE)));
        }
        if self.deform.count > LATTICE * LATTICE {
            return Err(Error::Parameter(format!("cannot pick {} of {} cells", self.deform.count, LATTICE * LATTICE)));
        }
        if self.k == 0 {
            return Err(Error::Parameter("k must be positive".into()));
        }
        for t in self.prune.iter().chain(std::iter::once(&self.threshold)) {
            if !(*t > 0.0 && *t <= 1.0) {
                return Err(Error::Parameter(format!("correlation threshold must lie in (0, 1], got {t}")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn structuring_element(&self) -> Result<Option<StructuringElement>> {
        self.se_size.map(StructuringElement::square).transpose()
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            lambda: self.lambda,
            max_levels: self.max_levels,
            window: self.window,
            noise_fd_cutoff: self.noise_fd_cutoff,
            use_lambda: true,
        }
    }

    pub fn grid(&self) -> SvmGrid {
        SvmGrid::from_exponents(&self.grid_c, &self.grid_gamma)
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            kind: self.classifier,
            grid: self.grid(),
            inner_folds: self.inner_folds,
            bag_members: self.bag_members,
            k: self.k,
            seed: self.seed,
        }
    }

    pub fn pipeline(&self, method: Method) -> PipelineConfig {
        PipelineConfig {
            method,
            depth: self.levels.map_or(DepthRule::Lambda, DepthRule::Fixed),
            selection: self.selection(),
            classifier: self.classifier(),
            prune: self.prune,
        }
    }

    pub fn shear(&self) -> Shear {
        let [a, b, c, d] = self.deform.shear;
        Shear::new(a, b, c, d)
    }

    pub fn brodatz(&self) -> BrodatzConfig {
        BrodatzConfig {
            patch: self.holdout.patch,
            per_axis: self.holdout.per_axis,
            train_per_class: self.holdout.train_per_class,
            test_per_class: self.holdout.test_per_class,
            seed: self.seed,
            channel: self.channel,
            se_size: self.se_size,
            pipeline: self.pipeline(self.methods[0]),
        }
    }
}

/// Parses `lo:hi:step` or a comma-separated list of base-2 exponents.
pub fn parse_exponents(s: &str) -> std::result::Result<Vec<i32>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let n: Vec<i32> = parts
            .iter()
            .map(|p| p.trim().parse::<i32>().map_err(|e| format!("bad exponent '{p}': {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if n[2] <= 0 || n[0] > n[1] {
            return Err(format!("bad exponent range '{s}'"));
        }
        return Ok(exponents(n[0], n[1], n[2]));
    }
    s.split(',')
        .map(|p| p.trim().parse::<i32>().map_err(|e| format!("bad exponent '{p}': {e}")))
        .collect()
}

pub fn parse_shear(s: &str) -> std::result::Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad shear entry '{p}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "shear needs four comma-separated entries a,b,c,d".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_spans_expected_exponents() {
        let c = RunConfig::default();
        assert_eq!(c.grid_c.first(), Some(&-5));
        assert_eq!(c.grid_c.last(), Some(&25));
        assert_eq!(c.grid_gamma, vec![-15, -13, -11, -9, -7, -5, -3, -1, 1, 3]);
        c.validate().unwrap();
    }

    #[test]
    fn exponent_syntax() {
        assert_eq!(parse_exponents("-1:3:2").unwrap(), vec![-1, 1, 3]);
        assert_eq!(parse_exponents("0, 4").unwrap(), vec![0, 4]);
        assert!(parse_exponents("3:1:1").is_err());
        assert!(parse_exponents("a").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"lambda": 0.02, "methods": ["bbs_e"]}"#).unwrap();
        assert_eq!(c.lambda, 0.02);
        assert_eq!(c.methods, vec![Method::BbsE]);
        assert_eq!(c.window, DEFAULT_WINDOW);
        assert!(serde_json::from_str::<RunConfig>(r#"{"lamda": 0.02}"#).is_err());
    }
}
