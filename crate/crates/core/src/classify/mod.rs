//! Classifiers over feature vectors: RBF-kernel SVM with grid search and
//! bagging, Gaussian naive Bayes, and k-nearest neighbours.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub mod svm;

pub use svm::{grid_search, train_svm_grid, GridResult, SvmGrid, SvmModel};

/// Version written into serialised model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub const DEFAULT_INNER_FOLDS: usize = 5;
pub const DEFAULT_K: usize = 3;

/// Per-column z-score fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Constant columns get unit scale.
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let d = x.first().map(Vec::len).ok_or_else(|| Error::Training("no training rows".into()))?;
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in x {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in std.iter_mut() {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbcModel {
    pub priors: Vec<f64>,
    /// `[class][feature]`.
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

/// Relative variance floor, scaled by each column's overall variance.
pub const NBC_VARIANCE_FLOOR: f64 = 1e-9;

pub fn train_nbc(x: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<NbcModel> {
    let d = x.first().map(Vec::len).ok_or_else(|| Error::Training("no training rows".into()))?;
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::Training(format!(
            "class {c} has {} rows; naive Bayes needs at least 2",
            counts[c]
        )));
    }
    let n = x.len() as f64;
    let mut means = vec![vec![0.0; d]; n_classes];
    let mut variances = vec![vec![0.0; d]; n_classes];
    for (r, &l) in x.iter().zip(labels) {
        for j in 0..d {
            means[l][j] += r[j] / counts[l] as f64;
        }
    }
    for (r, &l) in x.iter().zip(labels) {
        for j in 0..d {
            variances[l][j] += (r[j] - means[l][j]).powi(2) / (counts[l] - 1) as f64;
        }
    }
    for j in 0..d {
        let col_mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
        let col_var = x.iter().map(|r| (r[j] - col_mean).powi(2)).sum::<f64>() / (n - 1.0);
        let floor = NBC_VARIANCE_FLOOR * if col_var > 0.0 { col_var } else { 1.0 };
        for var in variances.iter_mut() {
            var[j] = var[j].max(floor);
        }
    }
    Ok(NbcModel {
        priors: counts.iter().map(|&c| c as f64 / n).collect(),
        means,
        variances,
    })
}

impl NbcModel {
    pub fn posteriors(&self, x: &[f64]) -> Vec<f64> {
        let logp: Vec<f64> = (0..self.priors.len())
            .map(|c| {
                let mut lp = self.priors[c].ln();
                for (j, v) in x.iter().enumerate() {
                    let var = self.variances[c][j];
                    lp += -0.5 * ((v - self.means[c][j]).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln());
                }
                lp
            })
            .collect();
        let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logp.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, x: &[f64]) -> (usize, Vec<f64>) {
        let p = self.posteriors(x);
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        (best, p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub n_classes: usize,
    pub exemplars: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub fn train_knn(x: &[Vec<f64>], labels: &[usize], n_classes: usize, k: usize) -> Result<KnnModel> {
    if k == 0 || k > x.len() {
        return Err(Error::Parameter(format!("k = {k} must lie in 1..={}", x.len())));
    }
    Ok(KnnModel {
        k,
        n_classes,
        exemplars: x.to_vec(),
        labels: labels.to_vec(),
    })
}

impl KnnModel {
    /// Majority label among the `k` nearest (ties in distance go to the
    /// earlier exemplar). Count ties go to the smallest mean distance, then
    /// the lowest class.
    pub fn predict(&self, x: &[f64]) -> (usize, Vec<f64>) {
        let mut d: Vec<(f64, usize)> = self
            .exemplars
            .iter()
            .enumerate()
            .map(|(i, e)| (e.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut count = vec![0usize; self.n_classes];
        let mut dist = vec![0.0; self.n_classes];
        for &(di, i) in &d[..self.k] {
            count[self.labels[i]] += 1;
            dist[self.labels[i]] += di;
        }
        let mut best = usize::MAX;
        for c in 0..self.n_classes {
            if count[c] == 0 {
                continue;
            }
            if best == usize::MAX || count[c] > count[best] {
                best = c;
            } else if count[c] == count[best] && dist[c] / (count[c] as f64) < dist[best] / (count[best] as f64) {
                best = c;
            }
        }
        let scores = count.iter().map(|&c| c as f64 / self.k as f64).collect();
        (best, scores)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaggedSvm {
    pub members: Vec<SvmModel>,
    pub bootstrap_seeds: Vec<u64>,
}

impl BaggedSvm {
    pub fn predict(&self, x: &[f64]) -> (usize, Vec<f64>) {
        let n_classes = self.members[0].n_classes;
        let mut votes = vec![0.0; n_classes];
        let mut pair_votes = vec![0.0; n_classes];
        for m in &self.members {
            let (v, _) = m.votes(x);
            let (label, _) = m.predict(x);
            votes[label] += 1.0;
            for (p, vi) in pair_votes.iter_mut().zip(v) {
                *p += vi;
            }
        }
        let best = svm::argmax_with_tiebreak(&votes, &pair_votes);
        let n = self.members.len() as f64;
        (best, votes.into_iter().map(|v| v / n).collect())
    }

    pub fn n_support(&self) -> Vec<usize> {
        self.members.iter().map(SvmModel::n_support).collect()
    }
}

/// Class-stratified resample with replacement, preserving class sizes.
pub fn stratified_bootstrap(labels: &[usize], n_classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(labels.len());
    for c in 0..n_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        for _ in 0..members.len() {
            out.push(members[rng.gen_range(0..members.len())]);
        }
    }
    out
}

/// Bagged SVMs sharing the grid point chosen on the full training set.
pub fn train_bagged_svm(
    x: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    members: usize,
    seed: u64,
    grid: &SvmGrid,
    folds: usize,
) -> Result<(BaggedSvm, GridResult)> {
    if members < 3 || members % 2 == 0 {
        return Err(Error::Parameter(format!(
            "bagging needs an odd member count >= 3, got {members}"
        )));
    }
    let (_, best) = train_svm_grid(x, labels, n_classes, grid, folds)?;
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..members).map(|_| seeder.gen()).collect();
    let fixed = SvmGrid {
        c: vec![best.c],
        gamma: vec![best.gamma],
    };
    use rayon::prelude::*;
    let models = seeds
        .par_iter()
        .map(|&s| {
            let idx = stratified_bootstrap(labels, n_classes, s);
            let bx: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
            let bl: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            train_svm_grid(&bx, &bl, n_classes, &fixed, folds).map(|(m, _)| m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        BaggedSvm {
            members: models,
            bootstrap_seeds: seeds,
        },
        best,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Svm,
    Nbc,
    Knn,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Svm => "svm",
            ClassifierKind::Nbc => "nbc",
            ClassifierKind::Knn => "knn",
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svm" => Ok(ClassifierKind::Svm),
            "nbc" => Ok(ClassifierKind::Nbc),
            "knn" => Ok(ClassifierKind::Knn),
            other => Err(Error::Parameter(format!("unknown classifier '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub grid: SvmGrid,
    pub inner_folds: usize,
    /// Bagged SVM when set (odd, >= 3).
    pub bag_members: Option<usize>,
    pub k: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Svm,
            grid: SvmGrid::default(),
            inner_folds: DEFAULT_INNER_FOLDS,
            bag_members: None,
            k: DEFAULT_K,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Model {
    Svm(SvmModel),
    Nbc(NbcModel),
    Knn(KnnModel),
    BaggedSvm(BaggedSvm),
}

/// A fitted classifier with its input scaling and class map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub version: u32,
    pub classes: Vec<String>,
    pub column_names: Vec<String>,
    pub scaler: Option<Scaler>,
    pub model: Model,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grid: Option<GridResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub scores: Vec<f64>,
}

impl TrainedModel {
    pub fn n_features(&self) -> usize {
        self.column_names.len()
    }

    /// Support-vector count per SVM (one entry per bagged member).
    pub fn support_counts(&self) -> Vec<usize> {
        match &self.model {
            Model::Svm(m) => vec![m.n_support()],
            Model::BaggedSvm(b) => b.n_support(),
            _ => Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let m: TrainedModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.version != MODEL_FORMAT_VERSION {
            return Err(Error::Input(format!("unsupported model version {}", m.version)));
        }
        Ok(m)
    }
}

/// Fits `cfg.kind` on `train`; SVM and kNN inputs are z-scored.
pub fn train(train: &FeatureMatrix, classes: &[String], cfg: &ClassifierConfig) -> Result<TrainedModel> {
    if train.n_rows() == 0 {
        return Err(Error::Training("no training rows".into()));
    }
    let labels: Vec<usize> = train
        .rows
        .iter()
        .map(|r| {
            classes
                .iter()
                .position(|c| *c == r.label)
                .ok_or_else(|| Error::Input(format!("label '{}' not in class map", r.label)))
        })
        .collect::<Result<_>>()?;
    let present = {
        let mut p = labels.clone();
        p.sort_unstable();
        p.dedup();
        p.len()
    };
    if present < 2 {
        return Err(Error::Training("training data contains a single class".into()));
    }
    let raw = train.features();
    let scaler = match cfg.kind {
        ClassifierKind::Nbc => None,
        _ => Some(Scaler::fit(&raw)?),
    };
    let x: Vec<Vec<f64>> = match &scaler {
        Some(s) => raw.iter().map(|r| s.transform(r)).collect(),
        None => raw,
    };
    let n_classes = classes.len();
    let (model, grid) = match (cfg.kind, cfg.bag_members) {
        (ClassifierKind::Svm, None) => {
            let (m, g) = train_svm_grid(&x, &labels, n_classes, &cfg.grid, cfg.inner_folds)?;
            (Model::Svm(m), Some(g))
        }
        (ClassifierKind::Svm, Some(members)) => {
            let (b, g) = train_bagged_svm(&x, &labels, n_classes, members, cfg.seed, &cfg.grid, cfg.inner_folds)?;
            (Model::BaggedSvm(b), Some(g))
        }
        (ClassifierKind::Nbc, _) => (Model::Nbc(train_nbc(&x, &labels, n_classes)?), None),
        (ClassifierKind::Knn, _) => (Model::Knn(train_knn(&x, &labels, n_classes, cfg.k)?), None),
    };
    Ok(TrainedModel {
        version: MODEL_FORMAT_VERSION,
        classes: classes.to_vec(),
        column_names: train.column_names.clone(),
        scaler,
        model,
        grid,
    })
}

/// Label index into `model.classes` plus per-class scores.
pub fn predict_label(model: &TrainedModel, x: &[f64]) -> Result<Prediction> {
    if x.len() != model.n_features() {
        return Err(Error::Input(format!(
            "feature vector has {} entries, model expects {}",
            x.len(),
            model.n_features()
        )));
    }
    let z = match &model.scaler {
        Some(s) => s.transform(x),
        None => x.to_vec(),
    };
    let (label, scores) = match &model.model {
        Model::Svm(m) => m.predict(&z),
        Model::Nbc(m) => m.predict(&z),
        Model::Knn(m) => m.predict(&z),
        Model::BaggedSvm(m) => m.predict(&z),
    };
    Ok(Prediction { label, scores })
}
