//! End-to-end evaluation: per-fold basis construction, feature extraction,
//! optional divergence pruning, classifier fitting and scoring.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{make_lopo_folds, score_run, ConfusionMatrix, LevelAccuracy, MetricsReport};
use crate::bestbasis::{BasisPath, SelectionConfig};
use crate::classify::{predict_label, train, ClassifierConfig, GridResult};
use crate::error::{Error, Result};
use crate::features::{
    analyze_images, build_global_basis, class_consensus, correlation_prune, divergence_rank, extract_matrix,
    DepthRule, FeatureMatrix, GlobalBasis, ImageAnalysis, Method,
};
use crate::imgprep::{morphological_gradient, pick_cells, select_channel, shear_deform, Channel, Shear, StructuringElement};
use crate::raster::{load_color, ColorImage, RasterImage};
use crate::synth::{derive_seed, CorpusImage};
use crate::wavelet::{BandPath, FilterBank};

/// Channel selection followed by the morphological gradient (skipped when
/// `se` is `None`).
pub fn preprocess(img: &ColorImage, channel: Channel, se: Option<&StructuringElement>) -> Result<RasterImage> {
    let plane = select_channel(img, channel)?;
    match se {
        Some(se) => morphological_gradient(&plane, se),
        None => Ok(plane),
    }
}

/// Images with class labels and patient groups.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<RasterImage>,
    pub labels: Vec<String>,
    pub patients: Vec<String>,
}

impl Dataset {
    pub fn from_corpus(corpus: &[CorpusImage]) -> Self {
        Self {
            names: corpus.iter().map(|c| c.row.filename.clone()).collect(),
            images: corpus.iter().map(|c| c.image.clone()).collect(),
            labels: corpus.iter().map(|c| c.row.label.clone()).collect(),
            patients: corpus.iter().map(|c| c.row.patient.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Applies `f` to every image.
    pub fn map_images(&self, f: impl Fn(usize, &RasterImage) -> Result<RasterImage> + Sync) -> Result<Dataset> {
        let images = self
            .images
            .par_iter()
            .enumerate()
            .map(|(i, img)| f(i, img))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            images,
            ..self.clone()
        })
    }

    /// Morphological gradient of every (grey) image.
    pub fn preprocessed(&self, se: Option<&StructuringElement>) -> Result<Dataset> {
        match se {
            None => Ok(self.clone()),
            Some(se) => self.map_images(|_, img| morphological_gradient(img, se)),
        }
    }

    /// Shears `cells` randomly chosen lattice cells of every image.
    pub fn deformed(&self, cells: usize, shear: Shear, seed: u64) -> Result<Dataset> {
        self.map_images(|i, img| shear_deform(img, &deformation_cells(seed, i, cells), shear))
    }
}

/// Lattice cells sheared in image `index` of a run seeded with `seed`.
pub fn deformation_cells(seed: u64, index: usize, count: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
    pick_cells(&mut rng, count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub method: Method,
    pub depth: DepthRule,
    pub selection: SelectionConfig,
    pub classifier: ClassifierConfig,
    /// Divergence ranking plus correlation pruning at this threshold, fitted
    /// on each training partition.
    pub prune: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::BbsFd,
            depth: DepthRule::Lambda,
            selection: SelectionConfig::default(),
            classifier: ClassifierConfig::default(),
            prune: None,
        }
    }
}

impl PipelineConfig {
    /// Deepest walk needed for `depth`.
    pub fn walk_depth(&self) -> usize {
        match self.depth {
            DepthRule::Lambda => self.selection.max_levels,
            DepthRule::Fixed(d) => d,
        }
    }

    pub fn fixed_depths(&self) -> bool {
        matches!(self.depth, DepthRule::Fixed(_))
    }
}

/// Walks every image as `cfg` requires.
pub fn analyze(images: Vec<RasterImage>, cfg: &PipelineConfig) -> Result<Vec<ImageAnalysis>> {
    analyze_images(
        images,
        &FilterBank::default(),
        &cfg.selection,
        cfg.method,
        cfg.walk_depth(),
        cfg.fixed_depths(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub held_out: String,
    pub test_rows: Vec<usize>,
    pub accuracy: f64,
    pub class_paths: BTreeMap<String, BandPath>,
    pub basis_size: usize,
    pub n_features: usize,
    pub n_selected: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grid: Option<GridResult>,
    pub support_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LopoResult {
    pub method: Method,
    pub classes: Vec<String>,
    pub folds: Vec<FoldOutcome>,
    /// Predicted label per input row.
    pub predictions: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
    /// Consensus path per class over all rows.
    pub class_paths: BTreeMap<String, BandPath>,
}

impl LopoResult {
    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }

    pub fn class_depths(&self) -> BTreeMap<String, usize> {
        self.class_paths.iter().map(|(k, p)| (k.clone(), p.level())).collect()
    }
}

fn sorted_classes(labels: &[String]) -> Vec<String> {
    let mut c = labels.to_vec();
    c.sort();
    c.dedup();
    c
}

/// Per-image paths under the depth rule of `cfg`.
fn image_paths(analyses: &[ImageAnalysis], cfg: &PipelineConfig) -> Result<Vec<BasisPath>> {
    analyses.iter().map(|a| a.path(cfg.method, cfg.depth)).collect()
}

struct Split<'a> {
    name: String,
    train: &'a [usize],
    test: &'a [usize],
}

struct SplitFit {
    predictions: Vec<String>,
    outcome: FoldOutcome,
}

struct ColumnFit {
    predictions: Vec<String>,
    selected: Vec<usize>,
    grid: Option<GridResult>,
    support_counts: Vec<usize>,
}

/// Fits on `train` rows restricted to `cols` (optionally pruned) and labels
/// the `test` rows.
fn fit_columns(
    full: &FeatureMatrix,
    cols: &[usize],
    train_rows: &[usize],
    test_rows: &[usize],
    classes: &[String],
    classifier: &ClassifierConfig,
    prune: Option<f64>,
) -> Result<ColumnFit> {
    let train_m = full.select_rows(train_rows).select_columns(cols)?;
    let selected: Vec<usize> = match prune {
        Some(t) => correlation_prune(&train_m, &divergence_rank(&train_m)?, t)?,
        None => (0..cols.len()).collect(),
    };
    let train_m = train_m.select_columns(&selected)?;
    let model = train(&train_m, classes, classifier)?;
    let predictions = test_rows
        .iter()
        .map(|&t| {
            let x: Vec<f64> = selected.iter().map(|&j| full.rows[t].features[cols[j]]).collect();
            Ok(classes[predict_label(&model, &x)?.label].clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ColumnFit {
        predictions,
        selected,
        grid: model.grid.clone(),
        support_counts: model.support_counts(),
    })
}

/// Builds each split's basis from its training rows, measures every image
/// once on the union of bases, then fits and predicts per split.
fn run_splits(
    analyses: &mut [ImageAnalysis],
    labels: &[String],
    patients: &[String],
    splits: &[Split<'_>],
    cfg: &PipelineConfig,
) -> Result<(Vec<SplitFit>, BTreeMap<String, BandPath>)> {
    let paths = image_paths(analyses, cfg)?;
    let classes = sorted_classes(labels);
    let all_rows: Vec<usize> = (0..labels.len()).collect();
    let overall = class_consensus(&paths, labels, &all_rows)?;
    let per_split: Vec<(BTreeMap<String, BandPath>, GlobalBasis)> = splits
        .iter()
        .map(|s| {
            let cp = class_consensus(&paths, labels, s.train)?;
            let basis = build_global_basis(&cp.values().cloned().collect::<Vec<_>>())?;
            Ok((cp, basis))
        })
        .collect::<Result<_>>()?;
    let union = build_global_basis(
        &per_split
            .iter()
            .flat_map(|(cp, _)| cp.values().cloned())
            .collect::<Vec<_>>(),
    )?;
    let full = extract_matrix(analyses, &union, cfg.method, labels, patients)?;
    let per_subband = full.n_cols() / union.len();
    let fits = splits
        .par_iter()
        .zip(&per_split)
        .map(|(s, (cp, basis))| {
            let cols: Vec<usize> = basis
                .subbands
                .iter()
                .flat_map(|p| {
                    let at = union.subbands.binary_search_by(|q| (q.level(), q).cmp(&(p.level(), p))).expect("union");
                    at * per_subband..(at + 1) * per_subband
                })
                .collect();
            let fit = fit_columns(&full, &cols, s.train, s.test, &classes, &cfg.classifier, cfg.prune)?;
            let correct = s.test.iter().zip(&fit.predictions).filter(|(&t, p)| **p == labels[t]).count();
            Ok(SplitFit {
                outcome: FoldOutcome {
                    held_out: s.name.clone(),
                    test_rows: s.test.to_vec(),
                    accuracy: correct as f64 / s.test.len().max(1) as f64,
                    class_paths: cp.clone(),
                    basis_size: basis.len(),
                    n_features: cols.len(),
                    n_selected: fit.selected.len(),
                    grid: fit.grid,
                    support_counts: fit.support_counts,
                },
                predictions: fit.predictions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((fits, overall))
}

/// Leave-one-patient-out evaluation. `analyses` must have been prepared for
/// `cfg` (see [`analyze`]).
pub fn run_lopo(
    analyses: &mut [ImageAnalysis],
    labels: &[String],
    patients: &[String],
    cfg: &PipelineConfig,
) -> Result<LopoResult> {
    let plan = make_lopo_folds(labels, patients)?;
    plan.verify(patients)?;
    let splits: Vec<Split<'_>> = plan
        .folds
        .iter()
        .map(|f| Split {
            name: f.held_out_patient.clone(),
            train: &f.train_rows,
            test: &f.test_rows,
        })
        .collect();
    let (fits, overall) = run_splits(analyses, labels, patients, &splits, cfg)?;
    let mut predictions = vec![String::new(); labels.len()];
    let mut folds = Vec::with_capacity(fits.len());
    for fit in fits {
        for (&r, p) in fit.outcome.test_rows.iter().zip(fit.predictions) {
            predictions[r] = p;
        }
        folds.push(fit.outcome);
    }
    let classes = sorted_classes(labels);
    let (confusion, report) = score_run(&predictions, labels, &classes)?;
    Ok(LopoResult {
        method: cfg.method,
        classes,
        folds,
        predictions,
        confusion,
        report,
        class_paths: overall,
    })
}

/// LOPO over an already-extracted feature matrix; every fold uses all columns
/// (pruning, when enabled, is refitted on each fold's training rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixFold {
    pub held_out: String,
    pub accuracy: f64,
    pub n_selected: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grid: Option<GridResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixLopoResult {
    pub classes: Vec<String>,
    pub folds: Vec<MatrixFold>,
    pub predictions: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
}

impl MatrixLopoResult {
    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }
}

pub fn run_lopo_matrix(m: &FeatureMatrix, classifier: &ClassifierConfig, prune: Option<f64>) -> Result<MatrixLopoResult> {
    let labels: Vec<String> = m.rows.iter().map(|r| r.label.clone()).collect();
    let patients: Vec<String> = m.rows.iter().map(|r| r.patient.clone()).collect();
    let plan = make_lopo_folds(&labels, &patients)?;
    plan.verify(&patients)?;
    let classes = sorted_classes(&labels);
    let cols: Vec<usize> = (0..m.n_cols()).collect();
    let fits = plan
        .folds
        .par_iter()
        .map(|f| fit_columns(m, &cols, &f.train_rows, &f.test_rows, &classes, classifier, prune))
        .collect::<Result<Vec<_>>>()?;
    let mut predictions = vec![String::new(); labels.len()];
    let mut folds = Vec::with_capacity(fits.len());
    for (f, fit) in plan.folds.iter().zip(fits) {
        let correct = f.test_rows.iter().zip(&fit.predictions).filter(|(&t, p)| **p == labels[t]).count();
        for (&r, p) in f.test_rows.iter().zip(&fit.predictions) {
            predictions[r] = p.clone();
        }
        folds.push(MatrixFold {
            held_out: f.held_out_patient.clone(),
            accuracy: correct as f64 / f.test_rows.len().max(1) as f64,
            n_selected: fit.selected.len(),
            grid: fit.grid,
        });
    }
    let (confusion, report) = score_run(&predictions, &labels, &classes)?;
    Ok(MatrixLopoResult {
        classes,
        folds,
        predictions,
        confusion,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub method: Method,
    pub levels: Vec<LevelAccuracy>,
    pub lambda: f64,
    pub lambda_accuracy: f64,
    /// Termination depth of each class's consensus path under the threshold.
    pub lambda_class_depths: BTreeMap<String, usize>,
    pub report: MetricsReport,
}

/// LOPO accuracy at every forced depth `1..=max_level`, plus the
/// threshold-terminated run. Walks are done once to `max_level` and truncated.
pub fn sweep_levels(
    images: Vec<RasterImage>,
    labels: &[String],
    patients: &[String],
    cfg: &PipelineConfig,
    max_level: usize,
) -> Result<SweepReport> {
    let sel = SelectionConfig {
        max_levels: max_level,
        ..cfg.selection
    };
    sel.validate()?;
    let fb = FilterBank::default();
    let mut analyses: Vec<ImageAnalysis> = images
        .into_par_iter()
        .map(|img| {
            let mut a = ImageAnalysis::new(img, fb, sel.window, crate::bestbasis::DEFAULT_GLCM_LEVELS)?;
            a.prepare(Method::BbsFd, &sel, max_level, true)?;
            if cfg.method != Method::BbsFd {
                a.prepare(cfg.method, &sel, max_level, true)?;
            }
            Ok(a)
        })
        .collect::<Result<_>>()?;
    let mut levels = Vec::with_capacity(max_level);
    for d in 1..=max_level {
        let run_cfg = PipelineConfig {
            depth: DepthRule::Fixed(d),
            selection: sel,
            ..cfg.clone()
        };
        let r = run_lopo(&mut analyses, labels, patients, &run_cfg)?;
        levels.push(LevelAccuracy {
            depth: d,
            accuracy: r.report.overall_accuracy,
        });
    }
    let lam_cfg = PipelineConfig {
        depth: DepthRule::Lambda,
        selection: sel,
        ..cfg.clone()
    };
    let lam = run_lopo(&mut analyses, labels, patients, &lam_cfg)?;
    let mut report = lam.report.clone();
    report.per_level = Some(levels.clone());
    Ok(SweepReport {
        method: cfg.method,
        levels,
        lambda: sel.lambda,
        lambda_accuracy: lam.report.overall_accuracy,
        lambda_class_depths: lam.class_depths(),
        report,
    })
}

/// Patch-based holdout on a directory of single-texture images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrodatzConfig {
    pub patch: usize,
    /// Patch origins per axis, evenly spaced across the image.
    pub per_axis: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub channel: Channel,
    pub se_size: Option<usize>,
    pub pipeline: PipelineConfig,
}

impl Default for BrodatzConfig {
    fn default() -> Self {
        Self {
            patch: 32,
            per_axis: 16,
            train_per_class: 64,
            test_per_class: 192,
            seed: 0,
            channel: Channel::Gray,
            se_size: None,
            pipeline: PipelineConfig {
                classifier: ClassifierConfig {
                    kind: crate::classify::ClassifierKind::Nbc,
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrodatzReport {
    pub textures: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
}

/// Origins `round(i (len - patch) / (n - 1))` for `i in 0..n`.
pub fn patch_origins(len: usize, patch: usize, n: usize) -> Result<Vec<usize>> {
    if patch > len || n == 0 {
        return Err(Error::Parameter(format!("cannot place {n} patches of {patch} in {len}")));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    Ok((0..n)
        .map(|i| ((i * (len - patch)) as f64 / (n - 1) as f64).round() as usize)
        .collect())
}

/// Texture images in `dir` (PGM/PPM/PNG), sorted by file name.
pub fn texture_files(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm" | "png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn brodatz_holdout(dir: impl AsRef<Path>, cfg: &BrodatzConfig) -> Result<BrodatzReport> {
    let files = texture_files(dir)?;
    if files.len() < 2 {
        return Err(Error::Input("texture directory needs at least two images".into()));
    }
    let per_class = cfg.per_axis * cfg.per_axis;
    if cfg.train_per_class + cfg.test_per_class > per_class {
        return Err(Error::Parameter(format!(
            "{} train + {} test patches exceed the {per_class} available per texture",
            cfg.train_per_class, cfg.test_per_class
        )));
    }
    let se = cfg.se_size.map(StructuringElement::square).transpose()?;
    let mut textures = Vec::new();
    let mut patches = Vec::new();
    let mut labels = Vec::new();
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for (t, f) in files.iter().enumerate() {
        let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or("texture").to_string();
        let img = preprocess(&load_color(f)?, cfg.channel, se.as_ref())?;
        let xs = patch_origins(img.width(), cfg.patch, cfg.per_axis)?;
        let ys = patch_origins(img.height(), cfg.patch, cfg.per_axis)?;
        let mut order: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, t as u64)));
        for (k, &(x, y)) in order.iter().take(cfg.train_per_class + cfg.test_per_class).enumerate() {
            if k < cfg.train_per_class {
                train_rows.push(patches.len());
            } else {
                test_rows.push(patches.len());
            }
            patches.push(img.crop(x, y, cfg.patch, cfg.patch)?);
            labels.push(name.clone());
        }
        textures.push(name);
    }
    let patients: Vec<String> = (0..patches.len()).map(|i| format!("patch{i}")).collect();
    let mut analyses = analyze(patches, &cfg.pipeline)?;
    let split = Split {
        name: "holdout".into(),
        train: &train_rows,
        test: &test_rows,
    };
    let (fits, _) = run_splits(&mut analyses, &labels, &patients, std::slice::from_ref(&split), &cfg.pipeline)?;
    let truth: Vec<String> = test_rows.iter().map(|&r| labels[r].clone()).collect();
    let classes = sorted_classes(&labels);
    let (confusion, report) = score_run(&fits[0].predictions, &truth, &classes)?;
    Ok(BrodatzReport {
        textures,
        n_train: train_rows.len(),
        n_test: test_rows.len(),
        confusion,
        report,
    })
}
