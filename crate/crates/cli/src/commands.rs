use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use fractex::bestbasis::BasisPath;
use fractex::classify::{predict_label, train as fit, TrainedModel};
use fractex::eval::{
    analyze, brodatz_holdout, deformation_cells, preprocess, render_text, run_lopo, run_lopo_matrix, score_run,
    sweep_levels, wilcoxon_signed_rank, ConfusionMatrix, MetricsReport,
};
use fractex::features::{
    build_global_basis, class_consensus, extract_matrix, select_features, FeatureMatrix, Method, SelectionReport,
};
use fractex::fractal::fd_image;
use fractex::imgprep::shear_deform;
use fractex::raster::{load_color, save_color, write_pgm, write_pgm_rescaled, ColorImage, RasterImage};
use fractex::synth::{gen_corpus, read_manifest, surrogate_classes, write_corpus, write_manifest, Jitter, ManifestRow};
use fractex::wavelet::BandPath;
use fractex::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

/// Serializes `body` with the producing config hash added at top level.
fn stamped<T: Serialize>(cfg: &RunConfig, body: &T) -> Result<Value> {
    let mut v = serde_json::to_value(body)?;
    match &mut v {
        Value::Object(map) => {
            map.insert("config_hash".into(), Value::String(cfg.hash()));
        }
        other => {
            *other = json!({ "config_hash": cfg.hash(), "value": other.clone() });
        }
    }
    Ok(v)
}

fn write_json<T: Serialize>(path: &Path, cfg: &RunConfig, body: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&stamped(cfg, body)?)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_text(path: &Path, cfg: &RunConfig, body: &str) -> Result<()> {
    std::fs::write(path, format!("# config_hash={}\n{body}", cfg.hash()))?;
    Ok(())
}

fn single_method(cfg: &RunConfig) -> Result<Method> {
    match cfg.methods.as_slice() {
        [m] => Ok(*m),
        _ => Err(Error::Parameter("this command takes exactly one method".into())),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct FileFailure {
    filename: String,
    error: String,
}

struct Corpus {
    rows: Vec<ManifestRow>,
    images: Vec<RasterImage>,
    failures: Vec<FileFailure>,
}

impl Corpus {
    fn labels(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.label.clone()).collect()
    }

    fn patients(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.patient.clone()).collect()
    }
}

fn read_rows(dir: &Path) -> Result<Vec<ManifestRow>> {
    let rows = read_manifest(dir.join("manifest.csv"))?;
    if rows.is_empty() {
        return Err(Error::Input("no input rows".into()));
    }
    Ok(rows)
}

/// Loads and preprocesses every manifest entry. Unreadable files are set
/// aside; the load fails only when a class is left without images.
fn load_corpus(dir: &Path, cfg: &RunConfig) -> Result<Corpus> {
    let rows = read_rows(dir)?;
    let se = cfg.structuring_element()?;
    let loaded: Vec<Result<RasterImage>> = rows
        .par_iter()
        .map(|r| preprocess(&load_color(dir.join(&r.filename))?, cfg.channel, se.as_ref()))
        .collect();
    let mut corpus = Corpus {
        rows: Vec::new(),
        images: Vec::new(),
        failures: Vec::new(),
    };
    for (row, res) in rows.iter().zip(loaded) {
        match res {
            Ok(img) => {
                corpus.rows.push(row.clone());
                corpus.images.push(img);
            }
            Err(e) => corpus.failures.push(FileFailure {
                filename: row.filename.clone(),
                error: e.to_string(),
            }),
        }
    }
    let wanted: BTreeSet<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    let present: BTreeSet<&str> = corpus.rows.iter().map(|r| r.label.as_str()).collect();
    if let Some(empty) = wanted.difference(&present).next() {
        return Err(Error::Data(format!(
            "class '{empty}' has no readable images ({} files failed)",
            corpus.failures.len()
        )));
    }
    Ok(corpus)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let classes = surrogate_classes(cfg.synth.size, cfg.synth.images_per_class, cfg.synth.patients_per_class);
    let corpus = gen_corpus(&classes, cfg.seed, &Jitter::default())?;
    write_corpus(out, &corpus)?;
    write_json(
        &out.join("synth.json"),
        cfg,
        &json!({ "seed": cfg.seed, "images": corpus.len(), "classes": classes }),
    )
}

#[derive(Serialize)]
struct ImagePath<'a> {
    filename: &'a str,
    label: &'a str,
    patient: &'a str,
    path: &'a BasisPath,
}

pub fn extract(
    cfg: &RunConfig,
    input: &Path,
    out: &Path,
    dump_subband: Option<&Path>,
    dump_fd: Option<&Path>,
) -> Result<()> {
    let method = single_method(cfg)?;
    let corpus = load_corpus(input, cfg)?;
    let (labels, patients) = (corpus.labels(), corpus.patients());
    let pc = cfg.pipeline(method);
    let mut analyses = analyze(corpus.images, &pc)?;
    let paths: Vec<BasisPath> = analyses
        .iter()
        .map(|a| a.path(method, pc.depth))
        .collect::<Result<_>>()?;
    let all: Vec<usize> = (0..labels.len()).collect();
    let class_paths = class_consensus(&paths, &labels, &all)?;
    let basis = build_global_basis(&class_paths.values().cloned().collect::<Vec<_>>())?;
    let matrix = extract_matrix(&mut analyses, &basis, method, &labels, &patients)?;
    matrix.write_csv(out, Some(&cfg.hash()))?;

    let images: Vec<ImagePath<'_>> = corpus
        .rows
        .iter()
        .zip(&paths)
        .map(|(r, p)| ImagePath {
            filename: &r.filename,
            label: &r.label,
            patient: &r.patient,
            path: p,
        })
        .collect();
    write_json(
        &sibling(out, ".paths.json"),
        cfg,
        &json!({
            "method": method,
            "class_paths": class_paths,
            "basis": basis,
            "images": images,
            "failures": corpus.failures,
        }),
    )?;

    for dir in [dump_subband, dump_fd].into_iter().flatten() {
        std::fs::create_dir_all(dir)?;
    }
    if dump_subband.is_some() || dump_fd.is_some() {
        for ((row, path), a) in corpus.rows.iter().zip(&paths).zip(analyses.iter_mut()) {
            let node = BandPath::new(path.bands());
            let sub = a.analyzer_mut().subband(&node)?.clone();
            let stem = Path::new(&row.filename)
                .file_stem()
                .map_or_else(|| row.filename.clone(), |s| s.to_string_lossy().into_owned());
            let name = format!("{stem}_{}.pgm", node.to_string().replace('.', "-"));
            if let Some(dir) = dump_subband {
                write_pgm_rescaled(dir.join(&name), &sub)?;
            }
            if let Some(dir) = dump_fd {
                write_pgm(dir.join(&name), &fd_image(&sub, cfg.window)?.to_raster_u8_scale())?;
            }
        }
    }
    Ok(())
}

pub fn select(cfg: &RunConfig, features: &Path, out: &Path, pruned: Option<&Path>) -> Result<()> {
    let m = FeatureMatrix::read_csv(features)?;
    let report = select_features(&m, cfg.threshold)?;
    write_json(out, cfg, &report)?;
    if let Some(p) = pruned {
        let cols: Vec<usize> = report.selected.iter().map(|s| s.index).collect();
        m.select_columns(&cols)?.write_csv(p, Some(&cfg.hash()))?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, features: &Path, selection: Option<&Path>, out: &Path) -> Result<()> {
    let mut m = FeatureMatrix::read_csv(features)?;
    if let Some(sel) = selection {
        let report: SelectionReport = serde_json::from_str(&std::fs::read_to_string(sel)?)?;
        let cols = report
            .selected
            .iter()
            .map(|s| {
                m.column_names
                    .iter()
                    .position(|c| *c == s.name)
                    .ok_or_else(|| Error::Input(format!("selected feature '{}' not in {}", s.name, features.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        m = m.select_columns(&cols)?;
    }
    let model = fit(&m, &m.classes(), &cfg.classifier())?;
    write_json(out, cfg, &model)
}

/// One evaluated run as written to `metrics.json`.
#[derive(Serialize)]
struct RunSummary<'a, F: Serialize> {
    source: String,
    report: &'a MetricsReport,
    confusion: &'a ConfusionMatrix,
    folds: F,
}

struct Emitted {
    source: String,
    confusion: ConfusionMatrix,
    report: MetricsReport,
    summary: Value,
    fold_accuracies: Vec<f64>,
    fold_patients: Vec<String>,
}

fn emit(cfg: &RunConfig, out: &Path, runs: &[Emitted], extra: Option<(&str, Value)>) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut text = String::new();
    for (i, r) in runs.iter().enumerate() {
        let name = if runs.len() == 1 {
            "confusion.csv".to_string()
        } else {
            format!("confusion_{}.csv", i + 1)
        };
        write_text(&out.join(name), cfg, &r.confusion.to_csv())?;
        text.push_str(&format!("== {}\n{}\n", r.source, render_text(&r.confusion, &r.report)));
    }
    let mut body = json!({ "runs": runs.iter().map(|r| r.summary.clone()).collect::<Vec<_>>() });
    if let Some((key, v)) = extra {
        text.push_str(&format!("== {key}\n{}\n", serde_json::to_string_pretty(&v)?));
        write_json(&out.join(format!("{key}.json")), cfg, &v)?;
        body[key] = v;
    }
    write_text(&out.join("report.txt"), cfg, &text)?;
    write_json(&out.join("metrics.json"), cfg, &body)
}

/// Paired signed-rank test over per-patient fold accuracies.
fn compare(runs: &[Emitted]) -> Result<Option<(&'static str, Value)>> {
    let [a, b] = runs else {
        return Ok(None);
    };
    if a.fold_patients != b.fold_patients {
        return Err(Error::Input(format!(
            "'{}' and '{}' do not share the same patients",
            a.source, b.source
        )));
    }
    let v = match wilcoxon_signed_rank(&a.fold_accuracies, &b.fold_accuracies) {
        Ok(w) => json!({ "a": a.source, "b": b.source, "result": w }),
        Err(e) => json!({ "a": a.source, "b": b.source, "error": e.to_string() }),
    };
    Ok(Some(("wilcoxon", v)))
}

pub fn evaluate_features(cfg: &RunConfig, files: &[PathBuf], out: &Path) -> Result<()> {
    if files.is_empty() || files.len() > 2 {
        return Err(Error::Parameter("evaluate takes one or two feature files".into()));
    }
    let classifier = cfg.classifier();
    let runs = files
        .iter()
        .map(|f| {
            let m = FeatureMatrix::read_csv(f)?;
            let r = run_lopo_matrix(&m, &classifier, cfg.prune)?;
            let source = f.display().to_string();
            let summary = serde_json::to_value(RunSummary {
                source: source.clone(),
                report: &r.report,
                confusion: &r.confusion,
                folds: &r.folds,
            })?;
            Ok(Emitted {
                source,
                fold_accuracies: r.fold_accuracies(),
                fold_patients: r.folds.iter().map(|f| f.held_out.clone()).collect(),
                confusion: r.confusion,
                report: r.report,
                summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let extra = compare(&runs)?;
    emit(cfg, out, &runs, extra)
}

pub fn evaluate_model(cfg: &RunConfig, model: &Path, files: &[PathBuf], out: &Path) -> Result<()> {
    let [file] = files else {
        return Err(Error::Parameter("model evaluation takes exactly one feature file".into()));
    };
    let model = TrainedModel::load(model)?;
    let m = FeatureMatrix::read_csv(file)?;
    if m.column_names != model.column_names {
        return Err(Error::Input(format!(
            "classifier/feature mismatch: model expects {} columns [{}...], {} has {}",
            model.column_names.len(),
            model.column_names.first().map_or("", |s| s.as_str()),
            file.display(),
            m.n_cols()
        )));
    }
    let predictions = m
        .rows
        .iter()
        .map(|r| Ok(model.classes[predict_label(&model, &r.features)?.label].clone()))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<String> = m.rows.iter().map(|r| r.label.clone()).collect();
    if let Some(unknown) = truth.iter().find(|t| !model.classes.contains(t)) {
        return Err(Error::Input(format!("label '{unknown}' was not seen in training")));
    }
    let (confusion, report) = score_run(&predictions, &truth, &model.classes)?;
    let source = file.display().to_string();
    let summary = serde_json::to_value(RunSummary {
        source: source.clone(),
        report: &report,
        confusion: &confusion,
        folds: Value::Null,
    })?;
    let run = Emitted {
        source,
        confusion,
        report,
        summary,
        fold_accuracies: Vec::new(),
        fold_patients: Vec::new(),
    };
    emit(cfg, out, &[run], None)
}

pub fn evaluate_corpus(cfg: &RunConfig, dir: &Path, out: &Path) -> Result<()> {
    if cfg.methods.len() > 2 {
        return Err(Error::Parameter("evaluate compares at most two methods".into()));
    }
    let corpus = load_corpus(dir, cfg)?;
    let (labels, patients) = (corpus.labels(), corpus.patients());
    let mut runs = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let pc = cfg.pipeline(method);
        let mut analyses = analyze(corpus.images.clone(), &pc)?;
        let r = run_lopo(&mut analyses, &labels, &patients, &pc)?;
        let source = method.to_string();
        let summary = serde_json::to_value(RunSummary {
            source: source.clone(),
            report: &r.report,
            confusion: &r.confusion,
            folds: json!({ "class_paths": r.class_paths, "folds": r.folds }),
        })?;
        runs.push(Emitted {
            source,
            fold_accuracies: r.fold_accuracies(),
            fold_patients: r.folds.iter().map(|f| f.held_out.clone()).collect(),
            confusion: r.confusion,
            report: r.report,
            summary,
        });
    }
    let extra = compare(&runs)?;
    emit(cfg, out, &runs, extra)
}

pub fn evaluate_holdout_textures(cfg: &RunConfig, dir: &Path, out: &Path) -> Result<()> {
    let r = brodatz_holdout(dir, &cfg.brodatz())?;
    let summary = serde_json::to_value(&r)?;
    let run = Emitted {
        source: dir.display().to_string(),
        confusion: r.confusion,
        report: r.report,
        summary,
        fold_accuracies: Vec::new(),
        fold_patients: Vec::new(),
    };
    emit(cfg, out, &[run], None)
}

pub fn sweep(cfg: &RunConfig, dir: &Path, out: &Path) -> Result<()> {
    let method = single_method(cfg)?;
    let corpus = load_corpus(dir, cfg)?;
    let mut pc = cfg.pipeline(method);
    pc.depth = fractex::features::DepthRule::Lambda;
    let max_level = cfg.levels.unwrap_or(cfg.max_levels);
    let (labels, patients) = (corpus.labels(), corpus.patients());
    let r = sweep_levels(corpus.images, &labels, &patients, &pc, max_level)?;
    std::fs::create_dir_all(out)?;
    let mut text = String::from("depth  accuracy\n");
    for l in &r.levels {
        text.push_str(&format!("{:>5}  {:>7.2}%\n", l.depth, 100.0 * l.accuracy));
    }
    text.push_str(&format!(
        "lambda {}  {:.2}%  class depths {:?}\n",
        r.lambda,
        100.0 * r.lambda_accuracy,
        r.lambda_class_depths
    ));
    write_text(&out.join("report.txt"), cfg, &text)?;
    write_json(&out.join("sweep.json"), cfg, &r)
}

fn deform_color(img: &ColorImage, cells: &[usize], cfg: &RunConfig) -> Result<ColorImage> {
    let (w, h) = (img.width(), img.height());
    let planes = (0..3)
        .map(|i| {
            let plane = RasterImage::from_u8(w, h, img.plane(i))?;
            Ok(shear_deform(&plane, cells, cfg.shear())?.to_u8())
        })
        .collect::<Result<Vec<_>>>()?;
    let [r, g, b]: [Vec<u8>; 3] = planes.try_into().expect("three planes");
    ColorImage::new(w, h, r, g, b)
}

pub fn deform(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let rows = read_rows(input)?;
    std::fs::create_dir_all(out)?;
    let cells: Vec<Vec<usize>> = (0..rows.len())
        .map(|i| match &cfg.deform.cells {
            Some(fixed) => fixed.clone(),
            None => deformation_cells(cfg.seed, i, cfg.deform.count),
        })
        .collect();
    rows.par_iter().zip(&cells).try_for_each(|(row, c)| {
        let img = load_color(input.join(&row.filename))?;
        let target = out.join(&row.filename);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)?;
        }
        save_color(target, &deform_color(&img, c, cfg)?)
    })?;
    write_manifest(out.join("manifest.csv"), &rows)?;
    let record: BTreeMap<&str, &Vec<usize>> = rows.iter().map(|r| r.filename.as_str()).zip(&cells).collect();
    write_json(
        &out.join("deform.json"),
        cfg,
        &json!({ "shear": cfg.deform.shear, "cells": record }),
    )
}
