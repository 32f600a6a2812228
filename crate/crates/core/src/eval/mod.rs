//! Leave-one-patient-out validation, confusion matrices and derived rates,
//! and paired method comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod pipeline;
pub mod wilcoxon;

pub use pipeline::{
    analyze, brodatz_holdout, deformation_cells, preprocess, run_lopo, run_lopo_matrix, sweep_levels, BrodatzConfig, BrodatzReport, Dataset,
    FoldOutcome, LopoResult, MatrixFold, MatrixLopoResult, PipelineConfig, SweepReport,
};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonMethod, WilcoxonResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub held_out_patient: String,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// One fold per distinct patient, in sorted patient order.
pub fn make_lopo_folds(labels: &[String], patients: &[String]) -> Result<FoldPlan> {
    if labels.len() != patients.len() {
        return Err(Error::Structural("labels and patients differ in length".into()));
    }
    let mut by_patient: BTreeMap<&str, (Vec<usize>, &str)> = BTreeMap::new();
    for (i, (p, l)) in patients.iter().zip(labels).enumerate() {
        if p.is_empty() {
            return Err(Error::Data(format!("row {i} has no patient id")));
        }
        let entry = by_patient.entry(p).or_insert((Vec::new(), l));
        if entry.1 != l {
            return Err(Error::Data(format!(
                "patient '{p}' has rows in classes '{}' and '{l}'",
                entry.1
            )));
        }
        entry.0.push(i);
    }
    if by_patient.len() < 2 {
        return Err(Error::Data("leave-one-patient-out needs at least two patients".into()));
    }
    let folds = by_patient
        .into_iter()
        .map(|(p, (test, _))| Fold {
            held_out_patient: p.to_string(),
            train_rows: (0..labels.len()).filter(|i| patients[*i] != p).collect(),
            test_rows: test,
        })
        .collect();
    Ok(FoldPlan { folds })
}

impl FoldPlan {
    /// Checks that test sets partition the rows and no patient straddles a split.
    pub fn verify(&self, patients: &[String]) -> Result<()> {
        let mut seen = vec![false; patients.len()];
        for f in &self.folds {
            for &t in &f.test_rows {
                if seen[t] {
                    return Err(Error::Data(format!("row {t} tested twice")));
                }
                seen[t] = true;
                if patients[t] != f.held_out_patient {
                    return Err(Error::Data(format!("row {t} tested in the wrong fold")));
                }
            }
            if f.train_rows.iter().any(|&r| patients[r] == f.held_out_patient) {
                return Err(Error::Data(format!("patient '{}' leaks into training", f.held_out_patient)));
            }
            if f.train_rows.len() + f.test_rows.len() != patients.len() {
                return Err(Error::Data("fold does not cover every row".into()));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("some rows are never tested".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for c in &self.class_names {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    /// `None` when the class has no test rows.
    pub sensitivity: Option<f64>,
    /// `None` when every test row belongs to the class.
    pub specificity: Option<f64>,
    /// One-vs-rest accuracy.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAccuracy {
    pub depth: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_level: Option<Vec<LevelAccuracy>>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> MetricsReport {
    let n = cm.class_names.len();
    let total = cm.total();
    let per_class = (0..n)
        .map(|c| {
            let tp = cm.counts[c][c];
            let fn_: usize = cm.counts[c].iter().sum::<usize>() - tp;
            let fp: usize = (0..n).map(|r| cm.counts[r][c]).sum::<usize>() - tp;
            let tn = total - tp - fn_ - fp;
            ClassMetrics {
                class: cm.class_names[c].clone(),
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
                accuracy: ratio(tp + tn, total).unwrap_or(0.0),
            }
        })
        .collect();
    MetricsReport {
        overall_accuracy: ratio(cm.trace(), total).unwrap_or(0.0),
        per_class,
        per_level: None,
    }
}

pub fn score_run(preds: &[String], truth: &[String], class_names: &[String]) -> Result<(ConfusionMatrix, MetricsReport)> {
    if preds.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} truth labels",
            preds.len(),
            truth.len()
        )));
    }
    let index = |l: &String| {
        class_names
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| Error::Input(format!("unknown label '{l}'")))
    };
    let n = class_names.len();
    let mut counts = vec![vec![0usize; n]; n];
    for (p, t) in preds.iter().zip(truth) {
        counts[index(t)?][index(p)?] += 1;
    }
    let cm = ConfusionMatrix {
        class_names: class_names.to_vec(),
        counts,
    };
    let report = metrics_from_confusion(&cm);
    Ok((cm, report))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}%", 100.0 * x))
}

/// Row-normalised confusion percentages followed by per-class rates.
pub fn render_text(cm: &ConfusionMatrix, report: &MetricsReport) -> String {
    let w = cm.class_names.iter().map(String::len).max().unwrap_or(5).max(9);
    let mut s = String::new();
    let _ = write!(s, "{:w$}", "");
    for c in &cm.class_names {
        let _ = write!(s, " {c:>w$}");
    }
    s.push('\n');
    for (name, row) in cm.class_names.iter().zip(&cm.counts) {
        let total: usize = row.iter().sum();
        let _ = write!(s, "{name:w$}");
        for &v in row {
            let _ = write!(s, " {:>w$}", pct(ratio(v, total)));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "\n{:w$} {:>12} {:>12} {:>12}", "class", "sensitivity", "specificity", "accuracy");
    for m in &report.per_class {
        let _ = writeln!(
            s,
            "{:w$} {:>12} {:>12} {:>12}",
            m.class,
            pct(m.sensitivity),
            pct(m.specificity),
            pct(Some(m.accuracy))
        );
    }
    let _ = writeln!(s, "\noverall accuracy {}", pct(Some(report.overall_accuracy)));
    if let Some(levels) = &report.per_level {
        s.push_str("\ndepth accuracy\n");
        for l in levels {
            let _ = writeln!(s, "{:>5} {}", l.depth, pct(Some(l.accuracy)));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn paper_geometry_folds() {
        let mut labels = Vec::new();
        let mut patients = Vec::new();
        for c in 0..4 {
            for p in 0..5 {
                for _ in 0..16 {
                    labels.push(format!("c{c}"));
                    patients.push(format!("c{c}-p{p}"));
                }
            }
        }
        let plan = make_lopo_folds(&labels, &patients).unwrap();
        assert_eq!(plan.folds.len(), 20);
        assert!(plan.folds.iter().all(|f| f.test_rows.len() == 16 && f.train_rows.len() == 304));
        plan.verify(&patients).unwrap();
    }

    #[test]
    fn minimal_and_invalid_plans() {
        let plan = make_lopo_folds(&strs(&["a", "b"]), &strs(&["p", "q"])).unwrap();
        assert_eq!(plan.folds.len(), 2);
        assert!(matches!(
            make_lopo_folds(&strs(&["a", "b"]), &strs(&["p", "p"])),
            Err(Error::Data(_))
        ));
        assert!(make_lopo_folds(&strs(&["a"]), &strs(&["p"])).is_err());
    }

    #[test]
    fn hand_scored_run() {
        let classes = strs(&["A", "B", "C", "D"]);
        let (cm, r) = score_run(&strs(&["A", "B", "B", "B"]), &strs(&["A", "A", "B", "B"]), &classes).unwrap();
        assert_eq!(cm.counts[0], vec![1, 1, 0, 0]);
        assert_eq!(r.per_class[0].sensitivity, Some(0.5));
        assert_eq!(r.per_class[0].specificity, Some(1.0));
        assert_eq!(r.overall_accuracy, 0.75);
        assert_eq!(r.per_class[2].sensitivity, None);
        assert!(score_run(&strs(&["E"]), &strs(&["A"]), &classes).is_err());
        let text = render_text(&cm, &r);
        assert!(text.contains("50.00%"));
        assert!(cm.to_csv().starts_with("true\\predicted,A,B,C,D\nA,1,1,0,0\n"));
    }

    #[test]
    fn perfect_predictions() {
        let classes = strs(&["x", "y"]);
        let t = strs(&["x", "y", "y"]);
        let (cm, r) = score_run(&t, &t, &classes).unwrap();
        assert_eq!(cm.trace(), 3);
        assert!(r.per_class.iter().all(|m| m.sensitivity == Some(1.0) && m.specificity == Some(1.0)));
    }

    proptest! {
        #[test]
        fn folds_partition_and_ignore_order(
            assign in proptest::collection::vec(0usize..6, 2..60), rot in 0usize..60,
        ) {
            // patient k belongs to class k % 3
            let patients: Vec<String> = assign.iter().map(|k| format!("p{k}")).collect();
            let labels: Vec<String> = assign.iter().map(|k| format!("c{}", k % 3)).collect();
            let distinct = { let mut v = assign.clone(); v.sort(); v.dedup(); v.len() };
            prop_assume!(distinct >= 2);
            let plan = make_lopo_folds(&labels, &patients).unwrap();
            prop_assert_eq!(plan.folds.len(), distinct);
            plan.verify(&patients).unwrap();
            let n = assign.len();
            let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let p2: Vec<String> = order.iter().map(|&i| patients[i].clone()).collect();
            let l2: Vec<String> = order.iter().map(|&i| labels[i].clone()).collect();
            let plan2 = make_lopo_folds(&l2, &p2).unwrap();
            for (a, b) in plan.folds.iter().zip(&plan2.folds) {
                let mut ta: Vec<usize> = a.test_rows.clone();
                let mut tb: Vec<usize> = b.test_rows.iter().map(|&i| order[i]).collect();
                ta.sort();
                tb.sort();
                prop_assert_eq!(ta, tb);
            }
        }

        #[test]
        fn rates_match_raw_counts(truth in proptest::collection::vec(0usize..3, 1..50), shift in proptest::collection::vec(0usize..3, 50)) {
            let classes = strs(&["a", "b", "c"]);
            let t: Vec<String> = truth.iter().map(|&i| classes[i].clone()).collect();
            let p: Vec<String> = truth.iter().zip(&shift).map(|(&i, &s)| classes[(i + s) % 3].clone()).collect();
            let (cm, r) = score_run(&p, &t, &classes).unwrap();
            prop_assert!(cm.trace() <= cm.total());
            let correct = t.iter().zip(&p).filter(|(a, b)| a == b).count();
            prop_assert!((r.overall_accuracy - correct as f64 / t.len() as f64).abs() < 1e-12);
            for (c, m) in r.per_class.iter().enumerate() {
                let pos = truth.iter().filter(|&&x| x == c).count();
                let tp = truth.iter().zip(&p).filter(|(&x, y)| x == c && **y == classes[c]).count();
                if pos > 0 {
                    prop_assert!((m.sensitivity.unwrap() - tp as f64 / pos as f64).abs() < 1e-12);
                }
                let neg = t.len() - pos;
                let tn = truth.iter().zip(&p).filter(|(&x, y)| x != c && **y != classes[c]).count();
                if neg > 0 {
                    prop_assert!((m.specificity.unwrap() - tn as f64 / neg as f64).abs() < 1e-12);
                }
            }
        }
    }
}
