//! Fixed-length feature vectors over a class-spanning basis, divergence
//! ranking and correlation pruning.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bestbasis::{
    BasisPath, EnergyGuide, Provenance, SelectionConfig, SignatureKind, SignatureVector, SubbandAnalyzer,
    DEFAULT_GLCM_LEVELS,
};
use crate::bestbasis::glcm;
use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::wavelet::{Band, BandPath, FilterBank, MAX_DEPTH};

/// Absolute Pearson correlation above which the lower-ranked feature is dropped.
pub const DEFAULT_CORRELATION_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Fractal-dimension-guided walk, mean-FD features.
    BbsFd,
    /// l1-energy walk and features.
    BbsE,
    /// l2-energy walk and features.
    BbsE2,
    /// l1-energy walk, co-occurrence features.
    BbsCm,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::BbsFd => "bbs_fd",
            Method::BbsE => "bbs_e",
            Method::BbsE2 => "bbs_e2",
            Method::BbsCm => "bbs_cm",
        }
    }

    pub fn energy_guide(self) -> Option<EnergyGuide> {
        match self {
            Method::BbsFd => None,
            Method::BbsE | Method::BbsCm => Some(EnergyGuide::E1),
            Method::BbsE2 => Some(EnergyGuide::E2),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bbs_fd" | "fd" => Ok(Method::BbsFd),
            "bbs_e" | "bbs_e1" | "e" => Ok(Method::BbsE),
            "bbs_e2" | "e2" => Ok(Method::BbsE2),
            "bbs_cm" | "cm" | "glcm" => Ok(Method::BbsCm),
            other => Err(Error::Parameter(format!("unknown method '{other}'"))),
        }
    }
}

/// How deep each image's path is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthRule {
    /// Stop where the FD walk's threshold test first fires (baselines use the
    /// same image's FD depth).
    Lambda,
    /// Forced depth with the threshold test disabled.
    Fixed(usize),
}

/// One image's decomposition with memoised subband statistics and the walks
/// performed on it.
#[derive(Debug, Clone)]
pub struct ImageAnalysis {
    analyzer: SubbandAnalyzer,
    fd_walk: Option<BasisPath>,
    energy_walk: Option<(EnergyGuide, BasisPath)>,
}

impl ImageAnalysis {
    pub fn new(img: RasterImage, fb: FilterBank, window: usize, glcm_levels: usize) -> Result<Self> {
        Ok(Self {
            analyzer: SubbandAnalyzer::new(img, fb, window, glcm_levels)?,
            fd_walk: None,
            energy_walk: None,
        })
    }

    pub fn analyzer_mut(&mut self) -> &mut SubbandAnalyzer {
        &mut self.analyzer
    }

    pub fn fd_walk(&self) -> Option<&BasisPath> {
        self.fd_walk.as_ref()
    }

    /// Runs the walks needed by [`ImageAnalysis::path`]. With `fixed_depths`
    /// the walks run to `max_depth` regardless of the threshold, so any forced
    /// depth up to it (and the threshold depth) can be read back; otherwise the
    /// FD walk stops at the threshold.
    pub fn prepare(&mut self, method: Method, sel: &SelectionConfig, max_depth: usize, fixed_depths: bool) -> Result<()> {
        let need_fd = method == Method::BbsFd || !fixed_depths;
        let fd_stale = match &self.fd_walk {
            None => true,
            Some(p) if p.depth() >= max_depth => false,
            Some(p) => fixed_depths || !p.levels.last().is_some_and(|l| l.lambda_hit),
        };
        if need_fd && fd_stale {
            let cfg = SelectionConfig {
                max_levels: max_depth,
                use_lambda: !fixed_depths,
                ..*sel
            };
            let (p, _) = self.analyzer.walk_fd(&cfg)?;
            self.fd_walk = Some(p);
        }
        if let Some(guide) = method.energy_guide() {
            let depth = if fixed_depths {
                max_depth
            } else {
                self.fd_walk.as_ref().expect("walked above").lambda_depth()
            };
            let stale = match &self.energy_walk {
                Some((g, p)) => *g != guide || p.depth() < depth,
                None => true,
            };
            if stale {
                let (p, _) = self.analyzer.walk_energy(depth, guide)?;
                self.energy_walk = Some((guide, p));
            }
        }
        self.analyzer.drop_coefficients();
        Ok(())
    }

    /// This image's selected path under `rule`.
    pub fn path(&self, method: Method, rule: DepthRule) -> Result<BasisPath> {
        let walk = match method.energy_guide() {
            None => self.fd_walk.as_ref(),
            Some(_) => self.energy_walk.as_ref().map(|(_, p)| p),
        }
        .ok_or_else(|| Error::Parameter(format!("{method} walk has not been run")))?;
        let depth = match rule {
            DepthRule::Fixed(d) => d,
            DepthRule::Lambda => match method {
                Method::BbsFd => walk.lambda_depth(),
                _ => self
                    .fd_walk
                    .as_ref()
                    .ok_or_else(|| Error::Parameter("FD walk has not been run".into()))?
                    .lambda_depth(),
            },
        };
        if depth == 0 || depth > walk.depth() {
            return Err(Error::Parameter(format!(
                "depth {depth} not available from a walk of depth {}",
                walk.depth()
            )));
        }
        Ok(walk.truncated(depth))
    }

    /// Feature values of `method` on every subband of `basis`.
    pub fn measure(&mut self, basis: &GlobalBasis, method: Method) -> Result<SignatureVector> {
        let mut sv = SignatureVector::default();
        for p in &basis.subbands {
            match method {
                Method::BbsFd => {
                    let v = self.analyzer.fd(p)?.mean_fd;
                    sv.push(v, Provenance { path: p.clone(), kind: SignatureKind::Fd });
                }
                Method::BbsE | Method::BbsE2 => {
                    let k = if method == Method::BbsE { 1 } else { 2 };
                    let v = self.analyzer.energy(p, k)?;
                    sv.push(v, Provenance { path: p.clone(), kind: SignatureKind::Energy(k) });
                }
                Method::BbsCm => {
                    for (i, v) in self.analyzer.glcm(p)?.into_iter().enumerate() {
                        sv.push(v, Provenance { path: p.clone(), kind: glcm::kind_of(i) });
                    }
                }
            }
        }
        self.analyzer.drop_coefficients();
        Ok(sv)
    }
}

/// Builds one analysis per image and runs the walks for `method`.
pub fn analyze_images(
    images: Vec<RasterImage>,
    fb: &FilterBank,
    sel: &SelectionConfig,
    method: Method,
    max_depth: usize,
    fixed_depths: bool,
) -> Result<Vec<ImageAnalysis>> {
    use rayon::prelude::*;
    images
        .into_par_iter()
        .map(|img| {
            let mut a = ImageAnalysis::new(img, *fb, sel.window, DEFAULT_GLCM_LEVELS)?;
            a.prepare(method, sel, max_depth, fixed_depths)?;
            Ok(a)
        })
        .collect()
}

/// Majority path of one class: depth is the lower median of the members'
/// depths; at each level the most frequent band among members still agreeing
/// with the prefix is taken, ties to the lower band.
pub fn consensus_path(paths: &[BasisPath]) -> Result<BandPath> {
    if paths.is_empty() {
        return Err(Error::Parameter("consensus of zero paths".into()));
    }
    let mut depths: Vec<usize> = paths.iter().map(|p| p.depth()).collect();
    depths.sort_unstable();
    let depth = depths[(depths.len() - 1) / 2];
    let mut prefix: Vec<Band> = Vec::with_capacity(depth);
    for level in 0..depth {
        let mut votes = [0usize; 4];
        for p in paths {
            let bands = p.bands();
            if bands.len() > level && bands[..level] == prefix[..] {
                votes[bands[level].index()] += 1;
            }
        }
        let best = (0..4).fold(0, |b, i| if votes[i] > votes[b] { i } else { b });
        if votes[best] == 0 {
            break;
        }
        prefix.push(Band::ALL[best]);
    }
    Ok(BandPath::new(prefix))
}

/// Consensus path per class label over the selected rows.
pub fn class_consensus(
    paths: &[BasisPath],
    labels: &[String],
    rows: &[usize],
) -> Result<BTreeMap<String, BandPath>> {
    let mut by_class: BTreeMap<String, Vec<BasisPath>> = BTreeMap::new();
    for &r in rows {
        by_class.entry(labels[r].clone()).or_default().push(paths[r].clone());
    }
    by_class
        .into_iter()
        .map(|(label, ps)| consensus_path(&ps).map(|c| (label, c)))
        .collect()
}

/// Subbands on which every image is measured.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalBasis {
    /// Sorted by level, then band order along the path.
    pub subbands: Vec<BandPath>,
    pub depth: usize,
}

impl GlobalBasis {
    pub fn len(&self) -> usize {
        self.subbands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subbands.is_empty()
    }
}

/// Union of the sibling quadruples along each class path.
pub fn build_global_basis(class_paths: &[BandPath]) -> Result<GlobalBasis> {
    if class_paths.is_empty() {
        return Err(Error::Parameter("global basis needs at least one class path".into()));
    }
    let mut set: BTreeSet<(usize, BandPath)> = BTreeSet::new();
    for path in class_paths {
        if path.level() == 0 || path.level() > MAX_DEPTH {
            return Err(Error::Parameter(format!("class path '{path}' has depth outside 1..={MAX_DEPTH}")));
        }
        let mut node = BandPath::root();
        for &band in path.bands() {
            for sibling in Band::ALL {
                let p = node.child(sibling);
                set.insert((p.level(), p));
            }
            node = node.child(band);
        }
    }
    let depth = set.iter().map(|(l, _)| *l).max().unwrap_or(0);
    Ok(GlobalBasis {
        subbands: set.into_iter().map(|(_, p)| p).collect(),
        depth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub features: Vec<f64>,
    pub label: String,
    pub patient: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub column_names: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

impl FeatureMatrix {
    pub fn new(column_names: Vec<String>, rows: Vec<FeatureRow>) -> Result<Self> {
        let d = column_names.len();
        for (i, r) in rows.iter().enumerate() {
            if r.features.len() != d {
                return Err(Error::Structural(format!(
                    "row {i} has {} features, expected {d}",
                    r.features.len()
                )));
            }
            if r.patient.is_empty() {
                return Err(Error::Data(format!("row {i} has no patient id")));
            }
            if let Some(bad) = r.features.iter().find(|v| !v.is_finite()) {
                return Err(Error::Data(format!("row {i} has non-finite feature {bad}")));
            }
        }
        Ok(Self { column_names, rows })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Label of each row as an index into [`FeatureMatrix::classes`].
    pub fn label_indices(&self) -> Vec<usize> {
        let classes = self.classes();
        self.rows
            .iter()
            .map(|r| classes.binary_search(&r.label).expect("label from rows"))
            .collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.features[j]).collect()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.features.clone()).collect()
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<FeatureMatrix> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.n_cols()) {
            return Err(Error::Input(format!("column {bad} out of range")));
        }
        let names = cols.iter().map(|&c| self.column_names[c].clone()).collect();
        let rows = self
            .rows
            .iter()
            .map(|r| FeatureRow {
                features: cols.iter().map(|&c| r.features[c]).collect(),
                label: r.label.clone(),
                patient: r.patient.clone(),
            })
            .collect();
        Ok(FeatureMatrix { column_names: names, rows })
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            column_names: self.column_names.clone(),
            rows: rows.iter().map(|&r| self.rows[r].clone()).collect(),
        }
    }

    /// Writes CSV with an optional leading `# config_hash=` comment line.
    pub fn write_csv(&self, path: impl AsRef<Path>, config_hash: Option<&str>) -> Result<()> {
        let mut file = std::fs::File::create(path.as_ref())?;
        if let Some(h) = config_hash {
            use std::io::Write;
            writeln!(file, "# config_hash={h}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        let mut header = self.column_names.clone();
        header.push("label".into());
        header.push("patient".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec: Vec<String> = r.features.iter().map(|v| format!("{v:?}")).collect();
            rec.push(r.label.clone());
            rec.push(r.patient.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path.as_ref())?;
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let n = header.len();
        if n < 2 || header[n - 2] != "label" || header[n - 1] != "patient" {
            return Err(Error::Input("feature CSV must end with label,patient columns".into()));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let features = rec
                .iter()
                .take(n - 2)
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Input(format!("bad feature value '{s}'")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(FeatureRow {
                features,
                label: rec[n - 2].to_string(),
                patient: rec[n - 1].to_string(),
            });
        }
        FeatureMatrix::new(header[..n - 2].to_vec(), rows)
    }
}

/// Builds the feature matrix of `rows` over `basis`.
pub fn extract_matrix(
    analyses: &mut [ImageAnalysis],
    basis: &GlobalBasis,
    method: Method,
    labels: &[String],
    patients: &[String],
) -> Result<FeatureMatrix> {
    use rayon::prelude::*;
    let vectors: Vec<SignatureVector> = analyses
        .par_iter_mut()
        .map(|a| a.measure(basis, method))
        .collect::<Result<_>>()?;
    let names = vectors
        .first()
        .map(|v| v.provenance.iter().map(Provenance::column_name).collect())
        .unwrap_or_default();
    let rows = vectors
        .into_iter()
        .zip(labels.iter().zip(patients))
        .map(|(v, (l, p))| FeatureRow {
            features: v.values,
            label: l.clone(),
            patient: p.clone(),
        })
        .collect();
    FeatureMatrix::new(names, rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRanking {
    /// `(feature index, divergence)`, descending; ties keep ascending index.
    pub entries: Vec<(usize, f64)>,
    /// Features for which some class pair had a zero standard deviation and
    /// was skipped.
    pub degenerate: Vec<usize>,
}

/// Sum over class pairs of `(s_k - s_l)^2 (1 + s_k + s_l) / (2 s_k s_l)`.
pub fn pair_divergence(sigmas: &[f64]) -> (f64, bool) {
    let mut d = 0.0;
    let mut skipped = false;
    for k in 0..sigmas.len() {
        for l in k + 1..sigmas.len() {
            let (a, b) = (sigmas[k], sigmas[l]);
            if a == 0.0 || b == 0.0 {
                skipped = true;
                continue;
            }
            d += (a - b).powi(2) * (1.0 + a + b) / (2.0 * a * b);
        }
    }
    (d, skipped)
}

pub fn divergence_rank(m: &FeatureMatrix) -> Result<DivergenceRanking> {
    let classes = m.classes();
    if classes.len() < 2 {
        return Err(Error::Data("divergence ranking needs at least two classes".into()));
    }
    let labels = m.label_indices();
    let mut counts = vec![0usize; classes.len()];
    for &l in &labels {
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::Data(format!("class '{}' has fewer than two rows", classes[c])));
    }
    let mut entries = Vec::with_capacity(m.n_cols());
    let mut degenerate = Vec::new();
    for j in 0..m.n_cols() {
        let sigmas: Vec<f64> = (0..classes.len())
            .map(|c| {
                let vals: Vec<f64> = m
                    .rows
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(r, _)| r.features[j])
                    .collect();
                mean_std(&vals).1
            })
            .collect();
        let (d, skipped) = pair_divergence(&sigmas);
        if skipped {
            degenerate.push(j);
        }
        entries.push((j, d));
    }
    entries.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(DivergenceRanking { entries, degenerate })
}

/// Pearson correlation; zero when either column is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Walks features by descending divergence, keeping each one whose absolute
/// correlation with every kept feature is at most `threshold`.
pub fn correlation_prune(m: &FeatureMatrix, rank: &DivergenceRanking, threshold: f64) -> Result<Vec<usize>> {
    let mut seen = vec![false; m.n_cols()];
    for &(j, _) in &rank.entries {
        if j >= m.n_cols() || seen[j] {
            return Err(Error::Input(format!("ranking entry {j} invalid for {} columns", m.n_cols())));
        }
        seen[j] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Input("ranking does not cover every column".into()));
    }
    let cols: Vec<Vec<f64>> = (0..m.n_cols()).map(|j| m.column(j)).collect();
    let mut kept: Vec<usize> = Vec::new();
    for &(j, _) in &rank.entries {
        if kept.iter().all(|&k| pearson(&cols[j], &cols[k]).abs() <= threshold) {
            kept.push(j);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFeature {
    pub index: usize,
    pub name: String,
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub threshold: f64,
    pub selected: Vec<SelectedFeature>,
    pub degenerate: Vec<String>,
}

/// Ranking plus pruning, packaged for persistence.
pub fn select_features(m: &FeatureMatrix, threshold: f64) -> Result<SelectionReport> {
    let rank = divergence_rank(m)?;
    let kept = correlation_prune(m, &rank, threshold)?;
    let div: BTreeMap<usize, f64> = rank.entries.iter().copied().collect();
    Ok(SelectionReport {
        threshold,
        selected: kept
            .into_iter()
            .map(|j| SelectedFeature {
                index: j,
                name: m.column_names[j].clone(),
                divergence: div[&j],
            })
            .collect(),
        degenerate: rank.degenerate.iter().map(|&j| m.column_names[j].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn bp(s: &str) -> BandPath {
        s.parse().unwrap()
    }

    fn matrix(cols: &[Vec<f64>], labels: &[&str]) -> FeatureMatrix {
        let names = (0..cols.len()).map(|j| format!("f{j}")).collect();
        let rows = labels
            .iter()
            .enumerate()
            .map(|(i, l)| FeatureRow {
                features: cols.iter().map(|c| c[i]).collect(),
                label: l.to_string(),
                patient: format!("{l}-p{i}"),
            })
            .collect();
        FeatureMatrix::new(names, rows).unwrap()
    }

    #[test]
    fn basis_from_single_level() {
        let b = build_global_basis(&[bp("HH")]).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.depth, 1);
        assert_eq!(b.subbands[0], bp("LL"));
    }

    #[test]
    fn basis_dedups_and_orders() {
        let b = build_global_basis(&[bp("HH.LH"), bp("HH.LH")]).unwrap();
        assert_eq!(b.len(), 8);
        let four = build_global_basis(&[bp("LL.HH.LL"), bp("HL.LL"), bp("LL.HH.HL.LH.LL.LL.LL.HH"), bp("LL.HH.HL.LH.HH.LL.LL.LL.HH")]).unwrap();
        // distinct walked nodes: root, LL, LL.HH, HL, LL.HH.HL, .LH, then the two deep branches
        let mut nodes = BTreeSet::new();
        for p in [bp("LL.HH.LL"), bp("HL.LL"), bp("LL.HH.HL.LH.LL.LL.LL.HH"), bp("LL.HH.HL.LH.HH.LL.LL.LL.HH")] {
            let mut n = p.parent();
            while let Some(x) = n {
                n = x.parent();
                nodes.insert(x);
            }
        }
        assert_eq!(four.len(), 4 * nodes.len());
        assert_eq!(four.depth, 9);
        for w in four.subbands.windows(2) {
            assert!((w[0].level(), &w[0]) < (w[1].level(), &w[1]));
        }
        assert!(build_global_basis(&[]).is_err());
    }

    #[test]
    fn consensus_uses_lower_median_depth() {
        let mk = |s: &str| BasisPath {
            levels: bp(s)
                .bands()
                .iter()
                .map(|&b| crate::bestbasis::LevelRecord {
                    chosen: b,
                    fd: None,
                    lacunarities: None,
                    energy: None,
                    dm: None,
                    lacunarity: None,
                    lambda_hit: false,
                    terminated: false,
                })
                .collect(),
        };
        let paths = vec![mk("HH.LH.LL"), mk("HH.LH"), mk("HH.HL.HH.LL"), mk("LL")];
        // depths 1,2,3,4 -> lower median 2; level 1 HH (3 votes), level 2 LH vs HL tie -> LH
        assert_eq!(consensus_path(&paths).unwrap(), bp("HH.LH"));
    }

    #[test]
    fn divergence_hand_case() {
        let (d, skipped) = pair_divergence(&[1.0, 2.0]);
        assert!((d - 1.0).abs() < 1e-12 && !skipped);
        assert_eq!(pair_divergence(&[0.7, 0.7, 0.7]).0, 0.0);
        let (d, skipped) = pair_divergence(&[0.0, 2.0, 2.0]);
        assert_eq!(d, 0.0);
        assert!(skipped);
    }

    #[test]
    fn divergence_from_matrix() {
        // class a values {0, 2} -> sample sd sqrt(2); class b {0, 4} -> 2 sqrt(2)
        let m = matrix(&[vec![0.0, 2.0, 0.0, 4.0], vec![1.0, 2.0, 5.0, 6.0]], &["a", "a", "b", "b"]);
        let r = divergence_rank(&m).unwrap();
        let (s1, s2) = (2f64.sqrt(), 2.0 * 2f64.sqrt());
        let want = (s1 - s2).powi(2) * (1.0 + s1 + s2) / (2.0 * s1 * s2);
        assert_eq!(r.entries[0].0, 0);
        assert!((r.entries[0].1 - want).abs() < 1e-12);
        assert_eq!(r.entries[1], (1, 0.0));
    }

    #[test]
    fn duplicate_column_pruned() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<&str> = (0..100).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect();
        let x: Vec<f64> = (0..100).map(|i| rng.gen::<f64>() * (1.0 + (i % 2) as f64)).collect();
        let y: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
        assert!(pearson(&x, &y).abs() < 0.8);
        let m = matrix(&[x.clone(), x.clone(), y], &labels);
        let r = divergence_rank(&m).unwrap();
        let kept = correlation_prune(&m, &r, 0.8).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(kept.contains(&2));
        assert_eq!(kept[0], r.entries[0].0);
    }

    #[test]
    fn boundary_correlation_kept() {
        // construct b with corr(a, b) exactly 0.8: b = 0.8 a + 0.6 e, a and e orthonormal and centred
        let a = [1.0, -1.0, 1.0, -1.0];
        let e = [1.0, 1.0, -1.0, -1.0];
        let b: Vec<f64> = a.iter().zip(&e).map(|(x, y)| 0.8 * x + 0.6 * y).collect();
        let rho = pearson(&a, &b);
        assert!((rho - 0.8).abs() < 1e-15);
        let m = matrix(&[a.to_vec(), b], &["a", "a", "b", "b"]);
        let rank = DivergenceRanking {
            entries: vec![(0, 1.0), (1, 0.5)],
            degenerate: vec![],
        };
        let threshold = rho.abs();
        assert_eq!(correlation_prune(&m, &rank, threshold).unwrap(), vec![0, 1]);
    }

    #[test]
    fn zero_variance_column_never_prunes() {
        let m = matrix(&[vec![3.0; 4], vec![1.0, 2.0, 3.0, 5.0]], &["a", "a", "b", "b"]);
        let r = divergence_rank(&m).unwrap();
        assert_eq!(r.degenerate, vec![0]);
        assert_eq!(correlation_prune(&m, &r, 0.8).unwrap().len(), 2);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let m = matrix(&[vec![0.1, 1.0 / 3.0], vec![-2.5e-9, 7.0]], &["x", "y"]);
        m.write_csv(&p, Some("abc")).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("# config_hash=abc\nf0,f1,label,patient"));
        assert_eq!(FeatureMatrix::read_csv(&p).unwrap(), m);
    }

    #[test]
    fn measured_matrix_over_basis() {
        let imgs: Vec<RasterImage> = (0..3)
            .map(|s| crate::synth::generate(&crate::synth::SynthSpec::fbm(64, 0.5, s)).unwrap())
            .collect();
        let sel = SelectionConfig::default();
        let mut an = analyze_images(imgs, &FilterBank::default(), &sel, Method::BbsCm, 2, true).unwrap();
        let paths: Vec<BasisPath> = an.iter().map(|a| a.path(Method::BbsCm, DepthRule::Fixed(2)).unwrap()).collect();
        assert!(paths.iter().all(|p| p.depth() == 2));
        let basis = build_global_basis(&[consensus_path(&paths).unwrap()]).unwrap();
        let labels = vec!["a".to_string(); 3];
        let patients: Vec<String> = (0..3).map(|i| format!("p{i}")).collect();
        let m = extract_matrix(&mut an, &basis, Method::BbsCm, &labels, &patients).unwrap();
        assert_eq!(m.n_cols(), 8 * 16);
        assert_eq!(m.column_names[0], "LL:glcm_corr_0");
        assert!(an[0].path(Method::BbsFd, DepthRule::Fixed(1)).is_err());
    }

    proptest! {
        #[test]
        fn divergence_shift_and_row_permutation_invariant(
            vals in proptest::collection::vec(-10.0f64..10.0, 12), shift in -100.0f64..100.0, rot in 0usize..6,
        ) {
            let labels = ["a", "a", "a", "b", "b", "b", "c", "c", "c", "a", "b", "c"];
            let m = matrix(&[vals.clone()], &labels);
            let shifted = matrix(&[vals.iter().map(|v| v + shift).collect()], &labels);
            // permute rows within the class by rotating the whole (labels, values) list
            let order: Vec<usize> = (0..12).map(|i| (i + rot) % 12).collect();
            let perm = matrix(&[order.iter().map(|&i| vals[i]).collect()], &order.iter().map(|&i| labels[i]).collect::<Vec<_>>());
            let d0 = divergence_rank(&m).unwrap().entries[0].1;
            let d1 = divergence_rank(&shifted).unwrap().entries[0].1;
            let d2 = divergence_rank(&perm).unwrap().entries[0].1;
            prop_assert!(d0 >= 0.0);
            prop_assert!((d0 - d1).abs() <= 1e-6 * (1.0 + d0));
            prop_assert!((d0 - d2).abs() <= 1e-9 * (1.0 + d0));
        }

        #[test]
        fn pruned_set_has_no_strong_pairs(seed in 0u64..500) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<&str> = (0..30).map(|i| ["a", "b", "c"][i % 3]).collect();
            let base: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
            let cols: Vec<Vec<f64>> = (0..8)
                .map(|k| base.iter().map(|b| b * (k as f64 * 0.3) + rng.gen::<f64>()).collect())
                .collect();
            let m = matrix(&cols, &labels);
            let r = divergence_rank(&m).unwrap();
            let kept = correlation_prune(&m, &r, 0.8).unwrap();
            prop_assert_eq!(kept[0], r.entries[0].0);
            prop_assert!(kept.len() <= m.n_cols());
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(pearson(&m.column(kept[i]), &m.column(kept[j])).abs() <= 0.8);
                }
            }
        }

        #[test]
        fn basis_independent_of_class_order(picks in proptest::collection::vec(proptest::collection::vec(0usize..4, 1..5), 1..5)) {
            let paths: Vec<BandPath> = picks.iter().map(|p| BandPath::new(p.iter().map(|&i| Band::ALL[i]).collect())).collect();
            let mut rev = paths.clone();
            rev.reverse();
            prop_assert_eq!(build_global_basis(&paths).unwrap(), build_global_basis(&rev).unwrap());
        }
    }
}
