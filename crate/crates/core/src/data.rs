//! Datasets on the unit box: synthetic generators, stratified labeled/unlabeled
//! splitting, label corruption and CSV persistence.
//!
//! Ground truth for unlabeled points travels in a [`HiddenLabels`] sidecar.
//! Annotators only ever see [`UnlabeledSet::features`]; metric code calls
//! [`HiddenLabels::reveal`].

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Features in `[0, 1]^d` with optional labels (`None` = unlabeled).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<Option<usize>>,
    class_count: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<Option<usize>>,
        class_count: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::validation("features must be a matrix"));
        }
        if features.rows() != labels.len() {
            return Err(Error::validation(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if class_count < 2 {
            return Err(Error::validation("a dataset needs at least two classes"));
        }
        if let Some(v) = features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!("feature value {v} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().flatten().find(|&&l| l >= class_count) {
            return Err(Error::validation(format!(
                "label {l} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
            provenance: provenance.into(),
        })
    }

    pub fn labeled(features: Tensor, labels: Vec<usize>, class_count: usize, provenance: impl Into<String>) -> Result<Self> {
        Self::new(features, labels.into_iter().map(Some).collect(), class_count, provenance)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    /// Labels of a fully labeled dataset.
    pub fn targets(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::validation(format!("sample {i} is unlabeled"))))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            provenance: self.provenance.clone(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() || self.class_count != other.class_count {
            return Err(Error::validation("cannot join datasets of different dimension or class count"));
        }
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset {
            features: self.features.vstack(&other.features)?,
            labels,
            class_count: self.class_count,
            provenance: format!("{}+{}", self.provenance, other.provenance),
        })
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    /// Replaces every label.
    pub fn relabeled(&self, labels: Vec<usize>) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(Error::validation("label count does not match dataset size"));
        }
        Dataset::labeled(self.features.clone(), labels, self.class_count, self.provenance.clone())
    }

    /// Fraction of samples carrying each class, for balanced-data checks.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for l in self.labels.iter().flatten() {
            counts[*l] += 1;
        }
        counts
    }
}

/// Ground truth for unlabeled points, kept away from annotators.
#[derive(Debug, Clone, PartialEq)]
pub enum HiddenLabels {
    Known(Vec<usize>),
    /// No ground truth exists (e.g. unlabeled rows loaded from CSV).
    Unknown,
    /// Panics on access; used to prove a code path never reads the truth.
    Trap,
}

impl HiddenLabels {
    /// Ground truth for metric computation only.
    pub fn reveal(&self) -> Result<&[usize]> {
        match self {
            HiddenLabels::Known(l) => Ok(l),
            HiddenLabels::Unknown => Err(Error::validation("unlabeled pool has no ground truth")),
            HiddenLabels::Trap => panic!("hidden labels of the unlabeled pool were read"),
        }
    }
}

/// The unlabeled pool `D_U`: features plus a hidden ground-truth sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    features: Tensor,
    class_count: usize,
    truth: HiddenLabels,
}

impl UnlabeledSet {
    pub fn new(features: Tensor, class_count: usize, truth: HiddenLabels) -> Result<Self> {
        if let HiddenLabels::Known(l) = &truth {
            if l.len() != features.rows() {
                return Err(Error::validation("hidden label count does not match pool size"));
            }
        }
        Ok(Self {
            features,
            class_count,
            truth,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn hidden_labels(&self) -> &HiddenLabels {
        &self.truth
    }

    /// First `n` points of the pool.
    pub fn take(&self, n: usize) -> UnlabeledSet {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let truth = match &self.truth {
            HiddenLabels::Known(l) => HiddenLabels::Known(l[..n].to_vec()),
            other => other.clone(),
        };
        UnlabeledSet {
            features: self.features.select_rows(&idx),
            class_count: self.class_count,
            truth,
        }
    }

    /// Same features with a trap sidecar.
    pub fn trapped(&self) -> UnlabeledSet {
        UnlabeledSet {
            truth: HiddenLabels::Trap,
            ..self.clone()
        }
    }

    /// Pseudo-labeled dataset `S_U`.
    pub fn with_labels(&self, labels: Vec<usize>, provenance: impl Into<String>) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(Error::validation("pseudo label count does not match pool size"));
        }
        Dataset::labeled(self.features.clone(), labels, self.class_count, provenance)
    }

    /// The pool as a dataset with every label erased.
    pub fn as_dataset(&self) -> Dataset {
        Dataset {
            features: self.features.clone(),
            labels: vec![None; self.len()],
            class_count: self.class_count,
            provenance: "unlabeled".into(),
        }
    }
}

/// Two Gaussian clusters on the x axis, optionally stretched and rotated.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClusters {
    pub n_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    /// Standard deviation multiplier along the long axis.
    pub stretch: f64,
    /// Direction of the long axis, radians from the x axis.
    pub angle: f64,
}

impl GaussianClusters {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.n_per_class == 0 {
            return Err(Error::validation("n_per_class must be at least 1"));
        }
        if !(self.noise >= 0.0 && self.separation >= 0.0 && self.stretch >= 1.0) {
            return Err(Error::validation("invalid cluster geometry"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let (sin, cos) = self.angle.sin_cos();
        let extent = self.separation / 2.0 + 4.0 * self.noise * self.stretch;
        let extent = if extent > 0.0 { extent } else { 1.0 };
        let mut rows = Vec::with_capacity(2 * self.n_per_class);
        let mut labels = Vec::with_capacity(2 * self.n_per_class);
        for i in 0..2 * self.n_per_class {
            let class = i % 2;
            let centre = if class == 0 { -self.separation / 2.0 } else { self.separation / 2.0 };
            let along = self.noise * self.stretch * normal.sample(&mut rng);
            let across = self.noise * normal.sample(&mut rng);
            let x = centre + along * cos - across * sin;
            let y = along * sin + across * cos;
            rows.push([to_unit(x, extent), to_unit(y, extent)]);
            labels.push(class);
        }
        Dataset::labeled(
            Tensor::from_rows(&rows)?,
            labels,
            2,
            format!("two_gaussians(seed={seed})"),
        )
    }
}

/// Maps `[-extent, extent]` onto `[0, 1]`, clamping outliers.
fn to_unit(v: f64, extent: f64) -> f64 {
    (0.5 + v / (2.0 * extent)).clamp(0.0, 1.0)
}

/// Two isotropic Gaussian clusters centred `separation` apart.
pub fn two_gaussians(n_per_class: usize, separation: f64, noise: f64, seed: u64) -> Result<Dataset> {
    GaussianClusters {
        n_per_class,
        separation,
        noise,
        stretch: 1.0,
        angle: 0.0,
    }
    .generate(seed)
}

/// Affine map taking the raw moons (x ∈ [-1, 2], y ∈ [-0.5, 1]) into the unit box.
pub const MOONS_SCALE: f64 = 0.25;
pub const MOONS_OFFSET: [f64; 2] = [1.5, -0.25];

fn moons_to_unit(x: f64, y: f64) -> [f64; 2] {
    [
        ((x + MOONS_OFFSET[0]) * MOONS_SCALE).clamp(0.0, 1.0),
        ((y + MOONS_OFFSET[1]) * MOONS_SCALE + 0.5).clamp(0.0, 1.0),
    ]
}

/// Inverse of the unit-box map, for geometric checks on noise-free moons.
pub fn moons_from_unit(p: &[f64]) -> (f64, f64) {
    (
        p[0] / MOONS_SCALE - MOONS_OFFSET[0],
        (p[1] - 0.5) / MOONS_SCALE - MOONS_OFFSET[1],
    )
}

/// Interleaved half circles: class 0 on the upper arc `(cos t, sin t)`,
/// class 1 on the lower arc `(1 − cos t, 0.5 − sin t)`, `t ∈ [0, π]`,
/// with isotropic Gaussian noise.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::validation("two_moons needs at least one sample"));
    }
    if !(noise >= 0.0) {
        return Err(Error::validation("noise must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = rng.random_range(0.0..=PI);
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let (nx, ny) = (noise * normal.sample(&mut rng), noise * normal.sample(&mut rng));
        rows.push(moons_to_unit(x + nx, y + ny));
        labels.push(class);
    }
    Dataset::labeled(Tensor::from_rows(&rows)?, labels, 2, format!("two_moons(seed={seed})"))
}

/// Class-stratified split into a labeled set `S_L` and an unlabeled pool `D_U`.
///
/// Per-class quotas differ by at most one; which classes receive the extra
/// sample is decided by `seed`. Both parts keep the original row order.
pub fn split(ds: &Dataset, n_labeled: usize, seed: u64) -> Result<(Dataset, UnlabeledSet)> {
    let targets = ds.targets()?;
    if n_labeled > ds.len() {
        return Err(Error::validation(format!(
            "cannot label {n_labeled} of {} samples",
            ds.len()
        )));
    }
    let k = ds.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &t) in targets.iter().enumerate() {
        by_class[t].push(i);
    }
    let mut bonus: Vec<usize> = (0..k).collect();
    bonus.shuffle(&mut rng);
    let mut quota = vec![n_labeled / k; k];
    for &c in bonus.iter().take(n_labeled % k) {
        quota[c] += 1;
    }
    let mut chosen = vec![false; ds.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        if quota[c] > members.len() {
            return Err(Error::validation(format!(
                "class {c} has {} samples but {} are needed for a stratified split",
                members.len(),
                quota[c]
            )));
        }
        members.shuffle(&mut rng);
        for &i in &members[..quota[c]] {
            chosen[i] = true;
        }
    }
    let labeled_idx: Vec<usize> = (0..ds.len()).filter(|&i| chosen[i]).collect();
    let pool_idx: Vec<usize> = (0..ds.len()).filter(|&i| !chosen[i]).collect();
    let labeled = ds.subset(&labeled_idx);
    let truth = pool_idx.iter().map(|&i| targets[i]).collect();
    let pool = UnlabeledSet::new(ds.features.select_rows(&pool_idx), k, HiddenLabels::Known(truth))?;
    Ok((labeled, pool))
}

/// Replaces the labels of a uniformly random `⌈(1 − accuracy)·n⌉` subset with
/// a uniformly drawn different class.
pub fn corrupt_labels(ds: &Dataset, target_accuracy: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&target_accuracy) {
        return Err(Error::validation("target accuracy must lie in [0, 1]"));
    }
    let k = ds.class_count();
    if k < 2 {
        return Err(Error::validation("label corruption needs at least two classes"));
    }
    let mut labels = ds.targets()?;
    let n = labels.len();
    // the tolerance absorbs representation error such as (1 - 0.87) * 1000 = 130.00000000000003
    let flips = (((1.0 - target_accuracy) * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(flips.min(n)) {
        let draw = rng.random_range(0..k - 1);
        labels[i] = if draw >= labels[i] { draw + 1 } else { draw };
    }
    ds.relabeled(labels)
}

/// Fraction of positions where `a` and `b` agree.
pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Reads `label,feat_0,…,feat_{d-1}` rows; label `-1` marks an unlabeled row.
/// A first row whose first field is not numeric is treated as a header.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    load_csv_with(path, None)
}

/// Like [`load_csv`] with an explicit class count instead of `max label + 1`.
pub fn load_csv_with(path: &Path, class_count: Option<usize>) -> Result<Dataset> {
    let rows = read_rows(path)?;
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut width = None;
    for (line, fields) in rows {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if fields.len() < 2 {
            return Err(parse_err("expected a label and at least one feature".into()));
        }
        let label: i64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad label `{}`", fields[0])))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(parse_err(format!("bad label {l}"))),
        };
        let feats = fields[1..]
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(format!("bad feature `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if *width.get_or_insert(feats.len()) != feats.len() {
            return Err(parse_err(format!(
                "expected {} features, found {}",
                width.unwrap_or(0),
                feats.len()
            )));
        }
        if let Some(v) = feats.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!(
                "{}:{line}: feature {v} outside [0, 1]",
                path.display()
            )));
        }
        features.push(feats);
        labels.push(label);
    }
    let inferred = labels.iter().flatten().max().map_or(2, |&m| (m + 1).max(2));
    let classes = class_count.unwrap_or(inferred);
    let tensor = if features.is_empty() {
        Tensor::new(vec![0, width.unwrap_or(0)], vec![])?
    } else {
        Tensor::from_rows(&features)?
    };
    Dataset::new(tensor, labels, classes, path.display().to_string())
}

/// Records with their 1-based line numbers, header skipped.
pub(crate) fn read_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        let fields: Vec<String> = record.iter().map(str::to_owned).collect();
        if i == 0 && fields.first().is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push((line, fields));
    }
    Ok(rows)
}

/// Formats a float with 17 significant digits, enough to round-trip exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the dataset with a header row; unlabeled rows get label `-1`.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    write_csv(ds, None, path)
}

/// Writes a dataset, optionally with a trailing per-row `confidence` column.
pub(crate) fn write_csv(ds: &Dataset, confidence: Option<&[f64]>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|j| format!("feat_{j}")));
    if confidence.is_some() {
        header.push("confidence".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let label = ds.labels[i].map_or(-1, |l| l as i64);
        let mut fields = vec![label.to_string()];
        fields.extend(ds.features.row(i).iter().map(|&v| fmt_f64(v)));
        if let Some(c) = confidence {
            fields.push(fmt_f64(c[i]));
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_examples() {
        let ds = two_gaussians(1, 4.0, 0.5, 7).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.class_counts(), vec![1, 1]);
        assert_eq!(two_gaussians(20, 4.0, 0.5, 7).unwrap(), two_gaussians(20, 4.0, 0.5, 7).unwrap());
        assert_ne!(
            two_gaussians(20, 4.0, 0.5, 7).unwrap().features(),
            two_gaussians(20, 4.0, 0.5, 8).unwrap().features()
        );
        assert!(two_gaussians(0, 4.0, 0.5, 7).is_err());
    }

    #[test]
    fn moons_examples() {
        let ds = two_moons(4, 0.1, 1).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.class_counts(), vec![2, 2]);
        let odd = two_moons(7, 0.1, 1).unwrap().class_counts();
        assert!(odd[0].abs_diff(odd[1]) <= 1);
    }

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let ds = two_moons(200, 0.0, 3).unwrap();
        for (i, l) in ds.targets().unwrap().into_iter().enumerate() {
            let (x, y) = moons_from_unit(ds.features().row(i));
            let (cx, cy) = if l == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-9, "radius {r}");
            if l == 0 {
                assert!(y >= cy - 1e-12);
            } else {
                assert!(y <= cy + 1e-12);
            }
        }
    }

    #[test]
    fn split_examples() {
        let ds = two_moons(30, 0.1, 2).unwrap();
        let (sl, du) = split(&ds, 30, 5).unwrap();
        assert!(du.is_empty());
        assert_eq!(sl, ds);

        let (sl, du) = split(&ds, 7, 5).unwrap();
        let counts = sl.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 7);
        assert!(counts[0].abs_diff(counts[1]) <= 1);
        assert_eq!(du.len(), 23);
        assert!(sl.is_fully_labeled());

        let mut rows: Vec<(Vec<u64>, usize)> = Vec::new();
        for i in 0..sl.len() {
            rows.push((sl.features().row(i).iter().map(|v| v.to_bits()).collect(), sl.labels()[i].unwrap()));
        }
        let truth = du.hidden_labels().reveal().unwrap();
        for i in 0..du.len() {
            rows.push((du.features().row(i).iter().map(|v| v.to_bits()).collect(), truth[i]));
        }
        let mut original: Vec<(Vec<u64>, usize)> = (0..ds.len())
            .map(|i| (ds.features().row(i).iter().map(|v| v.to_bits()).collect(), ds.labels()[i].unwrap()))
            .collect();
        rows.sort();
        original.sort();
        assert_eq!(rows, original);
    }

    #[test]
    fn split_needs_class_availability() {
        let ds = Dataset::labeled(
            Tensor::from_rows(&[[0.1], [0.2], [0.3]]).unwrap(),
            vec![0, 0, 1],
            2,
            "t",
        )
        .unwrap();
        assert!(split(&ds, 3, 0).is_err());
        assert!(split(&ds, 4, 0).is_err());
    }

    #[test]
    fn corruption_examples() {
        let ds = two_gaussians(500, 4.0, 0.5, 1).unwrap();
        let same = corrupt_labels(&ds, 1.0, 3).unwrap();
        assert_eq!(same, ds);
        let flipped = corrupt_labels(&ds, 0.0, 3).unwrap();
        assert_eq!(agreement(&flipped.targets().unwrap(), &ds.targets().unwrap()), 0.0);
        let noisy = corrupt_labels(&ds, 0.87, 3).unwrap();
        let changed = noisy
            .targets()
            .unwrap()
            .iter()
            .zip(ds.targets().unwrap())
            .filter(|(a, b)| **a != *b)
            .count();
        assert_eq!(changed, 130);
    }

    #[test]
    fn trap_panics_on_reveal() {
        let pool = UnlabeledSet::new(Tensor::zeros(&[2, 2]), 2, HiddenLabels::Trap).unwrap();
        let result = std::panic::catch_unwind(|| pool.hidden_labels().reveal().map(|l| l.len()));
        assert!(result.is_err());
    }

    #[test]
    fn csv_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "1,0.5,0.25\n-1,0.1,0.9\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.labels(), &[Some(1), None]);
        assert_eq!(ds.features().row(0), &[0.5, 0.25]);

        std::fs::write(&path, "label,a,b\n1,0.5,0.25\n").unwrap();
        assert_eq!(load_csv(&path).unwrap().len(), 1);

        std::fs::write(&path, "1,0.5,0.25\n0,0.5,x\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "1,0.5,1.25\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let ds = two_moons(50, 0.2, 9).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels(), ds.labels());
    }
}
