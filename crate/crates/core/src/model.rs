//! Domain types shared by the generator, the learners and the estimator.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetKind {
    Continuous,
    Binary,
    Categorical { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Linear,
    Tanh,
}

/// How the outcome confounder `g0` is scaled against the treatment one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeScaling {
    /// `Var(theta0 m0 + g0) = snr - theta0^2`, so that `Var(Y) = Var(D) = snr + 1`
    /// with unit-variance noise.
    #[default]
    MatchTreatment,
    /// `Var(theta0 m0 + g0) = snr`; then `Var(Y) = snr + theta0^2 + 1`.
    Signal,
}

fn one() -> f64 {
    1.0
}

fn continuous() -> TargetKind {
    TargetKind::Continuous
}

/// One confounding modality: its feature block and how its latent target is
/// produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub feature_dim: usize,
    #[serde(default = "continuous")]
    pub target_kind: TargetKind,
    /// Share of the latent target's variance explained by the features
    /// (surrogate generation only).
    #[serde(default = "one")]
    pub explainable_fraction: f64,
    #[serde(default)]
    pub link: Link,
}

impl ModalitySpec {
    pub fn surrogate(name: &str, feature_dim: usize, explainable_fraction: f64) -> Self {
        Self {
            name: name.to_string(),
            feature_dim,
            target_kind: TargetKind::Continuous,
            explainable_fraction,
            link: Link::Linear,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains([',', ':']) {
            return Err(Error::Config(format!(
                "modality name `{}` must be nonempty and free of ',' and ':'",
                self.name
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config(format!(
                "modality `{}`: feature_dim must be at least 1",
                self.name
            )));
        }
        if !(0.0..=1.0).contains(&self.explainable_fraction) {
            return Err(Error::Config(format!(
                "modality `{}`: explainable_fraction {} outside [0, 1]",
                self.name, self.explainable_fraction
            )));
        }
        if let TargetKind::Categorical { k } = self.target_kind {
            if k < 2 {
                return Err(Error::Config(format!(
                    "modality `{}`: categorical targets need k >= 2",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Generation metadata stored next to a dataset as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub theta0: f64,
    pub snr: f64,
    pub seed: u64,
    /// Rescaling constant of the treatment confounder, `m0 = -scale_m * Z`.
    pub scale_m: f64,
    /// Rescaling constant of the outcome confounder, `g0 = scale_g * Z`.
    pub scale_g: f64,
    #[serde(default)]
    pub outcome_scaling: OutcomeScaling,
    pub modality_specs: Vec<ModalitySpec>,
    pub generator_version: String,
    /// `surrogate` or `ingest`.
    #[serde(default)]
    pub mode: String,
    /// Label-to-code maps for binary/categorical ingested targets; the code of
    /// a label is its index in the list.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub code_maps: BTreeMap<String, Vec<String>>,
    /// Blocks replaced or added after generation, e.g. imported embeddings.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub imported_blocks: BTreeMap<String, ImportedBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportedBlock {
    /// File name of the imported table.
    pub source: String,
    pub columns: usize,
}

/// A named feature block, `n x feature_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar = f64> {
    pub name: String,
    /// Column suffixes as they appear after `<name>:` in `data.csv`.
    pub columns: Vec<String>,
    pub values: Array2<T>,
}

impl<T: Scalar> Block<T> {
    /// A block with generated column names `f0, f1, ...`.
    pub fn new(name: impl Into<String>, values: Array2<T>) -> Self {
        Self::with_prefix(name, "f", values)
    }

    pub fn with_prefix(name: impl Into<String>, prefix: &str, values: Array2<T>) -> Self {
        let columns = (0..values.ncols()).map(|j| format!("{prefix}{j}")).collect();
        Self {
            name: name.into(),
            columns,
            values,
        }
    }
}

/// Ground-truth columns known only to the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleColumns<T: Scalar = f64> {
    pub g0: Array1<T>,
    pub m0: Array1<T>,
    pub l0: Array1<T>,
    pub eps: Array1<T>,
    pub nu: Array1<T>,
    /// Raw latent target per modality (before standardization).
    pub targets: BTreeMap<String, Array1<T>>,
    /// Standardized conditional expectation `E[Z_mod | X_mod]`; surrogate mode only.
    pub feasible: BTreeMap<String, Array1<T>>,
}

impl<T: Scalar> OracleColumns<T> {
    fn select(&self, rows: &[usize]) -> Self {
        let pick = |v: &Array1<T>| v.select(Axis(0), rows);
        Self {
            g0: pick(&self.g0),
            m0: pick(&self.m0),
            l0: pick(&self.l0),
            eps: pick(&self.eps),
            nu: pick(&self.nu),
            targets: self.targets.iter().map(|(k, v)| (k.clone(), pick(v))).collect(),
            feasible: self.feasible.iter().map(|(k, v)| (k.clone(), pick(v))).collect(),
        }
    }
}

/// Outcome, treatment, per-modality features and (optionally) oracle columns.
/// Row order is the observation key.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiSynthDataset<T: Scalar = f64> {
    pub y: Array1<T>,
    pub d: Array1<T>,
    pub blocks: Vec<Block<T>>,
    pub oracle: Option<OracleColumns<T>>,
    pub manifest: Manifest,
}

impl<T: Scalar> SemiSynthDataset<T> {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn theta0(&self) -> T {
        T::lit(self.manifest.theta0)
    }

    pub fn block(&self, name: &str) -> Option<&Block<T>> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.name.clone()).collect()
    }

    pub fn oracle(&self) -> Result<&OracleColumns<T>> {
        self.oracle.as_ref().ok_or(Error::MissingOracle("this operation"))
    }

    /// Horizontal concatenation of the named blocks, in the given order.
    pub fn features(&self, modalities: &[String]) -> Result<Array2<T>> {
        if modalities.is_empty() {
            return Err(Error::Schema("empty modality subset".into()));
        }
        let views = modalities
            .iter()
            .map(|m| {
                self.block(m)
                    .map(|b| b.values.view())
                    .ok_or_else(|| Error::Schema(format!("dataset has no modality `{m}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        concatenate(Axis(1), &views).map_err(|e| Error::Schema(e.to_string()))
    }

    /// The observations at `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            y: self.y.select(Axis(0), rows),
            d: self.d.select(Axis(0), rows),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    name: b.name.clone(),
                    columns: b.columns.clone(),
                    values: b.values.select(Axis(0), rows),
                })
                .collect(),
            oracle: self.oracle.as_ref().map(|o| o.select(rows)),
            manifest: self.manifest.clone(),
        }
    }

    /// Checks every data-model invariant and reports each violation found.
    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    NonFinite,
    /// A row of the wrong length or a count below the minimum.
    Shape(String),
    /// An exact structural identity (`l0 = theta0 m0 + g0`, ...) is broken.
    Identity,
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub row: Option<usize>,
    pub kind: ViolationKind,
}

impl Violation {
    fn new(field: impl Into<String>, row: Option<usize>, kind: ViolationKind) -> Self {
        Self {
            field: field.into(),
            row,
            kind,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.row {
            Some(r) => write!(f, "{}[{}]: ", self.field, r)?,
            None => write!(f, "{}: ", self.field)?,
        }
        match &self.kind {
            ViolationKind::NonFinite => write!(f, "non-finite value"),
            ViolationKind::Shape(s) => write!(f, "shape: {s}"),
            ViolationKind::Identity => write!(f, "structural identity violated"),
            ViolationKind::Invariant(s) => write!(f, "{s}"),
        }
    }
}

fn check_vector<T: Scalar>(name: &str, v: ArrayView1<'_, T>, n: usize, out: &mut Vec<Violation>) {
    if v.len() != n {
        out.push(Violation::new(
            name,
            None,
            ViolationKind::Shape(format!("expected {n} rows, found {}", v.len())),
        ));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        out.push(Violation::new(name, Some(i), ViolationKind::NonFinite));
    }
}

fn close<T: Scalar>(a: T, b: T) -> bool {
    let scale = T::one().max(a.abs()).max(b.abs());
    (a - b).abs() <= T::identity_tolerance() * scale
}

/// Returns an empty list iff all dataset invariants hold.
pub fn validate<T: Scalar>(ds: &SemiSynthDataset<T>) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = ds.n();
    if n < 2 {
        out.push(Violation::new(
            "y",
            None,
            ViolationKind::Shape(format!("need at least 2 observations, found {n}")),
        ));
    }
    check_vector("y", ds.y.view(), n, &mut out);
    check_vector("d", ds.d.view(), n, &mut out);

    let m = &ds.manifest;
    for (field, value) in [("scale_m", m.scale_m), ("scale_g", m.scale_g), ("snr", m.snr)] {
        if !(value > 0.0 && value.is_finite()) {
            out.push(Violation::new(
                format!("manifest.{field}"),
                None,
                ViolationKind::Invariant(format!("must be positive, found {value}")),
            ));
        }
    }
    for spec in &m.modality_specs {
        if let Err(e) = spec.check() {
            out.push(Violation::new(
                format!("manifest.modality_specs.{}", spec.name),
                None,
                ViolationKind::Invariant(e.to_string()),
            ));
        }
    }

    let mut seen = std::collections::BTreeSet::new();
    for b in &ds.blocks {
        let field = format!("blocks.{}", b.name);
        if !seen.insert(b.name.as_str()) {
            out.push(Violation::new(
                &field,
                None,
                ViolationKind::Invariant("duplicate modality name".into()),
            ));
        }
        if b.values.nrows() != n {
            out.push(Violation::new(
                &field,
                None,
                ViolationKind::Shape(format!("expected {n} rows, found {}", b.values.nrows())),
            ));
        }
        if b.columns.len() != b.values.ncols() {
            out.push(Violation::new(
                &field,
                None,
                ViolationKind::Shape("column names do not match the block width".into()),
            ));
        }
        if b.values.ncols() == 0 {
            out.push(Violation::new(&field, None, ViolationKind::Shape("no feature columns".into())));
        }
        if let Some(spec) = m.modality_specs.iter().find(|s| s.name == b.name) {
            if spec.feature_dim != b.values.ncols() {
                out.push(Violation::new(
                    &field,
                    None,
                    ViolationKind::Shape(format!(
                        "manifest declares {} features, block has {}",
                        spec.feature_dim,
                        b.values.ncols()
                    )),
                ));
            }
        }
        if let Some((row, _)) = b
            .values
            .outer_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|x| !x.is_finite()))
        {
            out.push(Violation::new(&field, Some(row), ViolationKind::NonFinite));
        }
    }

    if let Some(o) = &ds.oracle {
        for (name, v) in [("g0", &o.g0), ("m0", &o.m0), ("l0", &o.l0), ("eps", &o.eps), ("nu", &o.nu)] {
            check_vector(name, v.view(), n, &mut out);
        }
        for (k, v) in o.targets.iter().chain(o.feasible.iter()) {
            check_vector(&format!("oracle.{k}"), v.view(), n, &mut out);
        }
        if [&o.g0, &o.m0, &o.l0, &o.eps, &o.nu].iter().all(|v| v.len() == n) {
            let theta0 = ds.theta0();
            let first = |pred: &dyn Fn(usize) -> bool| (0..n).find(|&i| !pred(i));
            if let Some(i) = first(&|i| close(o.l0[i], theta0 * o.m0[i] + o.g0[i])) {
                out.push(Violation::new("l0", Some(i), ViolationKind::Identity));
            }
            if let Some(i) = first(&|i| close(ds.d[i], o.m0[i] + o.nu[i])) {
                out.push(Violation::new("d", Some(i), ViolationKind::Identity));
            }
            if let Some(i) = first(&|i| close(ds.y[i], theta0 * ds.d[i] + o.g0[i] + o.eps[i])) {
                out.push(Violation::new("y", Some(i), ViolationKind::Identity));
            }
        }
    }
    out
}

/// Out-of-sample nuisance predictions `(l_hat, m_hat)`.
///
/// `fold_id[i]` is the held-out fold that produced row `i`; `-1` marks an
/// in-sample prediction, which the estimator refuses.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisancePredictions<T: Scalar = f64> {
    pub l_hat: Array1<T>,
    pub m_hat: Array1<T>,
    pub fold_id: Vec<i64>,
    pub learner_tag: String,
}

pub const IN_SAMPLE: i64 = -1;

impl<T: Scalar> NuisancePredictions<T> {
    /// Predictions that all belong to one held-out fold.
    pub fn held_out(l_hat: Array1<T>, m_hat: Array1<T>, fold: i64, learner_tag: impl Into<String>) -> Self {
        let n = l_hat.len();
        Self {
            l_hat,
            m_hat,
            fold_id: vec![fold; n],
            learner_tag: learner_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.l_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l_hat.is_empty()
    }

    pub fn is_out_of_sample(&self) -> bool {
        self.fold_id.iter().all(|&f| f >= 0)
    }
}

/// Point estimate, standard error and confidence interval for theta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate<T: Scalar = f64> {
    pub theta_hat: T,
    pub se: T,
    pub ci_low: T,
    pub ci_high: T,
    pub alpha: f64,
    pub n_used: usize,
    /// Mean score at `theta_hat`; zero up to rounding.
    pub score_mean: T,
    /// `mean((d - m_hat)^2)`.
    pub denom: T,
}

impl<T: Scalar> EffectEstimate<T> {
    pub fn covers(&self, theta: T) -> bool {
        self.ci_low <= theta && theta <= self.ci_high
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn tiny() -> SemiSynthDataset {
        let theta0 = 0.5;
        let g0 = array![1.0, -1.0, 0.5, 0.0];
        let m0 = array![-1.0, 1.0, -0.5, 0.0];
        let eps = array![0.1, 0.2, -0.3, 0.0];
        let nu = array![0.3, -0.1, 0.2, 0.4];
        let d = &m0 + &nu;
        let y = &d * theta0 + &g0 + &eps;
        let l0 = &m0 * theta0 + &g0;
        SemiSynthDataset {
            y,
            d,
            blocks: vec![Block::new(
                "tab",
                array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]],
            )],
            oracle: Some(OracleColumns {
                g0,
                m0,
                l0,
                eps,
                nu,
                targets: BTreeMap::new(),
                feasible: BTreeMap::new(),
            }),
            manifest: Manifest {
                theta0,
                snr: 2.0,
                seed: 0,
                scale_m: 1.0,
                scale_g: 1.0,
                outcome_scaling: OutcomeScaling::default(),
                modality_specs: vec![ModalitySpec::surrogate("tab", 2, 1.0)],
                generator_version: "test".into(),
                mode: "surrogate".into(),
                code_maps: BTreeMap::new(),
                imported_blocks: BTreeMap::new(),
            },
        }
    }

    #[test]
    fn well_formed_dataset_has_no_violations() {
        assert_eq!(tiny().validate(), vec![]);
    }

    #[test]
    fn nan_in_outcome_is_reported_with_row() {
        let mut ds = tiny();
        ds.y[3] = f64::NAN;
        let v = ds.validate();
        assert!(v.contains(&Violation::new("y", Some(3), ViolationKind::NonFinite)));
    }

    #[test]
    fn broken_oracle_identity_is_reported() {
        let mut ds = tiny();
        ds.oracle.as_mut().unwrap().l0[0] += 1e-6;
        assert_eq!(
            ds.validate(),
            vec![Violation::new("l0", Some(0), ViolationKind::Identity)]
        );
    }

    #[test]
    fn block_shape_and_manifest_checks() {
        let mut ds = tiny();
        ds.manifest.scale_m = 0.0;
        ds.blocks.push(ds.blocks[0].clone());
        let v = ds.validate();
        assert!(v.iter().any(|x| x.field == "manifest.scale_m"));
        assert!(v
            .iter()
            .any(|x| x.field == "blocks.tab" && x.kind == ViolationKind::Invariant("duplicate modality name".into())));
    }

    #[test]
    fn feature_concatenation_and_row_selection() {
        let ds = tiny();
        let x = ds.features(&["tab".into(), "tab".into()]).unwrap();
        assert_eq!(x.dim(), (4, 4));
        assert!(ds.features(&["img".into()]).is_err());
        let sub = ds.select_rows(&[2, 0]);
        assert_eq!(sub.y[0], ds.y[2]);
        assert_eq!(sub.oracle.as_ref().unwrap().m0[1], -1.0);
        assert!(sub.validate().is_empty());
    }

    #[test]
    fn narrow_precision_dataset_validates() {
        let ds = tiny();
        let conv = |v: &Array1<f64>| v.mapv(|x| x as f32);
        let o = ds.oracle.as_ref().unwrap();
        // Recompute the identities in f32 so they hold to f32 rounding.
        let m0 = conv(&o.m0);
        let g0 = conv(&o.g0);
        let nu = conv(&o.nu);
        let eps = conv(&o.eps);
        let d = &m0 + &nu;
        let y = &d * 0.5f32 + &g0 + &eps;
        let l0 = &m0 * 0.5f32 + &g0;
        let narrow = SemiSynthDataset::<f32> {
            y,
            d,
            blocks: vec![Block::new("tab", ds.blocks[0].values.mapv(|x| x as f32))],
            oracle: Some(OracleColumns {
                g0,
                m0,
                l0,
                eps,
                nu,
                targets: BTreeMap::new(),
                feasible: BTreeMap::new(),
            }),
            manifest: ds.manifest.clone(),
        };
        assert!(narrow.validate().is_empty());
    }
}
