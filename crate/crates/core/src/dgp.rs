//! Semi-synthetic confounded data.
//!
//! Each modality contributes a latent target `X~_mod`. The standardized targets
//! `Z_mod` confound treatment and outcome with opposite signs:
//!
//! ```text
//! Z  = sum_mod Z_mod
//! m0 = -scale_m * Z          Var(m0) = snr
//! g0 =  scale_g * Z          Var(theta0 m0 + g0) = snr - theta0^2
//! D  = m0 + nu               nu  ~ N(0, 1)
//! Y  = theta0 D + g0 + eps   eps ~ N(0, 1)
//! ```
//!
//! so that `Var(Y) = Var(D) = snr + 1`. [`OutcomeScaling::Signal`] instead sets
//! `Var(theta0 m0 + g0) = snr`.
//!
//! Scaling uses the empirical (population, ddof = 0) variances of the drawn
//! sample, so the variance identities hold exactly for every dataset.
//!
//! In surrogate mode the features of a modality are an iid standard normal
//! matrix and the latent target is
//! `X~ = sqrt(rho) h(X w) / sd + sqrt(1 - rho) U`, so a share `rho` of its
//! variance is explainable from the features and `U` is confounding no learner
//! can remove. Ingest mode reads real targets (and features) from CSV files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{ols_baseline, r_squared};
use crate::io;
pub use crate::model::OutcomeScaling;
use crate::model::{Block, Link, Manifest, ModalitySpec, OracleColumns, SemiSynthDataset, TargetKind};
use crate::rng::{stream, tag};
use crate::scalar::Scalar;
use crate::stats::{mean, quantile_sorted, rms, var_pop, var_sample};

pub const GENERATOR_VERSION: &str = concat!("mmdml-dgp/", env!("CARGO_PKG_VERSION"));

/// Where an ingested modality's target (and optionally features) come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSource {
    pub modality: String,
    /// CSV with `id,target[,feature...]`.
    pub target_path: PathBuf,
    /// Optional CSV `id,<c0>,...` joined on id, e.g. extracted embeddings.
    #[serde(default)]
    pub features_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DgpMode {
    Surrogate,
    Ingest { sources: Vec<IngestSource> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub theta0: f64,
    pub snr: f64,
    pub modality_specs: Vec<ModalitySpec>,
    pub mode: DgpMode,
    pub seed: u64,
    #[serde(default)]
    pub outcome_scaling: OutcomeScaling,
}

impl DgpConfig {
    /// Surrogate configuration with modalities `tab`, `txt`, `img`.
    pub fn three_modalities(n: usize, explainable_fraction: f64, feature_dim: usize, seed: u64) -> Self {
        Self {
            n,
            theta0: 0.5,
            snr: 2.0,
            modality_specs: ["tab", "txt", "img"]
                .iter()
                .map(|m| ModalitySpec::surrogate(m, feature_dim, explainable_fraction))
                .collect(),
            mode: DgpMode::Surrogate,
            seed,
            outcome_scaling: OutcomeScaling::default(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("n = {} below the minimum of 10", self.n)));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        if !self.theta0.is_finite() || self.theta0 <= -1.0 {
            // The outcome scale (1 + theta0) scale_m must stay positive.
            return Err(Error::Config(format!("theta0 must exceed -1, got {}", self.theta0)));
        }
        if self.outcome_scaling == OutcomeScaling::MatchTreatment && self.snr <= self.theta0 * self.theta0 {
            return Err(Error::Config(format!(
                "snr = {} must exceed theta0^2 = {} to match the outcome and treatment variances",
                self.snr,
                self.theta0 * self.theta0
            )));
        }
        if self.modality_specs.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.modality_specs {
            s.check()?;
            if !names.insert(&s.name) {
                return Err(Error::Config(format!("duplicate modality `{}`", s.name)));
            }
        }
        Ok(())
    }
}

/// Standardizes to empirical mean 0 and population variance 1.
pub fn standardize_target<T: Scalar>(values: ArrayView1<'_, T>) -> Result<Array1<T>> {
    standardize_named("target", values)
}

fn standardize_named<T: Scalar>(name: &str, values: ArrayView1<'_, T>) -> Result<Array1<T>> {
    if values.len() < 2 {
        return Err(Error::Config(format!("`{name}` needs at least two values")));
    }
    let m = mean(values);
    let sd = var_pop(values).sqrt();
    if !(sd > T::min_positive_value().sqrt()) || !sd.is_finite() {
        return Err(Error::DegenerateTarget(name.to_string()));
    }
    Ok(values.mapv(|x| (x - m) / sd))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Confounders<T: Scalar = f64> {
    pub g0: Array1<T>,
    pub m0: Array1<T>,
    pub scale_m: T,
    pub scale_g: T,
}

/// Builds `m0 = -scale_m Z` and `g0 = scale_g Z` from standardized targets.
pub fn build_confounders<T: Scalar>(
    targets: &[ArrayView1<'_, T>],
    theta0: T,
    snr: T,
    scaling: OutcomeScaling,
) -> Result<Confounders<T>> {
    let first = targets
        .first()
        .ok_or_else(|| Error::Config("no modality targets".into()))?;
    let mut z = first.to_owned();
    for t in &targets[1..] {
        if t.len() != z.len() {
            return Err(Error::Schema("targets differ in length".into()));
        }
        z += t;
    }
    let var_z = var_pop(z.view());
    if !(var_z > T::zero()) {
        return Err(Error::DegenerateTarget("sum of standardized targets".into()));
    }
    let scale_m = (snr / var_z).sqrt();
    let signal = match scaling {
        OutcomeScaling::MatchTreatment => snr - theta0 * theta0,
        OutcomeScaling::Signal => snr,
    };
    if !(signal > T::zero()) {
        return Err(Error::Config("snr must exceed theta0^2 to match the outcome and treatment variances".into()));
    }
    let scale_g = theta0 * scale_m + (signal / var_z).sqrt();
    if !(scale_g > T::zero()) {
        return Err(Error::Config("theta0 leaves the outcome scale nonpositive".into()));
    }
    Ok(Confounders {
        m0: z.mapv(|v| -scale_m * v),
        g0: z.mapv(|v| scale_g * v),
        scale_m,
        scale_g,
    })
}

fn normals<T: Scalar>(rng: &mut impl Rng, n: usize) -> Array1<T> {
    (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Latent target, its explainable part and features for one modality.
struct ModalityDraw<T: Scalar> {
    target: Array1<T>,
    /// Standardized `E[Z_mod | X_mod]` when known.
    feasible: Option<Array1<T>>,
    features: Block<T>,
}

fn draw_surrogate<T: Scalar>(spec: &ModalitySpec, index: u32, n: usize, seed: u64) -> Result<ModalityDraw<T>> {
    if spec.target_kind != TargetKind::Continuous {
        return Err(Error::Config(format!(
            "modality `{}`: surrogate generation supports continuous targets only",
            spec.name
        )));
    }
    let p = spec.feature_dim;
    let mut x = Array2::<T>::zeros((n, p));
    for c in 0..p {
        let mut rng = stream(seed, tag::FEATURE, index, c as u32);
        x.column_mut(c).assign(&normals::<T>(&mut rng, n));
    }
    let mut w = normals::<T>(&mut stream(seed, tag::WEIGHT, index, 0), p);
    let norm = w.dot(&w).sqrt();
    w.mapv_inplace(|v| v / norm);
    let index_score = x.dot(&w);
    let h = match spec.link {
        Link::Linear => index_score,
        Link::Tanh => index_score.mapv(|v| v.tanh()),
    };
    let h = standardize_named(&spec.name, h.view())?;
    let u = normals::<T>(&mut stream(seed, tag::UNEXPLAINED, index, 0), n);

    let rho = T::lit(spec.explainable_fraction);
    let explained = h.mapv(|v| rho.sqrt() * v);
    let target = &explained + &u.mapv(|v| (T::one() - rho).sqrt() * v);
    let m = mean(target.view());
    let sd = var_pop(target.view()).sqrt();
    let feasible = explained.mapv(|v| (v - m) / sd);
    Ok(ModalityDraw {
        target,
        feasible: Some(feasible),
        features: Block::new(spec.name.clone(), x),
    })
}

/// Maps raw target labels to numbers, returning the code map for labelled kinds.
fn encode_targets<T: Scalar>(spec: &ModalitySpec, raw: &[String]) -> Result<(Array1<T>, Option<Vec<String>>)> {
    let numeric = || -> Result<Array1<T>> {
        raw.iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| Error::Config(format!("modality `{}`, row {i}: `{s}` is not a finite number", spec.name)))
            })
            .collect()
    };
    let coded = |limit: usize| -> Result<(Array1<T>, Option<Vec<String>>)> {
        let mut labels: Vec<String> = Vec::new();
        let mut codes = Vec::with_capacity(raw.len());
        for s in raw {
            let code = match labels.iter().position(|l| l == s) {
                Some(c) => c,
                None => {
                    labels.push(s.clone());
                    labels.len() - 1
                }
            };
            codes.push(T::from_usize_lossy(code));
        }
        if labels.len() > limit {
            return Err(Error::Config(format!(
                "modality `{}`: {} distinct labels exceed the declared {limit}",
                spec.name,
                labels.len()
            )));
        }
        Ok((Array1::from(codes), Some(labels)))
    };
    match spec.target_kind {
        TargetKind::Continuous => Ok((numeric()?, None)),
        TargetKind::Binary => {
            let is01 = raw.iter().all(|s| matches!(s.parse::<f64>(), Ok(v) if v == 0.0 || v == 1.0));
            if is01 {
                Ok((numeric()?, None))
            } else {
                coded(2)
            }
        }
        TargetKind::Categorical { k } => coded(k),
    }
}

fn draw_ingested<T: Scalar>(
    spec: &ModalitySpec,
    sources: &[IngestSource],
    n: usize,
) -> Result<(ModalityDraw<T>, Option<Vec<String>>)> {
    let src = sources
        .iter()
        .find(|s| s.modality == spec.name)
        .ok_or_else(|| Error::Config(format!("no ingest source for modality `{}`", spec.name)))?;
    let (ids, raw, inline) = io::read_target_file(&src.target_path)?;
    if ids.len() < n {
        return Err(Error::Config(format!(
            "{}: {} rows, need at least {n}",
            src.target_path.display(),
            ids.len()
        )));
    }
    let (target, code_map) = encode_targets::<T>(spec, &raw[..n])?;

    let features = match (&src.features_path, inline) {
        (Some(path), _) => {
            let table = io::read_id_matrix(path)?;
            let index: BTreeMap<&str, usize> = table.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
            let mut x = Array2::<T>::zeros((n, table.columns.len()));
            for (r, id) in ids[..n].iter().enumerate() {
                let j = *index
                    .get(id.as_str())
                    .ok_or_else(|| Error::Config(format!("{}: no features for id `{id}`", path.display())))?;
                x.row_mut(r).assign(&table.values.row(j).mapv(T::lit));
            }
            Block {
                name: spec.name.clone(),
                columns: table.columns,
                values: x,
            }
        }
        (None, Some(table)) => Block {
            name: spec.name.clone(),
            columns: table.columns,
            values: table.values.slice(ndarray::s![..n, ..]).mapv(T::lit),
        },
        (None, None) => {
            return Err(Error::Config(format!(
                "modality `{}`: no feature columns in {} and no features_path",
                spec.name,
                src.target_path.display()
            )))
        }
    };
    if features.values.ncols() != spec.feature_dim {
        return Err(Error::Config(format!(
            "modality `{}`: declared feature_dim {} but source has {} feature columns",
            spec.name,
            spec.feature_dim,
            features.values.ncols()
        )));
    }
    Ok((
        ModalityDraw {
            target,
            feasible: None,
            features,
        },
        code_map,
    ))
}

/// Generates a dataset with populated oracle columns. Pure in `(config, seed)`.
pub fn generate<T: Scalar>(config: &DgpConfig) -> Result<SemiSynthDataset<T>> {
    config.check()?;
    let n = config.n;
    let mut draws = Vec::with_capacity(config.modality_specs.len());
    let mut code_maps = BTreeMap::new();
    for (j, spec) in config.modality_specs.iter().enumerate() {
        let draw = match &config.mode {
            DgpMode::Surrogate => draw_surrogate::<T>(spec, j as u32, n, config.seed)?,
            DgpMode::Ingest { sources } => {
                let (draw, codes) = draw_ingested::<T>(spec, sources, n)?;
                if let Some(c) = codes {
                    code_maps.insert(spec.name.clone(), c);
                }
                draw
            }
        };
        draws.push(draw);
    }

    let standardized = config
        .modality_specs
        .iter()
        .zip(&draws)
        .map(|(spec, d)| standardize_named(&spec.name, d.target.view()))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = standardized.iter().map(|z| z.view()).collect();
    let theta0 = T::lit(config.theta0);
    let conf = build_confounders(&views, theta0, T::lit(config.snr), config.outcome_scaling)?;

    let nu = normals::<T>(&mut stream(config.seed, tag::NU, 0, 0), n);
    let eps = normals::<T>(&mut stream(config.seed, tag::EPS, 0, 0), n);
    let d = &conf.m0 + &nu;
    let y = &d.mapv(|v| theta0 * v) + &conf.g0 + &eps;
    let l0 = &conf.m0.mapv(|v| theta0 * v) + &conf.g0;

    let mut targets = BTreeMap::new();
    let mut feasible = BTreeMap::new();
    let mut blocks = Vec::with_capacity(draws.len());
    for (spec, draw) in config.modality_specs.iter().zip(draws) {
        targets.insert(spec.name.clone(), draw.target);
        if let Some(f) = draw.feasible {
            feasible.insert(spec.name.clone(), f);
        }
        blocks.push(draw.features);
    }

    let manifest = Manifest {
        theta0: config.theta0,
        snr: config.snr,
        seed: config.seed,
        scale_m: conf.scale_m.as_f64(),
        scale_g: conf.scale_g.as_f64(),
        outcome_scaling: config.outcome_scaling,
        modality_specs: config.modality_specs.clone(),
        generator_version: GENERATOR_VERSION.to_string(),
        mode: match config.mode {
            DgpMode::Surrogate => "surrogate".into(),
            DgpMode::Ingest { .. } => "ingest".into(),
        },
        code_maps,
        imported_blocks: BTreeMap::new(),
    };
    Ok(SemiSynthDataset {
        y,
        d,
        blocks,
        oracle: Some(OracleColumns {
            g0: conf.g0,
            m0: conf.m0,
            l0,
            eps,
            nu,
            targets,
            feasible,
        }),
        manifest,
    })
}

/// Performance ceilings given by the oracle nuisances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleBounds<T: Scalar = f64> {
    pub r2_d: T,
    pub r2_y: T,
    pub rmse_d: T,
    pub rmse_y: T,
    pub ols_theta: T,
    pub feasible_r2_d: Option<T>,
    pub feasible_r2_y: Option<T>,
}

/// Nuisances rebuilt from the feasible (feature-explainable) parts of the
/// targets, when every modality has one.
pub fn feasible_nuisances<T: Scalar>(ds: &SemiSynthDataset<T>) -> Result<Option<(Array1<T>, Array1<T>)>> {
    let o = ds.oracle()?;
    let names: Vec<&String> = ds.manifest.modality_specs.iter().map(|s| &s.name).collect();
    if names.is_empty() || !names.iter().all(|m| o.feasible.contains_key(*m)) {
        return Ok(None);
    }
    let mut z = Array1::<T>::zeros(ds.n());
    for m in names {
        z += &o.feasible[m];
    }
    let scale_m = T::lit(ds.manifest.scale_m);
    let scale_g = T::lit(ds.manifest.scale_g);
    let m_f = z.mapv(|v| -scale_m * v);
    let l_f = z.mapv(|v| (scale_g - ds.theta0() * scale_m) * v);
    Ok(Some((l_f, m_f)))
}

pub fn oracle_bounds<T: Scalar>(ds: &SemiSynthDataset<T>) -> Result<OracleBounds<T>> {
    let o = ds.oracle.as_ref().ok_or(Error::MissingOracle("oracle bounds"))?;
    let feasible = feasible_nuisances(ds)?;
    let (feasible_r2_y, feasible_r2_d) = match &feasible {
        Some((l_f, m_f)) => (
            Some(r_squared(ds.y.view(), l_f.view())?),
            Some(r_squared(ds.d.view(), m_f.view())?),
        ),
        None => (None, None),
    };
    Ok(OracleBounds {
        r2_d: r_squared(ds.d.view(), o.m0.view())?,
        r2_y: r_squared(ds.y.view(), o.l0.view())?,
        rmse_d: rms(ds.d.iter().zip(&o.m0).map(|(&a, &b)| a - b)),
        rmse_y: rms(ds.y.iter().zip(&o.l0).map(|(&a, &b)| a - b)),
        ols_theta: ols_baseline(ds.y.view(), ds.d.view())?,
        feasible_r2_d,
        feasible_r2_y,
    })
}

/// `theta0 - s_m s_g V / (s_m^2 V + 1)` with `V` the unexplained confounding
/// variance: the limit of the estimate when the nuisances are the feasible
/// conditional expectations.
pub fn attenuated_plim(theta0: f64, scale_m: f64, scale_g: f64, unexplained_var: f64) -> f64 {
    theta0 - scale_m * scale_g * unexplained_var / (scale_m * scale_m * unexplained_var + 1.0)
}

/// Attenuated limit for a surrogate configuration, using the population
/// scaling constants (`Var(Z)` equals the number of modalities).
pub fn attenuated_theta_plim(config: &DgpConfig) -> Result<f64> {
    if config.mode != DgpMode::Surrogate {
        return Err(Error::Config("attenuated limit needs a surrogate configuration".into()));
    }
    config.check()?;
    let k = config.modality_specs.len() as f64;
    let scale_m = (config.snr / k).sqrt();
    let signal = match config.outcome_scaling {
        OutcomeScaling::MatchTreatment => config.snr - config.theta0 * config.theta0,
        OutcomeScaling::Signal => config.snr,
    };
    let scale_g = config.theta0 * scale_m + (signal / k).sqrt();
    let unexplained: f64 = config.modality_specs.iter().map(|s| 1.0 - s.explainable_fraction).sum();
    Ok(attenuated_plim(config.theta0, scale_m, scale_g, unexplained))
}

/// Attenuated limit restricted to the controls in `subset`: modalities left
/// out contribute all of their confounding as unexplained.
pub fn attenuated_plim_for_subset(manifest: &Manifest, subset: &[String]) -> f64 {
    let unexplained: f64 = manifest
        .modality_specs
        .iter()
        .map(|s| {
            if subset.contains(&s.name) {
                1.0 - s.explainable_fraction
            } else {
                1.0
            }
        })
        .sum();
    attenuated_plim(manifest.theta0, manifest.scale_m, manifest.scale_g, unexplained)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub max: f64,
}

impl Summary {
    pub fn of<T: Scalar>(v: ArrayView1<'_, T>) -> Self {
        let mut sorted: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        Self {
            count: n,
            mean: mean(v).as_f64(),
            std: var_sample(v).sqrt().as_f64(),
            min: sorted.first().copied().unwrap_or(f64::NAN),
            q25: quantile_sorted(&sorted, 0.25),
            q50: quantile_sorted(&sorted, 0.5),
            q75: quantile_sorted(&sorted, 0.75),
            max: sorted.last().copied().unwrap_or(f64::NAN),
        }
    }
}

/// count / mean / std / min / quartiles / max of outcome and treatment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Descriptives {
    pub y: Summary,
    pub d: Summary,
}

pub fn descriptives<T: Scalar>(ds: &SemiSynthDataset<T>) -> Descriptives {
    Descriptives {
        y: Summary::of(ds.y.view()),
        d: Summary::of(ds.d.view()),
    }
}

impl fmt::Display for Descriptives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>14}{:>14}", "", "Y", "D")?;
        writeln!(f, "{:<14}{:>14}{:>14}", "count", self.y.count, self.d.count)?;
        let rows: [(&str, fn(&Summary) -> f64); 7] = [
            ("mean", |s| s.mean),
            ("std", |s| s.std),
            ("min", |s| s.min),
            ("25%-quantile", |s| s.q25),
            ("50%-quantile", |s| s.q50),
            ("75%-quantile", |s| s.q75),
            ("max", |s| s.max),
        ];
        for (label, get) in rows {
            writeln!(f, "{:<14}{:>14.6}{:>14.6}", label, get(&self.y), get(&self.d))?;
        }
        Ok(())
    }
}
