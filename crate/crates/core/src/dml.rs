//! Orthogonal-score estimation of theta in the partially linear model.
//!
//! The score is `psi = (y - l_hat - theta (d - m_hat)) (d - m_hat)`. Being
//! affine in theta, its empirical mean has the closed-form root
//! `sum (y - l_hat)(d - m_hat) / sum (d - m_hat)^2`.

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{r_squared, relative_r2};
use crate::learners::{fit, LearnerSpec};
use crate::model::{EffectEstimate, NuisancePredictions, SemiSynthDataset};
use crate::rng::{mix, stream, tag};
use crate::scalar::Scalar;
use crate::stats::{mean, mean_sd, normal_quantile, rms, var_pop};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Identification guard: `mean((d - m_hat)^2)` must reach this share of `Var(d)`.
pub const IDENTIFICATION_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitKind {
    Single { train_fraction: f64 },
    Kfold { k: usize },
}

fn default_repeats() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScheme {
    #[serde(flatten)]
    pub kind: SplitKind,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    /// Explicit per-repeat split seeds; derived from `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat_seeds: Option<Vec<u64>>,
}

impl SplitScheme {
    pub fn single(train_fraction: f64, repeats: usize, seed: u64) -> Self {
        Self {
            kind: SplitKind::Single { train_fraction },
            repeats,
            seed,
            repeat_seeds: None,
        }
    }

    pub fn kfold(k: usize, repeats: usize, seed: u64) -> Self {
        Self {
            kind: SplitKind::Kfold { k },
            repeats,
            seed,
            repeat_seeds: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        match self.kind {
            SplitKind::Single { train_fraction } if !(train_fraction > 0.0 && train_fraction < 1.0) => {
                return Err(Error::Config(format!("train_fraction {train_fraction} must lie in (0, 1)")));
            }
            SplitKind::Kfold { k } if k < 2 => {
                return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
            }
            _ => {}
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if let Some(seeds) = &self.repeat_seeds {
            if seeds.len() != self.repeats {
                return Err(Error::Config(format!(
                    "{} repeat seeds given for {} repeats",
                    seeds.len(),
                    self.repeats
                )));
            }
            for (i, s) in seeds.iter().enumerate() {
                if seeds[..i].contains(s) {
                    return Err(Error::Config(format!("repeat seed {s} is used twice; repeats must differ")));
                }
            }
        }
        Ok(())
    }

    /// Split seed of every repeat.
    pub fn seeds(&self) -> Vec<u64> {
        match &self.repeat_seeds {
            Some(s) => s.clone(),
            None => (0..self.repeats as u64)
                .map(|r| mix(self.seed, tag::REPEAT + (r << 8)))
                .collect(),
        }
    }

    /// Short human-readable description, e.g. `single(0.5) x5`.
    pub fn descriptor(&self) -> String {
        let kind = match self.kind {
            SplitKind::Single { train_fraction } => format!("single({train_fraction})"),
            SplitKind::Kfold { k } => format!("kfold({k})"),
        };
        format!("{kind} x{} seed={}", self.repeats, self.seed)
    }
}

/// Learner seed for a repeat: distinct per split, stable under reordering.
pub fn repeat_learner_seed(learner_seed: u64, split_seed: u64) -> u64 {
    mix(learner_seed, split_seed)
}

/// Score-level diagnostics computed on the evaluation rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDiagnostics {
    pub psi_mean: f64,
    pub psi_var: f64,
    /// Central-difference Gateaux derivatives of the mean score at
    /// `(theta_hat, eta_hat)` in bounded directions built from `eta_hat`.
    pub orth_deriv_l: f64,
    pub orth_deriv_m: f64,
    /// `|m_hat - m0| (|m_hat - m0| + |l_hat - l0|) sqrt(n)`; oracle data only.
    pub rate_product: Option<f64>,
    pub r2_y: Option<f64>,
    pub r2_d: Option<f64>,
    /// R^2 relative to the oracle R^2 on the same rows; oracle data only.
    pub r2_y_rel: Option<f64>,
    pub r2_d_rel: Option<f64>,
}

impl ScoreDiagnostics {
    /// True when a relative r^2 exceeds one, which is possible in finite samples.
    pub fn r2_rel_above_one(&self) -> bool {
        self.r2_y_rel.is_some_and(|v| v > 1.0) || self.r2_d_rel.is_some_and(|v| v > 1.0)
    }
}

pub fn score_psi<T: Scalar>(
    y: ArrayView1<'_, T>,
    d: ArrayView1<'_, T>,
    l_hat: ArrayView1<'_, T>,
    m_hat: ArrayView1<'_, T>,
    theta: T,
) -> Array1<T> {
    let n = y.len();
    Array1::from_shape_fn(n, |i| {
        let v = d[i] - m_hat[i];
        (y[i] - l_hat[i] - theta * v) * v
    })
}

fn check_lengths<T: Scalar>(preds: &NuisancePredictions<T>, y: ArrayView1<'_, T>, d: ArrayView1<'_, T>) -> Result<()> {
    let n = y.len();
    if d.len() != n || preds.l_hat.len() != n || preds.m_hat.len() != n || preds.fold_id.len() != n {
        return Err(Error::Schema(format!(
            "estimator inputs differ in length: y {n}, d {}, l_hat {}, m_hat {}, fold_id {}",
            d.len(),
            preds.l_hat.len(),
            preds.m_hat.len(),
            preds.fold_id.len()
        )));
    }
    if n < 2 {
        return Err(Error::Validation("the estimator needs at least two rows".into()));
    }
    Ok(())
}

/// Closed-form root of the mean score with sandwich standard error.
pub fn solve_theta<T: Scalar>(
    preds: &NuisancePredictions<T>,
    y: ArrayView1<'_, T>,
    d: ArrayView1<'_, T>,
    alpha: f64,
) -> Result<EffectEstimate<T>> {
    check_lengths(preds, y, d)?;
    if let Some(i) = preds.fold_id.iter().position(|&f| f < 0) {
        return Err(Error::Validation(format!(
            "prediction row {i} is in-sample; the estimator only accepts held-out predictions"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} must lie in (0, 1)")));
    }
    let n = y.len();
    let nf = T::from_usize_lossy(n);
    let (mut sxy, mut sxx) = (T::zero(), T::zero());
    for i in 0..n {
        let v = d[i] - preds.m_hat[i];
        sxy = sxy + (y[i] - preds.l_hat[i]) * v;
        sxx = sxx + v * v;
    }
    let denom = sxx / nf;
    let threshold = IDENTIFICATION_TOLERANCE * var_pop(d).as_f64();
    if !(denom.as_f64() >= threshold) || !(denom > T::zero()) {
        return Err(Error::WeakResidualVariation {
            denom: denom.as_f64(),
            threshold,
        });
    }
    let theta = sxy / sxx;
    if !theta.is_finite() {
        return Err(Error::Numerical("non-finite theta estimate".into()));
    }
    let psi = score_psi(y, d, preds.l_hat.view(), preds.m_hat.view(), theta);
    let score_mean = mean(psi.view());
    let sigma2 = psi.iter().map(|&p| p * p).sum::<T>() / nf / (denom * denom);
    let se = (sigma2 / nf).sqrt();
    let z = T::lit(normal_quantile(1.0 - alpha / 2.0));
    Ok(EffectEstimate {
        theta_hat: theta,
        se,
        ci_low: theta - z * se,
        ci_high: theta + z * se,
        alpha,
        n_used: n,
        score_mean,
        denom,
    })
}

/// Root of the mean score by bisection, independent of the closed form.
pub fn bisect_theta<T: Scalar>(
    y: ArrayView1<'_, T>,
    d: ArrayView1<'_, T>,
    l_hat: ArrayView1<'_, T>,
    m_hat: ArrayView1<'_, T>,
) -> Result<f64> {
    let f = |theta: f64| -> f64 {
        y.iter()
            .zip(d.iter())
            .zip(l_hat.iter().zip(m_hat.iter()))
            .map(|((&yi, &di), (&li, &mi))| {
                let v = (di - mi).as_f64();
                ((yi - li).as_f64() - theta * v) * v
            })
            .sum::<f64>()
    };
    // The mean score is nonincreasing in theta; widen until the sign flips.
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut widen = 0;
    while !(f(lo) >= 0.0 && f(hi) <= 0.0) {
        lo *= 2.0;
        hi *= 2.0;
        widen += 1;
        if widen > 200 {
            return Err(Error::Numerical("mean score has no sign change".into()));
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Score used by the Gateaux-derivative checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreForm {
    Orthogonal,
    /// `(y - l - theta (d - m)) d`, which is not orthogonal in `m` or `l`.
    NonOrthogonal,
}

fn mean_score<T: Scalar>(
    form: ScoreForm,
    y: ArrayView1<'_, T>,
    d: ArrayView1<'_, T>,
    l: &Array1<f64>,
    m: &Array1<f64>,
    theta: f64,
) -> f64 {
    let n = y.len();
    let mut s = 0.0;
    for i in 0..n {
        let (yi, di) = (y[i].as_f64(), d[i].as_f64());
        let v = di - m[i];
        let instrument = match form {
            ScoreForm::Orthogonal => v,
            ScoreForm::NonOrthogonal => di,
        };
        s += (yi - l[i] - theta * v) * instrument;
    }
    s / n as f64
}

/// `(d/dt mean psi(l + t delta_l), d/dt mean psi(m + t delta_m))` by central differences.
#[allow(clippy::too_many_arguments)]
pub fn gateaux_derivatives<T: Scalar>(
    form: ScoreForm,
    y: ArrayView1<'_, T>,
    d: ArrayView1<'_, T>,
    l: ArrayView1<'_, T>,
    m: ArrayView1<'_, T>,
    theta: f64,
    delta_l: &Array1<f64>,
    delta_m: &Array1<f64>,
    t: f64,
) -> Result<(f64, f64)> {
    if t == 0.0 || !t.is_finite() {
        return Err(Error::Config("perturbation scale t must be nonzero and finite".into()));
    }
    let l0 = l.mapv(|v| v.as_f64());
    let m0 = m.mapv(|v| v.as_f64());
    let along = |base: &Array1<f64>, delta: &Array1<f64>, s: f64| base + &(delta * s);
    let dl = (mean_score(form, y, d, &along(&l0, delta_l, t), &m0, theta)
        - mean_score(form, y, d, &along(&l0, delta_l, -t), &m0, theta))
        / (2.0 * t);
    let dm = (mean_score(form, y, d, &l0, &along(&m0, delta_m, t), theta)
        - mean_score(form, y, d, &l0, &along(&m0, delta_m, -t), theta))
        / (2.0 * t);
    Ok((dl, dm))
}

/// Seeded bounded direction `tanh(a base / sd(base) + b)`.
pub fn bounded_direction<T: Scalar>(base: ArrayView1<'_, T>, seed: u64, index: u32) -> Array1<f64> {
    let mut rng = stream(seed, tag::DIRECTION, index, 0);
    let a: f64 = rng.random_range(0.5..1.5);
    let b: f64 = rng.random_range(-0.5..0.5);
    let sd = var_pop(base).as_f64().sqrt();
    let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
    base.mapv(|v| (a * v.as_f64() * scale + b).tanh())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityCheck {
    pub orth_deriv_l: f64,
    pub orth_deriv_m: f64,
    /// Same derivatives for the non-orthogonal control score.
    pub control_deriv_l: f64,
    pub control_deriv_m: f64,
}

/// Gateaux derivatives of the mean score at `(theta0, l0, m0)`.
pub fn orthogonality_check<T: Scalar>(data: &SemiSynthDataset<T>, t: f64, seed: u64) -> Result<OrthogonalityCheck> {
    let o = data.oracle()?;
    let theta0 = data.manifest.theta0;
    let delta_l = bounded_direction(o.l0.view(), seed, 0);
    let delta_m = bounded_direction(o.m0.view(), seed, 1);
    let run = |form| gateaux_derivatives(form, data.y.view(), data.d.view(), o.l0.view(), o.m0.view(), theta0, &delta_l, &delta_m, t);
    let (orth_deriv_l, orth_deriv_m) = run(ScoreForm::Orthogonal)?;
    let (control_deriv_l, control_deriv_m) = run(ScoreForm::NonOrthogonal)?;
    Ok(OrthogonalityCheck {
        orth_deriv_l,
        orth_deriv_m,
        control_deriv_l,
        control_deriv_m,
    })
}

/// `|m_hat - m0| (|m_hat - m0| + |l_hat - l0|) sqrt(n)` under the empirical norm.
pub fn rate_diagnostic<T: Scalar>(
    preds: &NuisancePredictions<T>,
    l0: ArrayView1<'_, T>,
    m0: ArrayView1<'_, T>,
) -> Result<f64> {
    let n = preds.len();
    if l0.len() != n || m0.len() != n || n == 0 {
        return Err(Error::Schema("rate diagnostic: prediction and oracle lengths differ".into()));
    }
    let em = rms(preds.m_hat.iter().zip(m0.iter()).map(|(&a, &b)| a - b)).as_f64();
    let el = rms(preds.l_hat.iter().zip(l0.iter()).map(|(&a, &b)| a - b)).as_f64();
    Ok(em * (em + el) * (n as f64).sqrt())
}

/// Diagnostics of held-out predictions on their evaluation rows.
pub fn score_diagnostics<T: Scalar>(
    data: &SemiSynthDataset<T>,
    preds: &NuisancePredictions<T>,
    estimate: &EffectEstimate<T>,
) -> Result<ScoreDiagnostics> {
    let (y, d) = (data.y.view(), data.d.view());
    let psi = score_psi(y, d, preds.l_hat.view(), preds.m_hat.view(), estimate.theta_hat);
    let psi_mean = mean(psi.view()).as_f64();
    let psi_var = var_pop(psi.view()).as_f64().max(0.0);
    let delta_l = bounded_direction(preds.l_hat.view(), 0, 0);
    let delta_m = bounded_direction(preds.m_hat.view(), 0, 1);
    let (orth_deriv_l, orth_deriv_m) = gateaux_derivatives(
        ScoreForm::Orthogonal,
        y,
        d,
        preds.l_hat.view(),
        preds.m_hat.view(),
        estimate.theta_hat.as_f64(),
        &delta_l,
        &delta_m,
        0.1,
    )?;
    let r2_y = r_squared(y, preds.l_hat.view()).ok().map(|v| v.as_f64());
    let r2_d = r_squared(d, preds.m_hat.view()).ok().map(|v| v.as_f64());
    let (mut rate_product, mut r2_y_rel, mut r2_d_rel) = (None, None, None);
    if let Some(o) = &data.oracle {
        rate_product = Some(rate_diagnostic(preds, o.l0.view(), o.m0.view())?);
        let rel = |v: ArrayView1<'_, T>, v_hat: &Array1<T>, oracle: &Array1<T>| -> Option<f64> {
            let bound = r_squared(v, oracle.view()).ok()?;
            relative_r2(v, v_hat.view(), bound).ok().map(|x| x.as_f64())
        };
        r2_y_rel = rel(y, &preds.l_hat, &o.l0);
        r2_d_rel = rel(d, &preds.m_hat, &o.m0);
    }
    Ok(ScoreDiagnostics {
        psi_mean,
        psi_var,
        orth_deriv_l,
        orth_deriv_m,
        rate_product,
        r2_y,
        r2_d,
        r2_y_rel,
        r2_d_rel,
    })
}

/// Seeded train/test partition; both parts in ascending row order.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction {train_fraction} must lie in (0, 1)")));
    }
    let n_train = ((n as f64) * train_fraction).round() as usize;
    if n_train < 2 || n - n_train.min(n) < 2 {
        return Err(Error::Validation(format!(
            "{n} rows are too few for a {train_fraction} train split"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, tag::SPLIT, 0, 0));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Fold of every row for K-fold cross-fitting; fold sizes differ by at most one.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > n / 2 {
        return Err(Error::Validation(format!("k-fold needs 2 <= k <= n/2, got k={k}, n={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, tag::FOLD, 0, 0));
    let mut folds = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        folds[row] = pos % k;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome<T: Scalar = f64> {
    pub estimate: EffectEstimate<T>,
    pub diagnostics: ScoreDiagnostics,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    /// Held-out predictions on `test_rows`, in that order.
    pub predictions: NuisancePredictions<T>,
}

/// Fits on the train rows and estimates on the test rows only.
pub fn run_split<T: Scalar>(
    data: &SemiSynthDataset<T>,
    spec: &LearnerSpec,
    train_fraction: f64,
    split_seed: u64,
    modalities: &[String],
    alpha: f64,
) -> Result<SplitOutcome<T>> {
    let (train_rows, test_rows) = split_indices(data.n(), train_fraction, split_seed)?;
    let train = data.select_rows(&train_rows);
    let test = data.select_rows(&test_rows);
    let fitted = fit(spec, &train, modalities)?;
    let predictions = fitted.predict_held_out(&test, 0)?;
    let estimate = solve_theta(&predictions, test.y.view(), test.d.view(), alpha)?;
    let diagnostics = score_diagnostics(&test, &predictions, &estimate)?;
    Ok(SplitOutcome {
        estimate,
        diagnostics,
        train_rows,
        test_rows,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossfitOutcome<T: Scalar = f64> {
    pub estimate: EffectEstimate<T>,
    pub diagnostics: ScoreDiagnostics,
    /// Per-fold estimates from each fold's own rows.
    pub fold_estimates: Vec<EffectEstimate<T>>,
    /// Out-of-fold predictions for every row, `fold_id` set.
    pub predictions: NuisancePredictions<T>,
}

/// Pools out-of-fold predictions from all K folds into one moment equation.
pub fn run_crossfit<T: Scalar>(
    data: &SemiSynthDataset<T>,
    spec: &LearnerSpec,
    k: usize,
    split_seed: u64,
    modalities: &[String],
    alpha: f64,
) -> Result<CrossfitOutcome<T>> {
    let n = data.n();
    let folds = fold_assignment(n, k, split_seed)?;
    let per_fold = (0..k)
        .into_par_iter()
        .map(|f| -> Result<(Vec<usize>, NuisancePredictions<T>)> {
            let held: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
            let rest: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
            let fold_spec = spec.with_seed(mix(spec.seed, tag::FOLD + ((f as u64) << 8)));
            let fitted = fit(&fold_spec, &data.select_rows(&rest), modalities)?;
            let preds = fitted.predict_held_out(&data.select_rows(&held), f as i64)?;
            Ok((held, preds))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut l_hat = Array1::zeros(n);
    let mut m_hat = Array1::zeros(n);
    let mut fold_id = vec![-1i64; n];
    let mut fold_estimates = Vec::with_capacity(k);
    for (held, preds) in &per_fold {
        for (j, &row) in held.iter().enumerate() {
            l_hat[row] = preds.l_hat[j];
            m_hat[row] = preds.m_hat[j];
            fold_id[row] = preds.fold_id[j];
        }
        let sub = data.select_rows(held);
        fold_estimates.push(solve_theta(preds, sub.y.view(), sub.d.view(), alpha)?);
    }
    let predictions = NuisancePredictions {
        l_hat,
        m_hat,
        fold_id,
        learner_tag: per_fold[0].1.learner_tag.clone(),
    };
    let estimate = solve_theta(&predictions, data.y.view(), data.d.view(), alpha)?;
    let diagnostics = score_diagnostics(data, &predictions, &estimate)?;
    Ok(CrossfitOutcome {
        estimate,
        diagnostics,
        fold_estimates,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub repeat: usize,
    pub split_seed: u64,
    pub learner_seed: u64,
    pub estimate: EffectEstimate<f64>,
    pub diagnostics: ScoreDiagnostics,
}

/// Mean and sample standard deviation over repeats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, sd) = mean_sd(values);
        Self { mean, sd }
    }

    fn of_options(values: impl Iterator<Item = Option<f64>>) -> Option<Self> {
        let v: Option<Vec<f64>> = values.collect();
        v.filter(|v| !v.is_empty()).map(|v| Self::of(&v))
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub learner_tag: String,
    pub modalities: Vec<String>,
    pub split_descriptor: String,
    pub repeats: Vec<RepeatRecord>,
    pub theta: MeanSd,
    pub r2_y_rel: Option<MeanSd>,
    pub r2_d_rel: Option<MeanSd>,
    pub r2_y: Option<MeanSd>,
    pub r2_d: Option<MeanSd>,
}

/// Runs every repeat of the scheme; repeats run in parallel but results are
/// kept in repeat order.
pub fn run_scheme<T: Scalar>(
    data: &SemiSynthDataset<T>,
    spec: &LearnerSpec,
    scheme: &SplitScheme,
    modalities: &[String],
    alpha: f64,
) -> Result<RepeatSummary> {
    scheme.check()?;
    let seeds = scheme.seeds();
    let records = seeds
        .par_iter()
        .enumerate()
        .map(|(r, &split_seed)| -> Result<(RepeatRecord, String)> {
            let learner_seed = repeat_learner_seed(spec.seed, split_seed);
            let s = spec.with_seed(learner_seed);
            let (estimate, diagnostics, tag) = match scheme.kind {
                SplitKind::Single { train_fraction } => {
                    let o = run_split(data, &s, train_fraction, split_seed, modalities, alpha)?;
                    (o.estimate, o.diagnostics, o.predictions.learner_tag)
                }
                SplitKind::Kfold { k } => {
                    let o = run_crossfit(data, &s, k, split_seed, modalities, alpha)?;
                    (o.estimate, o.diagnostics, o.predictions.learner_tag)
                }
            };
            Ok((
                RepeatRecord {
                    repeat: r,
                    split_seed,
                    learner_seed,
                    estimate: to_f64(&estimate),
                    diagnostics,
                },
                tag,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let learner_tag = records[0].1.clone();
    let repeats: Vec<RepeatRecord> = records.into_iter().map(|(r, _)| r).collect();
    let thetas: Vec<f64> = repeats.iter().map(|r| r.estimate.theta_hat).collect();
    Ok(RepeatSummary {
        learner_tag,
        modalities: modalities.to_vec(),
        split_descriptor: scheme.descriptor(),
        theta: MeanSd::of(&thetas),
        r2_y_rel: MeanSd::of_options(repeats.iter().map(|r| r.diagnostics.r2_y_rel)),
        r2_d_rel: MeanSd::of_options(repeats.iter().map(|r| r.diagnostics.r2_d_rel)),
        r2_y: MeanSd::of_options(repeats.iter().map(|r| r.diagnostics.r2_y)),
        r2_d: MeanSd::of_options(repeats.iter().map(|r| r.diagnostics.r2_d)),
        repeats,
    })
}

/// As [`run_scheme`], for at least two repeats.
pub fn repeat_splits<T: Scalar>(
    data: &SemiSynthDataset<T>,
    spec: &LearnerSpec,
    scheme: &SplitScheme,
    modalities: &[String],
    alpha: f64,
) -> Result<RepeatSummary> {
    if scheme.repeats < 2 {
        return Err(Error::Config("repeated splitting needs at least 2 repeats".into()));
    }
    run_scheme(data, spec, scheme, modalities, alpha)
}

pub fn to_f64<T: Scalar>(e: &EffectEstimate<T>) -> EffectEstimate<f64> {
    EffectEstimate {
        theta_hat: e.theta_hat.as_f64(),
        se: e.se.as_f64(),
        ci_low: e.ci_low.as_f64(),
        ci_high: e.ci_high.as_f64(),
        alpha: e.alpha,
        n_used: e.n_used,
        score_mean: e.score_mean.as_f64(),
        denom: e.denom.as_f64(),
    }
}

/// Estimation report written by the command-line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub theta_hat: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub alpha: f64,
    pub n_used: usize,
    pub diagnostics: ScoreDiagnostics,
    pub learner_tag: String,
    pub modalities: Vec<String>,
    pub split_descriptor: String,
    pub repeats: Vec<RepeatRecord>,
    /// Across-repeat `mean ± sd` of theta and the r^2 scores.
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub theta: MeanSd,
    pub r2_y_rel: Option<MeanSd>,
    pub r2_d_rel: Option<MeanSd>,
    pub r2_y: Option<MeanSd>,
    pub r2_d: Option<MeanSd>,
}

impl EstimationReport {
    /// Headline numbers come from the first repeat; the aggregate covers all.
    pub fn from_summary(summary: RepeatSummary) -> Self {
        let first = summary.repeats[0].clone();
        Self {
            theta_hat: first.estimate.theta_hat,
            se: first.estimate.se,
            ci: [first.estimate.ci_low, first.estimate.ci_high],
            alpha: first.estimate.alpha,
            n_used: first.estimate.n_used,
            diagnostics: first.diagnostics,
            learner_tag: summary.learner_tag,
            modalities: summary.modalities,
            split_descriptor: summary.split_descriptor,
            aggregate: Aggregate {
                theta: summary.theta,
                r2_y_rel: summary.r2_y_rel,
                r2_d_rel: summary.r2_d_rel,
                r2_y: summary.r2_y,
                r2_d: summary.r2_d,
            },
            repeats: summary.repeats,
        }
    }

    pub fn summary_text(&self) -> String {
        let pct = (1.0 - self.alpha) * 100.0;
        let mut s = format!(
            "learner {} on [{}], {}\ntheta_hat = {:.4} (se {:.4}), {pct:.0}% CI [{:.4}, {:.4}], n = {}\n",
            self.learner_tag,
            self.modalities.join(","),
            self.split_descriptor,
            self.theta_hat,
            self.se,
            self.ci[0],
            self.ci[1],
            self.n_used
        );
        if self.repeats.len() > 1 {
            s.push_str(&format!("over {} repeats: theta {}", self.repeats.len(), self.aggregate.theta));
            if let (Some(y), Some(d)) = (self.aggregate.r2_y_rel, self.aggregate.r2_d_rel) {
                s.push_str(&format!(", r2_y_rel {y}, r2_d_rel {d}"));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, DgpConfig};
    use crate::learners::{LearnerKind, RidgeParams};
    use ndarray::array;

    fn preds(l: Array1<f64>, m: Array1<f64>) -> NuisancePredictions<f64> {
        NuisancePredictions::held_out(l, m, 0, "fixture")
    }

    #[test]
    fn psi_examples() {
        let one = array![1.0];
        let zero = array![0.0];
        assert_eq!(score_psi(one.view(), one.view(), zero.view(), zero.view(), 0.0), array![1.0]);

        let y = array![1.0, 2.0, -1.0];
        let d: Array1<f64> = array![0.5, -1.0, 2.0];
        let l = array![0.1, 0.2, 0.3];
        let m = array![0.0, 0.5, 1.0];
        let p0 = score_psi(y.view(), d.view(), l.view(), m.view(), 0.0);
        let p1 = score_psi(y.view(), d.view(), l.view(), m.view(), 1.0);
        for i in 0..3 {
            let v = d[i] - m[i];
            assert!((p1[i] - p0[i] + v * v).abs() < 1e-15);
        }
    }

    #[test]
    fn noiseless_oracle_score_vanishes() {
        let mut ds = generate::<f64>(&DgpConfig::three_modalities(200, 1.0, 3, 1)).unwrap();
        let o = ds.oracle().unwrap().clone();
        ds.d = o.m0.clone();
        ds.y = &o.m0 * 0.5 + &o.g0;
        let psi = score_psi(ds.y.view(), ds.d.view(), o.l0.view(), o.m0.view(), 0.5);
        assert!(psi.iter().all(|&p| p.abs() < 1e-12));
    }

    #[test]
    fn zero_nuisances_reduce_to_origin_ols() {
        let y = array![1.0, 2.5, -0.5, 3.0];
        let d = array![0.5, 1.0, -1.0, 2.0];
        let z = Array1::zeros(4);
        let e = solve_theta(&preds(z.clone(), z), y.view(), d.view(), 0.05).unwrap();
        let ols = y.dot(&d) / d.dot(&d);
        assert!((e.theta_hat - ols).abs() < 1e-14);
        assert!(e.score_mean.abs() < 1e-12);
        assert!(e.ci_low < e.theta_hat && e.theta_hat < e.ci_high);
    }

    #[test]
    fn weak_residual_variation_and_in_sample_rejected() {
        let y = array![1.0, 2.0, 3.0];
        let d = array![0.5, 1.0, 2.0];
        let err = solve_theta(&preds(Array1::zeros(3), d.clone()), y.view(), d.view(), 0.05).unwrap_err();
        assert!(matches!(err, Error::WeakResidualVariation { .. }));
        let mut p = preds(Array1::zeros(3), Array1::zeros(3));
        p.fold_id[1] = crate::model::IN_SAMPLE;
        assert!(matches!(solve_theta(&p, y.view(), d.view(), 0.05), Err(Error::Validation(_))));
        let short = preds(Array1::zeros(2), Array1::zeros(2));
        assert!(matches!(solve_theta(&short, y.view(), d.view(), 0.05), Err(Error::Schema(_))));
    }

    #[test]
    fn equivariance() {
        let y = array![1.0, 2.5, -0.5, 3.0, 0.2];
        let d = array![0.5, 1.0, -1.0, 2.0, 0.1];
        let l = array![0.3, 0.1, 0.0, 1.0, -0.2];
        let m = array![0.1, 0.4, -0.3, 0.8, 0.0];
        let base = solve_theta(&preds(l.clone(), m.clone()), y.view(), d.view(), 0.05).unwrap();
        let k = 3.5;
        let scaled = solve_theta(&preds(&l * k, m.clone()), (&y * k).view(), d.view(), 0.05).unwrap();
        assert!((scaled.theta_hat - k * base.theta_hat).abs() < 1e-12);
        let c = 7.0;
        let shifted = solve_theta(&preds(l, &m + c), y.view(), (&d + c).view(), 0.05).unwrap();
        assert!((shifted.theta_hat - base.theta_hat).abs() < 1e-12);
    }

    #[test]
    fn bisection_matches_closed_form() {
        let y = array![1.0, 2.5, -0.5, 3.0, 0.2];
        let d = array![0.5, 1.0, -1.0, 2.0, 0.1];
        let l = array![0.3, 0.1, 0.0, 1.0, -0.2];
        let m = array![0.1, 0.4, -0.3, 0.8, 0.0];
        let e = solve_theta(&preds(l.clone(), m.clone()), y.view(), d.view(), 0.05).unwrap();
        let b = bisect_theta(y.view(), d.view(), l.view(), m.view()).unwrap();
        assert!((b - e.theta_hat).abs() < 1e-10);
    }

    #[test]
    fn scheme_checks() {
        assert!(SplitScheme::single(0.0, 1, 0).check().is_err());
        assert!(SplitScheme::single(1.0, 1, 0).check().is_err());
        assert!(SplitScheme::kfold(1, 1, 0).check().is_err());
        assert!(SplitScheme::single(0.5, 0, 0).check().is_err());
        let mut s = SplitScheme::single(0.5, 3, 0);
        s.repeat_seeds = Some(vec![1, 2, 1]);
        assert!(s.check().is_err());
        s.repeat_seeds = Some(vec![1, 2, 3]);
        assert!(s.check().is_ok());
        assert_eq!(s.seeds(), vec![1, 2, 3]);
        let derived = SplitScheme::single(0.5, 5, 9).seeds();
        for (i, a) in derived.iter().enumerate() {
            assert!(!derived[..i].contains(a));
        }
        let json: SplitScheme = serde_json::from_str(r#"{"kind":"kfold","k":5,"repeats":2,"seed":1}"#).unwrap();
        assert_eq!(json, SplitScheme::kfold(5, 2, 1));
    }

    #[test]
    fn splits_are_seeded_partitions() {
        let (a_train, a_test) = split_indices(101, 0.5, 4).unwrap();
        let (b_train, b_test) = split_indices(101, 0.5, 4).unwrap();
        assert_eq!((&a_train, &a_test), (&b_train, &b_test));
        assert_eq!(a_train.len(), 51);
        let mut all: Vec<usize> = a_train.iter().chain(&a_test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert!(split_indices(3, 0.5, 0).is_err());

        let folds = fold_assignment(10, 3, 1).unwrap();
        let counts: Vec<usize> = (0..3).map(|f| folds.iter().filter(|&&x| x == f).count()).collect();
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert!(counts.iter().all(|&c| c == 3 || c == 4));
        assert!(fold_assignment(10, 6, 1).is_err());
    }

    #[test]
    fn oracle_split_and_crossfit() {
        let ds = generate::<f64>(&DgpConfig::three_modalities(4000, 1.0, 3, 8)).unwrap();
        let mods = ds.modality_names();
        let oracle = LearnerSpec::new(LearnerKind::Oracle, 0);
        let a = run_split(&ds, &oracle, 0.5, 3, &mods, 0.05).unwrap();
        let b = run_split(&ds, &oracle, 0.5, 3, &mods, 0.05).unwrap();
        assert_eq!(a, b);
        assert!((a.estimate.theta_hat - 0.5).abs() < 4.0 * a.estimate.se);
        assert_eq!(a.diagnostics.rate_product, Some(0.0));
        assert_eq!(a.diagnostics.r2_y_rel, Some(1.0));

        let cf = run_crossfit(&ds, &oracle, 2, 3, &mods, 0.05).unwrap();
        let (lo, hi) = (
            cf.fold_estimates[0].theta_hat.min(cf.fold_estimates[1].theta_hat),
            cf.fold_estimates[0].theta_hat.max(cf.fold_estimates[1].theta_hat),
        );
        assert!(lo <= cf.estimate.theta_hat && cf.estimate.theta_hat <= hi);
        assert!(cf.predictions.is_out_of_sample());

        let small = ds.select_rows(&(0..100).collect::<Vec<_>>());
        let ridge = LearnerSpec::new(LearnerKind::Ridge(RidgeParams { penalty: 1.0 }), 0);
        let micro = run_crossfit(&small, &ridge, 50, 1, &mods, 0.05).unwrap();
        assert!(micro.estimate.theta_hat.is_finite() && micro.estimate.se.is_finite());
    }

    #[test]
    fn crossfit_ridge_recovers_theta() {
        let ds = generate::<f64>(&DgpConfig::three_modalities(10_000, 1.0, 4, 21)).unwrap();
        let ridge = LearnerSpec::new(LearnerKind::Ridge(RidgeParams { penalty: 1e-3 }), 0);
        let cf = run_crossfit(&ds, &ridge, 5, 2, &ds.modality_names(), 0.05).unwrap();
        assert!((cf.estimate.theta_hat - 0.5).abs() <= 0.03, "{}", cf.estimate.theta_hat);
    }

    #[test]
    fn repeats_summary_and_report() {
        let ds = generate::<f64>(&DgpConfig::three_modalities(600, 1.0, 3, 2)).unwrap();
        let ridge = LearnerSpec::new(LearnerKind::Ridge(RidgeParams { penalty: 0.1 }), 0);
        let scheme = SplitScheme::single(0.5, 5, 1);
        let s = repeat_splits(&ds, &ridge, &scheme, &ds.modality_names(), 0.05).unwrap();
        assert_eq!(s.repeats.len(), 5);
        assert!(s.theta.sd.is_finite() && s.theta.sd > 0.0);
        assert!(repeat_splits(&ds, &ridge, &SplitScheme::single(0.5, 1, 1), &ds.modality_names(), 0.05).is_err());
        let report = EstimationReport::from_summary(s);
        let text = report.summary_text();
        assert!(text.contains("over 5 repeats"));
        let back: EstimationReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn rate_diagnostic_behaviour() {
        let mean = LearnerSpec::new(LearnerKind::Mean, 0);
        let ridge = LearnerSpec::new(LearnerKind::Ridge(RidgeParams { penalty: 1e-6 }), 0);
        let mut ridge_rates = Vec::new();
        let mut mean_rates = Vec::new();
        for n in [1000, 4000, 16000] {
            let ds = generate::<f64>(&DgpConfig::three_modalities(n, 1.0, 3, 5)).unwrap();
            let mods = ds.modality_names();
            ridge_rates.push(run_split(&ds, &ridge, 0.5, 1, &mods, 0.05).unwrap().diagnostics.rate_product.unwrap());
            mean_rates.push(run_split(&ds, &mean, 0.5, 1, &mods, 0.05).unwrap().diagnostics.rate_product.unwrap());
        }
        assert!(ridge_rates[0] > ridge_rates[1] && ridge_rates[1] > ridge_rates[2], "{ridge_rates:?}");
        // A constant predictor keeps its bias: the diagnostic doubles with each 4x in n.
        for w in mean_rates.windows(2) {
            let ratio = w[1] / w[0];
            assert!((1.7..2.3).contains(&ratio), "{mean_rates:?}");
        }
    }

    #[test]
    fn orthogonality_and_zero_step() {
        let ds = generate::<f64>(&DgpConfig::three_modalities(5000, 1.0, 3, 6)).unwrap();
        let c = orthogonality_check(&ds, 0.1, 1).unwrap();
        assert!(c.orth_deriv_l.abs() < 0.1 && c.orth_deriv_m.abs() < 0.1);
        assert!(c.control_deriv_l.abs() > 0.2);
        assert!(orthogonality_check(&ds, 0.0, 1).is_err());
    }
}
