//! Nuisance learners producing `(l_hat, m_hat)`.

pub mod fusion;
pub mod gbt;
pub mod presets;
pub mod ridge;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NuisancePredictions, SemiSynthDataset, IN_SAMPLE};
use crate::rng::{stream, tag};
use crate::scalar::Scalar;
use crate::stats::mean;

pub use fusion::{combined_loss, extract_embedding, train_fusion, EpochSelection, FusionArch, FusionNet, FusionParams};
pub use gbt::{GbtModel, GbtParams};
pub use ridge::RidgeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeParams {
    pub penalty: f64,
}

fn default_passthrough() -> Option<String> {
    Some("tab".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingParams {
    pub fusion: FusionParams,
    pub inner: GbtParams,
    /// Block appended to `H_E` as boosting input; `None` boosts on `H_E` alone.
    #[serde(default = "default_passthrough")]
    pub passthrough: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerKind {
    Ridge(RidgeParams),
    Gbt(GbtParams),
    Fusion(FusionParams),
    Embedding(EmbeddingParams),
    /// Returns the oracle nuisances of whatever dataset it predicts on.
    Oracle,
    /// Predicts the training means.
    Mean,
}

impl LearnerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::Ridge(_) => "ridge",
            LearnerKind::Gbt(_) => "gbt",
            LearnerKind::Fusion(_) => "fusion",
            LearnerKind::Embedding(_) => "embedding",
            LearnerKind::Oracle => "oracle",
            LearnerKind::Mean => "mean",
        }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            LearnerKind::Ridge(p) if !(p.penalty >= 0.0 && p.penalty.is_finite()) => {
                Err(Error::Config("ridge: penalty must be nonnegative".into()))
            }
            LearnerKind::Gbt(p) => p.check(),
            LearnerKind::Fusion(p) => p.check(),
            LearnerKind::Embedding(p) => {
                p.fusion.check()?;
                p.inner.check()
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    #[serde(flatten)]
    pub kind: LearnerKind,
    #[serde(default)]
    pub seed: u64,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            kind: self.kind.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel<T: Scalar = f64> {
    Ridge { l: RidgeModel<T>, m: RidgeModel<T> },
    Gbt { l: GbtModel<T>, m: GbtModel<T> },
    Fusion(Box<FusionNet<T>>),
    Embedding {
        net: Box<FusionNet<T>>,
        passthrough: Option<String>,
        l: GbtModel<T>,
        m: GbtModel<T>,
    },
    Oracle,
    Mean { l: T, m: T },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedLearner<T: Scalar = f64> {
    pub tag: String,
    pub modalities: Vec<String>,
    /// `(modality, width)` of every block the learner reads.
    pub schema: Vec<(String, usize)>,
    pub model: FittedModel<T>,
}

fn block_schema<T: Scalar>(data: &SemiSynthDataset<T>, names: &[String]) -> Result<Vec<(String, usize)>> {
    names
        .iter()
        .map(|m| {
            data.block(m)
                .map(|b| (m.clone(), b.values.ncols()))
                .ok_or_else(|| Error::Schema(format!("dataset has no modality `{m}`")))
        })
        .collect()
}

fn check_valid<T: Scalar>(data: &SemiSynthDataset<T>) -> Result<()> {
    match data.validate().first() {
        None => Ok(()),
        Some(v) => Err(Error::Validation(v.to_string())),
    }
}

/// Splits `n` rows into (fit, validation) with a seeded permutation; both
/// parts keep ascending row order.
fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64) * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, tag::VALIDATION, 0, 0));
    let mut val = order[..n_val].to_vec();
    let mut fit = order[n_val..].to_vec();
    val.sort_unstable();
    fit.sort_unstable();
    (fit, val)
}

/// Trains the network, holding out `validation_fraction` of `train` for
/// epoch selection when that rule is active.
pub fn fit_fusion_net<T: Scalar>(
    params: &FusionParams,
    train: &SemiSynthDataset<T>,
    modalities: &[String],
    seed: u64,
) -> Result<FusionNet<T>> {
    params.check()?;
    let holdout_rows = params.selection == EpochSelection::MinHoldoutLoss && params.validation_fraction > 0.0;
    if holdout_rows {
        let (fit_rows, val_rows) = validation_split(train.n(), params.validation_fraction, seed);
        if fit_rows.is_empty() || val_rows.is_empty() {
            return Err(Error::Config("fusion: too few rows for the validation split".into()));
        }
        let fit_part = train.select_rows(&fit_rows);
        let val_part = train.select_rows(&val_rows);
        train_fusion(params, &fit_part, Some(&val_part), modalities, seed)
    } else {
        train_fusion(params, train, None, modalities, seed)
    }
}

fn embedding_inputs<T: Scalar>(net: &FusionNet<T>, passthrough: Option<&str>, data: &SemiSynthDataset<T>) -> Result<Array2<T>> {
    let h = extract_embedding(net, data)?;
    match passthrough {
        None => Ok(h),
        Some(p) => {
            let block = data
                .block(p)
                .ok_or_else(|| Error::Schema(format!("dataset has no modality `{p}`")))?;
            Ok(concatenate(Axis(1), &[h.view(), block.values.view()]).expect("same rows"))
        }
    }
}

fn fit_gbt_pair<T: Scalar>(x: &Array2<T>, data: &SemiSynthDataset<T>, params: &GbtParams, seed: u64) -> Result<(GbtModel<T>, GbtModel<T>)> {
    let (l, m) = rayon::join(
        || GbtModel::fit(x.view(), data.y.view(), params, seed),
        || GbtModel::fit(x.view(), data.d.view(), params, seed ^ 0x6d),
    );
    Ok((l?, m?))
}

/// Boosted learners for `l` and `m` over `[H_E, passthrough block]`, with the
/// network frozen.
pub fn fit_embedding_model<T: Scalar>(
    net: &FusionNet<T>,
    train: &SemiSynthDataset<T>,
    inner: &GbtParams,
    passthrough: Option<&str>,
    seed: u64,
) -> Result<FittedLearner<T>> {
    if net.embedding_dim() == 0 {
        return Err(Error::Config("embedding: embedding_dim must be at least 1".into()));
    }
    let x = embedding_inputs(net, passthrough, train)?;
    let (l, m) = fit_gbt_pair(&x, train, inner, seed)?;
    let mut used = net.modalities.clone();
    if let Some(p) = passthrough {
        if !used.iter().any(|u| u == p) {
            used.push(p.to_string());
        }
    }
    Ok(FittedLearner {
        tag: "embedding".into(),
        modalities: net.modalities.clone(),
        schema: block_schema(train, &used)?,
        model: FittedModel::Embedding {
            net: Box::new(net.clone()),
            passthrough: passthrough.map(str::to_string),
            l,
            m,
        },
    })
}

/// Fits both nuisance heads on `train` using the given modality subset.
pub fn fit<T: Scalar>(spec: &LearnerSpec, train: &SemiSynthDataset<T>, modalities: &[String]) -> Result<FittedLearner<T>> {
    if modalities.is_empty() {
        return Err(Error::Config("learner: empty modality subset".into()));
    }
    spec.kind.check()?;
    check_valid(train)?;
    let schema = block_schema(train, modalities)?;
    let seed = spec.seed;
    let model = match &spec.kind {
        LearnerKind::Ridge(p) => {
            let x = train.features(modalities)?;
            let penalty = T::lit(p.penalty);
            FittedModel::Ridge {
                l: RidgeModel::fit(x.view(), train.y.view(), penalty)?,
                m: RidgeModel::fit(x.view(), train.d.view(), penalty)?,
            }
        }
        LearnerKind::Gbt(p) => {
            let x = train.features(modalities)?;
            let (l, m) = fit_gbt_pair(&x, train, p, seed)?;
            FittedModel::Gbt { l, m }
        }
        LearnerKind::Fusion(p) => FittedModel::Fusion(Box::new(fit_fusion_net(p, train, modalities, seed)?)),
        LearnerKind::Embedding(p) => {
            let net = fit_fusion_net(&p.fusion, train, modalities, seed)?;
            return fit_embedding_model(&net, train, &p.inner, p.passthrough.as_deref(), mix_inner(seed));
        }
        LearnerKind::Oracle => {
            train.oracle()?;
            FittedModel::Oracle
        }
        LearnerKind::Mean => FittedModel::Mean {
            l: mean(train.y.view()),
            m: mean(train.d.view()),
        },
    };
    Ok(FittedLearner {
        tag: spec.kind.name().into(),
        modalities: modalities.to_vec(),
        schema,
        model,
    })
}

fn mix_inner(seed: u64) -> u64 {
    crate::rng::mix(seed, tag::SUBSAMPLE)
}

impl<T: Scalar> FittedLearner<T> {
    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    fn check_schema(&self, data: &SemiSynthDataset<T>) -> Result<()> {
        if data.n() == 0 {
            return Err(Error::Schema("cannot predict on an empty dataset".into()));
        }
        for (m, width) in &self.schema {
            let b = data
                .block(m)
                .ok_or_else(|| Error::Schema(format!("dataset has no modality `{m}`")))?;
            if b.values.ncols() != *width {
                return Err(Error::Schema(format!(
                    "modality `{m}` has {} columns, learner was fit on {width}",
                    b.values.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Raw `(l_hat, m_hat)` without fold bookkeeping.
    pub fn predict_raw(&self, data: &SemiSynthDataset<T>) -> Result<(Array1<T>, Array1<T>)> {
        self.check_schema(data)?;
        let out = match &self.model {
            FittedModel::Ridge { l, m } => {
                let x = data.features(&self.modalities)?;
                (l.predict(x.view()), m.predict(x.view()))
            }
            FittedModel::Gbt { l, m } => {
                let x = data.features(&self.modalities)?;
                (l.predict(x.view()), m.predict(x.view()))
            }
            FittedModel::Fusion(net) => net.predict(data)?,
            FittedModel::Embedding { net, passthrough, l, m } => {
                let x = embedding_inputs(net, passthrough.as_deref(), data)?;
                (l.predict(x.view()), m.predict(x.view()))
            }
            FittedModel::Oracle => {
                let o = data.oracle()?;
                (o.l0.clone(), o.m0.clone())
            }
            FittedModel::Mean { l, m } => (Array1::from_elem(data.n(), *l), Array1::from_elem(data.n(), *m)),
        };
        if out.0.iter().chain(out.1.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("{}: non-finite prediction", self.tag)));
        }
        Ok(out)
    }

    /// Predictions flagged as in-sample; callers that know the rows are held
    /// out relabel `fold_id`.
    pub fn predict(&self, data: &SemiSynthDataset<T>) -> Result<NuisancePredictions<T>> {
        let (l_hat, m_hat) = self.predict_raw(data)?;
        Ok(NuisancePredictions::held_out(l_hat, m_hat, IN_SAMPLE, self.tag.clone()))
    }

    /// Predictions on rows the learner never saw, labeled with `fold`.
    pub fn predict_held_out(&self, data: &SemiSynthDataset<T>, fold: i64) -> Result<NuisancePredictions<T>> {
        let (l_hat, m_hat) = self.predict_raw(data)?;
        Ok(NuisancePredictions::held_out(l_hat, m_hat, fold, self.tag.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, DgpConfig};
    use std::collections::BTreeMap;

    fn data(n: usize) -> SemiSynthDataset {
        generate(&DgpConfig::three_modalities(n, 0.9, 3, 5)).unwrap()
    }

    fn small_fusion() -> FusionParams {
        FusionParams {
            arch: FusionArch {
                encoder_widths: vec![4],
                per_modality: BTreeMap::new(),
                fusion_width: None,
                embedding_dim: 3,
                activation: fusion::Activation::Tanh,
            },
            epochs: 3,
            batch_size: 32,
            step_size: 0.05,
            weight_init_scale: 1.0,
            selection: EpochSelection::MinHoldoutLoss,
            validation_fraction: 0.2,
            standardize_inputs: true,
        }
    }

    #[test]
    fn spec_json_shape() {
        let spec: LearnerSpec =
            serde_json::from_str(r#"{"kind":"gbt","trees":5,"depth":1,"learning_rate":0.1,"subsample":1.0,"seed":3}"#).unwrap();
        assert_eq!(spec.seed, 3);
        assert!(matches!(spec.kind, LearnerKind::Gbt(GbtParams { trees: 5, min_leaf: 1, .. })));
        let back: LearnerSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let oracle: LearnerSpec = serde_json::from_str(r#"{"kind":"oracle"}"#).unwrap();
        assert_eq!(oracle.kind, LearnerKind::Oracle);
    }

    #[test]
    fn in_sample_predictions_are_flagged() {
        let ds = data(100);
        let fitted = fit(&LearnerSpec::new(LearnerKind::Ridge(RidgeParams { penalty: 1.0 }), 0), &ds, &["tab".into()]).unwrap();
        let p = fitted.predict(&ds).unwrap();
        assert!(p.fold_id.iter().all(|&f| f == IN_SAMPLE));
        assert!(!p.is_out_of_sample());
        assert_eq!(p.learner_tag, "ridge");
    }

    #[test]
    fn oracle_learner_returns_oracle_columns() {
        let ds = data(50);
        let fitted = fit(&LearnerSpec::new(LearnerKind::Oracle, 0), &ds, &["tab".into()]).unwrap();
        let p = fitted.predict(&ds).unwrap();
        let o = ds.oracle().unwrap();
        assert_eq!(p.l_hat, o.l0);
        assert_eq!(p.m_hat, o.m0);
    }

    #[test]
    fn empty_dataset_and_schema_mismatch() {
        let ds = data(50);
        let fitted = fit(&LearnerSpec::new(LearnerKind::Mean, 0), &ds, &["tab".into()]).unwrap();
        let empty = ds.select_rows(&[]);
        assert!(matches!(fitted.predict(&empty), Err(Error::Schema(_))));
        let other = generate::<f64>(&DgpConfig::three_modalities(50, 0.9, 4, 5)).unwrap();
        assert!(matches!(fitted.predict(&other), Err(Error::Schema(_))));
        assert!(fit(&LearnerSpec::new(LearnerKind::Mean, 0), &ds, &[]).is_err());
        assert!(fit(&LearnerSpec::new(LearnerKind::Mean, 0), &ds, &["audio".into()]).is_err());
    }

    #[test]
    fn invalid_training_data_is_rejected() {
        let mut ds = data(50);
        ds.y[7] = f64::NAN;
        let err = fit(&LearnerSpec::new(LearnerKind::Mean, 0), &ds, &["tab".into()]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn zero_width_fusion_is_rejected() {
        let ds = data(50);
        let mut p = small_fusion();
        p.arch.encoder_widths = vec![0];
        assert!(fit(&LearnerSpec::new(LearnerKind::Fusion(p), 0), &ds, &ds.modality_names()).is_err());
    }

    #[test]
    fn fits_are_deterministic() {
        let ds = data(300);
        let mods = ds.modality_names();
        let gbt = LearnerSpec::new(
            LearnerKind::Gbt(GbtParams {
                trees: 20,
                subsample: 0.7,
                ..GbtParams::default()
            }),
            11,
        );
        assert_eq!(fit(&gbt, &ds, &mods).unwrap(), fit(&gbt, &ds, &mods).unwrap());
        let emb = LearnerSpec::new(
            LearnerKind::Embedding(EmbeddingParams {
                fusion: small_fusion(),
                inner: GbtParams {
                    trees: 10,
                    ..GbtParams::default()
                },
                passthrough: Some("tab".into()),
            }),
            4,
        );
        let a = fit(&emb, &ds, &mods).unwrap();
        assert_eq!(a, fit(&emb, &ds, &mods).unwrap());
        assert_eq!(a.schema.len(), 3);
    }

    #[test]
    fn embedding_model_differs_from_fusion_heads() {
        let ds = data(300);
        let mods = ds.modality_names();
        let net = fit_fusion_net::<f64>(&small_fusion(), &ds, &mods, 2).unwrap();
        let inner = GbtParams {
            trees: 30,
            ..GbtParams::default()
        };
        let emb = fit_embedding_model(&net, &ds, &inner, Some("tab"), 1).unwrap();
        let again = fit_embedding_model(&net, &ds, &inner, Some("tab"), 1).unwrap();
        assert_eq!(emb, again);
        let (l_emb, _) = emb.predict_raw(&ds).unwrap();
        let (l_net, _) = net.predict(&ds).unwrap();
        assert!(l_emb.iter().zip(l_net.iter()).any(|(a, b)| (a - b).abs() > 1e-6));

        // The heads read the same embedding that extract_embedding returns.
        let h = extract_embedding(&net, &ds).unwrap();
        let mut out = h.dot(&net.head.w.t());
        out += &net.head.b;
        assert_eq!(out.column(0), l_net);
    }

    #[test]
    fn triangle_bound_on_oracle_data() {
        let ds = data(400);
        let train = ds.select_rows(&(0..200).collect::<Vec<_>>());
        let test = ds.select_rows(&(200..400).collect::<Vec<_>>());
        let fitted = fit(&LearnerSpec::new(LearnerKind::Gbt(GbtParams::default()), 0), &train, &ds.modality_names()).unwrap();
        let (l, m) = fitted.predict_raw(&test).unwrap();
        let o = test.oracle().unwrap();
        let norm = |a: &Array1<f64>, b: &Array1<f64>| ((a - b).mapv(|v| v * v).mean().unwrap()).sqrt();
        assert!(norm(&test.y, &l) <= norm(&o.l0, &l) + norm(&test.y, &o.l0) + 1e-12);
        assert!(norm(&test.d, &m) <= norm(&o.m0, &m) + norm(&test.d, &o.m0) + 1e-12);
    }
}
