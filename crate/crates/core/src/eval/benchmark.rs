use serde::{Deserialize, Serialize};

use crate::dgp::{attenuated_plim_for_subset, oracle_bounds};
use crate::dml::{run_scheme, MeanSd, RepeatRecord, SplitScheme};
use crate::error::{Error, Result};
use crate::eval::metrics::ols_baseline;
use crate::learners::{presets, LearnerKind, LearnerSpec};
use crate::model::SemiSynthDataset;
use crate::scalar::Scalar;

/// One named model of a benchmark: a learner and the controls it may use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub name: String,
    pub learner: LearnerSpec,
    /// Modalities used as controls; all blocks of the dataset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modalities: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub theta0: f64,
    pub ols_theta: f64,
    pub oracle_r2_y: Option<f64>,
    pub oracle_r2_d: Option<f64>,
    /// Limit of the estimate with every modality's explainable confounding
    /// adjusted for; surrogate data only.
    pub attenuated_plim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub name: String,
    pub learner_tag: String,
    pub modalities: Vec<String>,
    pub theta: MeanSd,
    pub r2_y_rel: Option<MeanSd>,
    pub r2_d_rel: Option<MeanSd>,
    /// Set when any repeat had a relative r^2 above one.
    pub r2_rel_above_one: bool,
    pub repeats: Vec<RepeatRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub bounds: Bounds,
    pub split_descriptor: String,
    pub config_digest: String,
}

impl BenchmarkReport {
    pub fn row(&self, name: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Baseline (stumps on `tab`), Embedding (stumps on `[H_E, tab]`) and Deep
/// (fusion heads on every modality).
pub fn default_roster() -> Vec<RosterEntry> {
    vec![
        RosterEntry {
            name: "Baseline".into(),
            learner: LearnerSpec::new(LearnerKind::Gbt(presets::stumps()), 1),
            modalities: Some(vec!["tab".into()]),
        },
        RosterEntry {
            name: "Embedding".into(),
            learner: LearnerSpec::new(LearnerKind::Embedding(presets::embedding()), 2),
            modalities: None,
        },
        RosterEntry {
            name: "Deep".into(),
            learner: LearnerSpec::new(LearnerKind::Fusion(presets::fusion()), 3),
            modalities: None,
        },
    ]
}

/// 64-bit FNV-1a, hex encoded.
pub fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Every roster model evaluated under the same split scheme.
pub fn run_benchmark<T: Scalar>(
    data: &SemiSynthDataset<T>,
    roster: &[RosterEntry],
    scheme: &SplitScheme,
    alpha: f64,
) -> Result<BenchmarkReport> {
    if roster.is_empty() {
        return Err(Error::Config("benchmark roster is empty".into()));
    }
    for (i, e) in roster.iter().enumerate() {
        if roster[..i].iter().any(|o| o.name == e.name) {
            return Err(Error::Config(format!("roster name `{}` is used twice", e.name)));
        }
    }
    scheme.check()?;
    let all = data.modality_names();
    let mut rows = Vec::with_capacity(roster.len());
    for entry in roster {
        let mods = entry.modalities.clone().unwrap_or_else(|| all.clone());
        let s = run_scheme(data, &entry.learner, scheme, &mods, alpha)?;
        rows.push(BenchmarkRow {
            name: entry.name.clone(),
            learner_tag: s.learner_tag,
            modalities: mods,
            theta: s.theta,
            r2_y_rel: s.r2_y_rel,
            r2_d_rel: s.r2_d_rel,
            r2_rel_above_one: s.repeats.iter().any(|r| r.diagnostics.r2_rel_above_one()),
            repeats: s.repeats,
        });
    }

    let (oracle_r2_y, oracle_r2_d) = match &data.oracle {
        Some(_) => {
            let b = oracle_bounds(data)?;
            (Some(b.r2_y.as_f64()), Some(b.r2_d.as_f64()))
        }
        None => (None, None),
    };
    let attenuated_plim = (data.manifest.mode == "surrogate").then(|| attenuated_plim_for_subset(&data.manifest, &all));
    let bounds = Bounds {
        theta0: data.manifest.theta0,
        ols_theta: ols_baseline(data.y.view(), data.d.view())?.as_f64(),
        oracle_r2_y,
        oracle_r2_d,
        attenuated_plim,
    };
    let config = serde_json::json!({
        "manifest": data.manifest,
        "roster": roster,
        "scheme": scheme,
        "alpha": alpha,
        "n": data.n(),
    });
    Ok(BenchmarkReport {
        rows,
        bounds,
        split_descriptor: scheme.descriptor(),
        config_digest: digest(config.to_string().as_bytes()),
    })
}
