use serde::{Deserialize, Serialize};

use crate::dml::solve_theta;
use crate::error::{Error, Result};
use crate::eval::metrics::{r_squared, relative_r2};
use crate::learners::fusion::TrainingLog;
use crate::model::{NuisancePredictions, SemiSynthDataset};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub epoch: usize,
    pub theta_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub r2_y_rel: Option<f64>,
    pub r2_d_rel: Option<f64>,
}

/// Estimate after every training epoch, on the held-out rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochTrace {
    pub points: Vec<TracePoint>,
}

impl EpochTrace {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> Option<&TracePoint> {
        self.points.first()
    }

    pub fn last(&self) -> Option<&TracePoint> {
        self.points.last()
    }
}

/// Solves for theta on the holdout snapshot of each epoch after the first
/// update. `test` must be the holdout set the network was trained with.
pub fn epoch_trace<T: Scalar>(log: &TrainingLog<T>, test: &SemiSynthDataset<T>, alpha: f64) -> Result<EpochTrace> {
    let records: Vec<_> = log.epochs.iter().filter(|r| r.epoch >= 1).collect();
    if records.is_empty() {
        return Err(Error::Config("epoch trace: the training log has no trained epochs".into()));
    }
    let bounds = match &test.oracle {
        Some(o) => Some((r_squared(test.y.view(), o.l0.view())?, r_squared(test.d.view(), o.m0.view())?)),
        None => None,
    };
    let mut points = Vec::with_capacity(records.len());
    for r in records {
        let h = r.holdout.as_ref().ok_or_else(|| {
            Error::Config(format!("epoch trace: epoch {} has no holdout predictions", r.epoch))
        })?;
        if h.l_hat.len() != test.n() {
            return Err(Error::Schema("epoch trace: holdout snapshot does not match the test rows".into()));
        }
        let preds = NuisancePredictions::held_out(h.l_hat.clone(), h.m_hat.clone(), 0, "fusion");
        let e = solve_theta(&preds, test.y.view(), test.d.view(), alpha)?;
        let (r2_y_rel, r2_d_rel) = match bounds {
            Some((by, bd)) => (
                relative_r2(test.y.view(), h.l_hat.view(), by).ok().map(|v| v.as_f64()),
                relative_r2(test.d.view(), h.m_hat.view(), bd).ok().map(|v| v.as_f64()),
            ),
            None => (None, None),
        };
        points.push(TracePoint {
            epoch: r.epoch,
            theta_hat: e.theta_hat.as_f64(),
            ci_low: e.ci_low.as_f64(),
            ci_high: e.ci_high.as_f64(),
            r2_y_rel,
            r2_d_rel,
        });
    }
    Ok(EpochTrace { points })
}
