//! Named learner configurations used by the command-line tool and the
//! benchmark roster.

use std::collections::BTreeMap;

use super::fusion::Activation;
use super::{EmbeddingParams, EpochSelection, FusionArch, FusionParams, GbtParams, LearnerKind, LearnerSpec, RidgeParams};

/// Depth-1 boosting with enough trees to saturate a linear index at n = 10,000.
pub fn stumps() -> GbtParams {
    GbtParams {
        trees: 500,
        depth: 1,
        learning_rate: 0.1,
        subsample: 1.0,
        min_leaf: 20,
    }
}

/// One tanh encoder layer of width 16 per modality and an 8-dimensional
/// embedding, trained for 60 epochs.
pub fn fusion() -> FusionParams {
    FusionParams {
        arch: FusionArch {
            encoder_widths: vec![16],
            per_modality: BTreeMap::new(),
            fusion_width: None,
            embedding_dim: 8,
            activation: Activation::Tanh,
        },
        epochs: 60,
        batch_size: 128,
        step_size: 0.01,
        weight_init_scale: 1.0,
        selection: EpochSelection::MinHoldoutLoss,
        validation_fraction: 0.2,
        standardize_inputs: true,
    }
}

pub fn embedding() -> EmbeddingParams {
    EmbeddingParams {
        fusion: fusion(),
        inner: stumps(),
        passthrough: Some("tab".into()),
    }
}

/// `(name, spec)` for every built-in learner.
pub fn builtin() -> Vec<(&'static str, LearnerSpec)> {
    vec![
        ("ridge", LearnerSpec::new(LearnerKind::Ridge(RidgeParams { penalty: 1.0 }), 0)),
        ("gbt", LearnerSpec::new(LearnerKind::Gbt(stumps()), 0)),
        ("fusion", LearnerSpec::new(LearnerKind::Fusion(fusion()), 0)),
        ("embedding", LearnerSpec::new(LearnerKind::Embedding(embedding()), 0)),
        ("mean", LearnerSpec::new(LearnerKind::Mean, 0)),
        ("oracle", LearnerSpec::new(LearnerKind::Oracle, 0)),
    ]
}

pub fn by_name(name: &str) -> Option<LearnerSpec> {
    builtin().into_iter().find(|(n, _)| *n == name).map(|(_, s)| s)
}
