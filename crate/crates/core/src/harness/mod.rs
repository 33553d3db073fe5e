//! Training, evaluation, diagnostics and persistence.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod stats;
pub mod train;

pub use config::{TrainConfig, TrainPrompt};
pub use model::{BatchInput, ForwardOutput, SegMote, StepNoise};
pub use train::{evaluate, train, EvalReport, RunReport};

use crate::tensor::Scalar;

/// Parameter counts per module; the encoder is reported as frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub groups: Vec<(String, usize)>,
    pub trainable_total: usize,
    pub frozen_encoder: usize,
}

pub fn module_of(name: &str) -> &'static str {
    if name.starts_with("mote.router") {
        "mote.router"
    } else if name.starts_with("mote.expert") {
        "mote.experts"
    } else if name.starts_with("mote.tokens") {
        "mote.tokens"
    } else if name.starts_with("ppt.") {
        "ppt"
    } else if name.starts_with("encoder.") {
        "encoder"
    } else {
        "decoder"
    }
}

pub fn count_params<T: Scalar>(model: &SegMote<T>) -> ParamCounts {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for e in model.store.entries() {
        let m = module_of(&e.name);
        match groups.iter_mut().find(|(g, _)| g == m) {
            Some((_, n)) => *n += e.value.numel(),
            None => groups.push((m.to_string(), e.value.numel())),
        }
    }
    let trainable_total = groups.iter().map(|(_, n)| n).sum();
    let frozen_encoder = model.encoder.store.entries().iter().map(|e| e.value.numel()).sum();
    ParamCounts { groups, trainable_total, frozen_encoder }
}
