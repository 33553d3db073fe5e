//! Fixtures shared by the benchmarks.

use segmote_core::harness::data::{eval_batch, Prepared};
use segmote_core::harness::{BatchInput, SegMote};
use segmote_core::synth::{Corpus, CorpusSpec, PromptKind};
use segmote_core::{Result, Tensor, TrainConfig};

pub use segmote_core::{Scalar, Tape};

/// Default-size model with a one-batch corpus per modality.
pub struct Fixture {
    pub model: SegMote<f32>,
    pub corpus: Corpus,
    pub prep: Prepared<f32>,
    pub batch: Vec<usize>,
}

impl Fixture {
    pub fn new(ppt: bool) -> Result<Self> {
        let mut cfg = TrainConfig { corpus: CorpusSpec { samples_per_modality: 4, split_ratio: 0.5, ..CorpusSpec::default() }, ..TrainConfig::default() };
        cfg.ppt_enabled = ppt;
        if ppt {
            cfg.prompt = segmote_core::harness::TrainPrompt::None;
        }
        let corpus = Corpus::generate(cfg.corpus.clone())?;
        let model = SegMote::new(cfg)?;
        let prep = Prepared::new(&model, &corpus)?;
        let batch = corpus.split(true).into_iter().take(model.config.batch).collect();
        Ok(Fixture { model, corpus, prep, batch })
    }

    pub fn prompt(&self) -> PromptKind {
        if self.model.ppt.is_some() {
            PromptKind::None
        } else {
            PromptKind::Point
        }
    }

    pub fn input(&self) -> Result<BatchInput<'_, f32>> {
        eval_batch(&self.model, &self.corpus, &self.prep, &self.batch, self.prompt())
    }

    pub fn targets(&self) -> Tensor<f32> {
        self.prep.targets(&self.batch, self.model.config.corpus.image_size)
    }
}
