//! Encoded corpus cache and per-batch prompt construction.

use rand::Rng;

use crate::decoder::PromptInput;
use crate::encoder::ImageEmbedding;
use crate::error::{Error, Result};
use crate::ppt::{sample_prior, PriorKind, PromptPrior};
use crate::rng::{keyed_rng, stream};
use crate::synth::{downsample_mask, sample_prompt, Corpus, PromptKind};
use crate::tensor::{Scalar, Tensor};

use super::model::{BatchInput, SegMote};

const ENCODE_CHUNK: usize = 32;

/// Frozen-encoder outputs and targets for every corpus sample. The encoder
/// never changes, so embeddings are computed once per run.
pub struct Prepared<T: Scalar> {
    pub embeddings: Vec<ImageEmbedding<T>>,
    pub masks: Vec<Vec<u8>>,
    pub lowres: Vec<Vec<u8>>,
}

impl<T: Scalar> Prepared<T> {
    pub fn new(model: &SegMote<T>, corpus: &Corpus) -> Result<Self> {
        let size = model.config.corpus.image_size;
        if corpus.spec.image_size != size {
            return Err(Error::Corpus(format!(
                "corpus images are {0}x{0}, model expects {size}x{size}",
                corpus.spec.image_size
            )));
        }
        let images: Vec<Tensor<T>> = corpus.samples.iter().map(|s| s.image.cast()).collect();
        let mut embeddings = Vec::with_capacity(images.len());
        for chunk in images.chunks(ENCODE_CHUNK) {
            let refs: Vec<&Tensor<T>> = chunk.iter().collect();
            embeddings.extend(model.encoder.encode_batch(&refs)?);
        }
        let masks: Vec<Vec<u8>> = corpus.samples.iter().map(|s| s.binary_mask()).collect();
        let lowres = masks.iter().map(|m| downsample_mask(m, size, model.grid())).collect();
        Ok(Self { embeddings, masks, lowres })
    }

    /// Binary targets `[B, H, W]`.
    pub fn targets(&self, idx: &[usize], size: usize) -> Tensor<T> {
        let data = idx.iter().flat_map(|&i| self.masks[i].iter().map(|&m| if m != 0 { T::one() } else { T::zero() })).collect();
        Tensor::new([idx.len(), size, size], data).expect("target shape")
    }
}

fn to_input(p: &crate::synth::PromptSet) -> Option<PromptInput> {
    match p.kind {
        PromptKind::Point => p.point.map(|(x, y)| PromptInput::Point { x: x as f64, y: y as f64 }),
        PromptKind::Box => p.bbox.map(|[x0, y0, x1, y1]| PromptInput::Box { x0, y0, x1, y1 }),
        _ => None,
    }
}

/// Geometric prompts for `idx`, drawn from one keyed stream.
pub fn geometric_prompts<R: Rng>(
    corpus: &Corpus,
    idx: &[usize],
    kind: PromptKind,
    grid: usize,
    jitter: f64,
    rng: &mut R,
) -> Option<Vec<PromptInput>> {
    match kind {
        PromptKind::Point | PromptKind::Box => Some(
            idx.iter()
                .map(|&i| to_input(&sample_prompt(&corpus.samples[i], kind, grid, jitter, rng)).expect("geometric prompt"))
                .collect(),
        ),
        _ => None,
    }
}

/// Builds an evaluation batch; prompts depend only on each sample's id.
pub fn eval_batch<'a, T: Scalar>(
    model: &SegMote<T>,
    corpus: &Corpus,
    prep: &'a Prepared<T>,
    idx: &[usize],
    kind: PromptKind,
) -> Result<BatchInput<'a, T>> {
    let cfg = &model.config;
    let prompts = match kind {
        PromptKind::Point | PromptKind::Box => {
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx {
                let mut rng = keyed_rng(cfg.seed, corpus.entries[i].id, stream::PROMPTS);
                out.extend(geometric_prompts(corpus, &[i], kind, model.grid(), cfg.box_jitter, &mut rng).expect("geometric"));
            }
            Some(out)
        }
        _ => None,
    };
    let priors = if model.ppt.is_some() {
        Some(
            idx.iter()
                .map(|&i| match kind {
                    PromptKind::Mask => {
                        let cells: Vec<usize> = prep.lowres[i].iter().enumerate().filter(|(_, &m)| m != 0).map(|(c, _)| c).collect();
                        PromptPrior { kind: PriorKind::Mask, class_id: corpus.samples[i].class_id, cells }
                    }
                    _ => PromptPrior::none(),
                })
                .collect(),
        )
    } else {
        match kind {
            PromptKind::None => return Err(Error::InvalidArgument("prompt `none` needs a model with feature tokens".into())),
            PromptKind::Mask => return Err(Error::InvalidArgument("mask prompts are consumed by the feature tokens; the model has none".into())),
            _ => None,
        }
    };
    Ok(BatchInput { embeddings: idx.iter().map(|&i| &prep.embeddings[i]).collect(), prompts, priors })
}

/// Training priors for a step, one keyed stream per step.
pub fn train_priors(model_seed: u64, step: u64, corpus: &Corpus, prep_lowres: &[Vec<u8>], idx: &[usize], mix: f64) -> Vec<PromptPrior> {
    let mut rng = keyed_rng(model_seed, step, stream::PRIORS);
    idx.iter().map(|&i| sample_prior(corpus.samples[i].class_id, &prep_lowres[i], &mut rng, true, mix)).collect()
}
