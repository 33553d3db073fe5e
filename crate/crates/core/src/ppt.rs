//! Prompt-free feature tokens: learnable queries attend over normalised image
//! features, biased during training by a mask or class prior.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{batch_rows, Attention, Ctx, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PptConfig {
    pub num_queries: usize,
    pub num_classes: usize,
    /// Probability of drawing a mask prior (else a class prior) per training step.
    pub prior_mix: f64,
}

impl Default for PptConfig {
    fn default() -> Self {
        Self { num_queries: 2, num_classes: 3, prior_mix: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub struct PptParams {
    pub config: PptConfig,
    pub queries: ParamId,
    pub attn: Attention,
    pub mlp: Mlp,
    pub ln_feat: LayerNorm,
    pub class_embed: ParamId,
    pub mask_proj: Linear,
}

impl PptParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, dim: usize, heads: usize, config: PptConfig) -> Result<Self> {
        if config.num_queries == 0 {
            return Err(Error::Config("ppt.num_queries must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&config.prior_mix) {
            return Err(Error::Config("ppt.prior_mix must lie in [0, 1]".into()));
        }
        Ok(Self {
            config,
            queries: store.add("ppt.queries", init.gaussian(&[config.num_queries, dim]), true),
            attn: Attention::new(store, init, "ppt.attn", dim, dim, heads, true)?,
            mlp: Mlp::new(store, init, "ppt.mlp", dim, 2 * dim, dim, true),
            ln_feat: LayerNorm::new(store, "ppt.ln_feat", dim, true),
            class_embed: store.add("ppt.class_embed", init.gaussian(&[config.num_classes.max(1), dim]), true),
            mask_proj: Linear::new(store, init, "ppt.mask_proj", dim, dim, true),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Mask,
    Text,
    None,
}

/// What the prior vector is computed from; the vector itself is built on the
/// tape so the class table and mask projection receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPrior {
    pub kind: PriorKind,
    pub class_id: usize,
    /// Foreground grid cells for a mask prior.
    pub cells: Vec<usize>,
}

impl PromptPrior {
    pub fn none() -> Self {
        Self { kind: PriorKind::None, class_id: 0, cells: Vec::new() }
    }
}

/// Training draws mask (probability `mix`) or text; inference always gives
/// no prior. A mask prior with no foreground cell falls back to text.
pub fn sample_prior<R: Rng>(class_id: usize, lowres_mask: &[u8], rng: &mut R, training: bool, mix: f64) -> PromptPrior {
    if !training {
        return PromptPrior::none();
    }
    let mask = rng.random::<f64>() < mix;
    let cells: Vec<usize> = lowres_mask.iter().enumerate().filter(|(_, &m)| m != 0).map(|(i, _)| i).collect();
    if mask && !cells.is_empty() {
        PromptPrior { kind: PriorKind::Mask, class_id, cells }
    } else {
        PromptPrior { kind: PriorKind::Text, class_id, cells: Vec::new() }
    }
}

/// Feature tokens `[B, Q, D]` from image features `[B, HW, D]`.
pub fn ppt_forward<T: Scalar>(ctx: &mut Ctx<'_, T>, image: Var, priors: &[PromptPrior], params: &PptParams) -> Result<Var> {
    let s = ctx.tape.shape(image).to_vec();
    let (b, hw, d) = (s[0], s[1], s[2]);
    if priors.len() != b {
        return Err(Error::InvalidArgument(format!("{} priors for a batch of {b}", priors.len())));
    }
    let q = params.config.num_queries;
    let feats = params.ln_feat.forward(ctx, image)?;
    let flat = ctx.tape.reshape(feats, &[b * hw, d])?;

    let mut rows = Vec::with_capacity(b);
    for (i, p) in priors.iter().enumerate() {
        let v = match p.kind {
            PriorKind::None => ctx.tape.constant(Tensor::zeros([1, d])),
            PriorKind::Text => {
                if p.class_id >= params.config.num_classes.max(1) {
                    return Err(Error::InvalidArgument(format!("class id {} has no embedding", p.class_id)));
                }
                let table = ctx.p(params.class_embed);
                ctx.tape.gather_rows(table, &[p.class_id])?
            }
            PriorKind::Mask => {
                let idx: Vec<usize> = p.cells.iter().map(|&c| i * hw + c).collect();
                let fg = ctx.tape.gather_rows(flat, &idx)?;
                let sum = ctx.tape.sum_rows(fg);
                let mean = ctx.tape.scale(sum, 1.0 / idx.len() as f64);
                let mean = ctx.tape.reshape(mean, &[1, d])?;
                params.mask_proj.forward(ctx, mean)?
            }
        };
        rows.push(ctx.tape.reshape(v, &[1, 1, d])?);
    }
    let prior = ctx.tape.concat(&rows)?;
    let prior = ctx.tape.reshape(prior, &[b, d])?;
    let spread: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, q)).collect();
    let prior = ctx.tape.gather_rows(prior, &spread)?;
    let prior = ctx.tape.reshape(prior, &[b, q, d])?;

    let queries = ctx.p(params.queries);
    let queries = batch_rows(ctx.tape, queries, b)?;
    let queries = ctx.tape.add(queries, prior)?;
    let (att, _) = params.attn.forward(ctx, queries, feats, feats)?;
    let m = params.mlp.forward(ctx, att)?;
    ctx.tape.add(queries, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inference_prior_is_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_prior(1, &[1, 0], &mut rng, false, 0.5), PromptPrior::none());
        }
    }

    #[test]
    fn empty_mask_falls_back_to_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_prior(2, &[0, 0, 0], &mut rng, true, 1.0);
        assert_eq!(p.kind, PriorKind::Text);
    }
}
