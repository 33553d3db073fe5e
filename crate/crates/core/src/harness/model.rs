//! The assembled segmentation model: frozen encoder, decoder with token
//! experts, and optional prompt-free feature tokens.

use crate::decoder::{assemble_tokens, decoder_layer, predict_mask, DecoderConfig, DecoderParams, PromptInput, TokenLayout, TokenSequence};
use crate::encoder::{init_frozen, EncoderConfig, EncoderParams, ImageEmbedding};
use crate::error::{Error, Result};
use crate::mote::{LoadStats, Mote, RouterOutput};
use crate::nn::{batch_rows, Ctx, Init, ParamStore};
use crate::ppt::{ppt_forward, PptParams, PromptPrior};
use crate::rng::{stream, NoiseKey};
use crate::tensor::{Scalar, Tensor, Var};

use super::config::TrainConfig;

pub struct SegMote<T: Scalar> {
    pub config: TrainConfig,
    pub encoder: EncoderParams<T>,
    pub store: ParamStore<T>,
    pub decoder: DecoderParams,
    pub mote: Mote,
    pub ppt: Option<PptParams>,
}

/// Inputs of one forward pass; all prompts share a kind.
pub struct BatchInput<'a, T> {
    pub embeddings: Vec<&'a ImageEmbedding<T>>,
    pub prompts: Option<Vec<PromptInput>>,
    pub priors: Option<Vec<PromptPrior>>,
}

pub struct ForwardOutput<T> {
    /// `[B, H, W]`
    pub logits: Var,
    /// Mean of the per-layer balance losses.
    pub balance: Var,
    pub winner: Vec<usize>,
    /// Expert chosen for each image's winner token in the last layer.
    pub winner_expert: Vec<usize>,
    pub winner_confidence: Vec<f64>,
    pub routers: Vec<RouterOutput<T>>,
    pub stats: Vec<LoadStats>,
    /// Final token→image attention `[B·heads, L, HW]`.
    pub attention: Var,
    pub layout: TokenLayout,
    /// Head inputs: tokens and image state after the last layer, and the
    /// image positional encoding.
    pub head_tokens: TokenSequence,
    pub head_image: Var,
    pub image_pe: Var,
}

/// Router noise for one training step: `(seed, step)`.
#[derive(Clone, Copy, Debug)]
pub struct StepNoise {
    pub seed: u64,
    pub step: u64,
}

impl<T: Scalar> SegMote<T> {
    pub fn encoder_config(c: &TrainConfig) -> EncoderConfig {
        EncoderConfig { channels: 1, image_size: c.corpus.image_size, stride: c.stride, dim: c.dim, heads: c.heads }
    }

    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = init_frozen(Self::encoder_config(&config), config.encoder_seed)?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let dec_cfg = DecoderConfig {
            dim: config.dim,
            heads: config.heads,
            cross_dim: config.cross_dim,
            image_size: config.corpus.image_size,
            grid: config.corpus.image_size / config.stride,
            num_expert_tokens: config.num_expert_tokens,
        };
        let decoder = DecoderParams::new(&mut store, &mut init, dec_cfg)?;
        let mote = Mote::new(&mut store, &mut init, "mote", config.dim, config.mote)?;
        let ppt = if config.ppt_enabled {
            let mut pc = config.ppt;
            pc.num_classes = config.corpus.num_classes;
            Some(PptParams::new(&mut store, &mut init, config.dim, config.heads, pc)?)
        } else {
            None
        };
        Ok(Self { config, encoder, store, decoder, mote, ppt })
    }

    pub fn grid(&self) -> usize {
        self.decoder.config.grid
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, input: &BatchInput<'_, T>, noise: Option<StepNoise>) -> Result<ForwardOutput<T>> {
        let b = input.embeddings.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let d = self.config.dim;
        let cells = self.grid() * self.grid();
        let mut img = Vec::with_capacity(b * cells * d);
        for e in &input.embeddings {
            if e.tokens.shape() != [cells, d] {
                return Err(Error::Shape(format!("embedding {:?} does not match [{cells}, {d}]", e.tokens.shape())));
            }
            img.extend_from_slice(e.tokens.data());
        }
        let image = ctx.tape.constant(Tensor::new([b, cells, d], img)?);
        let image_pe = self.decoder.image_pe(ctx.tape, b)?;

        let prompt = match &input.prompts {
            Some(p) => {
                if p.len() != b {
                    return Err(Error::InvalidArgument(format!("{} prompts for a batch of {b}", p.len())));
                }
                Some(self.decoder.prompt_tokens(ctx, p)?)
            }
            None => None,
        };
        let feature = match (&self.ppt, &input.priors) {
            (Some(ppt), Some(priors)) => Some(ppt_forward(ctx, image, priors, ppt)?),
            (None, Some(_)) => return Err(Error::InvalidArgument("priors given to a model without feature tokens".into())),
            (Some(_), None) => return Err(Error::InvalidArgument("feature tokens need a prior per image".into())),
            (None, None) => None,
        };
        if prompt.is_none() && feature.is_none() {
            return Err(Error::InvalidArgument("no prompt tokens and no feature tokens".into()));
        }

        let out = ctx.p(self.decoder.output_tokens);
        let out = batch_rows(ctx.tape, out, b)?;
        let experts = ctx.p(self.decoder.expert_tokens);
        let experts = batch_rows(ctx.tape, experts, b)?;
        let mut seq = assemble_tokens(ctx.tape, out, prompt, feature, experts)?;

        let mut image_state = image;
        let mut routers = Vec::new();
        let mut stats = Vec::new();
        let mut balances = Vec::new();
        for (l, layer) in self.decoder.layers.iter().enumerate() {
            let key = noise.map(|n| NoiseKey { seed: n.seed, step: n.step, stream: stream::ROUTER_NOISE + l as u64 });
            let (s, im, m) = decoder_layer(ctx, &seq, image_state, image_pe, layer, &self.mote, key)?;
            seq = s;
            image_state = im;
            balances.push(m.balance);
            routers.push(m.router);
            stats.push(m.stats);
        }
        let last = routers.last().expect("two layers");
        let winner = last.winner.clone();
        let n = seq.layout.expert.len();
        let winner_expert: Vec<usize> = winner.iter().enumerate().map(|(i, &t)| last.expert_idx[i * n + t]).collect();
        let winner_confidence = winner.iter().enumerate().map(|(i, &t)| last.confidence.data()[i * n + t].f64()).collect();

        let pred = predict_mask(ctx, &seq, image_state, image_pe, &winner, &self.decoder)?;
        let mut balance = balances[0];
        for &bl in &balances[1..] {
            balance = ctx.tape.add(balance, bl)?;
        }
        let balance = ctx.tape.scale(balance, 1.0 / balances.len() as f64);
        Ok(ForwardOutput {
            logits: pred.logits,
            balance,
            winner,
            winner_expert,
            winner_confidence,
            routers,
            stats,
            attention: pred.attention,
            layout: seq.layout.clone(),
            head_tokens: seq,
            head_image: image_state,
            image_pe,
        })
    }
}
