//! Two-layer two-way mask decoder hosting output, prompt, feature and expert
//! tokens, with the winner-token mask head.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mote::{mote_forward, Mote, MoteOutput};
use crate::nn::{batch_rows, Attention, Ctx, Init, LayerNorm, Mlp, ParamId, ParamStore, PositionalEncoding};
use crate::rng::NoiseKey;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const NUM_OUTPUT_TOKENS: usize = 4;
pub const NUM_LAYERS: usize = 2;

/// Spans of each token segment inside the sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub output: Range<usize>,
    pub prompt: Range<usize>,
    pub feature: Range<usize>,
    pub expert: Range<usize>,
}

impl TokenLayout {
    pub fn new(output: usize, prompt: usize, feature: usize, expert: usize) -> Self {
        let a = output;
        let b = a + prompt;
        let c = b + feature;
        Self { output: 0..a, prompt: a..b, feature: b..c, expert: c..c + expert }
    }

    pub fn len(&self) -> usize {
        self.expert.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `[B, L, D]`
    pub tokens: Var,
    pub layout: TokenLayout,
}

impl TokenSequence {
    pub fn expert_span<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        tape.slice(self.tokens, self.layout.expert.start, self.layout.expert.len())
    }
}

/// Concatenates `[B, n_i, D]` segments in the order output, prompt, feature, expert.
pub fn assemble_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    output: Var,
    prompt: Option<Var>,
    feature: Option<Var>,
    expert: Var,
) -> Result<TokenSequence> {
    let lead = tape.shape(output).to_vec();
    if lead.len() != 3 {
        return Err(Error::Shape(format!("output tokens must be [B, n, D], got {lead:?}")));
    }
    let mut parts = vec![output];
    let mut sizes = [lead[1], 0, 0, 0];
    for (slot, part) in [(1, prompt), (2, feature), (3, Some(expert))] {
        if let Some(p) = part {
            let s = tape.shape(p);
            if s.len() != 3 || s[0] != lead[0] || s[2] != lead[2] {
                return Err(Error::Shape(format!("token segment {s:?} does not match {lead:?}")));
            }
            sizes[slot] = s[1];
            parts.push(p);
        }
    }
    let tokens = tape.concat(&parts)?;
    Ok(TokenSequence { tokens, layout: TokenLayout::new(sizes[0], sizes[1], sizes[2], sizes[3]) })
}

/// Geometric prompt in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PromptInput {
    Point { x: f64, y: f64 },
    Box { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl PromptInput {
    pub fn num_tokens(&self) -> usize {
        match self {
            PromptInput::Point { .. } => 1,
            PromptInput::Box { .. } => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    /// Internal width of the token/image cross-attentions.
    pub cross_dim: usize,
    pub image_size: usize,
    pub grid: usize,
    pub num_expert_tokens: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub ln_self: LayerNorm,
    pub token_to_image: Attention,
    pub ln_cross: LayerNorm,
    pub mlp: Mlp,
    pub ln_mlp: LayerNorm,
    pub ln_mote: LayerNorm,
    pub image_to_token: Attention,
    pub ln_image: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub output_tokens: ParamId,
    /// Learnable expert token bank `[N, D]`.
    pub expert_tokens: ParamId,
    pub point_embed: ParamId,
    pub corner_embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_attn: Attention,
    pub ln_final: LayerNorm,
    pub head: Mlp,
    pub pe: PositionalEncoding,
}

impl DecoderParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, config: DecoderConfig) -> Result<Self> {
        let d = config.dim;
        if config.num_expert_tokens == 0 {
            return Err(Error::Config("num_expert_tokens must be at least 1".into()));
        }
        let output_tokens = store.add("decoder.output_tokens", init.gaussian(&[NUM_OUTPUT_TOKENS, d]), true);
        let expert_tokens = store.add("mote.tokens", init.gaussian(&[config.num_expert_tokens, d]), true);
        let point_embed = store.add("decoder.prompt.point", init.gaussian(&[1, d]), true);
        let corner_embed = store.add("decoder.prompt.corners", init.gaussian(&[2, d]), true);
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        for l in 0..NUM_LAYERS {
            let n = format!("decoder.layer{l}");
            layers.push(DecoderLayer {
                self_attn: Attention::new(store, init, &format!("{n}.self_attn"), d, d, config.heads, true)?,
                ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), d, true),
                token_to_image: Attention::new(store, init, &format!("{n}.t2i"), d, config.cross_dim, config.heads, true)?,
                ln_cross: LayerNorm::new(store, &format!("{n}.ln_cross"), d, true),
                mlp: Mlp::new(store, init, &format!("{n}.mlp"), d, 2 * d, d, true),
                ln_mlp: LayerNorm::new(store, &format!("{n}.ln_mlp"), d, true),
                ln_mote: LayerNorm::new(store, &format!("{n}.ln_mote"), d, true),
                image_to_token: Attention::new(store, init, &format!("{n}.i2t"), d, config.cross_dim, config.heads, true)?,
                ln_image: LayerNorm::new(store, &format!("{n}.ln_image"), d, true),
            });
        }
        let final_attn = Attention::new(store, init, "decoder.final_t2i", d, config.cross_dim, config.heads, true)?;
        let ln_final = LayerNorm::new(store, "decoder.ln_final", d, true);
        let head = Mlp::new(store, init, "decoder.head", d, d, d, true);
        let pe = PositionalEncoding::new(d)?;
        Ok(Self {
            config,
            output_tokens,
            expert_tokens,
            point_embed,
            corner_embed,
            layers,
            final_attn,
            ln_final,
            head,
            pe,
        })
    }

    /// Positional encoding of the image grid, batched to `[B, HW, D]`.
    pub fn image_pe<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize) -> Result<Var> {
        let g = self.config.grid;
        let pe = tape.constant(self.pe.grid(g, g));
        batch_rows(tape, pe, batch)
    }

    /// Prompt tokens `[B, P, D]`; every prompt in the batch must be the same kind.
    pub fn prompt_tokens<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prompts: &[PromptInput]) -> Result<Var> {
        let b = prompts.len();
        let p = prompts.first().map(PromptInput::num_tokens).unwrap_or(0);
        if b == 0 || prompts.iter().any(|q| q.num_tokens() != p) {
            return Err(Error::InvalidArgument("a batch needs prompts of one kind".into()));
        }
        let s = self.config.image_size as f64;
        let d = self.config.dim;
        let mut coords = Vec::with_capacity(b * p * d);
        for q in prompts {
            let pts: Vec<(f64, f64)> = match *q {
                PromptInput::Point { x, y } => vec![(x, y)],
                PromptInput::Box { x0, y0, x1, y1 } => vec![(x0, y0), (x1, y1)],
            };
            for (x, y) in pts {
                coords.extend(self.pe.encode_point((x + 0.5) / s, (y + 0.5) / s).into_iter().map(T::of));
            }
        }
        let pe = ctx.tape.constant(Tensor::new([b * p, d], coords)?);
        let (table, idx): (Var, Vec<usize>) = if p == 1 {
            (ctx.p(self.point_embed), vec![0; b])
        } else {
            (ctx.p(self.corner_embed), (0..b).flat_map(|_| [0, 1]).collect())
        };
        let ty = ctx.tape.gather_rows(table, &idx)?;
        let tok = ctx.tape.add(pe, ty)?;
        ctx.tape.reshape(tok, &[b, p, d])
    }
}

/// One decoder layer: self-attention, token→image attention, MoTE on the
/// expert span with an MLP on the rest, then image→token attention.
pub fn decoder_layer<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    seq: &TokenSequence,
    image: Var,
    image_pe: Var,
    layer: &DecoderLayer,
    mote: &Mote,
    noise: Option<NoiseKey>,
) -> Result<(TokenSequence, Var, MoteOutput<T>)> {
    let t = seq.tokens;
    let (sa, _) = layer.self_attn.forward(ctx, t, t, t)?;
    let t = ctx.tape.add(t, sa)?;
    let t = layer.ln_self.forward(ctx, t)?;

    let keys = ctx.tape.add(image, image_pe)?;
    let (ca, _) = layer.token_to_image.forward(ctx, t, keys, image)?;
    let t = ctx.tape.add(t, ca)?;
    let t = layer.ln_cross.forward(ctx, t)?;

    let lay = &seq.layout;
    let rest = ctx.tape.slice(t, 0, lay.expert.start)?;
    let m = layer.mlp.forward(ctx, rest)?;
    let rest = ctx.tape.add(rest, m)?;
    let rest = layer.ln_mlp.forward(ctx, rest)?;
    let experts = ctx.tape.slice(t, lay.expert.start, lay.expert.len())?;
    let routed = mote_forward(ctx, experts, mote, noise)?;
    let experts = ctx.tape.add(experts, routed.tokens)?;
    let experts = layer.ln_mote.forward(ctx, experts)?;
    let t = ctx.tape.concat(&[rest, experts])?;

    let queries = ctx.tape.add(image, image_pe)?;
    let (ia, _) = layer.image_to_token.forward(ctx, queries, t, t)?;
    let image = ctx.tape.add(image, ia)?;
    let image = layer.ln_image.forward(ctx, image)?;

    Ok((TokenSequence { tokens: t, layout: seq.layout.clone() }, image, routed))
}

/// Head output for a batch.
pub struct MaskPrediction {
    /// `[B, H, W]`
    pub logits: Var,
    pub winner: Vec<usize>,
    /// Final token→image attention `[B·heads, L, HW]`.
    pub attention: Var,
}

/// `⟨w_b, image[b, cell]⟩` on the grid, bilinearly resized to `out × out`.
pub fn mask_logits<T: Scalar>(tape: &mut Tape<T>, w: Var, image: Var, grid: usize, out: usize) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    let (b, d) = (s[0], s[2]);
    let w = tape.reshape(w, &[b, d, 1])?;
    let l = tape.bmm(image, w, false)?;
    let l = tape.scale(l, 1.0 / (d as f64).sqrt());
    let l = tape.reshape(l, &[b, grid, grid])?;
    tape.upsample_bilinear(l, out, out)
}

/// Final token→image attention, then only the winner expert token of each
/// image feeds the head MLP whose output weights the image cells.
pub fn predict_mask<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    seq: &TokenSequence,
    image: Var,
    image_pe: Var,
    winner: &[usize],
    params: &DecoderParams,
) -> Result<MaskPrediction> {
    let s = ctx.tape.shape(seq.tokens).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    if winner.len() != b {
        return Err(Error::InvalidArgument(format!("{} winner ids for a batch of {b}", winner.len())));
    }
    if winner.iter().any(|&w| w >= seq.layout.expert.len()) {
        return Err(Error::InvalidArgument("winner id outside the expert span".into()));
    }
    let keys = ctx.tape.add(image, image_pe)?;
    let (fa, attention) = params.final_attn.forward(ctx, seq.tokens, keys, image)?;
    let t = ctx.tape.add(seq.tokens, fa)?;
    let t = params.ln_final.forward(ctx, t)?;
    let flat = ctx.tape.reshape(t, &[b * l, d])?;
    let rows: Vec<usize> = winner.iter().enumerate().map(|(i, &w)| i * l + seq.layout.expert.start + w).collect();
    let chosen = ctx.tape.gather_rows(flat, &rows)?;
    let w = params.head.forward(ctx, chosen)?;
    let logits = mask_logits(ctx.tape, w, image, params.config.grid, params.config.image_size)?;
    Ok(MaskPrediction { logits, winner: winner.to_vec(), attention })
}

/// Head-averaged attention of each expert token over the grid, `[N][H'·W']`.
pub fn expert_attention_maps<T: Scalar>(attention: &Tensor<T>, heads: usize, layout: &TokenLayout, sample: usize) -> Vec<Vec<f64>> {
    let s = attention.shape();
    let (l, n) = (s[1], s[2]);
    let data = attention.data();
    layout
        .expert
        .clone()
        .map(|tok| {
            let mut acc = vec![0.0; n];
            for h in 0..heads {
                let base = ((sample * heads + h) * l + tok) * n;
                for (a, &v) in acc.iter_mut().zip(&data[base..base + n]) {
                    *a += v.f64() / heads as f64;
                }
            }
            acc
        })
        .collect()
}

/// Writes one map as an 8-bit plain PGM scaled to its own maximum.
pub fn write_pgm(path: &Path, map: &[f64], h: usize, w: usize) -> Result<()> {
    let max = map.iter().copied().fold(0.0, f64::max);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "P2\n{w} {h}\n255")?;
    for row in map.chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let q = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                (q as u8).to_string()
            })
            .collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Writes one map as a CSV grid.
pub fn write_grid_csv(path: &Path, map: &[f64], w: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in map.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}
