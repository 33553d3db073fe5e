//! Frozen patch encoder producing the image embedding grid.

use crate::error::{Error, Result};
use crate::nn::{batch_rows, plain_layer_norm, Attention, Ctx, Init, Linear, Mlp, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels: usize,
    pub image_size: usize,
    pub stride: usize,
    pub dim: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.stride
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn: Attention,
    mlp: Mlp,
}

/// Patch projection, learned-shape position grid and two mixing blocks.
/// Every tensor is stored with `trainable = false`.
#[derive(Clone, Debug)]
pub struct EncoderParams<T: Scalar> {
    pub config: EncoderConfig,
    pub store: ParamStore<T>,
    patch: Linear,
    pos: crate::nn::ParamId,
    blocks: Vec<Block>,
}

/// Encoder output for one image: row-major cell features `[H'·W', D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding<T> {
    pub tokens: Tensor<T>,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> ImageEmbedding<T> {
    pub fn dim(&self) -> usize {
        self.tokens.last_dim()
    }

    /// Channel-first view `[D, H', W']`.
    pub fn grid(&self) -> Tensor<T> {
        let (n, d) = (self.h * self.w, self.dim());
        let src = self.tokens.data();
        let mut out = vec![T::zero(); n * d];
        for cell in 0..n {
            for c in 0..d {
                out[c * n + cell] = src[cell * d + c];
            }
        }
        Tensor::new([d, self.h, self.w], out).expect("grid shape")
    }
}

/// Builds encoder parameters from a Gaussian (std 0.02) stream seeded by `seed`.
pub fn init_frozen<T: Scalar>(config: EncoderConfig, seed: u64) -> Result<EncoderParams<T>> {
    if config.stride == 0 || !config.image_size.is_multiple_of(config.stride) {
        return Err(Error::Config(format!(
            "image size {} is not divisible by stride {}",
            config.image_size, config.stride
        )));
    }
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let (d, p) = (config.dim, config.stride);
    let patch = Linear::new_gaussian_bias(&mut store, &mut init, "encoder.patch", p * p * config.channels, d, false);
    let g = config.grid();
    let pos = store.add("encoder.pos", init.gaussian(&[g * g, d]), false);
    let mut blocks = Vec::new();
    for i in 0..2 {
        let name = format!("encoder.block{i}");
        let mut attn = Attention::new(&mut store, &mut init, &format!("{name}.attn"), d, d, config.heads, false)?;
        let mut mlp = Mlp::new(&mut store, &mut init, &format!("{name}.mlp"), d, 2 * d, d, false);
        // every tensor is Gaussian, biases included
        for lin in [&mut attn.q, &mut attn.k, &mut attn.v, &mut attn.o, &mut mlp.fc1, &mut mlp.fc2] {
            if let Some(b) = lin.b {
                let n = store.get(b).value.numel();
                store.get_mut(b).value = init.gaussian(&[n]);
            }
        }
        blocks.push(Block { attn, mlp });
    }
    Ok(EncoderParams { config, store, patch, pos, blocks })
}

impl<T: Scalar> EncoderParams<T> {
    pub fn checksum(&self) -> u64 {
        self.store.entries().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, e| {
            (h ^ e.value.checksum()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    fn patchify(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let c = self.config.channels;
        let p = self.config.stride;
        let mut data = Vec::new();
        for img in images {
            let s = img.shape();
            if s.len() != 3 || s[0] != c {
                return Err(Error::Shape(format!("expected [{c}, H, W] image, got {s:?}")));
            }
            let (h, w) = (s[1], s[2]);
            if h % p != 0 || w % p != 0 {
                return Err(Error::Shape(format!("image {h}x{w} is not divisible by stride {p}")));
            }
            if h != self.config.image_size || w != self.config.image_size {
                return Err(Error::Shape(format!(
                    "encoder built for {0}x{0} images, got {h}x{w}",
                    self.config.image_size
                )));
            }
            let src = img.data();
            for gy in 0..h / p {
                for gx in 0..w / p {
                    for ch in 0..c {
                        for dy in 0..p {
                            let row = ch * h * w + (gy * p + dy) * w + gx * p;
                            data.extend_from_slice(&src[row..row + p]);
                        }
                    }
                }
            }
        }
        let g = self.config.grid();
        Tensor::new([images.len(), g * g, p * p * c], data)
    }

    fn forward(&self, ctx: &mut Ctx<'_, T>, patches: Var) -> Result<Var> {
        let x = self.patch.forward(ctx, patches)?;
        let batch = ctx.tape.shape(x)[0];
        let pos = ctx.p(self.pos);
        let pos = batch_rows(ctx.tape, pos, batch)?;
        let mut x = ctx.tape.add(x, pos)?;
        for b in &self.blocks {
            let h = plain_layer_norm(ctx.tape, x)?;
            let (a, _) = b.attn.forward(ctx, h, h, h)?;
            x = ctx.tape.add(x, a)?;
            let h = plain_layer_norm(ctx.tape, x)?;
            let m = b.mlp.forward(ctx, h)?;
            x = ctx.tape.add(x, m)?;
        }
        plain_layer_norm(ctx.tape, x)
    }

    /// Embeds a batch of `[C, H, W]` images.
    pub fn encode_batch(&self, images: &[&Tensor<T>]) -> Result<Vec<ImageEmbedding<T>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let patches = self.patchify(images)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, false);
        let x = ctx.tape.constant(patches);
        let y = self.forward(&mut ctx, x)?;
        let out = tape.value(y);
        if !out.is_finite() {
            return Err(Error::NonFinite("encoder output".into()));
        }
        let g = self.config.grid();
        let per = g * g * self.config.dim;
        Ok(out
            .data()
            .chunks(per)
            .map(|c| ImageEmbedding {
                tokens: Tensor::new([g * g, self.config.dim], c.to_vec()).expect("embedding shape"),
                h: g,
                w: g,
            })
            .collect())
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<ImageEmbedding<T>> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig { channels: 1, image_size: 16, stride: 8, dim: 16, heads: 2 }
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let c = EncoderConfig { image_size: 20, ..cfg() };
        assert!(init_frozen::<f32>(c, 0).is_err());
        let enc = init_frozen::<f32>(cfg(), 0).unwrap();
        assert!(enc.encode(&Tensor::zeros([1, 12, 12])).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let enc = init_frozen::<f64>(cfg(), 4).unwrap();
        let a = Tensor::from_f64([1, 16, 16], &(0..256).map(|i| (i % 7) as f64 / 7.0).collect::<Vec<_>>()).unwrap();
        let b = Tensor::from_f64([1, 16, 16], &(0..256).map(|i| (i % 5) as f64 / 5.0).collect::<Vec<_>>()).unwrap();
        let both = enc.encode_batch(&[&a, &b]).unwrap();
        let single = enc.encode(&b).unwrap();
        for (x, y) in both[1].tokens.data().iter().zip(single.tokens.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_view_transposes() {
        let e = ImageEmbedding { tokens: Tensor::<f32>::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(), h: 1, w: 2 };
        assert_eq!(e.grid().data(), &[1., 4., 2., 5., 3., 6.]);
    }
}
