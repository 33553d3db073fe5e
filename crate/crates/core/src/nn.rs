//! Parameter storage and the small layers every module is built from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Standard deviation of every Gaussian-initialised weight.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, named collection of model tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Sets the trainable flag of every entry whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }
}

/// Binds stored parameters onto a tape lazily, once per forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    grads_enabled: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, grads_enabled: bool) -> Self {
        Self { tape, store, vars: vec![None; store.len()], grads_enabled }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let e = self.store.get(id);
        let v = self.tape.leaf(e.value.clone(), self.grads_enabled && e.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Parameters that were bound during this pass, with their tape handles.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

/// Seeded parameter initialiser; draw order defines the parameter values.
pub struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), normal: Normal::new(0.0, INIT_STD).expect("valid std") }
    }

    pub fn gaussian<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.normal.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("valid init shape")
    }

    /// Gaussian with standard deviation `std` instead of the default.
    pub fn gaussian_std<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let mut t: Tensor<T> = self.gaussian(shape);
        let s = T::of(std / INIT_STD);
        t.data_mut().iter_mut().for_each(|v| *v *= s);
        t
    }
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Gaussian weight and zero bias.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, din: usize, dout: usize, trainable: bool) -> Self {
        let w = store.add(format!("{name}.weight"), init.gaussian(&[din, dout]), trainable);
        let b = store.add(format!("{name}.bias"), Tensor::zeros([dout]), trainable);
        Self { w, b: Some(b) }
    }

    /// Weight only.
    pub fn new_no_bias<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, din: usize, dout: usize, trainable: bool) -> Self {
        let w = store.add(format!("{name}.weight"), init.gaussian(&[din, dout]), trainable);
        Self { w, b: None }
    }

    /// Weight and bias both Gaussian.
    pub fn new_gaussian_bias<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, din: usize, dout: usize, trainable: bool) -> Self {
        let w = store.add(format!("{name}.weight"), init.gaussian(&[din, dout]), trainable);
        let b = store.add(format!("{name}.bias"), init.gaussian(&[dout]), trainable);
        Self { w, b: Some(b) }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let y = ctx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, trainable: bool) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full([dim], T::one()), trainable);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([dim]), trainable);
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        ctx.tape.layer_norm(x, g, b)
    }
}

/// Parameter-free layer norm (unit gain, zero bias).
pub fn plain_layer_norm<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let d = tape.value(x).last_dim();
    let g = tape.constant(Tensor::full([d], T::one()));
    let b = tape.constant(Tensor::zeros([d]));
    tape.layer_norm(x, g, b)
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, din: usize, hidden: usize, dout: usize, trainable: bool) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), din, hidden, trainable),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dout, trainable),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

/// Multi-head scaled dot-product attention with an internal width that may
/// be smaller than the model width.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub internal: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        internal: usize,
        heads: usize,
        trainable: bool,
    ) -> Result<Self> {
        if heads == 0 || !internal.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: {heads} heads do not divide width {internal}")));
        }
        Ok(Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, internal, trainable),
            // a key bias shifts every logit of a query equally, so softmax ignores it
            k: Linear::new_no_bias(store, init, &format!("{name}.k"), dim, internal, trainable),
            v: Linear::new(store, init, &format!("{name}.v"), dim, internal, trainable),
            o: Linear::new(store, init, &format!("{name}.o"), internal, dim, trainable),
            heads,
            internal,
        })
    }

    fn split_heads<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let dh = self.internal / self.heads;
        let x = tape.reshape(x, &[b, t, self.heads, dh])?;
        let x = tape.permute_0213(x)?;
        tape.reshape(x, &[b * self.heads, t, dh])
    }

    /// `q_in: [B, Tq, D]`, `k_in`/`v_in: [B, Tk, D]`. Returns the projected
    /// output `[B, Tq, D]` and the attention weights `[B·H, Tq, Tk]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, q_in: Var, k_in: Var, v_in: Var) -> Result<(Var, Var)> {
        let (b, tq) = {
            let s = ctx.tape.shape(q_in);
            if s.len() != 3 {
                return Err(Error::Shape(format!("attention query must be [B, T, D], got {s:?}")));
            }
            (s[0], s[1])
        };
        let q = self.q.forward(ctx, q_in)?;
        let k = self.k.forward(ctx, k_in)?;
        let v = self.v.forward(ctx, v_in)?;
        let q = self.split_heads(ctx.tape, q)?;
        let k = self.split_heads(ctx.tape, k)?;
        let v = self.split_heads(ctx.tape, v)?;
        let dh = self.internal / self.heads;
        let scores = ctx.tape.bmm(q, k, true)?;
        let scores = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = ctx.tape.softmax(scores);
        let out = ctx.tape.bmm(attn, v, false)?;
        let out = ctx.tape.reshape(out, &[b, self.heads, tq, dh])?;
        let out = ctx.tape.permute_0213(out)?;
        let out = ctx.tape.reshape(out, &[b, tq, self.internal])?;
        let out = self.o.forward(ctx, out)?;
        Ok((out, attn))
    }
}

/// Sinusoidal 2-D positional encoding of normalised `(x, y)` coordinates.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    dim: usize,
    freqs: Vec<f64>,
}

impl PositionalEncoding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(4) {
            return Err(Error::Config(format!("positional encoding width {dim} must be a positive multiple of 4")));
        }
        let nf = dim / 4;
        // geometric ladder from 0.25 to 16 cycles per unit length
        let freqs = (0..nf)
            .map(|i| {
                let t = if nf > 1 { i as f64 / (nf - 1) as f64 } else { 0.0 };
                0.25 * 64f64.powf(t)
            })
            .collect();
        Ok(Self { dim, freqs })
    }

    /// Encoding of one point with coordinates in `[0, 1]`.
    pub fn encode_point(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for &f in &self.freqs {
            let a = 2.0 * std::f64::consts::PI * f * x;
            out.push(a.sin());
            out.push(a.cos());
        }
        for &f in &self.freqs {
            let a = 2.0 * std::f64::consts::PI * f * y;
            out.push(a.sin());
            out.push(a.cos());
        }
        out
    }

    /// Encodings of the cell centres of an `h × w` grid, row-major `[h·w, D]`.
    pub fn grid<T: Scalar>(&self, h: usize, w: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(h * w * self.dim);
        for r in 0..h {
            for c in 0..w {
                let (x, y) = ((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
                data.extend(self.encode_point(x, y).into_iter().map(T::of));
            }
        }
        Tensor::new([h * w, self.dim], data).expect("grid shape")
    }
}

/// Repeats a `[n, D]` parameter into a `[B, n, D]` batch.
pub fn batch_rows<T: Scalar>(tape: &mut Tape<T>, x: Var, batch: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let n = s[0];
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
    let g = tape.gather_rows(x, &idx)?;
    tape.reshape(g, &[batch, n, s[s.len() - 1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(3);
        let attn = Attention::new(&mut store, &mut init, "a", 8, 8, 2, true).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let q = ctx.tape.constant(init.gaussian(&[1, 3, 8]));
        let kv = ctx.tape.constant(init.gaussian(&[1, 1, 8]));
        let (out, w) = attn.forward(&mut ctx, q, kv, kv).unwrap();
        assert!(ctx.tape.value(w).data().iter().all(|&v| v == 1.0));
        // every query sees the same single value row
        let o = ctx.tape.value(out).data().to_vec();
        assert_eq!(o[0..8], o[8..16]);
        assert_eq!(o[0..8], o[16..24]);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(0);
        assert!(Attention::new(&mut store, &mut init, "a", 8, 6, 4, true).is_err());
    }

    #[test]
    fn positional_grid_is_bounded() {
        let pe = PositionalEncoding::new(16).unwrap();
        let g: Tensor<f64> = pe.grid(3, 5);
        assert_eq!(g.shape(), &[15, 16]);
        assert!(g.data().iter().all(|v| v.abs() <= 1.0));
        assert!(PositionalEncoding::new(10).is_err());
    }
}
