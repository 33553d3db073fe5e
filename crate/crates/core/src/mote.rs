//! Mixture of token experts: noisy top-k routing of expert tokens to expert
//! branches, confidence weighting over tokens and the CV² balance loss.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Mlp, ParamId, ParamStore};
use crate::rng::NoiseKey;
use crate::tensor::{argmax, topk, Scalar, Tape, Tensor, Var};

/// Floor added to the learned noise scale.
pub const NOISE_EPS: f64 = 1e-2;
/// Guard on the squared mean inside CV².
pub const CV_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoteConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub noise_eps: f64,
    /// Replace the selection-count load with the normal-CDF selection probability.
    pub smooth_load: bool,
}

impl Default for MoteConfig {
    fn default() -> Self {
        Self { num_experts: 4, top_k: 1, noise_eps: NOISE_EPS, smooth_load: false }
    }
}

#[derive(Clone, Debug)]
pub struct RouterParams {
    pub w_g: ParamId,
    pub w_n: ParamId,
}

/// One expert branch: `D -> 2D -> D` MLP with GELU.
#[derive(Clone, Debug)]
pub struct ExpertBranch {
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Mote {
    pub config: MoteConfig,
    pub router: RouterParams,
    pub branches: Vec<ExpertBranch>,
}

impl Mote {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, config: MoteConfig) -> Result<Self> {
        let e = config.num_experts;
        if e == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if config.top_k == 0 || config.top_k > e {
            return Err(Error::Config(format!("top_k {} outside [1, {e}]", config.top_k)));
        }
        if config.noise_eps <= 0.0 {
            return Err(Error::Config("noise eps must be positive".into()));
        }
        let w_g = store.add(format!("{name}.router.w_gate"), init.gaussian(&[dim, e]), true);
        let w_n = store.add(format!("{name}.router.w_noise"), init.gaussian(&[dim, e]), true);
        let branches = (0..e)
            .map(|i| ExpertBranch { mlp: Mlp::new(store, init, &format!("{name}.expert{i}"), dim, 2 * dim, dim, true) })
            .collect();
        Ok(Self { config, router: RouterParams { w_g, w_n }, branches })
    }
}

/// Plain-data record of one routing call; token-major `[B, T, ..]` layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput<T> {
    pub clean_logits: Tensor<T>,
    pub noisy_logits: Tensor<T>,
    pub topk_scores: Tensor<T>,
    pub topk_indices: Vec<usize>,
    pub confidence: Tensor<T>,
    pub expert_idx: Vec<usize>,
    pub token_weight: Tensor<T>,
    pub dispatch_gates: Tensor<T>,
    pub winner: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadStats {
    pub importance: Vec<f64>,
    pub load: Vec<f64>,
    pub importance_cv2: f64,
    pub load_cv2: f64,
    pub balance: f64,
}

/// Top-k selection for every row of `[rows, E]` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing<T> {
    pub k: usize,
    pub scores: Vec<T>,
    pub indices: Vec<usize>,
    pub confidence: Vec<T>,
    pub expert_idx: Vec<usize>,
}

/// `L = X·W_g`.
pub fn compute_logits<T: Scalar>(tape: &mut Tape<T>, x: Var, w_g: Var) -> Result<Var> {
    tape.matmul(x, w_g)
}

/// `L + (softplus(X·W_n) + eps)∘Z` when a noise key is given, `L` itself otherwise.
/// Also returns the noise scale when noise was applied.
pub fn add_noise<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    x: Var,
    w_n: Var,
    eps: f64,
    noise: Option<NoiseKey>,
) -> Result<(Var, Option<Var>)> {
    let Some(key) = noise else {
        return Ok((logits, None));
    };
    let raw = tape.matmul(x, w_n)?;
    let sp = tape.softplus(raw);
    let std = tape.add_const(sp, eps);
    let shape = tape.shape(logits).to_vec();
    let z = tape.constant(key.normal(&shape));
    let scaled = tape.mul(std, z)?;
    Ok((tape.add(logits, scaled)?, Some(std)))
}

/// Top-k per row; confidence is the largest score and `expert_idx` its index.
pub fn route<T: Scalar>(logits: &Tensor<T>, k: usize) -> Result<Routing<T>> {
    let e = logits.last_dim();
    if k == 0 || k > e {
        return Err(Error::InvalidArgument(format!("k = {k} outside [1, {e}]")));
    }
    let rows = logits.numel() / e;
    let mut r = Routing {
        k,
        scores: Vec::with_capacity(rows * k),
        indices: Vec::with_capacity(rows * k),
        confidence: Vec::with_capacity(rows),
        expert_idx: Vec::with_capacity(rows),
    };
    for row in logits.data().chunks(e) {
        let (v, i) = topk(row, k)?;
        r.confidence.push(v[0]);
        r.expert_idx.push(i[0]);
        r.scores.extend(v);
        r.indices.extend(i);
    }
    Ok(r)
}

/// Softmax of confidences over the token axis of `[B, T]`, plus the
/// per-image argmax token.
pub fn token_weights<T: Scalar>(tape: &mut Tape<T>, confidence: Var) -> Result<(Var, Vec<usize>)> {
    let s = tape.shape(confidence).to_vec();
    if s.len() != 2 {
        return Err(Error::Shape(format!("confidence must be [B, T], got {s:?}")));
    }
    let winners = tape.value(confidence).data().chunks(s[1]).map(argmax).collect();
    Ok((tape.softmax(confidence), winners))
}

/// `z̃[b,t] = a[b,t] · h^{expert_idx[b,t]}(x[b,t])`.
pub fn apply_experts<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    expert_idx: &[usize],
    weights: Var,
    branches: &[ExpertBranch],
) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    let d = shape[shape.len() - 1];
    let rows = ctx.tape.value(x).rows();
    if expert_idx.len() != rows || expert_idx.iter().any(|&e| e >= branches.len()) {
        return Err(Error::InvalidArgument("expert index out of range".into()));
    }
    let flat = ctx.tape.reshape(x, &[rows, d])?;
    let mut acc: Option<Var> = None;
    for (e, branch) in branches.iter().enumerate() {
        let sel: Vec<usize> = (0..rows).filter(|&r| expert_idx[r] == e).collect();
        if sel.is_empty() {
            continue;
        }
        let xe = ctx.tape.gather_rows(flat, &sel)?;
        let he = branch.mlp.forward(ctx, xe)?;
        let placed = ctx.tape.scatter_rows(he, &sel, rows)?;
        acc = Some(match acc {
            Some(a) => ctx.tape.add(a, placed)?,
            None => placed,
        });
    }
    let h = acc.expect("at least one routed row");
    let z = ctx.tape.scale_rows(h, weights)?;
    ctx.tape.reshape(z, &shape)
}

/// Softmax over the `k` selected scores, scattered into `E` columns.
pub fn dispatch_gates<T: Scalar>(tape: &mut Tape<T>, scores: Var, indices: &[usize], num_experts: usize) -> Result<Var> {
    let g = tape.softmax(scores);
    tape.scatter_cols(g, indices, num_experts)
}

/// Squared coefficient of variation `popvar(v) / (mean(v)² + eps)`.
pub fn cv_squared<T: Scalar>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let m = tape.mean(v);
    let mb = tape.broadcast(m, &shape)?;
    let d = tape.sub(v, mb)?;
    let d2 = tape.mul(d, d)?;
    let var = tape.mean(d2);
    let m2 = tape.mul(m, m)?;
    let m2 = tape.add_const(m2, CV_EPS);
    tape.div(var, m2)
}

/// Inputs of the differentiable selection-probability load estimate.
pub struct SmoothLoad<'a, T> {
    pub clean: Var,
    pub noisy: Var,
    pub noise_std: Var,
    pub noisy_values: &'a Tensor<T>,
    pub k: usize,
}

/// Load as `Σ Φ((L − θ)/σ)`, with θ the k-th largest noisy logit among the
/// other experts of the same token.
fn smooth_load<T: Scalar>(tape: &mut Tape<T>, s: &SmoothLoad<'_, T>) -> Result<Var> {
    let e = s.noisy_values.last_dim();
    let rows = s.noisy_values.numel() / e;
    let mut thr_idx = Vec::with_capacity(rows * e);
    for row in s.noisy_values.data().chunks(e) {
        let (_, order) = topk(row, e)?;
        let mut rank = vec![0usize; e];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        for &r in &rank {
            // inside the top-k the threshold is the (k+1)-th value, else the k-th
            thr_idx.push(if r < s.k { order[s.k] } else { order[s.k - 1] });
        }
    }
    let clean = tape.reshape(s.clean, &[rows, e])?;
    let noisy = tape.reshape(s.noisy, &[rows, e])?;
    let std = tape.reshape(s.noise_std, &[rows, e])?;
    let thr = tape.gather_cols(noisy, &thr_idx, e)?;
    let diff = tape.sub(clean, thr)?;
    let z = tape.div(diff, std)?;
    let p = tape.normal_cdf(z);
    Ok(tape.sum_rows(p))
}

/// `CV²(imp) + CV²(load)` from `[rows, E]` dispatch gates. Without a smooth
/// estimator the load is the selection count, a constant on the tape.
pub fn balance_loss<T: Scalar>(
    tape: &mut Tape<T>,
    gates: Var,
    smooth: Option<SmoothLoad<'_, T>>,
) -> Result<(Var, LoadStats)> {
    let imp = tape.sum_rows(gates);
    let e = tape.value(gates).last_dim();
    let load = match smooth {
        Some(s) if s.k < e => smooth_load(tape, &s)?,
        _ => {
            let mut counts = vec![T::zero(); e];
            for row in tape.value(gates).data().chunks(e) {
                for (c, &g) in counts.iter_mut().zip(row) {
                    if g > T::zero() {
                        *c += T::one();
                    }
                }
            }
            tape.constant(Tensor::new([e], counts)?)
        }
    };
    let ci = cv_squared(tape, imp)?;
    let cl = cv_squared(tape, load)?;
    let bal = tape.add(ci, cl)?;
    let stats = LoadStats {
        importance: tape.value(imp).to_f64_vec(),
        load: tape.value(load).to_f64_vec(),
        importance_cv2: tape.value(ci).data()[0].f64(),
        load_cv2: tape.value(cl).data()[0].f64(),
        balance: tape.value(bal).data()[0].f64(),
    };
    Ok((bal, stats))
}

pub struct MoteOutput<T> {
    pub tokens: Var,
    pub balance: Var,
    pub router: RouterOutput<T>,
    pub stats: LoadStats,
}

/// Routes expert tokens `x: [B, T, D]` and returns the reweighted branch
/// outputs together with every routing artefact. `noise = None` is eval mode.
pub fn mote_forward<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, mote: &Mote, noise: Option<NoiseKey>) -> Result<MoteOutput<T>> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expert tokens must be [B, T, D], got {shape:?}")));
    }
    let (b, t) = (shape[0], shape[1]);
    let e = mote.config.num_experts;
    let k = mote.config.top_k;
    let rows = b * t;

    let w_g = ctx.p(mote.router.w_g);
    let w_n = ctx.p(mote.router.w_n);
    let clean = compute_logits(ctx.tape, x, w_g)?;
    let (noisy, std) = add_noise(ctx.tape, clean, x, w_n, mote.config.noise_eps, noise)?;
    let noisy_values = ctx.tape.value(noisy).clone();
    let routing = route(&noisy_values, k)?;

    let noisy_flat = ctx.tape.reshape(noisy, &[rows, e])?;
    let scores = ctx.tape.gather_cols(noisy_flat, &routing.indices, k)?;
    let conf = ctx.tape.gather_cols(noisy_flat, &routing.expert_idx, 1)?;
    let conf = ctx.tape.reshape(conf, &[b, t])?;
    let (weights, winner) = token_weights(ctx.tape, conf)?;

    let z = apply_experts(ctx, x, &routing.expert_idx, weights, &mote.branches)?;

    let gates = dispatch_gates(ctx.tape, scores, &routing.indices, e)?;
    let smooth = match (mote.config.smooth_load, std) {
        (true, Some(std)) => Some(SmoothLoad { clean, noisy, noise_std: std, noisy_values: &noisy_values, k }),
        _ => None,
    };
    let (balance, stats) = balance_loss(ctx.tape, gates, smooth)?;

    let tape = &*ctx.tape;
    let router = RouterOutput {
        clean_logits: tape.value(clean).clone(),
        noisy_logits: noisy_values,
        topk_scores: Tensor::new([b, t, k], routing.scores)?,
        topk_indices: routing.indices,
        confidence: tape.value(conf).clone(),
        expert_idx: routing.expert_idx,
        token_weight: tape.value(weights).clone(),
        dispatch_gates: tape.value(gates).clone().reshaped([b, t, e])?,
        winner,
    };
    Ok(MoteOutput { tokens: z, balance, router, stats })
}

/// One CSV row of routing statistics for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteRecord {
    pub modality: usize,
    pub sample_id: u64,
    pub winner_token: usize,
    pub winner_expert: usize,
    pub confidence: f64,
}

pub const ROUTE_CSV_HEADER: &str = "modality_id,sample_id,winner_token,expert_idx_of_winner,confidence";

impl RouteRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6}",
            self.modality, self.sample_id, self.winner_token, self.winner_expert, self.confidence
        )
    }
}
