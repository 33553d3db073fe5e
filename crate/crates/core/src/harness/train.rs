//! Training loop, evaluation and the run report.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{dice_loss, dice_metric, total_loss};
use crate::mote::{LoadStats, RouteRecord, RouterOutput, ROUTE_CSV_HEADER};
use crate::nn::{Ctx, ParamId};
use crate::rng::{keyed_rng, stream};
use crate::synth::{Corpus, PromptKind};
use crate::tensor::{Scalar, Tape, Tensor};

use super::config::{TrainConfig, TrainPrompt};
use super::data::{eval_batch, geometric_prompts, train_priors, Prepared};
use super::model::{BatchInput, SegMote, StepNoise};
use super::optim::Adam;
use super::stats::{route_stats, RouteStats};

pub const EVAL_BATCH: usize = 16;
/// Parameters frozen after warm start when `unfreeze_decoder = false`.
pub const WARM_START_ONLY: [&str; 2] = ["decoder.output_tokens", "decoder.head"];

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub l_seg: f64,
    pub l_balance: f64,
    pub l_total: f64,
    pub importance_cv2: f64,
    pub load_cv2: f64,
    /// Per-expert count of noisy top-1 assignments over all layers.
    pub assignments: Vec<usize>,
}

fn mean_stats(stats: &[LoadStats]) -> (f64, f64) {
    let n = stats.len() as f64;
    (
        stats.iter().map(|s| s.importance_cv2).sum::<f64>() / n,
        stats.iter().map(|s| s.load_cv2).sum::<f64>() / n,
    )
}

fn describe_routing(stats: &[LoadStats]) -> String {
    let mut s = String::new();
    for (l, st) in stats.iter().enumerate() {
        let _ = write!(
            s,
            "; layer {l}: importance {:?}, load {:?}, balance {}",
            st.importance, st.load, st.balance
        );
    }
    s
}

/// Forward, backward and one Adam update. Parameters whose names start with
/// an entry of `frozen` are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    model: &mut SegMote<T>,
    adam: &mut Adam,
    input: &BatchInput<'_, T>,
    targets: Tensor<T>,
    lr: f64,
    noise: Option<StepNoise>,
    frozen: &[&str],
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let (result, grads) = {
        let mut ctx = Ctx::new(&mut tape, &model.store, true);
        let out = model.forward(&mut ctx, input, noise)?;
        let probs = ctx.tape.sigmoid(out.logits);
        let target = ctx.tape.constant(targets);
        let seg = dice_loss(ctx.tape, probs, target, model.config.loss.dice_smooth)?;
        let total = total_loss(ctx.tape, seg, out.balance, &model.config.loss).map_err(|e| {
            Error::NonFinite(format!("{e} at lr {lr}{}", describe_routing(&out.stats)))
        })?;
        ctx.tape.backward(total)?;
        let (ic, lc) = mean_stats(&out.stats);
        let v = |x| ctx.tape.value(x).data()[0].f64();
        let mut assignments = vec![0; model.config.mote.num_experts];
        for r in &out.routers {
            for &e in &r.expert_idx {
                assignments[e] += 1;
            }
        }
        let result = StepResult { l_seg: v(seg), l_balance: v(out.balance), l_total: v(total), importance_cv2: ic, load_cv2: lc, assignments };
        let bound: Vec<(ParamId, crate::tensor::Var)> = ctx.bound().collect();
        let grads: Vec<(ParamId, Vec<T>)> = bound
            .into_iter()
            .filter(|(id, _)| {
                let e = model.store.get(*id);
                e.trainable && !frozen.iter().any(|p| e.name.starts_with(p))
            })
            .filter_map(|(id, v)| ctx.tape.grad(v).map(|g| (id, g.to_vec())))
            .collect();
        (result, grads)
    };
    if let Some((id, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of `{}`", model.store.get(*id).name)));
    }
    adam.update(&mut model.store, &grads, lr);
    Ok(result)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_seg: f64,
    pub l_balance: f64,
    pub l_total: f64,
    pub importance_cv2: f64,
    pub load_cv2: f64,
    /// Training-time top-1 assignments per expert, summed over the epoch.
    pub assignments: Vec<usize>,
}

impl EpochRecord {
    pub fn assignment_shares(&self) -> Vec<f64> {
        let total: usize = self.assignments.iter().sum();
        self.assignments.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub id: u64,
    pub modality: usize,
    pub dice: f64,
    pub winner: usize,
    pub winner_expert: usize,
    pub confidence: f64,
    /// Per-expert count of expert tokens routed there, summed over layers.
    pub assignments: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub prompt: PromptKind,
    pub samples: Vec<SampleResult>,
    /// `(modality, samples, mean dice)`
    pub per_modality: Vec<(usize, usize, f64)>,
    pub overall: f64,
}

impl EvalReport {
    pub fn route_records(&self) -> Vec<RouteRecord> {
        self.samples
            .iter()
            .map(|s| RouteRecord {
                modality: s.modality,
                sample_id: s.id,
                winner_token: s.winner,
                winner_expert: s.winner_expert,
                confidence: s.confidence,
            })
            .collect()
    }

    pub fn dice_csv(&self) -> String {
        let mut s = String::from("modality,samples,dice\n");
        for (m, n, d) in &self.per_modality {
            let _ = writeln!(s, "{m},{n},{d:.8}");
        }
        let _ = writeln!(s, "all,{},{:.8}", self.samples.len(), self.overall);
        s
    }
}

/// Noise-free forward over one split, in manifest order.
pub fn evaluate<T: Scalar>(model: &SegMote<T>, corpus: &Corpus, prep: &Prepared<T>, train_split: bool, kind: PromptKind) -> Result<EvalReport> {
    let idx = corpus.split(train_split);
    let size = model.config.corpus.image_size;
    let threshold = model.config.loss.eval_threshold;
    let mut samples = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let input = eval_batch(model, corpus, prep, chunk, kind)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.store, false);
        let out = model.forward(&mut ctx, &input, None)?;
        let logits = ctx.tape.value(out.logits);
        if !logits.is_finite() {
            return Err(Error::NonFinite("evaluation logits".into()));
        }
        for (j, &i) in chunk.iter().enumerate() {
            let l = &logits.data()[j * size * size..(j + 1) * size * size];
            samples.push(SampleResult {
                id: corpus.entries[i].id,
                modality: corpus.entries[i].modality,
                dice: dice_metric(l, &prep.masks[i], threshold),
                winner: out.winner[j],
                winner_expert: out.winner_expert[j],
                confidence: out.winner_confidence[j],
                assignments: assignment_counts(&out.routers, j, model.config.mote.num_experts),
            });
        }
    }
    samples.sort_by_key(|s| s.id);
    let mods = corpus.spec.modalities;
    let per_modality = (0..mods)
        .filter_map(|m| {
            let d: Vec<f64> = samples.iter().filter(|s| s.modality == m).map(|s| s.dice).collect();
            (!d.is_empty()).then(|| (m, d.len(), d.iter().sum::<f64>() / d.len() as f64))
        })
        .collect();
    let overall = if samples.is_empty() { 0.0 } else { samples.iter().map(|s| s.dice).sum::<f64>() / samples.len() as f64 };
    Ok(EvalReport { prompt: kind, samples, per_modality, overall })
}

fn assignment_counts<T: Scalar>(routers: &[RouterOutput<T>], image: usize, experts: usize) -> Vec<usize> {
    let mut counts = vec![0; experts];
    for r in routers {
        let n = r.expert_idx.len() / r.winner.len();
        for &e in &r.expert_idx[image * n..(image + 1) * n] {
            counts[e] += 1;
        }
    }
    counts
}

/// Prompt kind used to score a model trained under `prompt`.
pub fn eval_prompt(cfg: &TrainConfig) -> PromptKind {
    match cfg.prompt {
        TrainPrompt::Point => PromptKind::Point,
        TrainPrompt::Box | TrainPrompt::Mixed => PromptKind::Box,
        TrainPrompt::None => PromptKind::None,
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub eval: EvalReport,
    pub routes: RouteStats,
    pub encoder_checksum_before: u64,
    pub encoder_checksum_after: u64,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,lr,l_seg,l_balance,l_total,importance_cv2,load_cv2");
        for i in 0..self.epochs.first().map_or(0, |e| e.assignments.len()) {
            let _ = write!(s, ",assigned{i}");
        }
        s.push('\n');
        for e in &self.epochs {
            let _ = write!(
                s,
                "{},{},{:.8},{:.8},{:.8},{:.8},{:.8}",
                e.epoch, e.lr, e.l_seg, e.l_balance, e.l_total, e.importance_cv2, e.load_cv2
            );
            for c in &e.assignments {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    pub fn routes_csv(&self) -> String {
        let mut s = String::from(ROUTE_CSV_HEADER);
        s.push('\n');
        for r in self.eval.route_records() {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// Writes the CSV reports; wall-clock time goes to a separate file so the
    /// CSVs of identical runs stay byte-identical.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("epochs.csv"), self.epochs_csv())?;
        std::fs::write(dir.join("dice.csv"), self.eval.dice_csv())?;
        std::fs::write(dir.join("winners.csv"), self.routes.winners_csv())?;
        std::fs::write(dir.join("experts.csv"), self.routes.experts_csv())?;
        std::fs::write(dir.join("assignments.csv"), self.routes.assignments_csv())?;
        std::fs::write(dir.join("routes.csv"), self.routes_csv())?;
        std::fs::write(dir.join("timing.txt"), format!("wall_clock_secs={:.3}\n", self.wall_clock_secs))?;
        Ok(())
    }
}

/// Trains a fresh model on the train split and scores it on the test split.
pub fn train<T: Scalar>(cfg: TrainConfig, corpus: &Corpus, mut log: impl FnMut(&str)) -> Result<(SegMote<T>, RunReport)> {
    let start = Instant::now();
    let mut model = SegMote::<T>::new(cfg)?;
    let cfg = model.config.clone();
    let before = model.encoder.checksum();
    let prep = Prepared::new(&model, corpus)?;
    let size = cfg.corpus.image_size;
    let mut train_idx = corpus.split(true);
    if train_idx.is_empty() {
        return Err(Error::Corpus("empty training split".into()));
    }
    let mut adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let frozen: &[&str] = if !cfg.unfreeze_decoder && epoch > cfg.warm_start_epochs { &WARM_START_ONLY } else { &[] };
        train_idx.sort_unstable();
        train_idx.shuffle(&mut keyed_rng(cfg.seed, epoch as u64, stream::SHUFFLE));
        let mut acc = [0.0f64; 5];
        let mut steps = 0usize;
        let mut assignments = vec![0usize; cfg.mote.num_experts];
        for chunk in train_idx.chunks(cfg.batch) {
            step += 1;
            let mut rng = keyed_rng(cfg.seed, step, stream::PROMPTS);
            let kind = match cfg.prompt {
                TrainPrompt::Point => PromptKind::Point,
                TrainPrompt::Box => PromptKind::Box,
                TrainPrompt::Mixed => {
                    if rng.random::<bool>() {
                        PromptKind::Point
                    } else {
                        PromptKind::Box
                    }
                }
                TrainPrompt::None => PromptKind::None,
            };
            let prompts = geometric_prompts(corpus, chunk, kind, model.grid(), cfg.box_jitter, &mut rng);
            let priors = model.ppt.as_ref().map(|_| train_priors(cfg.seed, step, corpus, &prep.lowres, chunk, cfg.ppt.prior_mix));
            let input = BatchInput { embeddings: chunk.iter().map(|&i| &prep.embeddings[i]).collect(), prompts, priors };
            let targets = prep.targets(chunk, size);
            let r = train_step(&mut model, &mut adam, &input, targets, lr, Some(StepNoise { seed: cfg.seed, step }), frozen)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, step {step}: {m}")),
                    other => other,
                })?;
            for (a, v) in acc.iter_mut().zip([r.l_seg, r.l_balance, r.l_total, r.importance_cv2, r.load_cv2]) {
                *a += v;
            }
            for (a, c) in assignments.iter_mut().zip(&r.assignments) {
                *a += c;
            }
            steps += 1;
        }
        let n = steps as f64;
        let rec = EpochRecord {
            epoch,
            lr,
            l_seg: acc[0] / n,
            l_balance: acc[1] / n,
            l_total: acc[2] / n,
            importance_cv2: acc[3] / n,
            load_cv2: acc[4] / n,
            assignments,
        };
        log(&format!(
            "epoch {epoch:>2}  lr {lr:.2e}  seg {:.4}  balance {:.4}  total {:.4}  imp_cv2 {:.4}",
            rec.l_seg, rec.l_balance, rec.l_total, rec.importance_cv2
        ));
        epochs.push(rec);
    }
    let eval = evaluate(&model, corpus, &prep, false, eval_prompt(&cfg))?;
    let routes = route_stats(&eval.samples, cfg.corpus.modalities, cfg.num_expert_tokens, cfg.mote.num_experts);
    let after = model.encoder.checksum();
    let report = RunReport {
        epochs,
        eval,
        routes,
        encoder_checksum_before: before,
        encoder_checksum_after: after,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
