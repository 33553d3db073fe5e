//! Dice loss, the combined objective and the thresholded Dice metric.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_balance: f64,
    pub dice_smooth: f64,
    pub eval_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_balance: 0.01, dice_smooth: 1e-6, eval_threshold: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_balance.is_nan() || self.lambda_balance < 0.0 || self.dice_smooth.is_nan() || self.dice_smooth <= 0.0 {
            return Err(Error::Config("lambda_balance must be >= 0 and dice_smooth > 0".into()));
        }
        Ok(())
    }
}

/// `1 − (2Σpy + s)/(Σp + Σy + s)` per sample of `[B, ..]`, averaged over the batch.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, smooth: f64) -> Result<Var> {
    let (ps, ts) = (tape.shape(pred).to_vec(), tape.shape(target).to_vec());
    if ps != ts {
        return Err(Error::Shape(format!("dice_loss: prediction {ps:?} vs target {ts:?}")));
    }
    let b = ps[0];
    let n: usize = ps[1..].iter().product();
    let p = tape.reshape(pred, &[b, n])?;
    let y = tape.reshape(target, &[b, n])?;
    let py = tape.mul(p, y)?;
    let inter = tape.sum_last(py);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_const(num, smooth);
    let sp = tape.sum_last(p);
    let sy = tape.sum_last(y);
    let den = tape.add(sp, sy)?;
    let den = tape.add_const(den, smooth);
    let coef = tape.div(num, den)?;
    let mean = tape.mean(coef);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_const(neg, 1.0))
}

/// `L_seg + λ·L_balance`; rejects non-finite terms.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, seg: Var, balance: Var, cfg: &LossConfig) -> Result<Var> {
    for (name, v) in [("segmentation", seg), ("balance", balance)] {
        if !tape.value(v).is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    let scaled = tape.scale(balance, cfg.lambda_balance);
    tape.add(seg, scaled)
}

/// Dice of `sigmoid(logits) > threshold` against a binary target; both empty
/// counts as a perfect score.
pub fn dice_metric<T: Scalar>(logits: &[T], target: &[u8], threshold: f64) -> f64 {
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&l, &t) in logits.iter().zip(target) {
        let p = 1.0 / (1.0 + (-l.f64()).exp()) > threshold;
        let t = t != 0;
        np += p as usize;
        nt += t as usize;
        inter += (p && t) as usize;
    }
    if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    }
}
