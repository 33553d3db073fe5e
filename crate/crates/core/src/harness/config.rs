//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::mote::MoteConfig;
use crate::ppt::PptConfig;
use crate::synth::CorpusSpec;
use crate::tensor::DType;

/// Prompt regime used while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPrompt {
    Point,
    Box,
    /// Point or box, drawn per step.
    Mixed,
    None,
}

impl TrainPrompt {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(Self::Point),
            "box" => Ok(Self::Box),
            "mixed" => Ok(Self::Mixed),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("prompt must be point, box, mixed or none, got `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Point => "point",
            Self::Box => "box",
            Self::Mixed => "mixed",
            Self::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub encoder_seed: u64,
    pub dtype: DType,
    pub epochs: usize,
    pub batch: usize,
    pub lr_init: f64,
    pub lr_halve_epochs: Vec<usize>,
    pub loss: LossConfig,
    pub mote: MoteConfig,
    pub num_expert_tokens: usize,
    pub ppt_enabled: bool,
    pub ppt: PptConfig,
    pub unfreeze_decoder: bool,
    pub warm_start_epochs: usize,
    pub dim: usize,
    pub heads: usize,
    pub cross_dim: usize,
    pub stride: usize,
    pub prompt: TrainPrompt,
    pub box_jitter: f64,
    /// Corpus directory; when absent the corpus is generated from `corpus`.
    pub data: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            encoder_seed: 1,
            dtype: DType::F32,
            epochs: 15,
            batch: 8,
            lr_init: 1e-4,
            lr_halve_epochs: vec![7, 12],
            loss: LossConfig::default(),
            mote: MoteConfig::default(),
            num_expert_tokens: 4,
            ppt_enabled: false,
            ppt: PptConfig::default(),
            unfreeze_decoder: true,
            warm_start_epochs: 3,
            dim: 256,
            heads: 8,
            cross_dim: 128,
            stride: 8,
            prompt: TrainPrompt::Mixed,
            box_jitter: 0.1,
            data: None,
            corpus: CorpusSpec::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value for `{key}`: `{v}`")))
}

impl TrainConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{raw}`", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::parse_str(&text)?;
        if let Some(d) = &c.data {
            if d.is_relative() {
                c.data = Some(path.parent().unwrap_or(Path::new(".")).join(d));
            }
        }
        Ok(c)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "seed" => self.seed = parse(k, v)?,
            "encoder_seed" => self.encoder_seed = parse(k, v)?,
            "dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("dtype must be f32 or f64, got `{v}`"))),
                }
            }
            "epochs" => self.epochs = parse(k, v)?,
            "batch" => self.batch = parse(k, v)?,
            "lr_init" => self.lr_init = parse(k, v)?,
            "lr_halve_epochs" => {
                self.lr_halve_epochs = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse(k, s.trim())).collect::<Result<_>>()?
                }
            }
            "lambda_balance" => self.loss.lambda_balance = parse(k, v)?,
            "dice_smooth" => self.loss.dice_smooth = parse(k, v)?,
            "eval_threshold" => self.loss.eval_threshold = parse(k, v)?,
            "num_experts" => self.mote.num_experts = parse(k, v)?,
            "num_expert_tokens" => self.num_expert_tokens = parse(k, v)?,
            "top_k" => self.mote.top_k = parse(k, v)?,
            "smooth_load" => self.mote.smooth_load = parse(k, v)?,
            "noise_eps" => self.mote.noise_eps = parse(k, v)?,
            "ppt.enabled" => self.ppt_enabled = parse(k, v)?,
            "ppt.num_queries" => self.ppt.num_queries = parse(k, v)?,
            "ppt.prior_mix" => self.ppt.prior_mix = parse(k, v)?,
            "unfreeze_decoder" => self.unfreeze_decoder = parse(k, v)?,
            "warm_start_epochs" => self.warm_start_epochs = parse(k, v)?,
            "dim" => self.dim = parse(k, v)?,
            "heads" => self.heads = parse(k, v)?,
            "cross_dim" => self.cross_dim = parse(k, v)?,
            "stride" => self.stride = parse(k, v)?,
            "prompt" => self.prompt = TrainPrompt::parse(v)?,
            "box_jitter" => self.box_jitter = parse(k, v)?,
            "data" => self.data = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "data.modalities" => self.corpus.modalities = parse(k, v)?,
            "data.samples" => self.corpus.samples_per_modality = parse(k, v)?,
            "data.seed" => self.corpus.seed = parse(k, v)?,
            "data.split" => self.corpus.split_ratio = parse(k, v)?,
            "data.image_size" => self.corpus.image_size = parse(k, v)?,
            "data.num_classes" => self.corpus.num_classes = parse(k, v)?,
            "data.multiclass" => self.corpus.multiclass = parse(k, v)?,
            "adam.beta1" => self.adam_beta1 = parse(k, v)?,
            "adam.beta2" => self.adam_beta2 = parse(k, v)?,
            "adam.eps" => self.adam_eps = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch == 0 || self.dim == 0 || self.heads == 0 {
            return fail("epochs, batch, dim and heads must be positive");
        }
        if self.lr_init.is_nan() || self.lr_init <= 0.0 {
            return fail("lr_init must be positive");
        }
        if self.lr_halve_epochs.iter().any(|&e| e == 0 || e >= self.epochs) {
            return fail("every lr_halve_epochs entry must lie in [1, epochs)");
        }
        if self.mote.num_experts == 0 || self.num_expert_tokens == 0 {
            return fail("num_experts and num_expert_tokens must be positive");
        }
        if self.mote.top_k == 0 || self.mote.top_k > self.mote.num_experts {
            return fail("top_k must lie in [1, num_experts]");
        }
        if self.mote.noise_eps.is_nan() || self.mote.noise_eps <= 0.0 {
            return fail("noise_eps must be positive");
        }
        if self.stride == 0 || !self.corpus.image_size.is_multiple_of(self.stride) {
            return fail("data.image_size must be divisible by stride");
        }
        if !self.dim.is_multiple_of(self.heads) || !self.cross_dim.is_multiple_of(self.heads) || !self.dim.is_multiple_of(4) {
            return fail("heads must divide dim and cross_dim, and dim must be a multiple of 4");
        }
        if self.ppt_enabled && self.corpus.multiclass {
            return fail("ppt applies to binary corpora only");
        }
        if self.prompt == TrainPrompt::None && !self.ppt_enabled {
            return fail("prompt = none needs ppt.enabled = true");
        }
        if !(0.0..=1.0).contains(&self.box_jitter) {
            return fail("box_jitter must lie in [0, 1]");
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0 && self.adam_eps > 0.0)
        {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        self.loss.validate()
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let halve: Vec<String> = self.lr_halve_epochs.iter().map(|e| e.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("encoder_seed", self.encoder_seed.to_string());
        kv("dtype", self.dtype.name().into());
        kv("epochs", self.epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("lr_init", format!("{:e}", self.lr_init));
        kv("lr_halve_epochs", halve.join(","));
        kv("lambda_balance", self.loss.lambda_balance.to_string());
        kv("dice_smooth", format!("{:e}", self.loss.dice_smooth));
        kv("eval_threshold", self.loss.eval_threshold.to_string());
        kv("num_experts", self.mote.num_experts.to_string());
        kv("num_expert_tokens", self.num_expert_tokens.to_string());
        kv("top_k", self.mote.top_k.to_string());
        kv("smooth_load", self.mote.smooth_load.to_string());
        kv("noise_eps", self.mote.noise_eps.to_string());
        kv("ppt.enabled", self.ppt_enabled.to_string());
        kv("ppt.num_queries", self.ppt.num_queries.to_string());
        kv("ppt.prior_mix", self.ppt.prior_mix.to_string());
        kv("unfreeze_decoder", self.unfreeze_decoder.to_string());
        kv("warm_start_epochs", self.warm_start_epochs.to_string());
        kv("dim", self.dim.to_string());
        kv("heads", self.heads.to_string());
        kv("cross_dim", self.cross_dim.to_string());
        kv("stride", self.stride.to_string());
        kv("prompt", self.prompt.name().into());
        kv("box_jitter", self.box_jitter.to_string());
        kv("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("data.modalities", self.corpus.modalities.to_string());
        kv("data.samples", self.corpus.samples_per_modality.to_string());
        kv("data.seed", self.corpus.seed.to_string());
        kv("data.split", self.corpus.split_ratio.to_string());
        kv("data.image_size", self.corpus.image_size.to_string());
        kv("data.num_classes", self.corpus.num_classes.to_string());
        kv("data.multiclass", self.corpus.multiclass.to_string());
        kv("adam.beta1", self.adam_beta1.to_string());
        kv("adam.beta2", self.adam_beta2.to_string());
        kv("adam.eps", format!("{:e}", self.adam_eps));
        s
    }

    /// Learning rate for 1-based `epoch`: halved once after each listed epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = self.lr_halve_epochs.iter().filter(|&&e| epoch > e).count();
        self.lr_init / f64::powi(2.0, halvings as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1), 1e-4);
        assert_eq!(c.lr_at(7), 1e-4);
        assert_eq!(c.lr_at(8), 5e-5);
        assert_eq!(c.lr_at(12), 5e-5);
        assert_eq!(c.lr_at(13), 2.5e-5);
        assert_eq!(c.lr_at(15), 2.5e-5);
    }

    #[test]
    fn text_round_trip() {
        let c = TrainConfig { ppt_enabled: true, prompt: TrainPrompt::None, lr_halve_epochs: vec![2, 3], ..TrainConfig::default() };
        assert_eq!(TrainConfig::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_comments() {
        assert!(TrainConfig::parse_str("bogus = 1").is_err());
        let c = TrainConfig::parse_str("# comment\nepochs = 3 # trailing\n\nlr_halve_epochs = 1,2\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(TrainConfig::parse_str("epochs = 3\nlr_halve_epochs = 3").is_err());
    }
}
