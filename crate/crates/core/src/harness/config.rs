//! Run configuration and its flat `key = value` file format.
//!
//! ```text
//! # comment
//! seed = 0
//! train.steps = 2000
//! vit.pe_mode = cpe
//! score.novel_ids = 2, 9, 12, 17
//! ```
//!
//! Keys are dotted `section.field`; unknown keys and repeated keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::encoders::{ParamGroup, TextConfig, VitConfig};
use crate::error::{Error, Result};
use crate::losses::{FocalNormalize, LossConfig, LossKind};
use crate::pe::CpeConfig;
use crate::scoring::ScoreConfig;
use crate::synth;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub lr_backbone: f64,
    pub lr_text: f64,
    pub lr_temperature: f64,
    pub lr_head: f64,
    pub freeze_temperature: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 100,
            clip_norm: 1.0,
            lr_backbone: 1.0,
            lr_text: 1.0,
            lr_temperature: 1.0,
            lr_head: 1.0,
            freeze_temperature: false,
        }
    }
}

impl OptimConfig {
    pub fn multiplier(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Text => self.lr_text,
            ParamGroup::Temperature => self.lr_temperature,
            ParamGroup::Head => self.lr_head,
        }
    }

    /// Learning rate at `step` (0-based) after linear warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("optim.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("optim.weight_decay and optim.clip_norm must be >= 0".into()));
        }
        for g in ParamGroup::ALL {
            let m = self.multiplier(g);
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::Config(format!("optim.lr_mult.{} must be >= 0, got {m}", g.name())));
            }
        }
        Ok(())
    }
}

/// Detector-head training and evaluation on region tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionConfig {
    pub seed: u64,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    pub objects: usize,
    pub steps: usize,
    pub lr: f64,
    /// Learning-rate ratio of the image tower relative to the head.
    pub backbone_lr_mult: f64,
    pub freeze_backbone: bool,
    /// Background boxes sampled per training task.
    pub background_boxes: usize,
    pub roi_samples: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            seed: 1000,
            train_tasks: 200,
            eval_tasks: 100,
            objects: 3,
            steps: 1500,
            lr: 0.02,
            backbone_lr_mult: 0.1,
            freeze_backbone: false,
            background_boxes: 1,
            roi_samples: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub pairs: usize,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pairs: 100, ks: vec![1, 5] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub freeze_backbone: bool,
    /// Loss-trace steps averaged for the reported final loss.
    pub final_window: usize,
    pub vit: VitConfig,
    pub text: TextConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub score: ScoreConfig,
    pub region: RegionConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// The reference desk-scale run.
    fn default() -> Self {
        let novel: Vec<usize> = synth::NOVEL_CATEGORIES.to_vec();
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 8,
            freeze_backbone: false,
            final_window: 20,
            vit: VitConfig::default(),
            text: TextConfig { vocab_size: 64, max_len: 8, ..TextConfig::default() },
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            score: ScoreConfig::default().with_split(synth::base_categories(), novel),
            region: RegionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.final_window == 0 {
            return Err(Error::Config("train.final_window must be >= 1".into()));
        }
        self.vit.validate()?;
        self.text.validate()?;
        if self.vit.dim != self.text.dim {
            return Err(Error::Config(format!("vit.dim {} != text.dim {}", self.vit.dim, self.text.dim)));
        }
        if self.vit.image_size != synth::IMAGE_SIZE || self.vit.channels != synth::CHANNELS {
            return Err(Error::Config(format!(
                "synthetic images are {0}x{0}x{1}; vit.image_size must be {0}",
                synth::IMAGE_SIZE,
                synth::CHANNELS
            )));
        }
        if self.text.vocab_size < synth::MIN_VOCAB || self.text.max_len < synth::CAPTION_LEN {
            return Err(Error::Config(format!(
                "text needs vocab_size >= {} and max_len >= {}",
                synth::MIN_VOCAB,
                synth::CAPTION_LEN
            )));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        self.score.validate()?;
        let r = &self.region;
        if r.objects == 0 || r.objects > synth::MAX_REGION_OBJECTS || r.roi_samples == 0 {
            return Err(Error::Config(format!(
                "region.objects must be in 1..={} and region.roi_samples >= 1",
                synth::MAX_REGION_OBJECTS
            )));
        }
        if !(r.lr > 0.0) || !(r.backbone_lr_mult >= 0.0) {
            return Err(Error::Config("region.lr must be positive and region.backbone_lr_mult >= 0".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must list positive ranks".into()));
        }
        if self.eval.ks.iter().any(|&k| k > self.eval.pairs) {
            return Err(Error::Config(format!("eval.pairs {} is smaller than a requested K", self.eval.pairs)));
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        text.parse().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Render as a config file that parses back to `self`.
    pub fn to_config_string(&self) -> String {
        let ids = |s: &std::collections::BTreeSet<usize>| s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ");
        let o = &self.optim;
        let c = &self.vit.cpe;
        let r = &self.region;
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("train.steps = {}", self.steps),
            format!("train.batch_size = {}", self.batch_size),
            format!("train.freeze_backbone = {}", self.freeze_backbone),
            format!("train.final_window = {}", self.final_window),
            format!("vit.image_size = {}", self.vit.image_size),
            format!("vit.patch_size = {}", self.vit.patch_size),
            format!("vit.dim = {}", self.vit.dim),
            format!("vit.depth = {}", self.vit.depth),
            format!("vit.heads = {}", self.vit.heads),
            format!("vit.mlp_ratio = {}", self.vit.mlp_ratio),
            format!("vit.pe_mode = {}", self.vit.pe_mode),
            format!("cpe.upsample_size = {}", c.upsample_size),
            format!("cpe.scale_min = {:?}", c.scale_range.0),
            format!("cpe.scale_max = {:?}", c.scale_range.1),
            format!("cpe.aspect_min = {:?}", c.aspect_range.0),
            format!("cpe.aspect_max = {:?}", c.aspect_range.1),
            format!("cpe.out_size = {}", c.out_size),
            format!("cpe.max_rejection_attempts = {}", c.max_rejection_attempts),
            format!("text.vocab_size = {}", self.text.vocab_size),
            format!("text.max_len = {}", self.text.max_len),
            format!("text.dim = {}", self.text.dim),
            format!("text.depth = {}", self.text.depth),
            format!("text.heads = {}", self.text.heads),
            format!("text.mlp_ratio = {}", self.text.mlp_ratio),
            format!("loss.kind = {}", if self.loss.kind == LossKind::Softmax { "softmax" } else { "focal" }),
            format!("loss.gamma = {:?}", self.loss.gamma),
            format!(
                "loss.normalize = {}",
                if self.loss.normalize == FocalNormalize::PerQuery { "per_query" } else { "per_pair" }
            ),
            format!("optim.lr = {:?}", o.lr),
            format!("optim.momentum = {:?}", o.momentum),
            format!("optim.weight_decay = {:?}", o.weight_decay),
            format!("optim.warmup_steps = {}", o.warmup_steps),
            format!("optim.clip_norm = {:?}", o.clip_norm),
            format!("optim.lr_mult.backbone = {:?}", o.lr_backbone),
            format!("optim.lr_mult.text = {:?}", o.lr_text),
            format!("optim.lr_mult.temperature = {:?}", o.lr_temperature),
            format!("optim.lr_mult.head = {:?}", o.lr_head),
            format!("optim.freeze_temperature = {}", o.freeze_temperature),
            format!("score.alpha = {:?}", self.score.alpha),
            format!("score.beta = {:?}", self.score.beta),
            format!("score.delta = {:?}", self.score.delta),
            format!("score.tau_cls = {:?}", self.score.tau_cls),
            format!("score.base_ids = {}", ids(&self.score.base_ids)),
            format!("score.novel_ids = {}", ids(&self.score.novel_ids)),
            format!("region.seed = {}", r.seed),
            format!("region.train_tasks = {}", r.train_tasks),
            format!("region.eval_tasks = {}", r.eval_tasks),
            format!("region.objects = {}", r.objects),
            format!("region.steps = {}", r.steps),
            format!("region.lr = {:?}", r.lr),
            format!("region.backbone_lr_mult = {:?}", r.backbone_lr_mult),
            format!("region.freeze_backbone = {}", r.freeze_backbone),
            format!("region.background_boxes = {}", r.background_boxes),
            format!("region.roi_samples = {}", r.roi_samples),
            format!("eval.pairs = {}", self.eval.pairs),
            format!(
                "eval.ks = {}",
                self.eval.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", ")
            ),
        ];
        if let Some(bg) = self.score.background_id {
            lines.push(format!("score.background_id = {bg}"));
        }
        lines.push(String::new());
        lines.join("\n")
    }
}

/// Parse `key = value` lines into an ordered map, rejecting repeats.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
            return Err(Error::Config(format!("line {}: key {k} given twice", i + 1)));
        }
    }
    Ok(out)
}

fn parse_val<T: FromStr>(key: &str, line: usize, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value {v:?} for {key}")))
}

fn parse_list(key: &str, line: usize, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_val(key, line, p.trim())).collect()
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let mut cfg = RunConfig::default();
        // CPE defaults follow the patch grid unless set explicitly, so apply
        // every other key first.
        let (cpe_keys, rest): (Vec<_>, Vec<_>) = kv.iter().partition(|(k, _)| k.starts_with("cpe."));
        for (k, (line, v)) in rest {
            let line = *line;
            let f = |x: &str| -> Result<f64> { parse_val(k, line, x) };
            let u = |x: &str| -> Result<usize> { parse_val(k, line, x) };
            let b = |x: &str| -> Result<bool> { parse_val(k, line, x) };
            match k.as_str() {
                "seed" => cfg.seed = parse_val(k, line, v)?,
                "train.steps" => cfg.steps = u(v)?,
                "train.batch_size" => cfg.batch_size = u(v)?,
                "train.freeze_backbone" => cfg.freeze_backbone = b(v)?,
                "train.final_window" => cfg.final_window = u(v)?,
                "vit.image_size" => cfg.vit.image_size = u(v)?,
                "vit.patch_size" => cfg.vit.patch_size = u(v)?,
                "vit.dim" => cfg.vit.dim = u(v)?,
                "vit.depth" => cfg.vit.depth = u(v)?,
                "vit.heads" => cfg.vit.heads = u(v)?,
                "vit.mlp_ratio" => cfg.vit.mlp_ratio = u(v)?,
                "vit.pe_mode" => {
                    cfg.vit.pe_mode = v.parse().map_err(|e| Error::Config(format!("line {line}: {e}")))?
                }
                "text.vocab_size" => cfg.text.vocab_size = u(v)?,
                "text.max_len" => cfg.text.max_len = u(v)?,
                "text.dim" => cfg.text.dim = u(v)?,
                "text.depth" => cfg.text.depth = u(v)?,
                "text.heads" => cfg.text.heads = u(v)?,
                "text.mlp_ratio" => cfg.text.mlp_ratio = u(v)?,
                "loss.kind" => {
                    cfg.loss.kind = match v.as_str() {
                        "softmax" => LossKind::Softmax,
                        "focal" => LossKind::Focal,
                        _ => return Err(Error::Config(format!("line {line}: loss.kind must be softmax or focal"))),
                    }
                }
                "loss.gamma" => cfg.loss.gamma = f(v)?,
                "loss.normalize" => {
                    cfg.loss.normalize = match v.as_str() {
                        "per_query" => FocalNormalize::PerQuery,
                        "per_pair" => FocalNormalize::PerPair,
                        _ => return Err(Error::Config(format!("line {line}: loss.normalize must be per_query or per_pair"))),
                    }
                }
                "optim.lr" => cfg.optim.lr = f(v)?,
                "optim.momentum" => cfg.optim.momentum = f(v)?,
                "optim.weight_decay" => cfg.optim.weight_decay = f(v)?,
                "optim.warmup_steps" => cfg.optim.warmup_steps = u(v)?,
                "optim.clip_norm" => cfg.optim.clip_norm = f(v)?,
                "optim.lr_mult.backbone" => cfg.optim.lr_backbone = f(v)?,
                "optim.lr_mult.text" => cfg.optim.lr_text = f(v)?,
                "optim.lr_mult.temperature" => cfg.optim.lr_temperature = f(v)?,
                "optim.lr_mult.head" => cfg.optim.lr_head = f(v)?,
                "optim.freeze_temperature" => cfg.optim.freeze_temperature = b(v)?,
                "score.alpha" => cfg.score.alpha = f(v)?,
                "score.beta" => cfg.score.beta = f(v)?,
                "score.delta" => cfg.score.delta = f(v)?,
                "score.tau_cls" => cfg.score.tau_cls = f(v)?,
                "score.base_ids" => cfg.score.base_ids = parse_list(k, line, v)?.into_iter().collect(),
                "score.novel_ids" => cfg.score.novel_ids = parse_list(k, line, v)?.into_iter().collect(),
                "score.background_id" => cfg.score.background_id = Some(u(v)?),
                "region.seed" => cfg.region.seed = parse_val(k, line, v)?,
                "region.train_tasks" => cfg.region.train_tasks = u(v)?,
                "region.eval_tasks" => cfg.region.eval_tasks = u(v)?,
                "region.objects" => cfg.region.objects = u(v)?,
                "region.steps" => cfg.region.steps = u(v)?,
                "region.lr" => cfg.region.lr = f(v)?,
                "region.backbone_lr_mult" => cfg.region.backbone_lr_mult = f(v)?,
                "region.freeze_backbone" => cfg.region.freeze_backbone = b(v)?,
                "region.background_boxes" => cfg.region.background_boxes = u(v)?,
                "region.roi_samples" => cfg.region.roi_samples = u(v)?,
                "eval.pairs" => cfg.eval.pairs = u(v)?,
                "eval.ks" => cfg.eval.ks = parse_list(k, line, v)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {k}"))),
            }
        }
        if cfg.vit.patch_size > 0 {
            cfg.vit.cpe = CpeConfig::for_grid(cfg.vit.grid());
        }
        for (k, (line, v)) in cpe_keys {
            let line = *line;
            let f = |x: &str| -> Result<f64> { parse_val(k, line, x) };
            let u = |x: &str| -> Result<usize> { parse_val(k, line, x) };
            let c = &mut cfg.vit.cpe;
            match k.as_str() {
                "cpe.upsample_size" => c.upsample_size = u(v)?,
                "cpe.scale_min" => c.scale_range.0 = f(v)?,
                "cpe.scale_max" => c.scale_range.1 = f(v)?,
                "cpe.aspect_min" => c.aspect_range.0 = f(v)?,
                "cpe.aspect_max" => c.aspect_range.1 = f(v)?,
                "cpe.out_size" => c.out_size = u(v)?,
                "cpe.max_rejection_attempts" => c.max_rejection_attempts = u(v)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {k}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::PeMode;

    #[test]
    fn default_round_trips_through_text() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = cfg.to_config_string().parse().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg: RunConfig = "# reference\nseed = 7  # trailing\ntrain.steps=10\nloss.kind = softmax\nvit.pe_mode = sincos\n"
            .parse()
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.loss.kind, LossKind::Softmax);
        assert_eq!(cfg.vit.pe_mode, PeMode::Sincos);
    }

    #[test]
    fn cpe_follows_grid_unless_set() {
        let cfg: RunConfig = "vit.patch_size = 4\nvit.pe_mode = learnable\n".parse().unwrap();
        assert_eq!(cfg.vit.cpe.out_size, 8);
        assert_eq!(cfg.vit.cpe.upsample_size, 32);
        let cfg: RunConfig = "cpe.upsample_size = 40\n".parse().unwrap();
        assert_eq!(cfg.vit.cpe.upsample_size, 40);
        assert_eq!(cfg.vit.cpe.out_size, 4);
    }

    #[test]
    fn rejects_typos_repeats_and_bad_values() {
        for bad in [
            "train.stpes = 3",
            "seed = 1\nseed = 2",
            "train.batch_size = 0",
            "optim.lr = -1",
            "optim.lr = fast",
            "novalue",
            "loss.kind = hinge",
        ] {
            assert!(matches!(bad.parse::<RunConfig>(), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn warmup_is_linear() {
        let o = OptimConfig { lr: 1.0, warmup_steps: 4, ..OptimConfig::default() };
        let got: Vec<f64> = (0..6).map(|s| o.lr_at(s)).collect();
        assert_eq!(got, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }
}
