//! Contrastive pretraining loop on synthetic pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::optim::Sgd;
use crate::autodiff::Tape;
use crate::encoders::{DualEncoder, ParamGroup};
use crate::error::{Error, Result};
use crate::losses::total_contrastive_loss;
use crate::synth::{gen_base_pair, SyntheticPair};

/// Training pair seeds are drawn from `0..TRAIN_SEED_SPAN`; held-out pairs
/// start at `HELD_OUT_SEED_BASE`, so the two never collide.
pub const TRAIN_SEED_SPAN: u64 = 1 << 40;
pub const HELD_OUT_SEED_BASE: u64 = 1 << 41;

const DATA_STREAM: u64 = 0x5eed_da7a;
const CROP_STREAM: u64 = 0xc0_0b;

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: DualEncoder,
    /// Total loss evaluated before each update.
    pub trace: Vec<f64>,
    pub tau_trace: Vec<f64>,
}

impl PretrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.trace.first().copied().unwrap_or(f64::NAN)
    }

    /// Mean of the last `window` recorded losses.
    pub fn final_loss(&self, window: usize) -> f64 {
        let n = window.clamp(1, self.trace.len().max(1));
        let tail = &self.trace[self.trace.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// `n` held-out pairs over the base categories.
pub fn held_out_pairs(n: usize) -> Vec<SyntheticPair> {
    (0..n as u64).map(|i| gen_base_pair(HELD_OUT_SEED_BASE + i)).collect()
}

pub fn trainable_groups(cfg: &RunConfig) -> impl Fn(ParamGroup) -> bool {
    let freeze_bb = cfg.freeze_backbone;
    let freeze_tau = cfg.optim.freeze_temperature;
    move |g| match g {
        ParamGroup::Backbone => !freeze_bb,
        ParamGroup::Temperature => !freeze_tau,
        _ => true,
    }
}

/// Fresh model from `cfg`, then [`pretrain_model`].
pub fn pretrain(cfg: &RunConfig, on_step: impl FnMut(usize, f64)) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let model = DualEncoder::new(cfg.vit.clone(), cfg.text.clone(), cfg.seed)?;
    pretrain_model(cfg, model, on_step)
}

/// Run `cfg.steps` updates. Output is a pure function of `(cfg, model)`.
pub fn pretrain_model(cfg: &RunConfig, mut model: DualEncoder, mut on_step: impl FnMut(usize, f64)) -> Result<PretrainOutcome> {
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ CROP_STREAM);
    let mut opt = Sgd::new(cfg.optim.clone());
    let trainable = trainable_groups(cfg);
    let mode = cfg.vit.pe_mode;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut tau_trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<SyntheticPair> = (0..cfg.batch_size)
            .map(|_| gen_base_pair(data_rng.gen_range(0..TRAIN_SEED_SPAN)))
            .collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &trainable);
        let mut img_rows = Vec::with_capacity(batch.len());
        let mut txt_rows = Vec::with_capacity(batch.len());
        for p in &batch {
            let rng: Option<&mut dyn rand::RngCore> = if mode.needs_rng() { Some(&mut crop_rng) } else { None };
            img_rows.push(model.image_forward(&mut tape, &bound, &p.image, mode, rng)?);
            txt_rows.push(model.text_forward(&mut tape, &bound, &p.tokens)?);
        }
        let v = tape.concat_rows(&img_rows)?;
        let l = tape.concat_rows(&txt_rows)?;
        let tau = model.temperature(&mut tape, &bound);
        let loss = total_contrastive_loss(&mut tape, v, l, tau, &cfg.loss)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, detail: format!("loss is {value}") });
        }
        trace.push(value);
        tau_trace.push(model.tau());
        on_step(step, value);
        let mut grads = tape.backward(loss)?;
        opt.step(&mut model.params, &bound, &mut grads, step)?;
    }
    Ok(PretrainOutcome { model, trace, tau_trace })
}

/// `model.ckpt`, `loss_trace.csv` and `config.txt` under `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, outcome: &PretrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    outcome.model.save(dir.join("model.ckpt"))?;
    let mut w = csv::Writer::from_path(dir.join("loss_trace.csv"))?;
    w.write_record(["step", "loss", "tau"])?;
    for (i, (l, t)) in outcome.trace.iter().zip(&outcome.tau_trace).enumerate() {
        w.write_record([i.to_string(), format!("{l:?}"), format!("{t:?}")])?;
    }
    w.flush()?;
    let mut f = fs::File::create(dir.join("config.txt"))?;
    f.write_all(cfg.to_config_string().as_bytes())?;
    Ok(())
}
