//! Region-level evaluation: train a detector head on base categories, then
//! classify ground-truth boxes over base and held-out categories with fused
//! VLM and detector scores.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{OptimConfig, RunConfig};
use super::optim::Sgd;
use crate::autodiff::{Tape, Var};
use crate::encoders::{Bound, DualEncoder, Linear, ParamGroup, ParamId, ParamStore, NORM_EPS};
use crate::error::{Error, Result};
use crate::scoring::{
    normalized_layer_on_tape, region_embed_on_tape, region_embed_with, softmax, vlm_scores, CategoryScores, RegionBox,
    ScoreConfig, DEFAULT_EPS,
};
use crate::synth::{self, gen_region_task_from, RegionTask, NUM_CATEGORIES, NUM_POSITIONS, POSITION_TOKEN_BASE};
use crate::tensor::Tensor;

const EVAL_TASK_OFFSET: u64 = 1 << 32;

/// Unit-norm text embedding per category: captions averaged over every
/// position bin, then renormalized. Row `c` is category `c`.
pub fn category_text_embeddings(model: &DualEncoder) -> Result<Tensor> {
    let d = model.text.dim;
    let mut data = Vec::with_capacity(NUM_CATEGORIES * d);
    for c in 0..NUM_CATEGORIES {
        let (shape, color) = synth::category_parts(c)?;
        let mut acc = vec![0.0; d];
        for pos in 0..NUM_POSITIONS {
            let toks = [
                synth::SHAPE_TOKEN_BASE + shape.index(),
                synth::COLOR_TOKEN_BASE + color.index(),
                POSITION_TOKEN_BASE + pos,
            ];
            for (a, v) in acc.iter_mut().zip(model.embed_text(&toks)?) {
                *a += v;
            }
        }
        let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        data.extend(acc.into_iter().map(|v| v / n));
    }
    Tensor::matrix(NUM_CATEGORIES, d, data)
}

/// Residual projection on region embeddings followed by a normalized layer
/// against fixed category text embeddings plus a learned background row.
#[derive(Clone, Debug)]
pub struct DetectorHead {
    pub params: ParamStore,
    proj: Linear,
    background: ParamId,
    background_bias: ParamId,
    pub tau_cls: f64,
}

impl DetectorHead {
    pub fn new(dim: usize, tau_cls: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let proj = Linear::new(&mut params, &mut rng, "head.proj", dim, dim, ParamGroup::Head, true);
        let bg: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let background = params.add("head.background", Tensor::matrix(1, dim, bg).expect("dim > 0"), ParamGroup::Head);
        let background_bias = params.add("head.background_bias", Tensor::scalar(0.0), ParamGroup::Head);
        Self { params, proj, background, background_bias, tau_cls }
    }

    /// `N x (C + 1)` logits for `N x D` region rows against `C x D` class
    /// rows; the last column is background.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, regions: Var, classes: &Tensor) -> Result<Var> {
        let delta = self.proj.forward(tape, bound, regions)?;
        let h = tape.add(regions, delta)?;
        let cls = tape.constant(classes.clone());
        let w = tape.concat_rows(&[cls, bound.var(self.background)])?;
        let zeros = tape.constant(Tensor::zeros(&[1, classes.rows()]));
        let bgb = tape.reshape(bound.var(self.background_bias), &[1, 1])?;
        let b = tape.concat_cols(&[zeros, bgb])?;
        normalized_layer_on_tape(tape, h, w, b, self.tau_cls, DEFAULT_EPS)
    }

    /// Softmax probabilities for a single region embedding.
    pub fn probabilities(&self, region: &[f64], classes: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let r = tape.constant(Tensor::matrix(1, region.len(), region.to_vec())?);
        let l = self.logits(&mut tape, &bound, r, classes)?;
        Ok(softmax(tape.value(l).data()))
    }
}

fn rows_of(t: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let data = ids.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::matrix(ids.len(), t.cols(), data)
}

/// Random boxes that do not touch any object, labeled background.
fn background_boxes<R: Rng>(rng: &mut R, task: &RegionTask, n: usize) -> Vec<RegionBox> {
    let mut out = Vec::new();
    let s = synth::IMAGE_SIZE;
    for _ in 0..n {
        for _ in 0..32 {
            let size = rng.gen_range(4..=10usize);
            let top = rng.gen_range(0..=s - size);
            let left = rng.gen_range(0..=s - size);
            let f = s as f64;
            let b = RegionBox::new(left as f64 / f, top as f64 / f, (left + size) as f64 / f, (top + size) as f64 / f);
            if task.objects.iter().all(|o| o.bbox.intersection(&b) == 0.0) {
                out.push(b);
                break;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionReport {
    pub base_boxes: usize,
    pub novel_boxes: usize,
    /// Top-1 accuracy of the final fused score.
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    /// Top-1 accuracy of the VLM score alone.
    pub base_zero_shot: f64,
    pub novel_zero_shot: f64,
    /// Mean of (true category score - best other category score).
    pub base_gap: f64,
    pub novel_gap: f64,
    pub reduced_tasks: usize,
    pub head_final_loss: f64,
}

impl RegionReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["split", "boxes", "accuracy", "zero_shot_accuracy", "mean_gap"])?;
        for (name, n, a, z, g) in [
            ("base", self.base_boxes, self.base_accuracy, self.base_zero_shot, self.base_gap),
            ("novel", self.novel_boxes, self.novel_accuracy, self.novel_zero_shot, self.novel_gap),
        ] {
            w.write_record([name.to_string(), n.to_string(), format!("{a:.6}"), format!("{z:.6}"), format!("{g:.6}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "region retrieval (head loss {:.4}, {} reduced tasks)", self.head_final_loss, self.reduced_tasks);
        let _ = writeln!(
            s,
            "  base : {:4} boxes  acc {:.4}  vlm-only {:.4}  gap {:+.4}",
            self.base_boxes, self.base_accuracy, self.base_zero_shot, self.base_gap
        );
        let _ = writeln!(
            s,
            "  novel: {:4} boxes  acc {:.4}  vlm-only {:.4}  gap {:+.4}",
            self.novel_boxes, self.novel_accuracy, self.novel_zero_shot, self.novel_gap
        );
        s
    }
}

fn split_and_background(score: &ScoreConfig) -> Result<(Vec<usize>, usize)> {
    let all: BTreeSet<usize> = score.base_ids.union(&score.novel_ids).copied().collect();
    if all != (0..NUM_CATEGORIES).collect::<BTreeSet<_>>() {
        return Err(Error::Config(format!(
            "score.base_ids and score.novel_ids must partition 0..{NUM_CATEGORIES}"
        )));
    }
    let bg = score.background_id.unwrap_or(NUM_CATEGORIES);
    if bg < NUM_CATEGORIES {
        return Err(Error::Config(format!("background id {bg} collides with a category")));
    }
    Ok((score.base_ids.iter().copied().collect(), bg))
}

/// Fine-tune (or freeze) the image tower while training a detector head on
/// base-category region tasks. Returns the tuned model, the head and the
/// head loss trace.
pub fn train_detector(pretrained: &DualEncoder, cfg: &RunConfig, text: &Tensor) -> Result<(DualEncoder, DetectorHead, Vec<f64>)> {
    let (base, _) = split_and_background(&cfg.score)?;
    let r = &cfg.region;
    let mut model = pretrained.clone();
    let mut head = DetectorHead::new(model.vit.dim, cfg.score.tau_cls, r.seed);
    let base_text = rows_of(text, &base)?;
    let optim = OptimConfig {
        lr: r.lr,
        warmup_steps: 20,
        lr_backbone: r.backbone_lr_mult,
        ..OptimConfig::default()
    };
    let mut bb_opt = Sgd::new(optim.clone());
    let mut head_opt = Sgd::new(optim);
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let tune_bb = !r.freeze_backbone;
    let mode = model.vit.pe_mode.for_inference();
    let mut trace = Vec::with_capacity(r.steps);
    let tasks = r.train_tasks.max(1) as u64;

    for step in 0..r.steps {
        let task = gen_region_task_from(r.seed + step as u64 % tasks, r.objects, &base)?;
        let mut boxes: Vec<(RegionBox, usize)> = task
            .objects
            .iter()
            .map(|o| (o.bbox, base.iter().position(|&c| c == o.attributes.category()).expect("base task")))
            .collect();
        boxes.extend(background_boxes(&mut rng, &task, r.background_boxes).into_iter().map(|b| (b, base.len())));

        let mut tape = Tape::new();
        let mb = model.bind(&mut tape, |g| tune_bb && g == ParamGroup::Backbone);
        let hb = head.params.bind(&mut tape, |_| true);
        let fm = model.image_features(&mut tape, &mb, &task.image, mode, None)?;
        let rows = boxes
            .iter()
            .map(|(b, _)| region_embed_on_tape(&mut tape, fm.var, fm.height, fm.width, b, r.roi_samples))
            .collect::<Result<Vec<_>>>()?;
        let regions = tape.concat_rows(&rows)?;
        let logits = head.logits(&mut tape, &hb, regions, &base_text)?;
        let logp = tape.log_softmax_rows(logits);
        let mut onehot = Tensor::zeros(&[boxes.len(), base.len() + 1]);
        for (i, (_, label)) in boxes.iter().enumerate() {
            onehot.data_mut()[i * (base.len() + 1) + label] = 1.0;
        }
        let oh = tape.constant(onehot);
        let picked = tape.mul(logp, oh)?;
        let s = tape.sum(picked);
        let loss = tape.scale(s, -1.0 / boxes.len() as f64);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, detail: format!("detector loss is {value}") });
        }
        trace.push(value);
        let mut grads = tape.backward(loss)?;
        if tune_bb {
            bb_opt.step(&mut model.params, &mb, &mut grads, step)?;
        }
        head_opt.step(&mut head.params, &hb, &mut grads, step)?;
    }
    Ok((model, head, trace))
}

/// Train the head, then score every ground-truth box of held-out tasks.
pub fn eval_region(pretrained: &DualEncoder, cfg: &RunConfig) -> Result<RegionReport> {
    let (_, bg) = split_and_background(&cfg.score)?;
    let text = category_text_embeddings(pretrained)?;
    let (tuned, head, trace) = train_detector(pretrained, cfg, &text)?;
    let r = &cfg.region;
    let all: Vec<usize> = (0..NUM_CATEGORIES).collect();
    let mut ids = all.clone();
    ids.push(bg);
    let score_cfg = ScoreConfig { background_id: Some(bg), ..cfg.score.clone() };
    let tau = pretrained.tau();
    let window = trace.len().min(20).max(1);
    let head_final_loss = trace.iter().rev().take(window).sum::<f64>() / window as f64;

    #[derive(Default)]
    struct Tally {
        n: usize,
        hits: usize,
        zs_hits: usize,
        gap: f64,
    }
    let (mut base_t, mut novel_t) = (Tally::default(), Tally::default());
    let mut reduced = 0;
    for i in 0..r.eval_tasks {
        let task = gen_region_task_from(r.seed + EVAL_TASK_OFFSET + i as u64, r.objects, &all)?;
        if task.reduced() {
            reduced += 1;
        }
        let vlm_map = pretrained.feature_map(&task.image)?;
        let det_map = tuned.feature_map(&task.image)?;
        for obj in &task.objects {
            let truth = obj.attributes.category();
            let vlm_emb = region_embed_with(&vlm_map, &obj.bbox, r.roi_samples)?;
            let det_emb = region_embed_with(&det_map, &obj.bbox, r.roi_samples)?;
            let mut z = vlm_scores(&vlm_emb, &text, tau)?;
            let zs_top = argmax(&z);
            z.push(0.0);
            let p = head.probabilities(&det_emb, &text)?;
            let scores = CategoryScores::compute(&ids, &z, &p, task.objectness(&obj.bbox), &score_cfg)?;
            let top = scores.top_category(Some(bg));
            let s = &scores.final_scores;
            let best_other = all.iter().filter(|&&c| c != truth).map(|&c| s[c]).fold(f64::NEG_INFINITY, f64::max);
            let t = if score_cfg.novel_ids.contains(&truth) { &mut novel_t } else { &mut base_t };
            t.n += 1;
            t.hits += usize::from(top == Some(truth));
            t.zs_hits += usize::from(zs_top == truth);
            t.gap += s[truth] - best_other;
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    let mean = |g: f64, n: usize| if n == 0 { 0.0 } else { g / n as f64 };
    Ok(RegionReport {
        base_boxes: base_t.n,
        novel_boxes: novel_t.n,
        base_accuracy: frac(base_t.hits, base_t.n),
        novel_accuracy: frac(novel_t.hits, novel_t.n),
        base_zero_shot: frac(base_t.zs_hits, base_t.n),
        novel_zero_shot: frac(novel_t.zs_hits, novel_t.n),
        base_gap: mean(base_t.gap, base_t.n),
        novel_gap: mean(novel_t.gap, novel_t.n),
        reduced_tasks: reduced,
        head_final_loss,
    })
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of VLM scores alone: `regions[i]` should pick `labels[i]`.
pub fn zero_shot_accuracy(regions: &[Vec<f64>], labels: &[usize], text: &Tensor, tau: f64) -> Result<f64> {
    if regions.len() != labels.len() || regions.is_empty() {
        return Err(Error::Input("regions and labels must align and be non-empty".into()));
    }
    let mut hits = 0;
    for (r, &l) in regions.iter().zip(labels) {
        hits += usize::from(argmax(&vlm_scores(r, text, tau)?) == l);
    }
    Ok(hits as f64 / regions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{PeMode, TextConfig, VitConfig};

    #[test]
    fn oracle_text_embeddings_give_perfect_accuracy() {
        let regions: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let text = Tensor::from_rows(&regions).unwrap();
        assert_eq!(zero_shot_accuracy(&regions, &[0, 1, 2, 3], &text, 0.1).unwrap(), 1.0);
    }

    #[test]
    fn head_starts_as_cosine_against_classes() {
        let head = DetectorHead::new(4, 20.0, 0);
        let classes = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let p = head.probabilities(&[1.0, 0.0, 0.0, 0.0], &classes).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p[0] > p[1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_region_eval_runs() {
        let cfg = RunConfig {
            vit: VitConfig { dim: 8, depth: 1, heads: 2, pe_mode: PeMode::Learnable, ..VitConfig::default() },
            text: TextConfig { dim: 8, depth: 1, heads: 2, max_len: 4, ..TextConfig::default() },
            ..RunConfig::default()
        };
        let mut cfg = cfg;
        cfg.region.steps = 5;
        cfg.region.eval_tasks = 4;
        let model = DualEncoder::new(cfg.vit.clone(), cfg.text.clone(), 0).unwrap();
        let rep = eval_region(&model, &cfg).unwrap();
        assert_eq!(rep.base_boxes + rep.novel_boxes, 4 * cfg.region.objects);
        assert!((0.0..=1.0).contains(&rep.base_accuracy));

        let frozen = RunConfig { region: crate::harness::RegionConfig { freeze_backbone: true, ..cfg.region.clone() }, ..cfg.clone() };
        let text = category_text_embeddings(&model).unwrap();
        let (tuned, _, _) = train_detector(&model, &frozen, &text).unwrap();
        assert_eq!(tuned.params, model.params);
    }

    #[test]
    fn split_must_cover_categories() {
        let mut s = ScoreConfig::default().with_split([0, 1], [2]);
        assert!(split_and_background(&s).is_err());
        s = ScoreConfig::default().with_split(synth::base_categories(), synth::NOVEL_CATEGORIES);
        assert_eq!(split_and_background(&s).unwrap().1, NUM_CATEGORIES);
    }
}
