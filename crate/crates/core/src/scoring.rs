//! Open-vocabulary detection scoring.
//!
//! For a region `i` and category `c`:
//!
//! ```text
//! z  = softmax_c(cos(region_emb, text_c) / T)          VLM score
//! s  = z^(1-alpha) p^alpha   (c base)
//!      z^(1-beta)  p^beta    (c novel)
//!      p                     (c background)
//! S  = o^delta * s
//! ```
//!
//! where `p` is the detection head's softmaxed score and `o` the proposal's
//! localization-quality objectness. `0^0` is taken as 1 in every power.

use std::collections::BTreeSet;
use std::rc::Rc;

use crate::autodiff::{RowMix, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::pe::bilinear_taps;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreConfig {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub tau_cls: f64,
    pub base_ids: BTreeSet<usize>,
    pub novel_ids: BTreeSet<usize>,
    pub background_id: Option<usize>,
}

impl Default for ScoreConfig {
    /// `(alpha, beta, delta) = (0.65, 0.3, 3)`, normalized-layer scale 20.
    fn default() -> Self {
        Self {
            alpha: 0.65,
            beta: 0.3,
            delta: 3.0,
            tau_cls: 20.0,
            base_ids: BTreeSet::new(),
            novel_ids: BTreeSet::new(),
            background_id: None,
        }
    }
}

impl ScoreConfig {
    /// Cross-dataset transfer: every category treated as novel, `(alpha, beta) = (0, 0.65)`.
    pub fn transfer() -> Self {
        Self { alpha: 0.0, beta: 0.65, ..Self::default() }
    }

    pub fn with_split(mut self, base: impl IntoIterator<Item = usize>, novel: impl IntoIterator<Item = usize>) -> Self {
        self.base_ids = base.into_iter().collect();
        self.novel_ids = novel.into_iter().collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("score {name} = {v} outside [0, 1]")));
            }
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("score delta = {} must be >= 0", self.delta)));
        }
        if !(self.tau_cls > 0.0 && self.tau_cls.is_finite()) {
            return Err(Error::Config(format!("score tau_cls = {} must be positive", self.tau_cls)));
        }
        if let Some(c) = self.base_ids.intersection(&self.novel_ids).next() {
            return Err(Error::Config(format!("category {c} is both base and novel")));
        }
        if let Some(bg) = self.background_id {
            if self.base_ids.contains(&bg) || self.novel_ids.contains(&bg) {
                return Err(Error::Config(format!("background id {bg} is also a named category")));
            }
        }
        Ok(())
    }
}

/// Box in normalized feature-map coordinates. Coordinates outside `[0, 1]`
/// are clamped when pooling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl RegionBox {
    pub const FULL: RegionBox = RegionBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn clamped(&self) -> Self {
        Self {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &RegionBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &RegionBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// FCOS-style centerness of `point` w.r.t. this box; 0 outside the box.
    pub fn centerness(&self, (x, y): (f64, f64)) -> f64 {
        let (l, r, t, b) = (x - self.x1, self.x2 - x, y - self.y1, self.y2 - y);
        if l <= 0.0 || r <= 0.0 || t <= 0.0 || b <= 0.0 {
            return 0.0;
        }
        ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
    }
}

/// RoI-Align pooling map over an `h x w` feature grid: the mean of
/// `samples x samples` bilinear reads at bin centers inside `bx`. Feature
/// cell `(i, j)` is centered at normalized `((j + 0.5) / w, (i + 0.5) / h)`.
pub fn roi_map(h: usize, w: usize, bx: &RegionBox, samples: usize) -> Result<RowMix> {
    if h == 0 || w == 0 || samples == 0 {
        return dim_err("RoI pooling needs a non-empty grid and lattice");
    }
    let b = bx.clamped();
    if b.x2 <= b.x1 || b.y2 <= b.y1 {
        return Err(Error::Input(format!("degenerate region box {bx:?}")));
    }
    let mut acc = vec![0.0; h * w];
    let wgt = 1.0 / (samples * samples) as f64;
    for a in 0..samples {
        let ny = b.y1 + (a as f64 + 0.5) / samples as f64 * (b.y2 - b.y1);
        for c in 0..samples {
            let nx = b.x1 + (c as f64 + 0.5) / samples as f64 * (b.x2 - b.x1);
            for (k, t) in bilinear_taps(h, w, ny * h as f64 - 0.5, nx * w as f64 - 0.5) {
                acc[k] += wgt * t;
            }
        }
    }
    let taps = acc.into_iter().enumerate().filter(|(_, v)| *v != 0.0).collect();
    Ok(RowMix { in_rows: h * w, taps: vec![taps] })
}

/// Unit-norm region embedding from an `(h*w) x D` feature matrix on the tape.
pub fn region_embed_on_tape(
    tape: &mut Tape,
    features: Var,
    h: usize,
    w: usize,
    bx: &RegionBox,
    samples: usize,
) -> Result<Var> {
    let pooled = tape.row_mix(features, Rc::new(roi_map(h, w, bx, samples)?))?;
    tape.l2_normalize(pooled, DEFAULT_EPS)
}

/// Unit-norm region embedding from an `H x W x D` feature map, 2x2 sampling lattice.
pub fn region_embed(feature_map: &Tensor, bx: &RegionBox) -> Result<Vec<f64>> {
    region_embed_with(feature_map, bx, 2)
}

pub fn region_embed_with(feature_map: &Tensor, bx: &RegionBox, samples: usize) -> Result<Vec<f64>> {
    if feature_map.rank() != 3 {
        return dim_err(format!("feature map must be HxWxD, got {:?}", feature_map.shape()));
    }
    let (h, w, d) = (feature_map.shape()[0], feature_map.shape()[1], feature_map.shape()[2]);
    let map = roi_map(h, w, bx, samples)?;
    let pooled = map.apply(feature_map.data(), d);
    let n = pooled.iter().map(|v| v * v).sum::<f64>().sqrt().max(DEFAULT_EPS);
    Ok(pooled.into_iter().map(|v| v / n).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(DEFAULT_EPS);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(DEFAULT_EPS);
    dot / (na * nb)
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Softmax over `cos(region, text_c) / temperature` across the `C` rows of `text_embs`.
pub fn vlm_scores(region_emb: &[f64], text_embs: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    if text_embs.rank() != 2 || text_embs.cols() != region_emb.len() {
        return dim_err(format!(
            "text embeddings {:?} do not match region dim {}",
            text_embs.shape(),
            region_emb.len()
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::Input(format!("temperature must be positive, got {temperature}")));
    }
    let logits: Vec<f64> = (0..text_embs.rows()).map(|c| cosine(region_emb, text_embs.row(c)) / temperature).collect();
    Ok(softmax(&logits))
}

/// `z^(1-w) p^w`, arranged so that `w == 0` returns `z`, and `w == 1` or
/// `z == p` return `p`, exactly.
fn geometric(z: f64, p: f64, w: f64) -> f64 {
    if w == 0.0 {
        z
    } else if w == 1.0 {
        p
    } else if p > 0.0 {
        p * (z / p).powf(1.0 - w)
    } else {
        0.0
    }
}

pub fn combine_scores(z: f64, p: f64, cfg: &ScoreConfig, category_id: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&z) || !(0.0..=1.0).contains(&p) {
        return Err(Error::Input(format!("scores must lie in [0, 1], got z={z}, p={p}")));
    }
    if cfg.background_id == Some(category_id) {
        return Ok(p);
    }
    if cfg.base_ids.contains(&category_id) {
        Ok(geometric(z, p, cfg.alpha))
    } else if cfg.novel_ids.contains(&category_id) {
        Ok(geometric(z, p, cfg.beta))
    } else {
        Err(Error::Input(format!("category {category_id} is neither base, novel nor background")))
    }
}

/// `o^delta * s`.
pub fn apply_objectness(s: f64, o: f64, delta: f64) -> f64 {
    o.powf(delta) * s
}

/// Per-category scores for one region.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryScores {
    pub category_ids: Vec<usize>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub objectness: f64,
    pub combined: Vec<f64>,
    pub final_scores: Vec<f64>,
}

impl CategoryScores {
    /// Fuse aligned `z` and `p` vectors for `category_ids`. The background
    /// entry's `z` is ignored.
    pub fn compute(category_ids: &[usize], z: &[f64], p: &[f64], objectness: f64, cfg: &ScoreConfig) -> Result<Self> {
        if z.len() != category_ids.len() || p.len() != category_ids.len() {
            return dim_err("z, p and category ids must align");
        }
        if !(0.0..=1.0).contains(&objectness) {
            return Err(Error::Input(format!("objectness {objectness} outside [0, 1]")));
        }
        let combined = category_ids
            .iter()
            .zip(z.iter().zip(p))
            .map(|(&c, (&zc, &pc))| combine_scores(zc, pc, cfg, c))
            .collect::<Result<Vec<_>>>()?;
        let final_scores = combined.iter().map(|&s| apply_objectness(s, objectness, cfg.delta)).collect();
        Ok(Self {
            category_ids: category_ids.to_vec(),
            z: z.to_vec(),
            p: p.to_vec(),
            objectness,
            combined,
            final_scores,
        })
    }

    /// Highest final score among non-background categories; ties go to the
    /// earlier entry.
    pub fn top_category(&self, background_id: Option<usize>) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&c, &s) in self.category_ids.iter().zip(&self.final_scores) {
            if Some(c) == background_id {
                continue;
            }
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        best.map(|(c, _)| c)
    }
}

/// `tau_cls * cos(w_c, x) + b_c` for every row of `x` (`N x D`) against every
/// row of `w` (`C x D`); result is `N x C`. Norms are floored at `eps`.
pub fn normalized_layer_on_tape(tape: &mut Tape, x: Var, w: Var, b: Var, tau_cls: f64, eps: f64) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let dots = tape.matmul(x, wt)?;
    let nx = tape.row_norms(x, eps);
    let by_x = tape.div_col(dots, nx)?;
    let cols = tape.transpose(by_x)?;
    let nw = tape.row_norms(w, eps);
    let by_w = tape.div_col(cols, nw)?;
    let cos = tape.transpose(by_w)?;
    let scaled = tape.scale(cos, tau_cls);
    tape.add_row(scaled, b)
}

/// Value-only [`normalized_layer_on_tape`] for a single feature vector.
pub fn normalized_layer(x: &[f64], w: &Tensor, b: &[f64], tau_cls: f64) -> Result<Vec<f64>> {
    if w.rank() != 2 || w.cols() != x.len() || b.len() != w.rows() {
        return dim_err(format!(
            "normalized layer: x has {} values, w is {:?}, b has {}",
            x.len(),
            w.shape(),
            b.len()
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
    let wv = tape.constant(w.clone());
    let bv = tape.constant(Tensor::matrix(1, b.len(), b.to_vec())?);
    let out = normalized_layer_on_tape(&mut tape, xv, wv, bv, tau_cls, DEFAULT_EPS)?;
    Ok(tape.value(out).data().to_vec())
}
