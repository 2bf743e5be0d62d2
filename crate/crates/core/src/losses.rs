//! Batch contrastive objectives over unit-norm image rows `V` and text rows `L`.
//!
//! Both losses start from the temperature-scaled similarity matrix
//! `X[i][j] = v_i . l_j / tau`, with matching pairs on the diagonal.
//!
//! - softmax: `-(1/B) sum_i log softmax(X[i])[i]`
//! - focal: `-(1/B) sum_i sum_j (1 - p_ij)^gamma log p_ij`, where
//!   `p_ij = sigmoid(X[i][j])` on the diagonal and `1 - sigmoid(X[i][j])` off it.
//!
//! The focal term is evaluated in log-sigmoid form: with `z = +X` on the
//! diagonal and `-X` off it, `p = sigmoid(z)`, `1 - p = sigmoid(-z)` and
//! `-log p = softplus(-z)`, which stays finite for any logit.
//!
//! The image-to-text and text-to-image directions differ only in which
//! embedding set indexes the rows; the total is their sum.

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Softmax,
    Focal,
}

/// How the focal double sum is scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FocalNormalize {
    /// `1/B` over all `B^2` pair terms.
    PerQuery,
    /// `1/B^2`, i.e. the mean pair term.
    PerPair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    pub normalize: FocalNormalize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Focal, gamma: 2.0, normalize: FocalNormalize::PerQuery }
    }
}

impl LossConfig {
    pub fn softmax() -> Self {
        Self { kind: LossKind::Softmax, ..Self::default() }
    }

    pub fn focal(gamma: f64) -> Self {
        Self { kind: LossKind::Focal, gamma, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!("focal gamma must be finite and >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `B x D` matrix of embeddings, one row per sample. Never empty.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch(Tensor);

impl EmbeddingBatch {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("embedding batch is empty".into()));
        }
        Ok(Self(Tensor::from_rows(rows)?))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return dim_err(format!("embedding batch must be BxD, got {:?}", t.shape()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

fn check_pair(tape: &Tape, v: Var, l: Var, tau: Var) -> Result<usize> {
    let (vs, ls) = (tape.value(v).shape(), tape.value(l).shape());
    if vs.len() != 2 || vs != ls {
        return dim_err(format!("contrastive loss needs matching BxD batches, got {vs:?} and {ls:?}"));
    }
    if !tape.value(tau).is_scalar() {
        return dim_err("temperature must be a single value");
    }
    Ok(vs[0])
}

/// `X = V L^T / tau`, shape `B x B`.
pub fn similarity_logits(tape: &mut Tape, v: Var, l: Var, tau: Var) -> Result<Var> {
    check_pair(tape, v, l, tau)?;
    let lt = tape.transpose(l)?;
    let sim = tape.matmul(v, lt)?;
    tape.div_scalar(sim, tau)
}

/// Image-to-text softmax cross-entropy with diagonal positives.
pub fn softmax_contrastive_loss(tape: &mut Tape, v: Var, l: Var, tau: Var) -> Result<Var> {
    let b = check_pair(tape, v, l, tau)?;
    let x = similarity_logits(tape, v, l, tau)?;
    let logp = tape.log_softmax_rows(x);
    let eye = tape.constant(Tensor::identity(b));
    let diag = tape.mul(logp, eye)?;
    let s = tape.sum(diag);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// Image-to-text sigmoid focal loss over all `B^2` pairs.
pub fn focal_contrastive_loss(
    tape: &mut Tape,
    v: Var,
    l: Var,
    tau: Var,
    gamma: f64,
    normalize: FocalNormalize,
) -> Result<Var> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(Error::Input(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    let b = check_pair(tape, v, l, tau)?;
    let x = similarity_logits(tape, v, l, tau)?;
    // neg_z = -z: -X on the diagonal, +X off it
    let mut signs = Tensor::filled(&[b, b], 1.0);
    for i in 0..b {
        signs.data_mut()[i * b + i] = -1.0;
    }
    let signs = tape.constant(signs);
    let neg_z = tape.mul(x, signs)?;
    let nll = tape.softplus(neg_z);
    let terms = if gamma == 0.0 {
        nll
    } else {
        let one_minus_p = tape.sigmoid(neg_z);
        let modulator = tape.powf(one_minus_p, gamma);
        tape.mul(modulator, nll)?
    };
    let s = tape.sum(terms);
    let denom = match normalize {
        FocalNormalize::PerQuery => b as f64,
        FocalNormalize::PerPair => (b * b) as f64,
    };
    Ok(tape.scale(s, 1.0 / denom))
}

/// One direction of the configured loss, rows of `a` as queries.
pub fn directional_loss(tape: &mut Tape, a: Var, b: Var, tau: Var, cfg: &LossConfig) -> Result<Var> {
    match cfg.kind {
        LossKind::Softmax => softmax_contrastive_loss(tape, a, b, tau),
        LossKind::Focal => focal_contrastive_loss(tape, a, b, tau, cfg.gamma, cfg.normalize),
    }
}

/// `loss(V, L) + loss(L, V)`.
pub fn total_contrastive_loss(tape: &mut Tape, v: Var, l: Var, tau: Var, cfg: &LossConfig) -> Result<Var> {
    let i2t = directional_loss(tape, v, l, tau, cfg)?;
    let t2i = directional_loss(tape, l, v, tau, cfg)?;
    tape.add(i2t, t2i)
}

/// Value-only evaluation of the symmetric loss.
pub fn total_loss_value(v: &EmbeddingBatch, l: &EmbeddingBatch, tau: f64, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let vv = tape.constant(v.tensor().clone());
    let lv = tape.constant(l.tensor().clone());
    let t = tape.constant(Tensor::scalar(tau));
    let loss = total_contrastive_loss(&mut tape, vv, lv, t, cfg)?;
    Ok(tape.value(loss).item())
}

/// Value-only single-direction loss (rows of `v` as queries).
pub fn loss_value(v: &EmbeddingBatch, l: &EmbeddingBatch, tau: f64, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let vv = tape.constant(v.tensor().clone());
    let lv = tape.constant(l.tensor().clone());
    let t = tape.constant(Tensor::scalar(tau));
    let loss = directional_loss(&mut tape, vv, lv, t, cfg)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]]) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn empty_batch_is_input_error() {
        assert!(matches!(EmbeddingBatch::from_rows(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn softmax_single_sample_is_zero() {
        let v = batch(&[&[0.6, 0.8]]);
        let l = batch(&[&[1.0, 0.0]]);
        assert_eq!(loss_value(&v, &l, 0.3, &LossConfig::softmax()).unwrap(), 0.0);
    }

    #[test]
    fn softmax_uniform_two_is_ln2() {
        let v = batch(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let l = batch(&[&[0.0, 1.0], &[0.0, 1.0]]);
        let got = loss_value(&v, &l, 0.5, &LossConfig::softmax()).unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_single_zero_similarity() {
        let v = batch(&[&[1.0, 0.0]]);
        let l = batch(&[&[0.0, 1.0]]);
        let got = loss_value(&v, &l, 0.5, &LossConfig::focal(2.0)).unwrap();
        assert!((got - 0.173_286_795_139_986_3).abs() < 1e-12, "{got}");
        let total = total_loss_value(&v, &l, 0.5, &LossConfig::focal(2.0)).unwrap();
        assert!((total - 2.0 * 0.173_286_795_139_986_3).abs() < 1e-12);
    }

    #[test]
    fn negative_gamma_rejected() {
        assert!(LossConfig::focal(-1.0).validate().is_err());
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let tau = t.constant(Tensor::scalar(1.0));
        assert!(focal_contrastive_loss(&mut t, v, v, tau, -0.5, FocalNormalize::PerQuery).is_err());
    }

    #[test]
    fn per_pair_is_per_query_over_b() {
        let v = batch(&[&[1.0, 0.0], &[0.6, 0.8], &[0.0, 1.0]]);
        let l = batch(&[&[0.8, 0.6], &[0.0, 1.0], &[1.0, 0.0]]);
        let a = loss_value(&v, &l, 0.4, &LossConfig::focal(2.0)).unwrap();
        let p = loss_value(&v, &l, 0.4, &LossConfig { normalize: FocalNormalize::PerPair, ..LossConfig::focal(2.0) })
            .unwrap();
        assert!((a / 3.0 - p).abs() < 1e-14);
    }

    #[test]
    fn mismatched_batches_rejected() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::zeros(&[2, 3]));
        let l = t.constant(Tensor::zeros(&[3, 3]));
        let tau = t.constant(Tensor::scalar(1.0));
        assert!(matches!(softmax_contrastive_loss(&mut t, v, l, tau), Err(Error::Dimension(_))));
    }
}
