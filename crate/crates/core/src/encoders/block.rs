//! Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.

use rand::Rng;

use super::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockInit {
    Random,
    /// Output projections of both residual branches start at zero, so the
    /// block is the identity until trained.
    ZeroOutput,
}

pub(crate) fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from product")
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        zero: bool,
    ) -> Self {
        let w = if zero {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            uniform_tensor(rng, &[fan_in, fan_out], a)
        };
        Self {
            w: store.add(format!("{name}.w"), w, group),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.w))?;
        tape.add_row(y, bound.var(self.b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), Tensor::filled(&[1, dim], 1.0), group),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[1, dim]), group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm_rows(x, LN_EPS);
        let g = tape.mul_row(n, bound.var(self.gain))?;
        tape.add_row(g, bound.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AttentionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        group: ParamGroup,
        init: BlockInit,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return dim_err(format!("width {dim} is not divisible by {heads} heads"));
        }
        let zero = init == BlockInit::ZeroOutput;
        Ok(Self {
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, group),
            q: Linear::new(store, rng, &format!("{name}.attn.q"), dim, dim, group, false),
            k: Linear::new(store, rng, &format!("{name}.attn.k"), dim, dim, group, false),
            v: Linear::new(store, rng, &format!("{name}.attn.v"), dim, dim, group, false),
            out: Linear::new(store, rng, &format!("{name}.attn.out"), dim, dim, group, zero),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, group),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim, mlp_hidden, group, false),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), mlp_hidden, dim, group, zero),
        })
    }

    /// `x` is `N x D`. When `attn_probs` is given, each head's `N x N`
    /// attention matrix is pushed onto it.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mut attn_probs: Option<&mut Vec<Var>>) -> Result<Var> {
        let dim = tape.value(x).cols();
        if dim % self.heads != 0 {
            return dim_err(format!("width {dim} is not divisible by {} heads", self.heads));
        }
        let dh = dim / self.heads;
        let h = self.ln1.forward(tape, bound, x)?;
        let q = self.q.forward(tape, bound, h)?;
        let k = self.k.forward(tape, bound, h)?;
        let v = self.v.forward(tape, bound, h)?;
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qh = tape.slice_cols(q, i * dh, dh)?;
            let kh = tape.slice_cols(k, i * dh, dh)?;
            let vh = tape.slice_cols(v, i * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = tape.softmax_rows(scores);
            if let Some(list) = attn_probs.as_deref_mut() {
                list.push(probs);
            }
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let attn = self.out.forward(tape, bound, merged)?;
        let x = tape.add(x, attn)?;

        let h2 = self.ln2.forward(tape, bound, x)?;
        let m = self.fc1.forward(tape, bound, h2)?;
        let m = tape.gelu(m);
        let m = self.fc2.forward(tape, bound, m)?;
        tape.add(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        uniform_tensor(rng, &[n, d], 1.0)
    }

    #[test]
    fn zero_output_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let blk = AttentionBlock::new(&mut store, &mut rng, "b", 8, 2, 16, ParamGroup::Backbone, BlockInit::ZeroOutput).unwrap();
        let x = input(&mut rng, 5, 8);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let y = blk.forward(&mut tape, &bound, xv, None).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let blk = AttentionBlock::new(&mut store, &mut rng, "b", 8, 4, 16, ParamGroup::Text, BlockInit::Random).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| true);
        let xv = tape.constant(input(&mut rng, 6, 8));
        let mut probs = Vec::new();
        blk.forward(&mut tape, &bound, xv, Some(&mut probs)).unwrap();
        assert_eq!(probs.len(), 4);
        for p in probs {
            for r in 0..6 {
                let s: f64 = tape.value(p).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let r = AttentionBlock::new(&mut store, &mut rng, "b", 10, 4, 16, ParamGroup::Text, BlockInit::Random);
        assert!(r.is_err());
    }
}
