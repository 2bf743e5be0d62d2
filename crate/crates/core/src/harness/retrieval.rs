//! Recall@K for image-to-text and text-to-image retrieval.

use std::fmt::Write as _;
use std::io::Write;

use crate::encoders::DualEncoder;
use crate::error::{dim_err, Error, Result};
use crate::synth::SyntheticPair;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub queries: usize,
    pub ks: Vec<usize>,
    pub i2t: Vec<f64>,
    pub t2i: Vec<f64>,
}

impl RetrievalReport {
    pub fn i2t_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.i2t[i])
    }

    pub fn t2i_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.t2i[i])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["direction", "k", "recall", "queries"])?;
        for (dir, vals) in [("i2t", &self.i2t), ("t2i", &self.t2i)] {
            for (k, r) in self.ks.iter().zip(vals.iter()) {
                w.write_record([dir.to_string(), k.to_string(), format!("{r:.6}"), self.queries.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!("retrieval over {} pairs (chance R@1 = {:.4})\n", self.queries, 1.0 / self.queries as f64);
        for (i, k) in self.ks.iter().enumerate() {
            let _ = writeln!(s, "  R@{k:<3} i2t {:.4}  t2i {:.4}", self.i2t[i], self.t2i[i]);
        }
        s
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// 0-based rank of candidate `target` for `query`: the number of candidates
/// scoring higher, plus equal-scoring ones at a lower index.
pub fn rank_of(query: &[f64], candidates: &[Vec<f64>], target: usize) -> usize {
    let s = cosine(query, &candidates[target]);
    candidates
        .iter()
        .enumerate()
        .filter(|&(j, c)| {
            let cj = cosine(query, c);
            cj > s || (cj == s && j < target)
        })
        .count()
}

/// Row `i` of `images` matches row `i` of `texts`.
pub fn recall_at_k(images: &[Vec<f64>], texts: &[Vec<f64>], ks: &[usize]) -> Result<RetrievalReport> {
    let n = images.len();
    if n == 0 || texts.len() != n {
        return dim_err(format!("retrieval needs equal non-empty sets, got {} images and {} texts", n, texts.len()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Input(format!("bad K list {ks:?}")));
    }
    let i2t_ranks: Vec<usize> = (0..n).map(|i| rank_of(&images[i], texts, i)).collect();
    let t2i_ranks: Vec<usize> = (0..n).map(|i| rank_of(&texts[i], images, i)).collect();
    let recall = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(RetrievalReport {
        queries: n,
        ks: ks.to_vec(),
        i2t: ks.iter().map(|&k| recall(&i2t_ranks, k)).collect(),
        t2i: ks.iter().map(|&k| recall(&t2i_ranks, k)).collect(),
    })
}

/// Embed every pair with the inference PE mode and score retrieval.
pub fn eval_retrieval(model: &DualEncoder, pairs: &[SyntheticPair], ks: &[usize]) -> Result<RetrievalReport> {
    if let Some(&k) = ks.iter().max() {
        if k > pairs.len() {
            return Err(Error::Input(format!("K = {k} exceeds the {} evaluation pairs", pairs.len())));
        }
    }
    let mode = model.vit.pe_mode.for_inference();
    let images = pairs.iter().map(|p| model.embed_image(&p.image, mode, None)).collect::<Result<Vec<_>>>()?;
    let texts = pairs.iter().map(|p| model.embed_text(&p.tokens)).collect::<Result<Vec<_>>>()?;
    recall_at_k(&images, &texts, ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_embeddings_are_perfect() {
        let e: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let r = recall_at_k(&e, &e, &[1, 5]).unwrap();
        assert_eq!(r.i2t, vec![1.0, 1.0]);
        assert_eq!(r.t2i, vec![1.0, 1.0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let same = vec![vec![1.0, 0.0]; 3];
        let r = recall_at_k(&same, &same, &[1, 2, 3]).unwrap();
        // query i ranks at position i among identical candidates
        assert!((r.i2t[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.i2t[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.i2t[2], 1.0);
    }

    #[test]
    fn bad_inputs() {
        let e = vec![vec![1.0]];
        assert!(recall_at_k(&e, &[], &[1]).is_err());
        assert!(recall_at_k(&e, &e, &[0]).is_err());
    }
}
