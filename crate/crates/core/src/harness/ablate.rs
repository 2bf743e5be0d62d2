//! PE-mode x loss-kind sweep on identical seeds.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::config::RunConfig;
use super::region::eval_region;
use super::retrieval::eval_retrieval;
use super::train::{held_out_pairs, pretrain, write_run};
use crate::encoders::PeMode;
use crate::error::Result;
use crate::losses::{LossConfig, LossKind};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub pe_mode: PeMode,
    pub loss: LossKind,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub i2t_r1: f64,
    pub t2i_r1: f64,
    /// Fused-score accuracy on held-out categories, when region eval ran.
    pub novel_accuracy: Option<f64>,
    pub base_accuracy: Option<f64>,
}

fn loss_name(k: LossKind) -> &'static str {
    match k {
        LossKind::Softmax => "softmax",
        LossKind::Focal => "focal",
    }
}

/// Train one model per `(mode, loss)` pair from `base` with only those two
/// fields changed. When `out_dir` is given each run is saved under
/// `<mode>_<loss>/`.
pub fn run_ablation(
    base: &RunConfig,
    modes: &[PeMode],
    losses: &[LossKind],
    with_region: bool,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let pairs = held_out_pairs(base.eval.pairs);
    let mut rows = Vec::new();
    for &mode in modes {
        for &kind in losses {
            let mut cfg = base.clone();
            cfg.vit.pe_mode = mode;
            cfg.loss = LossConfig { kind, ..base.loss.clone() };
            let out = pretrain(&cfg, |_, _| {})?;
            if let Some(dir) = out_dir {
                write_run(&dir.join(format!("{mode}_{}", loss_name(kind))), &cfg, &out)?;
            }
            let r = eval_retrieval(&out.model, &pairs, &[1])?;
            let region = if with_region { Some(eval_region(&out.model, &cfg)?) } else { None };
            let row = AblationRow {
                pe_mode: mode,
                loss: kind,
                initial_loss: out.initial_loss(),
                final_loss: out.final_loss(cfg.final_window),
                i2t_r1: r.i2t[0],
                t2i_r1: r.t2i[0],
                novel_accuracy: region.as_ref().map(|g| g.novel_accuracy),
                base_accuracy: region.as_ref().map(|g| g.base_accuracy),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pe_mode", "loss", "initial_loss", "final_loss", "i2t_r1", "t2i_r1", "novel_acc", "base_acc"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    for r in rows {
        w.write_record([
            r.pe_mode.to_string(),
            loss_name(r.loss).to_string(),
            format!("{:.6}", r.initial_loss),
            format!("{:.6}", r.final_loss),
            format!("{:.4}", r.i2t_r1),
            format!("{:.4}", r.t2i_r1),
            opt(r.novel_accuracy),
            opt(r.base_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<18} {:<8} {:>9} {:>9} {:>7} {:>7} {:>9} {:>9}\n",
        "pe_mode", "loss", "loss@0", "loss@end", "i2t@1", "t2i@1", "novel", "base"
    );
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in rows {
        let _ = writeln!(
            s,
            "{:<18} {:<8} {:>9.4} {:>9.4} {:>7.3} {:>7.3} {:>9} {:>9}",
            r.pe_mode.to_string(),
            loss_name(r.loss),
            r.initial_loss,
            r.final_loss,
            r.i2t_r1,
            r.t2i_r1,
            opt(r.novel_accuracy),
            opt(r.base_accuracy)
        );
    }
    s
}
