//! Finite-difference gradient checks over every differentiable op, both
//! contrastive losses, the cropped-PE path, RoI pooling, the normalized
//! layer and a full encoder pass.

use std::fmt::Write as _;
use std::io::Write;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_gradients, GradCheckOutcome, Tape, Var};
use crate::encoders::{AttentionBlock, BlockInit, DualEncoder, ParamGroup, ParamStore, PeMode, TextConfig, VitConfig};
use crate::error::Result;
use crate::losses::{focal_contrastive_loss, softmax_contrastive_loss, total_contrastive_loss, FocalNormalize, LossConfig};
use crate::pe::{cpe_on_tape, resize_map, sample_crop_region, CpeConfig};
use crate::scoring::{normalized_layer_on_tape, region_embed_on_tape, RegionBox, DEFAULT_EPS};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-6;

type CaseFn = Box<dyn Fn(&mut ChaCha8Rng) -> Result<GradCheckOutcome>>;

pub struct GradCase {
    pub name: String,
    pub trials: usize,
    run: CaseFn,
}

impl GradCase {
    pub fn new(name: impl Into<String>, trials: usize, run: impl Fn(&mut ChaCha8Rng) -> Result<GradCheckOutcome> + 'static) -> Self {
        Self { name: name.into(), trials, run: Box::new(run) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    /// `input k, coord i` of the worst mismatch, or the error message.
    pub worst: String,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl GradReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn trials(&self) -> usize {
        self.rows.iter().map(|r| r.trials).sum()
    }

    pub fn failures(&self) -> Vec<&GradRow> {
        self.rows.iter().filter(|r| !r.passed).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["case", "trials", "max_rel_err", "worst", "passed"])?;
        for r in &self.rows {
            w.write_record([r.name.clone(), r.trials.to_string(), format!("{:.3e}", r.max_rel_err), r.worst.clone(), r.passed.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:>3} trials  max rel err {:.2e}  {}{}",
                r.name,
                r.trials,
                r.max_rel_err,
                if r.passed { "ok" } else { "FAIL" },
                if r.passed { String::new() } else { format!(" at {}", r.worst) }
            );
        }
        let _ = writeln!(
            s,
            "{} cases, {} trials, {} failed, tolerance {:.0e}, {:.1}s",
            self.rows.len(),
            self.trials(),
            self.failures().len(),
            self.tolerance,
            self.seconds
        );
        s
    }
}

/// Run each case `trials` times with its own seeded generator.
pub fn run_cases(cases: &[GradCase], seed: u64) -> GradReport {
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cases.len());
    for (ci, case) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(ci as u64));
        let mut row = GradRow { name: case.name.clone(), trials: case.trials, max_rel_err: 0.0, worst: String::new(), passed: true };
        for trial in 0..case.trials {
            match (case.run)(&mut rng) {
                Ok(out) => {
                    if out.max_rel_err > row.max_rel_err || !out.passed(TOLERANCE) {
                        row.max_rel_err = row.max_rel_err.max(out.max_rel_err);
                        row.worst = format!("trial {trial} input {} coord {}", out.worst.0, out.worst.1);
                    }
                    row.passed &= out.passed(TOLERANCE);
                }
                Err(e) => {
                    row.passed = false;
                    row.max_rel_err = f64::INFINITY;
                    row.worst = format!("trial {trial}: {e}");
                }
            }
        }
        rows.push(row);
    }
    GradReport { rows, tolerance: TOLERANCE, seconds: start.elapsed().as_secs_f64() }
}

/// The default matrix, at least 100 trials in total.
pub fn gradcheck_all() -> GradReport {
    run_cases(&default_cases(), 0)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("non-empty shape")
}

fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -2.0, 2.0)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 0.5, 2.0)
}

/// `sum(y * w)` for a fixed random `w`, so every output coordinate matters.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let m = tape.mul(y, wv)?;
    Ok(tape.sum(m))
}

/// Case for a unary op on one `rows x cols` input drawn by `draw`.
fn unary(
    name: &str,
    shape: [usize; 2],
    draw: fn(&mut ChaCha8Rng, &[usize]) -> Tensor,
    op: fn(&mut Tape, Var) -> Result<Var>,
) -> GradCase {
    GradCase::new(name, 4, move |rng| {
        let x = draw(rng, &shape);
        let mut probe = Tape::new();
        let xv = probe.constant(x.clone());
        let yv = op(&mut probe, xv)?;
        let w = signed(rng, probe.value(yv).shape());
        check_gradients(|t, v| { let y = op(t, v[0])?; project(t, y, &w) }, &[x], STEP, FLOOR)
    })
}

fn encoder_case() -> GradCase {
    GradCase::new("encoder_end_to_end", 2, |rng| {
        let vit = VitConfig {
            image_size: 16,
            patch_size: 8,
            dim: 8,
            depth: 1,
            heads: 2,
            pe_mode: PeMode::Cpe,
            cpe: CpeConfig::for_grid(2),
            ..VitConfig::default()
        };
        let text = TextConfig { vocab_size: 12, max_len: 4, dim: 8, depth: 1, heads: 2, mlp_ratio: 2 };
        let model = DualEncoder::with_init(vit, text, rng.gen(), BlockInit::Random)?;
        let images: Vec<Tensor> = (0..2).map(|_| uniform(rng, &[16, 16, 3], 0.0, 1.0)).collect();
        let captions: Vec<Vec<usize>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(1..12)).collect()).collect();
        let crop_seed: u64 = rng.gen();
        let pe = model.pe_param().expect("cpe model");
        let embed = model.params.find("text.embed").expect("text embedding");
        let tau = model.log_tau_param();
        let inputs = [model.params.get(pe).clone(), model.params.get(embed).clone(), model.params.get(tau).clone()];
        check_gradients(
            |t, v| {
                let mut bound = model.bind(t, |_| false);
                bound.replace(pe, v[0]);
                bound.replace(embed, v[1]);
                bound.replace(tau, v[2]);
                let mut crop = ChaCha8Rng::seed_from_u64(crop_seed);
                let mut img = Vec::new();
                let mut txt = Vec::new();
                for (im, cap) in images.iter().zip(&captions) {
                    img.push(model.image_forward(t, &bound, im, PeMode::Cpe, Some(&mut crop))?);
                    txt.push(model.text_forward(t, &bound, cap)?);
                }
                let vv = t.concat_rows(&img)?;
                let ll = t.concat_rows(&txt)?;
                let temp = model.temperature(t, &bound);
                total_contrastive_loss(t, vv, ll, temp, &LossConfig::focal(2.0))
            },
            &inputs,
            STEP,
            FLOOR,
        )
    })
}

fn attention_case() -> GradCase {
    GradCase::new("attention_block", 3, |rng| {
        let mut store = ParamStore::new();
        let blk = AttentionBlock::new(&mut store, rng, "blk", 8, 2, 16, ParamGroup::Backbone, BlockInit::Random)?;
        let x = signed(rng, &[5, 8]);
        let w = signed(rng, &[5, 8]);
        let wq = blk.q.w;
        let fc1 = blk.fc1.w;
        let inputs = [x, store.get(wq).clone(), store.get(fc1).clone()];
        check_gradients(
            |t, v| {
                let mut bound = store.bind(t, |_| false);
                bound.replace(wq, v[1]);
                bound.replace(fc1, v[2]);
                let y = blk.forward(t, &bound, v[0], None)?;
                project(t, y, &w)
            },
            &inputs,
            STEP,
            FLOOR,
        )
    })
}

fn loss_case(name: &str, build: fn(&mut Tape, Var, Var, Var) -> Result<Var>) -> GradCase {
    GradCase::new(name, 4, move |rng| {
        let b = rng.gen_range(2..=5);
        let v = signed(rng, &[b, 6]);
        let l = signed(rng, &[b, 6]);
        let tau = uniform(rng, &[1], 0.2, 2.0);
        check_gradients(
            |t, x| {
                let vn = t.l2_normalize(x[0], 1e-12)?;
                let ln = t.l2_normalize(x[1], 1e-12)?;
                build(t, vn, ln, x[2])
            },
            &[v, l, tau],
            STEP,
            FLOOR,
        )
    })
}

pub fn default_cases() -> Vec<GradCase> {
    let mut cases = vec![
        GradCase::new("matmul", 4, |rng| {
            let (a, b, w) = (signed(rng, &[3, 4]), signed(rng, &[4, 2]), signed(rng, &[3, 2]));
            check_gradients(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, &w) }, &[a, b], STEP, FLOOR)
        }),
        unary("transpose", [3, 2], signed, |t, x| {
            let y = t.transpose(x)?;
            let s = t.mul(y, y)?;
            t.transpose(s)
        }),
        GradCase::new("add_sub_mul", 4, |rng| {
            let (a, b, w) = (signed(rng, &[2, 3]), signed(rng, &[2, 3]), signed(rng, &[2, 3]));
            check_gradients(
                |t, v| {
                    let s = t.add(v[0], v[1])?;
                    let d = t.sub(v[0], v[1])?;
                    let y = t.mul(s, d)?;
                    project(t, y, &w)
                },
                &[a, b],
                STEP,
                FLOOR,
            )
        }),
        GradCase::new("row_broadcast", 4, |rng| {
            let (x, g, b, w) = (signed(rng, &[3, 4]), signed(rng, &[1, 4]), signed(rng, &[1, 4]), signed(rng, &[3, 4]));
            check_gradients(
                |t, v| {
                    let m = t.mul_row(v[0], v[1])?;
                    let y = t.add_row(m, v[2])?;
                    project(t, y, &w)
                },
                &[x, g, b],
                STEP,
                FLOOR,
            )
        }),
        GradCase::new("div_col", 4, |rng| {
            let (x, c, w) = (signed(rng, &[3, 4]), positive(rng, &[3, 1]), signed(rng, &[3, 4]));
            check_gradients(|t, v| { let y = t.div_col(v[0], v[1])?; project(t, y, &w) }, &[x, c], STEP, FLOOR)
        }),
        GradCase::new("scale_div_scalar", 4, |rng| {
            let (x, s, w) = (signed(rng, &[2, 3]), positive(rng, &[1]), signed(rng, &[2, 3]));
            check_gradients(
                |t, v| {
                    let a = t.scale(v[0], -1.7);
                    let y = t.div_scalar(a, v[1])?;
                    project(t, y, &w)
                },
                &[x, s],
                STEP,
                FLOOR,
            )
        }),
        unary("exp", [2, 3], signed, |t, x| Ok(t.exp(x))),
        unary("sigmoid", [2, 3], signed, |t, x| Ok(t.sigmoid(x))),
        unary("softplus", [2, 3], signed, |t, x| Ok(t.softplus(x))),
        unary("powf", [2, 3], positive, |t, x| {
            let a = t.powf(x, 2.5);
            let b = t.powf(x, 2.0);
            t.add(a, b)
        }),
        unary("gelu", [2, 3], signed, |t, x| Ok(t.gelu(x))),
        unary("softmax_rows", [3, 4], signed, |t, x| Ok(t.softmax_rows(x))),
        unary("log_softmax_rows", [3, 4], signed, |t, x| Ok(t.log_softmax_rows(x))),
        unary("row_norms", [3, 4], signed, |t, x| Ok(t.row_norms(x, 1e-12))),
        unary("l2_normalize", [3, 4], signed, |t, x| t.l2_normalize(x, 1e-12)),
        unary("layer_norm_rows", [3, 5], signed, |t, x| Ok(t.layer_norm_rows(x, 1e-5))),
        unary("sum_mean", [2, 3], signed, |t, x| {
            let sq = t.mul(x, x)?;
            let m = t.mean(sq);
            let s = t.sum(x);
            t.mul(m, s)
        }),
        unary("slice_concat_cols", [3, 5], signed, |t, x| {
            let a = t.slice_cols(x, 0, 2)?;
            let b = t.slice_cols(x, 2, 3)?;
            let bb = t.mul(b, b)?;
            t.concat_cols(&[bb, a])
        }),
        unary("concat_rows_reshape", [2, 6], signed, |t, x| {
            let e = t.exp(x);
            let r = t.reshape(e, &[4, 3])?;
            let x2 = t.reshape(x, &[4, 3])?;
            let y = t.concat_rows(&[r, x2])?;
            t.reshape(y, &[6, 4])
        }),
        GradCase::new("gather_rows", 4, |rng| {
            let table = signed(rng, &[5, 3]);
            let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let w = signed(rng, &[4, 3]);
            check_gradients(
                |t, v| {
                    let g = t.gather_rows(v[0], &ids)?;
                    let y = t.mul(g, g)?;
                    project(t, y, &w)
                },
                &[table],
                STEP,
                FLOOR,
            )
        }),
        GradCase::new("row_mix_resize", 4, |rng| {
            let x = signed(rng, &[6, 2]);
            let map = Rc::new(resize_map(2, 3, 4, 5)?);
            let w = signed(rng, &[20, 2]);
            check_gradients(|t, v| { let y = t.row_mix(v[0], map.clone())?; project(t, y, &w) }, &[x], STEP, FLOOR)
        }),
        loss_case("softmax_loss", softmax_contrastive_loss),
        loss_case("focal_loss_gamma2", |t, v, l, tau| focal_contrastive_loss(t, v, l, tau, 2.0, FocalNormalize::PerQuery)),
        loss_case("focal_loss_gamma0_per_pair", |t, v, l, tau| {
            focal_contrastive_loss(t, v, l, tau, 0.0, FocalNormalize::PerPair)
        }),
        loss_case("focal_loss_gamma1.5", |t, v, l, tau| focal_contrastive_loss(t, v, l, tau, 1.5, FocalNormalize::PerQuery)),
        loss_case("total_loss_softmax", |t, v, l, tau| total_contrastive_loss(t, v, l, tau, &LossConfig::softmax())),
        loss_case("total_loss_focal", |t, v, l, tau| total_contrastive_loss(t, v, l, tau, &LossConfig::focal(2.0))),
        GradCase::new("cropped_pe", 4, |rng| {
            let cfg = CpeConfig::for_grid(3);
            let region = sample_crop_region(rng, &cfg);
            let grid = signed(rng, &[9, 4]);
            let w = signed(rng, &[9, 4]);
            check_gradients(|t, v| { let y = cpe_on_tape(t, v[0], 3, 3, &cfg, &region)?; project(t, y, &w) }, &[grid], STEP, FLOOR)
        }),
        GradCase::new("region_embed", 4, |rng| {
            let fm = signed(rng, &[16, 3]);
            let x1 = rng.gen_range(0.0..0.6);
            let y1 = rng.gen_range(0.0..0.6);
            let bx = RegionBox::new(x1, y1, x1 + rng.gen_range(0.2..0.4), y1 + rng.gen_range(0.2..0.4));
            let w = signed(rng, &[1, 3]);
            check_gradients(
                |t, v| { let y = region_embed_on_tape(t, v[0], 4, 4, &bx, 2)?; project(t, y, &w) },
                &[fm],
                STEP,
                FLOOR,
            )
        }),
        GradCase::new("normalized_layer", 4, |rng| {
            let (x, wt, b, w) = (signed(rng, &[3, 4]), signed(rng, &[5, 4]), signed(rng, &[1, 5]), signed(rng, &[3, 5]));
            check_gradients(
                |t, v| { let y = normalized_layer_on_tape(t, v[0], v[1], v[2], 20.0, DEFAULT_EPS)?; project(t, y, &w) },
                &[x, wt, b],
                STEP,
                FLOOR,
            )
        }),
    ];
    cases.push(attention_case());
    cases.push(encoder_case());
    cases
}
