//! Positional-embedding grids and the cropped positional embedding (CPE).
//!
//! Grid coordinates use the align-corners convention throughout: normalized
//! coordinate 0 maps to the first cell center and 1 to the last, so a
//! full-region crop at matching sizes reproduces the grid exactly.
//!
//! During pretraining with CPE the learnable grid is bilinearly upsampled to
//! `upsample_size`, a random region is sampled in normalized coordinates, and
//! `out_size x out_size` points spanning that region are bilinearly read back
//! out. Both steps are linear, so they are expressed as [`RowMix`] maps and
//! gradients flow back to the learnable grid.

use std::io::{BufRead, Write};
use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{RowMix, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeKind {
    Learnable,
    Sincos,
    None,
}

/// `height x width x dim` grid of positional embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PEGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Tensor,
    pub kind: PeKind,
}

impl PEGrid {
    pub fn learnable(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return dim_err(format!("PE grid must be HxWxD, got {:?}", values.shape()));
        }
        let s = values.shape();
        Ok(Self { height: s[0], width: s[1], dim: s[2], values, kind: PeKind::Learnable })
    }

    pub fn none(height: usize, width: usize, dim: usize) -> Self {
        Self { height, width, dim, values: Tensor::zeros(&[height, width, dim]), kind: PeKind::None }
    }

    /// The `(row, col)` embedding vector.
    pub fn at(&self, r: usize, c: usize) -> &[f64] {
        let start = (r * self.width + c) * self.dim;
        &self.values.data()[start..start + self.dim]
    }

    fn with_values(&self, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self {
            height: h,
            width: w,
            dim: self.dim,
            values: Tensor::new(vec![h, w, self.dim], data)?,
            kind: self.kind,
        })
    }
}

/// Normalized crop rectangle inside the unit square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRegion {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CropRegion {
    pub const FULL: CropRegion = CropRegion { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let r = Self { x1, y1, x2, y2 };
        if !r.is_ordered() {
            return Err(Error::Input(format!("invalid region {r:?}")));
        }
        Ok(r)
    }

    pub fn is_ordered(&self) -> bool {
        (0.0..1.0).contains(&self.x1)
            && (0.0..1.0).contains(&self.y1)
            && self.x2 > self.x1
            && self.y2 > self.y1
            && self.x2 <= 1.0
            && self.y2 <= 1.0
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Width over height.
    pub fn aspect(&self) -> f64 {
        self.width() / self.height()
    }

    pub fn satisfies(&self, cfg: &CpeConfig) -> bool {
        let (a, s) = (self.aspect(), self.area());
        self.is_ordered()
            && s >= cfg.scale_range.0
            && s <= cfg.scale_range.1
            && a >= cfg.aspect_range.0
            && a <= cfg.aspect_range.1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpeConfig {
    pub upsample_size: usize,
    pub scale_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub out_size: usize,
    pub max_rejection_attempts: usize,
}

impl Default for CpeConfig {
    /// 14x14 pretraining grid, 64x64 upsampling, scale in [0.1, 1], aspect in [0.5, 2].
    fn default() -> Self {
        Self {
            upsample_size: 64,
            scale_range: (0.1, 1.0),
            aspect_range: (0.5, 2.0),
            out_size: 14,
            max_rejection_attempts: 100,
        }
    }
}

impl CpeConfig {
    /// Defaults scaled for an `n x n` grid: upsample by 4, read back at `n`.
    pub fn for_grid(n: usize) -> Self {
        Self { upsample_size: 4 * n, out_size: n, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (smin, smax) = self.scale_range;
        let (amin, amax) = self.aspect_range;
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return Err(Error::Config(format!("cpe scale range {:?} must lie in (0, 1]", self.scale_range)));
        }
        if !(amin > 0.0 && amin <= amax && amax.is_finite()) {
            return Err(Error::Config(format!("cpe aspect range {:?} must be positive", self.aspect_range)));
        }
        if self.out_size == 0 || self.out_size > self.upsample_size {
            return Err(Error::Config(format!(
                "cpe out_size {} must be in 1..={}",
                self.out_size, self.upsample_size
            )));
        }
        if self.max_rejection_attempts == 0 {
            return Err(Error::Config("cpe max_rejection_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Bilinear taps at continuous index position `(y, x)` on an `h x w` grid.
/// Positions are clamped to the grid; zero weights are dropped.
pub fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> Vec<(usize, f64)> {
    fn axis(n: usize, p: f64) -> [(usize, f64); 2] {
        let p = p.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        if i0 >= n - 1 {
            return [(n - 1, 1.0), (n - 1, 0.0)];
        }
        let f = p - i0 as f64;
        [(i0, 1.0 - f), (i0 + 1, f)]
    }
    let mut taps = Vec::with_capacity(4);
    for (r, wy) in axis(h, y) {
        for (c, wx) in axis(w, x) {
            let wgt = wy * wx;
            if wgt != 0.0 {
                taps.push((r * w + c, wgt));
            }
        }
    }
    taps
}

/// Position `k` of `n` evenly spaced samples from `lo` to `hi` inclusive;
/// a single sample sits at the midpoint.
fn lattice(lo: f64, hi: f64, k: usize, n: usize) -> f64 {
    if n == 1 {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * k as f64 / (n - 1) as f64
    }
}

/// Align-corners bilinear resize of an `in_h x in_w` grid to `out_h x out_w`.
pub fn resize_map(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<RowMix> {
    region_map(in_h, in_w, &CropRegion::FULL, out_h, out_w)
}

/// `out_h x out_w` bilinear samples spanning `region` (corners included).
pub fn region_map(in_h: usize, in_w: usize, region: &CropRegion, out_h: usize, out_w: usize) -> Result<RowMix> {
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return dim_err(format!("resample {in_h}x{in_w} -> {out_h}x{out_w} has a zero side"));
    }
    let (ylo, yhi) = (region.y1 * (in_h - 1) as f64, region.y2 * (in_h - 1) as f64);
    let (xlo, xhi) = (region.x1 * (in_w - 1) as f64, region.x2 * (in_w - 1) as f64);
    let mut taps = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let y = lattice(ylo, yhi, i, out_h);
        for j in 0..out_w {
            let x = lattice(xlo, xhi, j, out_w);
            taps.push(bilinear_taps(in_h, in_w, y, x));
        }
    }
    Ok(RowMix { in_rows: in_h * in_w, taps })
}

/// Full CPE resampling as one map: upsample to `cfg.upsample_size`, then read
/// `cfg.out_size^2` points spanning `region`.
pub fn cpe_map(h: usize, w: usize, cfg: &CpeConfig, region: &CropRegion) -> Result<RowMix> {
    let up = resize_map(h, w, cfg.upsample_size, cfg.upsample_size)?;
    let crop = region_map(cfg.upsample_size, cfg.upsample_size, region, cfg.out_size, cfg.out_size)?;
    up.then(&crop)
}

pub fn bilinear_resize(grid: &PEGrid, out_h: usize, out_w: usize) -> Result<PEGrid> {
    let map = resize_map(grid.height, grid.width, out_h, out_w)?;
    grid.with_values(out_h, out_w, map.apply(grid.values.data(), grid.dim))
}

/// Draw a crop region.
///
/// RNG draw order per attempt: `x1`, `y1`, then `x2 = x1 + (1 - x1) u`,
/// `y2 = y1 + (1 - y1) u'`, each `u` from `rng.gen::<f64>()`. Attempts that
/// violate the scale or aspect limits are rejected; after
/// `max_rejection_attempts` failures the full region is returned.
pub fn sample_crop_region<R: Rng + ?Sized>(rng: &mut R, cfg: &CpeConfig) -> CropRegion {
    for _ in 0..cfg.max_rejection_attempts {
        let x1: f64 = rng.gen();
        let y1: f64 = rng.gen();
        let x2 = x1 + (1.0 - x1) * rng.gen::<f64>();
        let y2 = y1 + (1.0 - y1) * rng.gen::<f64>();
        let r = CropRegion { x1, y1, x2, y2 };
        if r.satisfies(cfg) {
            return r;
        }
    }
    CropRegion::FULL
}

/// Sample a region and resample a learnable grid through it.
pub fn cropped_positional_embedding<R: Rng + ?Sized>(grid: &PEGrid, cfg: &CpeConfig, rng: &mut R) -> Result<PEGrid> {
    if grid.kind != PeKind::Learnable {
        return Err(Error::Contract(format!("CPE needs a learnable grid, got {:?}", grid.kind)));
    }
    let region = sample_crop_region(rng, cfg);
    let map = cpe_map(grid.height, grid.width, cfg, &region)?;
    grid.with_values(cfg.out_size, cfg.out_size, map.apply(grid.values.data(), grid.dim))
}

/// Tape version of the CPE path; `grid` is `(h*w) x dim` and the result is
/// `(out_size^2) x dim`.
pub fn cpe_on_tape(tape: &mut Tape, grid: Var, h: usize, w: usize, cfg: &CpeConfig, region: &CropRegion) -> Result<Var> {
    let map = cpe_map(h, w, cfg, region)?;
    tape.row_mix(grid, Rc::new(map))
}

/// Tape version of [`bilinear_resize`] on an `(h*w) x dim` matrix.
pub fn resize_on_tape(tape: &mut Tape, grid: Var, h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Var> {
    if (h, w) == (out_h, out_w) {
        return Ok(grid);
    }
    tape.row_mix(grid, Rc::new(resize_map(h, w, out_h, out_w)?))
}

/// Fixed 2-D sinusoidal embeddings. Channel layout per position:
/// `[sin(r w_k), cos(r w_k), sin(c w_k), cos(c w_k)]` with
/// `w_k = 10000^(-k / (d/4))`, `k < d/4`.
pub fn sincos_pe(h: usize, w: usize, d: usize) -> Result<PEGrid> {
    if d == 0 || d % 4 != 0 {
        return dim_err(format!("sincos PE dim {d} must be a positive multiple of 4"));
    }
    if h == 0 || w == 0 {
        return dim_err("sincos PE grid has a zero side");
    }
    let q = d / 4;
    let freqs: Vec<f64> = (0..q).map(|k| 10000f64.powf(-(k as f64) / q as f64)).collect();
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            data.extend(freqs.iter().map(|f| (r as f64 * f).sin()));
            data.extend(freqs.iter().map(|f| (r as f64 * f).cos()));
            data.extend(freqs.iter().map(|f| (c as f64 * f).sin()));
            data.extend(freqs.iter().map(|f| (c as f64 * f).cos()));
        }
    }
    Ok(PEGrid { height: h, width: w, dim: d, values: Tensor::new(vec![h, w, d], data)?, kind: PeKind::Sincos })
}

/// Cosine similarity of every grid position against every other:
/// `tile(r, c)[i, j] = cos(pe[r, c], pe[i, j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    values: Vec<f64>,
}

impl SimilarityMap {
    pub fn tile(&self, r: usize, c: usize) -> &[f64] {
        let n = self.height * self.width;
        let t = r * self.width + c;
        &self.values[t * n..(t + 1) * n]
    }

    pub fn get(&self, r: usize, c: usize, i: usize, j: usize) -> f64 {
        self.tile(r, c)[i * self.width + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Positions whose embedding has zero norm get similarity 0 against
/// everything, including themselves.
pub fn pe_similarity_map(grid: &PEGrid) -> SimilarityMap {
    let n = grid.height * grid.width;
    let d = grid.dim;
    let data = grid.values.data();
    let norms: Vec<f64> = (0..n)
        .map(|p| data[p * d..(p + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut values = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let s = if norms[a] == 0.0 || norms[b] == 0.0 {
                0.0
            } else if a == b {
                1.0
            } else {
                let dot: f64 = data[a * d..(a + 1) * d].iter().zip(&data[b * d..(b + 1) * d]).map(|(x, y)| x * y).sum();
                (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0)
            };
            values[a * n + b] = s;
            values[b * n + a] = s;
        }
    }
    SimilarityMap { height: grid.height, width: grid.width, values }
}

/// One block per tile in row-major tile order; each block is `height` lines of
/// `width` comma-separated values; blocks are separated by a blank line.
pub fn write_similarity_csv<W: Write>(map: &SimilarityMap, mut out: W) -> Result<()> {
    let tiles = map.height * map.width;
    for t in 0..tiles {
        if t > 0 {
            writeln!(out)?;
        }
        let tile = map.tile(t / map.width, t % map.width);
        for row in tile.chunks(map.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
    }
    Ok(())
}

pub fn parse_similarity_csv<R: BufRead>(input: R) -> Result<SimilarityMap> {
    let mut blocks: Vec<Vec<Vec<f64>>> = vec![Vec::new()];
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            if !blocks.last().is_some_and(Vec::is_empty) {
                blocks.push(Vec::new());
            }
            continue;
        }
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad value {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        blocks.last_mut().expect("non-empty").push(row);
    }
    if blocks.last().is_some_and(Vec::is_empty) {
        blocks.pop();
    }
    let height = blocks.first().map_or(0, Vec::len);
    let width = blocks.first().and_then(|b| b.first()).map_or(0, Vec::len);
    if height == 0 || width == 0 || blocks.len() != height * width {
        return Err(Error::Format(format!(
            "expected {}x{} tiles of {height}x{width}, found {} blocks",
            height, width, blocks.len()
        )));
    }
    let mut values = Vec::with_capacity(height * width * height * width);
    for b in &blocks {
        if b.len() != height || b.iter().any(|r| r.len() != width) {
            return Err(Error::Format("ragged similarity tile".into()));
        }
        values.extend(b.iter().flatten());
    }
    Ok(SimilarityMap { height, width, values })
}

/// Gray level for a cosine in [-1, 1].
pub fn similarity_gray(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

/// Tiles laid out row-major like the patch grid, separated by 1-pixel white
/// gutters. Returns `(image_width, image_height, pixels)`.
pub fn similarity_pgm_pixels(map: &SimilarityMap) -> (usize, usize, Vec<u8>) {
    let (h, w) = (map.height, map.width);
    let img_w = w * w + (w - 1);
    let img_h = h * h + (h - 1);
    let mut px = vec![255u8; img_w * img_h];
    for r in 0..h {
        for c in 0..w {
            let tile = map.tile(r, c);
            for i in 0..h {
                for j in 0..w {
                    let y = r * (h + 1) + i;
                    let x = c * (w + 1) + j;
                    px[y * img_w + x] = similarity_gray(tile[i * w + j]);
                }
            }
        }
    }
    (img_w, img_h, px)
}

/// Binary (P5) PGM.
pub fn write_similarity_pgm<W: Write>(map: &SimilarityMap, mut out: W) -> Result<()> {
    let (w, h, px) = similarity_pgm_pixels(map);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(&px)?;
    Ok(())
}
