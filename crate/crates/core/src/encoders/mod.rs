//! Tiny dual encoder: a patch transformer for images and a token transformer
//! for captions, both mean-pooled and L2-normalized into a shared space.

mod block;
pub mod checkpoint;
mod params;

pub use block::{AttentionBlock, BlockInit, LayerNorm, Linear, LN_EPS};
pub use params::{Bound, Param, ParamGroup, ParamId, ParamStore};

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::pe::{cpe_on_tape, region_map, resize_on_tape, sample_crop_region, sincos_pe, CpeConfig, PEGrid};
use crate::tensor::Tensor;
use block::uniform_tensor;

pub const NORM_EPS: f64 = 1e-6;
/// Token id reserved for padding; trailing pads are ignored.
pub const PAD_ID: usize = 0;

/// How the image tower gets positional information.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeMode {
    /// Full learnable grid.
    Learnable,
    /// Learnable grid, randomly cropped and resized per image.
    Cpe,
    Sincos,
    None,
    /// Full learnable grid; the final feature map is randomly cropped and
    /// resized before pooling.
    FeatCropResize,
}

impl PeMode {
    pub const ALL: [PeMode; 5] = [PeMode::Learnable, PeMode::None, PeMode::Sincos, PeMode::FeatCropResize, PeMode::Cpe];

    pub fn has_learnable_grid(self) -> bool {
        matches!(self, PeMode::Learnable | PeMode::Cpe | PeMode::FeatCropResize)
    }

    pub fn needs_rng(self) -> bool {
        matches!(self, PeMode::Cpe | PeMode::FeatCropResize)
    }

    /// Mode used at inference: random crops only happen during pretraining.
    pub fn for_inference(self) -> PeMode {
        match self {
            PeMode::Cpe | PeMode::FeatCropResize => PeMode::Learnable,
            m => m,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            PeMode::Learnable => 0,
            PeMode::Cpe => 1,
            PeMode::Sincos => 2,
            PeMode::None => 3,
            PeMode::FeatCropResize => 4,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => PeMode::Learnable,
            1 => PeMode::Cpe,
            2 => PeMode::Sincos,
            3 => PeMode::None,
            4 => PeMode::FeatCropResize,
            c => return Err(Error::Format(format!("unknown PE mode code {c}"))),
        })
    }
}

impl fmt::Display for PeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeMode::Learnable => "learnable",
            PeMode::Cpe => "cpe",
            PeMode::Sincos => "sincos",
            PeMode::None => "none",
            PeMode::FeatCropResize => "feat_crop_resize",
        })
    }
}

impl FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "learnable" | "base" => PeMode::Learnable,
            "cpe" => PeMode::Cpe,
            "sincos" => PeMode::Sincos,
            "none" => PeMode::None,
            "feat_crop_resize" => PeMode::FeatCropResize,
            other => return Err(Error::Config(format!("unknown pe_mode {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pe_mode: PeMode,
    pub cpe: CpeConfig,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            pe_mode: PeMode::Cpe,
            cpe: CpeConfig::for_grid(4),
        }
    }
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("vit dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("vit channels and mlp_ratio must be positive".into()));
        }
        if self.pe_mode == PeMode::Sincos && self.dim % 4 != 0 {
            return Err(Error::Config(format!("sincos PE needs dim divisible by 4, got {}", self.dim)));
        }
        self.cpe.validate()?;
        if self.pe_mode == PeMode::Cpe && self.cpe.out_size != self.grid() {
            return Err(Error::Config(format!(
                "cpe out_size {} must equal the patch grid {}",
                self.cpe.out_size,
                self.grid()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { vocab_size: 64, max_len: 16, dim: 32, depth: 2, heads: 4, mlp_ratio: 4 }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.vocab_size < 2 {
            return Err(Error::Config("text max_len must be >= 1 and vocab_size >= 2".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("text dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("text mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Split an `H x W x C` image into `p x p` patches, one flattened row per
/// patch in raster order; within a patch values run `(dy, dx, channel)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return dim_err(format!("image must be HxWxC, got {:?}", image.shape()));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return dim_err(format!("{h}x{w} image is not divisible into {patch}x{patch} patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut data = Vec::with_capacity(h * w * c);
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..patch {
                let row = pr * patch + dy;
                let start = (row * w + pc * patch) * c;
                data.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::matrix(gh * gw, patch * patch * c, data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || h % patch != 0 || w % patch != 0 || patches.shape() != [(h / patch) * (w / patch), patch * patch * c] {
        return dim_err(format!("patches {:?} do not tile a {h}x{w}x{c} image", patches.shape()));
    }
    let gw = w / patch;
    let mut data = vec![0.0; h * w * c];
    for (p, row) in patches.data().chunks(patch * patch * c).enumerate() {
        let (pr, pc) = (p / gw, p % gw);
        for dy in 0..patch {
            let dst = ((pr * patch + dy) * w + pc * patch) * c;
            data[dst..dst + patch * c].copy_from_slice(&row[dy * patch * c..(dy + 1) * patch * c]);
        }
    }
    Tensor::new(vec![h, w, c], data)
}

#[derive(Clone, Debug)]
struct ImageTower {
    patch: Linear,
    pe: Option<ParamId>,
    blocks: Vec<AttentionBlock>,
}

#[derive(Clone, Debug)]
struct TextTower {
    embed: ParamId,
    pe: ParamId,
    blocks: Vec<AttentionBlock>,
}

/// Final image-tower activations before pooling, `(h*w) x D` on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub vit: VitConfig,
    pub text: TextConfig,
    pub params: ParamStore,
    image: ImageTower,
    text_tower: TextTower,
    log_tau: ParamId,
}

pub const DEFAULT_TAU: f64 = 0.07;

impl DualEncoder {
    /// Randomly initialized model; the same seed gives the same weights.
    pub fn new(vit: VitConfig, text: TextConfig, seed: u64) -> Result<Self> {
        Self::with_init(vit, text, seed, BlockInit::Random)
    }

    pub fn with_init(vit: VitConfig, text: TextConfig, seed: u64, init: BlockInit) -> Result<Self> {
        vit.validate()?;
        text.validate()?;
        if vit.dim != text.dim {
            return Err(Error::Config(format!("image dim {} and text dim {} must match", vit.dim, text.dim)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = vit.dim;
        let g = vit.grid();
        let bb = ParamGroup::Backbone;

        let patch_in = vit.patch_size * vit.patch_size * vit.channels;
        let patch = Linear::new(&mut params, &mut rng, "vit.patch", patch_in, d, bb, false);
        let pe = vit
            .pe_mode
            .has_learnable_grid()
            .then(|| params.add("vit.pe", uniform_tensor(&mut rng, &[g, g, d], 0.2), bb));
        let blocks = (0..vit.depth)
            .map(|i| AttentionBlock::new(&mut params, &mut rng, &format!("vit.blocks.{i}"), d, vit.heads, d * vit.mlp_ratio, bb, init))
            .collect::<Result<Vec<_>>>()?;
        let image = ImageTower { patch, pe, blocks };

        let tg = ParamGroup::Text;
        let embed = params.add("text.embed", uniform_tensor(&mut rng, &[text.vocab_size, d], 1.0), tg);
        let tpe = params.add("text.pe", uniform_tensor(&mut rng, &[text.max_len, d], 0.2), tg);
        let tblocks = (0..text.depth)
            .map(|i| AttentionBlock::new(&mut params, &mut rng, &format!("text.blocks.{i}"), d, text.heads, d * text.mlp_ratio, tg, init))
            .collect::<Result<Vec<_>>>()?;
        let text_tower = TextTower { embed, pe: tpe, blocks: tblocks };

        let log_tau = params.add("temperature.log_tau", Tensor::scalar(DEFAULT_TAU.ln()), ParamGroup::Temperature);
        Ok(Self { vit, text, params, image, text_tower, log_tau })
    }

    pub fn pe_param(&self) -> Option<ParamId> {
        self.image.pe
    }

    /// Learnable PE grid, if the model has one.
    pub fn pe_grid(&self) -> Option<PEGrid> {
        self.image.pe.map(|id| PEGrid::learnable(self.params.get(id).clone()).expect("pe is HxWxD"))
    }

    pub fn log_tau_param(&self) -> ParamId {
        self.log_tau
    }

    pub fn tau(&self) -> f64 {
        self.params.get(self.log_tau).item().exp()
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.params.get_mut(self.log_tau).data_mut()[0] = tau.ln();
    }

    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// `exp(log_tau)` on the tape.
    pub fn temperature(&self, tape: &mut Tape, bound: &Bound) -> Var {
        tape.exp(bound.var(self.log_tau))
    }

    /// Patch embedding + positional embedding + transformer blocks.
    pub fn image_features(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: &Tensor,
        pe_mode: PeMode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<FeatureMap> {
        if pe_mode.needs_rng() && rng.is_none() {
            return Err(Error::Contract(format!("pe_mode {pe_mode} needs a random generator")));
        }
        if pe_mode.has_learnable_grid() && self.image.pe.is_none() {
            return Err(Error::Contract(format!(
                "pe_mode {pe_mode} needs a learnable PE grid, model was built with {}",
                self.vit.pe_mode
            )));
        }
        if image.rank() != 3 || image.shape()[2] != self.vit.channels {
            return dim_err(format!("image {:?} does not have {} channels", image.shape(), self.vit.channels));
        }
        let p = self.vit.patch_size;
        let (gh, gw) = (image.shape()[0] / p, image.shape()[1] / p);
        let patches = tape.constant(patchify(image, p)?);
        let mut x = self.image.patch.forward(tape, bound, patches)?;
        let d = self.vit.dim;
        let g = self.vit.grid();

        match pe_mode {
            PeMode::Learnable | PeMode::FeatCropResize | PeMode::Cpe => {
                let pe_id = self.image.pe.expect("checked above");
                let flat = tape.reshape(bound.var(pe_id), &[g * g, d])?;
                let pe = if pe_mode == PeMode::Cpe {
                    if (gh, gw) != (self.vit.cpe.out_size, self.vit.cpe.out_size) {
                        return dim_err(format!(
                            "CPE emits a {0}x{0} grid but the image has {gh}x{gw} patches",
                            self.vit.cpe.out_size
                        ));
                    }
                    let region = sample_crop_region(rng.as_deref_mut().expect("checked above"), &self.vit.cpe);
                    cpe_on_tape(tape, flat, g, g, &self.vit.cpe, &region)?
                } else {
                    resize_on_tape(tape, flat, g, g, gh, gw)?
                };
                x = tape.add(x, pe)?;
            }
            PeMode::Sincos => {
                let grid = sincos_pe(gh, gw, d)?;
                let pe = tape.constant(grid.values.reshape(&[gh * gw, d])?);
                x = tape.add(x, pe)?;
            }
            PeMode::None => {}
        }

        for blk in &self.image.blocks {
            x = blk.forward(tape, bound, x, None)?;
        }

        if pe_mode == PeMode::FeatCropResize {
            let region = sample_crop_region(rng.as_deref_mut().expect("checked above"), &self.vit.cpe);
            let map = region_map(gh, gw, &region, gh, gw)?;
            x = tape.row_mix(x, Rc::new(map))?;
        }
        Ok(FeatureMap { var: x, height: gh, width: gw })
    }

    /// Global average pool + L2 normalization of a feature map; `1 x D`.
    pub fn pool(&self, tape: &mut Tape, fm: &FeatureMap) -> Result<Var> {
        let n = fm.height * fm.width;
        let avg = tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
        let pooled = tape.matmul(avg, fm.var)?;
        tape.l2_normalize(pooled, NORM_EPS)
    }

    pub fn image_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: &Tensor,
        pe_mode: PeMode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let fm = self.image_features(tape, bound, image, pe_mode, rng)?;
        self.pool(tape, &fm)
    }

    /// Validate ids and drop trailing padding.
    pub fn check_tokens<'a>(&self, tokens: &'a [usize]) -> Result<&'a [usize]> {
        let len = tokens.iter().rposition(|&t| t != PAD_ID).map_or(0, |i| i + 1);
        let ids = &tokens[..len];
        if ids.is_empty() {
            return Err(Error::Input("token sequence has no non-padding ids".into()));
        }
        if ids.len() > self.text.max_len {
            return Err(Error::Input(format!("{} tokens exceed max_len {}", ids.len(), self.text.max_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.text.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.text.vocab_size)));
        }
        if ids.contains(&PAD_ID) {
            return Err(Error::Input("padding id inside the token sequence".into()));
        }
        Ok(ids)
    }

    /// Token embedding + PE + blocks, mean over real tokens, L2 normalize; `1 x D`.
    pub fn text_forward(&self, tape: &mut Tape, bound: &Bound, tokens: &[usize]) -> Result<Var> {
        let ids = self.check_tokens(tokens)?;
        let n = ids.len();
        let emb = tape.gather_rows(bound.var(self.text_tower.embed), ids)?;
        let positions: Vec<usize> = (0..n).collect();
        let pe = tape.gather_rows(bound.var(self.text_tower.pe), &positions)?;
        let mut x = tape.add(emb, pe)?;
        for blk in &self.text_tower.blocks {
            x = blk.forward(tape, bound, x, None)?;
        }
        let avg = tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
        let pooled = tape.matmul(avg, x)?;
        tape.l2_normalize(pooled, NORM_EPS)
    }

    /// Value-only image embedding.
    pub fn embed_image(&self, image: &Tensor, pe_mode: PeMode, rng: Option<&mut dyn RngCore>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let e = self.image_forward(&mut tape, &bound, image, pe_mode, rng)?;
        Ok(tape.value(e).data().to_vec())
    }

    pub fn embed_text(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let e = self.text_forward(&mut tape, &bound, tokens)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Value-only `H x W x D` feature map under the inference PE mode.
    pub fn feature_map(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let fm = self.image_features(&mut tape, &bound, image, self.vit.pe_mode.for_inference(), None)?;
        let d = self.vit.dim;
        tape.value(fm.var).clone().reshape(&[fm.height, fm.width, d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_shapes_and_round_trip() {
        let img = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert_eq!(unpatchify(&p, 4, 4, 1, 2).unwrap(), img);

        let flat = Tensor::filled(&[6, 6, 2], 0.3);
        let p = patchify(&flat, 3).unwrap();
        for r in 1..4 {
            assert_eq!(p.row(r), p.row(0));
        }
        assert!(matches!(patchify(&flat, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn config_validation() {
        let bad = VitConfig { image_size: 30, ..VitConfig::default() };
        assert!(bad.validate().is_err());
        let bad = VitConfig { heads: 5, ..VitConfig::default() };
        assert!(bad.validate().is_err());
        let t = TextConfig { dim: 16, ..TextConfig::default() };
        assert!(DualEncoder::new(VitConfig::default(), t, 0).is_err());
    }

    #[test]
    fn pe_mode_names_round_trip() {
        for m in PeMode::ALL {
            assert_eq!(m.to_string().parse::<PeMode>().unwrap(), m);
            assert_eq!(PeMode::from_code(m.code()).unwrap(), m);
        }
        assert!("rope".parse::<PeMode>().is_err());
    }

    #[test]
    fn cpe_without_rng_is_contract_error() {
        let m = DualEncoder::new(VitConfig::default(), TextConfig::default(), 0).unwrap();
        let img = Tensor::filled(&[32, 32, 3], 0.5);
        assert!(matches!(m.embed_image(&img, PeMode::Cpe, None), Err(Error::Contract(_))));
        let none = DualEncoder::new(VitConfig { pe_mode: PeMode::None, ..VitConfig::default() }, TextConfig::default(), 0).unwrap();
        assert!(matches!(none.embed_image(&img, PeMode::Learnable, None), Err(Error::Contract(_))));
    }

    #[test]
    fn token_validation() {
        let m = DualEncoder::new(VitConfig::default(), TextConfig::default(), 0).unwrap();
        assert!(matches!(m.embed_text(&[3, 64]), Err(Error::Input(_))));
        assert!(matches!(m.embed_text(&[0, 0]), Err(Error::Input(_))));
        assert!(matches!(m.embed_text(&[3, 0, 4]), Err(Error::Input(_))));
        assert!(matches!(m.embed_text(&[1; 17]), Err(Error::Input(_))));
        assert_eq!(m.embed_text(&[3, 4, 0, 0]).unwrap(), m.embed_text(&[3, 4]).unwrap());
    }

    #[test]
    fn larger_images_resize_the_grid() {
        let m = DualEncoder::new(VitConfig::default(), TextConfig::default(), 4).unwrap();
        let img = Tensor::filled(&[48, 64, 3], 0.25);
        let fm = m.feature_map(&img).unwrap();
        assert_eq!(fm.shape(), &[6, 8, 32]);
    }
}
