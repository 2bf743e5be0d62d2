//! Seeded synthetic captioned images.
//!
//! Each object is a 6x6 stamp (square, cross or circle) in one of six
//! channel masks, placed in one cell of a 4x4 position grid. Its caption is
//! three tokens: shape, color, position bin. Backgrounds are uniform noise in
//! `[0, 0.1]` on every channel.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::PAD_ID;
use crate::error::{Error, Result};
use crate::scoring::RegionBox;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const GRID: usize = 4;
pub const CELL: usize = IMAGE_SIZE / GRID;
pub const STAMP: usize = 6;
pub const NOISE_MAX: f64 = 0.1;

pub const NUM_SHAPES: usize = 3;
pub const NUM_COLORS: usize = 6;
pub const NUM_POSITIONS: usize = GRID * GRID;
pub const NUM_CATEGORIES: usize = NUM_SHAPES * NUM_COLORS;

pub const SHAPE_TOKEN_BASE: usize = 1;
pub const COLOR_TOKEN_BASE: usize = SHAPE_TOKEN_BASE + NUM_SHAPES;
pub const POSITION_TOKEN_BASE: usize = COLOR_TOKEN_BASE + NUM_COLORS;
/// Smallest vocabulary that covers every caption token.
pub const MIN_VOCAB: usize = POSITION_TOKEN_BASE + NUM_POSITIONS;
pub const CAPTION_LEN: usize = 3;

/// Categories (shape, color) held out of training captions.
/// Every shape and every color still occurs among the remaining ones.
pub const NOVEL_CATEGORIES: [usize; 4] = [2, 9, 12, 17];

const PLACEMENT_TRIES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Cross,
    Circle,
}

impl Shape {
    pub const ALL: [Shape; NUM_SHAPES] = [Shape::Square, Shape::Cross, Shape::Circle];

    pub fn index(self) -> usize {
        self as usize
    }

    fn covers(self, dy: usize, dx: usize) -> bool {
        let c = (STAMP as f64 - 1.0) / 2.0;
        let (y, x) = (dy as f64 - c, dx as f64 - c);
        match self {
            Shape::Square => true,
            Shape::Cross => y.abs() < 1.0 || x.abs() < 1.0,
            Shape::Circle => y * y + x * x <= 9.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Color {
    pub const ALL: [Color; NUM_COLORS] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta, Color::Cyan];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Per-channel intensity (R, G, B).
    pub fn mask(self) -> [f64; CHANNELS] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::Cyan => [0.0, 1.0, 1.0],
        }
    }
}

/// Ground truth for one rendered object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Attributes {
    pub shape: Shape,
    pub color: Color,
    /// Row-major cell of the 4x4 grid containing the object center.
    pub position: usize,
}

impl Attributes {
    pub fn new(shape: Shape, color: Color, position: usize) -> Result<Self> {
        if position >= NUM_POSITIONS {
            return Err(Error::Input(format!("position bin {position} outside 0..{NUM_POSITIONS}")));
        }
        Ok(Self { shape, color, position })
    }

    pub fn category(&self) -> usize {
        category_id(self.shape, self.color)
    }

    pub fn tokens(&self) -> [usize; CAPTION_LEN] {
        [
            SHAPE_TOKEN_BASE + self.shape.index(),
            COLOR_TOKEN_BASE + self.color.index(),
            POSITION_TOKEN_BASE + self.position,
        ]
    }
}

impl fmt::Display for Attributes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} {:?} at {}", self.color, self.shape, self.position)
    }
}

pub fn category_id(shape: Shape, color: Color) -> usize {
    shape.index() * NUM_COLORS + color.index()
}

pub fn category_parts(id: usize) -> Result<(Shape, Color)> {
    if id >= NUM_CATEGORIES {
        return Err(Error::Input(format!("category {id} outside 0..{NUM_CATEGORIES}")));
    }
    Ok((Shape::ALL[id / NUM_COLORS], Color::ALL[id % NUM_COLORS]))
}

pub fn is_novel(category: usize) -> bool {
    NOVEL_CATEGORIES.contains(&category)
}

pub fn base_categories() -> Vec<usize> {
    (0..NUM_CATEGORIES).filter(|&c| !is_novel(c)).collect()
}

/// Inverse of [`Attributes::tokens`]; trailing padding is allowed.
pub fn decode_tokens(tokens: &[usize]) -> Result<Attributes> {
    let len = tokens.iter().rposition(|&t| t != PAD_ID).map_or(0, |i| i + 1);
    let bad = || Error::Input(format!("{tokens:?} is not a caption"));
    let &[s, c, p] = &tokens[..len] else {
        return Err(bad());
    };
    let pick = |t: usize, base: usize, n: usize| (base..base + n).contains(&t).then(|| t - base);
    let shape = pick(s, SHAPE_TOKEN_BASE, NUM_SHAPES).ok_or_else(bad)?;
    let color = pick(c, COLOR_TOKEN_BASE, NUM_COLORS).ok_or_else(bad)?;
    let position = pick(p, POSITION_TOKEN_BASE, NUM_POSITIONS).ok_or_else(bad)?;
    Attributes::new(Shape::ALL[shape], Color::ALL[color], position)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub image: Tensor,
    pub tokens: Vec<usize>,
    pub attributes: Attributes,
}

fn noise_image<R: Rng>(rng: &mut R) -> Vec<f64> {
    (0..IMAGE_SIZE * IMAGE_SIZE * CHANNELS).map(|_| rng.gen::<f64>() * NOISE_MAX).collect()
}

/// Stamp an object with its top-left pixel at `(top, left)`.
fn stamp(img: &mut [f64], shape: Shape, color: Color, top: usize, left: usize) {
    let mask = color.mask();
    for dy in 0..STAMP {
        for dx in 0..STAMP {
            if shape.covers(dy, dx) {
                let at = ((top + dy) * IMAGE_SIZE + left + dx) * CHANNELS;
                img[at..at + CHANNELS].copy_from_slice(&mask);
            }
        }
    }
}

fn pair_from_rng(rng: &mut ChaCha8Rng, categories: &[usize]) -> SyntheticPair {
    let cat = categories[rng.gen_range(0..categories.len())];
    let (shape, color) = category_parts(cat).expect("valid category list");
    let position = rng.gen_range(0..NUM_POSITIONS);
    let jitter = CELL - STAMP;
    let top = (position / GRID) * CELL + rng.gen_range(0..=jitter);
    let left = (position % GRID) * CELL + rng.gen_range(0..=jitter);
    let mut img = noise_image(rng);
    stamp(&mut img, shape, color, top, left);
    let attributes = Attributes { shape, color, position };
    SyntheticPair {
        image: Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE, CHANNELS], img).expect("fixed size"),
        tokens: attributes.tokens().to_vec(),
        attributes,
    }
}

/// One captioned image over all 18 categories.
pub fn gen_pair(seed: u64) -> SyntheticPair {
    let all: Vec<usize> = (0..NUM_CATEGORIES).collect();
    pair_from_rng(&mut ChaCha8Rng::seed_from_u64(seed), &all)
}

/// Like [`gen_pair`] but drawing the category from `categories` only.
pub fn gen_pair_from(seed: u64, categories: &[usize]) -> Result<SyntheticPair> {
    if categories.is_empty() || categories.iter().any(|&c| c >= NUM_CATEGORIES) {
        return Err(Error::Input(format!("bad category list {categories:?}")));
    }
    Ok(pair_from_rng(&mut ChaCha8Rng::seed_from_u64(seed), categories))
}

/// Pair restricted to the base (non-held-out) categories.
pub fn gen_base_pair(seed: u64) -> SyntheticPair {
    pair_from_rng(&mut ChaCha8Rng::seed_from_u64(seed), &base_categories())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionObject {
    pub attributes: Attributes,
    /// Tight box in normalized image coordinates.
    pub bbox: RegionBox,
    pub tokens: Vec<usize>,
    pub objectness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionTask {
    pub image: Tensor,
    pub objects: Vec<RegionObject>,
    pub requested: usize,
}

impl RegionTask {
    /// True when fewer objects than requested could be placed.
    pub fn reduced(&self) -> bool {
        self.objects.len() < self.requested
    }

    /// Synthetic localization quality of an arbitrary box: the best
    /// centerness of its center inside any ground-truth box, 0 if none.
    pub fn objectness(&self, bx: &RegionBox) -> f64 {
        let c = bx.center();
        self.objects.iter().map(|o| o.bbox.centerness(c)).fold(0.0, f64::max)
    }
}

pub const MAX_REGION_OBJECTS: usize = 4;

/// `k` non-overlapping objects at free pixel positions, with one pixel of
/// clearance between stamps.
pub fn gen_region_task(seed: u64, k: usize) -> Result<RegionTask> {
    gen_region_task_from(seed, k, &(0..NUM_CATEGORIES).collect::<Vec<_>>())
}

pub fn gen_region_task_from(seed: u64, k: usize, categories: &[usize]) -> Result<RegionTask> {
    if k == 0 || k > MAX_REGION_OBJECTS {
        return Err(Error::Input(format!("region task needs 1..={MAX_REGION_OBJECTS} objects, got {k}")));
    }
    if categories.is_empty() || categories.iter().any(|&c| c >= NUM_CATEGORIES) {
        return Err(Error::Input(format!("bad category list {categories:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = noise_image(&mut rng);
    let mut placed: Vec<(usize, usize)> = Vec::new();
    let mut objects = Vec::new();
    let span = IMAGE_SIZE - STAMP;
    'objects: for _ in 0..k {
        let cat = categories[rng.gen_range(0..categories.len())];
        let (shape, color) = category_parts(cat)?;
        for _ in 0..PLACEMENT_TRIES {
            let top = rng.gen_range(0..=span);
            let left = rng.gen_range(0..=span);
            let clear = placed
                .iter()
                .all(|&(t, l)| top.abs_diff(t) > STAMP || left.abs_diff(l) > STAMP);
            if !clear {
                continue;
            }
            placed.push((top, left));
            stamp(&mut img, shape, color, top, left);
            let s = IMAGE_SIZE as f64;
            let bbox = RegionBox::new(left as f64 / s, top as f64 / s, (left + STAMP) as f64 / s, (top + STAMP) as f64 / s);
            let (cx, cy) = bbox.center();
            let position = ((cy * GRID as f64) as usize).min(GRID - 1) * GRID + ((cx * GRID as f64) as usize).min(GRID - 1);
            let attributes = Attributes { shape, color, position };
            objects.push(RegionObject {
                attributes,
                bbox,
                tokens: attributes.tokens().to_vec(),
                objectness: bbox.centerness((cx, cy)),
            });
            continue 'objects;
        }
        break;
    }
    Ok(RegionTask {
        image: Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE, CHANNELS], img)?,
        objects,
        requested: k,
    })
}

/// One CSV row per seed: `seed,shape,color,position,tok0,tok1,tok2`.
pub fn write_corpus_csv<W: Write>(seeds: impl IntoIterator<Item = u64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed", "shape", "color", "position", "tok0", "tok1", "tok2"])?;
    for seed in seeds {
        let p = gen_pair(seed);
        let a = p.attributes;
        let mut row = vec![seed.to_string(), a.shape.index().to_string(), a.color.index().to_string(), a.position.to_string()];
        row.extend(p.tokens.iter().map(|t| t.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
