//! Samples, synthetic generation, PGM I/O, augmentation, noise injection and
//! on-disk dataset layout (`images/`, `masks/`, split lists).

mod pgm;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub use pgm::{binarize, decode_pgm, encode_pgm, read_pgm, write_mask_pgm, write_pgm};
pub use synth::{generate, generate_one, GenSpec, BACKGROUND_LEVEL};

/// One grayscale image with its binary mask, both `[1, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.rank() != 3 || self.image.shape()[0] != 1 || self.image.shape() != self.mask.shape() {
            return Err(Error::Data(format!(
                "sample {}: image {:?} and mask {:?} must both be [1,H,W]",
                self.id,
                self.image.shape(),
                self.mask.shape()
            )));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("sample {}: mask is not binary", self.id)));
        }
        Ok(())
    }
}

/// Standard normal pairs by the Box-Muller transform.
pub fn box_muller(rng: &mut impl Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let th = 2.0 * std::f64::consts::PI * u2;
    (r * th.cos(), r * th.sin())
}

/// Seeded standard-normal draws, `n` of them.
pub fn gaussian_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let (a, b) = box_muller(&mut rng);
        out.push(a);
        out.push(b);
    }
    out.truncate(n);
    out
}

/// `clamp(x + sigma * N(0, 1), 0, 1)` elementwise.
pub fn add_gaussian_noise(x: &Tensor<f64>, sigma: f64, seed: u64) -> Result<Tensor<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let z = gaussian_noise(x.numel(), seed);
    let data = x.data().iter().zip(z).map(|(&v, n)| (v + sigma * n).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape(), data)
}

/// One draw of the flip/rotation augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
}

impl Transform {
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Apply to a `[C, H, W]` tensor: h-flip, then v-flip, then rotation.
    pub fn apply<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = match t.shape() {
            &[c, h, w] => [c, h, w],
            s => return Err(Error::shape("augment", format!("expected [C,H,W], got {s:?}"))),
        };
        let mut cur = t.clone();
        let (mut ch, mut cw) = (h, w);
        let remap = |src: &Tensor<T>, oh: usize, ow: usize, f: &dyn Fn(usize, usize) -> (usize, usize)| {
            let (sw, d) = (src.shape()[2], src.data());
            let sh = src.shape()[1];
            let mut out = Vec::with_capacity(c * oh * ow);
            for k in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let (si, sj) = f(i, j);
                        out.push(d[k * sh * sw + si * sw + sj]);
                    }
                }
            }
            Tensor::new(&[c, oh, ow], out)
        };
        if self.hflip {
            cur = remap(&cur, ch, cw, &|i, j| (i, cw - 1 - j))?;
        }
        if self.vflip {
            cur = remap(&cur, ch, cw, &|i, j| (ch - 1 - i, j))?;
        }
        for _ in 0..self.quarter_turns % 4 {
            // Counter-clockwise: out[i][j] = in[j][W-1-i], output is W x H.
            let w_in = cw;
            cur = remap(&cur, cw, ch, &|i, j| (j, w_in - 1 - i))?;
            std::mem::swap(&mut ch, &mut cw);
        }
        Ok(cur)
    }
}

/// Apply one random flip/rotation draw identically to image and mask.
pub fn augment(s: &Sample, seed: u64) -> Result<Sample> {
    augment_with(s, Transform::draw(&mut ChaCha8Rng::seed_from_u64(seed)))
}

pub fn augment_with(s: &Sample, t: Transform) -> Result<Sample> {
    Ok(Sample {
        image: t.apply(&s.image)?,
        mask: t.apply(&s.mask)?,
        id: s.id.clone(),
    })
}

/// Stack samples into `[B,1,H,W]` image and mask batches.
pub fn collate<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut img = Vec::with_capacity(samples.len() * h * w);
    let mut msk = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != [1, h, w] || s.mask.shape() != [1, h, w] {
            return Err(Error::Data(format!("sample {} is {:?}, batch expects [1,{h},{w}]", s.id, s.image.shape())));
        }
        img.extend(s.image.data().iter().map(|&v| T::from_f64_lossy(v)));
        msk.extend(s.mask.data().iter().map(|&v| T::from_f64_lossy(v)));
    }
    let shape = [samples.len(), 1, h, w];
    Ok((Tensor::new(&shape, img)?, Tensor::new(&shape, msk)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (train, val, test)")))
    }
}

/// Split sizes for `count` samples: `floor(count/10)` each for validation and
/// test, the remainder for training.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let tenth = count / 10;
    (count - 2 * tenth, tenth, tenth)
}

/// Write `images/<id>.pgm`, `masks/<id>.pgm` and `train.txt`/`val.txt`/`test.txt`
/// with ids assigned to splits in order.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        s.validate()?;
        write_pgm(&s.image, dir.join("images").join(format!("{}.pgm", s.id)))?;
        write_mask_pgm(&s.mask, dir.join("masks").join(format!("{}.pgm", s.id)))?;
    }
    let (tr, va, _) = split_sizes(samples.len());
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let parts = [&ids[..tr], &ids[tr..tr + va], &ids[tr + va..]];
    for (split, part) in Split::ALL.into_iter().zip(parts) {
        let p = dir.join(format!("{}.txt", split.name()));
        let mut text = part.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn split_ids(dir: impl AsRef<Path>, split: Split) -> Result<Vec<String>> {
    let p = dir.as_ref().join(format!("{}.txt", split.name()));
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.pgm"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("masks").join(format!("{id}.pgm"))
}

pub fn load_sample(dir: impl AsRef<Path>, id: &str) -> Result<Sample> {
    let dir = dir.as_ref();
    let s = Sample {
        image: read_pgm(image_path(dir, id))?,
        mask: binarize(&read_pgm(mask_path(dir, id))?),
        id: id.to_string(),
    };
    s.validate()?;
    Ok(s)
}

/// All samples listed in a split file.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", dir.display())));
    }
    split_ids(dir, split)?.iter().map(|id| load_sample(dir, id)).collect()
}
