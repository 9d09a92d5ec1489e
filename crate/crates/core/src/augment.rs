//! Augmentations used to build pseudo-classes for the self-supervised
//! encoder: stain jitter in HED space, random affine warps and pixelation.

use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floor for RGB values before taking optical density.
const OD_FLOOR: f64 = 1e-6;

/// Three-channel raster with values in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image extents must be positive"));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::invalid(format!(
                "image {height}x{width} needs {} values, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        let mut img = Self { height, width, data };
        img.clamp();
        Ok(img)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c.clamp(0.0, 1.0), height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let n = self.height * self.width;
        self.data[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64
    }

    fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Parameters of the augmentation family.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Scale/shift magnitude in HED space.
    pub hed_theta: f64,
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Translation magnitude as a fraction of the extent, drawn from this
    /// range with a random sign per axis.
    pub translate: (f64, f64),
    /// Shear drawn uniformly from `[-shear_deg, shear_deg]` on each axis.
    pub shear_deg: f64,
    pub pixelate_factor: usize,
    /// Probability of applying each of the three transforms.
    pub apply_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            hed_theta: 0.05,
            rotation_deg: 10.0,
            translate: (0.0, 0.1),
            shear_deg: 1.0,
            pixelate_factor: 2,
            apply_prob: 0.5,
        }
    }
}

impl AugmentSpec {
    /// No-op warp ranges.
    pub fn identity() -> Self {
        Self {
            hed_theta: 0.0,
            rotation_deg: 0.0,
            translate: (0.0, 0.0),
            shear_deg: 0.0,
            pixelate_factor: 1,
            apply_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hed_theta >= 0.0) {
            return Err(Error::invalid("hed_theta must be >= 0"));
        }
        if self.pixelate_factor == 0 {
            return Err(Error::invalid("pixelate factor must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::invalid("apply_prob must lie in [0, 1]"));
        }
        let (lo, hi) = self.translate;
        if lo < 0.0 || hi < lo {
            return Err(Error::invalid("translate range must satisfy 0 <= lo <= hi"));
        }
        Ok(())
    }
}

/// Stain vectors (rows: hematoxylin, eosin, DAB), each normalized to unit length.
pub static STAIN_MATRIX: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| {
    let raw: [[f64; 3]; 3] = [[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]];
    raw.map(|r| {
        let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        [r[0] / n, r[1] / n, r[2] / n]
    })
});

static STAIN_INVERSE: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&STAIN_MATRIX));

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 1, 2, 2), -c(1, 0, 2, 2), c(1, 0, 2, 1)],
        [-c(0, 1, 2, 2), c(0, 0, 2, 2), -c(0, 0, 2, 1)],
        [c(0, 1, 1, 2), -c(0, 0, 1, 2), c(0, 0, 1, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = cof[j][i] / det;
        }
    }
    inv
}

/// Optical density `-log10(max(rgb, ε))` mapped to stain concentrations:
/// `od = hed · STAIN_MATRIX`.
pub fn rgb_to_hed(rgb: [f64; 3]) -> [f64; 3] {
    let od = rgb.map(|v| -v.max(OD_FLOOR).log10());
    mat_vec_rows(&od, &STAIN_INVERSE)
}

pub fn hed_to_rgb(hed: [f64; 3]) -> [f64; 3] {
    let od = mat_vec_rows(&hed, &STAIN_MATRIX);
    od.map(|v| 10f64.powf(-v))
}

/// Row vector times matrix.
fn mat_vec_rows(v: &[f64; 3], m: &[[f64; 3]; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (j, o) in out.iter_mut().enumerate() {
        *o = v[0] * m[0][j] + v[1] * m[1][j] + v[2] * m[2][j];
    }
    out
}

/// Per-image stain perturbation: every HED channel becomes
/// `hed·(1 + u) + v` with `u, v ~ U[-theta, theta]`.
pub fn hed_jitter<R: Rng + ?Sized>(img: &ImageTensor, theta: f64, rng: &mut R) -> Result<ImageTensor> {
    if !(theta >= 0.0) {
        return Err(Error::invalid("hed jitter theta must be >= 0"));
    }
    if theta == 0.0 {
        return Ok(img.clone());
    }
    let mut scale = [1.0; 3];
    let mut shift = [0.0; 3];
    for c in 0..3 {
        scale[c] = 1.0 + rng.gen_range(-theta..=theta);
        shift[c] = rng.gen_range(-theta..=theta);
    }
    Ok(apply_hed_affine(img, scale, shift))
}

/// Applies a fixed per-channel HED scale/shift.
pub fn apply_hed_affine(img: &ImageTensor, scale: [f64; 3], shift: [f64; 3]) -> ImageTensor {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let rgb = [img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)];
            let mut hed = rgb_to_hed(rgb);
            for c in 0..3 {
                hed[c] = hed[c] * scale[c] + shift[c];
            }
            let back = hed_to_rgb(hed);
            for c in 0..3 {
                out.set(c, y, x, back[c].clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Concrete warp parameters, see [`sample_affine`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// Translation as fractions of width/height.
    pub translate: (f64, f64),
    pub shear_deg: (f64, f64),
}

pub fn sample_affine<R: Rng + ?Sized>(spec: &AugmentSpec, rng: &mut R) -> AffineParams {
    let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let rotation_deg = sym(rng, spec.rotation_deg);
    let (lo, hi) = spec.translate;
    let mag = |rng: &mut R| {
        let m = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    };
    let tx = mag(rng);
    let ty = mag(rng);
    let shear_deg = (sym(rng, spec.shear_deg), sym(rng, spec.shear_deg));
    AffineParams {
        rotation_deg,
        translate: (tx, ty),
        shear_deg,
    }
}

/// Warps `img` about its center with bilinear sampling and border replication.
///
/// The forward map sends a centered source coordinate `p` to `R·S·p + t`,
/// where `R = [[cos, sin], [-sin, cos]]` (counter-clockwise on screen, y down)
/// and `S = [[1, tan sx], [tan sy, 1]]`.
pub fn warp_affine(img: &ImageTensor, params: &AffineParams) -> ImageTensor {
    let (h, w) = (img.height, img.width);
    let phi = params.rotation_deg.to_radians();
    let (s, c) = phi.sin_cos();
    let rot = [[c, s], [-s, c]];
    let sh = [
        [1.0, params.shear_deg.0.to_radians().tan()],
        [params.shear_deg.1.to_radians().tan(), 1.0],
    ];
    let fwd = mat2_mul(&rot, &sh);
    let inv = mat2_inv(&fwd);
    let tx = params.translate.0 * w as f64;
    let ty = params.translate.1 * h as f64;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let mut out = img.clone();
    for oy in 0..h {
        for ox in 0..w {
            let px = ox as f64 - cx - tx;
            let py = oy as f64 - cy - ty;
            let sx = inv[0][0] * px + inv[0][1] * py + cx;
            let sy = inv[1][0] * px + inv[1][1] * py + cy;
            for ch in 0..3 {
                out.set(ch, oy, ox, bilinear(img, ch, sy, sx));
            }
        }
    }
    out
}

pub fn random_affine<R: Rng + ?Sized>(img: &ImageTensor, spec: &AugmentSpec, rng: &mut R) -> ImageTensor {
    let p = sample_affine(spec, rng);
    warp_affine(img, &p)
}

fn bilinear(img: &ImageTensor, ch: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = img.get(ch, y0, x0) * (1.0 - fx) + img.get(ch, y0, x1) * fx;
    let bot = img.get(ch, y1, x0) * (1.0 - fx) + img.get(ch, y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0)
}

fn mat2_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

fn mat2_inv(m: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

/// Average-pools `factor × factor` blocks, then upsamples by nearest neighbour.
pub fn pixelate(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor == 0 {
        return Err(Error::invalid("pixelate factor must be >= 1"));
    }
    if factor > img.height.min(img.width) {
        return Err(Error::invalid(format!(
            "pixelate factor {factor} exceeds image extent {}x{}",
            img.height, img.width
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    for ch in 0..3 {
        for by in (0..img.height).step_by(factor) {
            for bx in (0..img.width).step_by(factor) {
                let ys = by..(by + factor).min(img.height);
                let xs = bx..(bx + factor).min(img.width);
                let n = (ys.len() * xs.len()) as f64;
                let mut sum = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        sum += img.get(ch, y, x);
                    }
                }
                for y in ys.clone() {
                    for x in xs.clone() {
                        out.set(ch, y, x, sum / n);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Random member of the transformation family: each of pixelation, affine
/// warp and HED jitter is applied independently with `spec.apply_prob`, in
/// that order.
pub fn random_transform<R: Rng + ?Sized>(img: &ImageTensor, spec: &AugmentSpec, rng: &mut R) -> Result<ImageTensor> {
    let mut out = img.clone();
    if rng.gen_bool(spec.apply_prob) {
        let f = spec.pixelate_factor.min(img.height.min(img.width));
        out = pixelate(&out, f)?;
    }
    if rng.gen_bool(spec.apply_prob) {
        out = random_affine(&out, spec, rng);
    }
    if rng.gen_bool(spec.apply_prob) {
        out = hed_jitter(&out, spec.hed_theta, rng)?;
    }
    Ok(out)
}

/// Anchor / positive / negative images. Each anchor is its own pseudo-class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletBatch {
    pub anchors: Vec<ImageTensor>,
    pub positives: Vec<ImageTensor>,
    pub negatives: Vec<ImageTensor>,
    /// Pool index of each anchor (and its positive).
    pub anchor_source: Vec<usize>,
    /// Pool index of each negative; never equal to the row's anchor index.
    pub negative_source: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Builds `batch` triplets from `pool`. Anchors are drawn without
/// replacement while the pool lasts (then from a fresh permutation).
pub fn make_triplet_batch(pool: &[&ImageTensor], spec: &AugmentSpec, batch: usize, seed: u64) -> Result<TripletBatch> {
    if pool.len() < 2 {
        return Err(Error::invalid(format!(
            "triplet pool needs at least 2 images, got {}",
            pool.len()
        )));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TripletBatch::default();
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..batch {
        if order.is_empty() {
            order = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let a = order.pop().expect("refilled above");
        let mut n = rng.gen_range(0..pool.len() - 1);
        if n >= a {
            n += 1;
        }
        out.positives.push(random_transform(pool[a], spec, &mut rng)?);
        out.anchors.push(pool[a].clone());
        out.negatives.push(pool[n].clone());
        out.anchor_source.push(a);
        out.negative_source.push(n);
    }
    Ok(out)
}
