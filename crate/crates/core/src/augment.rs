//! Label-preserving random affine augmentation of training images.
//!
//! Rotation, horizontal flip, shift, shear and zoom are folded into one
//! affine map about the image centre. Each output pixel is sampled
//! bilinearly from the source; coordinates outside the source repeat the
//! nearest edge pixel, so outputs never leave the input's value range.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{bilinear_sample, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation drawn from `U(-max, max)` degrees.
    pub rotation_deg_max: f64,
    /// Mirror left-right with probability 0.5.
    pub horizontal_flip: bool,
    /// Shift drawn from `U(-max, max)` times the extent, per axis.
    pub shift_frac_max: f64,
    /// Horizontal shear factor drawn from `U(-max, max)`.
    pub shear_frac_max: f64,
    /// Per-axis scale drawn from `U(1 - max, 1 + max)`.
    pub zoom_frac_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            rotation_deg_max: 40.0,
            horizontal_flip: true,
            shift_frac_max: 0.2,
            shear_frac_max: 0.2,
            zoom_frac_max: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    /// Every transform off; sampling always yields the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            enabled: true,
            rotation_deg_max: 0.0,
            horizontal_flip: false,
            shift_frac_max: 0.0,
            shear_frac_max: 0.0,
            zoom_frac_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mags = [
            ("rotation", self.rotation_deg_max),
            ("shift", self.shift_frac_max),
            ("shear", self.shear_frac_max),
            ("zoom", self.zoom_frac_max),
        ];
        for (name, v) in mags {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!("{name} magnitude must be finite and ≥ 0, got {v}")));
            }
        }
        for (name, v) in &mags[1..] {
            if *v >= 1.0 {
                return Err(Error::validation(format!("{name} fraction must be < 1, got {v}")));
            }
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    /// Counter-clockwise as displayed (row axis pointing down).
    pub rotation_deg: f64,
    pub flip: bool,
    /// Content displacement in pixels along columns and rows.
    pub shift_x: f64,
    pub shift_y: f64,
    /// Column offset per row of distance from the centre.
    pub shear: f64,
    pub zoom_x: f64,
    pub zoom_y: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        flip: false,
        shift_x: 0.0,
        shift_y: 0.0,
        shear: 0.0,
        zoom_x: 1.0,
        zoom_y: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Draws parameters for an `height×width` image.
    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut (impl Rng + ?Sized)) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let mut sym = |max: f64| if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        let rotation_deg = sym(cfg.rotation_deg_max);
        let shift_x = sym(cfg.shift_frac_max) * width as f64;
        let shift_y = sym(cfg.shift_frac_max) * height as f64;
        let shear = sym(cfg.shear_frac_max);
        let zoom_x = 1.0 + sym(cfg.zoom_frac_max);
        let zoom_y = 1.0 + sym(cfg.zoom_frac_max);
        let flip = cfg.horizontal_flip && rng.random_bool(0.5);
        AffineParams {
            rotation_deg,
            flip,
            shift_x,
            shift_y,
            shear,
            zoom_x,
            zoom_y,
        }
    }

    /// Linear part of the content transform: rotation · shear · zoom · flip,
    /// acting on (column, row) offsets from the centre.
    fn forward_matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let rot = [[c, s], [-s, c]];
        let shear = [[1.0, self.shear], [0.0, 1.0]];
        let flip = if self.flip { -1.0 } else { 1.0 };
        let zoom_flip = [[self.zoom_x * flip, 0.0], [0.0, self.zoom_y]];
        mul(mul(rot, shear), zoom_flip)
    }
}

fn mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

/// Applies a concrete transform to a `C×H×W` image.
pub fn apply_affine<T: Scalar>(image: &Tensor<T>, params: &AffineParams) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(format!("augmentation expects C×H×W, got {:?}", image.shape())));
    };
    if params.is_identity() {
        return Ok(image.clone());
    }
    let a = params.forward_matrix();
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det == 0.0 || !det.is_finite() {
        return Err(Error::validation("augmentation transform is singular"));
    }
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    let mut out = Vec::with_capacity(image.len());
    let mut coords = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 - cx - params.shift_x;
            let v = y as f64 - cy - params.shift_y;
            let su = inv[0][0] * u + inv[0][1] * v + cx;
            let sv = inv[1][0] * u + inv[1][1] * v + cy;
            coords.push((sv, su));
        }
    }
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        out.extend(coords.iter().map(|&(sy, sx)| bilinear_sample(plane, h, w, sy, sx)));
    }
    Tensor::from_vec(image.shape(), out)
}

/// Draws a transform and applies it.
pub fn random_affine<T: Scalar>(image: &Tensor<T>, cfg: &AugmentConfig, rng: &mut (impl Rng + ?Sized)) -> Result<Tensor<T>> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::shape(format!("augmentation expects C×H×W, got {:?}", image.shape())));
    };
    let params = AffineParams::sample(cfg, h, w, rng);
    apply_affine(image, &params)
}

/// Independent generator for one `(seed, stream)` pair.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Augments each image of an `N×C×H×W` batch with its own generator,
/// seeded from one draw of `rng` per sample. A disabled config returns the
/// batch untouched.
pub fn augment_batch<T: Scalar>(batch: &Tensor<T>, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
    if !cfg.enabled {
        return Ok(batch.clone());
    }
    let &[n, c, h, w] = batch.shape() else {
        return Err(Error::shape(format!("augmentation expects N×C×H×W, got {:?}", batch.shape())));
    };
    let mut out = batch.clone();
    for s in 0..n {
        let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        let image = Tensor::from_vec(&[c, h, w], batch.item(s).to_vec())?;
        let warped = random_affine(&image, cfg, &mut sample_rng)?;
        out.item_mut(s).copy_from_slice(warped.data());
    }
    Ok(out)
}
