use rand::Rng;

use crate::seed;
use crate::tensor::Tensor;

/// Zero padding applied on every side before the random crop.
pub const CROP_PAD: usize = 4;

/// One drawn augmentation: optional horizontal flip, then a crop of the
/// zero-padded image displaced by `(dy, dx)` from center.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentOps {
    pub flip: bool,
    pub dy: isize,
    pub dx: isize,
}

impl AugmentOps {
    pub fn draw(seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value);
        let p = CROP_PAD as isize;
        Self {
            flip: rng.gen_bool(0.5),
            dy: rng.gen_range(-p..=p),
            dx: rng.gen_range(-p..=p),
        }
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        let img = if self.flip { hflip(image) } else { image.clone() };
        shift_crop(&img, self.dy, self.dx)
    }
}

/// Mirrors a C×H×W image left to right.
pub fn hflip(image: &Tensor) -> Tensor {
    let w = image.dim(2);
    let mut out = image.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(image.data().chunks(w)) {
        dst.iter_mut().zip(src.iter().rev()).for_each(|(d, s)| *d = *s);
    }
    out
}

/// Equivalent to zero-padding and cropping an H×W window whose top-left
/// corner sits at `(pad + dy, pad + dx)` in the padded image.
pub fn shift_crop(image: &Tensor, dy: isize, dx: isize) -> Tensor {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let mut out = Tensor::zeros(image.shape());
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out.data_mut()[(ch * h + y) * w + x] = image.data()[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Train-time augmentation: 50% horizontal flip plus a random pad-and-crop.
pub fn augment(image: &Tensor, seed_value: u64) -> Tensor {
    AugmentOps::draw(seed_value).apply(image)
}
