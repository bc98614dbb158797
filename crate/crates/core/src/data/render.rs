use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Nuisance;
use crate::seed;
use crate::tensor::Tensor;

type Rgb = [f64; 3];

const PALETTE: [Rgb; 9] = [
    [0.80, 0.15, 0.15], // red
    [0.15, 0.25, 0.75], // blue
    [0.20, 0.60, 0.25], // green
    [0.90, 0.80, 0.20], // yellow
    [0.12, 0.12, 0.12], // black
    [0.92, 0.92, 0.90], // white
    [0.50, 0.50, 0.52], // gray
    [0.50, 0.32, 0.15], // brown
    [0.55, 0.25, 0.60], // purple
];

const SKIN: [Rgb; 3] = [[0.95, 0.80, 0.68], [0.78, 0.58, 0.42], [0.45, 0.30, 0.20]];

/// Per-camera background and color cast.
const CAMERA_BACKGROUND: [Rgb; 2] = [[0.62, 0.66, 0.60], [0.40, 0.42, 0.50]];
const CAMERA_TINT: [Rgb; 2] = [[1.0, 1.0, 1.0], [0.82, 0.95, 1.18]];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pattern {
    Plain,
    HorizontalStripes(usize),
    VerticalStripes(usize),
    Checker(usize),
}

impl Pattern {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let period = rng.gen_range(3..=6);
        match rng.gen_range(0..4) {
            0 => Pattern::Plain,
            1 => Pattern::HorizontalStripes(period),
            2 => Pattern::VerticalStripes(period),
            _ => Pattern::Checker(period),
        }
    }

    /// Whether the secondary color shows at body-relative pixel (y, x).
    fn alt(&self, y: isize, x: isize) -> bool {
        let band = |v: isize, p: usize| (v.rem_euclid(2 * p as isize)) >= p as isize;
        match *self {
            Pattern::Plain => false,
            Pattern::HorizontalStripes(p) => band(y, p),
            Pattern::VerticalStripes(p) => band(x, p),
            Pattern::Checker(p) => band(y, p) ^ band(x, p),
        }
    }
}

/// Identity-level appearance: stable across all images of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    hair: Rgb,
    skin: Rgb,
    torso: Rgb,
    torso_alt: Rgb,
    torso_pattern: Pattern,
    legs: Rgb,
    legs_alt: Rgb,
    legs_pattern: Pattern,
    shoes: Rgb,
    /// Widths as fractions of the image width.
    torso_width: f64,
    leg_width: f64,
    leg_gap: f64,
    /// Row (fraction of height) where the torso ends and the legs start.
    waist: f64,
    bag: Option<(Rgb, bool)>,
}

fn jittered<R: Rng + ?Sized>(base: Rgb, sigma: f64, rng: &mut R) -> Rgb {
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    base.map(|c| (c + n.sample(rng)).clamp(0.0, 1.0))
}

fn pick<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    jittered(PALETTE[rng.gen_range(0..PALETTE.len())], 0.06, rng)
}

impl Appearance {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let skin = jittered(SKIN[rng.gen_range(0..SKIN.len())], 0.03, rng);
        let hair = jittered(PALETTE[[4, 7, 3, 6][rng.gen_range(0..4)]], 0.05, rng);
        let bag = rng
            .gen_bool(0.35)
            .then(|| (pick(rng), rng.gen_bool(0.5)));
        Self {
            hair,
            skin,
            torso: pick(rng),
            torso_alt: pick(rng),
            torso_pattern: Pattern::sample(rng),
            legs: pick(rng),
            legs_alt: pick(rng),
            legs_pattern: if rng.gen_bool(0.3) { Pattern::sample(rng) } else { Pattern::Plain },
            shoes: jittered(PALETTE[[4, 5, 7][rng.gen_range(0..3)]], 0.04, rng),
            torso_width: rng.gen_range(0.50..0.72),
            leg_width: rng.gen_range(0.14..0.22),
            leg_gap: rng.gen_range(0.02..0.10),
            waist: rng.gen_range(0.52..0.62),
            bag,
        }
    }

    /// Body color at body-relative coordinates; `None` is background.
    fn color_at(&self, y: isize, x: isize, h: usize, w: usize) -> Option<Rgb> {
        let v = y as f64 / h as f64;
        let u = (x as f64 + 0.5) / w as f64 - 0.5;
        // head
        let (hv, hu) = ((v - 0.13) / 0.075, u / 0.14);
        if hv * hv + hu * hu <= 1.0 {
            return Some(if v < 0.11 { self.hair } else { self.skin });
        }
        if (0.205..self.waist).contains(&v) {
            if u.abs() <= self.torso_width / 2.0 {
                let c = if self.torso_pattern.alt(y, x) { self.torso_alt } else { self.torso };
                return Some(c);
            }
            if let Some((bag, right)) = self.bag {
                let side = if right { u } else { -u };
                let edge = self.torso_width / 2.0;
                if side > edge && side <= edge + 0.14 && v > self.waist - 0.22 {
                    return Some(bag);
                }
            }
            return None;
        }
        if v >= self.waist && v < 0.96 {
            let a = u.abs();
            let inner = self.leg_gap / 2.0;
            if a >= inner && a <= inner + self.leg_width {
                if v >= 0.915 {
                    return Some(self.shoes);
                }
                let c = if self.legs_pattern.alt(y, x) { self.legs_alt } else { self.legs };
                return Some(c);
            }
        }
        None
    }
}

/// Renders one image (3×H×W, f32-representable values in [0, 1]).
pub(super) fn render(look: &Appearance, camera: u8, (h, w): (usize, usize), nuisance: &Nuisance, seed_value: u64) -> Tensor {
    let mut rng = seed::rng(seed_value);
    let shift = nuisance.shift_px as isize;
    let (dy, dx) = if shift > 0 {
        (rng.gen_range(-shift..=shift), rng.gen_range(-shift..=shift))
    } else {
        (0, 0)
    };
    let brightness = if nuisance.brightness_jitter > 0.0 {
        1.0 + rng.gen_range(-nuisance.brightness_jitter..nuisance.brightness_jitter)
    } else {
        1.0
    };
    let occluder = (nuisance.occlusion_prob > 0.0 && rng.gen_bool(nuisance.occlusion_prob)).then(|| {
        let oh = rng.gen_range(h / 6..h / 3);
        let ow = rng.gen_range(w / 3..w * 3 / 4);
        let y0 = rng.gen_range(h / 6..h - oh);
        let x0 = if rng.gen_bool(0.5) { 0 } else { w - ow };
        (y0, x0, oh, ow, pick(&mut rng))
    });
    let cam = camera as usize % 2;
    let background = CAMERA_BACKGROUND[cam];
    let tint = CAMERA_TINT[cam];
    let noise = Normal::new(0.0, nuisance.noise_sigma.max(0.0)).expect("valid sigma");

    let mut img = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut rgb = look
                .color_at(y as isize - dy, x as isize - dx, h, w)
                .unwrap_or_else(|| {
                    let shade = 0.9 + 0.2 * y as f64 / h as f64;
                    background.map(|c| c * shade)
                });
            if let Some((y0, x0, oh, ow, color)) = occluder {
                if (y0..y0 + oh).contains(&y) && (x0..x0 + ow).contains(&x) {
                    rgb = color;
                }
            }
            for c in 0..3 {
                let mut v = rgb[c] * brightness * tint[c];
                if nuisance.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                img.data_mut()[(c * h + y) * w + x] = v.clamp(0.0, 1.0) as f32 as f64;
            }
        }
    }
    img
}
