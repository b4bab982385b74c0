//! Seeded synthetic polyp images.
//!
//! Each image holds one to three perturbed ellipses over a tissue-colored
//! background. Sample `i` draws from ChaCha stream `i` of the seed, so a
//! sample does not depend on how many others are generated.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

use super::{DataError, Result, SamplePair};

const MIN_FRACTION: f64 = 0.02;
const MAX_FRACTION: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// Bright, sharp-edged polyps on a smooth background.
    Easy,
    /// Low contrast, blurred edges, textured and noisy background.
    Hard,
}

impl Difficulty {
    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(format!("unknown difficulty `{s}` (expected easy or hard)")),
        }
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    harmonics: [(f64, f64); 2],
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, fraction: f64) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let area = fraction * hf * wf;
        let aspect: f64 = rng.random_range(0.7..1.4);
        let r = (area / PI).sqrt();
        let theta: f64 = rng.random_range(0.0..PI);
        Blob {
            cx: rng.random_range(0.15..0.85) * wf,
            cy: rng.random_range(0.15..0.85) * hf,
            rx: r * aspect.sqrt(),
            ry: r / aspect.sqrt(),
            cos: theta.cos(),
            sin: theta.sin(),
            harmonics: [
                (rng.random_range(0.0..0.15), rng.random_range(0.0..2.0 * PI)),
                (rng.random_range(0.0..0.1), rng.random_range(0.0..2.0 * PI)),
            ],
        }
    }

    /// Radial coordinate scaled so the boundary sits at 1.
    fn level(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        let phi = v.atan2(u);
        let [(a2, p2), (a3, p3)] = self.harmonics;
        (u * u + v * v).sqrt() / (1.0 + a2 * (2.0 * phi + p2).sin() + a3 * (3.0 * phi + p3).sin())
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Sum of three random plane waves with amplitude `amp`.
struct Texture {
    waves: [(f64, f64, f64); 3],
    amp: f64,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, amp: f64) -> Self {
        let mut wave = || {
            let angle: f64 = rng.random_range(0.0..2.0 * PI);
            let freq: f64 = rng.random_range(0.08..0.35);
            (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..2.0 * PI))
        };
        Texture {
            waves: [wave(), wave(), wave()],
            amp,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.amp
            * self
                .waves
                .iter()
                .map(|(kx, ky, p)| (kx * x + ky * y + p).sin())
                .sum::<f64>()
            / 3.0
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], spread: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-spread..spread)).clamp(0.0, 1.0))
}

fn sample(seed: u64, index: usize, h: usize, w: usize, difficulty: Difficulty) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let blobs = loop {
        let count = rng.random_range(1..=3usize);
        let total: f64 = rng.random_range(0.04..0.3);
        let blobs: Vec<Blob> = (0..count)
            .map(|_| {
                let share = total / count as f64 * rng.random_range(0.6..1.4);
                Blob::random(&mut rng, h, w, share)
            })
            .collect();
        let inside = (0..h * w)
            .filter(|&p| {
                let (x, y) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
                blobs.iter().any(|b| b.level(x, y) <= 1.0)
            })
            .count();
        let fraction = inside as f64 / (h * w) as f64;
        if (MIN_FRACTION..=MAX_FRACTION).contains(&fraction) {
            break blobs;
        }
    };
    let (bg, fg, edge, texture, noise_sd) = match difficulty {
        Difficulty::Easy => (
            jitter(&mut rng, [0.45, 0.18, 0.15], 0.05),
            jitter(&mut rng, [0.95, 0.82, 0.55], 0.04),
            0.04,
            Texture::random(&mut rng, 0.02),
            0.01,
        ),
        Difficulty::Hard => {
            let bg = jitter(&mut rng, [0.68, 0.40, 0.35], 0.06);
            let fg = [bg[0] + 0.12, bg[1] + 0.09, bg[2] + 0.05].map(|c: f64| c.min(1.0));
            (bg, fg, 0.3, Texture::random(&mut rng, 0.06), 0.04)
        }
    };
    let noise = Normal::new(0.0, noise_sd).expect("positive noise scale");
    let hw = h * w;
    let mut image = vec![0.0f32; 3 * hw];
    let mut mask = vec![0.0f32; hw];
    for p in 0..hw {
        let (x, y) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
        let level = blobs.iter().map(|b| b.level(x, y)).fold(f64::INFINITY, f64::min);
        if level <= 1.0 {
            mask[p] = 1.0;
        }
        let weight = 1.0 - smoothstep(1.0 - edge / 2.0, 1.0 + edge / 2.0, level);
        let t = texture.at(x, y);
        for c in 0..3 {
            let v = bg[c] * (1.0 - weight) + fg[c] * weight + t + noise.sample(&mut rng);
            image[c * hw + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    SamplePair {
        image: Tensor::new(vec![3, h, w], image).expect("generated image extent"),
        mask: Tensor::new(vec![1, h, w], mask).expect("generated mask extent"),
        id: format!("synth_{index:05}"),
        source: format!("synth_{}", difficulty.name()),
    }
}

/// `n` samples of extent `h × w`, a pure function of all arguments.
///
/// Every mask covers between 2% and 40% of its image.
pub fn synth_polyp_dataset(n: usize, h: usize, w: usize, seed: u64, difficulty: Difficulty) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(DataError::InvalidArgument("sample count must be at least 1".into()));
    }
    if h == 0 || w == 0 || !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(DataError::InvalidArgument(format!(
            "extent {h}×{w} must be positive multiples of 4"
        )));
    }
    Ok((0..n).map(|i| sample(seed, i, h, w, difficulty)).collect())
}
