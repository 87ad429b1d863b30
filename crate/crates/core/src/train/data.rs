use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::shape_err;
use crate::ops::LabelMap;
use crate::{Dims, Real, Result, Tensor4};

/// background, disc, square, triangle
pub const SHAPE_CLASSES: usize = 4;

const PALETTE: [[f64; 3]; 3] = [[0.85, 0.25, 0.2], [0.2, 0.75, 0.3], [0.25, 0.35, 0.9]];

/// Maps an 8-bit RGB sample to the network's input range.
pub fn normalize(v: u8) -> f64 {
    (v as f64 / 255.0 - 0.5) / 0.25
}

/// Interleaved RGB bytes to a normalized (1, 3, h, w) tensor.
pub fn rgb_to_tensor<T: Real>(rgb: &[u8], h: usize, w: usize) -> Result<Tensor4<T>> {
    if rgb.len() != 3 * h * w {
        return Err(shape_err!("expected {} RGB bytes for {h}x{w}, got {}", 3 * h * w, rgb.len()));
    }
    let mut t = Tensor4::zeros(Dims::new(1, 3, h, w));
    for c in 0..3 {
        for (i, px) in t.plane_mut(0, c).iter_mut().enumerate() {
            *px = T::of(normalize(rgb[3 * i + c]));
        }
    }
    Ok(t)
}

/// One rendered scene: interleaved RGB bytes and per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<u8>,
    pub labels: Vec<u32>,
}

impl Scene {
    pub fn flipped(&self) -> Scene {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                let (d, s) = (y * self.w + x, y * self.w + self.w - 1 - x);
                out.labels[d] = self.labels[s];
                out.rgb[3 * d..3 * d + 3].copy_from_slice(&self.rgb[3 * s..3 * s + 3]);
            }
        }
        out
    }
}

/// Procedural scenes of discs, squares and triangles on a striped, noisy
/// background. Every scene is a pure function of `(seed, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticShapes {
    pub h: usize,
    pub w: usize,
    pub seed: u64,
}

#[derive(Clone, Copy)]
struct Shape {
    kind: u32,
    cx: f64,
    cy: f64,
    r: f64,
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            1 => dx * dx + dy * dy <= self.r * self.r,
            2 => dx.abs() <= 0.85 * self.r && dy.abs() <= 0.85 * self.r,
            _ => {
                // upward triangle: apex at -r, base at +r/2
                let half = 0.866 * self.r;
                dy >= -self.r && dy <= 0.5 * self.r && dx.abs() <= half * (dy + self.r) / (1.5 * self.r)
            }
        }
    }
}

impl SyntheticShapes {
    pub fn new(h: usize, w: usize, seed: u64) -> Self {
        SyntheticShapes { h, w, seed }
    }

    pub fn render(&self, index: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let (h, w) = (self.h, self.w);
        let side = h.min(w) as f64;

        let base: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.3..0.6));
        let freq = rng.random_range(0.05..0.25);
        let angle: f64 = rng.random_range(0.0..core::f64::consts::PI);
        let (sa, ca) = (libm::sin(angle), libm::cos(angle));

        let count = rng.random_range(1..=3);
        let shapes: Vec<(Shape, [f64; 3])> = (0..count)
            .map(|_| {
                let kind = rng.random_range(1..=3u32);
                let s = Shape {
                    kind,
                    cx: rng.random_range(0.0..w as f64),
                    cy: rng.random_range(0.0..h as f64),
                    r: rng.random_range(0.12 * side..0.25 * side),
                };
                let p = PALETTE[kind as usize - 1];
                let color = core::array::from_fn(|c| (p[c] + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
                (s, color)
            })
            .collect();

        let mut rgb = vec![0u8; 3 * h * w];
        let mut labels = vec![0u32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let stripe = 0.08 * libm::sin(freq * (fx * ca + fy * sa));
                let mut color = base.map(|b| b + stripe);
                let i = y * w + x;
                for (s, c) in &shapes {
                    if s.covers(fx, fy) {
                        color = *c;
                        labels[i] = s.kind;
                    }
                }
                for c in 0..3 {
                    let v = color[c] + rng.random_range(-0.04..0.04);
                    rgb[3 * i + c] = (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8;
                }
            }
        }
        Scene { h, w, rgb, labels }
    }

    /// Stacks scenes into a normalized batch. `flips[i]` mirrors scene `i`
    /// horizontally.
    pub fn batch<T: Real>(&self, indices: &[u64], flips: &[bool]) -> Result<(Tensor4<T>, LabelMap)> {
        let (h, w) = (self.h, self.w);
        let mut x = Tensor4::zeros(Dims::new(indices.len(), 3, h, w));
        let mut labels = Vec::with_capacity(indices.len() * h * w);
        for (n, &idx) in indices.iter().enumerate() {
            let mut scene = self.render(idx);
            if flips.get(n).copied().unwrap_or(false) {
                scene = scene.flipped();
            }
            let t: Tensor4<T> = rgb_to_tensor(&scene.rgb, h, w)?;
            for c in 0..3 {
                x.plane_mut(n, c).copy_from_slice(t.plane(0, c));
            }
            labels.extend_from_slice(&scene.labels);
        }
        Ok((x, LabelMap::new(indices.len(), h, w, labels)?))
    }
}
