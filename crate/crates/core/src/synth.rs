//! Synthetic event scenes with dense ground-truth flow.
//!
//! Textured rectangles translate at constant velocity over a static
//! background. Each pixel emits an event whenever its log intensity moves by
//! more than the contrast threshold from the level at its last event, sampled
//! at `substeps` instants across the window. Uniform background-activity noise
//! can be mixed in.

use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity};
use crate::flow::FlowField;
use crate::tensor::Tensor;

const MIN_INTENSITY: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    /// Top-left corner at the start of the window, in pixels.
    pub x: f32,
    pub y: f32,
    pub width: f32,
    pub height: f32,
    /// Displacement over the whole window, in pixels.
    pub velocity: (f32, f32),
    /// Mean intensity in `(0, 1]`.
    pub brightness: f32,
    /// Relative amplitude of the sinusoidal texture, `0` for a flat patch.
    pub texture: f32,
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub duration_us: u64,
    pub background: f32,
    pub patterns: Vec<PatternSpec>,
    /// Contrast threshold on log intensity.
    pub threshold: f32,
    /// Expected noise events per pixel over the window.
    pub noise_rate: f32,
    pub substeps: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidSpec(m));
        if self.width == 0 || self.height == 0 {
            return invalid(format!("resolution {}x{}", self.width, self.height));
        }
        if self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return invalid("resolution exceeds 16-bit addresses".into());
        }
        if self.duration_us == 0 || self.duration_us > u32::MAX as u64 {
            return invalid(format!("duration {} us", self.duration_us));
        }
        if !(self.threshold > 0.0) {
            return invalid(format!("contrast threshold {}", self.threshold));
        }
        if !(self.noise_rate >= 0.0) {
            return invalid(format!("noise rate {}", self.noise_rate));
        }
        if self.substeps == 0 {
            return invalid("substeps must be positive".into());
        }
        if !(self.background > 0.0) {
            return invalid(format!("background intensity {}", self.background));
        }
        for (i, p) in self.patterns.iter().enumerate() {
            if !(p.width > 0.0 && p.height > 0.0) {
                return invalid(format!("pattern {i} has zero size"));
            }
            if !(p.brightness > 0.0) {
                return invalid(format!("pattern {i} brightness {}", p.brightness));
            }
        }
        Ok(())
    }

    /// A random scene of 1..=3 textured patches with velocities up to
    /// `max_speed` pixels per window.
    pub fn random<R: Rng + ?Sized>(
        width: usize,
        height: usize,
        max_speed: f32,
        noise_rate: f32,
        rng: &mut R,
    ) -> Self {
        let count = rng.random_range(1..=3);
        let patterns = (0..count)
            .map(|_| {
                let pw = rng.random_range(0.2..0.45) * width as f32;
                let ph = rng.random_range(0.2..0.45) * height as f32;
                PatternSpec {
                    x: rng.random_range(0.0..(width as f32 - pw)),
                    y: rng.random_range(0.0..(height as f32 - ph)),
                    width: pw,
                    height: ph,
                    velocity: (
                        rng.random_range(-max_speed..max_speed),
                        rng.random_range(-max_speed..max_speed),
                    ),
                    brightness: rng.random_range(0.45..0.9),
                    texture: rng.random_range(0.2..0.5),
                    texture_seed: rng.random(),
                }
            })
            .collect();
        Self {
            width,
            height,
            duration_us: 50_000,
            background: rng.random_range(0.1..0.25),
            patterns,
            threshold: 0.2,
            noise_rate,
            substeps: 40,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub events: EventStream,
    pub flow: FlowField,
    /// Grayscale frames `[H, W]` at the start and end of the window.
    pub frame_start: Tensor,
    pub frame_end: Tensor,
}

struct Texture {
    waves: [(f32, f32, f32); 3],
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut wave = || {
            (
                rng.random_range(0.08..0.3),
                rng.random_range(0.08..0.3),
                rng.random_range(0.0..TAU),
            )
        };
        Self {
            waves: [wave(), wave(), wave()],
        }
    }

    fn at(&self, p: &PatternSpec, lx: f32, ly: f32) -> f32 {
        let s: f32 = self
            .waves
            .iter()
            .map(|&(fx, fy, ph)| (TAU * (fx * lx + fy * ly) + ph).sin())
            .sum::<f32>()
            / 3.0;
        (p.brightness * (1.0 + p.texture * s)).clamp(MIN_INTENSITY, 1.0)
    }
}

/// Index of the top-most pattern covering pixel `(x, y)` at window fraction `s`.
fn cover(spec: &SceneSpec, x: usize, y: usize, s: f32) -> Option<(usize, f32, f32)> {
    spec.patterns.iter().enumerate().rev().find_map(|(i, p)| {
        let lx = x as f32 - (p.x + p.velocity.0 * s);
        let ly = y as f32 - (p.y + p.velocity.1 * s);
        (lx >= 0.0 && lx < p.width && ly >= 0.0 && ly < p.height).then_some((i, lx, ly))
    })
}

fn render(spec: &SceneSpec, textures: &[Texture], s: f32) -> Vec<f32> {
    let mut img = vec![spec.background; spec.width * spec.height];
    for y in 0..spec.height {
        for x in 0..spec.width {
            if let Some((i, lx, ly)) = cover(spec, x, y, s) {
                img[y * spec.width + x] = textures[i].at(&spec.patterns[i], lx, ly);
            }
        }
    }
    img
}

pub fn synthesize_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let textures: Vec<Texture> = spec
        .patterns
        .iter()
        .map(|p| Texture::new(p.texture_seed))
        .collect();

    let start = render(spec, &textures, 0.0);
    let mut reference: Vec<f32> = start.iter().map(|v| v.ln()).collect();
    let mut events = Vec::new();
    let mut end = start.clone();
    for k in 1..=spec.substeps {
        let s = k as f32 / spec.substeps as f32;
        let t = (s as f64 * spec.duration_us as f64).round() as u64;
        end = render(spec, &textures, s);
        for (i, (&val, r)) in end.iter().zip(reference.iter_mut()).enumerate() {
            let l = val.ln();
            while l - *r >= spec.threshold {
                *r += spec.threshold;
                events.push(Event {
                    x: (i % w) as u16,
                    y: (i / w) as u16,
                    t,
                    p: Polarity::On,
                });
            }
            while *r - l >= spec.threshold {
                *r -= spec.threshold;
                events.push(Event {
                    x: (i % w) as u16,
                    y: (i / w) as u16,
                    t,
                    p: Polarity::Off,
                });
            }
        }
    }

    if spec.noise_rate > 0.0 {
        let mean = spec.noise_rate as f64 * (w * h) as f64;
        let count = Poisson::new(mean)
            .map_err(|e| Error::InvalidSpec(e.to_string()))?
            .sample(&mut rng) as usize;
        for _ in 0..count {
            events.push(Event {
                x: rng.random_range(0..w) as u16,
                y: rng.random_range(0..h) as u16,
                t: rng.random_range(0..=spec.duration_us),
                p: if rng.random::<bool>() {
                    Polarity::On
                } else {
                    Polarity::Off
                },
            });
        }
    }

    let flow = FlowField::from_fn(h, w, |x, y| match cover(spec, x, y, 0.0) {
        Some((i, _, _)) => spec.patterns[i].velocity,
        None => (0.0, 0.0),
    });
    Ok(SyntheticScene {
        events: EventStream::new(events, w as u32, h as u32, 0, spec.duration_us)?,
        flow,
        frame_start: Tensor::new(&[h, w], start)?,
        frame_end: Tensor::new(&[h, w], end)?,
    })
}
