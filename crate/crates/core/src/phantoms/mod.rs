//! Paired two-phase phantom images.
//!
//! Both phases share one geometry: a body ellipse with a smooth bias field and
//! a handful of embedded structures. "Enhancing" structures are slightly
//! hypo-intense in phase A and are multiplied by a per-pair gain in phase B,
//! so the pair shares anatomy but differs in regional contrast.

mod dataset;
mod preprocess;

pub use dataset::{
    load_pair_dataset, read_image, read_manifest, split_by_group, write_image, write_manifest,
    write_phantom_dataset, ManifestRow, Split,
};
pub use preprocess::{clip_intensities, normalize, preprocess, quantile, resize, PreprocessConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ValueRange};

/// Registered pair of phase images plus identity metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePair {
    pub phase_a: Image,
    pub phase_b: Image,
    pub group_id: String,
    pub sample_id: String,
}

impl PhasePair {
    pub fn new(
        phase_a: Image,
        phase_b: Image,
        group_id: impl Into<String>,
        sample_id: impl Into<String>,
    ) -> Result<Self> {
        let group_id = group_id.into();
        let sample_id = sample_id.into();
        if phase_a.dims() != phase_b.dims() {
            return Err(Error::Sample {
                sample_id,
                message: format!(
                    "phase size mismatch: {:?} vs {:?}",
                    phase_a.dims(),
                    phase_b.dims()
                ),
            });
        }
        if group_id.is_empty() {
            return Err(Error::Sample {
                sample_id,
                message: "empty group_id".into(),
            });
        }
        Ok(Self {
            phase_a,
            phase_b,
            group_id,
            sample_id,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.phase_a.dims()
    }
}

/// Parameters of the procedural phantom generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub canvas_size: usize,
    /// Inclusive range for the number of embedded structures.
    pub num_structures: (usize, usize),
    /// Range of the phase-B contrast multiplier on enhancing structures.
    pub enhancement_gain: (f32, f32),
    pub noise_sigma: f32,
    pub seed: u64,
    /// Number of distinct group labels (each group has its own enhancement pattern).
    pub num_groups: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            num_structures: (3, 6),
            enhancement_gain: (1.8, 2.2),
            noise_sigma: 0.02,
            seed: 0,
            num_groups: 5,
        }
    }
}

/// Gains closer than this to 1.0 would make the two phases nearly identical.
pub const MIN_GAIN_MARGIN: f32 = 0.2;

// Intensities on a [0, 1] scale before mapping to the canonical range.
const AIR: f32 = 0.05;
const BODY: f32 = 0.32;
const BIAS_AMPLITUDE: f32 = 0.05;
const ENHANCING: (f32, f32) = (0.20, 0.26);
const BRIGHT: (f32, f32) = (0.62, 0.82);

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.canvas_size < 8 {
            return bad(format!("canvas_size must be >= 8, got {}", self.canvas_size));
        }
        let (s_lo, s_hi) = self.num_structures;
        if s_lo == 0 || s_lo > s_hi {
            return bad(format!("invalid num_structures range {s_lo}..={s_hi}"));
        }
        let (g_lo, g_hi) = self.enhancement_gain;
        if !(g_lo.is_finite() && g_hi.is_finite() && g_lo > 0.0 && g_lo <= g_hi) {
            return bad(format!("invalid enhancement_gain range [{g_lo}, {g_hi}]"));
        }
        if !(g_lo >= 1.0 + MIN_GAIN_MARGIN || g_hi <= 1.0 - MIN_GAIN_MARGIN) {
            return bad(format!(
                "enhancement_gain [{g_lo}, {g_hi}] must exclude 1.0 with margin {MIN_GAIN_MARGIN}"
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.num_groups == 0 {
            return bad("num_groups must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Ellipse {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    angle: f32,
}

impl Ellipse {
    /// Fraction of the pixel at (y, x) covered, with a one-pixel soft edge.
    fn coverage(&self, y: f32, x: f32) -> f32 {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let d = (u * u + v * v).sqrt();
        ((1.0 - d) * self.rx.min(self.ry) + 0.5).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
struct Structure {
    shape: Ellipse,
    intensity: f32,
    enhancing: bool,
}

/// Generates the phantom pair at `index`; a pure function of `(spec.seed, index)`.
pub fn generate_phantom_pair(spec: &PhantomSpec, index: u64) -> Result<PhasePair> {
    spec.validate()?;
    render_pair(spec, index)
}

pub(crate) fn render_pair(spec: &PhantomSpec, index: u64) -> Result<PhasePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);

    let n = spec.canvas_size as f32;
    let group = (index % spec.num_groups as u64) as usize;

    let body = Ellipse {
        cy: n * rng.random_range(0.47..0.53),
        cx: n * rng.random_range(0.47..0.53),
        ry: n * rng.random_range(0.36..0.44),
        rx: n * rng.random_range(0.38..0.46),
        angle: rng.random_range(-0.3..0.3),
    };
    let bias_phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let bias_freq: f32 = rng.random_range(0.5..1.5);

    let (s_lo, s_hi) = spec.num_structures;
    let count = rng.random_range(s_lo..=s_hi);
    // Group g enhances 1 + (g % 3) structures, capped by the structure count.
    let n_enhancing = (1 + group % 3).min(count);
    let structures: Vec<Structure> = (0..count)
        .map(|k| {
            let r = rng.random_range(0.0..0.55f32).sqrt();
            let t = rng.random_range(0.0..std::f32::consts::TAU);
            let enhancing = k < n_enhancing;
            let intensity = if enhancing {
                rng.random_range(ENHANCING.0..ENHANCING.1)
            } else {
                rng.random_range(BRIGHT.0..BRIGHT.1)
            };
            Structure {
                shape: Ellipse {
                    cy: body.cy + r * body.ry * t.sin(),
                    cx: body.cx + r * body.rx * t.cos(),
                    ry: n * rng.random_range(0.06..0.14),
                    rx: n * rng.random_range(0.06..0.14),
                    angle: rng.random_range(0.0..std::f32::consts::PI),
                },
                intensity,
                enhancing,
            }
        })
        .collect();
    let (g_lo, g_hi) = spec.enhancement_gain;
    let gain = if g_lo == g_hi {
        g_lo
    } else {
        rng.random_range(g_lo..g_hi)
    };

    let size = spec.canvas_size;
    let render = |gain: f32| -> Vec<f32> {
        let mut px = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                let (y, x) = (r as f32 + 0.5, c as f32 + 0.5);
                let bias = BIAS_AMPLITUDE
                    * (bias_freq * std::f32::consts::TAU * (y + 0.6 * x) / n + bias_phase).sin();
                let cov = body.coverage(y, x);
                let mut v = AIR * (1.0 - cov) + (BODY + bias) * cov;
                for s in &structures {
                    let cov = s.shape.coverage(y, x) * body.coverage(y, x);
                    if cov > 0.0 {
                        let target = if s.enhancing {
                            s.intensity * gain
                        } else {
                            s.intensity
                        };
                        v = v * (1.0 - cov) + target * cov;
                    }
                }
                px.push(2.0 * v - 1.0);
            }
        }
        px
    };
    let mut a = render(1.0);
    let mut b = render(gain);

    if spec.noise_sigma > 0.0 {
        let noise =
            Normal::new(0.0f32, spec.noise_sigma).map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
        for v in a.iter_mut() {
            *v += noise.sample(&mut rng);
        }
        for v in b.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let range = ValueRange::SIGNED_UNIT;
    let clamp = |px: Vec<f32>| px.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect::<Vec<_>>();
    PhasePair::new(
        Image::new(size, size, clamp(a), range)?,
        Image::new(size, size, clamp(b), range)?,
        format!("group{group}"),
        format!("phantom_{index:05}"),
    )
}

/// Generates `count` consecutive pairs starting at index 0.
pub fn generate_phantom_set(spec: &PhantomSpec, count: usize) -> Result<Vec<PhasePair>> {
    spec.validate()?;
    (0..count as u64).map(|i| render_pair(spec, i)).collect()
}
