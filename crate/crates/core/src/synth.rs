//! Synthetic video: procedural textures under uniform translation, plus noise models.
//!
//! Textures are functions of continuous position, so sub-pixel shifts are exact and
//! no resampling blur is introduced between frames.

use cascade_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<Tensor>,
    /// Metadata only.
    pub frame_rate: f64,
    /// Per-frame noise σ, when known.
    pub noise_level: Option<Vec<f64>>,
}

impl VideoSequence {
    pub fn new(frames: Vec<Tensor>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::param("empty sequence"))?;
        first.dims3("VideoSequence")?;
        if let Some(f) = frames.iter().find(|f| f.shape() != first.shape()) {
            return Err(Error::param(format!("frame shape {:?} differs from {:?}", f.shape(), first.shape())));
        }
        Ok(VideoSequence { frames, frame_rate: 25.0, noise_level: None })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `[C, H, W]` of every frame.
    pub fn dims(&self) -> [usize; 3] {
        let s = self.frames[0].shape();
        [s[0], s[1], s[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Gradient,
    Checker,
    PerlinLike,
}

impl std::str::FromStr for TextureKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gradient" => Ok(TextureKind::Gradient),
            "checker" => Ok(TextureKind::Checker),
            "perlin" | "perlin-like" => Ok(TextureKind::PerlinLike),
            _ => Err(format!("unknown texture `{s}`")),
        }
    }
}

const LATTICE: usize = 64;

/// A seeded texture defined on the whole plane.
#[derive(Debug, Clone)]
pub struct Texture {
    kind: TextureKind,
    channels: usize,
    // per channel: gradient (base, gx, gy) or checker (lo, hi)
    coeffs: Vec<[f64; 3]>,
    cell: f64,
    // value-noise lattice per channel and octave
    lattice: Vec<f64>,
    octaves: usize,
}

impl Texture {
    pub fn new(kind: TextureKind, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..channels)
            .map(|_| match kind {
                TextureKind::Gradient => [rng.random_range(0.05..0.3), rng.random_range(0.0..0.3), rng.random_range(0.0..0.3)],
                _ => {
                    let lo = rng.random_range(0.05..0.4);
                    [lo, lo + rng.random_range(0.3..0.5), 0.0]
                }
            })
            .collect();
        let cell = rng.random_range(3.0..7.0);
        let octaves = 3;
        let lattice = (0..channels * octaves * LATTICE * LATTICE).map(|_| rng.random::<f64>()).collect();
        Texture { kind, channels, coeffs, cell, lattice, octaves }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Intensity of channel `c` at continuous position `(x, y)`, in `[0, 1]`.
    pub fn eval(&self, c: usize, x: f64, y: f64) -> f64 {
        let v = match self.kind {
            // unit slope over 100 px keeps neighbouring pixels distinct yet in range
            TextureKind::Gradient => {
                let [b, gx, gy] = self.coeffs[c];
                b + gx * x / 100.0 + gy * y / 100.0
            }
            TextureKind::Checker => {
                let [lo, hi, _] = self.coeffs[c];
                let parity = ((x / self.cell).floor() + (y / self.cell).floor()).rem_euclid(2.0);
                if parity < 0.5 {
                    lo
                } else {
                    hi
                }
            }
            TextureKind::PerlinLike => {
                let mut acc = 0.0;
                let mut amp = 0.5;
                let mut norm = 0.0;
                for o in 0..self.octaves {
                    let scale = self.cell * 2.0 / (1 << o) as f64;
                    acc += amp * self.value_noise(c, o, x / scale, y / scale);
                    norm += amp;
                    amp *= 0.5;
                }
                // stretch the centred sum so the range is well used
                0.5 + 1.6 * (acc / norm - 0.5)
            }
        };
        v.clamp(0.0, 1.0)
    }

    fn value_noise(&self, c: usize, octave: usize, x: f64, y: f64) -> f64 {
        let base = (c * self.octaves + octave) * LATTICE * LATTICE;
        let at = |i: f64, j: f64| {
            let i = i.rem_euclid(LATTICE as f64) as usize;
            let j = j.rem_euclid(LATTICE as f64) as usize;
            self.lattice[base + j * LATTICE + i]
        };
        let (x0, y0) = (x.floor(), y.floor());
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(x - x0), smooth(y - y0));
        let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1.0, y0) * tx;
        let bottom = at(x0, y0 + 1.0) * (1.0 - tx) + at(x0 + 1.0, y0 + 1.0) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Renders `[C, h, w]` with pixel `(i, j)` taken at `(origin.0 + j, origin.1 + i)`.
    pub fn render(&self, h: usize, w: usize, origin: (f64, f64)) -> Tensor {
        let plane = h * w;
        Tensor::from_fn([self.channels, h, w], |idx| {
            let (c, p) = (idx / plane, idx % plane);
            self.eval(c, origin.0 + (p % w) as f64, origin.1 + (p / w) as f64)
        })
    }
}

/// Frame `k` is frame 0 translated by `k · motion`, with clamp-to-edge fill.
pub fn synth_sequence(
    seed: u64,
    n_frames: usize,
    size: (usize, usize),
    motion: (f64, f64),
    texture: TextureKind,
    channels: usize,
) -> Result<VideoSequence> {
    let (h, w) = size;
    if n_frames < 3 {
        return Err(Error::param(format!("need at least 3 frames, got {n_frames}")));
    }
    if h == 0 || w == 0 || channels == 0 {
        return Err(Error::param(format!("empty frame {channels}x{h}x{w}")));
    }
    if !(motion.0.abs() < w as f64 && motion.1.abs() < h as f64) {
        return Err(Error::param(format!("motion {motion:?} exceeds frame size {w}x{h}")));
    }
    let tex = Texture::new(texture, channels, seed);
    let plane = h * w;
    let frames = (0..n_frames)
        .map(|k| {
            let (dx, dy) = (k as f64 * motion.0, k as f64 * motion.1);
            Tensor::from_fn([channels, h, w], |idx| {
                let (c, p) = (idx / plane, idx % plane);
                let x = ((p % w) as f64 - dx).clamp(0.0, (w - 1) as f64);
                let y = ((p / w) as f64 - dy).clamp(0.0, (h - 1) as f64);
                tex.eval(c, x, y)
            })
        })
        .collect();
    VideoSequence::new(frames)
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    Gaussian(f64),
    /// Signal-dependent: variance `a · x + b`.
    PoissonGaussian { a: f64, b: f64 },
    /// Per-pixel σ, shape `[1, H, W]` or `[H, W]`, shared across frames and channels.
    SigmaMap(Tensor),
}

/// Adds zero-mean noise and clips to `[0, 1]`.
pub fn add_noise(seq: &VideoSequence, model: &NoiseModel, seed: u64) -> Result<VideoSequence> {
    let [_, h, w] = seq.dims();
    match model {
        NoiseModel::Gaussian(s) if !(*s >= 0.0 && s.is_finite()) => return Err(Error::param(format!("σ = {s}"))),
        NoiseModel::PoissonGaussian { a, b } if !(*a >= 0.0 && *b >= 0.0) => {
            return Err(Error::param(format!("poisson-gaussian a = {a}, b = {b}")))
        }
        NoiseModel::SigmaMap(m) if m.numel() != h * w || m.data().iter().any(|s| !(*s >= 0.0)) => {
            return Err(Error::param(format!("σ map {:?} must be non-negative with {h}x{w} entries", m.shape())))
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let plane = h * w;
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let mut out = f.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let sigma = match model {
                    NoiseModel::Gaussian(s) => *s,
                    NoiseModel::PoissonGaussian { a, b } => (a * v.max(0.0) + b).sqrt(),
                    NoiseModel::SigmaMap(m) => m.data()[i % plane],
                };
                let n: f64 = unit.sample(&mut rng);
                *v = (*v + sigma * n).clamp(0.0, 1.0);
            }
            out
        })
        .collect();
    let noise_level = match model {
        NoiseModel::Gaussian(s) => Some(vec![*s; seq.len()]),
        _ => None,
    };
    Ok(VideoSequence { frames, frame_rate: seq.frame_rate, noise_level })
}

/// Distribution of training windows.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub channels: usize,
    pub patch: usize,
    /// Per-frame translation components are drawn from `[-max_shift, max_shift]`.
    pub max_shift: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub textures: Vec<TextureKind>,
}

/// Three co-located noisy/clean patches `[t−1, t, t+1]` of a texture moving by `shift`
/// per frame. The flow from the reference to frame `t±1` is `±shift`.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub noisy: [Tensor; 3],
    pub clean: [Tensor; 3],
    pub shift: (f64, f64),
    pub sigma: f64,
}

impl DataSpec {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
        if self.textures.is_empty() {
            return Err(Error::param("no textures configured"));
        }
        if !(0.0 <= self.sigma_min && self.sigma_min <= self.sigma_max) {
            return Err(Error::param(format!("σ range [{}, {}]", self.sigma_min, self.sigma_max)));
        }
        let kind = self.textures[rng.random_range(0..self.textures.len())];
        let tex = Texture::new(kind, self.channels, rng.random());
        let m = self.max_shift;
        let shift = if m > 0.0 { (rng.random_range(-m..=m), rng.random_range(-m..=m)) } else { (0.0, 0.0) };
        let sigma = if self.sigma_max > self.sigma_min { rng.random_range(self.sigma_min..self.sigma_max) } else { self.sigma_min };
        let origin = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
        let p = self.patch;
        let clean = [-1.0, 0.0, 1.0].map(|k: f64| tex.render(p, p, (origin.0 - k * shift.0, origin.1 - k * shift.1)));
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let noisy = clean.clone().map(|mut f| {
            for v in f.data_mut() {
                let n: f64 = unit.sample(rng);
                *v = (*v + sigma * n).clamp(0.0, 1.0);
            }
            f
        });
        Ok(TrainSample { noisy, clean, shift, sigma })
    }
}
