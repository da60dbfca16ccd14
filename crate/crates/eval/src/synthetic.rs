//! Seeded synthetic tracking sequences: a textured rectangle moving over a
//! panning textured background, with optional distractors, blur and
//! occluders. Ground truth is exact; rendering uses area coverage so the
//! visible target mass is centered on the ground-truth box.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mttrack_core::image::Image;
use mttrack_core::{BBox, Error, Result, RngSeed};

use crate::sequence::{format_boxes, save_sequence, Frame, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occlusion {
    pub start: usize,
    pub duration: usize,
    /// Fraction of the target width hidden, from its left edge.
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurEvent {
    pub start: usize,
    pub duration: usize,
    pub sigma: f64,
}

fn active(start: usize, duration: usize, t: usize) -> bool {
    t >= start && t < start + duration
}

/// Parameters of one synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Initial target width and height.
    pub target_size: [f64; 2],
    /// Target centers visited at evenly spaced frames.
    pub waypoints: Vec<[f64; 2]>,
    /// Uniform per-frame center jitter amplitude.
    pub jitter: f64,
    /// Per-frame log change of the target size.
    pub scale_rate: f64,
    /// Background pan in pixels per frame.
    pub camera_speed: [f64; 2],
    pub distractors: usize,
    /// 0 gives unrelated distractor textures, 1 copies the target's.
    pub distractor_similarity: f64,
    /// Blend weight towards a second target texture reached at the last frame.
    pub appearance_drift: f64,
    pub blur: Vec<BlurEvent>,
    pub occlusions: Vec<Occlusion>,
    pub seed: RngSeed,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            width: 160,
            height: 160,
            frames: 100,
            target_size: [24.0, 24.0],
            waypoints: vec![[80.0, 80.0]],
            jitter: 0.0,
            scale_rate: 0.0,
            camera_speed: [0.0, 0.0],
            distractors: 0,
            distractor_similarity: 0.5,
            appearance_drift: 0.0,
            blur: Vec::new(),
            occlusions: Vec::new(),
            seed: RngSeed::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(format!("synthetic spec {}: {m}", self.name)));
        let [w, h] = self.target_size;
        if self.width == 0 || self.height == 0 || self.frames < 2 {
            return bad("need a non-empty frame and at least 2 frames".into());
        }
        if !(w > 0.0 && h > 0.0) || w > self.width as f64 || h > self.height as f64 {
            return bad(format!("target {w}x{h} does not fit a {}x{} frame", self.width, self.height));
        }
        if self.waypoints.is_empty() {
            return bad("at least one waypoint is required".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_similarity) || !(0.0..=1.0).contains(&self.appearance_drift) {
            return bad("similarity and drift must lie in [0, 1]".into());
        }
        if self.occlusions.iter().any(|o| !(0.0..=1.0).contains(&o.coverage)) {
            return bad("occlusion coverage must lie in [0, 1]".into());
        }
        if self.blur.iter().any(|b| !(b.sigma >= 0.0)) {
            return bad("blur sigma must be non-negative".into());
        }
        Ok(())
    }
}

type Rgb = [f64; 3];

/// Blocky `n x n` color pattern on the unit square.
#[derive(Debug, Clone)]
struct Pattern {
    n: usize,
    cells: Vec<Rgb>,
}

impl Pattern {
    fn random(n: usize, rng: &mut impl Rng) -> Self {
        let cells = (0..n * n)
            .map(|_| [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)])
            .collect();
        Self { n, cells }
    }

    fn blend(&self, other: &Pattern, k: f64) -> Pattern {
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(a, b)| [0, 1, 2].map(|c| (1.0 - k) * a[c] + k * b[c]))
            .collect();
        Pattern { n: self.n, cells }
    }

    fn at(&self, u: f64, v: f64) -> Rgb {
        let i = ((u * self.n as f64) as usize).min(self.n - 1);
        let j = ((v * self.n as f64) as usize).min(self.n - 1);
        self.cells[j * self.n + i]
    }
}

/// Smooth tiled background: bilinear value noise over a wrapped lattice.
#[derive(Debug, Clone)]
struct Background {
    cell: f64,
    n: usize,
    lattice: Vec<Rgb>,
}

impl Background {
    fn random(rng: &mut impl Rng) -> Self {
        let n = 16;
        let lattice = (0..n * n)
            .map(|_| [rng.gen_range(40.0..215.0), rng.gen_range(40.0..215.0), rng.gen_range(40.0..215.0)])
            .collect();
        Self { cell: 14.0, n, lattice }
    }

    fn at(&self, x: f64, y: f64) -> Rgb {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (fx, fy) = (gx - gx.floor(), gy - gy.floor());
        let n = self.n as i64;
        let wrap = |v: f64| (v.floor() as i64).rem_euclid(n) as usize;
        let (x0, y0) = (wrap(gx), wrap(gy));
        let (x1, y1) = ((x0 + 1) % self.n, (y0 + 1) % self.n);
        let l = |x: usize, y: usize| self.lattice[y * self.n + x];
        let (a, b, c, d) = (l(x0, y0), l(x1, y0), l(x0, y1), l(x1, y1));
        [0, 1, 2].map(|k| {
            let top = a[k] * (1.0 - fx) + b[k] * fx;
            let bot = c[k] * (1.0 - fx) + d[k] * fx;
            top * (1.0 - fy) + bot * fy
        })
    }
}

/// Area of pixel `(px, py)` covered by the rectangle `[x0, x1) x [y0, y1)`.
fn coverage(px: usize, py: usize, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let ox = ((px + 1) as f64).min(x1) - (px as f64).max(x0);
    let oy = ((py + 1) as f64).min(y1) - (py as f64).max(y0);
    ox.max(0.0) * oy.max(0.0)
}

#[derive(Debug, Clone)]
struct Distractor {
    pattern: Pattern,
    size: [f64; 2],
    from: [f64; 2],
    to: [f64; 2],
}

/// A frame together with the visible target coverage of every pixel.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: Image,
    pub visible: Vec<f64>,
}

/// Precomputed textures and trajectory of a synthetic sequence.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    spec: SyntheticSpec,
    background: Background,
    target_a: Pattern,
    target_b: Pattern,
    distractors: Vec<Distractor>,
    occluder_colors: Vec<Rgb>,
    gt: Vec<BBox>,
}

impl SyntheticScene {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = spec.seed.rng();
        let background = Background::random(&mut rng);
        let target_a = Pattern::random(4, &mut rng);
        let target_b = Pattern::random(4, &mut rng);
        let (w, h) = (spec.width as f64, spec.height as f64);
        let distractors = (0..spec.distractors)
            .map(|_| {
                let own = Pattern::random(4, &mut rng);
                let size = spec.target_size.map(|s| s * rng.gen_range(0.8..1.2));
                let mut point = || [rng.gen_range(0.0..w), rng.gen_range(0.0..h)];
                Distractor {
                    pattern: own.blend(&target_a, spec.distractor_similarity),
                    size,
                    from: point(),
                    to: point(),
                }
            })
            .collect();
        let occluder_colors = spec
            .occlusions
            .iter()
            .map(|_| [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)])
            .collect();
        let gt = Self::trajectory(spec, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            background,
            target_a,
            target_b,
            distractors,
            occluder_colors,
            gt,
        })
    }

    fn trajectory(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<BBox> {
        let (fw, fh) = (spec.width as f64, spec.height as f64);
        let last = (spec.frames - 1) as f64;
        let k = spec.waypoints.len();
        (0..spec.frames)
            .map(|t| {
                let pos = if k == 1 {
                    spec.waypoints[0]
                } else {
                    let s = t as f64 / last * (k - 1) as f64;
                    let i = (s.floor() as usize).min(k - 2);
                    let f = s - i as f64;
                    let (a, b) = (spec.waypoints[i], spec.waypoints[i + 1]);
                    [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
                };
                let scale = (spec.scale_rate * t as f64).exp();
                let w = (spec.target_size[0] * scale).clamp(2.0, fw);
                let h = (spec.target_size[1] * scale).clamp(2.0, fh);
                let mut jit = || {
                    if spec.jitter > 0.0 {
                        rng.gen_range(-spec.jitter..spec.jitter)
                    } else {
                        0.0
                    }
                };
                let (jx, jy) = (jit(), jit());
                let cx = (pos[0] + jx).clamp(w / 2.0, fw - w / 2.0);
                let cy = (pos[1] + jy).clamp(h / 2.0, fh - h / 2.0);
                BBox { cx, cy, w, h }
            })
            .collect()
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn ground_truth(&self) -> &[BBox] {
        &self.gt
    }

    pub fn render(&self, t: usize) -> Result<RenderedFrame> {
        let spec = &self.spec;
        let (w, h) = (spec.width, spec.height);
        let (ox, oy) = (spec.camera_speed[0] * t as f64, spec.camera_speed[1] * t as f64);
        let mut px: Vec<Rgb> = (0..w * h)
            .map(|i| self.background.at((i % w) as f64 + 0.5 + ox, (i / w) as f64 + 0.5 + oy))
            .collect();
        let frac = t as f64 / (spec.frames - 1) as f64;

        let paint = |px: &mut Vec<Rgb>, b: &BBox, pattern: &Pattern| -> Vec<(usize, f64)> {
            let mut covered = Vec::new();
            let (x0, y0, x1, y1) = (b.x0(), b.y0(), b.x1(), b.y1());
            let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(w as f64) as usize);
            for y in (y0.floor().max(0.0) as usize)..(y1.ceil().min(h as f64) as usize) {
                for x in xs.clone() {
                    let c = coverage(x, y, x0, y0, x1, y1);
                    if c <= 0.0 {
                        continue;
                    }
                    let u = ((x as f64 + 0.5 - x0) / b.w).clamp(0.0, 1.0);
                    let v = ((y as f64 + 0.5 - y0) / b.h).clamp(0.0, 1.0);
                    let col = pattern.at(u, v);
                    let p = &mut px[y * w + x];
                    *p = [0, 1, 2].map(|k| c * col[k] + (1.0 - c) * p[k]);
                    covered.push((y * w + x, c));
                }
            }
            covered
        };

        for d in &self.distractors {
            let b = BBox {
                cx: d.from[0] + frac * (d.to[0] - d.from[0]),
                cy: d.from[1] + frac * (d.to[1] - d.from[1]),
                w: d.size[0],
                h: d.size[1],
            };
            paint(&mut px, &b, &d.pattern);
        }

        let gt = self.gt[t];
        let pattern = self.target_a.blend(&self.target_b, spec.appearance_drift * frac);
        let mut visible = vec![0.0; w * h];
        for (i, c) in paint(&mut px, &gt, &pattern) {
            visible[i] = c;
        }

        for (o, color) in spec.occlusions.iter().zip(&self.occluder_colors) {
            if !active(o.start, o.duration, t) || o.coverage <= 0.0 {
                continue;
            }
            // Snapped outward to whole pixels so hidden pixels are fully replaced.
            let x0 = gt.x0().floor().max(0.0) as usize;
            let x1 = ((gt.x0() + o.coverage * gt.w).ceil().min(w as f64)) as usize;
            let y0 = gt.y0().floor().max(0.0) as usize;
            let y1 = (gt.y1().ceil().min(h as f64)) as usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    px[y * w + x] = *color;
                    visible[y * w + x] = 0.0;
                }
            }
        }

        for b in spec.blur.iter().filter(|b| active(b.start, b.duration, t)) {
            gaussian_blur(&mut px, w, h, b.sigma);
        }

        let data = px
            .iter()
            .flat_map(|p| p.map(|v| v.round().clamp(0.0, 255.0) as u8))
            .collect();
        Ok(RenderedFrame {
            image: Image::new(w, h, data)?,
            visible,
        })
    }

    pub fn sequence(&self) -> Result<Sequence> {
        let frames = (0..self.spec.frames)
            .map(|t| self.render(t).map(|f| Frame::Image(Arc::new(f.image))))
            .collect::<Result<Vec<_>>>()?;
        Sequence::new(self.spec.name.clone(), frames, self.gt.clone())
    }
}

fn gaussian_blur(px: &mut [Rgb], w: usize, h: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[Rgb], horizontal: bool| -> Vec<Rgb> {
        let mut out = vec![[0.0; 3]; src.len()];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = [0.0; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let d = k as i64 - r;
                    let (sx, sy) = if horizontal {
                        ((x + d).clamp(0, w as i64 - 1), y)
                    } else {
                        (x, (y + d).clamp(0, h as i64 - 1))
                    };
                    let s = src[(sy * w as i64 + sx) as usize];
                    (0..3).for_each(|c| acc[c] += kv * s[c]);
                }
                out[(y * w as i64 + x) as usize] = acc.map(|v| v / norm);
            }
        }
        out
    };
    let tmp = pass(px, true);
    px.copy_from_slice(&pass(&tmp, false));
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Sequence> {
    SyntheticScene::new(spec)?.sequence()
}

/// Randomized benchmark of several synthetic sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSpec {
    pub sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Range of the initial target side lengths.
    pub target_size: [f64; 2],
    /// Largest target speed in pixels per frame.
    pub max_speed: f64,
    pub jitter: f64,
    /// Largest per-frame log size change.
    pub scale_rate: f64,
    pub camera_speed: f64,
    pub max_distractors: usize,
    pub distractor_similarity: f64,
    pub appearance_drift: f64,
    pub blur_probability: f64,
    pub occlusion_probability: f64,
    /// Occlusions added to every sequence.
    pub occlusions: Vec<Occlusion>,
    pub seed: RngSeed,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            sequences: 20,
            frames: 100,
            width: 160,
            height: 160,
            target_size: [18.0, 32.0],
            max_speed: 2.0,
            jitter: 0.5,
            scale_rate: 0.004,
            camera_speed: 0.5,
            max_distractors: 2,
            distractor_similarity: 0.5,
            appearance_drift: 0.6,
            blur_probability: 0.3,
            occlusion_probability: 0.3,
            occlusions: Vec::new(),
            seed: RngSeed::default(),
        }
    }
}

/// Waypoint spacing of suite sequences, in frames.
const WAYPOINT_STEP: usize = 25;

impl SuiteSpec {
    /// Concrete per-sequence specs; each sequence draws from its own stream.
    pub fn expand(&self) -> Result<Vec<SyntheticSpec>> {
        if self.frames < 2 || self.sequences == 0 {
            return Err(Error::Input("suite needs at least one sequence of 2 frames".into()));
        }
        if !(self.target_size[0] > 0.0 && self.target_size[0] <= self.target_size[1]) {
            return Err(Error::Input(format!("invalid target size range {:?}", self.target_size)));
        }
        (0..self.sequences)
            .map(|i| {
                let mut rng = self.seed.derive(i as u64).rng();
                let (fw, fh) = (self.width as f64, self.height as f64);
                let [lo, hi] = self.target_size;
                let side = |rng: &mut dyn rand::RngCore| if hi > lo { rng.gen_range(lo..hi) } else { lo };
                let size = [side(&mut rng), side(&mut rng)];
                let margin = hi * 1.2;
                let free = |rng: &mut dyn rand::RngCore, extent: f64| {
                    let m = margin.min(extent / 2.0);
                    rng.gen_range(m..=extent - m)
                };
                let count = (self.frames - 1) / WAYPOINT_STEP + 2;
                let step = self.max_speed * WAYPOINT_STEP as f64;
                let mut waypoints = vec![[free(&mut rng, fw), free(&mut rng, fh)]];
                while waypoints.len() < count {
                    let [px, py] = *waypoints.last().expect("non-empty");
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    let d = rng.gen_range(0.3..=1.0) * step;
                    let m = margin.min(fw / 2.0);
                    let n = margin.min(fh / 2.0);
                    waypoints.push([(px + d * a.cos()).clamp(m, fw - m), (py + d * a.sin()).clamp(n, fh - n)]);
                }
                let mut blur = Vec::new();
                if rng.gen_bool(self.blur_probability.clamp(0.0, 1.0)) {
                    let start = rng.gen_range(1..self.frames);
                    blur.push(BlurEvent {
                        start,
                        duration: rng.gen_range(3..=10),
                        sigma: rng.gen_range(1.0..2.5),
                    });
                }
                let mut occlusions = self.occlusions.clone();
                if rng.gen_bool(self.occlusion_probability.clamp(0.0, 1.0)) {
                    occlusions.push(Occlusion {
                        start: rng.gen_range(1..self.frames),
                        duration: rng.gen_range(3..=8),
                        coverage: rng.gen_range(0.3..0.8),
                    });
                }
                let rate = if self.scale_rate > 0.0 {
                    rng.gen_range(-self.scale_rate..self.scale_rate)
                } else {
                    0.0
                };
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                Ok(SyntheticSpec {
                    name: format!("synth_{i:03}"),
                    width: self.width,
                    height: self.height,
                    frames: self.frames,
                    target_size: size,
                    waypoints,
                    jitter: self.jitter,
                    scale_rate: rate,
                    camera_speed: [self.camera_speed * a.cos(), self.camera_speed * a.sin()],
                    distractors: if self.max_distractors > 0 {
                        rng.gen_range(0..=self.max_distractors)
                    } else {
                        0
                    },
                    distractor_similarity: self.distractor_similarity,
                    appearance_drift: self.appearance_drift,
                    blur,
                    occlusions,
                    seed: self.seed.derive(1_000_000 + i as u64),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub frames: usize,
    pub occlusions: Vec<Occlusion>,
    pub blur: Vec<BlurEvent>,
    /// SHA-256 over every frame's RGB bytes followed by the ground-truth text.
    pub sha256: String,
    pub spec: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub suite: SuiteSpec,
    pub sequences: Vec<ManifestEntry>,
}

pub fn sequence_digest(seq: &Sequence) -> Result<String> {
    let mut h = Sha256::new();
    for f in &seq.frames {
        h.update(f.load()?.data());
    }
    h.update(format_boxes(&seq.gt).as_bytes());
    Ok(hex::encode(h.finalize()))
}

/// Renders a suite into `dir` (one sequence directory each) and writes
/// `manifest.json`.
pub fn write_suite(suite: &SuiteSpec, dir: &Path) -> Result<Manifest> {
    use rayon::prelude::*;
    std::fs::create_dir_all(dir)?;
    let specs = suite.expand()?;
    let sequences = specs
        .par_iter()
        .map(|spec| {
            let seq = generate_synthetic(spec)?;
            save_sequence(&seq, &dir.join(&spec.name))?;
            Ok(ManifestEntry {
                name: spec.name.clone(),
                frames: spec.frames,
                occlusions: spec.occlusions.clone(),
                blur: spec.blur.clone(),
                sha256: sequence_digest(&seq)?,
                spec: spec.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        suite: suite.clone(),
        sequences,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
