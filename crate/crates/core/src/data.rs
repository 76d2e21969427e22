//! Synthetic sequences, crop and sampling geometry, and on-disk datasets.
//!
//! Real sequences contain Gaussian blobs moving at constant per-sequence
//! velocities. A fake sequence starts from the real one with the same seed and
//! warps a fixed sub-region by an independent random offset in every frame, so
//! its appearance stays plausible frame by frame while its motion becomes
//! temporally inconsistent.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::network::{FAKE, REAL};
use crate::tensor::{Dims5, FeatureMap, Tensor};

/// Default frames per sequence input.
pub const SEQ_LEN: usize = 8;
/// Default stride between kept video frames.
pub const FRAME_STRIDE: usize = 2;

/// Square crop `(x0, y0, side)` in pixel coordinates; may extend past the
/// image until [`CropBox::clamp_to`] is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x0: i64,
    pub y0: i64,
    pub side: u64,
}

impl CropBox {
    /// Shifts the box inside a `width x height` image, shrinking it only if
    /// it is larger than the image.
    pub fn clamp_to(&self, width: u64, height: u64) -> CropBox {
        let side = self.side.min(width).min(height);
        let x0 = self.x0.clamp(0, (width - side) as i64);
        let y0 = self.y0.clamp(0, (height - side) as i64);
        CropBox { x0, y0, side }
    }
}

/// Square crop of side `round(2 * sqrt(w * h))` centred on `center = (x, y)`.
pub fn crop_box(face_w: f64, face_h: f64, center: (f64, f64)) -> Result<CropBox> {
    if !(face_w > 0.0 && face_h > 0.0) {
        return Err(Error::Config(format!("face size must be positive, got {face_w}x{face_h}")));
    }
    let side = (2.0 * (face_w * face_h).sqrt()).round();
    let half = side / 2.0;
    Ok(CropBox {
        x0: (center.0 - half).round() as i64,
        y0: (center.1 - half).round() as i64,
        side: side as u64,
    })
}

/// Keeps every `stride`-th frame and groups the kept frames into
/// non-overlapping windows of `seq_len`; a trailing partial window is dropped.
pub fn sample_frames(video_len: usize, stride: usize, seq_len: usize) -> Result<Vec<Vec<usize>>> {
    if stride == 0 || seq_len == 0 {
        return Err(Error::Config("stride and seq_len must be positive".into()));
    }
    let kept: Vec<usize> = (0..video_len).step_by(stride).collect();
    Ok(kept.chunks_exact(seq_len).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub channels: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub blob_count: usize,
    /// Blob speed range in pixels per frame.
    pub velocity_range: (f64, f64),
    /// Blob standard deviation range in pixels.
    pub sigma_range: (f64, f64),
    /// Maximum per-frame displacement of the manipulated region, in pixels.
    pub jitter_amp: f64,
    /// Area of the manipulated region as a fraction of the frame.
    pub region_fraction: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            channels: 3,
            t: SEQ_LEN,
            h: 32,
            w: 32,
            blob_count: 6,
            velocity_range: (0.25, 1.0),
            sigma_range: (1.5, 3.5),
            jitter_amp: 1.5,
            region_fraction: 0.25,
        }
    }
}

impl GenParams {
    pub fn dims(&self) -> Dims5 {
        Dims5::new(1, self.channels, self.t, self.h, self.w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.channels == 0 || self.t == 0 || self.h == 0 || self.w == 0 {
            return bad("sequence dims must be positive");
        }
        if self.blob_count == 0 {
            return bad("blob_count must be positive");
        }
        let (vlo, vhi) = self.velocity_range;
        if !(0.0 <= vlo && vlo <= vhi && vhi.is_finite()) {
            return bad("velocity_range must satisfy 0 <= lo <= hi");
        }
        let (slo, shi) = self.sigma_range;
        if !(0.0 < slo && slo <= shi && shi.is_finite()) {
            return bad("sigma_range must satisfy 0 < lo <= hi");
        }
        if !(self.region_fraction > 0.0 && self.region_fraction <= 1.0) {
            return bad("region_fraction must be in (0, 1]");
        }
        if !(self.jitter_amp >= 0.0 && self.jitter_amp.is_finite()) {
            return bad("jitter_amp must be finite and non-negative");
        }
        Ok(())
    }

    /// Side lengths `(rows, cols)` of the manipulated region.
    pub fn region_size(&self) -> (usize, usize) {
        let s = self.region_fraction.sqrt();
        let rh = ((self.h as f64 * s).round() as usize).clamp(1, self.h);
        let rw = ((self.w as f64 * s).round() as usize).clamp(1, self.w);
        (rh, rw)
    }
}

/// Manipulated region `[y0, y0 + rows) x [x0, x0 + cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.rows && x >= self.x0 && x < self.x0 + self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn class(self) -> usize {
        match self {
            Label::Real => REAL,
            Label::Fake => FAKE,
        }
    }

    pub fn from_class(c: usize) -> Result<Self> {
        match c {
            REAL => Ok(Label::Real),
            FAKE => Ok(Label::Fake),
            other => Err(Error::InvalidLabel(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// `(1, C, T, H, W)` with values in `[0, 1]`.
    pub tensor: FeatureMap<f32>,
    pub label: Label,
    pub seed: u64,
    /// Region warped in the fake variant of this scene.
    pub region: Region,
}

struct Blob {
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    sigma: f64,
    amp: Vec<f64>,
}

struct Scene {
    background: Vec<f64>,
    blobs: Vec<Blob>,
    region: Region,
}

impl Scene {
    fn draw(p: &GenParams, rng: &mut ChaCha8Rng) -> Scene {
        let background = (0..p.channels).map(|_| rng.gen_range(0.0..0.2)).collect();
        let blobs: Vec<Blob> = (0..p.blob_count)
            .map(|i| {
                // The first blob plays the face: it starts near the centre so
                // it stays inside the frame and inside the manipulated region.
                let (y, x) = if i == 0 {
                    (
                        rng.gen_range(0.35..0.65) * p.h as f64,
                        rng.gen_range(0.35..0.65) * p.w as f64,
                    )
                } else {
                    (rng.gen_range(0.0..p.h as f64), rng.gen_range(0.0..p.w as f64))
                };
                let speed = if p.velocity_range.0 < p.velocity_range.1 {
                    rng.gen_range(p.velocity_range.0..=p.velocity_range.1)
                } else {
                    p.velocity_range.0
                };
                let angle = rng.gen_range(0.0..2.0 * PI);
                let sigma = if p.sigma_range.0 < p.sigma_range.1 {
                    rng.gen_range(p.sigma_range.0..=p.sigma_range.1)
                } else {
                    p.sigma_range.0
                };
                let amp = (0..p.channels).map(|_| rng.gen_range(0.3..0.9)).collect();
                Blob {
                    y,
                    x,
                    vy: speed * angle.sin(),
                    vx: speed * angle.cos(),
                    sigma,
                    amp,
                }
            })
            .collect();

        let (rows, cols) = p.region_size();
        let mid = (p.t as f64 - 1.0) / 2.0;
        let face = &blobs[0];
        let cy = face.y + face.vy * mid;
        let cx = face.x + face.vx * mid;
        let y0 = ((cy - rows as f64 / 2.0).round().max(0.0) as usize).min(p.h - rows);
        let x0 = ((cx - cols as f64 / 2.0).round().max(0.0) as usize).min(p.w - cols);
        Scene {
            background,
            blobs,
            region: Region { y0, x0, rows, cols },
        }
    }

    /// Unclamped intensity at continuous position `(y, x)` in frame `t`.
    fn render(&self, c: usize, t: usize, y: f64, x: f64) -> f64 {
        let tf = t as f64;
        let mut v = self.background[c];
        for b in &self.blobs {
            let dy = y - (b.y + b.vy * tf);
            let dx = x - (b.x + b.vx * tf);
            v += b.amp[c] * (-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)).exp();
        }
        v
    }
}

/// Bilinear sample of an `h x w` frame with edge clamping.
fn bilinear(frame: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = frame[y0 * w + x0] * (1.0 - fx) + frame[y0 * w + x1] * fx;
    let bottom = frame[y1 * w + x0] * (1.0 - fx) + frame[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Deterministic sequence for `(params, label, seed)`. The fake variant of a
/// seed is the real variant of the same seed with its region warped.
pub fn gen_sequence(p: &GenParams, label: Label, seed: u64) -> Result<SequenceSample> {
    p.validate()?;
    if label == Label::Fake && p.jitter_amp <= 0.0 {
        return Err(Error::Config("fake sequences need jitter_amp > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::draw(p, &mut rng);
    let (h, w) = (p.h, p.w);
    let fr = h * w;

    // Real frames at full precision, laid out (C, T, H, W).
    let mut frames = vec![0.0f64; p.channels * p.t * fr];
    for c in 0..p.channels {
        for t in 0..p.t {
            let base = (c * p.t + t) * fr;
            for y in 0..h {
                for x in 0..w {
                    frames[base + y * w + x] = scene.render(c, t, y as f64, x as f64);
                }
            }
        }
    }

    if label == Label::Fake {
        let r = scene.region;
        // Offsets are shared by all channels of a frame.
        let offsets: Vec<(f64, f64)> = (0..p.t)
            .map(|_| {
                let mag = rng.gen_range(0.5..=1.0) * p.jitter_amp;
                let angle = rng.gen_range(0.0..2.0 * PI);
                (mag * angle.sin(), mag * angle.cos())
            })
            .collect();
        let window = |i: usize, n: usize| (PI * (i as f64 + 0.5) / n as f64).sin();
        for c in 0..p.channels {
            for (t, &(dy, dx)) in offsets.iter().enumerate() {
                let base = (c * p.t + t) * fr;
                let src = frames[base..base + fr].to_vec();
                for y in r.y0..r.y0 + r.rows {
                    let wy = window(y - r.y0, r.rows);
                    for x in r.x0..r.x0 + r.cols {
                        let wt = wy * window(x - r.x0, r.cols);
                        frames[base + y * w + x] = bilinear(&src, h, w, y as f64 - wt * dy, x as f64 - wt * dx);
                    }
                }
            }
        }
    }

    let data = frames.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(SequenceSample {
        tensor: Tensor::feature_map(p.dims(), data)?,
        label,
        seed,
        region: scene.region,
    })
}

/// Mean over the region of `|x_t - 2 x_{t-1} + x_{t-2}|`, across channels
/// and all `t >= 2`.
pub fn second_difference_energy(x: &FeatureMap<f32>, region: &Region) -> Result<f64> {
    let d = x.dims5()?;
    if d.t < 3 {
        return Ok(0.0);
    }
    let xs = x.data();
    let mut acc = 0.0;
    let mut n = 0usize;
    for b in 0..d.b {
        for c in 0..d.c {
            for t in 2..d.t {
                for y in region.y0..region.y0 + region.rows {
                    for xx in region.x0..region.x0 + region.cols {
                        let v = |tt| xs[d.index(b, c, tt, y, xx)] as f64;
                        acc += (v(t) - 2.0 * v(t - 1) + v(t - 2)).abs();
                        n += 1;
                    }
                }
            }
        }
    }
    Ok(acc / n as f64)
}

/// One manifest line: `relative_path,label,seed`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let malformed = |line: usize, detail: String| Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("line {line}: {detail}"),
        };
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let [p, l, s] = parts.as_slice() else {
                return Err(malformed(i + 1, format!("expected 3 fields, got {}", parts.len())));
            };
            let label: usize = l.trim().parse().map_err(|e| malformed(i + 1, format!("label: {e}")))?;
            if label > FAKE {
                return Err(malformed(i + 1, format!("label {label} not in {{0,1}}")));
            }
            let seed: u64 = s.trim().parse().map_err(|e| malformed(i + 1, format!("seed: {e}")))?;
            let p = p.trim().to_string();
            if !seen.insert(p.clone()) {
                return Err(malformed(i + 1, format!("duplicate path {p}")));
            }
            entries.push(ManifestEntry { path: p, label, seed });
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{}", e.path, e.label, e.seed);
        }
        s
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `count` sequences; the first `round(count * fake_ratio)` are
/// fake. Returns the samples in manifest order.
pub fn gen_dataset(p: &GenParams, count: usize, fake_ratio: f64, seed: u64) -> Result<Vec<SequenceSample>> {
    if !(0.0..=1.0).contains(&fake_ratio) {
        return Err(Error::Config(format!("fake_ratio {fake_ratio} not in [0, 1]")));
    }
    let n_fake = (count as f64 * fake_ratio).round() as usize;
    (0..count)
        .map(|i| {
            let label = if i < n_fake { Label::Fake } else { Label::Real };
            gen_sequence(p, label, sample_seed(seed, i as u64))
        })
        .collect()
}

/// Writes `seq_NNNNN.gmlt` files and `manifest.csv` into `dir`.
pub fn write_dataset(dir: &Path, samples: &[SequenceSample]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("seq_{i:05}.gmlt");
        write_tensor(dir.join(&name), &s.tensor)?;
        manifest.entries.push(ManifestEntry {
            path: name,
            label: s.label.class(),
            seed: s.seed,
        });
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// All sequences of a dataset stacked along the batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(N, C, T, H, W)`
    pub inputs: FeatureMap<f32>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

impl Dataset {
    pub fn from_samples(samples: &[SequenceSample]) -> Result<Self> {
        let parts: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.tensor).collect();
        Ok(Self {
            inputs: Tensor::concat_batch(&parts)?,
            labels: samples.iter().map(|s| s.label.class()).collect(),
            paths: Vec::new(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        if manifest.entries.is_empty() {
            return Err(Error::Config(format!("{} lists no samples", dir.join(MANIFEST_FILE).display())));
        }
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        let mut paths = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let path = dir.join(&e.path);
            let t = read_tensor(&path)?;
            if t.dims5()?.b != 1 {
                return Err(Error::Malformed {
                    path,
                    detail: "dataset tensors must hold one sequence".into(),
                });
            }
            tensors.push(t);
            paths.push(path);
        }
        let refs: Vec<&Tensor<f32>> = tensors.iter().collect();
        Ok(Self {
            inputs: Tensor::concat_batch(&refs)?,
            labels: manifest.entries.iter().map(|e| e.label).collect(),
            paths,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(FeatureMap<f32>, Vec<usize>)> {
        let x = self.inputs.select_batch(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }
}
