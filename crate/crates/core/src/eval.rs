//! Accuracy, ROC-AUC and `F*` heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{Model, FAKE, REAL};
use crate::tensor::FeatureMap;

/// Fake-class scores with their labels (`1` = fake).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > FAKE) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Fraction of samples with `(score >= threshold) == (label == fake)`.
pub fn accuracy(s: &ScoredSet, threshold: f64) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let hits = s
        .scores
        .iter()
        .zip(&s.labels)
        .filter(|&(&sc, &l)| (sc >= threshold) == (l == FAKE))
        .count();
    Ok(hits as f64 / s.len() as f64)
}

/// Mann-Whitney AUC: the probability that a random fake outscores a random
/// real, ties counted one half. Uses midranks, `O(n log n)`.
pub fn auc(s: &ScoredSet) -> Result<f64> {
    let n_fake = s.labels.iter().filter(|&&l| l == FAKE).count();
    let n_real = s.labels.iter().filter(|&&l| l == REAL).count();
    if n_fake == 0 || n_real == 0 {
        return Err(Error::Metric(format!(
            "AUC undefined with {n_fake} fake and {n_real} real samples"
        )));
    }
    if s.scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));

    // Twice the rank sum of the fake samples, kept integral: a tie group
    // spanning 1-based ranks i+1..=j has midrank (i + 1 + j) / 2.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && s.scores[order[j]] == s.scores[order[i]] {
            j += 1;
        }
        let fakes = order[i..j].iter().filter(|&&k| s.labels[k] == FAKE).count() as u128;
        twice_rank_sum += fakes * (i as u128 + 1 + j as u128);
        i = j;
    }
    let (nf, nr) = (n_fake as u128, n_real as u128);
    // 2U = 2R - nf(nf + 1)
    let twice_u = twice_rank_sum - nf * (nf + 1);
    Ok(twice_u as f64 / (2 * nf * nr) as f64)
}

/// Scores every sample of `data` in batches.
pub fn score_dataset(model: &Model<f32>, data: &Dataset, batch: usize) -> Result<ScoredSet> {
    let batch = batch.max(1);
    let mut scores = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, _) = data.batch(chunk)?;
        let p = model.predict(&x)?;
        scores.extend(p.score.iter().map(|&v| v as f64));
    }
    ScoredSet::new(scores, data.labels.clone())
}

/// `metric,value` rows for accuracy and AUC.
pub fn report_csv(acc: f64, auc: f64) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "acc,{acc}");
    let _ = writeln!(s, "auc,{auc}");
    s
}

/// Per-frame heatmaps: channel-mean of `|F*|`, min-max scaled to `0..=255`.
/// Constant frames map to zero. Returns one `(H, W)` byte image per frame.
pub fn heatmap_frames(f_star: &FeatureMap<f32>) -> Result<Vec<Vec<u8>>> {
    let d = f_star.dims5()?;
    if d.b != 1 {
        return Err(Error::dim("export_heatmap", format!("expected batch 1, got {}", d.b)));
    }
    let xs = f_star.data();
    let fr = d.frame();
    let mut frames = Vec::with_capacity(d.t);
    for t in 0..d.t {
        let mut map = vec![0.0f64; fr];
        for c in 0..d.c {
            let base = d.index(0, c, t, 0, 0);
            for (m, &v) in map.iter_mut().zip(&xs[base..base + fr]) {
                *m += (v as f64).abs();
            }
        }
        for m in &mut map {
            *m /= d.c as f64;
        }
        let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let img = map
            .iter()
            .map(|&m| {
                if span > 0.0 {
                    ((m - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        frames.push(img);
    }
    Ok(frames)
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes `{prefix}_t{t}.pgm` for every frame and returns the paths.
pub fn export_heatmap(f_star: &FeatureMap<f32>, prefix: &str) -> Result<Vec<PathBuf>> {
    let d = f_star.dims5()?;
    let frames = heatmap_frames(f_star)?;
    let mut paths = Vec::with_capacity(frames.len());
    for (t, img) in frames.iter().enumerate() {
        let path = PathBuf::from(format!("{prefix}_t{t}.pgm"));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, encode_pgm(d.w, d.h, img)).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Mean per-sample `||F*||_1` of real and fake samples, `(real, fake)`.
pub fn mean_f_star_l1(model: &Model<f32>, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if model.ad.is_none() {
        return Err(Error::Config("model has no AD branch".into()));
    }
    let (mut sums, mut counts) = ([0.0f64; 2], [0usize; 2]);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let mut tape = crate::tape::Tape::new();
        let xv = tape.leaf(x);
        let out = model.forward(&mut tape, xv)?;
        let fs = tape.value(out.f_star.expect("AD enabled"));
        let per = fs.numel() / chunk.len();
        for (sample, &l) in fs.data().chunks_exact(per).zip(&y) {
            sums[l] += sample.iter().map(|v| v.abs() as f64).sum::<f64>();
            counts[l] += 1;
        }
    }
    if counts.contains(&0) {
        return Err(Error::Metric("need both real and fake samples".into()));
    }
    Ok((sums[REAL] / counts[REAL] as f64, sums[FAKE] / counts[FAKE] as f64))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |d: &str| Error::Malformed {
        path: path.to_path_buf(),
        detail: d.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("short header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| malformed("header"))?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(malformed("not a P5 maxval-255 file"));
    }
    let w: usize = fields[1].parse().map_err(|_| malformed("width"))?;
    let h: usize = fields[2].parse().map_err(|_| malformed("height"))?;
    let data = bytes.get(pos + 1..).ok_or_else(|| malformed("missing raster"))?.to_vec();
    if data.len() != w * h {
        return Err(malformed("raster size"));
    }
    Ok((w, h, data))
}
