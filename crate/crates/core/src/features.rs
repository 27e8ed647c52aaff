//! Audio-word features: a diagonal-covariance GMM trained by EM over frame
//! vectors, and per-segment soft-count histograms over its components.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwslError};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Frames of one audio segment, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub segment_id: String,
    pub frames: Vec<Vec<f64>>,
}

impl FrameSequence {
    pub fn new(segment_id: impl Into<String>, frames: Vec<Vec<f64>>) -> Result<Self> {
        let segment_id = segment_id.into();
        if frames.is_empty() {
            return Err(SwslError::InvalidData(format!(
                "segment `{segment_id}` has no frames"
            )));
        }
        let d = frames[0].len();
        for (t, f) in frames.iter().enumerate() {
            if f.len() != d || d == 0 {
                return Err(SwslError::dim_in(
                    d,
                    f.len(),
                    format!("segment `{segment_id}` frame {t}"),
                ));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(SwslError::InvalidData(format!(
                    "segment `{segment_id}` frame {t} has a non-finite value"
                )));
            }
        }
        Ok(FrameSequence { segment_id, frames })
    }

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }

    /// Read one frame per CSV row (no header; `#` starts a comment line).
    /// The segment id is the file stem.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut frames = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let frame = record
                .iter()
                .map(|field| {
                    field.parse::<f64>().map_err(|_| {
                        SwslError::parse(
                            path,
                            format!("row {}: `{field}` is not a number", row + 1),
                        )
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            frames.push(frame);
        }
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        FrameSequence::new(id, frames).map_err(|e| match e {
            SwslError::InvalidData(m) => SwslError::parse(path, m),
            other => other,
        })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> SwslError {
    if let csv::ErrorKind::Io(_) = e.kind() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => SwslError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        SwslError::parse(path, e.to_string())
    }
}

/// Load every `*.csv` file in a directory, sorted by file name.
pub fn load_frame_dir(dir: impl AsRef<Path>) -> Result<Vec<FrameSequence>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| SwslError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(SwslError::InvalidData(format!(
            "{}: no .csv frame files found",
            dir.display()
        )));
    }
    paths.iter().map(FrameSequence::from_csv).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmSettings {
    /// Stop when the relative log-likelihood change falls below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub var_floor_scale: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        EmSettings {
            tol: 1e-6,
            max_iters: 200,
            var_floor_scale: 1e-6,
        }
    }
}

/// Absolute lower bound on the variance floor, used when the data has zero spread.
const MIN_VARIANCE: f64 = 1e-10;
const MIN_WEIGHT: f64 = 1e-12;

/// Gaussian mixture with diagonal covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagGmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl DiagGmm {
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map(Vec::len).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.weights.len();
        if c == 0 || self.means.len() != c || self.variances.len() != c {
            return Err(SwslError::InvalidData(
                "GMM weights, means and variances must have the same nonzero count".into(),
            ));
        }
        let d = self.dim();
        for k in 0..c {
            if self.means[k].len() != d || self.variances[k].len() != d {
                return Err(SwslError::dim_in(
                    d,
                    self.means[k].len(),
                    format!("component {k}"),
                ));
            }
            let positive = |x: f64| x > 0.0;
            if !positive(self.weights[k]) || !self.variances[k].iter().all(|&v| positive(v)) {
                return Err(SwslError::InvalidData(format!(
                    "component {k} needs a positive weight and positive variances"
                )));
            }
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SwslError::InvalidData(format!(
                "GMM weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    fn log_joint(&self, frame: &[f64], out: &mut [f64]) {
        for (k, slot) in out.iter_mut().enumerate() {
            let mut acc = self.weights[k].ln();
            for ((x, mu), var) in frame.iter().zip(&self.means[k]).zip(&self.variances[k]) {
                let diff = x - mu;
                acc -= 0.5 * (LN_2PI + var.ln() + diff * diff / var);
            }
            *slot = acc;
        }
    }

    /// Component responsibilities `Pr(c | frame)`, computed in log space.
    pub fn posterior(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.dim() {
            return Err(SwslError::dim(self.dim(), frame.len()));
        }
        let mut logp = vec![0.0; self.num_components()];
        self.log_joint(frame, &mut logp);
        normalize_log(&mut logp);
        Ok(logp)
    }

    /// Total log-likelihood of a set of frames.
    pub fn log_likelihood<'a>(&self, frames: impl IntoIterator<Item = &'a [f64]>) -> f64 {
        let mut buf = vec![0.0; self.num_components()];
        frames
            .into_iter()
            .map(|f| {
                self.log_joint(f, &mut buf);
                log_sum_exp(&buf)
            })
            .sum()
    }

    /// Normalized soft-count histogram of a segment: the mean posterior over
    /// its frames, rescaled to sum to one.
    pub fn soft_count_histogram(&self, seq: &FrameSequence) -> Result<Vec<f64>> {
        if seq.frames.is_empty() {
            return Err(SwslError::InvalidData(format!(
                "segment `{}` has no frames",
                seq.segment_id
            )));
        }
        let mut hist = vec![0.0; self.num_components()];
        for frame in &seq.frames {
            for (h, p) in hist.iter_mut().zip(self.posterior(frame)?) {
                *h += p;
            }
        }
        let m = seq.frames.len() as f64;
        hist.iter_mut().for_each(|h| *h /= m);
        let total: f64 = hist.iter().sum();
        hist.iter_mut().for_each(|h| *h /= total);
        Ok(hist)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn normalize_log(v: &mut [f64]) -> f64 {
    let lse = log_sum_exp(v);
    v.iter_mut().for_each(|x| *x = (*x - lse).exp());
    lse
}

/// Result of EM training.
#[derive(Clone, Debug)]
pub struct GmmFit {
    pub gmm: DiagGmm,
    /// Log-likelihood of the data under each successive parameter set.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
}

/// Train a `num_components`-component diagonal GMM with EM.
///
/// Initialization is k-means++ seeding followed by one hard-assignment
/// M-step. Variances are floored at `var_floor_scale` times the global
/// per-dimension variance in every M-step.
pub fn train_gmm(
    sequences: &[FrameSequence],
    num_components: usize,
    seed: u64,
    em: &EmSettings,
) -> Result<GmmFit> {
    let frames: Vec<&[f64]> = sequences
        .iter()
        .flat_map(|s| s.frames.iter().map(Vec::as_slice))
        .collect();
    if num_components == 0 {
        return Err(SwslError::InvalidArgument(
            "GMM needs at least one component".into(),
        ));
    }
    if frames.len() < num_components {
        return Err(SwslError::InvalidArgument(format!(
            "{} frames cannot support {num_components} components",
            frames.len()
        )));
    }
    let d = frames[0].len();
    for (i, f) in frames.iter().enumerate() {
        if f.len() != d {
            return Err(SwslError::dim_in(d, f.len(), format!("frame {i}")));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(SwslError::InvalidData(format!(
                "frame {i} has a non-finite value"
            )));
        }
    }

    let m = frames.len() as f64;
    let global_mean: Vec<f64> = (0..d)
        .map(|j| frames.iter().map(|f| f[j]).sum::<f64>() / m)
        .collect();
    let floor: Vec<f64> = (0..d)
        .map(|j| {
            let var = frames
                .iter()
                .map(|f| (f[j] - global_mean[j]).powi(2))
                .sum::<f64>()
                / m;
            (em.var_floor_scale * var).max(MIN_VARIANCE)
        })
        .collect();
    if num_components > 1 && floor.iter().all(|&v| v == MIN_VARIANCE) {
        log::warn!("all frames are identical; GMM components will collapse onto floored variances");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp(&frames, num_components, &mut rng);
    let mut resp = vec![vec![0.0; num_components]; frames.len()];
    for (r, f) in resp.iter_mut().zip(&frames) {
        r[nearest(f, &centers)] = 1.0;
    }
    let mut gmm = DiagGmm {
        weights: vec![1.0 / num_components as f64; num_components],
        means: centers,
        variances: vec![floor.clone(); num_components],
    };
    m_step(&mut gmm, &frames, &resp, &floor);

    let mut trace = Vec::new();
    let mut converged = false;
    let mut logp = vec![0.0; num_components];
    for _ in 0..em.max_iters {
        let mut ll = 0.0;
        for (r, f) in resp.iter_mut().zip(&frames) {
            gmm.log_joint(f, &mut logp);
            ll += normalize_log(&mut logp);
            r.copy_from_slice(&logp);
        }
        if !ll.is_finite() {
            return Err(SwslError::NonFinite("GMM log-likelihood".into()));
        }
        let done = trace
            .last()
            .is_some_and(|&prev: &f64| (ll - prev).abs() <= em.tol * prev.abs());
        trace.push(ll);
        if done {
            converged = true;
            break;
        }
        m_step(&mut gmm, &frames, &resp, &floor);
    }
    Ok(GmmFit {
        gmm,
        log_likelihood_trace: trace,
        converged,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(f: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let dist = sq_dist(f, c);
        if dist < best_d {
            best_d = dist;
            best = k;
        }
    }
    best
}

fn kmeans_pp(frames: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![frames[rng.random_range(0..frames.len())].to_vec()];
    let mut d2: Vec<f64> = frames.iter().map(|f| sq_dist(f, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = frames.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..frames.len())
        };
        let c = frames[pick].to_vec();
        for (slot, f) in d2.iter_mut().zip(frames) {
            *slot = slot.min(sq_dist(f, &c));
        }
        centers.push(c);
    }
    centers
}

fn m_step(gmm: &mut DiagGmm, frames: &[&[f64]], resp: &[Vec<f64>], floor: &[f64]) {
    let c = gmm.num_components();
    let d = floor.len();
    let m = frames.len() as f64;
    for k in 0..c {
        let nk: f64 = resp.iter().map(|r| r[k]).sum();
        if nk <= f64::MIN_POSITIVE {
            // A component that owns no frames keeps its location.
            gmm.weights[k] = 0.0;
            continue;
        }
        let mut mean = vec![0.0; d];
        for (r, f) in resp.iter().zip(frames) {
            for j in 0..d {
                mean[j] += r[k] * f[j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= nk);
        let mut var = vec![0.0; d];
        for (r, f) in resp.iter().zip(frames) {
            for j in 0..d {
                var[j] += r[k] * (f[j] - mean[j]).powi(2);
            }
        }
        for j in 0..d {
            var[j] = (var[j] / nk).max(floor[j]);
        }
        gmm.weights[k] = nk / m;
        gmm.means[k] = mean;
        gmm.variances[k] = var;
    }
    for w in gmm.weights.iter_mut() {
        *w = w.max(MIN_WEIGHT);
    }
    let total: f64 = gmm.weights.iter().sum();
    gmm.weights.iter_mut().for_each(|w| *w /= total);
}
