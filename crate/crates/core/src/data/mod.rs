//! Synthetic sequence-classification tasks and feature-file ingestion.
//!
//! Every generated value is rounded to `f32` precision so sequences survive a
//! trip through the 32-bit VMAP format bit for bit.

mod vmap;

pub use vmap::{
    decode_feature_file, encode_feature_file, load_feature_file, read_dataset, save_feature_file, write_dataset,
    MANIFEST_NAME, VMAP_MAGIC, VMAP_VERSION,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsmError};
use crate::tsm::{FeatureSequence, VideoMap};

/// Spike height on the sparse-event task, in units of the background sigma.
pub const SPIKE_AMPLITUDE_RATIO: f64 = 8.0;
/// Width of the sparse-event spike in frames.
pub const SPIKE_WIDTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Class 1 is class 0 played backwards.
    Order,
    /// A class-specific segment hidden among class-independent noise frames.
    NoiseFrames,
    /// A two-frame spike whose direction encodes the class.
    SparseEvent,
    /// Paired appearance/motion streams, each informative on half the classes.
    TwoStream,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Order => "order",
            TaskKind::NoiseFrames => "noise-frames",
            TaskKind::SparseEvent => "sparse-event",
            TaskKind::TwoStream => "two-stream",
        })
    }
}

impl FromStr for TaskKind {
    type Err = TsmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "order" => Ok(TaskKind::Order),
            "noise-frames" => Ok(TaskKind::NoiseFrames),
            "sparse-event" => Ok(TaskKind::SparseEvent),
            "two-stream" => Ok(TaskKind::TwoStream),
            other => Err(TsmError::Argument(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Parameters of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Frames per sequence, `T`.
    pub frames: usize,
    /// Feature dimension, `L`.
    pub feature_dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Order,
            frames: 32,
            feature_dim: 16,
            classes: 2,
            n_train: 400,
            n_test: 200,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.feature_dim == 0 || self.classes == 0 || self.n_train == 0 || self.n_test == 0 {
            return Err(TsmError::Argument(
                "frames, feature_dim, classes, n_train and n_test must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(TsmError::Argument("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Train/test split of feature sequences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<FeatureSequence>,
    pub test: Vec<FeatureSequence>,
}

impl Dataset {
    pub fn train_maps(&self) -> Result<Vec<VideoMap>> {
        self.train.iter().map(FeatureSequence::to_videomap).collect()
    }

    pub fn test_maps(&self) -> Result<Vec<VideoMap>> {
        self.test.iter().map(FeatureSequence::to_videomap).collect()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.test.is_empty()
    }
}

#[inline]
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// RNG streams: task-level constants vs. per-split examples.
const STREAM_TASK: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;

/// Random smooth `T×L` curve: cumulative Gaussian steps, then a centered
/// moving average of width 5.
fn smooth_walk(rng: &mut ChaCha8Rng, t: usize, l: usize, step_sigma: f64) -> Vec<f64> {
    let mut walk = vec![0.0; t * l];
    for j in 0..l {
        let mut acc = 0.0;
        for k in 0..t {
            acc += step_sigma * gaussian(rng);
            walk[k * l + j] = acc;
        }
    }
    let mut smooth = vec![0.0; t * l];
    for k in 0..t {
        let lo = k.saturating_sub(2);
        let hi = (k + 3).min(t);
        for j in 0..l {
            let s: f64 = (lo..hi).map(|i| walk[i * l + j]).sum();
            smooth[k * l + j] = s / (hi - lo) as f64;
        }
    }
    smooth
}

fn unit_vector(rng: &mut ChaCha8Rng, l: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..l).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `count` distinct ±1 vectors, distinct as long as `2^l` allows.
fn sign_patterns(rng: &mut ChaCha8Rng, count: usize, l: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let distinct_possible = l >= usize::BITS as usize || count <= 1 << l;
    while out.len() < count {
        let v: Vec<f64> = (0..l).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        if !distinct_possible || !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

fn add_noise(rng: &mut ChaCha8Rng, rows: &mut [f64], sigma: f64) {
    if sigma > 0.0 {
        for v in rows.iter_mut() {
            *v += sigma * gaussian(rng);
        }
    }
}

fn finish(id: String, label: usize, l: usize, rows: Vec<f64>) -> Result<FeatureSequence> {
    FeatureSequence::from_rows(id, label, l, rows.into_iter().map(f32_round).collect())
}

fn reverse_rows(rows: &[f64], l: usize) -> Vec<f64> {
    rows.chunks_exact(l).rev().flatten().copied().collect()
}

/// Order task: class 0 follows a smooth trajectory forward in time, class 1
/// plays the same trajectory backwards.
///
/// Examples come in pairs sharing one noiseless trajectory, so both classes
/// have identical frame multisets and any order-invariant aggregate is at
/// chance. Each trajectory drifts along a task-wide direction, which gives
/// time a direction to learn.
pub fn gen_order_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.classes != 2 {
        return Err(TsmError::Argument(format!(
            "order task needs 2 classes, got {}",
            spec.classes
        )));
    }
    let (t, l) = (spec.frames, spec.feature_dim);
    let drift = unit_vector(&mut seeded(spec.seed, STREAM_TASK), l);
    let split = |n: usize, stream: u64, name: &str| -> Result<Vec<FeatureSequence>> {
        let mut rng = seeded(spec.seed, stream);
        let mut out = Vec::with_capacity(n);
        let mut pair = 0;
        while out.len() < n {
            let start: Vec<f64> = (0..l).map(|_| gaussian(&mut rng)).collect();
            let magnitude = rng.random_range(1.0..2.0);
            let wiggle = smooth_walk(&mut rng, t, l, 0.15);
            let mut base = wiggle;
            for k in 0..t {
                let phase = if t > 1 {
                    2.0 * k as f64 / (t - 1) as f64 - 1.0
                } else {
                    0.0
                };
                for j in 0..l {
                    base[k * l + j] += start[j] + magnitude * phase * drift[j];
                }
            }
            let mut forward = base.clone();
            add_noise(&mut rng, &mut forward, spec.noise_sigma);
            let mut backward = reverse_rows(&base, l);
            add_noise(&mut rng, &mut backward, spec.noise_sigma);
            out.push(finish(format!("{name}-{pair:05}-a"), 0, l, forward)?);
            if out.len() < n {
                out.push(finish(format!("{name}-{pair:05}-b"), 1, l, backward)?);
            }
            pair += 1;
        }
        Ok(out)
    };
    Ok(Dataset {
        train: split(spec.n_train, STREAM_TRAIN, "train")?,
        test: split(spec.n_test, STREAM_TEST, "test")?,
    })
}

/// Length of the informative window on the noise-frame task, `⌈T/4⌉`.
pub fn informative_window(frames: usize) -> usize {
    frames.div_ceil(4)
}

/// Noise-frame task: each class owns a prototype segment of `⌈T/4⌉` frames,
/// placed at a random offset; every other frame is class-independent
/// standard-normal noise. The window position is kept as the relevance mask.
pub fn gen_noise_frame_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let (t, l, k) = (spec.frames, spec.feature_dim, spec.classes);
    let w = informative_window(t);
    let mut task_rng = seeded(spec.seed, STREAM_TASK);
    let prototypes: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let offset: Vec<f64> = (0..l).map(|_| 1.5 * gaussian(&mut task_rng)).collect();
            let mut p = smooth_walk(&mut task_rng, w, l, 0.5);
            for row in p.chunks_exact_mut(l) {
                for (v, o) in row.iter_mut().zip(&offset) {
                    *v += o;
                }
            }
            p
        })
        .collect();
    let split = |n: usize, stream: u64, name: &str| -> Result<Vec<FeatureSequence>> {
        let mut rng = seeded(spec.seed, stream);
        (0..n)
            .map(|i| {
                let label = i % k;
                let start = rng.random_range(0..=t - w);
                let mut rows: Vec<f64> = (0..t * l).map(|_| gaussian(&mut rng)).collect();
                let mut segment = prototypes[label].clone();
                add_noise(&mut rng, &mut segment, spec.noise_sigma);
                rows[start * l..(start + w) * l].copy_from_slice(&segment);
                let mask = (0..t).map(|f| (start..start + w).contains(&f)).collect();
                finish(format!("{name}-{i:05}"), label, l, rows)?.with_relevance(mask)
            })
            .collect()
    };
    Ok(Dataset {
        train: split(spec.n_train, STREAM_TRAIN, "train")?,
        test: split(spec.n_test, STREAM_TEST, "test")?,
    })
}

/// Sparse-event task: Gaussian background with a [`SPIKE_WIDTH`]-frame spike
/// adding `±SPIKE_AMPLITUDE_RATIO · sigma` to every feature, with a
/// class-specific sign pattern.
/// The spike frames are recorded as the relevance mask.
pub fn gen_sparse_event_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let (t, l, k) = (spec.frames, spec.feature_dim, spec.classes);
    if t < SPIKE_WIDTH {
        return Err(TsmError::Argument(format!(
            "sparse-event task needs at least {SPIKE_WIDTH} frames"
        )));
    }
    let sigma = spec.noise_sigma;
    let amplitude = SPIKE_AMPLITUDE_RATIO * if sigma > 0.0 { sigma } else { 1.0 };
    let mut task_rng = seeded(spec.seed, STREAM_TASK);
    let directions = sign_patterns(&mut task_rng, k, l);
    let split = |n: usize, stream: u64, name: &str| -> Result<Vec<FeatureSequence>> {
        let mut rng = seeded(spec.seed, stream);
        (0..n)
            .map(|i| {
                let label = i % k;
                let start = rng.random_range(0..=t - SPIKE_WIDTH);
                let mut rows = vec![0.0; t * l];
                add_noise(&mut rng, &mut rows, sigma);
                for f in start..start + SPIKE_WIDTH {
                    for (v, d) in rows[f * l..(f + 1) * l].iter_mut().zip(&directions[label]) {
                        *v += amplitude * d;
                    }
                }
                let mask = (0..t).map(|f| (start..start + SPIKE_WIDTH).contains(&f)).collect();
                finish(format!("{name}-{i:05}"), label, l, rows)?.with_relevance(mask)
            })
            .collect()
    };
    Ok(Dataset {
        train: split(spec.n_train, STREAM_TRAIN, "train")?,
        test: split(spec.n_test, STREAM_TEST, "test")?,
    })
}

/// Two aligned streams over the same items. Stream A separates the first
/// half of the classes and shows one shared pattern for the rest; stream B
/// does the opposite. Item `i` has the same id and label in both.
pub fn gen_complementary_streams(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let (t, l, k) = (spec.frames, spec.feature_dim, spec.classes);
    if k < 2 {
        return Err(TsmError::Argument("two-stream task needs at least 2 classes".into()));
    }
    let half = k / 2;
    let mut task_rng = seeded(spec.seed, STREAM_TASK);
    let mut patterns =
        |count: usize| -> Vec<Vec<f64>> { (0..count).map(|_| smooth_walk(&mut task_rng, t, l, 0.6)).collect() };
    // Per stream: one pattern per informative class plus one shared "other".
    let a_patterns = patterns(half + 1);
    let b_patterns = patterns(k - half + 1);
    let pick_a = |label: usize| if label < half { label } else { half };
    let pick_b = |label: usize| if label >= half { label - half } else { k - half };
    let split = |n: usize, stream: u64, name: &str| -> Result<(Vec<FeatureSequence>, Vec<FeatureSequence>)> {
        let mut rng = seeded(spec.seed, stream);
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % k;
            let mut ra = a_patterns[pick_a(label)].clone();
            add_noise(&mut rng, &mut ra, spec.noise_sigma);
            let mut rb = b_patterns[pick_b(label)].clone();
            add_noise(&mut rng, &mut rb, spec.noise_sigma);
            a.push(finish(format!("{name}-{i:05}"), label, l, ra)?);
            b.push(finish(format!("{name}-{i:05}"), label, l, rb)?);
        }
        Ok((a, b))
    };
    let (train_a, train_b) = split(spec.n_train, STREAM_TRAIN, "train")?;
    let (test_a, test_b) = split(spec.n_test, STREAM_TEST, "test")?;
    Ok((
        Dataset {
            train: train_a,
            test: test_a,
        },
        Dataset {
            train: train_b,
            test: test_b,
        },
    ))
}

/// Generate the task named by `spec.kind`; two-stream tasks return stream A.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    match spec.kind {
        TaskKind::Order => gen_order_task(spec),
        TaskKind::NoiseFrames => gen_noise_frame_task(spec),
        TaskKind::SparseEvent => gen_sparse_event_task(spec),
        TaskKind::TwoStream => gen_complementary_streams(spec).map(|(a, _)| a),
    }
}

#[cfg(test)]
mod tests;
