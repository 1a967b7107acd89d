//! Temporal-spatial mapping: per-frame features stacked row by row into a VideoMap.

use crate::error::{Result, TsmError};
use crate::tensor::Tensor;

/// Ordered per-frame features of one video with its class label.
///
/// Every frame is either a rank-1 feature vector of length `L` or a rank-3
/// `h×w×c` feature volume; all frames share one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub label: usize,
    frames: Vec<Tensor>,
    /// Per-frame ground-truth relevance, when the generator knows it.
    pub relevance: Option<Vec<bool>>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, label: usize, frames: Vec<Tensor>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(TsmError::dim("FeatureSequence", "at least one frame is required"));
        };
        if !matches!(first.rank(), 1 | 3) {
            return Err(TsmError::dim(
                "FeatureSequence",
                format!("frames must be vectors or h×w×c volumes, got shape {:?}", first.shape()),
            ));
        }
        if let Some((k, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != first.shape()) {
            return Err(TsmError::dim(
                "FeatureSequence",
                format!("frame {k} has shape {:?}, frame 0 has {:?}", f.shape(), first.shape()),
            ));
        }
        Ok(Self {
            id: id.into(),
            label,
            frames,
            relevance: None,
        })
    }

    /// Sequence of feature vectors given as a row-major `T×L` buffer.
    pub fn from_rows(id: impl Into<String>, label: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || rows.is_empty() || !rows.len().is_multiple_of(dim) {
            return Err(TsmError::dim(
                "FeatureSequence",
                format!("{} values do not split into rows of {dim}", rows.len()),
            ));
        }
        let frames = rows.chunks_exact(dim).map(|r| Tensor::vector(r.to_vec())).collect();
        Self::new(id, label, frames)
    }

    pub fn with_relevance(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.frames.len() {
            return Err(TsmError::dim(
                "relevance mask",
                format!("{} entries for {} frames", mask.len(), self.frames.len()),
            ));
        }
        self.relevance = Some(mask);
        Ok(self)
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Vectorize volume frames (no-op for vector frames), then stack them.
    pub fn to_videomap(&self) -> Result<VideoMap> {
        if self.frames[0].rank() == 1 {
            return build_videomap(self);
        }
        let frames = self
            .frames
            .iter()
            .map(vectorize_feature_maps)
            .collect::<Result<Vec<_>>>()?;
        let mut seq = FeatureSequence::new(self.id.clone(), self.label, frames)?;
        seq.relevance = self.relevance.clone();
        build_videomap(&seq)
    }
}

/// `T×L` matrix whose row `k` is the feature vector of frame `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub source_id: String,
    pub label: usize,
    pub relevance: Option<Vec<bool>>,
}

impl VideoMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, source_id: impl Into<String>, label: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(TsmError::dim(
                "VideoMap",
                format!("{} values for a {rows}x{cols} map", data.len()),
            ));
        }
        Ok(Self {
            rows,
            cols,
            data,
            source_id: source_id.into(),
            label,
            relevance: None,
        })
    }

    /// Number of frames `T`.
    pub fn height(&self) -> usize {
        self.rows
    }

    /// Feature dimension `L`.
    pub fn width(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..][..self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// The map as a `T×L×1` tensor, the head network's input layout.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols, 1], self.data.clone()).expect("VideoMap dimensions are positive")
    }

    /// Copy with rows reordered so that output row `i` is input row `order[i]`.
    pub fn permute_rows(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.rows || order.iter().any(|&i| i >= self.rows) {
            return Err(TsmError::Argument(format!(
                "row order of length {} invalid for {} rows",
                order.len(),
                self.rows
            )));
        }
        let mut out = self.clone();
        out.data = order.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        out.relevance = self.relevance.as_ref().map(|m| order.iter().map(|&i| m[i]).collect());
        Ok(out)
    }

    pub fn reversed(&self) -> Self {
        let order: Vec<usize> = (0..self.rows).rev().collect();
        self.permute_rows(&order).expect("reversal is a valid permutation")
    }
}

/// Spatial vectorization of an `h×w×c` volume by per-channel average pooling.
pub fn vectorize_feature_maps(volume: &Tensor) -> Result<Tensor> {
    if volume.rank() != 3 {
        return Err(TsmError::dim(
            "vectorize_feature_maps",
            format!("expected an h×w×c volume, got shape {:?}", volume.shape()),
        ));
    }
    let c = volume.shape()[2];
    let plane = (volume.shape()[0] * volume.shape()[1]) as f64;
    let mut sums = vec![0.0; c];
    for px in volume.data().chunks_exact(c) {
        for (s, &v) in sums.iter_mut().zip(px) {
            *s += v;
        }
    }
    Ok(Tensor::vector(sums.into_iter().map(|s| s / plane).collect()))
}

/// Stack vector frames in temporal order into a `T×L` VideoMap.
pub fn build_videomap(seq: &FeatureSequence) -> Result<VideoMap> {
    let first = &seq.frames[0];
    if first.rank() != 1 {
        return Err(TsmError::dim(
            "build_videomap",
            "frames must be vectorized before stacking",
        ));
    }
    let cols = first.len();
    let mut data = Vec::with_capacity(cols * seq.len());
    for (k, f) in seq.frames.iter().enumerate() {
        if f.len() != cols || f.rank() != 1 {
            return Err(TsmError::dim(
                "build_videomap",
                format!("frame {k} has shape {:?}, expected [{cols}]", f.shape()),
            ));
        }
        data.extend_from_slice(f.data());
    }
    let mut map = VideoMap::new(seq.len(), cols, data, seq.id.clone(), seq.label)?;
    map.relevance = seq.relevance.clone();
    Ok(map)
}

/// Source row for each output row under uniform nearest-index sampling.
pub fn sample_indices(source_len: usize, target_len: usize) -> Vec<usize> {
    (0..target_len).map(|i| i * source_len / target_len).collect()
}

/// Resample a map to `target` rows: output row `i` is input row `floor(i·T/target)`.
pub fn resample_temporal(map: &VideoMap, target: usize) -> Result<VideoMap> {
    if target < 1 {
        return Err(TsmError::Argument("target height must be at least 1".into()));
    }
    if target == map.rows {
        return Ok(map.clone());
    }
    let idx = sample_indices(map.rows, target);
    let mut out = map.clone();
    out.rows = target;
    out.data = idx.iter().flat_map(|&i| map.row(i).iter().copied()).collect();
    out.relevance = map.relevance.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect());
    Ok(out)
}
