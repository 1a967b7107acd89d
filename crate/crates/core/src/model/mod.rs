//! Head ConvNet over VideoMaps with hierarchical temporal attention.
//!
//! The pipeline for a `T×L` map is
//!
//! ```text
//! A0 → block1 → A1 → block2 → A2 → block3 → flatten → FC → logits
//! ```
//!
//! where each block is a 5×5 "same" convolution, ReLU and a 3×3 stride-2
//! ceil-mode max pool, so temporal extents run `T, ⌈T/2⌉, ⌈T/4⌉, ⌈T/8⌉`.
//! The attention branch (two more blocks, a fully connected layer and a
//! sigmoid) produces `a0` of length `T`; `a1` and `a2` are stride-2 max pools
//! of the previous level, so each gate lines up with the temporal extent at
//! its insertion point.

mod checkpoint;

pub use checkpoint::{Checkpoint, TrainingState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsmError};
use crate::tensor::ops::{self, pooled_extent};
use crate::tensor::{Padding, Tape, Tensor, Var};
use crate::tsm::{sample_indices, VideoMap};

pub const KERNEL_SIZE: usize = 5;
pub const POOL_KERNEL: usize = 3;
pub const POOL_STRIDE: usize = 2;

/// Which attention gates are applied; a subset of `{A0, A1, A2}`.
///
/// Parsed from and printed as `none`, `a0`, `a12`, `a012`, or any other
/// `a` + digits combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AttentionLevels {
    pub a0: bool,
    pub a1: bool,
    pub a2: bool,
}

impl AttentionLevels {
    pub const NONE: Self = Self {
        a0: false,
        a1: false,
        a2: false,
    };
    pub const ALL: Self = Self {
        a0: true,
        a1: true,
        a2: true,
    };

    pub fn any(&self) -> bool {
        self.a0 || self.a1 || self.a2
    }
}

impl fmt::Display for AttentionLevels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.any() {
            return f.write_str("none");
        }
        f.write_str("a")?;
        for (on, digit) in [(self.a0, '0'), (self.a1, '1'), (self.a2, '2')] {
            if on {
                write!(f, "{digit}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for AttentionLevels {
    type Err = TsmError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "none" {
            return Ok(Self::NONE);
        }
        let bad = || TsmError::Argument(format!("unknown attention levels {s:?}"));
        let digits = s.strip_prefix('a').ok_or_else(bad)?;
        if digits.is_empty() {
            return Err(bad());
        }
        let mut levels = Self::NONE;
        for ch in digits.chars() {
            let slot = match ch {
                '0' => &mut levels.a0,
                '1' => &mut levels.a1,
                '2' => &mut levels.a2,
                _ => return Err(bad()),
            };
            if *slot {
                return Err(bad());
            }
            *slot = true;
        }
        Ok(levels)
    }
}

impl TryFrom<String> for AttentionLevels {
    type Error = TsmError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AttentionLevels> for String {
    fn from(a: AttentionLevels) -> String {
        a.to_string()
    }
}

/// Architecture hyperparameters of a [`HeadModel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Height `T` every input map is resampled to.
    pub t_fixed: usize,
    /// Feature dimension `L`.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub widths: [usize; 3],
    pub attention_widths: [usize; 2],
    pub attention: AttentionLevels,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_fixed: 64,
            feature_dim: 16,
            num_classes: 2,
            widths: [16, 32, 32],
            attention_widths: [8, 16],
            attention: AttentionLevels::ALL,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_fixed == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return Err(TsmError::Argument(
                "t_fixed, feature_dim and num_classes must be positive".into(),
            ));
        }
        if self.widths.contains(&0) || self.attention_widths.contains(&0) {
            return Err(TsmError::Argument("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// `(T, L)` extent after `blocks` pooling stages.
    pub fn extent_after(&self, blocks: u32) -> (usize, usize) {
        let mut t = self.t_fixed;
        let mut l = self.feature_dim;
        for _ in 0..blocks {
            t = pooled_extent(t, POOL_KERNEL, POOL_STRIDE, true).expect("positive extent");
            l = pooled_extent(l, POOL_KERNEL, POOL_STRIDE, true).expect("positive extent");
        }
        (t, l)
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = KERNEL_SIZE;
        let mut shapes = Vec::new();
        let mut cin = 1;
        for (i, &w) in self.widths.iter().enumerate() {
            shapes.push((format!("block{}.kernel", i + 1), vec![k, k, cin, w]));
            shapes.push((format!("block{}.bias", i + 1), vec![w]));
            cin = w;
        }
        let mut cin = 1;
        for (i, &w) in self.attention_widths.iter().enumerate() {
            shapes.push((format!("attention.block{}.kernel", i + 1), vec![k, k, cin, w]));
            shapes.push((format!("attention.block{}.bias", i + 1), vec![w]));
            cin = w;
        }
        let (t2, l2) = self.extent_after(2);
        let attn_in = t2 * l2 * self.attention_widths[1];
        shapes.push(("attention.fc.weight".into(), vec![attn_in, self.t_fixed]));
        shapes.push(("attention.fc.bias".into(), vec![self.t_fixed]));
        shapes.push((
            "classifier.weight".into(),
            vec![self.classifier_inputs(), self.num_classes],
        ));
        shapes.push(("classifier.bias".into(), vec![self.num_classes]));
        shapes
    }

    /// Length of the flattened block-3 output fed to the classifier.
    pub fn classifier_inputs(&self) -> usize {
        let (t3, l3) = self.extent_after(3);
        t3 * l3 * self.widths[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

// Parameter slots, matching `ModelConfig::parameter_shapes` order.
const BLOCK_KERNEL: [usize; 3] = [0, 2, 4];
const BLOCK_BIAS: [usize; 3] = [1, 3, 5];
const ATTN_KERNEL: [usize; 2] = [6, 8];
const ATTN_BIAS: [usize; 2] = [7, 9];
const ATTN_FC_W: usize = 10;
const ATTN_FC_B: usize = 11;
const CLS_W: usize = 12;
const CLS_B: usize = 13;

/// Parameters of the head network, its attention branch and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Per-level attention vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSet {
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

/// Where the attention gates come from during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum AttentionSource<'a> {
    /// Computed by the attention branch.
    #[default]
    Learned,
    /// A caller-supplied `a0`; `a1`, `a2` are pooled from it as usual.
    Fixed(&'a [f64]),
}

/// Variables recorded by one [`HeadModel::forward`] call.
pub struct Forward<'t> {
    pub logits: Var<'t>,
    /// One variable per parameter, in storage order.
    pub params: Vec<Var<'t>>,
    /// Conv-3 activations (after ReLU, before pooling).
    pub conv3: Var<'t>,
    /// `(a0, a1, a2)` when the attention branch ran.
    pub attention: Option<(Var<'t>, Var<'t>, Var<'t>)>,
}

/// Temporal Grad-CAM response of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalResponse {
    /// One value per Conv-3 temporal position (`⌈T/4⌉`).
    pub raw: Vec<f64>,
    /// `raw` stretched to the input height by nearest-index sampling.
    pub upsampled: Vec<f64>,
}

fn at_stage(stage: &str, err: TsmError) -> TsmError {
    match err {
        TsmError::Dimension { context, message } => TsmError::Dimension {
            context: format!("{stage}: {context}"),
            message,
        },
        other => other,
    }
}

impl HeadModel {
    /// Fresh parameters: He-scaled Gaussian weights and zero biases. The
    /// attention output layer starts at zero, so every gate opens at 0.5.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .parameter_shapes()
            .into_iter()
            .enumerate()
            .map(|(slot, (name, shape))| {
                let tensor = if name.ends_with(".bias") || slot == ATTN_FC_W {
                    Tensor::zeros(shape)?
                } else {
                    let fan_in: usize = shape[..shape.len() - 1].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive scale");
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
                };
                Ok(Param { name, tensor })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    /// Rebuild from stored parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(TsmError::dim(
                "HeadModel",
                format!("expected {} parameters, got {}", expected.len(), params.len()),
            ));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(TsmError::dim(
                    "HeadModel",
                    format!(
                        "parameter {:?} {:?} does not match expected {name:?} {shape:?}",
                        p.name,
                        p.tensor.shape()
                    ),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Switch the enabled attention levels; parameters are untouched.
    pub fn set_attention(&mut self, levels: AttentionLevels) {
        self.config.attention = levels;
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let want = [self.config.t_fixed, self.config.feature_dim, 1];
        if input.shape() != want {
            return Err(TsmError::dim(
                "input",
                format!("expected a {}x{} map, got shape {:?}", want[0], want[1], input.shape()),
            ));
        }
        Ok(())
    }

    /// Record every parameter on `tape`, tracked or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    fn block<'t>(x: Var<'t>, kernel: Var<'t>, bias: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let act = x.conv2d(kernel, bias, Padding::Same)?.relu();
        let pooled = act.maxpool2d((POOL_KERNEL, POOL_KERNEL), (POOL_STRIDE, POOL_STRIDE), true)?;
        Ok((act, pooled))
    }

    /// The attention branch: `a0 = sigmoid(FC(block(block(map))))`, length `T`.
    pub fn attention_branch<'t>(&self, input: Var<'t>, params: &[Var<'t>]) -> Result<Var<'t>> {
        self.check_input(&input.value()).map_err(|e| at_stage("attention", e))?;
        let (_, x) = Self::block(input, params[ATTN_KERNEL[0]], params[ATTN_BIAS[0]])
            .map_err(|e| at_stage("attention.block1", e))?;
        let (_, x) = Self::block(x, params[ATTN_KERNEL[1]], params[ATTN_BIAS[1]])
            .map_err(|e| at_stage("attention.block2", e))?;
        let logits = x
            .flatten()?
            .fully_connected(params[ATTN_FC_W], params[ATTN_FC_B])
            .map_err(|e| at_stage("attention.fc", e))?;
        Ok(logits.sigmoid())
    }

    /// Full forward pass on a recorded input of shape `T×L×1`.
    pub fn forward_var<'t>(
        &self,
        input: Var<'t>,
        params: Vec<Var<'t>>,
        source: AttentionSource<'_>,
    ) -> Result<Forward<'t>> {
        self.forward_impl(input, params, source, None)
    }

    fn forward_impl<'t>(
        &self,
        input: Var<'t>,
        params: Vec<Var<'t>>,
        source: AttentionSource<'_>,
        dropout_mask: Option<Tensor>,
    ) -> Result<Forward<'t>> {
        self.check_input(&input.value())?;
        let levels = self.config.attention;
        let attention = if levels.any() {
            let a0 = match source {
                AttentionSource::Learned => self.attention_branch(input, &params)?,
                AttentionSource::Fixed(values) => {
                    if values.len() != self.config.t_fixed {
                        return Err(TsmError::dim(
                            "attention",
                            format!("fixed a0 has length {}, expected {}", values.len(), self.config.t_fixed),
                        ));
                    }
                    input.tape().constant(Tensor::vector(values.to_vec()))
                }
            };
            let a1 = pool_attention(a0)?;
            let a2 = pool_attention(a1)?;
            Some((a0, a1, a2))
        } else {
            None
        };

        let gate = |x: Var<'t>, on: bool, a: Option<Var<'t>>, stage: &str| -> Result<Var<'t>> {
            match (on, a) {
                (true, Some(a)) => gate_rows(x, a).map_err(|e| at_stage(stage, e)),
                _ => Ok(x),
            }
        };
        let mut x = gate(input, levels.a0, attention.map(|a| a.0), "A0")?;
        let (_, pooled) =
            Self::block(x, params[BLOCK_KERNEL[0]], params[BLOCK_BIAS[0]]).map_err(|e| at_stage("block1", e))?;
        x = gate(pooled, levels.a1, attention.map(|a| a.1), "A1")?;
        let (_, pooled) =
            Self::block(x, params[BLOCK_KERNEL[1]], params[BLOCK_BIAS[1]]).map_err(|e| at_stage("block2", e))?;
        x = gate(pooled, levels.a2, attention.map(|a| a.2), "A2")?;
        let (conv3, pooled) =
            Self::block(x, params[BLOCK_KERNEL[2]], params[BLOCK_BIAS[2]]).map_err(|e| at_stage("block3", e))?;
        let mut features = pooled.flatten()?;
        if let Some(mask) = dropout_mask {
            features = features
                .mul_broadcast(input.tape().constant(mask))
                .map_err(|e| at_stage("dropout", e))?;
        }
        let logits = features
            .fully_connected(params[CLS_W], params[CLS_B])
            .map_err(|e| at_stage("classifier", e))?;
        Ok(Forward {
            logits,
            params,
            conv3,
            attention,
        })
    }

    /// Forward pass recording parameters on `tape`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        input: &Tensor,
        trainable: bool,
        source: AttentionSource<'_>,
    ) -> Result<Forward<'t>> {
        self.check_input(input)?;
        let params = self.bind(tape, trainable);
        let x = tape.constant(input.clone());
        self.forward_var(x, params, source)
    }

    /// Tracked forward pass with an optional dropout mask on the classifier input.
    pub fn forward_masked<'t>(
        &self,
        tape: &'t Tape,
        input: &Tensor,
        source: AttentionSource<'_>,
        dropout_mask: Option<Tensor>,
    ) -> Result<Forward<'t>> {
        self.check_input(input)?;
        let params = self.bind(tape, true);
        let x = tape.constant(input.clone());
        self.forward_impl(x, params, source, dropout_mask)
    }

    /// Class logits for `map`, which must already be `t_fixed` rows high.
    pub fn head_forward(&self, map: &VideoMap) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, &map.to_tensor(), false, AttentionSource::Learned)?;
        let logits = fwd.logits.to_tensor().into_data();
        Ok(logits)
    }

    /// Logits with a caller-supplied `a0` in place of the attention branch.
    pub fn head_forward_with_attention(&self, map: &VideoMap, a0: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, &map.to_tensor(), false, AttentionSource::Fixed(a0))?;
        let logits = fwd.logits.to_tensor().into_data();
        Ok(logits)
    }

    /// `a0` from the attention branch, regardless of which levels are enabled.
    pub fn attention_vector(&self, map: &VideoMap) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let input = tape.constant(map.to_tensor());
        let a0 = self.attention_branch(input, &params)?;
        let out = a0.to_tensor().into_data();
        Ok(out)
    }

    pub fn attention_set(&self, map: &VideoMap) -> Result<AttentionSet> {
        let a0 = self.attention_vector(map)?;
        let a1 = downsample_attention(&a0)?;
        let a2 = downsample_attention(&a1)?;
        Ok(AttentionSet { a0, a1, a2 })
    }

    /// Grad-CAM over the Conv-3 activations for class `class`, reduced to time.
    ///
    /// Channel weights are the gradients of logit `class` averaged over the
    /// Conv-3 plane; the weighted channel sum passes through a ReLU and is
    /// averaged over the feature axis.
    pub fn temporal_response_map(&self, map: &VideoMap, class: usize) -> Result<TemporalResponse> {
        if class >= self.config.num_classes {
            return Err(TsmError::Index {
                context: "temporal_response_map class".into(),
                index: class,
                size: self.config.num_classes,
            });
        }
        let tape = Tape::new();
        let fwd = self.forward(&tape, &map.to_tensor(), true, AttentionSource::Learned)?;
        let score = fwd.logits.select(class)?;
        let grads = tape.backward(score)?;
        let acts = fwd.conv3.to_tensor();
        let g = grads.get_or_zeros(fwd.conv3);
        let (t3, l3, c3) = (acts.shape()[0], acts.shape()[1], acts.shape()[2]);
        let mut weights = vec![0.0; c3];
        for px in g.data().chunks_exact(c3) {
            for (w, &v) in weights.iter_mut().zip(px) {
                *w += v;
            }
        }
        let plane = (t3 * l3) as f64;
        weights.iter_mut().for_each(|w| *w /= plane);
        let cam: Vec<f64> = acts
            .data()
            .chunks_exact(c3)
            .map(|px| px.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>().max(0.0))
            .collect();
        let raw: Vec<f64> = cam
            .chunks_exact(l3)
            .map(|row| row.iter().sum::<f64>() / l3 as f64)
            .collect();
        let upsampled = sample_indices(t3, self.config.t_fixed)
            .into_iter()
            .map(|i| raw[i])
            .collect();
        Ok(TemporalResponse { raw, upsampled })
    }
}

/// Stride-2 ceil-mode max pool of a recorded attention vector.
pub fn pool_attention<'t>(a: Var<'t>) -> Result<Var<'t>> {
    let n = a.value().len();
    a.reshape(vec![n, 1, 1])?.maxpool2d((2, 1), (2, 1), true)?.flatten()
}

/// Multiply every row `t` of a recorded `T×L×C` tensor by `a[t]`.
pub fn gate_rows<'t>(features: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    let t = features.value().shape()[0];
    let n = a.value().len();
    if n != t {
        return Err(TsmError::dim(
            "apply_attention",
            format!("attention length {n} vs temporal extent {t}"),
        ));
    }
    features.mul_broadcast(a.reshape(vec![n, 1, 1])?)
}

/// `out[j] = max(a[2j], a[2j+1])`, passing a lone tail element through.
pub fn downsample_attention(a: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(TsmError::dim("downsample_attention", "empty attention vector"));
    }
    let input = Tensor::new(vec![a.len(), 1, 1], a.to_vec())?;
    Ok(ops::maxpool2d(&input, (2, 1), (2, 1), true)?.output.into_data())
}

/// `F̃[t, l, c] = a[t] · F[t, l, c]` for a `T×L×C` (or `T×L`) tensor.
pub fn apply_attention(features: &Tensor, a: &[f64]) -> Result<Tensor> {
    let t = features.shape()[0];
    if a.len() != t {
        return Err(TsmError::dim(
            "apply_attention",
            format!("attention length {} vs temporal extent {t}", a.len()),
        ));
    }
    let mut shape = vec![1; features.rank()];
    shape[0] = t;
    ops::mul_broadcast(features, &Tensor::new(shape, a.to_vec())?)
}
