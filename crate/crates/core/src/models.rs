//! Small VGG- and ResNet-style classifiers, prediction, and checkpoints.
//!
//! Models take images in the pixel domain. The first operation standardizes
//! each channel with statistics stored in the model, so input gradients are
//! expressed in pixel units.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::LabeledDataset;
use crate::error::{CheckpointError, Error, Result};
use crate::nn::{
    self, BatchStats, Mode, Probabilities, Reduction, RunningStats, BN_EPS, BN_MOMENTUM,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// `depth` blocks of conv3x3 -> batch-norm -> relu -> maxpool, doubling
    /// the width each block, then global-average-pool and a dense head.
    Minivgg,
    /// Stride-2 stem conv, three residual stages of `depth` basic blocks
    /// (widths `w, 2w, 4w`, stages 2 and 3 downsample), global-average-pool
    /// and a dense head.
    Miniresnet,
    /// A single dense layer on the flattened input. Used as a probe model.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub width: usize,
    pub depth: usize,
    pub num_classes: usize,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
}

impl ModelSpec {
    pub fn minivgg(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Minivgg,
            width: 8,
            depth: 3,
            num_classes,
            input_shape,
        }
    }

    pub fn miniresnet(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Miniresnet,
            width: 8,
            depth: 2,
            num_classes,
            input_shape,
        }
    }

    pub fn linear(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Linear,
            width: 0,
            depth: 0,
            num_classes,
            input_shape,
        }
    }

    /// Checks that every layer's input extent matches its predecessor's output.
    pub fn validate(&self) -> Result<()> {
        layout(self).map(|_| ())
    }
}

/// Provenance recorded alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub defense: String,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    conv: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    ConvBnRelu(ConvBn),
    MaxPool,
    Residual {
        first: ConvBn,
        second: ConvBn,
        projection: Option<ConvBn>,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        weight: usize,
        bias: usize,
    },
}

#[derive(Clone, Debug)]
struct ParamDecl {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    He { fan_in: usize },
    Const(f32),
}

struct Layout {
    params: Vec<ParamDecl>,
    bn_names: Vec<String>,
    bn_channels: Vec<usize>,
    layers: Vec<Layer>,
}

struct LayoutBuilder {
    params: Vec<ParamDecl>,
    bn_names: Vec<String>,
    bn_channels: Vec<usize>,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.params.push(ParamDecl { name, shape, init });
        self.params.len() - 1
    }

    fn conv_bn(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> ConvBn {
        let conv = self.param(
            format!("{prefix}.conv.weight"),
            vec![cout, cin, k, k],
            Init::He {
                fan_in: cin * k * k,
            },
        );
        let gamma = self.param(format!("{prefix}.bn.gamma"), vec![cout], Init::Const(1.0));
        let beta = self.param(format!("{prefix}.bn.beta"), vec![cout], Init::Const(0.0));
        self.bn_names.push(format!("{prefix}.bn"));
        self.bn_channels.push(cout);
        ConvBn {
            conv,
            gamma,
            beta,
            bn: self.bn_names.len() - 1,
            stride,
            pad: k / 2,
        }
    }
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (extent + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

fn layout(spec: &ModelSpec) -> Result<Layout> {
    let [c, h, w] = spec.input_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidSpec(format!(
            "input shape {:?}",
            spec.input_shape
        )));
    }
    if spec.num_classes < 2 {
        return Err(Error::InvalidSpec(format!(
            "num_classes must be at least 2, got {}",
            spec.num_classes
        )));
    }
    let mut b = LayoutBuilder {
        params: Vec::new(),
        bn_names: Vec::new(),
        bn_channels: Vec::new(),
    };
    let mut layers = Vec::new();
    let (mut ch, mut hh, mut ww) = (c, h, w);
    match spec.architecture {
        Architecture::Linear => {
            layers.push(Layer::Flatten);
            ch *= hh * ww;
        }
        Architecture::Minivgg => {
            if spec.width == 0 || spec.depth == 0 {
                return Err(Error::InvalidSpec(
                    "minivgg needs width and depth >= 1".into(),
                ));
            }
            for i in 0..spec.depth {
                let cout = spec.width << i;
                layers.push(Layer::ConvBnRelu(b.conv_bn(
                    &format!("block{i}"),
                    ch,
                    cout,
                    3,
                    1,
                )));
                if hh < 2 || ww < 2 {
                    return Err(Error::InvalidSpec(format!(
                        "block {i}: {hh}x{ww} feature map is too small to pool"
                    )));
                }
                layers.push(Layer::MaxPool);
                ch = cout;
                hh /= 2;
                ww /= 2;
            }
            layers.push(Layer::GlobalAvgPool);
        }
        Architecture::Miniresnet => {
            if spec.width == 0 || spec.depth == 0 {
                return Err(Error::InvalidSpec(
                    "miniresnet needs width and depth >= 1".into(),
                ));
            }
            let stem = b.conv_bn("stem", ch, spec.width, 3, 2);
            layers.push(Layer::ConvBnRelu(stem));
            ch = spec.width;
            hh = conv_out(hh, 3, 2, 1).unwrap_or(0);
            ww = conv_out(ww, 3, 2, 1).unwrap_or(0);
            for stage in 0..3 {
                let cout = spec.width << stage;
                for blk in 0..spec.depth {
                    let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
                    let prefix = format!("stage{stage}.block{blk}");
                    let first = b.conv_bn(&format!("{prefix}.a"), ch, cout, 3, stride);
                    let second = b.conv_bn(&format!("{prefix}.b"), cout, cout, 3, 1);
                    let projection = (stride != 1 || ch != cout)
                        .then(|| b.conv_bn(&format!("{prefix}.proj"), ch, cout, 1, stride));
                    layers.push(Layer::Residual {
                        first,
                        second,
                        projection,
                    });
                    ch = cout;
                    hh = conv_out(hh, 3, stride, 1).unwrap_or(0);
                    ww = conv_out(ww, 3, stride, 1).unwrap_or(0);
                    if hh == 0 || ww == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "{prefix}: feature map collapsed to zero extent"
                        )));
                    }
                }
            }
            layers.push(Layer::GlobalAvgPool);
        }
    }
    let weight = b.param(
        "head.weight".into(),
        vec![spec.num_classes, ch],
        Init::He { fan_in: ch },
    );
    let bias = b.param("head.bias".into(), vec![spec.num_classes], Init::Const(0.0));
    layers.push(Layer::Dense { weight, bias });
    Ok(Layout {
        params: b.params,
        bn_names: b.bn_names,
        bn_channels: b.bn_channels,
        layers,
    })
}

/// Outputs of one forward pass.
pub struct Forward {
    pub logits: Var,
    /// Batch statistics of every batch-norm layer, present in train mode.
    pub batch_stats: Vec<BatchStats>,
}

pub struct Model {
    spec: ModelSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
    bn_names: Vec<String>,
    running: Vec<RunningStats>,
    input_mean: Vec<f32>,
    input_std: Vec<f32>,
    layers: Vec<Layer>,
    pub meta: TrainingMeta,
    forward_passes: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            names: self.names.clone(),
            params: self.params.clone(),
            bn_names: self.bn_names.clone(),
            running: self.running.clone(),
            input_mean: self.input_mean.clone(),
            input_std: self.input_std.clone(),
            layers: self.layers.clone(),
            meta: self.meta.clone(),
            forward_passes: AtomicU64::new(self.forward_passes.load(Ordering::Relaxed)),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

/// Builds a model with He-normal conv/dense weights drawn from `seed`,
/// unit batch-norm scales and zero shifts. Input standardization starts as
/// the identity; see [`Model::set_input_normalization`].
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let lay = layout(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = lay
        .params
        .iter()
        .map(|d| {
            let n: usize = d.shape.iter().product();
            let data = match d.init {
                Init::He { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (z * std) as f32
                        })
                        .collect()
                }
                Init::Const(v) => vec![v; n],
            };
            Tensor::from_parts(d.shape.clone(), data)
        })
        .collect();
    let c = spec.input_shape[0];
    Ok(Model {
        spec: spec.clone(),
        names: lay.params.iter().map(|d| d.name.clone()).collect(),
        params,
        bn_names: lay.bn_names,
        running: lay
            .bn_channels
            .iter()
            .map(|&c| RunningStats::new(c))
            .collect(),
        input_mean: vec![0.0; c],
        input_std: vec![1.0; c],
        layers: lay.layers,
        meta: TrainingMeta {
            seed,
            ..TrainingMeta::default()
        },
        forward_passes: AtomicU64::new(0),
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if value.shape() != self.params[i].shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.params[i].shape(),
                value.shape()
            )));
        }
        self.params[i] = value;
        Ok(())
    }

    /// Mutable access for optimizers, in declaration order.
    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn input_normalization(&self) -> (&[f32], &[f32]) {
        (&self.input_mean, &self.input_std)
    }

    pub fn set_input_normalization(&mut self, mean: Vec<f32>, std: Vec<f32>) -> Result<()> {
        let c = self.spec.input_shape[0];
        if mean.len() != c || std.len() != c || std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "input normalization needs {c} means and positive stds"
            )));
        }
        self.input_mean = mean;
        self.input_std = std;
        Ok(())
    }

    /// Count of forward passes run so far.
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    /// Places the parameters on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    /// Logits for a batch `x: [N, C, H, W]` in pixel units.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var, mode: Mode) -> Result<Forward> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "model expects [N, {}, {}, {}] input, got {:?}",
                self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2], shape
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameter variables bound for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let scale: Vec<f64> = self.input_std.iter().map(|&s| 1.0 / s as f64).collect();
        let shift: Vec<f64> = self
            .input_mean
            .iter()
            .zip(&scale)
            .map(|(&m, &s)| -(m as f64) * s)
            .collect();
        let mut h = nn::channel_affine(tape, x, &scale, &shift)?;
        let mut stats = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::ConvBnRelu(cb) => {
                    let y = self.conv_bn(tape, params, h, cb, mode, &mut stats)?;
                    nn::relu(tape, y)
                }
                Layer::MaxPool => nn::max_pool2d(tape, h)?,
                Layer::Residual {
                    first,
                    second,
                    projection,
                } => {
                    let a = self.conv_bn(tape, params, h, first, mode, &mut stats)?;
                    let a = nn::relu(tape, a);
                    let b = self.conv_bn(tape, params, a, second, mode, &mut stats)?;
                    let skip = match projection {
                        Some(p) => self.conv_bn(tape, params, h, p, mode, &mut stats)?,
                        None => h,
                    };
                    let sum = tape.add(b, skip)?;
                    nn::relu(tape, sum)
                }
                Layer::GlobalAvgPool => nn::global_avg_pool(tape, h)?,
                Layer::Flatten => {
                    let s = tape.shape(h);
                    let n = s[0];
                    let rest = s[1..].iter().product();
                    tape.reshape(h, &[n, rest])?
                }
                Layer::Dense { weight, bias } => nn::dense(tape, h, params[weight], params[bias])?,
            };
        }
        Ok(Forward {
            logits: h,
            batch_stats: stats,
        })
    }

    fn conv_bn(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        cb: ConvBn,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let y = nn::conv2d(tape, x, params[cb.conv], cb.stride, cb.pad)?;
        match mode {
            Mode::Train => {
                let (out, s) =
                    nn::batch_norm_train(tape, y, params[cb.gamma], params[cb.beta], BN_EPS)?;
                stats.push(s);
                Ok(out)
            }
            Mode::Eval => nn::batch_norm_eval(
                tape,
                y,
                params[cb.gamma],
                params[cb.beta],
                &self.running[cb.bn],
                BN_EPS,
            ),
        }
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s, BN_MOMENTUM);
        }
    }

    /// Eval-mode logits without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_in_mode(x, Mode::Eval)
    }

    /// Logits without recording gradients; train mode normalizes with the
    /// batch's own statistics and leaves the running estimates alone.
    pub fn logits_in_mode(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, xv, mode)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Eval-mode logits and per-row class probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Vec<Probabilities>)> {
        let logits = self.logits(x)?;
        let c = self.spec.num_classes;
        let probs = logits
            .data()
            .chunks(c)
            .map(Probabilities::from_logits)
            .collect();
        Ok((logits, probs))
    }

    /// Argmax class per row, lowest index on ties.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .data()
            .chunks(self.spec.num_classes)
            .map(nn::argmax)
            .collect())
    }

    /// Eval-mode gradient of the summed cross-entropy with respect to the
    /// input pixels, plus the logits it was computed from. Each row of the
    /// result is the gradient of that image's own loss.
    pub fn input_gradient(&self, x: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), true);
        let out = self.forward(&mut tape, &params, xv, Mode::Eval)?;
        let loss = nn::cross_entropy(&mut tape, out.logits, labels, Reduction::Sum)?;
        let logits = tape.value(out.logits).clone();
        let grads = tape.backward(loss)?;
        Ok((grads.wrt(xv), logits))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "kind": "model",
            "spec": self.spec,
            "meta": self.meta,
        });
        let mut named: Vec<(String, Tensor)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        for (name, r) in self.bn_names.iter().zip(&self.running) {
            let c = r.mean.len();
            named.push((
                format!("{name}.running_mean"),
                Tensor::from_parts(vec![c], r.mean.clone()),
            ));
            named.push((
                format!("{name}.running_var"),
                Tensor::from_parts(vec![c], r.var.clone()),
            ));
        }
        let c = self.input_mean.len();
        named.push((
            "input.mean".into(),
            Tensor::from_parts(vec![c], self.input_mean.clone()),
        ));
        named.push((
            "input.std".into(),
            Tensor::from_parts(vec![c], self.input_std.clone()),
        ));
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        checkpoint::encode(&header, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let (header, tensors) = checkpoint::decode(bytes)?;
        let malformed = |m: String| Error::Checkpoint(CheckpointError::Malformed(m));
        if header.get("kind").and_then(|k| k.as_str()) != Some("model") {
            return Err(malformed("header does not describe a model".into()));
        }
        let spec: ModelSpec = serde_json::from_value(header["spec"].clone())
            .map_err(|e| malformed(format!("model spec: {e}")))?;
        let meta: TrainingMeta = serde_json::from_value(header["meta"].clone())
            .map_err(|e| malformed(format!("training metadata: {e}")))?;
        let mut model = build_model(&spec, 0)?;
        model.meta = meta;
        let mut tensors: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| malformed(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(malformed(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for i in 0..model.params.len() {
            let shape = model.params[i].shape().to_vec();
            model.params[i] = take(&model.names[i], &shape)?;
        }
        for i in 0..model.running.len() {
            let c = model.running[i].mean.len();
            let name = model.bn_names[i].clone();
            model.running[i].mean = take(&format!("{name}.running_mean"), &[c])?.into_data();
            model.running[i].var = take(&format!("{name}.running_var"), &[c])?.into_data();
        }
        let c = spec.input_shape[0];
        model.input_mean = take("input.mean", &[c])?.into_data();
        model.input_std = take("input.std", &[c])?.into_data();
        drop(take);
        if let Some(extra) = tensors.keys().next() {
            return Err(malformed(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }

    /// Bitwise equality of parameters, running statistics and normalization.
    pub fn bit_eq(&self, other: &Model) -> bool {
        let eq_f32 = |a: &[f32], b: &[f32]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.spec == other.spec
            && self.names == other.names
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.bit_eq(b))
            && self
                .running
                .iter()
                .zip(&other.running)
                .all(|(a, b)| eq_f32(&a.mean, &b.mean) && eq_f32(&a.var, &b.var))
            && eq_f32(&self.input_mean, &other.input_mean)
            && eq_f32(&self.input_std, &other.input_std)
    }
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    Model::load(path)
}

/// Fraction of argmax-correct predictions over the dataset.
pub fn accuracy(model: &Model, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data(crate::error::DataError::Empty));
    }
    let predicted = classify_all(model, dataset.images(), 256)?;
    let correct = predicted
        .iter()
        .zip(dataset.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Eval-mode argmax over a large batch, processed in chunks.
pub fn classify_all(model: &Model, images: &Tensor, chunk: usize) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        out.extend(model.classify(&images.slice_outer(start, end)?)?);
        start = end;
    }
    Ok(out)
}
