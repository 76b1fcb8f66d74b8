//! FGSM, the gradient ensemble attack and adversarial-set extraction.
//!
//! All budgets are in raw pixel units. Gradients flow through each model's
//! input standardization, so a step of `1.0` moves a pixel by one grey level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn;
use crate::tensor::{l2_norm, sign, Tensor};

/// Norm below which a gradient is treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub step_size: f32,
    pub iterations: usize,
    pub pixel_domain: (f32, f32),
}

impl AttackConfig {
    pub fn new(
        epsilon: f32,
        step_size: f32,
        iterations: usize,
        pixel_domain: (f32, f32),
    ) -> Result<Self> {
        let cfg = AttackConfig {
            epsilon,
            step_size,
            iterations,
            pixel_domain,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Step size 1 and the default iteration schedule on `[0, 255]`.
    pub fn with_schedule(epsilon: f32) -> Result<Self> {
        Self::new(
            epsilon,
            1.0,
            iteration_count(epsilon as f64),
            (crate::data::PIXEL_MIN, crate::data::PIXEL_MAX),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pixel_domain;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(lo < hi) {
            return Err(Error::Config(format!("pixel domain [{lo}, {hi}] is empty")));
        }
        Ok(())
    }
}

/// `I = max(1, round(min(eps + 4, 1.25 * eps)))`, rounding half away from zero.
pub fn iteration_count(epsilon: f64) -> usize {
    (epsilon + 4.0).min(1.25 * epsilon).round().max(1.0) as usize
}

/// `g / ||g||_2` over the whole tensor.
pub fn normalize_gradient(g: &Tensor) -> Result<Tensor> {
    let norm = l2_norm(g.data());
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm <= DEGENERATE_NORM {
        return Err(Error::DegenerateGradient(format!("gradient norm {norm:e}")));
    }
    Ok(g.map(|v| (v as f64 / norm) as f32))
}

fn check_batch(x: &Tensor, y: &[usize]) -> Result<usize> {
    if x.shape().len() != 4 || x.shape()[0] != y.len() {
        return Err(Error::Shape(format!(
            "attack batch {:?} with {} labels",
            x.shape(),
            y.len()
        )));
    }
    Ok(x.len() / y.len())
}

/// `clip_domain(x + eps * sign(grad_x L))` from a single gradient evaluation.
pub fn fgsm(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    epsilon: f32,
    domain: (f32, f32),
) -> Result<Tensor> {
    check_batch(x, y)?;
    let (g, _) = model.input_gradient(x, y)?;
    if !g.all_finite() {
        return Err(Error::NonFinite("input gradient".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| (v + epsilon * sign(gv)).clamp(domain.0, domain.1))
        .collect();
    Tensor::new(x.shape(), data)
}

/// One step of the ensemble attack:
/// `clip(x_prev + step * sign(sum_n g_n / ||g_n||))`, with the clip
/// enforcing both the eps-ball around `x_orig` and the pixel domain.
///
/// Each image is normalized separately. A member whose gradient on an image
/// is degenerate is left out of that image's sum; if every member is
/// degenerate the step fails. Per-pixel sums are taken over the sorted
/// member terms, so the result does not depend on model order.
pub fn ensemble_step(
    models: &[&Model],
    x_prev: &Tensor,
    x_orig: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    step(models, x_prev, x_orig, y, cfg, true)
}

fn step(
    models: &[&Model],
    x_prev: &Tensor,
    x_orig: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    strict: bool,
) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::Config("ensemble is empty".into()));
    }
    let row = check_batch(x_prev, y)?;
    if x_prev.shape() != x_orig.shape() {
        return Err(Error::Shape("x_prev and x_orig differ in shape".into()));
    }
    let mut terms: Vec<Vec<f64>> = Vec::with_capacity(models.len());
    let mut usable = vec![0usize; y.len()];
    for model in models {
        let (g, _) = model.input_gradient(x_prev, y)?;
        if !g.all_finite() {
            return Err(Error::NonFinite("input gradient".into()));
        }
        let mut t = vec![0.0f64; g.len()];
        for (i, (grow, trow)) in g.data().chunks(row).zip(t.chunks_mut(row)).enumerate() {
            let norm = l2_norm(grow);
            if norm <= DEGENERATE_NORM {
                continue;
            }
            usable[i] += 1;
            for (o, &v) in trow.iter_mut().zip(grow) {
                *o = v as f64 / norm;
            }
        }
        terms.push(t);
    }
    if let Some(i) = usable.iter().position(|&u| u == 0).filter(|_| strict) {
        return Err(Error::DegenerateGradient(format!(
            "every ensemble member has a zero gradient on image {i}"
        )));
    }
    let (lo, hi) = cfg.pixel_domain;
    let mut buf = vec![0.0f64; models.len()];
    let data = (0..x_prev.len())
        .map(|p| {
            for (b, t) in buf.iter_mut().zip(&terms) {
                *b = t[p];
            }
            buf.sort_unstable_by(f64::total_cmp);
            let s: f64 = buf.iter().sum();
            let o = x_orig.data()[p];
            let v = x_prev.data()[p] + cfg.step_size * sign(s) as f32;
            v.clamp((o - cfg.epsilon).max(lo), (o + cfg.epsilon).min(hi))
        })
        .collect();
    Tensor::new(x_prev.shape(), data)
}

/// Runs [`ensemble_step`] `cfg.iterations` times from `x`.
pub fn ensemble_attack(
    models: &[&Model],
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut cur = x.clone();
    for _ in 0..cfg.iterations {
        cur = ensemble_step(models, &cur, x, y, cfg)?;
    }
    Ok(cur)
}

/// Like [`ensemble_attack`] but starting from `start` inside the ball around
/// `x`; images on which every member is degenerate hold still instead of
/// failing the batch.
pub fn ensemble_attack_lenient(
    models: &[&Model],
    start: &Tensor,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut cur = start.clone();
    for _ in 0..cfg.iterations {
        cur = step(models, &cur, x, y, cfg, false)?;
    }
    Ok(cur)
}

/// Per-image `||a - b||_inf`.
pub fn linf_distances(a: &Tensor, b: &Tensor) -> Result<Vec<f32>> {
    if a.shape() != b.shape() || a.shape().is_empty() {
        return Err(Error::Shape(
            "distance between differently shaped batches".into(),
        ));
    }
    let row = a.len() / a.shape()[0];
    Ok(a.data()
        .chunks(row)
        .zip(b.data().chunks(row))
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f32::max)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Candidates {
    pub adversarial: Tensor,
    pub distances: Vec<f32>,
}

/// Crafts one candidate per input image. Work is split into fixed chunks
/// of 64 images spread over `workers` threads; the output does not depend
/// on the worker count.
pub fn craft_adversaries(
    models: &[&Model],
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    workers: usize,
) -> Result<Candidates> {
    cfg.validate()?;
    check_batch(images, labels)?;
    let n = labels.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n)))
        .collect();
    let run = |&(s, e): &(usize, usize)| -> Result<Tensor> {
        ensemble_attack(models, &images.slice_outer(s, e)?, &labels[s..e], cfg)
    };
    let parts = parallel_map(&chunks, workers, run)?;
    let adversarial = Tensor::concat_outer(&parts)?;
    let distances = linf_distances(&adversarial, images)?;
    Ok(Candidates {
        adversarial,
        distances,
    })
}

/// Maps `f` over `items` on up to `workers` scoped threads, keeping order.
pub(crate) fn parallel_map<I, O, F>(items: &[I], workers: usize, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let per = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Result<Vec<O>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Adversaries misclassified by every member of their crafting ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialSet {
    pub config: AttackConfig,
    pub ensemble_ids: Vec<String>,
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    /// Number of candidates the set was filtered from.
    pub candidates: usize,
    /// Row of each kept image in the attacked image batch.
    pub source_indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub distances: Vec<f32>,
    originals: Option<Tensor>,
    adversarial: Option<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config: AttackConfig,
    ensemble_ids: Vec<String>,
    image_shape: [usize; 3],
    num_classes: usize,
    candidates: usize,
    size: usize,
    empty: bool,
    source_indices: Vec<usize>,
    labels: Vec<usize>,
    distances: Vec<f32>,
    payload: String,
}

impl AdversarialSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Clean images, `None` for an empty set.
    pub fn originals(&self) -> Option<&Tensor> {
        self.originals.as_ref()
    }

    pub fn adversarial(&self) -> Option<&Tensor> {
        self.adversarial.as_ref()
    }

    pub fn bit_eq(&self, other: &AdversarialSet) -> bool {
        let t = |a: &Option<Tensor>, b: &Option<Tensor>| match (a, b) {
            (Some(a), Some(b)) => a.bit_eq(b),
            (None, None) => true,
            _ => false,
        };
        self.config == other.config
            && self.ensemble_ids == other.ensemble_ids
            && self.image_shape == other.image_shape
            && self.num_classes == other.num_classes
            && self.candidates == other.candidates
            && self.source_indices == other.source_indices
            && self.labels == other.labels
            && self
                .distances
                .iter()
                .map(|d| d.to_bits())
                .eq(other.distances.iter().map(|d| d.to_bits()))
            && t(&self.originals, &other.originals)
            && t(&self.adversarial, &other.adversarial)
    }

    fn manifest(&self, payload: &str) -> Manifest {
        Manifest {
            kind: "adversarial_set".into(),
            config: self.config,
            ensemble_ids: self.ensemble_ids.clone(),
            image_shape: self.image_shape,
            num_classes: self.num_classes,
            candidates: self.candidates,
            size: self.len(),
            empty: self.is_empty(),
            source_indices: self.source_indices.clone(),
            labels: self.labels.clone(),
            distances: self.distances.clone(),
            payload: payload.into(),
        }
    }

    /// Manifest JSON and tensor payload bytes.
    pub fn encode(&self, payload_name: &str) -> Result<(String, Vec<u8>)> {
        let json = serde_json::to_string_pretty(&self.manifest(payload_name))?;
        let mut tensors = Vec::new();
        if let (Some(o), Some(a)) = (&self.originals, &self.adversarial) {
            tensors.push(("original", o));
            tensors.push(("adversarial", a));
        }
        let bytes = checkpoint::encode(&serde_json::json!({"kind": "adversarial_set"}), &tensors);
        Ok((json, bytes))
    }

    pub fn decode(manifest: &str, payload: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_str(manifest)?;
        if m.kind != "adversarial_set" {
            return Err(Error::Config(format!(
                "manifest kind {:?} is not an adversarial set",
                m.kind
            )));
        }
        let (_, tensors) = checkpoint::decode(payload)?;
        let mut originals = None;
        let mut adversarial = None;
        for (name, t) in tensors {
            match name.as_str() {
                "original" => originals = Some(t),
                "adversarial" => adversarial = Some(t),
                other => {
                    return Err(crate::CheckpointError::Malformed(format!(
                        "unexpected tensor {other}"
                    ))
                    .into())
                }
            }
        }
        let [c, h, w] = m.image_shape;
        let expect = [m.size, c, h, w];
        for t in [&originals, &adversarial] {
            match t {
                Some(t) if t.shape() == expect => {}
                None if m.size == 0 => {}
                _ => {
                    return Err(crate::CheckpointError::Malformed(format!(
                        "payload does not hold {} images of {:?}",
                        m.size, m.image_shape
                    ))
                    .into())
                }
            }
        }
        if m.labels.len() != m.size
            || m.distances.len() != m.size
            || m.source_indices.len() != m.size
        {
            return Err(Error::Config(
                "manifest lists disagree with set size".into(),
            ));
        }
        Ok(AdversarialSet {
            config: m.config,
            ensemble_ids: m.ensemble_ids,
            image_shape: m.image_shape,
            num_classes: m.num_classes,
            candidates: m.candidates,
            source_indices: m.source_indices,
            labels: m.labels,
            distances: m.distances,
            originals,
            adversarial,
        })
    }

    /// Writes the manifest to `path` and the payload next to it with an
    /// `.advf` extension. Returns the payload path.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let payload = path.with_extension("advf");
        let name = payload
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (json, bytes) = self.encode(&name)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
        std::fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))?;
        Ok(payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&json)?;
        let payload = path.with_file_name(&m.payload);
        let bytes = std::fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
        Self::decode(&json, &bytes)
    }
}

/// Keeps the candidates that every model misclassifies. The models need
/// not agree on the wrong class.
pub fn extract_adversarial_set(
    models: &[&Model],
    ids: &[String],
    originals: &Tensor,
    candidates: &Candidates,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialSet> {
    if models.is_empty() || models.len() != ids.len() {
        return Err(Error::Config(format!(
            "{} models with {} ids",
            models.len(),
            ids.len()
        )));
    }
    check_batch(originals, labels)?;
    if candidates.adversarial.shape() != originals.shape() {
        return Err(Error::Shape(
            "candidates and originals differ in shape".into(),
        ));
    }
    let mut fooled = vec![true; labels.len()];
    for m in models {
        let pred = crate::models::classify_all(m, &candidates.adversarial, 256)?;
        for ((f, p), y) in fooled.iter_mut().zip(&pred).zip(labels) {
            *f &= p != y;
        }
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| fooled[i]).collect();
    let s = originals.shape();
    let (originals_kept, adversarial_kept) = if keep.is_empty() {
        (None, None)
    } else {
        (
            Some(originals.select_outer(&keep)?),
            Some(candidates.adversarial.select_outer(&keep)?),
        )
    };
    Ok(AdversarialSet {
        config: *cfg,
        ensemble_ids: ids.to_vec(),
        image_shape: [s[1], s[2], s[3]],
        num_classes: models[0].spec().num_classes,
        candidates: labels.len(),
        labels: keep.iter().map(|&i| labels[i]).collect(),
        distances: keep.iter().map(|&i| candidates.distances[i]).collect(),
        source_indices: keep,
        originals: originals_kept,
        adversarial: adversarial_kept,
    })
}

/// Re-filters an existing set against `models`; the result is a subset.
pub fn refilter(set: &AdversarialSet, models: &[&Model]) -> Result<AdversarialSet> {
    let (Some(orig), Some(adv)) = (set.originals(), set.adversarial()) else {
        return Ok(set.clone());
    };
    let candidates = Candidates {
        adversarial: adv.clone(),
        distances: set.distances.clone(),
    };
    let mut out = extract_adversarial_set(
        models,
        &set.ensemble_ids,
        orig,
        &candidates,
        &set.labels,
        &set.config,
    )?;
    out.candidates = set.candidates;
    out.source_indices = out
        .source_indices
        .iter()
        .map(|&i| set.source_indices[i])
        .collect();
    Ok(out)
}

/// Mean cross-entropy of `model` on `(x, y)`.
pub fn mean_loss(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64> {
    nn::cross_entropy_value(&model.logits(x)?, y)
}
