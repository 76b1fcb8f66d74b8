//! Transfer evaluation on held-out models, two-direction loss landscapes,
//! loss-versus-epsilon curves and flatness metrics.

use serde::{Deserialize, Serialize};

use crate::attacks::{AdversarialSet, DEGENERATE_NORM};
use crate::data::{PIXEL_MAX, PIXEL_MIN};
use crate::error::{Error, Result};
use crate::models::{classify_all, Model};
use crate::nn;
use crate::tensor::{l2_norm, sign, Tensor};

const EVAL_CHUNK: usize = 256;

/// Accuracy of one held-out model on one adversarial set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferEntry {
    pub model_id: String,
    pub ensemble_ids: Vec<String>,
    pub epsilon: f32,
    pub set_size: usize,
    pub candidates: usize,
    pub empty: bool,
    /// Accuracy on the clean originals of the set, absent for an empty set.
    pub true_acc: Option<f64>,
    pub adv_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelAccuracy {
    pub model_id: String,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub original: Vec<ModelAccuracy>,
    pub transfer: Vec<TransferEntry>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn hit_rate(model: &Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = classify_all(model, images, EVAL_CHUNK)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// Evaluates `model` on the clean and adversarial images of `set`. The model
/// must not be one of the set's crafting models.
pub fn evaluate_transfer(
    model: &Model,
    model_id: &str,
    set: &AdversarialSet,
) -> Result<TransferEntry> {
    if set.ensemble_ids.iter().any(|id| id == model_id) {
        return Err(Error::Protocol(format!(
            "model {model_id} is part of the crafting ensemble {:?}",
            set.ensemble_ids
        )));
    }
    let (true_acc, adv_acc) = match (set.originals(), set.adversarial()) {
        (Some(o), Some(a)) => (
            Some(hit_rate(model, o, &set.labels)?),
            Some(hit_rate(model, a, &set.labels)?),
        ),
        _ => (None, None),
    };
    Ok(TransferEntry {
        model_id: model_id.into(),
        ensemble_ids: set.ensemble_ids.clone(),
        epsilon: set.config.epsilon,
        set_size: set.len(),
        candidates: set.candidates,
        empty: set.is_empty(),
        true_acc,
        adv_acc,
    })
}

/// Formats like C's `%.6g`.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        // rounding can carry into a new leading digit, e.g. 999999.5
        if s.trim_start_matches('-')
            .replace('.', "")
            .trim_start_matches('0')
            .len()
            > 6
        {
            return format!("{v:.5e}");
        }
        s
    } else {
        let s = format!("{v:.5e}");
        let (mant, e) = s.split_once('e').expect("scientific format");
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        format!("{mant}e{e}")
    }
}

fn axis(range: (f64, f64), step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || range.1 < range.0 {
        return Err(Error::Config(format!("axis {range:?} with step {step}")));
    }
    let n = ((range.1 - range.0) / step).round() as usize + 1;
    Ok((0..n).map(|i| range.0 + i as f64 * step).collect())
}

/// Loss of a subject model on `x + e1 * d1 + e2 * d2` over a grid of
/// `(e1, e2)`, with `d1`, `d2` sign directions frozen at `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub eps1: Vec<f64>,
    pub eps2: Vec<f64>,
    /// Row-major over `eps1` then `eps2`.
    pub loss: Vec<f64>,
    pub surrogate_id: String,
    pub subject_id: String,
}

impl LandscapeGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.loss[i * self.eps2.len() + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps1,eps2,loss\n");
        for (i, e1) in self.eps1.iter().enumerate() {
            for (j, e2) in self.eps2.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{}\n",
                    fmt_sig6(*e1),
                    fmt_sig6(*e2),
                    fmt_sig6(self.at(i, j))
                ));
            }
        }
        out
    }

    /// Parses [`LandscapeGrid::to_csv`] output; provenance ids are not stored in
    /// the CSV and come back empty.
    pub fn from_csv(s: &str) -> Result<Self> {
        let mut lines = s.lines();
        if lines.next() != Some("eps1,eps2,loss") {
            return Err(Error::Config(
                "landscape CSV header must be eps1,eps2,loss".into(),
            ));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let v: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Config(format!("{line}: {e}")))
                })
                .collect::<Result<_>>()?;
            if v.len() != 3 {
                return Err(Error::Config(format!("landscape row {line:?}")));
            }
            rows.push((v[0], v[1], v[2]));
        }
        let mut eps1: Vec<f64> = Vec::new();
        let mut eps2: Vec<f64> = Vec::new();
        for &(a, b, _) in &rows {
            if eps1.last() != Some(&a) {
                eps1.push(a);
            }
            if eps1.len() == 1 {
                eps2.push(b);
            }
        }
        if eps1.len() * eps2.len() != rows.len() {
            return Err(Error::Config("landscape CSV is not a full grid".into()));
        }
        Ok(LandscapeGrid {
            eps1,
            eps2,
            loss: rows.into_iter().map(|r| r.2).collect(),
            surrogate_id: String::new(),
            subject_id: String::new(),
        })
    }
}

/// `sign(grad_x L)` of `model` at a single image, failing when the gradient
/// vanishes.
pub fn sign_direction(model: &Model, x: &Tensor, y: usize) -> Result<Tensor> {
    let (g, _) = model.input_gradient(x, &[y])?;
    let norm = l2_norm(g.data());
    if !norm.is_finite() {
        return Err(Error::NonFinite("landscape direction".into()));
    }
    if norm <= DEGENERATE_NORM {
        return Err(Error::DegenerateGradient("landscape direction".into()));
    }
    Ok(g.map(sign))
}

/// Per-image cross-entropy of `model` over `images`, in chunks.
pub fn losses(model: &Model, images: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = labels.len();
    let mut loss = Vec::with_capacity(n);
    let mut pred = Vec::with_capacity(n);
    let mut s = 0;
    while s < n {
        let e = (s + EVAL_CHUNK).min(n);
        let logits = model.logits(&images.slice_outer(s, e)?)?;
        loss.extend(nn::cross_entropy_rows(&logits, &labels[s..e])?);
        pred.extend(
            logits
                .data()
                .chunks(model.spec().num_classes)
                .map(nn::argmax),
        );
        s = e;
    }
    Ok((loss, pred))
}

fn displaced<'a>(x: &'a [f32], terms: &[(f32, &'a [f32])]) -> impl Iterator<Item = f32> + 'a {
    let terms = terms.to_vec();
    x.iter().enumerate().map(move |(p, &v)| {
        let mut out = v;
        for (e, d) in &terms {
            out += e * d[p];
        }
        out.clamp(PIXEL_MIN, PIXEL_MAX)
    })
}

/// Landscape over explicit directions.
#[allow(clippy::too_many_arguments)]
pub fn landscape_from_directions(
    subject: &Model,
    x: &Tensor,
    y: usize,
    d1: &Tensor,
    d2: &Tensor,
    eps1: (f64, f64),
    eps2: (f64, f64),
    step: f64,
) -> Result<LandscapeGrid> {
    if x.shape().len() != 4
        || x.shape()[0] != 1
        || d1.shape() != x.shape()
        || d2.shape() != x.shape()
    {
        return Err(Error::Shape(
            "landscape needs one image and matching directions".into(),
        ));
    }
    let a1 = axis(eps1, step)?;
    let a2 = axis(eps2, step)?;
    let cells: Vec<(f32, f32)> = a1
        .iter()
        .flat_map(|&e1| a2.iter().map(move |&e2| (e1 as f32, e2 as f32)))
        .collect();
    let mut loss = Vec::with_capacity(cells.len());
    let [c, h, w] = subject.spec().input_shape;
    for chunk in cells.chunks(EVAL_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * x.len());
        for &(e1, e2) in chunk {
            data.extend(displaced(x.data(), &[(e1, d1.data()), (e2, d2.data())]));
        }
        let batch = Tensor::new(&[chunk.len(), c, h, w], data)?;
        let logits = subject.logits(&batch)?;
        loss.extend(nn::cross_entropy_rows(&logits, &vec![y; chunk.len()])?);
    }
    Ok(LandscapeGrid {
        eps1: a1,
        eps2: a2,
        loss,
        surrogate_id: String::new(),
        subject_id: String::new(),
    })
}

/// Loss of `subject` at `x + e1 * sign(grad L_surrogate) + e2 * sign(grad L_subject)`,
/// clipped to the pixel domain; both directions are taken once at `x`.
#[allow(clippy::too_many_arguments)]
pub fn landscape_grid(
    subject: &Model,
    subject_id: &str,
    surrogate: &Model,
    surrogate_id: &str,
    x: &Tensor,
    y: usize,
    eps1: (f64, f64),
    eps2: (f64, f64),
    step: f64,
) -> Result<LandscapeGrid> {
    let d1 = sign_direction(surrogate, x, y)?;
    let d2 = sign_direction(subject, x, y)?;
    let mut g = landscape_from_directions(subject, x, y, &d1, &d2, eps1, eps2, step)?;
    g.subject_id = subject_id.into();
    g.surrogate_id = surrogate_id.into();
    Ok(g)
}

pub const DEFAULT_EPS1: (f64, f64) = (-16.0, 16.0);
pub const DEFAULT_EPS2: (f64, f64) = (-8.0, 32.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flatness {
    pub mean_loss: f64,
    pub max_loss: f64,
    pub fraction_above: f64,
}

/// Default threshold: the loss of a uniform prediction over `classes`.
pub fn default_tau(classes: usize) -> f64 {
    (classes as f64).ln()
}

pub fn flatness_metrics(grid: &LandscapeGrid, tau: f64) -> Result<Flatness> {
    if grid.loss.is_empty() {
        return Err(Error::Config("empty landscape grid".into()));
    }
    let n = grid.loss.len() as f64;
    Ok(Flatness {
        mean_loss: grid.loss.iter().sum::<f64>() / n,
        max_loss: grid.loss.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        fraction_above: grid.loss.iter().filter(|&&l| l > tau).count() as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub eps: f64,
    pub mean_loss: f64,
    pub max_loss: f64,
    /// Share of the images classified correctly at `eps = 0` that are
    /// misclassified at this `eps`.
    pub fool_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
    /// Images correct at `eps = 0`.
    pub clean_correct: usize,
    pub images: usize,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,mean_loss,max_loss,fool_rate\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                fmt_sig6(p.eps),
                fmt_sig6(p.mean_loss),
                fmt_sig6(p.max_loss),
                fmt_sig6(p.fool_rate)
            ));
        }
        out
    }

    /// First epsilon with the highest fool rate.
    pub fn most_fooling_epsilon(&self) -> f64 {
        let mut best = &self.points[0];
        for p in &self.points[1..] {
            if p.fool_rate > best.fool_rate {
                best = p;
            }
        }
        best.eps
    }
}

/// Loss of `model` on `x + eps * sign(grad_x L)` over `eps_values`, with
/// each image's own gradient taken once at `eps = 0`.
pub fn loss_curve(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    eps_values: &[f64],
) -> Result<LossCurve> {
    if eps_values.is_empty() || labels.is_empty() {
        return Err(Error::Config(
            "loss curve needs images and eps values".into(),
        ));
    }
    let n = labels.len();
    let mut dirs = Vec::with_capacity(images.len());
    let mut s = 0;
    while s < n {
        let e = (s + 64).min(n);
        let (g, _) = model.input_gradient(&images.slice_outer(s, e)?, &labels[s..e])?;
        dirs.extend(g.data().iter().map(|&v| sign(v)));
        s = e;
    }
    let (_, clean_pred) = losses(model, images, labels)?;
    let correct: Vec<bool> = clean_pred.iter().zip(labels).map(|(p, y)| p == y).collect();
    let clean_correct = correct.iter().filter(|&&c| c).count();
    let mut points = Vec::with_capacity(eps_values.len());
    for &eps in eps_values {
        let data: Vec<f32> = displaced(images.data(), &[(eps as f32, &dirs)]).collect();
        let (loss, pred) = losses(model, &Tensor::new(images.shape(), data)?, labels)?;
        let fooled = (0..n)
            .filter(|&i| correct[i] && pred[i] != labels[i])
            .count();
        points.push(CurvePoint {
            eps,
            mean_loss: loss.iter().sum::<f64>() / n as f64,
            max_loss: loss.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            fool_rate: if clean_correct == 0 {
                0.0
            } else {
                fooled as f64 / clean_correct as f64
            },
        });
    }
    Ok(LossCurve {
        points,
        clean_correct,
        images: n,
    })
}

/// `0, step, 2 * step, ..., max`.
pub fn eps_range(max: f64, step: f64) -> Result<Vec<f64>> {
    axis((0.0, max), step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{craft_adversaries, extract_adversarial_set, AttackConfig};
    use crate::models::{build_model, ModelSpec};

    fn cnn(seed: u64) -> Model {
        let mut m = build_model(&ModelSpec::minivgg([1, 8, 8], 3), seed).unwrap();
        m.set_input_normalization(vec![127.5], vec![64.0]).unwrap();
        m
    }

    fn image(seed: u64) -> Tensor {
        Tensor::new(
            &[1, 1, 8, 8],
            (0..64)
                .map(|i| ((i * 37 + seed * 11) % 251) as f32)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(2.302585093), "2.30259");
        assert_eq!(fmt_sig6(-16.0), "-16");
        assert_eq!(fmt_sig6(1234567.0), "1.23457e6");
        assert_eq!(fmt_sig6(0.000012345678), "1.23457e-5");
        assert_eq!(fmt_sig6(0.5), "0.5");
    }

    #[test]
    fn default_grid_shape_and_origin() {
        let m = cnn(1);
        let x = image(0);
        let g = landscape_grid(&m, "m", &m, "m", &x, 1, DEFAULT_EPS1, DEFAULT_EPS2, 1.0).unwrap();
        assert_eq!((g.eps1.len(), g.eps2.len()), (33, 41));
        let clean = nn::cross_entropy_value(&m.logits(&x).unwrap(), &[1]).unwrap();
        let i0 = g.eps1.iter().position(|&e| e == 0.0).unwrap();
        let j0 = g.eps2.iter().position(|&e| e == 0.0).unwrap();
        assert!((g.at(i0, j0) - clean).abs() < 1e-5);
        let csv = g.to_csv();
        assert_eq!(csv.lines().count(), 33 * 41 + 1);
        let back = LandscapeGrid::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
    }

    #[test]
    fn swapping_axes_transposes() {
        let (a, b) = (cnn(1), cnn(2));
        let x = image(3);
        let d1 = sign_direction(&b, &x, 0).unwrap();
        let d2 = sign_direction(&a, &x, 0).unwrap();
        let g =
            landscape_from_directions(&a, &x, 0, &d1, &d2, (-2.0, 2.0), (-1.0, 3.0), 1.0).unwrap();
        let t =
            landscape_from_directions(&a, &x, 0, &d2, &d1, (-1.0, 3.0), (-2.0, 2.0), 1.0).unwrap();
        for i in 0..g.eps1.len() {
            for j in 0..g.eps2.len() {
                assert!((g.at(i, j) - t.at(j, i)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn flatness_examples() {
        let mk = |loss: Vec<f64>| LandscapeGrid {
            eps1: vec![0.0, 1.0],
            eps2: vec![0.0, 1.0],
            loss,
            surrogate_id: String::new(),
            subject_id: String::new(),
        };
        let f = flatness_metrics(&mk(vec![1.0; 4]), 2.0).unwrap();
        assert_eq!((f.mean_loss, f.fraction_above), (1.0, 0.0));
        let f = flatness_metrics(&mk(vec![1.0, 1.0, 3.0, 1.0]), 2.0).unwrap();
        assert_eq!(f.fraction_above, 0.25);
        assert_eq!(f.max_loss, 3.0);
    }

    #[test]
    fn curve_length_and_origin() {
        let m = cnn(4);
        let x = Tensor::concat_outer(&[image(1), image(2), image(5)]).unwrap();
        let y = [0, 1, 2];
        let eps = eps_range(128.0, 1.0).unwrap();
        let c = loss_curve(&m, &x, &y, &eps).unwrap();
        assert_eq!(c.points.len(), 129);
        let clean = nn::cross_entropy_value(&m.logits(&x).unwrap(), &y).unwrap();
        assert!((c.points[0].mean_loss - clean).abs() < 1e-6);
        assert_eq!(c.points[0].fool_rate, 0.0);
        assert_eq!(c.to_csv().lines().count(), 130);
    }

    #[test]
    fn holdout_in_ensemble_rejected() {
        let m = cnn(2);
        let x = Tensor::concat_outer(&[image(1), image(2)]).unwrap();
        let cfg = AttackConfig::with_schedule(8.0).unwrap();
        let c = craft_adversaries(&[&m], &x, &[0, 1], &cfg, 1).unwrap();
        let set = extract_adversarial_set(&[&m], &["m2".into()], &x, &c, &[0, 1], &cfg).unwrap();
        assert!(matches!(
            evaluate_transfer(&m, "m2", &set),
            Err(Error::Protocol(_))
        ));
        let other = cnn(3);
        let e = evaluate_transfer(&other, "m3", &set).unwrap();
        assert_eq!(e.empty, set.is_empty());
        assert_eq!(e.true_acc.is_none(), set.is_empty());
    }

    #[test]
    fn empty_set_is_flagged() {
        let m = cnn(2);
        let x = image(1);
        let cfg = AttackConfig::with_schedule(4.0).unwrap();
        let c = crate::attacks::Candidates {
            adversarial: x.clone(),
            distances: vec![0.0],
        };
        let pred = m.classify(&x).unwrap()[0];
        let set = extract_adversarial_set(&[&m], &["a".into()], &x, &c, &[pred], &cfg).unwrap();
        let e = evaluate_transfer(&cnn(3), "b", &set).unwrap();
        assert!(e.empty && e.adv_acc.is_none());
    }
}
