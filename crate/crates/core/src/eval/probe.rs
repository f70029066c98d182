use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::zero_shot::EvalClip;
use crate::corpus::{TraitKind, TraitTable, TRAIT_HEADS};
use crate::error::{Error, Result};
use crate::model::{encode_audio, EncoderParams};
use crate::optim::{adamw_update, AdamWConfig, Moments};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 5,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Affine classifier on frozen audio embeddings. Binary heads have one
/// logit; categorical heads one per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    pub head: String,
    pub kind: TraitKind,
    pub in_dim: usize,
    /// Row-major `outputs x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeHead {
    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs())
            .map(|r| {
                self.bias[r]
                    + self.weight[r * self.in_dim..(r + 1) * self.in_dim]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        match self.kind {
            TraitKind::Binary => usize::from(z[0] > 0.0),
            TraitKind::Categorical(_) => {
                let mut best = 0;
                for (i, v) in z.iter().enumerate() {
                    if *v > z[best] {
                        best = i;
                    }
                }
                best
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Log prior of the training labels, clamped away from 0 and 1, as the
/// starting bias.
fn prior_bias(kind: TraitKind, labels: &[usize]) -> Vec<f64> {
    let n = labels.len() as f64;
    let freq = |c: usize| {
        let p = labels.iter().filter(|&&l| l == c).count() as f64 / n;
        p.clamp(1e-3, 1.0 - 1e-3)
    };
    match kind {
        TraitKind::Binary => {
            let p = freq(1);
            vec![(p / (1.0 - p)).ln()]
        }
        TraitKind::Categorical(values) => (0..values.len()).map(|c| freq(c).ln()).collect(),
    }
}

/// Fits a probe on fixed embeddings: softmax cross-entropy for categorical
/// heads, logistic loss for binary heads, Adam mini-batches.
pub fn fit_probe_on_embeddings(
    name: &str,
    kind: TraitKind,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeHead> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "probe `{name}` needs matching non-empty embeddings ({}) and labels ({})",
            embeddings.len(),
            labels.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("probe batch_size must be >= 1".into()));
    }
    let d = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
        return Err(Error::Dimension {
            what: "probe embeddings",
            expected: d,
            actual: bad.len(),
        });
    }
    let k = kind.num_labels();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!("probe `{name}`: label {bad} out of range")));
    }
    if let TraitKind::Categorical(values) = kind {
        let missing: Vec<&str> = (0..k)
            .filter(|c| !labels.contains(c))
            .map(|c| values[c])
            .collect();
        if !missing.is_empty() {
            return Err(Error::Invalid(format!(
                "probe `{name}`: classes absent from training labels: {}",
                missing.join(", ")
            )));
        }
    }
    let outputs = match kind {
        TraitKind::Binary => 1,
        TraitKind::Categorical(_) => k,
    };
    let mut head = ProbeHead {
        head: name.to_string(),
        kind,
        in_dim: d,
        weight: vec![0.0; outputs * d],
        bias: prior_bias(kind, labels),
    };
    let opt = AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut mw = Moments::zeros(head.weight.len());
    let mut mb = Moments::zeros(head.bias.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    let mut t = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; head.weight.len()];
            let mut gb = vec![0.0; outputs];
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let x = &embeddings[i];
                let z = head.logits(x);
                // dL/dz
                let dz: Vec<f64> = match kind {
                    TraitKind::Binary => vec![sigmoid(z[0]) - labels[i] as f64],
                    TraitKind::Categorical(_) => {
                        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
                        let s: f64 = e.iter().sum();
                        e.iter()
                            .enumerate()
                            .map(|(c, v)| v / s - if c == labels[i] { 1.0 } else { 0.0 })
                            .collect()
                    }
                };
                for (r, g) in dz.iter().enumerate() {
                    gb[r] += inv * g;
                    for (w, xv) in gw[r * d..(r + 1) * d].iter_mut().zip(x) {
                        *w += inv * g * xv;
                    }
                }
            }
            t += 1;
            adamw_update(&mut head.weight, &gw, &mut mw, t, &opt, false)?;
            adamw_update(&mut head.bias, &gb, &mut mb, t, &opt, false)?;
        }
    }
    Ok(head)
}

/// Embeds `clips` with the frozen audio encoder and fits the probe for
/// `head_index` (into [`TRAIT_HEADS`]) on species-level labels.
pub fn fit_linear_probe(
    params: &EncoderParams,
    clips: &[EvalClip],
    traits: &TraitTable,
    head_index: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeHead> {
    let head = TRAIT_HEADS
        .get(head_index)
        .ok_or_else(|| Error::Invalid(format!("no trait head {head_index}")))?;
    let (embeddings, labels) = embed_with_labels(params, clips, traits, head_index)?;
    fit_probe_on_embeddings(head.name, head.kind, &embeddings, &labels, cfg)
}

/// Audio embeddings and the species' label for `head_index`.
pub fn embed_with_labels(
    params: &EncoderParams,
    clips: &[EvalClip],
    traits: &TraitTable,
    head_index: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut embeddings = Vec::with_capacity(clips.len());
    let mut labels = Vec::with_capacity(clips.len());
    for c in clips {
        let label = traits.label(&c.species_id, head_index).ok_or_else(|| {
            Error::Invalid(format!("trait table has no row for `{}`", c.species_id))
        })?;
        embeddings.push(encode_audio(params, &c.features)?);
        labels.push(label);
    }
    Ok((embeddings, labels))
}

/// Binary: F1 of the positive class. Categorical: unweighted mean of
/// per-class F1 over the classes present in either labels or predictions.
/// Precision or recall with an empty denominator counts as 0.
pub fn trait_f1(predictions: &[usize], labels: &[usize], kind: TraitKind) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "F1 needs matching non-empty predictions ({}) and labels ({})",
            predictions.len(),
            labels.len()
        )));
    }
    let f1_of = |class: usize| {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fne = 0usize;
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == class, l == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fne == 0 { 0.0 } else { tp as f64 / (tp + fne) as f64 };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    };
    Ok(match kind {
        TraitKind::Binary => f1_of(1),
        TraitKind::Categorical(_) => {
            let mut present: Vec<usize> = predictions.iter().chain(labels).copied().collect();
            present.sort_unstable();
            present.dedup();
            present.iter().map(|&c| f1_of(c)).sum::<f64>() / present.len() as f64
        }
    })
}

/// True when the positive class never occurs in labels or predictions, so
/// the binary F1 of 0 is a convention rather than a measurement.
pub fn f1_is_degenerate(predictions: &[usize], labels: &[usize], kind: TraitKind) -> bool {
    matches!(kind, TraitKind::Binary) && !predictions.iter().chain(labels).any(|&v| v == 1)
}
