use std::collections::HashSet;

use super::loss::{contrastive_loss_and_grad, similarity_matrix};
use crate::error::{Error, Result};
use crate::model::{
    text_features, EncoderParams, HeadInput, HeadTrace, Linear, Mlp, SparseVector,
    TextFeatConfig, GAMMA_TENSOR, TENSOR_NAMES,
};

/// Paired audio features and prompts; species are pairwise distinct so that
/// no off-diagonal pair is a hidden positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub audio: Vec<Vec<f64>>,
    pub prompts: Vec<String>,
    pub species_ids: Vec<String>,
}

impl Batch {
    pub fn new(audio: Vec<Vec<f64>>, prompts: Vec<String>, species_ids: Vec<String>) -> Result<Self> {
        if audio.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if prompts.len() != audio.len() || species_ids.len() != audio.len() {
            return Err(Error::Dimension {
                what: "batch columns",
                expected: audio.len(),
                actual: prompts.len().min(species_ids.len()),
            });
        }
        let mut seen = HashSet::new();
        for s in &species_ids {
            if !seen.insert(s.as_str()) {
                return Err(Error::Invalid(format!("species `{s}` appears twice in one batch")));
            }
        }
        Ok(Batch {
            audio,
            prompts,
            species_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }

    pub fn prepare(&self, cfg: &TextFeatConfig) -> Result<PreparedBatch> {
        Ok(PreparedBatch {
            audio: self.audio.clone(),
            text: self
                .prompts
                .iter()
                .map(|p| text_features(p, cfg))
                .collect::<Result<_>>()?,
        })
    }
}

/// Batch with prompts already hashed into text features.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub audio: Vec<Vec<f64>>,
    pub text: Vec<SparseVector>,
}

/// One gradient array per entry of [`TENSOR_NAMES`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: [Vec<f64>; 9],
}

impl Gradients {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Gradients {
            tensors: params.tensors().map(|t| vec![0.0; t.len()]),
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

struct Forward {
    audio: Vec<HeadTrace>,
    text: Vec<HeadTrace>,
    sim: Vec<Vec<f64>>,
}

fn forward(params: &EncoderParams, batch: &PreparedBatch) -> Result<Forward> {
    if batch.audio.len() != batch.text.len() || batch.audio.is_empty() {
        return Err(Error::Dimension {
            what: "prepared batch",
            expected: batch.audio.len(),
            actual: batch.text.len(),
        });
    }
    let audio: Vec<HeadTrace> = batch
        .audio
        .iter()
        .map(|x| params.audio_trace(x))
        .collect::<Result<_>>()?;
    let text: Vec<HeadTrace> = batch
        .text
        .iter()
        .map(|t| params.text_trace(t))
        .collect::<Result<_>>()?;
    let a: Vec<Vec<f64>> = audio.iter().map(|t| t.embedding.clone()).collect();
    let t: Vec<Vec<f64>> = text.iter().map(|t| t.embedding.clone()).collect();
    let sim = similarity_matrix(&a, &t, params.gamma)?;
    Ok(Forward {
        audio,
        text,
        sim,
    })
}

/// Contrastive loss of `batch` under `params`.
pub fn batch_loss(params: &EncoderParams, batch: &PreparedBatch) -> Result<f64> {
    let f = forward(params, batch)?;
    Ok(contrastive_loss_and_grad(&f.sim)?.0)
}

/// Backward through `e = o/|o|`, the output layer, ReLU and the first layer.
/// Gradient arrays are `[w1, b1, w2, b2]` of `head`.
fn backprop_head(
    head: &Mlp,
    trace: &HeadTrace,
    input: HeadInput<'_>,
    d_embedding: &[f64],
    grads: [&mut Vec<f64>; 4],
) {
    let [gw1, gb1, gw2, gb2] = grads;
    let e = &trace.embedding;
    let proj: f64 = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
    let d_out: Vec<f64> = e
        .iter()
        .zip(d_embedding)
        .map(|(ei, di)| (di - ei * proj) / trace.norm)
        .collect();

    let out: &Linear = &head.output;
    let mut d_hidden = vec![0.0; out.in_dim];
    for (r, &dr) in d_out.iter().enumerate() {
        gb2[r] += dr;
        let row = out.row(r);
        let grow = &mut gw2[r * out.in_dim..(r + 1) * out.in_dim];
        for c in 0..out.in_dim {
            grow[c] += dr * trace.hidden[c];
            d_hidden[c] += dr * row[c];
        }
    }

    let hid: &Linear = &head.hidden;
    for (r, (&dh, &pre)) in d_hidden.iter().zip(&trace.pre_activation).enumerate() {
        if pre <= 0.0 {
            continue;
        }
        gb1[r] += dh;
        let grow = &mut gw1[r * hid.in_dim..(r + 1) * hid.in_dim];
        match input {
            HeadInput::Dense(x) => {
                for (g, xi) in grow.iter_mut().zip(x) {
                    *g += dh * xi;
                }
            }
            HeadInput::Sparse(x) => {
                for &(i, v) in x.entries() {
                    grow[i] += dh * v;
                }
            }
        }
    }
}

/// Loss and exact gradients with respect to every tensor of `params`.
/// The gamma gradient is zero unless `params.gamma_trainable`.
pub fn loss_gradients(params: &EncoderParams, batch: &PreparedBatch) -> Result<(f64, Gradients)> {
    let f = forward(params, batch)?;
    let (loss, d_sim) = contrastive_loss_and_grad(&f.sim)?;
    let b = d_sim.len();
    let scale = params.gamma.exp();
    let d = params.dims.embed;

    let mut grads = Gradients::zeros_like(params);
    let [aw1, ab1, aw2, ab2, tw1, tb1, tw2, tb2, gg] = &mut grads.tensors;

    for i in 0..b {
        let mut da = vec![0.0; d];
        for j in 0..b {
            let g = d_sim[i][j] * scale;
            for (x, y) in da.iter_mut().zip(&f.text[j].embedding) {
                *x += g * y;
            }
        }
        backprop_head(
            &params.audio,
            &f.audio[i],
            HeadInput::Dense(&batch.audio[i]),
            &da,
            [aw1, ab1, aw2, ab2],
        );
    }
    for j in 0..b {
        let mut dt = vec![0.0; d];
        for i in 0..b {
            let g = d_sim[i][j] * scale;
            for (x, y) in dt.iter_mut().zip(&f.audio[i].embedding) {
                *x += g * y;
            }
        }
        backprop_head(
            &params.text,
            &f.text[j],
            HeadInput::Sparse(&batch.text[j]),
            &dt,
            [tw1, tb1, tw2, tb2],
        );
    }
    if params.gamma_trainable {
        // ds_ij/dgamma = s_ij
        gg[0] = (0..b)
            .flat_map(|i| (0..b).map(move |j| (i, j)))
            .map(|(i, j)| d_sim[i][j] * f.sim[i][j])
            .sum();
    }

    for (name, g) in TENSOR_NAMES.iter().zip(&grads.tensors) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    debug_assert_eq!(grads.tensors[GAMMA_TENSOR].len(), 1);
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, EncoderDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_setup(seed: u64) -> (EncoderParams, PreparedBatch) {
        let dims = EncoderDims {
            audio_in: 6,
            text_in: 32,
            hidden: 8,
            embed: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = init_params(dims, &mut rng).unwrap();
        // nonzero biases so that every bias gradient path is exercised
        for t in [&mut p.audio.hidden.bias, &mut p.text.hidden.bias] {
            for v in t.iter_mut() {
                *v = rng.gen_range(0.05..0.3);
            }
        }
        p.gamma = 1.1;
        p.gamma_trainable = true;
        let cfg = TextFeatConfig {
            ngram_sizes: vec![2, 3],
            dim: 32,
        };
        let batch = Batch::new(
            (0..3)
                .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            vec!["Aves Passeriformes".into(), "magumma parva".into(), "house sparrow".into()],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        (p, batch.prepare(&cfg).unwrap())
    }

    #[test]
    fn every_tensor_matches_central_differences() {
        let (p, batch) = small_setup(11);
        let (_, g) = loss_gradients(&p, &batch).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for t in 0..9 {
            for k in 0..g.tensors[t].len() {
                let mut plus = p.clone();
                plus.tensors_mut()[t][k] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t][k] -= h;
                let fd = (batch_loss(&plus, &batch).unwrap() - batch_loss(&minus, &batch).unwrap())
                    / (2.0 * h);
                let an = g.tensors[t][k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn fixed_gamma_has_zero_gradient() {
        let (mut p, batch) = small_setup(3);
        p.gamma_trainable = false;
        let (_, g) = loss_gradients(&p, &batch).unwrap();
        assert_eq!(g.tensors[GAMMA_TENSOR], vec![0.0]);
    }

    #[test]
    fn repeated_calls_agree_bitwise() {
        let (p, batch) = small_setup(5);
        let a = loss_gradients(&p, &batch).unwrap();
        let b = loss_gradients(&p, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn joint_permutation_preserves_loss() {
        let (p, batch) = small_setup(8);
        let perm = [2, 0, 1];
        let permuted = PreparedBatch {
            audio: perm.iter().map(|&i| batch.audio[i].clone()).collect(),
            text: perm.iter().map(|&i| batch.text[i].clone()).collect(),
        };
        let (l1, g1) = loss_gradients(&p, &batch).unwrap();
        let (l2, g2) = loss_gradients(&p, &permuted).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_species_is_rejected() {
        let r = Batch::new(
            vec![vec![0.0], vec![1.0]],
            vec!["a".into(), "b".into()],
            vec!["s".into(), "s".into()],
        );
        assert!(r.is_err());
    }
}
