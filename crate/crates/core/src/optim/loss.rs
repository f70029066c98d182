use crate::error::{Error, Result};

fn unit(v: &[f64], what: &'static str) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::NonFinite(format!("{what} row norm ({n})")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `s_ij = exp(gamma) * cos(a_i, t_j)`. Rows are re-normalised, so inputs
/// need not be exactly unit length. The matrix is `audio.len() x text.len()`.
pub fn similarity_matrix(audio: &[Vec<f64>], text: &[Vec<f64>], gamma: f64) -> Result<Vec<Vec<f64>>> {
    let d = audio.first().or(text.first()).map_or(0, Vec::len);
    for (rows, what) in [(audio, "audio embeddings"), (text, "text embeddings")] {
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Dimension {
                what,
                expected: d,
                actual: bad.len(),
            });
        }
    }
    let scale = gamma.exp();
    let a: Vec<Vec<f64>> = audio.iter().map(|r| unit(r, "audio")).collect::<Result<_>>()?;
    let t: Vec<Vec<f64>> = text.iter().map(|r| unit(r, "text")).collect::<Result<_>>()?;
    Ok(a
        .iter()
        .map(|ai| {
            t.iter()
                .map(|tj| scale * ai.iter().zip(tj).map(|(x, y)| x * y).sum::<f64>())
                .collect()
        })
        .collect())
}

fn check_square(s: &[Vec<f64>]) -> Result<usize> {
    let b = s.len();
    if b == 0 {
        return Err(Error::Invalid("empty similarity matrix".into()));
    }
    if let Some(row) = s.iter().find(|r| r.len() != b) {
        return Err(Error::Dimension {
            what: "similarity matrix columns",
            expected: b,
            actual: row.len(),
        });
    }
    if s.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    Ok(b)
}

/// Log-softmax of `logits` at `target` plus the softmax itself.
fn log_softmax_at(logits: impl Iterator<Item = f64> + Clone, target: usize) -> (f64, Vec<f64>) {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let logp = (exps[target] / z).ln();
    (logp, exps.into_iter().map(|e| e / z).collect())
}

/// Symmetric contrastive loss: the mean of the row-wise and column-wise
/// cross-entropies with the diagonal as targets.
pub fn contrastive_loss(s: &[Vec<f64>]) -> Result<f64> {
    Ok(contrastive_loss_and_grad(s)?.0)
}

/// Loss together with `dL/dS`.
pub fn contrastive_loss_and_grad(s: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let b = check_square(s)?;
    let inv = 1.0 / b as f64;
    let mut grad = vec![vec![0.0; b]; b];
    let mut row_ce = 0.0;
    let mut col_ce = 0.0;
    for i in 0..b {
        let (logp, p) = log_softmax_at(s[i].iter().copied(), i);
        row_ce -= logp;
        for (j, pj) in p.into_iter().enumerate() {
            grad[i][j] += 0.5 * inv * (pj - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..b {
        let (logp, p) = log_softmax_at(s.iter().map(|r| r[j]), j);
        col_ce -= logp;
        for (i, pi) in p.into_iter().enumerate() {
            grad[i][j] += 0.5 * inv * (pi - if i == j { 1.0 } else { 0.0 });
        }
    }
    // -log p is >= 0 analytically; clamp the rounding residue of a
    // saturated softmax
    let loss = (0.5 * inv * (row_ce + col_ce)).max(0.0);
    Ok((loss, grad))
}
