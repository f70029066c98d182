use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use super::zero_shot::EvalClip;
use crate::error::{Error, Result};
use crate::model::{encode_audio, EncoderParams};
use crate::taxonomy::TaxonRecord;

/// Top-two principal components of the rows of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub coords: Vec<[f64; 2]>,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit principal axes (first two).
    pub axes: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

/// Projects the centred rows onto the two leading eigenvectors of their
/// covariance. Each axis is signed so that its largest-magnitude component
/// is positive.
pub fn pca_2d(x: &[Vec<f64>]) -> Result<Pca2> {
    let n = x.len();
    if n < 3 {
        return Err(Error::Invalid(format!("PCA needs at least 3 rows, got {n}")));
    }
    let d = x[0].len();
    if d < 2 {
        return Err(Error::Invalid("PCA needs at least 2 columns".into()));
    }
    if let Some(bad) = x.iter().find(|r| r.len() != d) {
        return Err(Error::Dimension {
            what: "embedding rows",
            expected: d,
            actual: bad.len(),
        });
    }
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let axis = |k: usize| -> Vec<f64> {
        let col: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        col.into_iter().map(|v| v * sign).collect()
    };
    let axes = [axis(0), axis(1)];
    let coords = (0..n)
        .map(|i| {
            let row = centred.row(i);
            let p = |a: &Vec<f64>| row.iter().zip(a).map(|(u, v)| u * v).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect();
    Ok(Pca2 {
        coords,
        eigenvalues: order.iter().map(|&k| eig.eigenvalues[k]).collect(),
        axes,
        mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectionRow {
    pub clip_id: String,
    pub x: f64,
    pub y: f64,
    pub class: String,
    pub order: String,
    pub family: String,
}

/// Audio embeddings of `clips` projected to two dimensions, labelled by
/// class, order and family.
pub fn export_embeddings_2d(
    params: &EncoderParams,
    clips: &[EvalClip],
    taxonomy: &[TaxonRecord],
) -> Result<(Vec<ProjectionRow>, Vec<Vec<f64>>)> {
    let index: HashMap<&str, &TaxonRecord> =
        taxonomy.iter().map(|r| (r.species_id.as_str(), r)).collect();
    let mut labels = Vec::with_capacity(clips.len());
    for c in clips {
        let r = index.get(c.species_id.as_str()).ok_or_else(|| {
            Error::Invalid(format!("clip {}: no rank labels for `{}`", c.clip_id, c.species_id))
        })?;
        labels.push(*r);
    }
    let embeddings: Vec<Vec<f64>> = clips
        .iter()
        .map(|c| encode_audio(params, &c.features))
        .collect::<Result<_>>()?;
    let pca = pca_2d(&embeddings)?;
    let rows = clips
        .iter()
        .zip(labels)
        .zip(&pca.coords)
        .map(|((c, r), p)| ProjectionRow {
            clip_id: c.clip_id.clone(),
            x: p[0],
            y: p[1],
            class: r.lineage.class.clone(),
            order: r.lineage.order.clone(),
            family: r.lineage.family.clone(),
        })
        .collect();
    Ok((rows, embeddings))
}

pub fn write_projection<W: Write>(rows: &[ProjectionRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
