use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode_audio, encode_text, text_features, EncoderParams, TextFeatConfig};
use crate::taxonomy::{render_prompt, PromptTemplate, TaxonRecord};

/// Audio features of one evaluation clip.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalClip {
    pub clip_id: String,
    pub species_id: String,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub clip_id: String,
    pub true_species: String,
    /// Best first.
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
}

impl RankedPrediction {
    /// 1-based rank of the true species, if it is a candidate.
    pub fn rank_of_truth(&self) -> Option<usize> {
        self.candidates
            .iter()
            .position(|c| *c == self.true_species)
            .map(|p| p + 1)
    }
}

/// Orders candidates by descending score; equal scores keep ascending
/// species id order.
pub fn rank_by_score(ids: &[String], scores: &[f64]) -> (Vec<String>, Vec<f64>) {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    (
        order.iter().map(|&i| ids[i].clone()).collect(),
        order.iter().map(|&i| scores[i]).collect(),
    )
}

/// Text embeddings of each candidate's `template` prompt, in the given order.
pub fn candidate_embeddings(
    params: &EncoderParams,
    candidates: &[&TaxonRecord],
    template: PromptTemplate,
    text_cfg: &TextFeatConfig,
) -> Result<Vec<Vec<f64>>> {
    candidates
        .iter()
        .map(|r| {
            let prompt = render_prompt(r, template);
            let feats = text_features(&prompt, text_cfg).map_err(|e| {
                Error::Invalid(format!(
                    "candidate `{}` has no usable {} prompt: {e}",
                    r.species_id,
                    template.name()
                ))
            })?;
            encode_text(params, &feats)
        })
        .collect()
}

/// Ranks every candidate species for every clip by `exp(gamma) * cos`.
pub fn zero_shot_classify(
    params: &EncoderParams,
    clips: &[EvalClip],
    candidates: &[TaxonRecord],
    template: PromptTemplate,
    text_cfg: &TextFeatConfig,
) -> Result<Vec<RankedPrediction>> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidate species".into()));
    }
    let mut sorted: Vec<&TaxonRecord> = candidates.iter().collect();
    sorted.sort_by(|a, b| a.species_id.cmp(&b.species_id));
    let ids: Vec<String> = sorted.iter().map(|r| r.species_id.clone()).collect();
    let text = candidate_embeddings(params, &sorted, template, text_cfg)?;
    let scale = params.gamma.exp();
    clips
        .iter()
        .map(|clip| {
            let a = encode_audio(params, &clip.features)?;
            let scores: Vec<f64> = text
                .iter()
                .map(|t| scale * a.iter().zip(t).map(|(x, y)| x * y).sum::<f64>())
                .collect();
            let (candidates, scores) = rank_by_score(&ids, &scores);
            Ok(RankedPrediction {
                clip_id: clip.clip_id.clone(),
                true_species: clip.species_id.clone(),
                candidates,
                scores,
            })
        })
        .collect()
}

pub fn topk_accuracy(preds: &[RankedPrediction], k: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Invalid("no predictions".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    let hits = preds
        .iter()
        .filter(|p| p.rank_of_truth().is_some_and(|r| r <= k))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean reciprocal rank of the truth, counting ranks beyond 5 as 0.
pub fn map_at_5(preds: &[RankedPrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Invalid("no predictions".into()));
    }
    let total: f64 = preds
        .iter()
        .map(|p| match p.rank_of_truth() {
            Some(r) if r <= 5 => 1.0 / r as f64,
            _ => 0.0,
        })
        .sum();
    Ok(total / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, EncoderDims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pred(truth_rank: usize, n: usize) -> RankedPrediction {
        let candidates: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        RankedPrediction {
            clip_id: "c".into(),
            true_species: candidates[truth_rank - 1].clone(),
            scores: (0..n).map(|i| -(i as f64)).collect(),
            candidates,
        }
    }

    #[test]
    fn fixed_rank_fixtures() {
        let first = vec![pred(1, 10); 4];
        for k in 1..=10 {
            assert_eq!(topk_accuracy(&first, k).unwrap(), 1.0);
        }
        assert_eq!(map_at_5(&first).unwrap(), 1.0);
        let third = vec![pred(3, 10); 4];
        assert_eq!(topk_accuracy(&third, 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&third, 5).unwrap(), 1.0);
        assert!((map_at_5(&third).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(map_at_5(&vec![pred(6, 10); 3]).unwrap(), 0.0);
        assert!(topk_accuracy(&[], 1).is_err());
        assert!(map_at_5(&[]).is_err());
    }

    #[test]
    fn ties_fall_back_to_species_id() {
        let ids = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        let (order, scores) = rank_by_score(&ids, &[1.0, 1.0, 2.0]);
        assert_eq!(order, ["c", "a", "b"]);
        assert_eq!(scores, [2.0, 1.0, 1.0]);
    }

    fn record(id: &str, genus: &str, epithet: &str) -> TaxonRecord {
        TaxonRecord::new(
            id,
            crate::taxonomy::Lineage {
                class: "Aves".into(),
                order: "Passeriformes".into(),
                family: "Fringillidae".into(),
                genus: genus.into(),
                species: epithet.into(),
            },
            &format!("{genus} {epithet}"),
            &format!("{epithet} finch"),
        )
        .unwrap()
    }

    #[test]
    fn single_candidate_is_always_first() {
        let dims = EncoderDims {
            audio_in: 4,
            ..EncoderDims::default()
        };
        let p = init_params(dims, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let clips: Vec<EvalClip> = (0..5)
            .map(|i| EvalClip {
                clip_id: format!("c{i}"),
                species_id: "sp1".into(),
                features: vec![i as f64, 1.0, -2.0, 0.5],
            })
            .collect();
        let cands = [record("sp1", "Magumma", "parva")];
        let preds =
            zero_shot_classify(&p, &clips, &cands, PromptTemplate::Sci, &TextFeatConfig::default()).unwrap();
        assert_eq!(topk_accuracy(&preds, 1).unwrap(), 1.0);
    }

    #[test]
    fn gamma_does_not_change_rankings() {
        let dims = EncoderDims {
            audio_in: 4,
            ..EncoderDims::default()
        };
        let mut p = init_params(dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let clips: Vec<EvalClip> = (0..6)
            .map(|i| EvalClip {
                clip_id: format!("c{i}"),
                species_id: "sp1".into(),
                features: vec![i as f64, -1.0, (i * i) as f64 * 0.1, 0.5],
            })
            .collect();
        let cands = [
            record("sp1", "Magumma", "parva"),
            record("sp2", "Magumma", "flava"),
            record("sp3", "Loxops", "coccineus"),
        ];
        let cfg = TextFeatConfig::default();
        let a = zero_shot_classify(&p, &clips, &cands, PromptTemplate::Com, &cfg).unwrap();
        p.gamma = -3.0;
        let b = zero_shot_classify(&p, &clips, &cands, PromptTemplate::Com, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.candidates, y.candidates);
        }
    }
}
