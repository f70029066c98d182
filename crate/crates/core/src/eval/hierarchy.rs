use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::zero_shot::RankedPrediction;
use crate::error::{Error, Result};
use crate::taxonomy::{rank_match, Rank, TaxonRecord};

/// Ranks reported for species-level errors, narrow to broad.
pub const HIERARCHY_RANKS: [Rank; 4] = [Rank::Genus, Rank::Family, Rank::Order, Rank::Class];

/// A match rate, or `"undefined"` when there were no species-level errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RankRate {
    Rate(f64),
    Undefined(Undefined),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Undefined {
    Undefined,
}

impl RankRate {
    pub const UNDEFINED: RankRate = RankRate::Undefined(Undefined::Undefined);

    pub fn value(self) -> Option<f64> {
        match self {
            RankRate::Rate(v) => Some(v),
            RankRate::Undefined(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub predictions: usize,
    pub species_errors: usize,
    pub rates: BTreeMap<Rank, RankRate>,
    /// Expected rate if each wrong prediction were a uniform draw from the
    /// other candidates.
    pub chance: BTreeMap<Rank, RankRate>,
}

fn lookup<'a>(index: &HashMap<&str, &'a TaxonRecord>, id: &str) -> Result<&'a TaxonRecord> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| Error::Invalid(format!("species `{id}` not in taxonomy")))
}

/// `(congeners - 1) / (candidates - 1)` for one prediction, where congeners
/// counts the candidates sharing the truth's lineage down to `rank`
/// (the truth included).
pub fn chance_match_rate(
    pred: &RankedPrediction,
    index: &HashMap<&str, &TaxonRecord>,
    rank: Rank,
) -> Result<Option<f64>> {
    let n = pred.candidates.len();
    if n < 2 {
        return Ok(None);
    }
    let truth = lookup(index, &pred.true_species)?;
    let mut same = 0usize;
    for c in &pred.candidates {
        if rank_match(lookup(index, c)?, truth, rank) {
            same += 1;
        }
    }
    Ok(Some(same.saturating_sub(1) as f64 / (n - 1) as f64))
}

/// Among predictions whose top candidate is wrong, the fraction whose top
/// candidate still agrees with the truth at each rank.
pub fn hierarchy_error_analysis(
    preds: &[RankedPrediction],
    taxonomy: &[TaxonRecord],
) -> Result<HierarchyReport> {
    if preds.is_empty() {
        return Err(Error::Invalid("no predictions".into()));
    }
    let index: HashMap<&str, &TaxonRecord> =
        taxonomy.iter().map(|r| (r.species_id.as_str(), r)).collect();
    let errors: Vec<&RankedPrediction> = preds
        .iter()
        .filter(|p| p.candidates.first() != Some(&p.true_species))
        .collect();
    let mut rates = BTreeMap::new();
    let mut chance = BTreeMap::new();
    for rank in HIERARCHY_RANKS {
        if errors.is_empty() {
            rates.insert(rank, RankRate::UNDEFINED);
            chance.insert(rank, RankRate::UNDEFINED);
            continue;
        }
        let mut hits = 0usize;
        let mut chance_sum = 0.0;
        let mut chance_n = 0usize;
        for p in &errors {
            let top = p
                .candidates
                .first()
                .ok_or_else(|| Error::Invalid(format!("clip {} has no candidates", p.clip_id)))?;
            if rank_match(lookup(&index, top)?, lookup(&index, &p.true_species)?, rank) {
                hits += 1;
            }
            if let Some(c) = chance_match_rate(p, &index, rank)? {
                chance_sum += c;
                chance_n += 1;
            }
        }
        rates.insert(rank, RankRate::Rate(hits as f64 / errors.len() as f64));
        chance.insert(
            rank,
            if chance_n == 0 {
                RankRate::UNDEFINED
            } else {
                RankRate::Rate(chance_sum / chance_n as f64)
            },
        );
    }
    Ok(HierarchyReport {
        predictions: preds.len(),
        species_errors: errors.len(),
        rates,
        chance,
    })
}
