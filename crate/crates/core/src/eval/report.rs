use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::hierarchy::{HierarchyReport, RankRate};
use super::zero_shot::{map_at_5, topk_accuracy, RankedPrediction};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotScores {
    pub top1: f64,
    pub top5: f64,
    pub map5: f64,
}

impl ZeroShotScores {
    pub fn from_predictions(preds: &[RankedPrediction]) -> Result<Self> {
        Ok(ZeroShotScores {
            top1: topk_accuracy(preds, 1)?,
            top5: topk_accuracy(preds, 5)?,
            map5: map_at_5(preds)?,
        })
    }
}

/// JSON metrics file. Blocks that a command did not compute stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub zero_shot: BTreeMap<String, ZeroShotScores>,
    pub hierarchy: BTreeMap<String, RankRate>,
    #[serde(default)]
    pub hierarchy_chance: BTreeMap<String, RankRate>,
    pub traits: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn set_hierarchy(&mut self, h: &HierarchyReport) {
        self.hierarchy = h.rates.iter().map(|(k, v)| (k.name().to_string(), *v)).collect();
        self.hierarchy_chance = h.chance.iter().map(|(k, v)| (k.name().to_string(), *v)).collect();
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}
