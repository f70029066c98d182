//! Train/val/test assignment.
//!
//! Test species are rare species (fewer than `max_test_recordings` clips)
//! drawn round-robin over (class, order) cells, and only when their genus
//! keeps at least one training species. The remaining clips are split into
//! train and val by whole (species, date) groups.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClipManifestEntry, Grade};
use crate::error::{Error, Result};
use crate::taxonomy::TaxonRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitParams {
    pub test_species_count: usize,
    /// Test species must have strictly fewer recordings than this.
    pub max_test_recordings: usize,
    pub val_ratio: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            test_species_count: 30,
            max_test_recordings: 15,
            val_ratio: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<String, Split>,
    pub test_species: BTreeSet<String>,
}

impl SplitAssignment {
    pub fn clips_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.assignments
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(c, _)| c.as_str())
    }

    pub fn count(&self, split: Split) -> usize {
        self.clips_in(split).count()
    }
}

pub fn build_splits<R: Rng + ?Sized>(
    manifest: &[ClipManifestEntry],
    taxonomy: &[TaxonRecord],
    params: &SplitParams,
    rng: &mut R,
) -> Result<SplitAssignment> {
    if manifest.is_empty() {
        return Err(Error::Invalid("manifest is empty".into()));
    }
    if !(0.0..1.0).contains(&params.val_ratio) {
        return Err(Error::Invalid(format!(
            "val_ratio must lie in [0, 1), got {}",
            params.val_ratio
        )));
    }
    let records: HashMap<&str, &TaxonRecord> =
        taxonomy.iter().map(|r| (r.species_id.as_str(), r)).collect();
    let mut clips_by_species: BTreeMap<&str, Vec<&ClipManifestEntry>> = BTreeMap::new();
    for e in manifest {
        if !records.contains_key(e.species_id.as_str()) {
            return Err(Error::Invalid(format!(
                "clip {}: species `{}` not in taxonomy",
                e.clip_id, e.species_id
            )));
        }
        clips_by_species.entry(&e.species_id).or_default().push(e);
    }

    // genus key -> species with recordings
    let genus_key = |r: &TaxonRecord| {
        (
            r.lineage.class.to_lowercase(),
            r.lineage.order.to_lowercase(),
            r.lineage.family.to_lowercase(),
            r.lineage.genus.to_lowercase(),
        )
    };
    let mut genus_members: BTreeMap<_, usize> = BTreeMap::new();
    for s in clips_by_species.keys() {
        *genus_members.entry(genus_key(records[s])).or_default() += 1;
    }

    // eligible candidates grouped into (class, order) cells
    let mut rare = 0usize;
    let mut cells: BTreeMap<(String, String), Vec<&str>> = BTreeMap::new();
    for (species, clips) in &clips_by_species {
        if clips.len() >= params.max_test_recordings {
            continue;
        }
        if clips.iter().any(|c| c.grade != Grade::Research) {
            continue;
        }
        rare += 1;
        let r = records[species];
        cells
            .entry((r.lineage.class.to_lowercase(), r.lineage.order.to_lowercase()))
            .or_default()
            .push(species);
    }
    let mut cell_queues: Vec<Vec<&str>> = cells.into_values().collect();
    for q in &mut cell_queues {
        q.shuffle(rng);
        q.reverse(); // pop from the back in shuffled order
    }
    cell_queues.shuffle(rng);

    let mut test_species = BTreeSet::new();
    let mut remaining_in_genus = genus_members.clone();
    let mut skipped_for_coverage = 0usize;
    while test_species.len() < params.test_species_count {
        let mut progressed = false;
        for queue in cell_queues.iter_mut() {
            if test_species.len() >= params.test_species_count {
                break;
            }
            while let Some(candidate) = queue.pop() {
                let key = genus_key(records[candidate]);
                let left = remaining_in_genus.get_mut(&key).expect("genus indexed");
                if *left >= 2 {
                    *left -= 1;
                    test_species.insert(candidate.to_string());
                    progressed = true;
                    break;
                }
                skipped_for_coverage += 1;
            }
        }
        if !progressed {
            break;
        }
    }
    if test_species.len() < params.test_species_count {
        return Err(Error::Infeasible(format!(
            "requested {} test species but only {} qualify: {} species have fewer than {} \
             research-grade recordings and {} of those were skipped because no congener \
             would remain in training",
            params.test_species_count,
            test_species.len(),
            rare,
            params.max_test_recordings,
            skipped_for_coverage
        )));
    }

    let mut assignments = BTreeMap::new();
    let mut groups: BTreeMap<(&str, NaiveDate), Vec<&ClipManifestEntry>> = BTreeMap::new();
    for e in manifest {
        if test_species.contains(&e.species_id) {
            assignments.insert(e.clip_id.clone(), Split::Test);
        } else {
            assignments.insert(e.clip_id.clone(), Split::Train);
            groups.entry((&e.species_id, e.date)).or_default().push(e);
        }
    }
    let non_test: usize = groups.values().map(Vec::len).sum();
    let target = (params.val_ratio * non_test as f64).round() as usize;
    let mut train_left: HashMap<&str, usize> = HashMap::new();
    for ((species, _), g) in &groups {
        *train_left.entry(species).or_default() += g.len();
    }
    let mut eligible: Vec<(&(&str, NaiveDate), &Vec<&ClipManifestEntry>)> = groups
        .iter()
        .filter(|(_, g)| g.iter().all(|c| c.grade == Grade::Research))
        .collect();
    eligible.shuffle(rng);
    let mut val_count = 0usize;
    for ((species, _), g) in eligible {
        if val_count >= target {
            break;
        }
        let left = train_left.get_mut(species).expect("species indexed");
        if val_count + g.len() <= target && *left > g.len() {
            *left -= g.len();
            val_count += g.len();
            for c in g {
                assignments.insert(c.clip_id.clone(), Split::Val);
            }
        }
    }

    Ok(SplitAssignment {
        assignments,
        test_species,
    })
}

/// Checks every post-condition of [`build_splits`]; returns one message per
/// violation.
pub fn check_split_invariants(
    split: &SplitAssignment,
    manifest: &[ClipManifestEntry],
    taxonomy: &[TaxonRecord],
    params: &SplitParams,
) -> Vec<String> {
    let mut violations = Vec::new();
    let records: HashMap<&str, &TaxonRecord> =
        taxonomy.iter().map(|r| (r.species_id.as_str(), r)).collect();

    // partition
    if split.assignments.len() != manifest.len() {
        violations.push(format!(
            "partition: {} assignments for {} clips",
            split.assignments.len(),
            manifest.len()
        ));
    }
    for e in manifest {
        if !split.assignments.contains_key(&e.clip_id) {
            violations.push(format!("partition: clip {} unassigned", e.clip_id));
        }
    }

    let mut per_species: BTreeMap<&str, Vec<&ClipManifestEntry>> = BTreeMap::new();
    for e in manifest {
        per_species.entry(&e.species_id).or_default().push(e);
    }
    let split_of = |c: &str| split.assignments.get(c).copied();

    // (1) disjoint test species, rare
    for (species, clips) in &per_species {
        let is_test = split.test_species.contains(*species);
        for c in clips {
            let s = split_of(&c.clip_id);
            if is_test != (s == Some(Split::Test)) {
                violations.push(format!(
                    "disjoint: clip {} of species {species} is {:?}",
                    c.clip_id, s
                ));
            }
        }
        if is_test && clips.len() >= params.max_test_recordings {
            violations.push(format!(
                "rare: test species {species} has {} recordings",
                clips.len()
            ));
        }
    }
    if split.test_species.len() != params.test_species_count {
        violations.push(format!(
            "count: {} test species, expected {}",
            split.test_species.len(),
            params.test_species_count
        ));
    }

    // (2) balance over (class, order) cells: round-robin means no cell
    // exceeds another by more than one unless the smaller cell ran out of
    // candidates.
    let mut cell_counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for s in &split.test_species {
        if let Some(r) = records.get(s.as_str()) {
            *cell_counts
                .entry((r.lineage.class.to_lowercase(), r.lineage.order.to_lowercase()))
                .or_default() += 1;
        }
    }
    if let (Some(max), Some(min)) = (cell_counts.values().max(), cell_counts.values().min()) {
        // cells can be exhausted; only flag when the smaller cell still had
        // unused eligible species
        if max - min > 1 {
            for (cell, &n) in &cell_counts {
                if n + 1 < *max {
                    let spare = per_species.iter().any(|(s, clips)| {
                        let r = records[*s];
                        !split.test_species.contains(*s)
                            && (r.lineage.class.to_lowercase(), r.lineage.order.to_lowercase())
                                == *cell
                            && clips.len() < params.max_test_recordings
                            && clips.iter().all(|c| c.grade == Grade::Research)
                            && per_species.keys().any(|o| {
                                o != s
                                    && !split.test_species.contains(*o)
                                    && records[*o].lineage.genus.to_lowercase()
                                        == r.lineage.genus.to_lowercase()
                                    && records[*o].lineage.family.to_lowercase()
                                        == r.lineage.family.to_lowercase()
                            })
                    });
                    if spare {
                        violations.push(format!("balance: cell {cell:?} has {n}, max is {max}"));
                    }
                }
            }
        }
    }

    // (3) genus and family coverage by species with training clips
    let train_species: BTreeSet<&str> = manifest
        .iter()
        .filter(|e| split_of(&e.clip_id) == Some(Split::Train))
        .map(|e| e.species_id.as_str())
        .collect();
    for s in &split.test_species {
        let Some(r) = records.get(s.as_str()) else {
            violations.push(format!("coverage: test species {s} not in taxonomy"));
            continue;
        };
        let same = |o: &&str, rank_eq: &dyn Fn(&TaxonRecord) -> bool| rank_eq(records[*o]);
        let genus_ok = train_species.iter().any(|o| {
            same(o, &|t| {
                t.lineage.genus.to_lowercase() == r.lineage.genus.to_lowercase()
                    && t.lineage.family.to_lowercase() == r.lineage.family.to_lowercase()
            })
        });
        let family_ok = train_species.iter().any(|o| {
            same(o, &|t| t.lineage.family.to_lowercase() == r.lineage.family.to_lowercase())
        });
        if !genus_ok || !family_ok {
            violations.push(format!("coverage: test species {s} lacks a training congener"));
        }
    }

    // (4) grouped train:val ratio
    let mut group_split: BTreeMap<(&str, NaiveDate), BTreeSet<Option<Split>>> = BTreeMap::new();
    let mut max_group = 0usize;
    let mut group_sizes: BTreeMap<(&str, NaiveDate), usize> = BTreeMap::new();
    for e in manifest {
        group_split
            .entry((&e.species_id, e.date))
            .or_default()
            .insert(split_of(&e.clip_id));
        let n = group_sizes.entry((&e.species_id, e.date)).or_default();
        *n += 1;
        max_group = max_group.max(*n);
    }
    for (key, splits) in &group_split {
        if splits.len() > 1 {
            violations.push(format!("grouping: ({}, {}) split across {splits:?}", key.0, key.1));
        }
    }
    let train = manifest
        .iter()
        .filter(|e| split_of(&e.clip_id) == Some(Split::Train))
        .count();
    let val = manifest
        .iter()
        .filter(|e| split_of(&e.clip_id) == Some(Split::Val))
        .count();
    let target = (params.val_ratio * (train + val) as f64).round() as usize;
    if val > target || val + max_group < target {
        violations.push(format!(
            "ratio: {val} val clips of {} non-test, target {target} (max group {max_group})",
            train + val
        ));
    }
    // every non-test species keeps at least one training clip
    for (species, clips) in &per_species {
        if !split.test_species.contains(*species)
            && !clips.iter().any(|c| split_of(&c.clip_id) == Some(Split::Train))
        {
            violations.push(format!("training: species {species} has no training clip"));
        }
    }

    // (5) research grade in val and test
    for e in manifest {
        if matches!(split_of(&e.clip_id), Some(Split::Val | Split::Test)) && e.grade != Grade::Research
        {
            violations.push(format!("grade: {} clip {} in {:?}", e.grade, e.clip_id, split_of(&e.clip_id)));
        }
    }
    violations
}

/// CSV `clip_id,split`, plus a `test_species` list implied by the test rows.
pub fn write_splits<W: Write>(
    split: &SplitAssignment,
    manifest: &[ClipManifestEntry],
    out: W,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["clip_id", "species_id", "split"])?;
    for e in manifest {
        if let Some(s) = split.assignments.get(&e.clip_id) {
            writer.write_record([e.clip_id.as_str(), &e.species_id, &s.to_string()])?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn read_splits<R: Read>(input: R) -> Result<SplitAssignment> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = SplitAssignment::default();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let (Some(clip), Some(species), Some(split)) = (rec.get(0), rec.get(1), rec.get(2)) else {
            return Err(Error::parse("splits", line, "expected clip_id,species_id,split"));
        };
        let split: Split = split
            .parse()
            .map_err(|e: Error| Error::parse("splits", line, e.to_string()))?;
        if split == Split::Test {
            out.test_species.insert(species.to_string());
        }
        out.assignments.insert(clip.to_string(), split);
    }
    Ok(out)
}
