//! Ecological trait schema flattened to 22 prediction heads: four
//! single-label categorical traits, one categorical posture trait, the
//! multi-label traits split into one binary head per value, and two binary
//! traits.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraitKind {
    Categorical(&'static [&'static str]),
    Binary,
}

impl TraitKind {
    /// Number of distinct labels (2 for binary heads).
    pub fn num_labels(self) -> usize {
        match self {
            TraitKind::Categorical(values) => values.len(),
            TraitKind::Binary => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraitHead {
    pub name: &'static str,
    pub kind: TraitKind,
}

impl TraitHead {
    /// Label index to its CSV cell text.
    pub fn label_text(&self, label: usize) -> &'static str {
        match self.kind {
            TraitKind::Categorical(values) => values[label],
            TraitKind::Binary => {
                if label == 1 {
                    "true"
                } else {
                    "false"
                }
            }
        }
    }

    pub fn parse_label(&self, text: &str) -> Option<usize> {
        match self.kind {
            TraitKind::Categorical(values) => values.iter().position(|v| *v == text),
            TraitKind::Binary => match text.to_ascii_lowercase().as_str() {
                "true" => Some(1),
                "false" => Some(0),
                _ => None,
            },
        }
    }
}

const DIET: &[&str] = &["herbivorous", "carnivorous", "omnivorous", "specialized"];
const ACTIVITY: &[&str] = &["diurnal", "nocturnal", "crepuscular", "cathemeral"];
const POSTURE: &[&str] = &["quadrupedal", "bipedal", "other"];
const SOCIAL: &[&str] = &["solitary", "pairing", "grouping", "herding"];

const fn cat(name: &'static str, values: &'static [&'static str]) -> TraitHead {
    TraitHead {
        name,
        kind: TraitKind::Categorical(values),
    }
}

const fn bin(name: &'static str) -> TraitHead {
    TraitHead {
        name,
        kind: TraitKind::Binary,
    }
}

pub const TRAIT_HEADS: [TraitHead; 22] = [
    cat("diet_type", DIET),
    cat("activity_pattern", ACTIVITY),
    bin("locomotion_arboreal"),
    bin("locomotion_aquatic"),
    bin("locomotion_terrestrial"),
    bin("locomotion_fossorial"),
    bin("locomotion_aerial"),
    cat("locomotion_posture", POSTURE),
    bin("habitat_forest"),
    bin("habitat_grassland"),
    bin("habitat_desert"),
    bin("habitat_wetland"),
    bin("habitat_mountain"),
    bin("habitat_urban"),
    bin("climate_tropical"),
    bin("climate_subtropical"),
    bin("climate_temperate"),
    bin("climate_boreal"),
    bin("climate_polar"),
    cat("social_behavior", SOCIAL),
    bin("predator"),
    bin("migratory"),
];

pub fn head_by_name(name: &str) -> Option<&'static TraitHead> {
    TRAIT_HEADS.iter().find(|h| h.name == name)
}

/// Per-species label index for each of the 22 heads (in [`TRAIT_HEADS`] order).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TraitTable {
    pub rows: BTreeMap<String, [usize; 22]>,
}

impl TraitTable {
    pub fn label(&self, species_id: &str, head: usize) -> Option<usize> {
        self.rows.get(species_id).map(|row| row[head])
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["species_id"];
        header.extend(TRAIT_HEADS.iter().map(|h| h.name));
        writer.write_record(&header)?;
        for (species, row) in &self.rows {
            let mut rec = vec![species.as_str()];
            rec.extend(TRAIT_HEADS.iter().zip(row).map(|(h, &l)| h.label_text(l)));
            writer.write_record(&rec)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        const SOURCE: &str = "traits";
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(input);
        let headers = reader.headers()?.clone();
        let species_col = headers
            .iter()
            .position(|h| h == "species_id")
            .ok_or_else(|| Error::parse(SOURCE, 1, "missing column `species_id`"))?;
        let mut cols = [0usize; 22];
        for (slot, head) in cols.iter_mut().zip(&TRAIT_HEADS) {
            *slot = headers
                .iter()
                .position(|h| h == head.name)
                .ok_or_else(|| Error::parse(SOURCE, 1, format!("missing column `{}`", head.name)))?;
        }
        let mut rows = BTreeMap::new();
        for rec in reader.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let species = rec.get(species_col).unwrap_or("").to_string();
            if species.is_empty() {
                return Err(Error::parse(SOURCE, line, "empty species_id"));
            }
            let mut row = [0usize; 22];
            for ((slot, head), col) in row.iter_mut().zip(&TRAIT_HEADS).zip(cols) {
                let cell = rec.get(col).unwrap_or("");
                *slot = head.parse_label(cell).ok_or_else(|| {
                    Error::parse(SOURCE, line, format!("bad value `{cell}` for `{}`", head.name))
                })?;
            }
            if rows.insert(species.clone(), row).is_some() {
                return Err(Error::parse(SOURCE, line, format!("duplicate species `{species}`")));
            }
        }
        Ok(TraitTable { rows })
    }

    /// Every species in `species_ids` must have a row.
    pub fn check_complete<'a>(&self, species_ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for s in species_ids {
            if !self.rows.contains_key(s) {
                return Err(Error::Invalid(format!("trait table has no row for `{s}`")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_shape() {
        assert_eq!(TRAIT_HEADS.len(), 22);
        let categorical = TRAIT_HEADS
            .iter()
            .filter(|h| matches!(h.kind, TraitKind::Categorical(_)))
            .count();
        assert_eq!(categorical, 4);
        assert_eq!(TRAIT_HEADS.len() - categorical, 18);
        for h in &TRAIT_HEADS {
            if let TraitKind::Categorical(v) = h.kind {
                assert!(v.len() == 3 || v.len() == 4);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut t = TraitTable::default();
        let mut row = [0usize; 22];
        row[0] = 3;
        row[7] = 2;
        row[21] = 1;
        t.rows.insert("sp1".into(), row);
        t.rows.insert("sp2".into(), [0; 22]);
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("species_id,diet_type,activity_pattern,locomotion_arboreal"));
        assert!(text.contains("sp1,specialized,diurnal,false"));
        assert_eq!(TraitTable::read(buf.as_slice()).unwrap(), t);
        assert!(t.check_complete(["sp1", "sp3"]).is_err());
    }

    #[test]
    fn bad_cell_is_rejected() {
        let mut buf = Vec::new();
        let mut t = TraitTable::default();
        t.rows.insert("sp1".into(), [0; 22]);
        t.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("herbivorous", "grazing");
        assert!(matches!(TraitTable::read(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }
}
