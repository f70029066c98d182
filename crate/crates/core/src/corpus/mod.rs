//! Recording manifests, trait tables, the planted-hierarchy synthetic corpus,
//! train/val/test splits and species-balanced epochs.

mod epoch;
mod splits;
mod synth;
mod traits;

pub use epoch::balanced_epoch;
pub use splits::{
    build_splits, check_split_invariants, read_splits, write_splits, Split, SplitAssignment,
    SplitParams,
};
pub use synth::{generate_corpus, Branching, ClipCountRange, CommonNames, SpeciesVoice, SynthCorpus, SynthSpec};
pub use traits::{head_by_name, TraitHead, TraitKind, TraitTable, TRAIT_HEADS};

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::TaxonRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grade {
    Research,
    Casual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipSource {
    Synthetic,
    External,
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grade::Research => "research",
            Grade::Casual => "casual",
        })
    }
}

impl FromStr for Grade {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "research" => Ok(Grade::Research),
            "casual" => Ok(Grade::Casual),
            other => Err(Error::Invalid(format!("unknown grade `{other}`"))),
        }
    }
}

impl fmt::Display for ClipSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipSource::Synthetic => "synthetic",
            ClipSource::External => "external",
        })
    }
}

impl FromStr for ClipSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(ClipSource::Synthetic),
            "external" => Ok(ClipSource::External),
            other => Err(Error::Invalid(format!("unknown source `{other}`"))),
        }
    }
}

/// One recording.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipManifestEntry {
    pub clip_id: String,
    pub species_id: String,
    pub path: String,
    pub date: NaiveDate,
    pub duration_s: f64,
    pub grade: Grade,
    pub source: ClipSource,
}

pub const MANIFEST_COLUMNS: [&str; 7] = [
    "clip_id",
    "species_id",
    "path",
    "date",
    "duration_s",
    "grade",
    "source",
];

const DATE_FORMAT: &str = "%Y-%m-%d";

pub fn read_manifest<R: Read>(input: R) -> Result<Vec<ClipManifestEntry>> {
    const SOURCE: &str = "manifest";
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(SOURCE, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_COLUMNS {
        return Err(Error::parse(
            SOURCE,
            1,
            format!("header must be `{}`", MANIFEST_COLUMNS.join(",")),
        ));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::parse(SOURCE, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |msg: String| Error::parse(SOURCE, line, msg);
        let field = |i: usize| -> Result<&str> {
            match row.get(i) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(bad(format!("missing `{}`", MANIFEST_COLUMNS[i]))),
            }
        };
        let date = NaiveDate::parse_from_str(field(3)?, DATE_FORMAT)
            .map_err(|e| bad(format!("bad date `{}`: {e}", field(3).unwrap_or(""))))?;
        let duration_s: f64 = field(4)?
            .parse()
            .map_err(|_| bad(format!("bad duration `{}`", field(4).unwrap_or(""))))?;
        let entry = ClipManifestEntry {
            clip_id: field(0)?.to_string(),
            species_id: field(1)?.to_string(),
            path: field(2)?.to_string(),
            date,
            duration_s,
            grade: field(5)?.parse().map_err(|e: Error| bad(e.to_string()))?,
            source: field(6)?.parse().map_err(|e: Error| bad(e.to_string()))?,
        };
        validate_entry(&entry).map_err(|e| bad(e.to_string()))?;
        out.push(entry);
    }
    Ok(out)
}

fn validate_entry(entry: &ClipManifestEntry) -> Result<()> {
    if !(entry.duration_s.is_finite() && entry.duration_s > 0.0) {
        return Err(Error::Invalid(format!(
            "clip {}: duration_s must be > 0, got {}",
            entry.clip_id, entry.duration_s
        )));
    }
    Ok(())
}

pub fn write_manifest<W: Write>(entries: &[ClipManifestEntry], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(MANIFEST_COLUMNS)?;
    for e in entries {
        validate_entry(e)?;
        writer.write_record([
            e.clip_id.as_str(),
            &e.species_id,
            &e.path,
            &e.date.format(DATE_FORMAT).to_string(),
            &format!("{}", e.duration_s),
            &e.grade.to_string(),
            &e.source.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Checks unique clip ids and that every species resolves in `taxonomy`.
pub fn validate_manifest(entries: &[ClipManifestEntry], taxonomy: &[TaxonRecord]) -> Result<()> {
    let known: HashMap<&str, ()> = taxonomy.iter().map(|r| (r.species_id.as_str(), ())).collect();
    let mut seen = std::collections::HashSet::new();
    for e in entries {
        validate_entry(e)?;
        if !known.contains_key(e.species_id.as_str()) {
            return Err(Error::Invalid(format!(
                "clip {}: species `{}` not in taxonomy",
                e.clip_id, e.species_id
            )));
        }
        if !seen.insert(e.clip_id.as_str()) {
            return Err(Error::Invalid(format!("duplicate clip_id `{}`", e.clip_id)));
        }
    }
    Ok(())
}

/// Taxonomy indexed by species id.
pub fn index_taxonomy(taxonomy: &[TaxonRecord]) -> HashMap<String, TaxonRecord> {
    taxonomy
        .iter()
        .map(|r| (r.species_id.clone(), r.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "clip_id,species_id,path,date,duration_s,grade,source
c1,sp1,wav/c1.wav,2021-03-04,4.5,research,synthetic
c2,sp1,/data/x.wav,2021-03-05,10,casual,external
c3,sp2,\"dir,with,commas/c3.wav\",2020-12-31,0.25,research,external
";

    #[test]
    fn reads_fixture() {
        let m = read_manifest(FIXTURE.as_bytes()).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[0].clip_id, "c1");
        assert_eq!(m[0].date, NaiveDate::from_ymd_opt(2021, 3, 4).unwrap());
        assert_eq!(m[1].grade, Grade::Casual);
        assert_eq!(m[1].source, ClipSource::External);
        assert_eq!(m[1].duration_s, 10.0);
        assert_eq!(m[2].path, "dir,with,commas/c3.wav");
        assert_eq!(m[2].duration_s, 0.25);
    }

    #[test]
    fn round_trip() {
        let m = read_manifest(FIXTURE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_manifest(&m, &mut buf).unwrap();
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn zero_duration_is_rejected_with_line() {
        let bad = FIXTURE.replace("4.5", "0");
        match read_manifest(bad.as_bytes()) {
            Err(Error::Parse { line: 2, message, .. }) => assert!(message.contains("duration")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let bad = FIXTURE.replace("2020-12-31", "31/12/2020");
        assert!(matches!(read_manifest(bad.as_bytes()), Err(Error::Parse { line: 4, .. })));
        let bad = FIXTURE.replace("casual,external", "great,external");
        assert!(matches!(read_manifest(bad.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let bad = format!("{FIXTURE}c4,sp1\n");
        assert!(matches!(read_manifest(bad.as_bytes()), Err(Error::Parse { .. })));
    }
}
