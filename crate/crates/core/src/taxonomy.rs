//! Taxonomic data model and prompt rendering.
//!
//! A [`TaxonRecord`] carries the five-rank lineage of one species. Prompts are
//! rendered from it in one of five [`PromptTemplate`]s; training draws a
//! template per clip with [`sample_template`], and the ordering ablation uses
//! [`shuffle_taxonomic_sequence`] to destroy the broad-to-narrow layout of the
//! taxonomic sequence while keeping its words.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Taxonomic rank, ordered broad to narrow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    Class,
    Order,
    Family,
    Genus,
    Species,
}

impl Rank {
    pub const ALL: [Rank; 5] = [
        Rank::Class,
        Rank::Order,
        Rank::Family,
        Rank::Genus,
        Rank::Species,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rank::Class => "class",
            Rank::Order => "order",
            Rank::Family => "family",
            Rank::Genus => "genus",
            Rank::Species => "species",
        }
    }

    /// This rank and every broader one.
    pub fn and_broader(self) -> impl Iterator<Item = Rank> {
        Rank::ALL.into_iter().filter(move |r| *r <= self)
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rank {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rank::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown rank `{s}`")))
    }
}

/// Lineage values per rank; `species` holds the specific epithet.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lineage {
    pub class: String,
    pub order: String,
    pub family: String,
    pub genus: String,
    pub species: String,
}

impl Lineage {
    pub fn get(&self, rank: Rank) -> &str {
        match rank {
            Rank::Class => &self.class,
            Rank::Order => &self.order,
            Rank::Family => &self.family,
            Rank::Genus => &self.genus,
            Rank::Species => &self.species,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaxonRecord {
    pub species_id: String,
    pub lineage: Lineage,
    pub scientific_name: String,
    pub common_name: String,
}

impl TaxonRecord {
    /// Builds a record, checking non-empty fields and that the scientific name
    /// is the genus followed by the epithet (case-insensitive).
    pub fn new(
        species_id: impl Into<String>,
        lineage: Lineage,
        scientific_name: impl Into<String>,
        common_name: impl Into<String>,
    ) -> Result<Self> {
        let record = TaxonRecord {
            species_id: species_id.into(),
            lineage,
            scientific_name: scientific_name.into(),
            common_name: common_name.into(),
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        if self.species_id.trim().is_empty() {
            return Err(Error::Invalid("empty species_id".into()));
        }
        for rank in Rank::ALL {
            if self.lineage.get(rank).trim().is_empty() {
                return Err(Error::Invalid(format!(
                    "species {}: empty {} in lineage",
                    self.species_id, rank
                )));
            }
        }
        if self.common_name.trim().is_empty() {
            return Err(Error::Invalid(format!(
                "species {}: empty common_name",
                self.species_id
            )));
        }
        let expected = format!("{} {}", self.lineage.genus, self.lineage.species);
        if normalize_case(&self.scientific_name) != normalize_case(&expected) {
            return Err(Error::Invalid(format!(
                "species {}: scientific_name `{}` does not match lineage `{}`",
                self.species_id, self.scientific_name, expected
            )));
        }
        Ok(())
    }

    /// Binomial with each word capitalised, as it appears inside the
    /// composite templates ("Magumma Parva").
    pub fn display_binomial(&self) -> String {
        self.scientific_name
            .split_whitespace()
            .map(capitalize)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn normalize_case(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptTemplate {
    Com,
    Sci,
    Tax,
    SciCom,
    TaxCom,
}

impl PromptTemplate {
    pub const ALL: [PromptTemplate; 5] = [
        PromptTemplate::Com,
        PromptTemplate::Sci,
        PromptTemplate::Tax,
        PromptTemplate::SciCom,
        PromptTemplate::TaxCom,
    ];

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptTemplate::Com => "Com",
            PromptTemplate::Sci => "Sci",
            PromptTemplate::Tax => "Tax",
            PromptTemplate::SciCom => "SciCom",
            PromptTemplate::TaxCom => "TaxCom",
        }
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        PromptTemplate::ALL
            .into_iter()
            .find(|t| t.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Invalid(format!("unknown prompt template `{s}`")))
    }
}

pub fn render_prompt(record: &TaxonRecord, template: PromptTemplate) -> String {
    match template {
        PromptTemplate::Com => record.common_name.clone(),
        PromptTemplate::Sci => record.scientific_name.clone(),
        PromptTemplate::Tax => layout_sequence(&tax_tokens(record)),
        PromptTemplate::SciCom => format!(
            "{} with a common name {}",
            record.display_binomial(),
            record.common_name
        ),
        PromptTemplate::TaxCom => format!(
            "{}, with a common name {}",
            layout_sequence(&tax_tokens(record)),
            record.common_name
        ),
    }
}

/// Uniform draw over the five templates.
pub fn sample_template<R: Rng + ?Sized>(rng: &mut R) -> PromptTemplate {
    PromptTemplate::ALL[rng.gen_range(0..PromptTemplate::ALL.len())]
}

/// Number of word slots in the taxonomic sequence.
pub const TAX_SEQUENCE_LEN: usize = 6;

/// The six words of the taxonomic sequence in broad-to-narrow order:
/// class, order, family, genus, then the two words of the binomial.
pub fn tax_tokens(record: &TaxonRecord) -> [String; TAX_SEQUENCE_LEN] {
    let binomial = record.display_binomial();
    let (genus_word, epithet) = binomial
        .split_once(' ')
        .map(|(g, e)| (g.to_string(), e.to_string()))
        .unwrap_or_else(|| (binomial.clone(), capitalize(&record.lineage.species)));
    [
        record.lineage.class.clone(),
        record.lineage.order.clone(),
        record.lineage.family.clone(),
        record.lineage.genus.clone(),
        genus_word,
        epithet,
    ]
}

/// Joins words pairwise: "w0 w1, w2 w3, w4 w5".
fn layout_sequence<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .chunks(2)
        .map(|pair| {
            pair.iter()
                .map(AsRef::as_ref)
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn draw_permutation<R: Rng + ?Sized>(rng: &mut R) -> [usize; TAX_SEQUENCE_LEN] {
    let mut perm = [0, 1, 2, 3, 4, 5];
    perm.shuffle(rng);
    perm
}

/// Taxonomic sequence with its words placed according to `permutation`
/// (slot `i` receives word `permutation[i]`).
pub fn permuted_taxonomic_sequence(
    record: &TaxonRecord,
    permutation: &[usize; TAX_SEQUENCE_LEN],
) -> String {
    let tokens = tax_tokens(record);
    let permuted: Vec<&str> = permutation.iter().map(|&i| tokens[i].as_str()).collect();
    layout_sequence(&permuted)
}

/// Taxonomic sequence in a uniformly random word order.
pub fn shuffle_taxonomic_sequence<R: Rng + ?Sized>(record: &TaxonRecord, rng: &mut R) -> String {
    let permutation = draw_permutation(rng);
    permuted_taxonomic_sequence(record, &permutation)
}

/// True iff the lineages agree (case-insensitively) at `rank` and every
/// broader rank.
pub fn rank_match(predicted: &TaxonRecord, truth: &TaxonRecord, rank: Rank) -> bool {
    rank.and_broader().all(|r| {
        predicted.lineage.get(r).trim().to_lowercase() == truth.lineage.get(r).trim().to_lowercase()
    })
}

pub const TAXONOMY_COLUMNS: [&str; 8] = [
    "species_id",
    "class",
    "order",
    "family",
    "genus",
    "species",
    "scientific_name",
    "common_name",
];

/// Parses a taxonomy CSV. Errors carry the 1-based line number.
pub fn parse_taxonomy_table<R: Read>(input: R) -> Result<Vec<TaxonRecord>> {
    const SOURCE: &str = "taxonomy";
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(SOURCE, 1, e.to_string()))?
        .clone();
    let mut columns = [0usize; 8];
    for (slot, name) in columns.iter_mut().zip(TAXONOMY_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(SOURCE, 1, format!("missing column `{name}`")))?;
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::parse(SOURCE, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let cell = |i: usize| row.get(columns[i]).unwrap_or("").to_string();
        for (i, name) in TAXONOMY_COLUMNS.iter().enumerate() {
            if cell(i).is_empty() {
                return Err(Error::parse(SOURCE, line, format!("empty `{name}` cell")));
            }
        }
        let record = TaxonRecord {
            species_id: cell(0),
            lineage: Lineage {
                class: cell(1),
                order: cell(2),
                family: cell(3),
                genus: cell(4),
                species: cell(5),
            },
            scientific_name: cell(6),
            common_name: cell(7),
        };
        record
            .validate()
            .map_err(|e| Error::parse(SOURCE, line, e.to_string()))?;
        if !seen.insert(record.species_id.clone()) {
            return Err(Error::parse(
                SOURCE,
                line,
                format!("duplicate species_id `{}`", record.species_id),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_taxonomy_table<W: std::io::Write>(records: &[TaxonRecord], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(TAXONOMY_COLUMNS)?;
    for r in records {
        writer.write_record([
            r.species_id.as_str(),
            &r.lineage.class,
            &r.lineage.order,
            &r.lineage.family,
            &r.lineage.genus,
            &r.lineage.species,
            &r.scientific_name,
            &r.common_name,
        ])?;
    }
    writer.flush()?;
    Ok(())
}
