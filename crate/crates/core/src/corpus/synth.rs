//! Planted-hierarchy synthetic corpus.
//!
//! Every taxon at every rank draws a small set of acoustic perturbations
//! once: a multiplicative factor on the fundamental frequency, a spectral
//! tilt offset and an amplitude-modulation contribution. A species' voice is
//! the product (or sum) of its lineage's perturbations, so two species are
//! acoustically closer the more ranks they share. Clips are four-partial
//! harmonic stacks with per-clip f0 jitter and additive white noise.

use std::collections::{BTreeMap, HashSet};

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::traits::{TraitTable, TRAIT_HEADS};
use super::{ClipManifestEntry, ClipSource, Grade};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::model::fnv1a64;
use crate::taxonomy::{Lineage, Rank, TaxonRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Branching {
    pub classes: usize,
    pub orders_per_class: usize,
    pub families_per_order: usize,
    pub genera_per_family: usize,
    pub species_per_genus: usize,
}

impl Default for Branching {
    fn default() -> Self {
        Branching {
            classes: 2,
            orders_per_class: 3,
            families_per_order: 2,
            genera_per_family: 5,
            species_per_genus: 3,
        }
    }
}

impl Branching {
    pub fn as_array(&self) -> [usize; 5] {
        [
            self.classes,
            self.orders_per_class,
            self.families_per_order,
            self.genera_per_family,
            self.species_per_genus,
        ]
    }

    pub fn species_count(&self) -> usize {
        self.as_array().iter().product()
    }
}

/// Inclusive range of recordings per species.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipCountRange {
    pub min: usize,
    pub max: usize,
}

impl Default for ClipCountRange {
    fn default() -> Self {
        ClipCountRange { min: 6, max: 24 }
    }
}

/// How vernacular names are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonNames {
    /// Two random words per species, unrelated to the lineage.
    Random,
    /// A random modifier followed by a head noun shared by every species of
    /// the same taxon at the given rank ("Dotted Kelwer").
    SharedHead(Rank),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub branching: Branching,
    pub clips_per_species: ClipCountRange,
    pub clip_duration_s: f64,
    pub sample_rate_hz: u32,
    /// Standard deviation of the additive white noise.
    pub noise_level: f64,
    /// Probability that a clip is casual rather than research grade.
    pub casual_fraction: f64,
    /// Per-species, per-head probability of departing from the family's
    /// trait prototype.
    pub trait_flip_rate: f64,
    pub common_names: CommonNames,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            branching: Branching::default(),
            clips_per_species: ClipCountRange::default(),
            clip_duration_s: 4.0,
            sample_rate_hz: 16_000,
            noise_level: 0.05,
            casual_fraction: 0.0,
            trait_flip_rate: 0.1,
            common_names: CommonNames::SharedHead(Rank::Family),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.branching.as_array().iter().any(|&b| b == 0) {
            return Err(Error::Invalid("all branching factors must be >= 1".into()));
        }
        if self.branching.species_per_genus < 2 {
            return Err(Error::Invalid(
                "species_per_genus must be >= 2 so held-out species keep congeners in training"
                    .into(),
            ));
        }
        let clips = self.clips_per_species;
        if clips.min < 3 || clips.max < clips.min {
            return Err(Error::Invalid(format!(
                "clips_per_species needs 3 <= min <= max, got {}..={}",
                clips.min, clips.max
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Invalid("noise_level must be >= 0".into()));
        }
        if !(self.clip_duration_s > 0.0) || self.sample_rate_hz == 0 {
            return Err(Error::Invalid("clip duration and sample rate must be > 0".into()));
        }
        for (name, p) in [
            ("casual_fraction", self.casual_fraction),
            ("trait_flip_rate", self.trait_flip_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-rank spread of each acoustic perturbation, broad to narrow.
const F0_LOG2_SPREAD: [f64; 5] = [0.7, 0.45, 0.3, 0.2, 0.06];
const TILT_SPREAD: [f64; 5] = [0.5, 0.4, 0.3, 0.2, 0.05];
const AM_DEPTH_SPREAD: [f64; 5] = [0.1, 0.1, 0.15, 0.3, 0.05];
const AM_RATE_SPREAD: [f64; 5] = [0.5, 0.5, 1.0, 2.0, 0.3];
const BASE_F0_HZ: f64 = 400.0;
const PARTIALS: usize = 4;
const F0_JITTER: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default)]
struct Perturbation {
    f0_log2: f64,
    tilt: f64,
    am_depth: f64,
    am_rate: f64,
}

impl Perturbation {
    fn draw<R: Rng>(rank: usize, rng: &mut R) -> Self {
        Perturbation {
            f0_log2: rng.gen_range(-1.0..=1.0) * F0_LOG2_SPREAD[rank],
            tilt: rng.gen_range(-1.0..=1.0) * TILT_SPREAD[rank],
            am_depth: rng.gen_range(0.0..=1.0) * AM_DEPTH_SPREAD[rank],
            am_rate: rng.gen_range(0.0..=1.0) * AM_RATE_SPREAD[rank],
        }
    }
}

/// Acoustic identity of one species.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesVoice {
    pub f0_hz: f64,
    pub partial_amps: [f64; PARTIALS],
    pub am_rate_hz: f64,
    pub am_depth: f64,
}

impl SpeciesVoice {
    fn from_lineage(perturbations: &[Perturbation; 5]) -> Self {
        let f0_log2: f64 = perturbations.iter().map(|p| p.f0_log2).sum();
        let tilt = (1.0 + perturbations.iter().map(|p| p.tilt).sum::<f64>()).max(0.0);
        let mut partial_amps = [0.0; PARTIALS];
        for (k, a) in partial_amps.iter_mut().enumerate() {
            *a = ((k + 1) as f64).powf(-tilt);
        }
        SpeciesVoice {
            f0_hz: BASE_F0_HZ * f0_log2.exp2(),
            partial_amps,
            am_rate_hz: 1.0 + perturbations.iter().map(|p| p.am_rate).sum::<f64>(),
            am_depth: perturbations.iter().map(|p| p.am_depth).sum::<f64>().min(0.9),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub taxonomy: Vec<TaxonRecord>,
    pub manifest: Vec<ClipManifestEntry>,
    pub traits: TraitTable,
    pub voices: BTreeMap<String, SpeciesVoice>,
    /// Trait prototype per family name.
    pub family_prototypes: BTreeMap<String, [usize; 22]>,
}

impl SynthCorpus {
    /// Deterministic waveform for one manifest entry; the clip's random
    /// stream is derived from `(seed, clip_id)`.
    pub fn waveform(&self, entry: &ClipManifestEntry) -> Result<Waveform> {
        let voice = self.voices.get(&entry.species_id).ok_or_else(|| {
            Error::Invalid(format!("no voice for species `{}`", entry.species_id))
        })?;
        let mut key = self.spec.seed.to_le_bytes().to_vec();
        key.extend_from_slice(entry.clip_id.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&key));

        let rate = self.spec.sample_rate_hz as f64;
        let n = (entry.duration_s * rate).round().max(1.0) as usize;
        let f0 = voice.f0_hz * (1.0 + rng.gen_range(-F0_JITTER..=F0_JITTER));
        let phases: Vec<f64> = (0..PARTIALS)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        let am_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let gain = 0.5 / voice.partial_amps.iter().sum::<f64>();
        let noise = Normal::new(0.0, self.spec.noise_level.max(0.0))
            .map_err(|e| Error::Invalid(e.to_string()))?;
        // sines advanced by complex rotation rather than evaluated per sample
        let tau = std::f64::consts::TAU;
        let mut partials: Vec<Phasor> = phases
            .iter()
            .enumerate()
            .map(|(k, &ph)| Phasor::new(ph, tau * (k + 1) as f64 * f0 / rate))
            .collect();
        let mut am = Phasor::new(am_phase, tau * voice.am_rate_hz / rate);
        let samples = (0..n)
            .map(|_| {
                let envelope = 1.0 - voice.am_depth * (0.5 + 0.5 * am.sin());
                let tone: f64 = voice
                    .partial_amps
                    .iter()
                    .zip(&partials)
                    .map(|(a, p)| a * p.sin())
                    .sum();
                am.advance();
                partials.iter_mut().for_each(Phasor::advance);
                gain * envelope * tone + noise.sample(&mut rng)
            })
            .collect();
        Waveform::new(samples, self.spec.sample_rate_hz)
    }

    pub fn waveforms(&self) -> impl Iterator<Item = (&ClipManifestEntry, Result<Waveform>)> + '_ {
        self.manifest.iter().map(move |e| (e, self.waveform(e)))
    }
}

struct Phasor {
    re: f64,
    im: f64,
    step_re: f64,
    step_im: f64,
}

impl Phasor {
    fn new(phase: f64, step: f64) -> Self {
        Phasor { re: phase.cos(), im: phase.sin(), step_re: step.cos(), step_im: step.sin() }
    }

    fn sin(&self) -> f64 {
        self.im
    }

    fn advance(&mut self) {
        let re = self.re * self.step_re - self.im * self.step_im;
        self.im = self.re * self.step_im + self.im * self.step_re;
        self.re = re;
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "kl", "st",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ae", "ou"];
const EPITHET_ENDINGS: &[&str] = &["a", "us", "is", "um", "ens"];
const MODIFIERS: &[&str] = &[
    "Spotted", "Crested", "Dusky", "Little", "Greater", "Lesser", "Rufous", "Olive", "Grey",
    "Striped", "Golden", "Pale", "Sooty", "Scarlet", "Hooded", "Masked", "Banded", "Plain",
    "Tawny", "Ashy", "Collared", "Bronze", "Slender", "Stout", "Long-tailed", "Short-billed",
    "Northern", "Southern", "Eastern", "Western", "Highland", "Lowland", "Marsh", "Forest",
    "Desert", "River", "Cliff", "Common", "Rare", "Whistling", "Chattering", "Silent", "Painted",
    "Velvet", "Speckled", "Barred", "Ruddy", "Snowy",
];

fn syllables<R: Rng>(rng: &mut R, count: usize) -> String {
    (0..count)
        .map(|_| {
            format!(
                "{}{}",
                ONSETS.choose(rng).expect("non-empty"),
                VOWELS.choose(rng).expect("non-empty")
            )
        })
        .collect()
}

fn capitalized(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Draws names until one is unused.
fn unique_name<R: Rng>(used: &mut HashSet<String>, rng: &mut R, make: impl Fn(&mut R) -> String) -> String {
    loop {
        let name = make(rng);
        if used.insert(name.to_lowercase()) {
            return name;
        }
    }
}

fn taxon_name<R: Rng>(rank: Rank, used: &mut HashSet<String>, rng: &mut R) -> String {
    unique_name(used, rng, |rng| match rank {
        Rank::Class => capitalized(&format!("{}ia", syllables(rng, 2))),
        Rank::Order => capitalized(&format!("{}iformes", syllables(rng, 2))),
        Rank::Family => capitalized(&format!("{}idae", syllables(rng, 2))),
        Rank::Genus => capitalized(&syllables(rng, 3)),
        Rank::Species => format!(
            "{}{}",
            syllables(rng, 2),
            EPITHET_ENDINGS.choose(rng).expect("non-empty")
        ),
    })
}

/// Builds the synthetic taxonomy, manifest, traits and per-species voices.
/// Waveforms are rendered on demand by [`SynthCorpus::waveform`].
pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let b = spec.branching.as_array();
    let mut used_names = HashSet::new();
    let mut used_heads = HashSet::new();
    let mut used_common = HashSet::new();

    let mut taxonomy = Vec::with_capacity(spec.branching.species_count());
    let mut voices = BTreeMap::new();
    let mut traits = TraitTable::default();
    let mut family_prototypes = BTreeMap::new();

    // Walk the tree depth-first, drawing each taxon's name and perturbation
    // once on entry.
    let mut names: [String; 5] = Default::default();
    let mut perturb = [Perturbation::default(); 5];
    let mut heads: [String; 5] = Default::default();
    let mut prototype = [0usize; 22];
    let mut index = [0usize; 5];
    let total = spec.branching.species_count();
    for species_idx in 0..total {
        // mixed-radix decomposition of the species index
        let mut rem = species_idx;
        for level in (0..5).rev() {
            index[level] = rem % b[level];
            rem /= b[level];
        }
        // first level whose subtree starts here needs fresh draws
        let first_new = if species_idx == 0 {
            0
        } else {
            (0..5)
                .find(|&l| index[l + 1..].iter().all(|&i| i == 0))
                .unwrap_or(4)
        };
        for (level, rank) in Rank::ALL.iter().enumerate().skip(first_new) {
            names[level] = taxon_name(*rank, &mut used_names, &mut rng);
            perturb[level] = Perturbation::draw(level, &mut rng);
            heads[level] = unique_name(&mut used_heads, &mut rng, |r| capitalized(&syllables(r, 2)));
            if *rank == Rank::Family {
                for (slot, head) in prototype.iter_mut().zip(&TRAIT_HEADS) {
                    *slot = rng.gen_range(0..head.kind.num_labels());
                }
                family_prototypes.insert(names[level].clone(), prototype);
            }
        }

        let lineage = Lineage {
            class: names[0].clone(),
            order: names[1].clone(),
            family: names[2].clone(),
            genus: names[3].clone(),
            species: names[4].clone(),
        };
        let head_word = match spec.common_names {
            CommonNames::Random => None,
            CommonNames::SharedHead(rank) => Some(heads[rank as usize].clone()),
        };
        let common_name = unique_name(&mut used_common, &mut rng, |r| {
            let modifier = MODIFIERS.choose(r).expect("non-empty");
            let head = head_word
                .clone()
                .unwrap_or_else(|| capitalized(&syllables(r, 2)));
            format!("{modifier} {head}")
        });
        let species_id = format!("sp{species_idx:04}");
        let record = TaxonRecord::new(
            species_id.clone(),
            lineage.clone(),
            format!("{} {}", lineage.genus, lineage.species),
            common_name,
        )?;
        voices.insert(species_id.clone(), SpeciesVoice::from_lineage(&perturb));

        let mut row = prototype;
        for (slot, head) in row.iter_mut().zip(&TRAIT_HEADS) {
            if rng.gen_bool(spec.trait_flip_rate) {
                let k = head.kind.num_labels();
                *slot = (*slot + rng.gen_range(1..k)) % k;
            }
        }
        traits.rows.insert(species_id, row);
        taxonomy.push(record);
    }

    let base_date = NaiveDate::from_ymd_opt(2021, 1, 1).expect("valid date");
    let mut manifest = Vec::new();
    for record in &taxonomy {
        let n_clips = rng.gen_range(spec.clips_per_species.min..=spec.clips_per_species.max);
        let n_days = rng.gen_range(3..=n_clips.min(6));
        let days: Vec<i64> = rand::seq::index::sample(&mut rng, 365, n_days)
            .into_iter()
            .map(|d| d as i64)
            .collect();
        let mut day_of_clip: Vec<i64> = (0..n_clips).map(|i| days[i % n_days]).collect();
        day_of_clip.shuffle(&mut rng);
        for (k, day) in day_of_clip.into_iter().enumerate() {
            let clip_id = format!("{}_c{k:03}", record.species_id);
            let grade = if rng.gen_bool(spec.casual_fraction) {
                Grade::Casual
            } else {
                Grade::Research
            };
            manifest.push(ClipManifestEntry {
                path: format!("wav/{clip_id}.wav"),
                clip_id,
                species_id: record.species_id.clone(),
                date: base_date + Duration::days(day),
                duration_s: spec.clip_duration_s,
                grade,
                source: ClipSource::Synthetic,
            });
        }
    }

    Ok(SynthCorpus {
        spec: spec.clone(),
        taxonomy,
        manifest,
        traits,
        voices,
        family_prototypes,
    })
}
