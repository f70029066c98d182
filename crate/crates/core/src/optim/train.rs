use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamWConfig, AdamWState};
use super::grad::{loss_gradients, Batch};
use crate::corpus::{balanced_epoch, ClipManifestEntry};
use crate::error::{Error, Result};
use crate::model::{init_params, EncoderDims, EncoderParams, TextFeatConfig};
use crate::taxonomy::{render_prompt, sample_template, shuffle_taxonomic_sequence, PromptTemplate, TaxonRecord};

/// How training prompts are chosen for each clip occurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TemplateMode {
    /// A fresh uniform draw over the five templates.
    Mixed,
    Fixed(PromptTemplate),
    /// The taxonomic sequence with its six words in a fresh random order.
    ShuffledTax,
}

impl fmt::Display for TemplateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateMode::Mixed => f.write_str("mixed"),
            TemplateMode::Fixed(t) => f.write_str(t.name()),
            TemplateMode::ShuffledTax => f.write_str("shuffled-tax"),
        }
    }
}

impl FromStr for TemplateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mixed" => Ok(TemplateMode::Mixed),
            "shuffled-tax" | "shuffled_tax" | "shuffledtax" => Ok(TemplateMode::ShuffledTax),
            _ => s.parse().map(TemplateMode::Fixed).map_err(|_| {
                Error::Invalid(format!(
                    "unknown template mode `{s}` (mixed, Com, Sci, Tax, SciCom, TaxCom, shuffled-tax)"
                ))
            }),
        }
    }
}

impl TryFrom<String> for TemplateMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TemplateMode> for String {
    fn from(m: TemplateMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub clips_per_species: usize,
    pub seed: u64,
    pub template_mode: TemplateMode,
    pub adamw: AdamWConfig,
    pub gamma_trainable: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub text: TextFeatConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = EncoderDims::default();
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            clips_per_species: 30,
            seed: 0,
            template_mode: TemplateMode::Mixed,
            adamw: AdamWConfig::default(),
            gamma_trainable: false,
            hidden_dim: dims.hidden,
            embed_dim: dims.embed,
            text: TextFeatConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub gamma: f64,
}

pub fn write_loss_log<W: Write>(log: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Feature vectors per clip; a clip may carry several views (crops), one of
/// which is drawn per occurrence.
pub type ClipViews = HashMap<String, Vec<Vec<f64>>>;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub log: Vec<LossRecord>,
    /// Clip occurrences left over because only one species remained.
    pub dropped: usize,
}

/// Groups an epoch into batches of pairwise-distinct species. A clip whose
/// species is already in the batch under construction is deferred to the
/// next one; trailing singleton batches are dropped.
pub fn distinct_species_batches(
    epoch: &[String],
    species_of: &HashMap<&str, &str>,
    batch_size: usize,
) -> Result<(Vec<Vec<String>>, usize)> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be >= 1".into()));
    }
    let mut pending: VecDeque<&String> = epoch.iter().collect();
    let mut batches = Vec::new();
    let mut dropped = 0;
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut used = HashSet::new();
        let mut deferred = VecDeque::new();
        while let Some(c) = pending.pop_front() {
            let s = species_of
                .get(c.as_str())
                .ok_or_else(|| Error::Invalid(format!("clip `{c}` has no species")))?;
            if used.insert(*s) {
                batch.push(c.clone());
                if batch.len() == batch_size {
                    break;
                }
            } else {
                deferred.push_back(c);
            }
        }
        while let Some(c) = deferred.pop_back() {
            pending.push_front(c);
        }
        if batch.len() < 2 && batch_size >= 2 {
            dropped += batch.len() + pending.len();
            break;
        }
        batches.push(batch);
    }
    Ok((batches, dropped))
}

fn prompt_for<R: Rng + ?Sized>(mode: TemplateMode, record: &TaxonRecord, rng: &mut R) -> String {
    match mode {
        TemplateMode::Mixed => render_prompt(record, sample_template(rng)),
        TemplateMode::Fixed(t) => render_prompt(record, t),
        TemplateMode::ShuffledTax => shuffle_taxonomic_sequence(record, rng),
    }
}

// independent streams so that ablations sharing a seed share the
// initialisation and epoch order
const STREAM_INIT: u64 = 1;
const STREAM_EPOCH: u64 = 2;
const STREAM_PROMPT: u64 = 3;
const STREAM_VIEW: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains both encoders on `train` clips. The audio standardiser is fitted
/// on every view of the training clips and stored in the returned
/// parameters.
pub fn train(
    cfg: &TrainConfig,
    train: &[ClipManifestEntry],
    views: &ClipViews,
    taxonomy: &[TaxonRecord],
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.clips_per_species == 0 {
        return Err(Error::Invalid(
            "epochs, batch_size and clips_per_species must all be >= 1".into(),
        ));
    }
    let records: HashMap<&str, &TaxonRecord> =
        taxonomy.iter().map(|r| (r.species_id.as_str(), r)).collect();
    let mut audio_in = None;
    for e in train {
        if !records.contains_key(e.species_id.as_str()) {
            return Err(Error::Invalid(format!(
                "clip {}: species `{}` not in taxonomy",
                e.clip_id, e.species_id
            )));
        }
        let v = views
            .get(&e.clip_id)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Invalid(format!("no features for clip `{}`", e.clip_id)))?;
        for row in v {
            if *audio_in.get_or_insert(row.len()) != row.len() {
                return Err(Error::Dimension {
                    what: "audio features",
                    expected: audio_in.unwrap_or(0),
                    actual: row.len(),
                });
            }
        }
    }
    let audio_in = audio_in.unwrap_or(0);
    let dims = EncoderDims {
        audio_in,
        text_in: cfg.text.dim,
        hidden: cfg.hidden_dim,
        embed: cfg.embed_dim,
    };
    let mut params = init_params(dims, &mut stream(cfg.seed, STREAM_INIT))?;
    params.gamma_trainable = cfg.gamma_trainable;

    let mut species: Vec<String> = train.iter().map(|e| e.species_id.clone()).collect();
    species.sort();
    species.dedup();
    let species_of: HashMap<&str, &str> = train
        .iter()
        .map(|e| (e.clip_id.as_str(), e.species_id.as_str()))
        .collect();

    let mut epoch_rng = stream(cfg.seed, STREAM_EPOCH);
    let mut prompt_rng = stream(cfg.seed, STREAM_PROMPT);
    let mut view_rng = stream(cfg.seed, STREAM_VIEW);
    let mut state = AdamWState::new(&params, cfg.adamw);
    let mut log = Vec::new();
    let mut dropped = 0;
    for epoch in 0..cfg.epochs {
        let order = balanced_epoch(train, &species, cfg.clips_per_species, &mut epoch_rng)?;
        let (batches, lost) = distinct_species_batches(&order, &species_of, cfg.batch_size)?;
        dropped += lost;
        for clips in batches {
            let mut audio = Vec::with_capacity(clips.len());
            let mut prompts = Vec::with_capacity(clips.len());
            let mut ids = Vec::with_capacity(clips.len());
            for c in &clips {
                let v = &views[c];
                audio.push(v[view_rng.gen_range(0..v.len())].clone());
                let s = species_of[c.as_str()];
                prompts.push(prompt_for(cfg.template_mode, records[s], &mut prompt_rng));
                ids.push(s.to_string());
            }
            let batch = Batch::new(audio, prompts, ids)?.prepare(&cfg.text)?;
            let (loss, grads) = loss_gradients(&params, &batch)?;
            adamw_step(&mut params, &grads, &mut state)?;
            log.push(LossRecord {
                step: state.step,
                epoch,
                loss,
                gamma: params.gamma,
            });
        }
    }
    params.validate()?;
    Ok(TrainOutcome {
        params,
        log,
        dropped,
    })
}
