//! End-to-end plumbing shared by the command line and the acceptance suite:
//! run configuration, feature views, dataset assembly and report building.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_splits, check_split_invariants, generate_corpus, read_manifest, read_splits,
    validate_manifest, write_manifest, write_splits, ClipManifestEntry, Split, SplitAssignment,
    SplitParams, SynthCorpus, SynthSpec, TraitKind, TraitTable, TRAIT_HEADS,
};
use crate::dsp::{crop_at, random_crop, resample, write_wav, LogMelExtractor, MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::eval::{
    embed_with_labels, f1_is_degenerate, fit_probe_on_embeddings, hierarchy_error_analysis,
    trait_f1, zero_shot_classify, EvalClip, HierarchyReport, MetricsReport, ProbeConfig,
    RankedPrediction, ZeroShotScores,
};
use crate::model::{fnv1a64, EncoderParams, TextFeatConfig};
use crate::optim::{train, ClipViews, TrainConfig, TrainOutcome};
use crate::taxonomy::{parse_taxonomy_table, write_taxonomy_table, PromptTemplate, TaxonRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontEndConfig {
    pub sample_rate_hz: u32,
    pub crop_s: f64,
    /// Random crops precomputed per training clip; each training occurrence
    /// draws one of them.
    pub train_views: usize,
    pub mel: MelConfig,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        FrontEndConfig {
            sample_rate_hz: 48_000,
            crop_s: 10.0,
            train_views: 4,
            mel: MelConfig::default(),
        }
    }
}

impl FrontEndConfig {
    /// 16 kHz and 3 s crops.
    pub fn desk() -> Self {
        FrontEndConfig {
            sample_rate_hz: 16_000,
            crop_s: 3.0,
            ..FrontEndConfig::default()
        }
    }

    pub fn extractor(&self) -> Result<LogMelExtractor> {
        LogMelExtractor::new(&self.mel, self.sample_rate_hz)
    }
}

fn clip_rng(seed: u64, clip_id: &str) -> ChaCha8Rng {
    let mut key = seed.to_le_bytes().to_vec();
    key.extend_from_slice(clip_id.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&key))
}

/// `train_views` random crops of one clip, drawn from a stream keyed by
/// `(seed, clip_id)`.
pub fn train_views(
    w: &Waveform,
    clip_id: &str,
    cfg: &FrontEndConfig,
    extractor: &LogMelExtractor,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let w = resample(w, cfg.sample_rate_hz);
    let mut rng = clip_rng(seed, clip_id);
    (0..cfg.train_views.max(1))
        .map(|_| extractor.features(&random_crop(&w, cfg.crop_s, &mut rng)))
        .collect()
}

/// The centred crop used for evaluation.
pub fn eval_view(w: &Waveform, cfg: &FrontEndConfig, extractor: &LogMelExtractor) -> Result<Vec<f64>> {
    let w = resample(w, cfg.sample_rate_hz);
    let n = ((cfg.crop_s * cfg.sample_rate_hz as f64).round() as usize).max(1);
    let start = w.samples.len().saturating_sub(n) / 2;
    extractor.features(&crop_at(&w, start, cfg.crop_s))
}

/// Loads waveforms for clips, possibly in parallel.
pub trait WaveSource: Sync {
    fn load(&self, entry: &ClipManifestEntry) -> Result<Waveform>;
}

impl WaveSource for crate::corpus::SynthCorpus {
    fn load(&self, entry: &ClipManifestEntry) -> Result<Waveform> {
        self.waveform(entry)
    }
}

/// WAV files resolved relative to a corpus directory.
pub struct WavDir(pub PathBuf);

impl WaveSource for WavDir {
    fn load(&self, entry: &ClipManifestEntry) -> Result<Waveform> {
        let path = self.0.join(&entry.path);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        crate::dsp::read_wav(&path)
    }
}

pub fn extract_train_views<S: WaveSource + ?Sized>(
    entries: &[&ClipManifestEntry],
    source: &S,
    cfg: &FrontEndConfig,
    seed: u64,
) -> Result<ClipViews> {
    let extractor = cfg.extractor()?;
    let rows: Vec<(String, Vec<Vec<f64>>)> = entries
        .par_iter()
        .map(|e| {
            let w = source.load(e)?;
            Ok((e.clip_id.clone(), train_views(&w, &e.clip_id, cfg, &extractor, seed)?))
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().collect())
}

pub fn extract_eval_clips<S: WaveSource + ?Sized>(
    entries: &[&ClipManifestEntry],
    source: &S,
    cfg: &FrontEndConfig,
) -> Result<Vec<EvalClip>> {
    let extractor = cfg.extractor()?;
    entries
        .par_iter()
        .map(|e| {
            let w = source.load(e)?;
            Ok(EvalClip {
                clip_id: e.clip_id.clone(),
                species_id: e.species_id.clone(),
                features: eval_view(&w, cfg, &extractor)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Templates scored by `eval`.
    pub templates: Vec<PromptTemplate>,
    /// Template whose species-level errors feed the rank analysis.
    pub hierarchy_template: PromptTemplate,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            templates: PromptTemplate::ALL.to_vec(),
            hierarchy_template: PromptTemplate::Com,
        }
    }
}

/// Optional path overrides; unset paths live under the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub reports_dir: Option<PathBuf>,
}

/// Every tunable of the pipeline. The top-level `seed` replaces the seeds
/// of the sections when a run starts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub split: SplitParams,
    pub front_end: FrontEndConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Desk-scale preset: paper defaults except the 16 kHz / 3 s front end.
    pub fn desk() -> Self {
        RunConfig {
            front_end: FrontEndConfig::desk(),
            ..RunConfig::default()
        }
    }

    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn from_path(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_str_with_format(&text, path.extension().is_some_and(|e| e == "toml"))
    }

    pub fn from_str_with_format(text: &str, toml: bool) -> Result<Self> {
        if toml {
            toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))
        } else {
            Ok(serde_json::from_str(text)?)
        }
    }

    /// Pushes the top-level seed into every section.
    pub fn resolved(mut self) -> Self {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.probe.seed = self.seed;
        self
    }

    /// Hex FNV-1a of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        format!("{:016x}", fnv1a64(&json))
    }
}

/// Seed of the split builder's stream.
pub fn split_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(10);
    rng
}

/// Builds splits and refuses any assignment that violates a post-condition.
pub fn checked_splits(
    manifest: &[ClipManifestEntry],
    taxonomy: &[TaxonRecord],
    params: &SplitParams,
    seed: u64,
) -> Result<SplitAssignment> {
    let split = build_splits(manifest, taxonomy, params, &mut split_rng(seed))?;
    let violations = check_split_invariants(&split, manifest, taxonomy, params);
    if let Some(first) = violations.first() {
        return Err(Error::Invariant {
            check: "split post-conditions".into(),
            detail: format!("{first} ({} violations)", violations.len()),
        });
    }
    Ok(split)
}

pub const TAXONOMY_FILE: &str = "taxonomy.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TRAITS_FILE: &str = "traits.csv";

/// The three tables of a corpus directory.
#[derive(Clone, Debug)]
pub struct CorpusTables {
    pub taxonomy: Vec<TaxonRecord>,
    pub manifest: Vec<ClipManifestEntry>,
    pub traits: TraitTable,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(BufReader::new(File::open(path)?))
}

/// Writes the tables and one WAV per clip under `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("wav"))
        .map_err(|e| Error::Invalid(format!("cannot create {}: {e}", dir.display())))?;
    write_taxonomy_table(&corpus.taxonomy, create(&dir.join(TAXONOMY_FILE))?)?;
    write_manifest(&corpus.manifest, create(&dir.join(MANIFEST_FILE))?)?;
    corpus.traits.write(create(&dir.join(TRAITS_FILE))?)?;
    corpus.manifest.par_iter().try_for_each(|e| write_wav(&dir.join(&e.path), &corpus.waveform(e)?))
}

pub fn read_corpus(dir: &Path) -> Result<CorpusTables> {
    let taxonomy = parse_taxonomy_table(open(&dir.join(TAXONOMY_FILE))?)?;
    let manifest = read_manifest(open(&dir.join(MANIFEST_FILE))?)?;
    validate_manifest(&manifest, &taxonomy)?;
    let traits = TraitTable::read(open(&dir.join(TRAITS_FILE))?)?;
    Ok(CorpusTables {
        taxonomy,
        manifest,
        traits,
    })
}

pub fn read_split_file(path: &Path) -> Result<SplitAssignment> {
    read_splits(open(path)?)
}

pub fn write_split_file(split: &SplitAssignment, manifest: &[ClipManifestEntry], path: &Path) -> Result<()> {
    write_splits(split, manifest, create(path)?)
}

/// Everything a training or evaluation run needs, with features extracted.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub taxonomy: Vec<TaxonRecord>,
    pub manifest: Vec<ClipManifestEntry>,
    pub traits: TraitTable,
    pub split: SplitAssignment,
    pub train_entries: Vec<ClipManifestEntry>,
    pub train_views: ClipViews,
    /// Centre-crop features of the training clips (probe fitting).
    pub train_clips: Vec<EvalClip>,
    pub test_clips: Vec<EvalClip>,
    pub test_species: Vec<TaxonRecord>,
}

impl Dataset {
    pub fn assemble<S: WaveSource + ?Sized>(
        taxonomy: Vec<TaxonRecord>,
        manifest: Vec<ClipManifestEntry>,
        traits: TraitTable,
        split: SplitAssignment,
        source: &S,
        front_end: &FrontEndConfig,
        seed: u64,
    ) -> Result<Self> {
        let in_split = |s: Split| -> Vec<&ClipManifestEntry> {
            manifest
                .iter()
                .filter(|e| split.assignments.get(&e.clip_id) == Some(&s))
                .collect()
        };
        let train_refs = in_split(Split::Train);
        let test_refs = in_split(Split::Test);
        let train_views = extract_train_views(&train_refs, source, front_end, seed)?;
        let train_clips = extract_eval_clips(&train_refs, source, front_end)?;
        let test_clips = extract_eval_clips(&test_refs, source, front_end)?;
        let test_species = taxonomy
            .iter()
            .filter(|r| split.test_species.contains(&r.species_id))
            .cloned()
            .collect();
        let train_entries = train_refs.into_iter().cloned().collect();
        Ok(Dataset {
            taxonomy,
            manifest,
            traits,
            split,
            train_entries,
            train_views,
            train_clips,
            test_clips,
            test_species,
        })
    }

    /// Generates the synthetic corpus of `cfg` in memory and splits it.
    pub fn synthetic(cfg: &RunConfig) -> Result<Self> {
        let cfg = cfg.clone().resolved();
        let corpus = generate_corpus(&cfg.synth)?;
        let split = checked_splits(&corpus.manifest, &corpus.taxonomy, &cfg.split, cfg.seed)?;
        Dataset::assemble(
            corpus.taxonomy.clone(),
            corpus.manifest.clone(),
            corpus.traits.clone(),
            split,
            &corpus,
            &cfg.front_end,
            cfg.seed,
        )
    }

    pub fn train(&self, cfg: &TrainConfig) -> Result<TrainOutcome> {
        train(cfg, &self.train_entries, &self.train_views, &self.taxonomy)
    }

    pub fn zero_shot(
        &self,
        params: &EncoderParams,
        template: PromptTemplate,
        text_cfg: &TextFeatConfig,
    ) -> Result<Vec<RankedPrediction>> {
        if self.test_clips.is_empty() {
            return Err(Error::Invalid("test split is empty".into()));
        }
        zero_shot_classify(params, &self.test_clips, &self.test_species, template, text_cfg)
    }

    pub fn zero_shot_scores(
        &self,
        params: &EncoderParams,
        templates: &[PromptTemplate],
        text_cfg: &TextFeatConfig,
    ) -> Result<BTreeMap<String, ZeroShotScores>> {
        templates
            .iter()
            .map(|&t| {
                let preds = self.zero_shot(params, t, text_cfg)?;
                Ok((t.name().to_string(), ZeroShotScores::from_predictions(&preds)?))
            })
            .collect()
    }

    pub fn hierarchy(
        &self,
        params: &EncoderParams,
        template: PromptTemplate,
        text_cfg: &TextFeatConfig,
    ) -> Result<HierarchyReport> {
        hierarchy_error_analysis(&self.zero_shot(params, template, text_cfg)?, &self.taxonomy)
    }

    /// Fits one probe per trait head on training clips and scores it on the
    /// test clips. Heads that cannot be fitted are listed in the notes.
    pub fn probe_scores(
        &self,
        params: &EncoderParams,
        cfg: &ProbeConfig,
    ) -> Result<(BTreeMap<String, f64>, Vec<String>)> {
        let mut scores = BTreeMap::new();
        let mut notes = Vec::new();
        for (h, head) in TRAIT_HEADS.iter().enumerate() {
            let (x, y) = embed_with_labels(params, &self.train_clips, &self.traits, h)?;
            let probe = match fit_probe_on_embeddings(head.name, head.kind, &x, &y, cfg) {
                Ok(p) => p,
                Err(Error::Invalid(msg)) if matches!(head.kind, TraitKind::Categorical(_)) => {
                    notes.push(format!("{}: skipped, {msg}", head.name));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (tx, ty) = embed_with_labels(params, &self.test_clips, &self.traits, h)?;
            let pred: Vec<usize> = tx.iter().map(|v| probe.predict(v)).collect();
            if f1_is_degenerate(&pred, &ty, head.kind) {
                notes.push(format!(
                    "{}: no positive labels or predictions on test clips, F1 = 0 by convention",
                    head.name
                ));
            }
            scores.insert(head.name.to_string(), trait_f1(&pred, &ty, head.kind)?);
        }
        Ok((scores, notes))
    }
}

/// Full in-memory run: zero-shot on every configured template and the
/// rank analysis, as written by `eval`.
pub fn evaluate(
    data: &Dataset,
    params: &EncoderParams,
    cfg: &RunConfig,
) -> Result<MetricsReport> {
    let mut report = MetricsReport {
        seed: cfg.seed,
        ..MetricsReport::default()
    };
    report.zero_shot = data.zero_shot_scores(params, &cfg.eval.templates, &cfg.train.text)?;
    report.set_hierarchy(&data.hierarchy(params, cfg.eval.hierarchy_template, &cfg.train.text)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::text_features;
    use crate::taxonomy::render_prompt;
    use std::collections::HashSet;

    #[test]
    fn sci_prompt_features_are_distinct_on_default_corpus() {
        let corpus = generate_corpus(&SynthSpec::default()).unwrap();
        let cfg = TextFeatConfig::default();
        let mut seen = HashSet::new();
        for r in &corpus.taxonomy {
            let f = text_features(&render_prompt(r, PromptTemplate::Sci), &cfg).unwrap();
            let key: Vec<(usize, u64)> = f.entries().iter().map(|&(i, v)| (i, v.to_bits())).collect();
            assert!(seen.insert(key), "collision for {}", r.scientific_name);
        }
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let cfg = RunConfig::desk();
        let toml_text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_str_with_format(&toml_text, true).unwrap(), cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_str_with_format(&json, false).unwrap(), cfg);
        let partial = RunConfig::from_str_with_format("seed = 7\n[train]\nepochs = 3\n", true).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, 32);
    }

    #[test]
    fn views_are_seeded_per_clip() {
        let corpus = generate_corpus(&SynthSpec::default()).unwrap();
        let fe = FrontEndConfig::desk();
        let entries: Vec<&ClipManifestEntry> = corpus.manifest.iter().take(3).collect();
        let a = extract_train_views(&entries, &corpus, &fe, 1).unwrap();
        let b = extract_train_views(&entries, &corpus, &fe, 1).unwrap();
        assert_eq!(a, b);
        let v = &a[&entries[0].clip_id];
        assert_eq!(v.len(), fe.train_views);
        assert_eq!(v[0].len(), 128);
        assert_ne!(v[0], v[1]);
    }
}
