//! Audio front end: resampling, cropping and pooled log-mel features.
//!
//! The feature vector is `[means ‖ stds]` of the per-frame log-mel energies,
//! so its length is `2 * n_mels` independent of clip duration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty waveform".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Linear-interpolation resampling to `target_rate_hz`.
pub fn resample(w: &Waveform, target_rate_hz: u32) -> Waveform {
    if target_rate_hz == w.sample_rate_hz {
        return w.clone();
    }
    let n_in = w.samples.len();
    let ratio = target_rate_hz as f64 / w.sample_rate_hz as f64;
    let n_out = ((n_in as f64 * ratio).round() as usize).max(1);
    let step = w.sample_rate_hz as f64 / target_rate_hz as f64;
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let left = pos.floor() as usize;
            if left + 1 >= n_in {
                return w.samples[n_in - 1];
            }
            let frac = pos - left as f64;
            w.samples[left] * (1.0 - frac) + w.samples[left + 1] * frac
        })
        .collect();
    Waveform {
        samples,
        sample_rate_hz: target_rate_hz,
    }
}

fn crop_len(w: &Waveform, duration_s: f64) -> usize {
    ((duration_s * w.sample_rate_hz as f64).round() as usize).max(1)
}

/// `duration_s` of audio starting at sample `start`; zero-padded at the end
/// when the input runs out.
pub fn crop_at(w: &Waveform, start: usize, duration_s: f64) -> Waveform {
    let n = crop_len(w, duration_s);
    let mut samples: Vec<f64> = w.samples.iter().skip(start).take(n).copied().collect();
    samples.resize(n, 0.0);
    Waveform {
        samples,
        sample_rate_hz: w.sample_rate_hz,
    }
}

/// Contiguous crop with a uniformly drawn start offset.
pub fn random_crop<R: Rng + ?Sized>(w: &Waveform, duration_s: f64, rng: &mut R) -> Waveform {
    let n = crop_len(w, duration_s);
    let start = if w.samples.len() > n {
        rng.gen_range(0..=w.samples.len() - n)
    } else {
        0
    };
    crop_at(w, start, duration_s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    /// `None` means Nyquist.
    pub fmax_hz: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_fft: 1024,
            hop: 512,
            n_mels: 64,
            fmin_hz: 50.0,
            fmax_hz: None,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn feature_len(&self) -> usize {
        2 * self.n_mels
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank over the `n_fft / 2 + 1` rfft bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// Per band: first nonzero bin and the weights from there on.
    bands: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig, sample_rate_hz: u32) -> Result<Self> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        let fmax = cfg.fmax_hz.unwrap_or(nyquist);
        if !(cfg.fmin_hz > 0.0 && cfg.fmin_hz < fmax && fmax <= nyquist) {
            return Err(Error::Invalid(format!(
                "mel range requires 0 < fmin < fmax <= {nyquist}, got {} .. {fmax}",
                cfg.fmin_hz
            )));
        }
        if cfg.n_mels < 2 {
            return Err(Error::Invalid("n_mels must be at least 2".into()));
        }
        if cfg.n_fft < 2 || cfg.hop == 0 {
            return Err(Error::Invalid("n_fft >= 2 and hop >= 1 required".into()));
        }
        let (mel_lo, mel_hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let n_bins = cfg.n_fft / 2 + 1;
        let bin_hz = sample_rate_hz as f64 / cfg.n_fft as f64;
        let bands = (0..cfg.n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let row: Vec<f64> = (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let rising = (f - left) / (center - left);
                        let falling = (right - f) / (right - center);
                        rising.min(falling).max(0.0)
                    })
                    .collect();
                let lo = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let hi = row.iter().rposition(|&w| w > 0.0).map_or(lo, |i| i + 1);
                (lo, row[lo..hi].to_vec())
            })
            .collect();
        Ok(MelFilterbank {
            bands,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
        })
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply<'a>(&'a self, power: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        self.bands
            .iter()
            .map(move |(lo, row)| row.iter().zip(&power[*lo..]).map(|(w, p)| w * p).sum())
    }
}

/// Reusable log-mel extractor for one sample rate.
pub struct LogMelExtractor {
    cfg: MelConfig,
    sample_rate_hz: u32,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMelExtractor {
    pub fn new(cfg: &MelConfig, sample_rate_hz: u32) -> Result<Self> {
        let filterbank = MelFilterbank::new(cfg, sample_rate_hz)?;
        let n = cfg.n_fft;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(LogMelExtractor {
            cfg: cfg.clone(),
            sample_rate_hz,
            window,
            filterbank,
            fft,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Per-frame log-mel energies, frame-major.
    pub fn frames(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        if w.sample_rate_hz != self.sample_rate_hz {
            return Err(Error::Invalid(format!(
                "extractor built for {} Hz, waveform is {} Hz",
                self.sample_rate_hz, w.sample_rate_hz
            )));
        }
        let n = self.cfg.n_fft;
        if w.samples.len() < n {
            return Err(Error::Invalid(format!(
                "waveform has {} samples, need at least n_fft = {n}",
                w.samples.len()
            )));
        }
        let n_frames = 1 + (w.samples.len() - n) / self.cfg.hop;
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n / 2 + 1];
        let mut out = Vec::with_capacity(n_frames);
        for frame in 0..n_frames {
            let start = frame * self.cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(w.samples[start + i] * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            out.push(
                self.filterbank
                    .apply(&power)
                    .map(|e| (e + self.cfg.log_floor).ln())
                    .collect(),
            );
        }
        Ok(out)
    }

    pub fn features(&self, w: &Waveform) -> Result<Vec<f64>> {
        let frames = self.frames(w)?;
        let n_mels = self.cfg.n_mels;
        let count = frames.len() as f64;
        let mut means = vec![0.0; n_mels];
        for frame in &frames {
            for (m, v) in means.iter_mut().zip(frame) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= count);
        let mut stds = vec![0.0; n_mels];
        for frame in &frames {
            for ((s, v), m) in stds.iter_mut().zip(frame).zip(&means) {
                *s += (v - m).powi(2);
            }
        }
        stds.iter_mut().for_each(|s| *s = (*s / count).sqrt());
        means.extend(stds);
        Ok(means)
    }
}

/// Pooled log-mel features of length `2 * cfg.n_mels`.
pub fn log_mel_features(w: &Waveform, cfg: &MelConfig) -> Result<Vec<f64>> {
    LogMelExtractor::new(cfg, w.sample_rate_hz)?.features(w)
}

/// Reads a mono WAV (integer or float PCM), scaled to [-1, 1].
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
    };
    // downmix
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono; samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Feature rows keyed by clip id. On disk: little-endian f64 rows in
/// `<stem>.bin` plus a `row,clip_id` sidecar in `<stem>.csv`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureCache {
    pub dim: usize,
    pub clip_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureCache {
    pub fn get(&self, clip_id: &str) -> Option<&[f64]> {
        self.clip_ids
            .iter()
            .position(|c| c == clip_id)
            .map(|i| self.rows[i].as_slice())
    }

    pub fn to_map(&self) -> std::collections::HashMap<String, Vec<f64>> {
        self.clip_ids
            .iter()
            .cloned()
            .zip(self.rows.iter().cloned())
            .collect()
    }

    pub fn write(&self, bin_path: &Path, index_path: &Path) -> Result<()> {
        let mut bin = BufWriter::new(File::create(bin_path)?);
        for row in &self.rows {
            if row.len() != self.dim {
                return Err(Error::Dimension {
                    what: "feature row",
                    expected: self.dim,
                    actual: row.len(),
                });
            }
            for v in row {
                bin.write_all(&v.to_le_bytes())?;
            }
        }
        bin.flush()?;
        let mut index = csv::Writer::from_path(index_path)?;
        index.write_record(["row", "clip_id"])?;
        for (i, id) in self.clip_ids.iter().enumerate() {
            index.write_record([i.to_string().as_str(), id])?;
        }
        index.flush()?;
        Ok(())
    }

    pub fn read(bin_path: &Path, index_path: &Path) -> Result<Self> {
        let mut index = csv::Reader::from_path(index_path)?;
        let mut clip_ids = Vec::new();
        for (i, rec) in index.records().enumerate() {
            let rec = rec?;
            let line = i as u64 + 2;
            let row: usize = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse("feature index", line, "bad row number"))?;
            if row != i {
                return Err(Error::parse("feature index", line, "rows out of order"));
            }
            clip_ids.push(
                rec.get(1)
                    .ok_or_else(|| Error::parse("feature index", line, "missing clip_id"))?
                    .to_string(),
            );
        }
        let mut bytes = Vec::new();
        BufReader::new(File::open(bin_path)?).read_to_end(&mut bytes)?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if clip_ids.is_empty() {
            return Ok(FeatureCache::default());
        }
        if bytes.len() % 8 != 0 || values.len() % clip_ids.len() != 0 {
            return Err(Error::Invalid(format!(
                "feature cache holds {} bytes for {} rows",
                bytes.len(),
                clip_ids.len()
            )));
        }
        let dim = values.len() / clip_ids.len();
        Ok(FeatureCache {
            dim,
            rows: values.chunks(dim).map(<[f64]>::to_vec).collect(),
            clip_ids,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sine(freq: f64, rate: u32, seconds: f64, amp: f64) -> Waveform {
        let n = (rate as f64 * seconds) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn resample_identity_and_constant() {
        let w = sine(300.0, 8000, 0.1, 1.0);
        assert_eq!(resample(&w, 8000), w);
        let c = Waveform::new(vec![0.25; 1000], 16000).unwrap();
        for rate in [8000, 22050, 48000] {
            let r = resample(&c, rate);
            assert_eq!(r.sample_rate_hz, rate);
            assert_eq!(r.samples.len(), (1000.0 * rate as f64 / 16000.0).round() as usize);
            assert!(r.samples.iter().all(|&s| (s - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn resample_preserves_tone_frequency() {
        let w = resample(&sine(440.0, 24000, 2.0, 1.0), 48000);
        // count upward zero crossings
        let crossings = w
            .samples
            .windows(2)
            .filter(|p| p[0] < 0.0 && p[1] >= 0.0)
            .count();
        let freq = crossings as f64 / w.duration_s();
        assert!((freq - 440.0).abs() <= 1.0, "{freq}");
    }

    #[test]
    fn crop_pads_short_and_keeps_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let short = Waveform::new(vec![1.0; 50], 10).unwrap();
        let c = random_crop(&short, 10.0, &mut rng);
        assert_eq!(c.samples.len(), 100);
        assert!(c.samples[..50].iter().all(|&s| s == 1.0));
        assert!(c.samples[50..].iter().all(|&s| s == 0.0));

        let exact = Waveform::new((0..100).map(f64::from).collect(), 10).unwrap();
        assert_eq!(random_crop(&exact, 10.0, &mut rng), exact);
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // ramp input: the first cropped sample is the offset
        let rate = 100;
        let w = Waveform::new((0..30 * rate).map(|i| i as f64).collect(), rate).unwrap();
        let max_start = (20 * rate) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut starts: Vec<f64> = (0..1000)
            .map(|_| random_crop(&w, 10.0, &mut rng).samples[0] / max_start)
            .collect();
        starts.sort_by(f64::total_cmp);
        let n = starts.len() as f64;
        let d = starts
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max);
        // KS critical value at alpha = 0.01
        assert!(d < 1.63 / n.sqrt(), "KS D = {d}");
    }

    #[test]
    fn silence_gives_floor_means_and_zero_stds() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let f = log_mel_features(&w, &cfg).unwrap();
        assert_eq!(f.len(), 128);
        for m in &f[..64] {
            assert!((m - 1e-10f64.ln()).abs() < 1e-12);
        }
        assert!(f[64..].iter().all(|&s| s.abs() < 1e-12));
    }

    #[test]
    fn tone_peaks_at_nearest_mel_center() {
        let cfg = MelConfig::default();
        let f = log_mel_features(&sine(1000.0, 16000, 1.0, 0.5), &cfg).unwrap();
        let argmax = (0..64).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
        // centers recomputed from the HTK formula
        let lo = 2595.0 * (1.0 + 50.0 / 700.0f64).log10();
        let hi = 2595.0 * (1.0 + 8000.0 / 700.0f64).log10();
        let nearest = (0..64)
            .min_by(|&a, &b| {
                let c = |m: usize| {
                    let mel = lo + (hi - lo) * (m + 1) as f64 / 65.0;
                    (700.0 * (10f64.powf(mel / 2595.0) - 1.0) - 1000.0).abs()
                };
                c(a).total_cmp(&c(b))
            })
            .unwrap();
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn doubling_amplitude_shifts_means_by_ln4() {
        let cfg = MelConfig::default();
        let a = log_mel_features(&sine(1000.0, 16000, 1.0, 0.25), &cfg).unwrap();
        let b = log_mel_features(&sine(1000.0, 16000, 1.0, 0.5), &cfg).unwrap();
        let peak = (0..64).max_by(|&i, &j| a[i].total_cmp(&a[j])).unwrap();
        // bins where the tone dominates the log floor
        let dominated: Vec<usize> = (0..64).filter(|&m| a[m] > a[peak] - 20.0).collect();
        assert!(dominated.contains(&peak));
        for m in dominated {
            assert!((b[m] - a[m] - 4f64.ln()).abs() < 1e-6, "bin {m}: {} {}", a[m], b[m]);
            assert!((b[64 + m] - a[64 + m]).abs() < 1e-6);
        }
    }

    #[test]
    fn hop_shift_of_periodic_signal_is_invariant() {
        let cfg = MelConfig::default();
        // 500 Hz at 16 kHz: period 32 samples divides hop 512
        let long = sine(500.0, 16000, 1.5, 0.5);
        let a = Waveform::new(long.samples[..16000].to_vec(), 16000).unwrap();
        let b = Waveform::new(long.samples[512..16512].to_vec(), 16000).unwrap();
        let (fa, fb) = (
            log_mel_features(&a, &cfg).unwrap(),
            log_mel_features(&b, &cfg).unwrap(),
        );
        for (x, y) in fa.iter().zip(&fb) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn too_short_input_is_rejected() {
        let w = Waveform::new(vec![0.1; 100], 16000).unwrap();
        assert!(log_mel_features(&w, &MelConfig::default()).is_err());
    }

    #[test]
    fn bad_mel_range_is_rejected() {
        let cfg = MelConfig {
            fmin_hz: 9000.0,
            ..MelConfig::default()
        };
        assert!(MelFilterbank::new(&cfg, 16000).is_err());
    }

    proptest::proptest! {
        #[test]
        fn features_are_finite_with_fixed_length(
            samples in proptest::collection::vec(-1.0f64..1.0, 1024..4000),
        ) {
            let w = Waveform::new(samples, 16000).unwrap();
            let f = log_mel_features(&w, &MelConfig::default()).unwrap();
            proptest::prop_assert_eq!(f.len(), 128);
            proptest::prop_assert!(f.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn wav_and_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = sine(440.0, 16000, 0.1, 0.5);
        let path = dir.path().join("a.wav");
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz, 16000);
        for (x, y) in w.samples.iter().zip(&back.samples) {
            assert!((x - y).abs() < 1e-4);
        }

        let cache = FeatureCache {
            dim: 3,
            clip_ids: vec!["a".into(), "b".into()],
            rows: vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 1e-300]],
        };
        let (bin, idx) = (dir.path().join("f.bin"), dir.path().join("f.csv"));
        cache.write(&bin, &idx).unwrap();
        assert_eq!(FeatureCache::read(&bin, &idx).unwrap(), cache);
    }
}
