use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::ClipManifestEntry;
use crate::error::{Error, Result};

/// One species-balanced pass: `clips_per_species` clip ids per species.
///
/// Species with enough clips are subsampled without replacement. Species
/// with fewer contribute every clip once and fill the remainder with
/// replacement. `species` lists the species that must appear; each needs at
/// least one clip in `train`.
pub fn balanced_epoch<R: Rng + ?Sized>(
    train: &[ClipManifestEntry],
    species: &[String],
    clips_per_species: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    if clips_per_species == 0 {
        return Err(Error::Invalid("clips_per_species must be >= 1".into()));
    }
    let mut by_species: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in species {
        by_species.insert(s, Vec::new());
    }
    for e in train {
        if let Some(v) = by_species.get_mut(e.species_id.as_str()) {
            v.push(&e.clip_id);
        }
    }
    let mut epoch = Vec::with_capacity(species.len() * clips_per_species);
    for (s, clips) in &by_species {
        if clips.is_empty() {
            return Err(Error::Invalid(format!("species `{s}` has no training clips")));
        }
        if clips.len() >= clips_per_species {
            for i in index::sample(rng, clips.len(), clips_per_species) {
                epoch.push(clips[i].to_string());
            }
        } else {
            epoch.extend(clips.iter().map(|c| c.to_string()));
            for _ in clips.len()..clips_per_species {
                epoch.push(clips[rng.gen_range(0..clips.len())].to_string());
            }
        }
    }
    epoch.shuffle(rng);
    Ok(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ClipSource, Grade};
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn clips(counts: &[usize]) -> (Vec<ClipManifestEntry>, Vec<String>) {
        let mut out = Vec::new();
        let mut species = Vec::new();
        for (i, &n) in counts.iter().enumerate() {
            let s = format!("sp{i}");
            for j in 0..n {
                out.push(ClipManifestEntry {
                    clip_id: format!("{s}_{j}"),
                    species_id: s.clone(),
                    path: String::new(),
                    date: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
                    duration_s: 1.0,
                    grade: Grade::Research,
                    source: ClipSource::Synthetic,
                });
            }
            species.push(s);
        }
        (out, species)
    }

    fn tally(epoch: &[String]) -> HashMap<String, usize> {
        let mut t = HashMap::new();
        for c in epoch {
            *t.entry(c.clone()).or_default() += 1;
        }
        t
    }

    #[test]
    fn ten_species_give_three_hundred() {
        let (m, s) = clips(&[40, 3, 30, 31, 1, 7, 100, 2, 15, 29]);
        let e = balanced_epoch(&m, &s, 30, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(e.len(), 300);
    }

    #[test]
    fn one_per_species_is_a_permutation() {
        let (m, s) = clips(&[1; 12]);
        let e = balanced_epoch(&m, &s, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut sorted = e.clone();
        sorted.sort();
        let mut expected: Vec<String> = m.iter().map(|c| c.clip_id.clone()).collect();
        expected.sort();
        assert_eq!(sorted, expected);
    }

    #[test]
    fn scarce_species_uses_every_clip() {
        let (m, s) = clips(&[2, 50]);
        let e = balanced_epoch(&m, &s, 30, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let t = tally(&e);
        assert!(t["sp0_0"] >= 1 && t["sp0_1"] >= 1);
        assert_eq!(t["sp0_0"] + t["sp0_1"], 30);
        // without replacement for the abundant species
        assert!(t.iter().filter(|(k, _)| k.starts_with("sp1_")).all(|(_, &v)| v == 1));
    }

    #[test]
    fn species_without_clips_is_an_error() {
        let (m, mut s) = clips(&[3]);
        s.push("ghost".into());
        assert!(balanced_epoch(&m, &s, 30, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #[test]
        fn histogram_is_flat(
            counts in proptest::collection::vec(1usize..60, 1..12),
            k in 1usize..40,
            seed in any::<u64>(),
        ) {
            let (m, s) = clips(&counts);
            let e = balanced_epoch(&m, &s, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut per_species: HashMap<&str, usize> = HashMap::new();
            for c in &e {
                *per_species.entry(c.split('_').next().unwrap()).or_default() += 1;
            }
            prop_assert_eq!(per_species.len(), counts.len());
            prop_assert!(per_species.values().all(|&n| n == k));
        }
    }
}
