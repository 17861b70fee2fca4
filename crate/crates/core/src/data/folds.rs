//! Subject-level, class-stratified k-fold splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LesionClass};
use crate::error::{Error, Result};

/// `folds[i]` holds the subject ids of test fold `i`, sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<u32>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, subject: u32) -> Option<usize> {
        self.folds.iter().position(|f| f.binary_search(&subject).is_ok())
    }

    fn check(&self, fold: usize) -> Result<()> {
        if fold >= self.k() {
            return Err(Error::Config(format!("fold {fold} out of range (k = {})", self.k())));
        }
        Ok(())
    }

    /// Sample indices whose subject lies in `fold`.
    pub fn test_indices(&self, dataset: &Dataset, fold: usize) -> Result<Vec<usize>> {
        self.check(fold)?;
        let f = &self.folds[fold];
        Ok(dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| f.binary_search(&s.subject_id).is_ok())
            .map(|(i, _)| i)
            .collect())
    }

    /// Complement of [`FoldSplit::test_indices`].
    pub fn train_indices(&self, dataset: &Dataset, fold: usize) -> Result<Vec<usize>> {
        self.check(fold)?;
        let f = &self.folds[fold];
        Ok(dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| f.binary_search(&s.subject_id).is_err())
            .map(|(i, _)| i)
            .collect())
    }
}

/// Splits subjects into `k` folds. Subjects are grouped by their dominant
/// slice class, shuffled with `seed`, and each goes to the fold currently
/// holding the fewest slices of that class (then fewest slices overall).
pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    // subject -> (slice count per class slot, total slices); slot 3 = healthy
    let mut subjects: BTreeMap<u32, [usize; 4]> = BTreeMap::new();
    for s in &dataset.samples {
        let slot = s.lesion_class.map_or(3, |c| c as usize);
        subjects.entry(s.subject_id).or_default()[slot] += 1;
    }
    if subjects.len() < k {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    let mut by_class: [Vec<(u32, usize)>; 4] = Default::default();
    for (&id, counts) in &subjects {
        // first maximum wins, so lesion classes beat healthy on ties
        let slot = (0..4).rev().max_by_key(|&c| counts[c]).expect("non-empty");
        by_class[slot].push((id, counts.iter().sum()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = vec![[0usize; 4]; k];
    let mut totals = vec![0usize; k];
    let mut folds = vec![Vec::new(); k];
    for (slot, group) in by_class.iter_mut().enumerate() {
        group.shuffle(&mut rng);
        group.sort_by_key(|&(_, n)| std::cmp::Reverse(n));
        for &(id, n) in group.iter() {
            let f = (0..k)
                .min_by_key(|&f| (per_class[f][slot], totals[f]))
                .expect("k >= 2");
            per_class[f][slot] += n;
            totals[f] += n;
            folds[f].push(id);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSplit { folds })
}

/// Fraction of slices per class slot (cyst, hemangioma, metastasis, healthy).
pub fn class_proportions<'a>(samples: impl IntoIterator<Item = &'a super::Sample>) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for s in samples {
        counts[s.lesion_class.map_or(3, |c: LesionClass| c as usize)] += 1;
    }
    let total: usize = counts.iter().sum();
    counts.map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, DatasetKind, SynthSpec};

    fn tiny(c: usize, h: usize, m: usize, healthy: usize, per_subject: usize) -> Dataset {
        let spec = SynthSpec {
            image_size: 32,
            slices_per_subject: per_subject,
            ..SynthSpec::counts(c, h, m, healthy)
        };
        synth_generate(&spec, DatasetKind::Target).unwrap()
    }

    #[test]
    fn nine_subjects_give_folds_of_three() {
        let ds = tiny(3, 2, 2, 2, 1);
        let split = make_folds(&ds, 3, 11).unwrap();
        assert!(split.folds.iter().all(|f| f.len() == 3), "{:?}", split.folds);
    }

    #[test]
    fn folds_partition_subjects_and_indices() {
        let ds = tiny(5, 4, 6, 3, 2);
        let split = make_folds(&ds, 3, 3).unwrap();
        let mut all: Vec<u32> = split.folds.concat();
        all.sort_unstable();
        assert_eq!(all, ds.subjects());
        for f in 0..3 {
            let mut idx = split.test_indices(&ds, f).unwrap();
            idx.extend(split.train_indices(&ds, f).unwrap());
            idx.sort_unstable();
            assert_eq!(idx, (0..ds.len()).collect::<Vec<_>>());
        }
        assert!(split.test_indices(&ds, 3).is_err());
    }

    #[test]
    fn per_fold_class_proportions_track_global() {
        let ds = synth_generate(&SynthSpec::default(), DatasetKind::Target).unwrap();
        let global = class_proportions(&ds.samples);
        for seed in 0..5 {
            let split = make_folds(&ds, 3, seed).unwrap();
            for f in 0..3 {
                let idx = split.test_indices(&ds, f).unwrap();
                let p = class_proportions(idx.iter().map(|&i| &ds.samples[i]));
                for c in 0..4 {
                    assert!((p[c] - global[c]).abs() <= 0.10, "seed {seed} fold {f}: {p:?} vs {global:?}");
                }
            }
        }
    }

    #[test]
    fn deterministic_and_rejects_too_few_subjects() {
        let ds = tiny(2, 2, 2, 2, 1);
        assert_eq!(make_folds(&ds, 3, 5).unwrap(), make_folds(&ds, 3, 5).unwrap());
        assert!(make_folds(&tiny(1, 1, 0, 0, 1), 3, 0).is_err());
        assert!(make_folds(&ds, 1, 0).is_err());
    }
}
