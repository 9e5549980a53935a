use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index sets of one cross-validation fold. Each set is sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fraction of the non-test samples of each fold held out for validation.
pub const VAL_FRACTION_DENOM: usize = 5;

/// Stratified k-fold partition.
///
/// Samples of each class are shuffled and dealt round-robin onto the k test
/// folds, with the dealing position carried over from one class to the
/// next so fold sizes differ by at most one. Within a fold the remaining
/// samples are walked in the same class-grouped shuffled order and every
/// fifth one goes to validation (an 80/20 train/validation split). Without
/// labels all samples count as one class.
pub fn kfold_split(
    num_samples: usize,
    k: usize,
    seed: u64,
    stratify_labels: Option<&[usize]>,
) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Contract(format!("k-fold needs k >= 2, got {k}")));
    }
    if num_samples < k {
        return Err(Error::Contract(format!(
            "k-fold needs at least k={k} samples, got {num_samples}"
        )));
    }
    let labels: Vec<usize> = match stratify_labels {
        Some(l) if l.len() != num_samples => {
            return Err(Error::Contract(format!(
                "{} labels for {num_samples} samples",
                l.len()
            )))
        }
        Some(l) => l.to_vec(),
        None => vec![0; num_samples],
    };
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, members) in by_class.iter_mut().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::Stratification {
                class,
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
    }
    let order: Vec<usize> = by_class.into_iter().flatten().collect();
    let fold_of: Vec<(usize, usize)> = order.iter().enumerate().map(|(t, &i)| (i, t % k)).collect();

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let mut test = Vec::new();
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut t = 0;
        for &(i, fold) in &fold_of {
            if fold == f {
                test.push(i);
                continue;
            }
            if t % VAL_FRACTION_DENOM == VAL_FRACTION_DENOM - 1 {
                val.push(i);
            } else {
                train.push(i);
            }
            t += 1;
        }
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        folds.push(Fold { train, val, test });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_hundred_by_ten() {
        let labels: Vec<usize> = (0..400).map(|i| i / 100).collect();
        let folds = kfold_split(400, 10, 82, Some(&labels)).unwrap();
        for f in &folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (288, 72, 40));
        }
    }

    #[test]
    fn rejects_bad_k_and_thin_classes() {
        assert!(kfold_split(10, 1, 0, None).is_err());
        assert!(kfold_split(3, 4, 0, None).is_err());
        let labels = [0, 0, 0, 1, 1, 1, 1, 1];
        assert!(matches!(
            kfold_split(8, 4, 0, Some(&labels)),
            Err(Error::Stratification { class: 0, count: 3, k: 4 })
        ));
    }
}
