//! Per-client fold assignment and the train/validation/test rotation.
//!
//! Records of each client are dealt into `n_folds` sets at random; a
//! rotation then marks 2 sets as test, 1 as validation and the remaining 7
//! as training (proportions scale for other fold counts).

use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::ClientDataset;

/// Stream tag for fold shuffling.
pub const STREAM_FOLDS: u64 = 0x21;

#[derive(Debug, Clone)]
pub struct FoldAssignment {
    pub n_folds: usize,
    /// Per client: the fold id of every record.
    pub fold_of: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train: Vec<ClientDataset>,
    pub val: Vec<ClientDataset>,
    pub test: Vec<ClientDataset>,
}

pub fn split_folds(data: &[ClientDataset], n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 3 {
        return Err(Error::Config("n_folds must be >= 3".into()));
    }
    let fold_of = data
        .iter()
        .map(|ds| {
            if ds.len() < n_folds {
                return Err(Error::Config(format!(
                    "client {} has {} records, fewer than {} folds",
                    ds.client_id,
                    ds.len(),
                    n_folds
                )));
            }
            let mut rng = Rng::with_stream(seed, &[STREAM_FOLDS, ds.client_id as u64]);
            let mut order: Vec<usize> = (0..ds.len()).collect();
            rng.shuffle(&mut order);
            let mut fold = vec![0usize; ds.len()];
            for (pos, &rec) in order.iter().enumerate() {
                fold[rec] = pos % n_folds;
            }
            Ok(fold)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldAssignment { n_folds, fold_of })
}

/// Fold ids playing each role for a rotation: test folds are
/// `{r, r+1}`, validation `{r+2}` (mod F, counts scaled to F).
pub fn rotation_roles(n_folds: usize, rotation: usize) -> (Vec<usize>, Vec<usize>) {
    let n_test = ((n_folds as f64 * 0.2).round() as usize).max(1);
    let n_val = ((n_folds as f64 * 0.1).round() as usize).max(1);
    let test: Vec<usize> = (0..n_test).map(|i| (rotation + i) % n_folds).collect();
    let val: Vec<usize> = (0..n_val).map(|i| (rotation + n_test + i) % n_folds).collect();
    (test, val)
}

/// Original-row index triples (train, val, test) per client for a rotation.
pub fn rotation_indices(
    assignment: &FoldAssignment,
    rotation: usize,
) -> Result<Vec<(Vec<usize>, Vec<usize>, Vec<usize>)>> {
    let (test_folds, val_folds) = rotation_roles(assignment.n_folds, rotation);
    if test_folds.len() + val_folds.len() >= assignment.n_folds {
        return Err(Error::Config(format!(
            "{} folds leave no training folds",
            assignment.n_folds
        )));
    }
    Ok(assignment
        .fold_of
        .iter()
        .map(|folds| {
            let mut train = Vec::new();
            let mut val = Vec::new();
            let mut test = Vec::new();
            for (i, f) in folds.iter().enumerate() {
                if test_folds.contains(f) {
                    test.push(i);
                } else if val_folds.contains(f) {
                    val.push(i);
                } else {
                    train.push(i);
                }
            }
            (train, val, test)
        })
        .collect())
}

/// Materializes the train/validation/test datasets of one rotation.
pub fn apply_rotation(
    data: &[ClientDataset],
    assignment: &FoldAssignment,
    rotation: usize,
) -> Result<FoldSplit> {
    if assignment.fold_of.len() != data.len() {
        return Err(Error::Contract(
            "fold assignment does not match the dataset".into(),
        ));
    }
    let indices = rotation_indices(assignment, rotation)?;
    let mut train = Vec::with_capacity(data.len());
    let mut val = Vec::with_capacity(data.len());
    let mut test = Vec::with_capacity(data.len());
    for (ds, (train_idx, val_idx, test_idx)) in data.iter().zip(&indices) {
        train.push(ds.subset(train_idx));
        val.push(ds.subset(val_idx));
        test.push(ds.subset(test_idx));
    }
    Ok(FoldSplit { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic, SyntheticConfig, SyntheticOptions};

    fn sample(n_per_client: usize, seed: u64) -> Vec<ClientDataset> {
        let opts = SyntheticOptions {
            n_clients: 2,
            n_per_client,
            d_x: 3,
            seed,
            ..SyntheticOptions::default()
        };
        generate_synthetic(&SyntheticConfig::draw(&opts).unwrap()).unwrap()
    }

    #[test]
    fn ten_records_ten_folds_one_each() {
        let data = sample(10, 1);
        let a = split_folds(&data, 10, 7).unwrap();
        for folds in &a.fold_of {
            let mut counts = vec![0usize; 10];
            for &f in folds {
                counts[f] += 1;
            }
            assert!(counts.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn same_seed_same_assignment() {
        let data = sample(57, 2);
        let a = split_folds(&data, 10, 99).unwrap();
        let b = split_folds(&data, 10, 99).unwrap();
        assert_eq!(a.fold_of, b.fold_of);
        let c = split_folds(&data, 10, 100).unwrap();
        assert_ne!(a.fold_of, c.fold_of);
    }

    #[test]
    fn folds_partition_the_index_set() {
        let data = sample(41, 3);
        let a = split_folds(&data, 10, 5).unwrap();
        let split = apply_rotation(&data, &a, 4).unwrap();
        for (i, ds) in data.iter().enumerate() {
            let total = split.train[i].len() + split.val[i].len() + split.test[i].len();
            assert_eq!(total, ds.len());
        }
        // 7/1/2 proportions at 10 folds
        let (test_folds, val_folds) = rotation_roles(10, 4);
        assert_eq!(test_folds.len(), 2);
        assert_eq!(val_folds.len(), 1);
    }

    #[test]
    fn too_small_client_is_rejected() {
        let data = sample(5, 4);
        assert!(split_folds(&data, 10, 1).is_err());
    }

    #[test]
    fn rotations_cover_distinct_tests() {
        let data = sample(30, 5);
        let a = split_folds(&data, 10, 11).unwrap();
        let s0 = apply_rotation(&data, &a, 0).unwrap();
        let s5 = apply_rotation(&data, &a, 5).unwrap();
        assert_ne!(s0.test[0].y, s5.test[0].y);
    }
}
