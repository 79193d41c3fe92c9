//! Seeded, epoch-reshuffled training batches.
//!
//! Each item pairs one (object, expression) sample with freshly drawn
//! cross-image negatives and same-image calibration negatives. Items carry
//! no ground-truth masks or boxes by construction. Negative draws depend
//! only on `(seed, epoch, record, expression)`, never on shuffle order.

use rand::seq::SliceRandom;

use super::Dataset;
use crate::calibration::{sample_same_image_negatives, SameImageNegatives};
use crate::error::Result;
use crate::params::rng_for;
use crate::response::sample_negatives;

/// One training sample; no ground-truth fields exist on this type.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub record_idx: usize,
    pub expression_idx: usize,
    pub image_id: String,
    pub object_id: u32,
    pub positive: String,
    pub negatives: Vec<String>,
    pub negatives_replaced: bool,
    pub same_image: SameImageNegatives,
}

impl TrainItem {
    /// Identifier used in diagnostics (e.g. the non-finite-loss abort).
    pub fn sample_id(&self) -> String {
        format!("{}/{}#{}", self.image_id, self.object_id, self.expression_idx)
    }
}

/// Materialize the shuffled batches of one epoch.
pub fn epoch_batches(
    dataset: &Dataset,
    batch_size: usize,
    n_negatives: usize,
    k_calibration: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<TrainItem>>> {
    let mut order = dataset.expression_refs();
    let mut shuffle_rng = rng_for(seed, &format!("shuffle.{epoch}"));
    order.shuffle(&mut shuffle_rng);

    let mut items = Vec::with_capacity(order.len());
    for (rec_idx, expr_idx) in order {
        let rec = dataset.record(rec_idx);
        let mut neg_rng = rng_for(seed, &format!("neg.{epoch}.{rec_idx}.{expr_idx}"));
        let (neg_refs, negatives_replaced) = if n_negatives > 0 {
            sample_negatives(dataset, &rec.image_id, n_negatives, &mut neg_rng)?
        } else {
            (Vec::new(), false)
        };
        let negatives = neg_refs
            .into_iter()
            .map(|(r, e)| dataset.record(r).expressions[e].clone())
            .collect();
        let mut cal_rng = rng_for(seed, &format!("cal.{epoch}.{rec_idx}.{expr_idx}"));
        let same_image = sample_same_image_negatives(
            dataset,
            &rec.image_id,
            rec.object_id,
            k_calibration,
            &mut cal_rng,
        )?;
        items.push(TrainItem {
            record_idx: rec_idx,
            expression_idx: expr_idx,
            image_id: rec.image_id.clone(),
            object_id: rec.object_id,
            positive: rec.expressions[expr_idx].clone(),
            negatives,
            negatives_replaced,
            same_image,
        });
    }

    Ok(items
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_dataset, SyntheticSceneSpec};

    fn dataset(n: usize) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&SyntheticSceneSpec::default(), &[("train", n)], dir.path()).unwrap();
        let ds = Dataset::load(dir.path(), "train").unwrap();
        (dir, ds)
    }

    #[test]
    fn batches_cover_every_expression_once() {
        let (_dir, ds) = dataset(6);
        let batches = epoch_batches(&ds, 4, 3, 2, 0, 0).unwrap();
        let total: usize = batches.iter().map(|b| b.len()).sum();
        assert_eq!(total, ds.expression_refs().len());
        let mut seen: Vec<(usize, usize)> = batches
            .iter()
            .flatten()
            .map(|i| (i.record_idx, i.expression_idx))
            .collect();
        seen.sort_unstable();
        let mut expected = ds.expression_refs();
        expected.sort_unstable();
        assert_eq!(seen, expected);
        for item in batches.iter().flatten() {
            assert_eq!(item.negatives.len(), 3);
            assert_eq!(item.same_image.queries.len(), 2);
        }
    }

    #[test]
    fn same_seed_gives_identical_epochs() {
        let (_dir, ds) = dataset(5);
        let a = epoch_batches(&ds, 4, 3, 2, 7, 1).unwrap();
        let b = epoch_batches(&ds, 4, 3, 2, 7, 1).unwrap();
        let flat = |bs: &Vec<Vec<TrainItem>>| {
            bs.iter()
                .flatten()
                .map(|i| (i.sample_id(), i.negatives.clone(), i.same_image.queries.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
    }

    #[test]
    fn different_epochs_reshuffle() {
        let (_dir, ds) = dataset(8);
        let a = epoch_batches(&ds, 64, 2, 1, 7, 0).unwrap();
        let b = epoch_batches(&ds, 64, 2, 1, 7, 1).unwrap();
        let ids = |bs: &Vec<Vec<TrainItem>>| {
            bs.iter().flatten().map(|i| i.sample_id()).collect::<Vec<_>>()
        };
        assert_ne!(ids(&a), ids(&b));
    }

    #[test]
    fn two_image_dataset_with_one_negative_works() {
        let (_dir, ds) = dataset(2);
        let batches = epoch_batches(&ds, 2, 1, 1, 0, 0).unwrap();
        for item in batches.iter().flatten() {
            assert_eq!(item.negatives.len(), 1);
        }
    }

    #[test]
    fn zero_negatives_ablation_yields_empty_lists() {
        let (_dir, ds) = dataset(3);
        let batches = epoch_batches(&ds, 4, 0, 1, 0, 0).unwrap();
        for item in batches.iter().flatten() {
            assert!(item.negatives.is_empty());
        }
    }
}
