use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ImageRecord, ManifestError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchEntry {
    pub image_id: String,
    pub label: usize,
}

/// One epoch worth of class-balanced batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<BatchEntry>>,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
}

/// Round-robin over classes with a cursor that carries across batches, so
/// every batch has per-class counts within one of each other and the extra
/// slots rotate between classes. Within a class, images are drawn uniformly
/// with replacement. Unlabeled records are ignored.
pub fn balanced_batches(
    records: &[&ImageRecord],
    labels: &[String],
    batch_size: usize,
    batches_per_epoch: usize,
    seed: u64,
) -> Result<BatchPlan, ManifestError> {
    if batch_size == 0 {
        return Err(ManifestError::BadParam("batch_size must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); labels.len()];
    for r in records {
        if let Some(l) = r.label {
            by_class[l].push(&r.image_id);
        }
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(ManifestError::EmptyClass(labels[c].clone()));
    }

    let n_classes = by_class.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cursor = 0usize;
    let mut batches = Vec::with_capacity(batches_per_epoch);
    for _ in 0..batches_per_epoch {
        let mut batch: Vec<BatchEntry> = (0..batch_size)
            .map(|_| {
                let class = cursor % n_classes;
                cursor += 1;
                let pool = &by_class[class];
                BatchEntry {
                    image_id: pool[rng.random_range(0..pool.len())].to_string(),
                    label: class,
                }
            })
            .collect();
        batch.shuffle(&mut rng);
        batches.push(batch);
    }
    Ok(BatchPlan {
        batches,
        batch_size,
        batches_per_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(counts: &[usize]) -> Vec<ImageRecord> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| {
                (0..n).map(move |j| ImageRecord {
                    image_id: format!("c{c}_{j}"),
                    path: format!("c{c}_{j}.png"),
                    label: Some(c),
                    group_id: format!("c{c}_{j}"),
                    width: None,
                    height: None,
                })
            })
            .collect()
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    fn per_batch_counts(plan: &BatchPlan, n: usize) -> Vec<Vec<usize>> {
        plan.batches
            .iter()
            .map(|b| {
                let mut c = vec![0; n];
                for e in b {
                    c[e.label] += 1;
                }
                c
            })
            .collect()
    }

    #[test]
    fn two_classes_split_evenly() {
        let rs = records(&[50, 3]);
        let refs: Vec<&ImageRecord> = rs.iter().collect();
        let plan = balanced_batches(&refs, &labels(2), 16, 20, 1).unwrap();
        for c in per_batch_counts(&plan, 2) {
            assert_eq!(c, vec![8, 8]);
        }
    }

    #[test]
    fn six_classes_of_sixteen() {
        let rs = records(&[40, 10, 5, 7, 3, 2]);
        let refs: Vec<&ImageRecord> = rs.iter().collect();
        let plan = balanced_batches(&refs, &labels(6), 16, 750, 4).unwrap();
        assert_eq!(plan.batches.len(), 750);
        for c in per_batch_counts(&plan, 6) {
            let mut sorted = c.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![2, 2, 3, 3, 3, 3]);
        }
    }

    #[test]
    fn singleton_class_repeats() {
        let rs = records(&[100, 30, 1]);
        let refs: Vec<&ImageRecord> = rs.iter().collect();
        let plan = balanced_batches(&refs, &labels(3), 16, 750, 11).unwrap();
        let hits = plan
            .batches
            .iter()
            .flatten()
            .filter(|e| e.image_id == "c2_0")
            .count();
        assert!(hits >= 750 * (16 / 3));
    }

    #[test]
    fn empty_class_is_named() {
        let rs = records(&[5, 0, 2]);
        let refs: Vec<&ImageRecord> = rs.iter().collect();
        match balanced_batches(&refs, &labels(3), 8, 2, 0) {
            Err(ManifestError::EmptyClass(c)) => assert_eq!(c, "class1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deterministic() {
        let rs = records(&[9, 4, 6]);
        let refs: Vec<&ImageRecord> = rs.iter().collect();
        let a = balanced_batches(&refs, &labels(3), 7, 30, 123).unwrap();
        let b = balanced_batches(&refs, &labels(3), 7, 30, 123).unwrap();
        assert_eq!(a, b);
    }
}
