use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, IngestError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<AnnotatedImage>,
    pub eval: Vec<AnnotatedImage>,
    pub ratio: f64,
    pub seed: u64,
}

/// Number of training samples: `ratio * n` rounded half-up.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 0.5).floor() as usize
}

/// Shuffles with a ChaCha8 stream seeded by `seed`, then takes the first
/// `round(ratio * n)` images for training.
pub fn split_dataset(images: &[AnnotatedImage], ratio: f64, seed: u64) -> Result<DatasetSplit, IngestError> {
    if images.len() < 2 {
        return Err(IngestError::Validation(format!(
            "need at least 2 images to split, got {}",
            images.len()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(IngestError::Validation(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = train_count(images.len(), ratio);
    let pick = |idx: &[usize]| idx.iter().map(|&i| images[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: pick(&order[..k]),
        eval: pick(&order[k..]),
        ratio,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn images(n: usize) -> Vec<AnnotatedImage> {
        (0..n)
            .map(|i| AnnotatedImage {
                filename: format!("{i:04}.png"),
                width: 8,
                height: 8,
                boxes: vec![],
            })
            .collect()
    }

    #[test]
    fn eighty_percent_of_ten() {
        let s = split_dataset(&images(10), 0.8, 7).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (8, 2));
    }

    #[test]
    fn five_rounds_to_four() {
        let s = split_dataset(&images(5), 0.8, 7).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (4, 1));
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(train_count(5, 0.5), 3);
        assert_eq!(train_count(3, 0.5), 2);
    }

    #[test]
    fn deterministic_per_seed() {
        let imgs = images(30);
        assert_eq!(split_dataset(&imgs, 0.8, 1).unwrap(), split_dataset(&imgs, 0.8, 1).unwrap());
        assert_ne!(
            split_dataset(&imgs, 0.8, 1).unwrap().train,
            split_dataset(&imgs, 0.8, 2).unwrap().train
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(split_dataset(&images(1), 0.8, 0).is_err());
        assert!(split_dataset(&images(4), 1.0, 0).is_err());
        assert!(split_dataset(&images(4), 0.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_exhaustive(n in 2usize..60, seed in any::<u64>(), ratio in 0.01f64..0.99) {
            let imgs = images(n);
            let s = split_dataset(&imgs, ratio, seed).unwrap();
            let mut names: Vec<_> = s.train.iter().chain(&s.eval).map(|i| i.filename.clone()).collect();
            prop_assert_eq!(s.train.len(), train_count(n, ratio));
            names.sort();
            let expected: Vec<_> = imgs.iter().map(|i| i.filename.clone()).collect();
            prop_assert_eq!(names, expected);
        }
    }
}
