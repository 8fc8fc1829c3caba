use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::TaskDataset;
use crate::error::{Error, Result};

/// A permutation of `0..n` that depends only on `(seed, stream)`.
pub fn batch_order(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Stream id for the shuffle of `epoch` within `task`.
pub fn epoch_stream(task: usize, epoch: usize) -> u64 {
    ((task as u64) << 32) | epoch as u64
}

/// Consecutive chunks of at most `size` indices.
pub fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size.max(1))
}

/// Disjoint labeled/unlabeled index sets over the training split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemiSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Picks `labeled` training samples, cycling over classes so per-class
/// counts differ by at most one while every class has samples left.
pub fn split_semi_supervised(ds: &TaskDataset, labeled: usize, seed: u64) -> Result<SemiSplit> {
    let labels = ds
        .train_labels()
        .ok_or_else(|| Error::contract(format!("task {} has no labels to split", ds.name())))?;
    if labeled > labels.len() {
        return Err(Error::contract(format!(
            "cannot label {labeled} of {} samples",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for c in &mut by_class {
        c.shuffle(&mut rng);
        c.reverse();
    }
    let mut chosen = Vec::with_capacity(labeled);
    'fill: loop {
        let mut progressed = false;
        for c in by_class.iter_mut() {
            if chosen.len() == labeled {
                break 'fill;
            }
            if let Some(i) = c.pop() {
                chosen.push(i);
                progressed = true;
            }
        }
        if !progressed || chosen.len() == labeled {
            break;
        }
    }
    let mut is_labeled = vec![false; labels.len()];
    chosen.iter().for_each(|&i| is_labeled[i] = true);
    chosen.sort_unstable();
    let unlabeled = (0..labels.len()).filter(|&i| !is_labeled[i]).collect();
    Ok(SemiSplit {
        labeled: chosen,
        unlabeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synthesize, Generator, SynthSpec};

    #[test]
    fn order_is_a_pure_function_of_seed_and_stream() {
        assert_eq!(batch_order(50, 3, 7), batch_order(50, 3, 7));
        assert_ne!(batch_order(50, 3, 7), batch_order(50, 3, 8));
        let mut o = batch_order(50, 3, 7);
        o.sort_unstable();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn batches_cover_everything_once() {
        let o: Vec<usize> = (0..10).collect();
        let sizes: Vec<usize> = batches(&o, 4).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn split_degenerate_cases() {
        let ds = synthesize(&SynthSpec::new(Generator::Stripes, 1, 40, 4)).unwrap();
        let all = split_semi_supervised(&ds, 40, 0).unwrap();
        assert!(all.unlabeled.is_empty());
        let none = split_semi_supervised(&ds, 0, 0).unwrap();
        assert!(none.labeled.is_empty());
        assert_eq!(none.unlabeled.len(), 40);
        assert!(split_semi_supervised(&ds, 41, 0).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let ds = synthesize(&SynthSpec::new(Generator::Checkers, 5, 400, 4)).unwrap();
        let s = split_semi_supervised(&ds, 21, 9).unwrap();
        let mut counts = vec![0; ds.classes()];
        for &i in &s.labeled {
            counts[ds.train_labels().unwrap()[i]] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
        assert_eq!(s, split_semi_supervised(&ds, 21, 9).unwrap());
    }
}
