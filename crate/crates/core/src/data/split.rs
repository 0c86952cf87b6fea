use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Class, VolumetricScan};
use crate::error::{Error, Result};

/// Patient-level stratified split. Each class contributes
/// `round(n · fraction)` scans to validation; input order is preserved in
/// both halves.
pub fn split_train_validation(
    corpus: &[VolumetricScan],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<VolumetricScan>, Vec<VolumetricScan>)> {
    let held = stratified_indices(corpus, |s| s.meta.true_class, fraction, seed)?;
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (i, scan) in corpus.iter().enumerate() {
        if held[i] {
            validation.push(scan.clone());
        } else {
            train.push(scan.clone());
        }
    }
    Ok((train, validation))
}

/// Marks the items held out for validation.
pub(crate) fn stratified_indices<T>(
    items: &[T],
    class_of: impl Fn(&T) -> Class,
    fraction: f64,
    seed: u64,
) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("validation fraction {fraction} must lie in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; items.len()];
    for class in Class::ALL {
        let mut members: Vec<usize> = (0..items.len()).filter(|&i| class_of(&items[i]) == class).collect();
        match members.len() {
            0 => continue,
            1 => {
                return Err(Error::invalid(format!(
                    "class {class} has a single scan; at least 2 are needed to split"
                )))
            }
            _ => {}
        }
        members.shuffle(&mut rng);
        let k = (members.len() as f64 * fraction).round() as usize;
        for &i in &members[..k] {
            held[i] = true;
        }
    }
    Ok(held)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(counts: [usize; 3]) -> Vec<Class> {
        Class::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&c, n)| std::iter::repeat(c).take(n))
            .collect()
    }

    #[test]
    fn thirty_percent_of_ten_is_three_per_class() {
        let items = labels([10, 10, 10]);
        let held = stratified_indices(&items, |c| *c, 0.3, 1).unwrap();
        for class in Class::ALL {
            let k = items.iter().zip(&held).filter(|(c, &h)| **c == class && h).count();
            assert_eq!(k, 3);
        }
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let items = labels([50, 18, 22]);
        let a = stratified_indices(&items, |c| *c, 0.3, 9).unwrap();
        let b = stratified_indices(&items, |c| *c, 0.3, 9).unwrap();
        let c = stratified_indices(&items, |c| *c, 0.3, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for class in Class::ALL {
            let n = items.iter().filter(|c| **c == class).count();
            let k = items.iter().zip(&a).filter(|(c, &h)| **c == class && h).count();
            assert!((k as f64 - 0.3 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn singleton_class_is_rejected() {
        let err = stratified_indices(&labels([5, 1, 5]), |c| *c, 0.3, 1).unwrap_err();
        assert!(err.to_string().contains("CAP"));
        assert!(stratified_indices(&labels([5, 0, 5]), |c| *c, 0.3, 1).is_ok());
        assert!(stratified_indices(&labels([5, 5, 5]), |c| *c, 1.0, 1).is_err());
    }
}
