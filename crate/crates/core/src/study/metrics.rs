//! Error-rate metrics.

use crate::error::{PalError, Result};

/// Levenshtein distance with unit insertion, deletion and substitution.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate in percent: 100 · Σ distance / Σ |ref|. A reference
/// of length zero adds its hypothesis length to the errors and nothing to
/// the denominator; with no reference tokens at all any error is infinite.
pub fn cer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(PalError::Contract(format!(
            "cer: {} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let errors: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h)).sum();
    let total: usize = refs.iter().map(Vec::len).sum();
    Ok(match (errors, total) {
        (0, _) => 0.0,
        (_, 0) => f64::INFINITY,
        (e, n) => 100.0 * e as f64 / n as f64,
    })
}

/// Median of a nonempty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Seed;
    use rand::Rng as _;
    use std::collections::HashSet;

    /// Smallest number of single-symbol edits turning `a` into `b`, found by
    /// breadth-first search over edit scripts.
    fn edit_search(a: &[u8], b: &[u8], max_depth: usize) -> Option<usize> {
        let alphabet: HashSet<u8> = a.iter().chain(b).copied().collect();
        let mut frontier: HashSet<Vec<u8>> = HashSet::from([a.to_vec()]);
        let mut seen = frontier.clone();
        for depth in 0..=max_depth {
            if frontier.contains(b) {
                return Some(depth);
            }
            let mut next = HashSet::new();
            for s in &frontier {
                for i in 0..=s.len() {
                    for &c in &alphabet {
                        let mut ins = s.clone();
                        ins.insert(i, c);
                        next.insert(ins);
                        if i < s.len() {
                            let mut sub = s.clone();
                            sub[i] = c;
                            next.insert(sub);
                        }
                    }
                    if i < s.len() {
                        let mut del = s.clone();
                        del.remove(i);
                        next.insert(del);
                    }
                }
            }
            next.retain(|s| seen.insert(s.clone()));
            frontier = next;
        }
        None
    }

    #[test]
    fn distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance::<u8>(&[], &[4, 5, 6, 7]), 4);
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
        assert_eq!(edit_search(b"kitten", b"sitting", 4), Some(3));
    }

    #[test]
    fn distance_matches_search_on_short_strings() {
        let mut rng = Seed(1).rng();
        for _ in 0..30 {
            let a: Vec<u8> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<u8> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..3)).collect();
            assert_eq!(Some(edit_distance(&a, &b)), edit_search(&a, &b, 4), "{a:?} {b:?}");
        }
    }

    #[test]
    fn distance_is_a_metric() {
        let mut rng = Seed(2).rng();
        let word = |rng: &mut crate::rng::Rng| -> Vec<u8> { (0..rng.gen_range(0..9)).map(|_| rng.gen_range(0..4)).collect() };
        for _ in 0..200 {
            let (a, b, c) = (word(&mut rng), word(&mut rng), word(&mut rng));
            assert_eq!(edit_distance(&a, &a), 0);
            assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }
    }

    #[test]
    fn cer_examples() {
        let r = vec![vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10]];
        assert_eq!(cer(&r, &r).unwrap(), 0.0);
        let mut h = r.clone();
        h[0][4] = 11;
        assert_eq!(cer(&r, &h).unwrap(), 10.0);

        let refs = vec![vec![1, 2, 3, 4], vec![1, 2, 3, 4, 5, 6]];
        let hyps = vec![vec![1, 2, 4], vec![1, 9, 3, 4, 5]];
        assert_eq!(edit_distance(&refs[0], &hyps[0]) + edit_distance(&refs[1], &hyps[1]), 3);
        assert_eq!(cer(&refs, &hyps).unwrap(), 30.0);

        assert_eq!(cer(&[vec![], vec![1, 2]], &[vec![3], vec![1, 2]]).unwrap(), 50.0);
        assert!(matches!(cer(&refs, &hyps[..1]), Err(PalError::Contract(_))));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
