#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ran::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

/// AP and mAP from the definition: each positive contributes the precision at
/// its own rank, with ties ranked by ascending index.
pub fn brute_force_ap(scores: &[f64], classes: usize, truth: &[usize]) -> (Vec<Option<f64>>, f64) {
    let n = truth.len();
    let mut aps = Vec::new();
    for g in 0..classes {
        let col: Vec<f64> = (0..n).map(|i| scores[i * classes + g]).collect();
        let beats = |j: usize, i: usize| col[j] > col[i] || (col[j] == col[i] && j < i);
        let positives: Vec<usize> = (0..n).filter(|&i| truth[i] == g).collect();
        if positives.is_empty() {
            aps.push(None);
            continue;
        }
        // Terms are summed in ascending rank so the float result is canonical.
        let mut terms: Vec<(usize, f64)> = positives
            .iter()
            .map(|&i| {
                let rank = 1 + (0..n).filter(|&j| beats(j, i)).count();
                let pos_above = 1 + positives.iter().filter(|&&j| beats(j, i)).count();
                (rank, pos_above as f64 / rank as f64)
            })
            .collect();
        terms.sort_by_key(|t| t.0);
        let sum = terms.iter().fold(0.0, |acc, t| acc + t.1);
        aps.push(Some(sum / positives.len() as f64));
    }
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = present.iter().sum::<f64>() / present.len() as f64;
    (aps, map)
}
