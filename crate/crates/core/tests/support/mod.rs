//! Reference implementations shared by integration tests.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Straight threshold sweep: every distinct score is tried against every
/// score, no sorting tricks. Returns `(eer, auc, fmr100, fmr10)`.
pub fn brute_force_metrics(genuine: &[f64], impostor: &[f64]) -> (f64, f64, f64, f64) {
    let mut thresholds: Vec<f64> = Vec::new();
    for &s in genuine.iter().chain(impostor) {
        if !thresholds.contains(&s) {
            thresholds.push(s);
        }
    }
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.push(f64::INFINITY);

    let mut curve = Vec::new();
    for &t in &thresholds {
        let false_matches = impostor.iter().filter(|&&s| s >= t).count();
        let false_non_matches = genuine.iter().filter(|&&s| s < t).count();
        curve.push((
            false_matches as f64 / impostor.len() as f64,
            false_non_matches as f64 / genuine.len() as f64,
        ));
    }

    let mut eer = f64::NAN;
    for j in 1..curve.len() {
        let (fmr0, fnmr0) = curve[j - 1];
        let (fmr1, fnmr1) = curve[j];
        if fnmr0 < fmr0 && fnmr1 >= fmr1 {
            // FMR and FNMR are both linear along the segment; solve for equality.
            let w = (fmr0 - fnmr0) / ((fmr0 - fnmr0) - (fmr1 - fnmr1));
            eer = fmr0 + w * (fmr1 - fmr0);
            break;
        }
    }

    let mut auc = 0.0;
    for j in 1..curve.len() {
        let width = curve[j - 1].0 - curve[j].0;
        auc += width * (2.0 - curve[j - 1].1 - curve[j].1) / 2.0;
    }

    let best_at = |limit: f64| {
        let mut best = 1.0f64;
        for &(fmr, fnmr) in &curve {
            if fmr <= limit && fnmr < best {
                best = fnmr;
            }
        }
        best
    };
    (eer, auc, best_at(0.01), best_at(0.10))
}

/// Overlapping Gaussian genuine/impostor scores with sizes in 10..=500.
/// Every third set is rounded to two decimals to force ties.
pub fn random_score_set(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ng = 10 + (rand::Rng::random_range(&mut rng, 0..=490usize));
    let ni = 10 + (rand::Rng::random_range(&mut rng, 0..=490usize));
    let g = Normal::new(0.35, 0.2).unwrap();
    let i = Normal::new(0.0, 0.2).unwrap();
    let round = seed.is_multiple_of(3);
    let mut draw = |d: &Normal<f64>, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v: f64 = d.sample(&mut rng);
                if round {
                    (v * 100.0).round() / 100.0
                } else {
                    v
                }
            })
            .collect()
    };
    let genuine = draw(&g, ng);
    let impostor = draw(&i, ni);
    (genuine, impostor)
}
