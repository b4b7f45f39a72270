//! Randomised checks of clip-order and logit-shift invariance of video
//! aggregation.

use r3d_core::evaluator::aggregate_clip_logits;
use r3d_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct TrialReport {
    pub trials: usize,
    pub permutation_failures: usize,
    pub shift_failures: usize,
}

/// Each trial draws 1..=12 clips of 2..=10 classes, then compares the
/// aggregate against a shuffled copy (bit-exact scores, same class) and a
/// copy with a constant added to every logit (same class, scores within 1e-5).
pub fn aggregation_trials(trials: usize, seed: u64) -> TrialReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TrialReport { trials, permutation_failures: 0, shift_failures: 0 };
    for t in 0..trials {
        let n = rng.random_range(1..=12);
        let k = rng.random_range(2..=10);
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-5.0f32..5.0)).collect()).collect();
        let base = aggregate_clip_logits("v", &tensor(&rows)).unwrap();

        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        let p = aggregate_clip_logits("v", &tensor(&shuffled)).unwrap();
        let same_scores = p.scores.iter().zip(&base.scores).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same_scores || p.predicted != base.predicted {
            report.permutation_failures += 1;
        }

        let c = rng.random_range(-20.0f32..20.0);
        let shifted: Vec<Vec<f32>> = rows.iter().map(|r| r.iter().map(|x| x + c).collect()).collect();
        let s = aggregate_clip_logits("v", &tensor(&shifted)).unwrap();
        let close = s.scores.iter().zip(&base.scores).all(|(a, b)| (a - b).abs() < 1e-5);
        let margin = top_margin(&base.scores);
        // a shift can only flip a near-tie, which rounding decides either way
        if !close || (s.predicted != base.predicted && margin > 1e-5) {
            report.shift_failures += 1;
            eprintln!("shift trial {t}: {:?} vs {:?}", s.scores, base.scores);
        }
    }
    report
}

fn top_margin(scores: &[f64]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s[0] - s[1]
}

fn tensor(rows: &[Vec<f32>]) -> Tensor<f32> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}
