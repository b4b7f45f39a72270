mod support;

use r3d_core::datapipe::{AugmentConfig, DatasetManifest, Split};
use r3d_core::evaluator::*;
use r3d_core::{assemble_network, ArchitectureSpec, Result, Tensor};
use support::fixtures::{dataset, miniature_augment};

fn logits(rows: &[&[f32]]) -> Tensor<f32> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

/// Logits whose softmax is exactly `p` up to rounding.
fn from_probs(rows: &[[f32; 2]]) -> Tensor<f32> {
    let rows: Vec<[f32; 2]> = rows.iter().map(|r| r.map(f32::ln)).collect();
    let refs: Vec<&[f32]> = rows.iter().map(|r| &r[..]).collect();
    logits(&refs)
}

#[test]
fn three_clip_example_averages_to_a_tie() {
    let p = aggregate_clip_logits("v", &from_probs(&[[0.8, 0.2], [0.6, 0.4], [0.1, 0.9]])).unwrap();
    assert!(p.scores.iter().all(|s| (s - 0.5).abs() < 1e-6), "{:?}", p.scores);
    assert_eq!(p.clip_scores.len(), 3);
    assert_eq!(p.predicted, 0, "{:?}", p.scores);
    // mirrored clips give a bit-exact tie, which goes to the lower index
    let exact = aggregate_clip_logits("v", &logits(&[&[1.0, -2.0], &[-2.0, 1.0]])).unwrap();
    assert_eq!(exact.scores[0], exact.scores[1]);
    assert_eq!(exact.predicted, 0);
}

#[test]
fn scores_form_a_simplex() {
    let p = aggregate_clip_logits("v", &logits(&[&[3.0, -1.0, 0.5], &[0.0, 0.0, 9.0], &[-4.0, 2.0, 2.0]])).unwrap();
    assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(p.scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
    for row in &p.clip_scores {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn aggregation_invariants_over_1000_trials() {
    let r = support::invariants::aggregation_trials(1000, 0);
    assert_eq!((r.permutation_failures, r.shift_failures), (0, 0));
}

struct Constant(usize);

impl ClipScorer for Constant {
    fn score_clips(&self, clips: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(Tensor::zeros(&[clips.shape()[0], self.0]))
    }
}

/// Wraps a scorer and adds `shift` to every logit.
struct Shifted<'a, S>(&'a S, f32);

impl<S: ClipScorer> ClipScorer for Shifted<'_, S> {
    fn score_clips(&self, clips: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut out = self.0.score_clips(clips)?;
        out.data_mut().iter_mut().for_each(|x| *x += self.1);
        Ok(out)
    }
}

fn setup(dir: &std::path::Path) -> (DatasetManifest, r3d_core::Network<f32>) {
    let m = dataset(dir, 3, 4, 20, [32, 40]);
    let mut net = assemble_network::<f32>(&ArchitectureSpec::preset("miniature", 3).unwrap(), 0).unwrap();
    net.randomize_head(0.5, 1);
    (m, net)
}

#[test]
fn constant_scorer_scores_one_over_k() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = setup(dir.path());
    let r = evaluate_dataset(&Constant(3), "const", &m, Split::Test, &miniature_augment()).unwrap();
    assert!((r.video_accuracy - 1.0 / 3.0).abs() < 1e-12);
    assert!(r.predictions.iter().all(|p| p.predicted == 0));
    assert_eq!(r.confusion.iter().map(|row| row[0]).sum::<usize>(), r.num_videos);
}

#[test]
fn predict_video_ignores_logit_shift() {
    let dir = tempfile::tempdir().unwrap();
    let (m, net) = setup(dir.path());
    let aug = miniature_augment();
    let mean = m.channel_mean.unwrap();
    for v in &m.videos {
        let base = predict_video(&net, &m, v, &aug, &mean).unwrap();
        assert_eq!(base.clip_scores.len(), 3);
        for c in [-7.0, 0.25, 11.0] {
            let s = predict_video(&Shifted(&net, c), &m, v, &aug, &mean).unwrap();
            assert_eq!(s.predicted, base.predicted);
            assert!(s.scores.iter().zip(&base.scores).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }
}

#[test]
fn dataset_report_is_consistent_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (m, net) = setup(dir.path());
    let aug = miniature_augment();
    let a = evaluate_dataset(&net, "miniature", &m, Split::Test, &aug).unwrap();
    let b = evaluate_dataset(&net, "miniature", &m, Split::Test, &aug).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.num_videos, m.split_videos(Split::Test).len());
    assert_eq!(a.num_clips, 3 * a.num_videos);
    assert!((0.0..=1.0).contains(&a.video_accuracy) && (0.0..=1.0).contains(&a.clip_accuracy));
    assert_eq!(a.confusion.iter().flatten().sum::<usize>(), a.num_videos);
    let diag: usize = (0..3).map(|i| a.confusion[i][i]).sum();
    assert_eq!(diag as f64 / a.num_videos as f64, a.video_accuracy);

    let wrong_k = evaluate_dataset(&Constant(4), "x", &m, Split::Test, &aug);
    assert!(wrong_k.is_err());
    let short = AugmentConfig { clip_len: 4, ..aug };
    assert!(evaluate_dataset(&net, "x", &m, Split::Test, &short).is_err());
}

#[test]
fn results_table_shapes() {
    let rows = [
        TableRow { architecture: "resnet-18".into(), accuracy: 0.96 },
        TableRow { architecture: "resnet-34".into(), accuracy: 0.94 },
        TableRow { architecture: "densenet-201".into(), accuracy: 0.97 },
    ];
    let md = emit_results_table(&rows, TableFormat::Markdown).unwrap();
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines[0], "| Architecture | Accuracy |");
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[2], "| resnet-18 | 96.0% |");
    assert_eq!(lines[4], "| **densenet-201** | **97.0%** |");
    let csv = emit_results_table(&rows, TableFormat::Csv).unwrap();
    assert_eq!(parse_results_csv(&csv).unwrap(), rows);
    assert!(emit_results_table(&[TableRow { architecture: "a,b".into(), accuracy: 0.5 }], TableFormat::Csv).is_err());
    assert!(emit_results_table(&[TableRow { architecture: "a".into(), accuracy: 1.5 }], TableFormat::Csv).is_err());
}
