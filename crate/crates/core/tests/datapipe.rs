mod support;

use std::fs;
use std::path::Path;

use proptest::prelude::*;
use r3d_core::datapipe::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset(dir: &Path, classes: usize, per_class: usize, frames: usize) -> DatasetManifest {
    generate_synthetic_dataset(dir, &SyntheticConfig::new(classes, per_class, frames, [36, 48], 0)).unwrap()
}

#[test]
fn scale_set_golden_values() {
    let golden = [0.84089642, 0.70710678, 0.59460355, 0.5];
    for (k, (&s, &g)) in SCALES.iter().zip(&golden).enumerate() {
        assert!((s - g).abs() < 1e-8, "scale {k}: {s} vs {g}");
        assert!((s - 2f64.powf(-(k as f64 + 1.0) / 4.0)).abs() <= 2.0 * f64::EPSILON);
    }
    assert_eq!(AugmentConfig::default().crop_scales, SCALES);
}

#[test]
fn crop_examples() {
    let tl = crop_box(240, 320, CropPosition::TopLeft, 0.5).unwrap();
    assert_eq!((tl.top, tl.left, tl.side), (0, 0, 120));
    assert_eq!(crop_box(240, 320, CropPosition::TopLeft, SCALES[0]).unwrap().side, 202);
    let c = crop_box(240, 320, CropPosition::Center, 0.5).unwrap();
    assert_eq!((c.top, c.left, c.side), (60, 100, 120));
    let br = crop_box(240, 320, CropPosition::BottomRight, 0.5).unwrap();
    assert_eq!((br.top + br.side, br.left + br.side), (240, 320));
}

#[test]
fn looping_rule_for_short_and_long_videos() {
    for n in [1usize, 7, 10, 15, 16, 20, 48] {
        let max_start = n.saturating_sub(16);
        for seed in 0..200 {
            let idx = sample_training_clip(n, 16, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(idx.len(), 16);
            let start = idx[0];
            assert!(start <= max_start, "n={n} start={start}");
            for (j, &i) in idx.iter().enumerate() {
                assert_eq!(i, (start + j) % n, "n={n}");
            }
        }
        let windows = eval_clips(n, 16);
        assert_eq!(windows.len(), n.div_ceil(16), "n={n}");
        for (w, win) in windows.iter().enumerate() {
            let expect: Vec<usize> = (0..16).map(|j| (16 * w + j) % n).collect();
            assert_eq!(win, &expect, "n={n} window {w}");
        }
    }
    assert_eq!(sample_training_clip(10, 16, &mut ChaCha8Rng::seed_from_u64(3)), [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1, 2, 3, 4, 5]);
    assert_eq!(eval_clips(20, 16)[1], [16, 17, 18, 19, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]);
}

#[test]
fn eval_windows_tile_without_gaps() {
    for n in 1..100 {
        let flat: Vec<usize> = eval_clips(n, 16).concat();
        assert_eq!(&flat[..n], &(0..n).collect::<Vec<_>>()[..]);
    }
}

#[test]
fn start_positions_are_uniform() {
    let bins = 85;
    let samples = 10_000;
    let mut counts = vec![0usize; bins];
    for i in 0..samples {
        counts[sample_training_clip(100, 16, &mut clip_rng(0, 0, i))[0]] += 1;
    }
    let expected = samples as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99th percentile of chi-square with 84 degrees of freedom
    assert!(chi2 < 117.0565, "chi2 = {chi2}");
}

#[test]
fn flip_frequency_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path(), 2, 1, 4);
    let cfg = AugmentConfig { clip_len: 2, output_size: 8, ..AugmentConfig::default() };
    let mean = m.channel_mean.unwrap();
    let mut flips = 0;
    for i in 0..10_000 {
        let (_, p) = training_clip(&m, &m.videos[0], &cfg, &mean, &mut clip_rng(1, 0, i)).unwrap();
        flips += usize::from(p.flipped);
        assert!(cfg.crop_scales.contains(&p.scale));
    }
    let f = flips as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&f), "flip frequency {f}");
}

#[test]
fn bilinear_examples() {
    let grid = resize_bilinear(&[0.0, 2.0, 4.0, 6.0], 2, 2, 4, 4);
    let expect = [0.0, 0.5, 1.5, 2.0, 1.0, 1.5, 2.5, 3.0, 3.0, 3.5, 4.5, 5.0, 4.0, 4.5, 5.5, 6.0];
    assert_eq!(grid, expect);

    let img: Vec<f32> = (0..112 * 112).map(|i| (i % 251) as f32 * 0.37).collect();
    assert_eq!(resize_bilinear(&img, 112, 112, 112, 112), img);
    assert!(resize_bilinear(&vec![7.0; 224 * 224], 224, 224, 112, 112).iter().all(|&v| v == 7.0));
}

#[test]
fn flip_and_mean_examples() {
    let mut p = vec![1.0, 2.0, 3.0, 4.0];
    flip_horizontal(&mut p, 2);
    assert_eq!(p, [2.0, 1.0, 4.0, 3.0]);
    flip_horizontal(&mut p, 2);
    assert_eq!(p, [1.0, 2.0, 3.0, 4.0]);

    let mut clip: Vec<f32> = (0..12).map(|i| i as f32).collect();
    let orig = clip.clone();
    mean_subtract(&mut clip, &[0.0; 3]);
    assert_eq!(clip, orig);
    let mut clip = [vec![10.0f32; 4], vec![20.0; 4], vec![30.0; 4]].concat();
    mean_subtract(&mut clip, &[10.0, 20.0, 30.0]);
    assert!(clip.iter().all(|&v| v == 0.0));
}

#[test]
fn channel_mean_examples() {
    let dir = tempfile::tempdir().unwrap();
    let write_video = |id: &str, values: &[[u8; 3]]| {
        let vdir = dir.path().join(id);
        fs::create_dir_all(&vdir).unwrap();
        for (i, v) in values.iter().enumerate() {
            Frame::new(2, 2, v.repeat(4)).unwrap().write(&vdir.join(frame_file_name(i))).unwrap();
        }
        VideoEntry { id: id.into(), uri: id.into(), frame_count: values.len(), frame_size: [2, 2], label: 0 }
    };
    let a = write_video("a", &[[128; 3], [128; 3]]);
    let b = write_video("b", &[[10; 3], [30; 3]]);
    let names = vec!["x".to_string(), "y".to_string()];
    for (v, expect) in [(a, 128.0), (b, 20.0)] {
        let splits = [(v.id.clone(), Split::Train)].into_iter().collect();
        let m = DatasetManifest::new(names.clone(), vec![v], splits, dir.path()).unwrap();
        assert_eq!(compute_channel_mean(&m, Split::Train).unwrap(), [expect; 3]);
    }
}

#[test]
fn synthetic_dataset_is_deterministic_and_split_60_40() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = small_dataset(d1.path(), 5, 10, 6);
    let m2 = small_dataset(d2.path(), 5, 10, 6);
    assert_eq!(m1.videos.len(), 50);
    assert_eq!(m1.split_videos(Split::Train).len(), 30);
    assert_eq!(m1.split_videos(Split::Test).len(), 20);
    for c in 0..5 {
        assert_eq!(m1.split_videos(Split::Train).iter().filter(|v| v.label == c).count(), 6);
    }
    assert_eq!(fs::read(d1.path().join(MANIFEST_FILE)).unwrap(), fs::read(d2.path().join(MANIFEST_FILE)).unwrap());
    for v in &m1.videos {
        for i in 0..v.frame_count {
            assert_eq!(fs::read(m1.frame_path(v, i)).unwrap(), fs::read(m2.frame_path(v, i)).unwrap());
        }
    }
}

#[test]
fn channel_mean_matches_naive_accumulation() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path(), 3, 5, 10);
    let mut sums = [0.0f64; 3];
    let mut n = 0.0;
    for v in m.split_videos(Split::Train) {
        for i in 0..v.frame_count {
            let f = Frame::read(&m.frame_path(v, i)).unwrap();
            for px in f.data.chunks(3) {
                for c in 0..3 {
                    sums[c] += px[c] as f64;
                }
                n += 1.0;
            }
        }
    }
    let mean = m.channel_mean.unwrap();
    let mut centred = [0.0f64; 3];
    for c in 0..3 {
        assert!((mean[c] - sums[c] / n).abs() < 1e-3);
    }
    for v in m.split_videos(Split::Train) {
        for i in 0..v.frame_count {
            let f = Frame::read(&m.frame_path(v, i)).unwrap();
            for (j, &x) in f.data.iter().enumerate() {
                centred[j % 3] += x as f64 - mean[j % 3];
            }
        }
    }
    for c in centred {
        assert!((c / n).abs() < 0.5, "{c}");
    }
}

#[test]
fn clip_tensors_are_byte_identical_across_runs_and_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_dataset(dir.path(), 2, 3, 20);
    let mean = m.channel_mean.unwrap();
    let cfg = AugmentConfig::default();
    let videos: Vec<&VideoEntry> = m.videos.iter().collect();
    let a = training_batch(&m, &videos, &cfg, &mean, 7, 3, 40).unwrap();
    let b = training_batch(&m, &videos, &cfg, &mean, 7, 3, 40).unwrap();
    assert_eq!(a.data.shape(), [6, 3, 16, 112, 112]);
    assert!(a.data.data().iter().zip(b.data.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.provenance, b.provenance);
    // serial reconstruction from the per-clip streams
    let per = a.data.len() / videos.len();
    for (k, v) in videos.iter().enumerate() {
        let (clip, p) = training_clip(&m, v, &cfg, &mean, &mut clip_rng(7, 3, 40 + k as u64)).unwrap();
        assert_eq!(p, a.provenance[k]);
        assert!(clip.iter().zip(&a.data.data()[k * per..(k + 1) * per]).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let c = training_batch(&m, &videos, &cfg, &mean, 8, 3, 40).unwrap();
    assert_ne!(a.provenance, c.provenance);
}

#[test]
fn clip_shape_is_fixed_for_any_video() {
    let dir = tempfile::tempdir().unwrap();
    for (frames, size) in [(3usize, [33usize, 61usize]), (17, [120, 90]), (48, [36, 48])] {
        let sub = dir.path().join(format!("d{frames}"));
        let m = generate_synthetic_dataset(&sub, &SyntheticConfig::new(2, 1, frames, size, 0)).unwrap();
        let mean = m.channel_mean.unwrap();
        let cfg = AugmentConfig::default();
        let eval = evaluation_clips(&m, &m.videos[0], &cfg, &mean).unwrap();
        assert_eq!(eval.shape(), [frames.div_ceil(16), 3, 16, 112, 112]);
        let (clip, _) = training_clip(&m, &m.videos[1], &cfg, &mean, &mut clip_rng(0, 0, 0)).unwrap();
        assert_eq!(clip.len(), 3 * 16 * 112 * 112);
    }
}

#[test]
fn nearest_centroid_on_mean_frames_is_imperfect() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_dataset(dir.path(), &SyntheticConfig::new(5, 10, 48, [48, 64], 0)).unwrap();
    let acc = support::baseline::nearest_centroid_accuracy(&m);
    assert!(acc < 1.0, "nearest-centroid accuracy {acc}");
}

proptest! {
    #[test]
    fn crops_stay_inside_the_frame(h in 32usize..400, w in 32usize..400, s in 0usize..4, p in 0usize..5) {
        let b = crop_box(h, w, CropPosition::ALL[p], SCALES[s]).unwrap();
        prop_assert_eq!(b.side, (SCALES[s] * h.min(w) as f64).round() as usize);
        prop_assert!(b.top + b.side <= h && b.left + b.side <= w);
    }

    #[test]
    fn training_indices_are_contiguous_modulo_length(n in 1usize..80, len in 1usize..24, seed in any::<u64>()) {
        let idx = sample_training_clip(n, len, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(idx.len(), len);
        prop_assert!(idx[0] <= n.saturating_sub(len));
        for w in idx.windows(2) {
            prop_assert_eq!(w[1], (w[0] + 1) % n);
        }
    }
}
