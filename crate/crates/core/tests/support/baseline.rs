//! Nearest-centroid classifier on per-video mean frames.

use r3d_core::datapipe::{DatasetManifest, Frame, Split};

fn mean_frame(m: &DatasetManifest, v: &r3d_core::datapipe::VideoEntry) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for i in 0..v.frame_count {
        let f = Frame::read(&m.frame_path(v, i)).unwrap();
        if acc.is_empty() {
            acc = vec![0.0; f.data.len()];
        }
        for (a, &x) in acc.iter_mut().zip(&f.data) {
            *a += x as f64;
        }
    }
    acc.iter().map(|a| a / v.frame_count as f64).collect()
}

/// Test-split accuracy of assigning each video to the class whose mean
/// train frame is closest in squared distance.
pub fn nearest_centroid_accuracy(m: &DatasetManifest) -> f64 {
    let k = m.num_classes();
    let mut centroids: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut counts = vec![0usize; k];
    for v in m.split_videos(Split::Train) {
        let f = mean_frame(m, v);
        let c = &mut centroids[v.label];
        if c.is_empty() {
            *c = vec![0.0; f.len()];
        }
        c.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        counts[v.label] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|a| *a /= n as f64);
    }
    let test = m.split_videos(Split::Test);
    let correct = test
        .iter()
        .filter(|v| {
            let f = mean_frame(m, v);
            let dist = |c: &Vec<f64>| c.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == v.label
        })
        .count();
    correct as f64 / test.len() as f64
}
