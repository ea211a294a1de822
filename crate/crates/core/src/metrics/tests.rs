use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn pattern(w: usize, h: usize) -> (Vec<f32>, Vec<f32>) {
    let mut a = vec![0.0f32; w * h * 3];
    let mut b = vec![0.0f32; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let (xf, yf, cf) = (x as f64, y as f64, c as f64);
                let av = (0.5 + 0.4 * (0.37 * xf + 0.11 * yf + cf).sin()) as f32;
                let bv = (av as f64 + 0.1 * (0.23 * xf * yf / 7.0 + 2.0 * cf).cos()).clamp(0.0, 1.0) as f32;
                a[(y * w + x) * 3 + c] = av;
                b[(y * w + x) * 3 + c] = bv;
            }
        }
    }
    (a, b)
}

#[test]
fn psnr_examples() {
    let b: Vec<f32> = (0..30).map(|i| (i as f32 * 0.37).sin().abs()).collect();
    assert_eq!(psnr(&b, &b, false).unwrap(), PSNR_CAP);
    let a: Vec<f32> = b.iter().map(|x| x + 0.1).collect();
    assert!((psnr(&a, &b, false).unwrap() - 20.0).abs() < 1e-5);
    let half: Vec<f32> = b.iter().map(|x| 0.5 * x).collect();
    assert_eq!(psnr(&half, &b, true).unwrap(), PSNR_CAP);
    assert!(psnr(&half, &b, false).unwrap() < 30.0);
    assert!(psnr(&b[..3], &b, false).is_err());
}

#[test]
fn psnr_scale_invariance_under_matching() {
    let b: Vec<f32> = (0..48).map(|i| 0.05 + 0.9 * ((i * 7 % 13) as f32 / 13.0)).collect();
    for s in [0.1f32, 0.25, 0.5, 2.0, 3.0, 10.0] {
        let a: Vec<f32> = b.iter().map(|x| s * x).collect();
        let p = psnr(&a, &b, true).unwrap();
        assert!(p > 80.0, "s {s}: {p}");
    }
}

#[test]
fn ssim_matches_reference_implementation() {
    // Reference values from scikit-image 0.25 `structural_similarity` with
    // gaussian_weights, sigma 1.5, population covariance, data_range 1.
    let (a, b) = pattern(23, 17);
    let s = ssim(&a, &b, 23, 17).unwrap();
    assert!((s - 0.927955717569505).abs() < 1e-6, "{s}");
    let neg: Vec<f32> = a.iter().map(|x| 1.0 - x).collect();
    let s = ssim(&a, &neg, 23, 17).unwrap();
    assert!((s - -0.6245166229151508).abs() < 1e-6, "{s}");
}

#[test]
fn ssim_examples() {
    let (a, b) = pattern(23, 17);
    assert!((ssim(&a, &a, 23, 17).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(ssim(&a, &b, 23, 17).unwrap(), ssim(&b, &a, 23, 17).unwrap());

    let (w, h) = (24, 24);
    let blocks: Vec<f32> = (0..w * h)
        .flat_map(|i| {
            let v = if ((i % w) / 8 + (i / w) / 8) % 2 == 0 { 0.05 } else { 0.95 };
            [v; 3]
        })
        .collect();
    let neg: Vec<f32> = blocks.iter().map(|x| 1.0 - x).collect();
    let s = ssim(&blocks, &neg, w, h).unwrap();
    assert!(s < 0.1 && (s - -0.6736574791634021).abs() < 1e-6, "{s}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let flat = vec![0.5f32; w * h * 3];
    // Uniform noise with standard deviation 0.01.
    let r = 0.01 * 3f32.sqrt();
    let noisy: Vec<f32> = flat.iter().map(|x| x + rng.gen_range(-r..r)).collect();
    assert!(ssim(&flat, &noisy, w, h).unwrap() > 0.9);

    assert!(ssim(&a, &b[3..], 23, 17).is_err());
    assert!(ssim(&a[..30], &b[..30], 5, 2).is_err());
    let over: Vec<f32> = a.iter().map(|x| x * 2.0).collect();
    assert!(ssim(&over, &a, 23, 17).is_err());
}

const BG: u16 = BACKGROUND;

#[test]
fn seg_scores_examples() {
    let truth = [0, 0, 1, 1, 2, 2, BG, BG];
    let perm = [5, 5, 3, 3, 9, 9, BG, 1];
    let r = seg_scores(&perm, &truth).unwrap();
    assert_eq!((r.micro_f1, r.macro_f1, r.macro_precision, r.macro_recall), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(r.matching, [(5, 0), (3, 1), (9, 2)].into_iter().collect());

    let truth: Vec<u16> = [vec![0; 50], vec![1; 50]].concat();
    let pred = vec![7u16; 100];
    let r = seg_scores(&pred, &truth).unwrap();
    assert_eq!(r.micro_f1, 0.5);
    assert_eq!(r.matching.get(&7), Some(&0));
    // Class 0: P 0.5, R 1; class 1 unmatched.
    assert!((r.macro_f1 - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((r.macro_precision - 0.25).abs() < 1e-12);
    assert!((r.macro_recall - 0.5).abs() < 1e-12);

    assert!(seg_scores(&[0, 1], &[BG, BG]).is_err());
    assert!(seg_scores(&[0], &[0, 1]).is_err());
}

#[test]
fn seg_scores_counts_unmatched_predictions_as_false_positives() {
    let truth = [0, 0, 0, 0, 1, 1, 1, 1];
    let pred = [0, 0, 0, 2, 1, 1, 1, 1];
    let r = seg_scores(&pred, &truth).unwrap();
    assert_eq!(r.micro_f1, 7.0 / 8.0);
    let c0 = r.classes[0];
    assert_eq!((c0.true_positive, c0.false_positive, c0.false_negative), (3, 0, 1));
    assert!(!r.matching.contains_key(&2));
}

fn labels(max: u16) -> impl Strategy<Value = Vec<(u16, u16)>> {
    prop::collection::vec((0..max, 0..max), 1..80)
}

proptest! {
    #[test]
    fn seg_scores_are_permutation_invariant(pairs in labels(5), shift in 1u16..7) {
        let truth: Vec<u16> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<u16> = pairs.iter().map(|p| p.1).collect();
        // A bijection on 0..5 that also relabels into a new range.
        let permuted: Vec<u16> = pred.iter().map(|&p| 100 + (p + shift) % 5).collect();
        let a = seg_scores(&pred, &truth).unwrap();
        let b = seg_scores(&permuted, &truth).unwrap();
        prop_assert_eq!(a.micro_f1, b.micro_f1);
        prop_assert_eq!(a.macro_f1, b.macro_f1);
        prop_assert_eq!(a.macro_precision, b.macro_precision);
        prop_assert_eq!(a.macro_recall, b.macro_recall);
    }

    #[test]
    fn micro_scores_coincide_and_stay_in_range(pairs in labels(4)) {
        let truth: Vec<u16> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<u16> = pairs.iter().map(|p| p.1).collect();
        let r = seg_scores(&pred, &truth).unwrap();
        prop_assert_eq!(r.micro_precision, r.micro_recall);
        prop_assert_eq!(r.micro_recall, r.micro_f1);
        for v in [r.micro_f1, r.macro_f1, r.macro_precision, r.macro_recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn ssim_is_symmetric(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f32> = (0..12 * 11 * 3).map(|_| rng.gen()).collect();
        let b: Vec<f32> = (0..12 * 11 * 3).map(|_| rng.gen()).collect();
        prop_assert_eq!(ssim(&a, &b, 12, 11).unwrap(), ssim(&b, &a, 12, 11).unwrap());
    }
}

fn groups(centers: &[f64]) -> Vec<Vec<f64>> {
    let mut pts = Vec::new();
    for &cx in centers {
        for j in 0..6 {
            pts.push(vec![cx + 0.02 * ((j * 7 % 5) as f64 - 2.0), 0.03 * ((j * 3 % 4) as f64 - 1.5)]);
        }
    }
    pts
}

#[test]
fn meanshift_examples() {
    let tight = groups(&[0.0]);
    let c = meanshift(&tight, &MeanshiftConfig::new(0.3)).unwrap();
    assert_eq!(c.centers.len(), 1);

    let h = 0.2;
    let far = groups(&[0.0, 10.0 * h]);
    let c = meanshift(&far, &MeanshiftConfig::new(h)).unwrap();
    assert_eq!(c.centers.len(), 2);
    assert_eq!(c.labels, [vec![0; 6], vec![1; 6]].concat());
    assert_eq!(c.predict(&[1.9, 0.0]), 1);

    assert!(meanshift(&[], &MeanshiftConfig::new(0.2)).is_err());
    assert!(meanshift(&tight, &MeanshiftConfig::new(0.0)).is_err());
}

#[test]
fn meanshift_bandwidth_sweep() {
    // Cluster counts from a standalone flat-kernel implementation run on the
    // same points.
    let pts = groups(&[0.0, 0.45, 1.2, 2.5]);
    let counts: Vec<usize> = [0.2, 0.3, 0.5, 0.8, 1.4]
        .iter()
        .map(|&h| meanshift(&pts, &MeanshiftConfig::new(h)).unwrap().centers.len())
        .collect();
    assert_eq!(counts, [4, 4, 3, 2, 1]);
    assert!(counts.windows(2).all(|w| w[1] <= w[0]));
}
