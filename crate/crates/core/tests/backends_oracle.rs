use proptest::prelude::*;

use xovd_core::backends::stub::{grid_proposal_source, stub_extractor, stub_segmenter, STUB_FEATURE_DIM};
use xovd_core::backends::{BackendBundle, BinaryMask, ImageTensor};
use xovd_core::descriptors::resize_mask;

fn image_strategy(max: usize) -> impl Strategy<Value = ImageTensor> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop::array::uniform3(0.0f64..=1.0), h * w)
            .prop_map(move |px| ImageTensor::new(h, w, px).unwrap())
    })
}

/// Patch statistics via sums of x and x^2, which differs from the two-pass
/// variance used in the library.
fn oracle_cell(img: &ImageTensor, patch: usize, gi: usize, gj: usize) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let (y0, y1, x0, x1) = (gi * patch, ((gi + 1) * patch).min(h), gj * patch, ((gj + 1) * patch).min(w));
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    let (mut s, mut s2) = ([0.0; 3], [0.0; 3]);
    for r in y0..y1 {
        for c in x0..x1 {
            for (k, v) in img.get(r, c).into_iter().enumerate() {
                s[k] += v;
                s2[k] += v * v;
            }
        }
    }
    let mean = s.map(|v| v / n);
    let mut out = mean.to_vec();
    for k in 0..3 {
        out.push((s2[k] / n - mean[k] * mean[k]).max(0.0).sqrt());
    }
    out.push((y0 + y1) as f64 / (2.0 * h as f64));
    out.push((x0 + x1) as f64 / (2.0 * w as f64));
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn extractor_matches_moment_oracle(img in image_strategy(20), patch in 1usize..7) {
        let grid = stub_extractor(&img, patch);
        prop_assert_eq!(grid.grid_h(), img.height().div_ceil(patch));
        prop_assert_eq!(grid.grid_w(), img.width().div_ceil(patch));
        prop_assert_eq!(grid.dim(), STUB_FEATURE_DIM);
        for gi in 0..grid.grid_h() {
            for gj in 0..grid.grid_w() {
                let want = oracle_cell(&img, patch, gi, gj);
                for (a, b) in grid.cell(gi, gj).iter().zip(&want) {
                    // sqrt of a near-zero variance amplifies rounding
                    prop_assert!((a - b).abs() <= 1e-6, "cell ({}, {}): {} vs {}", gi, gj, a, b);
                }
            }
        }
    }

    #[test]
    fn segmenter_is_a_luminance_threshold(img in image_strategy(12), cutoff in 0.05f64..0.95) {
        let mask = stub_segmenter(&img, cutoff);
        for r in 0..img.height() {
            for c in 0..img.width() {
                let p = img.get(r, c);
                prop_assert_eq!(mask.get(r, c), p.iter().sum::<f64>() / 3.0 < cutoff);
            }
        }
    }

    #[test]
    fn grid_proposals_pool_cells_by_center(kh in 4usize..9, kw in 4usize..9, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (8 * kh, 8 * kw);
        let px = (0..h * w).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let img = ImageTensor::new(h, w, px).unwrap();
        let grid = stub_extractor(&img, 8);
        let proposals = grid_proposal_source(&img, 16, 32);
        prop_assert!(!proposals.is_empty());
        let mut covered_right = false;
        let mut covered_bottom = false;
        for p in &proposals {
            let b = p.bbox;
            prop_assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w as f64 && b.y2 <= h as f64);
            covered_right |= b.x2 == w as f64;
            covered_bottom |= b.y2 == h as f64;
            let mut acc = vec![0.0; grid.dim()];
            let mut n = 0.0;
            for gi in 0..grid.grid_h() {
                for gj in 0..grid.grid_w() {
                    let (cy, cx) = (gi as f64 * 8.0 + 4.0, gj as f64 * 8.0 + 4.0);
                    if cy >= b.y1 && cy < b.y2 && cx >= b.x1 && cx < b.x2 {
                        acc.iter_mut().zip(grid.cell(gi, gj)).for_each(|(a, v)| *a += v);
                        n += 1.0;
                    }
                }
            }
            prop_assert!(n > 0.0);
            for (a, v) in acc.iter().zip(&p.feature) {
                prop_assert!((a / n - v).abs() <= 1e-12);
            }
        }
        prop_assert!(covered_right && covered_bottom, "windows must reach the far edges");
    }

    #[test]
    fn resize_mask_identity_and_uniform(h in 1usize..16, w in 1usize..16, gh in 1usize..8, gw in 1usize..8, v: bool) {
        let m = BinaryMask::filled(h, w, v);
        prop_assert_eq!(resize_mask(&m, h, w), m.clone());
        prop_assert_eq!(resize_mask(&m, gh, gw), BinaryMask::filled(gh, gw, v));
    }
}

#[test]
fn half_covered_cell_counts_as_foreground() {
    // 4x4 mask to a 1x1 grid: exactly half foreground is enough
    let mut m = BinaryMask::filled(4, 4, false);
    for r in 0..2 {
        for c in 0..4 {
            m.set(r, c, true);
        }
    }
    assert!(resize_mask(&m, 1, 1).get(0, 0));
    m.set(0, 0, false);
    assert!(!resize_mask(&m, 1, 1).get(0, 0));
}

#[test]
fn stub_bundle_is_deterministic() {
    let img = ImageTensor::new(16, 24, (0..16 * 24).map(|i| [(i % 7) as f64 / 7.0, 0.3, 0.9]).collect()).unwrap();
    let (a, b) = (BackendBundle::stub(), BackendBundle::stub());
    assert_eq!(a.extract_checked(&img).unwrap(), b.extract_checked(&img).unwrap());
    assert_eq!(a.segmenter.segment(&img).unwrap(), b.segmenter.segment(&img).unwrap());
    assert_eq!(a.proposal_source.propose(&img).unwrap(), b.proposal_source.propose(&img).unwrap());
}
