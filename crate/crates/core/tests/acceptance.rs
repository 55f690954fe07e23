//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits nonzero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xovd_core::acquisition::{build_gallery, DatasetIndex, GalleryOptions, Provenance};
use xovd_core::backends::{BBox, BackendBundle, BinaryMask, ImageTensor, PatchGrid};
use xovd_core::classifier::{classify_proposal, dcc, ClassificationResult, Detection, Label};
use xovd_core::descriptors::{
    build_store, extend_store, load_store, negative_prototype, positive_prototype, save_store, BackgroundDescriptor,
    ClassDescriptor, DescriptorError, DescriptorStore, Polarity, Prototype, StoreMetadata, StoreOptions,
};
use xovd_core::eval::{
    cmte_run, coco_ap, iou, k_sweep, k_sweep_csv, sigma_grid, sigma_sweep, sigma_sweep_csv, CmteConfig, EvalOptions,
    GroundTruthSet, GtObject,
};
use xovd_core::material::{assign_material, build_material_db, compute_appearance, fallback_material_db, MaterialOptions};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, format!("{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 1

/// Foreground decision for grid cell (i, j) by brute force over every pixel.
fn oracle_cell_is_fg(mask: &BinaryMask, gh: usize, gw: usize, i: usize, j: usize) -> bool {
    let (h, w) = (mask.height(), mask.width());
    // pixel r spans [r*gh, (r+1)*gh); cell i spans [i*h, (i+1)*h) in these units
    let overlap = |a0: usize, a1: usize, b0: usize, b1: usize| a1.min(b1).saturating_sub(a0.max(b0)) as u128;
    let mut fg: u128 = 0;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                fg += overlap(r * gh, (r + 1) * gh, i * h, (i + 1) * h) * overlap(c * gw, (c + 1) * gw, j * w, (j + 1) * w);
            }
        }
    }
    2 * fg >= (h * w) as u128
}

fn oracle_prototype(grid: &PatchGrid, mask: &BinaryMask, want_fg: bool) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; grid.dim()];
    let mut n = 0usize;
    for i in 0..grid.grid_h() {
        for j in 0..grid.grid_w() {
            if oracle_cell_is_fg(mask, grid.grid_h(), grid.grid_w(), i, j) == want_fg {
                for k in 0..grid.dim() {
                    sum[k] += grid.cell(i, j)[k];
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return None;
    }
    Some(sum.iter().map(|s| s / n as f64).collect())
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let instances = 300;
    for _ in 0..instances {
        let (gh, gw, dim) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=8));
        let features: Vec<f64> = (0..gh * gw * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid = PatchGrid::new(gh, gw, dim, features).unwrap();
        let (mh, mw) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let p = rng.random_range(0.0..1.0);
        let mask = random_mask(&mut rng, mh, mw, p);
        for want_fg in [true, false] {
            let got = if want_fg { positive_prototype(&grid, &mask) } else { negative_prototype(&grid, &mask) };
            match (oracle_prototype(&grid, &mask, want_fg), got) {
                (Some(o), Ok(v)) => worst = worst.max(max_abs(&o, &v)),
                (None, Err(DescriptorError::EmptyForeground)) if want_fg => {}
                (None, Err(DescriptorError::EmptyBackground)) if !want_fg => {}
                (o, g) => return Err(format!("oracle {o:?} vs library {g:?}")),
            }
        }
    }
    for _ in 0..instances {
        let n = rng.random_range(1..=4);
        let mut pairs = Vec::new();
        for _ in 0..n {
            let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
            let px: Vec<[f64; 3]> = (0..h * w).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let p = rng.random_range(0.0..1.0);
            pairs.push((ImageTensor::new(h, w, px).unwrap(), random_mask(&mut rng, h, w, p)));
        }
        let mut per_image = Vec::new();
        for (img, mask) in &pairs {
            let mut s = [0.0; 3];
            let mut cnt = 0.0;
            for r in 0..img.height() {
                for c in 0..img.width() {
                    if mask.get(r, c) {
                        for k in 0..3 {
                            s[k] += img.get(r, c)[k];
                        }
                        cnt += 1.0;
                    }
                }
            }
            if cnt > 0.0 {
                per_image.push(s.map(|v| v / cnt));
            }
        }
        match compute_appearance(&pairs) {
            Ok(a) => {
                ensure(!per_image.is_empty(), "appearance from all-empty masks")?;
                let mut o = [0.0; 3];
                for m in &per_image {
                    for k in 0..3 {
                        o[k] += m[k] / per_image.len() as f64;
                    }
                }
                worst = worst.max(max_abs(&o, &a));
            }
            Err(_) => ensure(per_image.is_empty(), "appearance failed with a non-empty mask")?,
        }
    }
    ensure(worst <= 1e-9, format!("max abs error {worst:e}"))?;
    within(start.elapsed(), 10.0, "prototype oracle")?;
    Ok(format!("{instances} grid/mask and {instances} appearance instances, max abs error {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 2

struct Case {
    gt: BTreeMap<String, Vec<GtObject>>,
    dets: BTreeMap<String, Vec<Detection>>,
}

fn det(b: BBox, class: &str, score: f64) -> Detection {
    Detection { bbox: b, class_name: class.into(), score, s1: 0.0, s2: 0.0, delta: 0.0 }
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

/// Reference AP: detections processed in one global ranking (score, then
/// image order, then per-image rank), matched within their image to the
/// best unmatched ground truth; interpolated precision at recall r is the
/// max precision over all ranks with recall >= r.
fn reference_metrics(case: &Case) -> (f64, f64, f64) {
    let thresholds: Vec<f64> = (0..10).map(|i| if i == 9 { 0.95 } else { i as f64 * ((0.95 - 0.5) / 9.0) + 0.5 }).collect();
    let classes: BTreeSet<String> = case.gt.values().flatten().filter(|o| o.visible).map(|o| o.class_name.clone()).collect();
    let mut per_class = Vec::new();
    for class in &classes {
        let n_gt = case.gt.values().flatten().filter(|o| o.visible && &o.class_name == class).count();
        // (score, image order, rank within image, image id, box)
        let mut ranked = Vec::new();
        for (img_order, (img, ds)) in case.dets.iter().enumerate() {
            if !case.gt.contains_key(img) {
                continue;
            }
            let mut mine: Vec<(usize, &Detection)> = ds.iter().enumerate().filter(|(_, d)| &d.class_name == class).collect();
            mine.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
            for (rank, (_, d)) in mine.into_iter().enumerate() {
                ranked.push((d.score, img_order, rank, img.clone(), d.bbox));
            }
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut aps = Vec::new();
        for &t in &thresholds {
            let mut taken: BTreeSet<(String, usize)> = BTreeSet::new();
            let mut flags = Vec::new();
            // matching must follow per-image order, which the global ranking preserves
            for (_, _, _, img, b) in &ranked {
                let gts: Vec<&GtObject> = case.gt[img].iter().filter(|o| o.visible && &o.class_name == class).collect();
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in gts.iter().enumerate() {
                    if taken.contains(&(img.clone(), gi)) {
                        continue;
                    }
                    let o = iou(b, &g.bbox);
                    if o >= t.min(1.0 - 1e-10) && best.is_none_or(|(_, bo)| o >= bo) {
                        best = Some((gi, o));
                    }
                }
                if let Some((gi, _)) = best {
                    taken.insert((img.clone(), gi));
                }
                flags.push(best.is_some());
            }
            let mut tp = 0.0;
            let mut pr = Vec::new();
            for (i, f) in flags.iter().enumerate() {
                if *f {
                    tp += 1.0;
                }
                pr.push((tp / n_gt as f64, tp / (i + 1) as f64));
            }
            let mut sum = 0.0;
            for ri in 0..101 {
                let r = if ri == 100 { 1.0 } else { ri as f64 * 0.01 };
                sum += pr.iter().filter(|(rc, _)| *rc >= r).map(|(_, p)| *p).fold(0.0, f64::max);
            }
            aps.push(sum / 101.0);
        }
        per_class.push((aps.iter().sum::<f64>() / 10.0, aps[0], aps[5]));
    }
    if per_class.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = per_class.len() as f64;
    (
        per_class.iter().map(|p| p.0).sum::<f64>() / n,
        per_class.iter().map(|p| p.1).sum::<f64>() / n,
        per_class.iter().map(|p| p.2).sum::<f64>() / n,
    )
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let classes = ["a", "b", "c"];
    let n_classes = rng.random_range(1..=3);
    let n_images = rng.random_range(1..=5);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0..8) as f64;
        let y = rng.random_range(0..8) as f64;
        bx(x, y, x + rng.random_range(1..=4) as f64, y + rng.random_range(1..=4) as f64)
    };
    let mut gt = BTreeMap::new();
    let mut gt_boxes = Vec::new();
    for i in 0..n_images {
        let objs: Vec<GtObject> = (0..rng.random_range(0..=3))
            .map(|_| {
                let b = rand_box(rng);
                gt_boxes.push((format!("img{i}"), b));
                GtObject { bbox: b, class_name: classes[rng.random_range(0..n_classes)].into(), visible: rng.random_bool(0.9) }
            })
            .collect();
        gt.insert(format!("img{i}"), objs);
    }
    let mut dets: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for _ in 0..rng.random_range(0..=10) {
        let img = format!("img{}", rng.random_range(0..n_images));
        // jitter a ground-truth box most of the time so matches happen
        let own: Vec<BBox> = gt_boxes.iter().filter(|(i, _)| *i == img).map(|(_, b)| *b).collect();
        let b = if !own.is_empty() && rng.random_bool(0.7) {
            let g = own[rng.random_range(0..own.len())];
            let dx = rng.random_range(-1..=1) as f64 * 0.5;
            let dy = rng.random_range(-1..=1) as f64 * 0.5;
            bx(g.x1 + dx, g.y1 + dy, g.x2 + dx + 0.5, g.y2 + dy)
        } else {
            rand_box(rng)
        };
        // coarse scores produce ties
        let score = rng.random_range(1..=10) as f64 / 10.0;
        dets.entry(img).or_default().push(det(b, classes[rng.random_range(0..n_classes)], score));
    }
    Case { gt, dets }
}

fn run_case(case: &Case) -> (f64, f64, f64) {
    let r = coco_ap(&case.dets, &GroundTruthSet::new(case.gt.clone()), &EvalOptions::default());
    (r.ap, r.ap50, r.ap75)
}

fn single(gt: Vec<(&str, BBox)>, dets: Vec<Detection>) -> Case {
    let objs = gt.into_iter().map(|(c, b)| GtObject { bbox: b, class_name: c.into(), visible: true }).collect();
    Case { gt: [("img".to_string(), objs)].into_iter().collect(), dets: [("img".to_string(), dets)].into_iter().collect() }
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let g = bx(0.0, 0.0, 10.0, 10.0);
    let fixtures: Vec<(&str, Case, (f64, f64, f64))> = vec![
        ("perfect match", single(vec![("k", g)], vec![det(g, "k", 0.9)]), (1.0, 1.0, 1.0)),
        ("IoU 0.6 straddle", single(vec![("k", g)], vec![det(bx(2.5, 0.0, 12.5, 10.0), "k", 0.9)]), (0.3, 1.0, 0.0)),
        (
            "half recall",
            single(vec![("k", g), ("k", bx(20.0, 20.0, 30.0, 30.0))], vec![det(g, "k", 0.9)]),
            (51.0 / 101.0, 51.0 / 101.0, 51.0 / 101.0),
        ),
        (
            "false positive ranked first",
            single(vec![("k", g)], vec![det(bx(40.0, 40.0, 50.0, 50.0), "k", 0.9), det(g, "k", 0.8)]),
            (0.5, 0.5, 0.5),
        ),
        ("duplicate after full recall", single(vec![("k", g)], vec![det(g, "k", 0.9), det(g, "k", 0.8)]), (1.0, 1.0, 1.0)),
        (
            "class without detections",
            single(vec![("k", g), ("m", bx(20.0, 20.0, 30.0, 30.0))], vec![det(g, "k", 0.9)]),
            (0.5, 0.5, 0.5),
        ),
    ];
    for (name, case, want) in &fixtures {
        let got = run_case(case);
        let err = (got.0 - want.0).abs().max((got.1 - want.1).abs()).max((got.2 - want.2).abs());
        ensure(err <= 1e-12, format!("fixture `{name}`: got {got:?}, want {want:?}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let n = 200;
    for i in 0..n {
        let case = random_case(&mut rng);
        let (a, b) = (run_case(&case), reference_metrics(&case));
        let err = (a.0 - b.0).abs().max((a.1 - b.1).abs()).max((a.2 - b.2).abs());
        if err > 1e-6 {
            return Err(format!("random case {i}: library {a:?} vs reference {b:?}"));
        }
        worst = worst.max(err);
    }
    within(start.elapsed(), 30.0, "COCO oracle")?;
    Ok(format!("{} hand fixtures within 1e-12, {n} random cases max error {worst:.1e}", fixtures.len()))
}

// ---------------------------------------------------------------- criteria 3, 4, 8

fn criterion_3(micro: &common::Micro, backends: &BackendBundle) -> Check {
    let start = Instant::now();
    let base = CmteConfig::default();
    let run = cmte_run(micro.inputs(), backends, &base).map_err(|e| e.to_string())?;
    let control_cfg = CmteConfig { permute_descriptors: Some(1), ..base };
    let control = cmte_run(micro.inputs(), backends, &control_cfg).map_err(|e| e.to_string())?;
    let (ap50, ctl) = (run.report.ap50, control.report.ap50);
    ensure(ap50 >= 0.95, format!("AP50 {ap50:.4} < 0.95"))?;
    ensure(ctl < ap50, format!("control AP50 {ctl:.4} not below {ap50:.4}"))?;
    within(start.elapsed(), 60.0, "micro-benchmark")?;
    Ok(format!("AP50 {ap50:.4} (AP {:.4}), permuted-descriptor control AP50 {ctl:.4}", run.report.ap))
}

fn criterion_4(micro: &common::Micro, backends: &BackendBundle) -> Check {
    let run = cmte_run(micro.inputs(), backends, &CmteConfig::default()).map_err(|e| e.to_string())?;
    let kept = |sigma: f64| -> BTreeSet<(String, usize)> {
        run.scored
            .iter()
            .flat_map(|(id, ps)| ps.iter().filter(|p| p.passes(sigma)).map(move |p| (id.clone(), p.index)))
            .collect()
    };
    let (k30, k15, k0) = (kept(0.3), kept(0.15), kept(0.0));
    ensure(k30.is_subset(&k15), "kept(0.3) is not a subset of kept(0.15)")?;
    ensure(k15.is_subset(&k0), "kept(0.15) is not a subset of kept(0.0)")?;
    let grid = sigma_grid(0.5, 0.05);
    let points = sigma_sweep(&run, &micro.test, &micro.layout.vocabulary, &grid, &EvalOptions::default());
    ensure(points.len() == 11, format!("sweep has {} points", points.len()))?;
    ensure(points.windows(2).all(|w| w[1].detections <= w[0].detections), "detection count increases with sigma")?;
    ensure(points.iter().all(|p| p.count_non_increasing), "monotone column has a false entry")?;
    let csv = sigma_sweep_csv(&points);
    ensure(csv.lines().count() == 12, "sigma CSV row count")?;
    let counts: Vec<String> = points.iter().map(|p| p.detections.to_string()).collect();
    Ok(format!("|kept| {} ⊇ {} ⊇ {}; counts over sigma 0..0.5: {}", k0.len(), k15.len(), k30.len(), counts.join(",")))
}

fn criterion_8(micro: &common::Micro, backends: &BackendBundle) -> Check {
    let ks = [1, 2, 5, 10, 20, 30];
    let points = k_sweep(&ks, micro.inputs(), backends, &CmteConfig::default()).map_err(|e| e.to_string())?;
    let csv = k_sweep_csv(&points);
    let path = micro.root().join("k_sweep.csv");
    std::fs::write(&path, &csv).map_err(|e| e.to_string())?;
    let back = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    ensure(back.starts_with("k,ap,ap50,ap75\n") && back.lines().count() == ks.len() + 1, "K-sweep CSV malformed")?;
    let (first, last) = (&points[0], &points[points.len() - 1]);
    ensure(last.ap50 >= first.ap50, format!("AP50 at K=30 {:.4} < AP50 at K=1 {:.4}", last.ap50, first.ap50))?;
    let series: Vec<String> = points.iter().map(|p| format!("K={}:{:.3}", p.k, p.ap50)).collect();
    Ok(format!("AP50 {}", series.join(" ")))
}

// ---------------------------------------------------------------- criterion 5

fn random_store(rng: &mut ChaCha8Rng, dim: usize) -> DescriptorStore {
    let n_classes = rng.random_range(1..=4);
    let mut descriptors = BTreeMap::new();
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect() };
    for c in 0..n_classes {
        let name = format!("class{c}");
        let members = (0..rng.random_range(1..=4))
            .map(|i| Prototype { vector: vec(rng), polarity: Polarity::Positive, sample_id: format!("{name}-{i}") })
            .collect();
        descriptors.insert(name.clone(), ClassDescriptor::from_members(&name, members).unwrap());
    }
    let bg = (0..rng.random_range(0..=3))
        .map(|i| Prototype { vector: vec(rng), polarity: Polarity::Negative, sample_id: format!("bg-{i}") })
        .collect();
    let meta = StoreMetadata { feature_space: "random".into(), ..Default::default() };
    DescriptorStore::from_parts(dim, descriptors, BackgroundDescriptor::from_members(bg), meta).unwrap()
}

fn decisions(store: &DescriptorStore, proposals: &[Vec<f64>], sigma: f64) -> (Vec<(Label, bool)>, Vec<usize>) {
    let results: Vec<ClassificationResult> =
        proposals.iter().map(|z| dcc(z, &classify_proposal(z, store).unwrap(), store, sigma)).collect();
    let labels = results.iter().map(|r| (r.label.clone(), r.kept)).collect();
    let mut order: Vec<usize> = (0..results.len()).filter(|&i| results[i].kept).collect();
    order.sort_by(|&a, &b| results[b].s1.total_cmp(&results[a].s1));
    (labels, order)
}

/// Copy of `store` with one prototype (class mean, class member or
/// background member) multiplied by `lambda`.
fn scale_one(store: &DescriptorStore, rng: &mut ChaCha8Rng, lambda: f64) -> DescriptorStore {
    let mut descriptors = store.descriptors().clone();
    let mut background = store.background().clone();
    let names: Vec<String> = descriptors.keys().cloned().collect();
    let pick = rng.random_range(0..names.len() + 1);
    if pick == names.len() && background.mean_prototype.is_some() {
        let bg_idx = rng.random_range(0..=background.members.len());
        if bg_idx == background.members.len() {
            background.mean_prototype = background.mean_prototype.map(|m| m.iter().map(|v| v * lambda).collect());
        } else {
            background.members[bg_idx].vector.iter_mut().for_each(|v| *v *= lambda);
        }
    } else {
        let d = descriptors.get_mut(&names[pick.min(names.len() - 1)]).unwrap();
        let idx = rng.random_range(0..=d.members.len());
        if idx == d.members.len() {
            d.mean_prototype.iter_mut().for_each(|v| *v *= lambda);
        } else {
            d.members[idx].vector.iter_mut().for_each(|v| *v *= lambda);
        }
    }
    DescriptorStore::from_parts(store.dim(), descriptors, background, store.metadata().clone()).unwrap()
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let sigma = 0.15;
    let mut comparisons = 0;
    for pair in 0..100 {
        let dim = rng.random_range(2..=8);
        let store = random_store(&mut rng, dim);
        let proposals: Vec<Vec<f64>> = (0..8).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let base = decisions(&store, &proposals, sigma);
        for lambda in [1e-3, 1.0, 1e3] {
            let scaled_store = scale_one(&store, &mut rng, lambda);
            ensure(decisions(&scaled_store, &proposals, sigma) == base, format!("pair {pair}: scaling a prototype by {lambda} changed the outcome"))?;
            let which = rng.random_range(0..proposals.len());
            let mut scaled = proposals.clone();
            scaled[which].iter_mut().for_each(|v| *v *= lambda);
            ensure(decisions(&store, &scaled, sigma) == base, format!("pair {pair}: scaling a proposal by {lambda} changed the outcome"))?;
            comparisons += 2;
        }
    }
    Ok(format!("100 store/proposal pairs, {comparisons} scaled comparisons unchanged"))
}

// ---------------------------------------------------------------- criterion 6

fn background_multiset(store: &DescriptorStore) -> Vec<(String, Vec<u64>)> {
    let mut v: Vec<(String, Vec<u64>)> = store
        .background()
        .members
        .iter()
        .map(|m| (m.sample_id.clone(), m.vector.iter().map(|x| x.to_bits()).collect()))
        .collect();
    v.sort();
    v
}

fn criterion_6(micro: &common::Micro, backends: &BackendBundle) -> Check {
    let db = build_material_db(&micro.in_house, backends, &MaterialOptions::default()).map_err(|e| e.to_string())?;
    let opts = GalleryOptions::default();
    let vocab = micro.layout.vocabulary.clone();
    let gallery = |classes: &[String]| build_gallery(classes, &micro.in_house, None, backends, &db, &opts).map_err(|e| e.to_string());
    let store_opts = StoreOptions::default();
    let full = build_store(&gallery(&vocab)?, backends, &store_opts).map_err(|e| e.to_string())?.store;
    let a = build_store(&gallery(&vocab[..2])?, backends, &store_opts).map_err(|e| e.to_string())?.store;
    let extended = extend_store(&a, &gallery(&vocab[2..])?, backends, &store_opts).map_err(|e| e.to_string())?.store;

    let path = micro.root().join("store.json");
    save_store(&full, &path).map_err(|e| e.to_string())?;
    let loaded = load_store(&path).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for d in loaded.descriptors().values() {
        worst = worst.max(d.mean_consistency_error());
    }
    ensure(worst <= 1e-6, format!("mean consistency error {worst:e}"))?;
    ensure(loaded == full, "loaded store differs from saved store")?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    ensure(loaded.to_json().into_bytes() == bytes, "re-serialized store is not byte-identical")?;

    ensure(extended.class_names() == full.class_names(), "extended store has different classes")?;
    for (name, d) in full.descriptors() {
        ensure(extended.get(name) == Some(d), format!("descriptor `{name}` differs after extension"))?;
    }
    ensure(background_multiset(&extended) == background_multiset(&full), "background multisets differ")?;
    let (em, fm) = (extended.background().mean_prototype.as_ref(), full.background().mean_prototype.as_ref());
    ensure(
        matches!((em, fm), (Some(e), Some(f)) if max_abs(e, f) <= 1e-12),
        "background means differ",
    )?;
    Ok(format!(
        "{} classes, {} background members, max mean error {worst:.1e}, round trip byte-identical",
        full.descriptors().len(),
        full.background().members.len()
    ))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7(micro: &common::Micro, backends: &BackendBundle) -> Check {
    // knife and laptop in-house, lemon only on the web, unicorn nowhere
    let in_house = micro.in_house.restrict_to(&["knife", "laptop"]);
    let db = build_material_db(&in_house, backends, &MaterialOptions::default()).map_err(|e| e.to_string())?;
    let vocab: Vec<String> = ["knife", "laptop", "lemon", "unicorn"].iter().map(|s| s.to_string()).collect();
    let g = build_gallery(&vocab, &in_house, Some(&micro.web), backends, &db, &GalleryOptions::default())
        .map_err(|e| e.to_string())?;
    let summary = g.provenance_summary();
    let expect = [
        ("knife", Some(Provenance::InHouse)),
        ("laptop", Some(Provenance::InHouse)),
        ("lemon", Some(Provenance::WebSynthetic)),
        ("unicorn", None),
    ];
    for ((class, n, prov), (want_class, want_prov)) in summary.iter().zip(expect) {
        ensure(class == want_class && *prov == want_prov, format!("`{class}` has provenance {prov:?}, want {want_prov:?}"))?;
        ensure(g.samples(class).iter().all(|s| Some(s.provenance) == *prov), format!("mixed provenance in `{class}`"))?;
        if want_prov.is_some() {
            ensure(*n > 0, format!("`{class}` is empty"))?;
        }
    }
    ensure(g.missing_classes() == vec!["unicorn".to_string()], format!("missing classes {:?}", g.missing_classes()))?;
    let lemon = g.samples("lemon");
    ensure(lemon.iter().all(|s| s.source_id.starts_with("web:lemon/")), "web sample without web source id")?;
    let material = assign_material("lemon", &db, &*backends.material_oracle);
    let color = db.appearance(&material).map_err(|e| e.to_string())?.color;
    let lemon_ok = lemon.iter().all(|s| s.image.pixels().iter().all(|p| *p == color || *p == [1.0; 3]));
    ensure(lemon_ok, format!("web silhouettes are not rendered in the `{material}` color on white"))?;

    let fallback = build_material_db(&DatasetIndex::empty(), backends, &MaterialOptions::default()).map_err(|e| e.to_string())?;
    let names: Vec<String> = fallback.materials().keys().cloned().collect();
    ensure(names == ["inorganic", "metal", "organic"], format!("fallback materials {names:?}"))?;
    ensure(fallback == fallback_material_db(), "fallback DB differs from the constant table")?;
    let colors: Vec<[f64; 3]> = ["organic", "inorganic", "metal"].iter().map(|m| fallback.materials()[*m].color).collect();
    ensure(
        colors == [[0.95, 0.55, 0.15], [0.20, 0.70, 0.30], [0.15, 0.35, 0.80]],
        format!("fallback colors {colors:?}"),
    )?;
    let counts: Vec<String> = summary.iter().map(|(c, n, _)| format!("{c}:{n}")).collect();
    Ok(format!("in-house/web/missing branches ({}), fallback DB = {{organic, inorganic, metal}}", counts.join(" ")))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(total: Duration) -> Check {
    ensure(!cfg!(feature = "live-web"), "default build includes the live web client")?;
    within(total, 300.0, "acceptance run")?;
    Ok(format!("offline default build; acceptance work finished in {:.1}s", total.as_secs_f64()))
}

fn report(id: u32, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  criterion {id}: {name} ({secs:.2}s) {detail}");
            true
        }
        Err(why) => {
            println!("FAIL  criterion {id}: {name} ({secs:.2}s) {why}");
            false
        }
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let backends = BackendBundle::stub();
    let micro = common::Micro::generate();
    let mut ok = true;
    ok &= report(1, "prototype and appearance math match nested-loop oracles", criterion_1);
    ok &= report(2, "COCO AP matches reference matcher and hand fixtures", criterion_2);
    ok &= report(3, "micro-benchmark AP50 >= 0.95, permuted control lower", || criterion_3(&micro, &backends));
    ok &= report(4, "consistency filter is monotone in sigma", || criterion_4(&micro, &backends));
    ok &= report(5, "argmax and ordering invariant to positive scaling", criterion_5);
    ok &= report(6, "descriptor means, store round trip, extend == rebuild", || criterion_6(&micro, &backends));
    ok &= report(7, "gallery branches, provenance, missing classes, material fallback", || criterion_7(&micro, &backends));
    ok &= report(8, "K sweep: AP50(K=30) >= AP50(K=1), CSV emitted", || criterion_8(&micro, &backends));
    let total = start.elapsed();
    ok &= report(9, "offline suite within time budget", || criterion_9(total));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
