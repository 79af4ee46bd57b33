//! Shared fixtures and the property suite.

#![allow(dead_code)]

pub mod grad;

use std::path::PathBuf;
use std::sync::OnceLock;

use manet::backbone::{feature_side, BackboneConfig};
use manet::checkpoint::{Checkpoint, OptimizerState, RngState};
use manet::correlation::{correlation_map, fuse_shots, masked_gap, raw_correlation, support_cells, CorrelationMap, Prototype};
use manet::episodes::{augment_pair, build_folds, generate_synthetic_dataset, AugmentConfig, Dataset, Episode, SynthSpec};
use manet::imaging::{Mask, RgbImage};
use manet::kernels::ConvGeom;
use manet::losses::{grid_loss, grid_target, pixel_loss, total_loss, GridTarget, PixelLossKind};
use manet::metrics::{binary_iou, IouMode, MetricsAccumulator};
use manet::model::{aggregate, Aggregation, CellLogits, MaskStack, Manet, ModelConfig, SCORE_EPS};
use manet::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 256;

pub fn runner() -> TestRunner {
    TestRunner::new(Config { cases: CASES, failure_persistence: None, ..Config::default() })
}

/// Runs `test` over `CASES` inputs from `strategy`, panicking with the
/// minimal failing input.
pub fn check<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>)
where
    S::Value: std::fmt::Debug,
{
    if let Err(e) = runner().run(&strategy, test) {
        panic!("property `{name}` failed: {e}");
    }
}

fn scratch(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name)
}

/// Small synthetic dataset (8 classes x 6 images, 64 px), built once per process.
pub fn small_dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let dir = scratch(&format!("small_ds_{}", std::process::id()));
        let spec = SynthSpec { num_classes: 8, images_per_class: 6, image_size: 64, noise: 0.04, seed: 11 };
        generate_synthetic_dataset(&spec, &dir).unwrap();
        let ds = Dataset::open(&dir.join("manifest.json")).unwrap();
        let _ = std::fs::remove_dir_all(&dir);
        ds
    })
}

/// Narrow head over the tiny backbone for cheap forward passes.
pub fn small_model(seed: u64, grid: usize) -> Manet<f64> {
    let cfg = ModelConfig { head_channels: 16, grid, seed, ..ModelConfig::default() };
    Manet::new(cfg, BackboneConfig { seed, ..BackboneConfig::default() }).unwrap()
}

pub fn mask_strategy(max_side: usize) -> impl Strategy<Value = Mask> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0u8..=1, h * w).prop_map(move |data| Mask { height: h, width: w, data })
    })
}

fn mask_pair(max_side: usize) -> impl Strategy<Value = (Mask, Mask)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        let m = move || proptest::collection::vec(0u8..=1, h * w).prop_map(move |data| Mask { height: h, width: w, data });
        (m(), m())
    })
}

fn tensor(shape: Vec<usize>, range: std::ops::Range<f64>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(range, n).prop_map(move |d| Tensor::from_vec(&shape, d).unwrap())
}

// ---- episodes ----

pub fn prop_folds_partition() {
    check("folds partition classes", (1usize..6, 1usize..8), |(folds, per)| {
        let ids: Vec<u32> = (1..=(folds * per) as u32).collect();
        let mut union = Vec::new();
        let specs: Vec<_> = (0..folds).map(|f| build_folds(&ids, f, folds).unwrap()).collect();
        for (i, a) in specs.iter().enumerate() {
            prop_assert!(a.test_classes.iter().all(|c| !a.train_classes.contains(c)));
            for b in &specs[..i] {
                prop_assert!(a.test_classes.iter().all(|c| !b.test_classes.contains(c)));
            }
            union.extend(a.test_classes.iter().copied());
        }
        union.sort_unstable();
        prop_assert_eq!(union, ids);
        Ok(())
    });
}

pub fn prop_sampled_supports_nonempty() {
    let ds = small_dataset();
    let classes: Vec<u32> = (1..=8).collect();
    check("supports are non-empty and binary", (any::<u64>(), 1usize..=5), |(seed, shots)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = ds.draw(&classes, shots, &mut rng).unwrap();
        prop_assert!(!d.support.contains(&d.query));
        let mut s = d.support.clone();
        s.dedup();
        prop_assert_eq!(s.len(), shots);
        let ep = ds.materialize(&d);
        prop_assert!(ep.query_mask.is_binary());
        for (_, m) in &ep.support {
            prop_assert!(m.is_binary() && m.count() > 0);
        }
        Ok(())
    });
}

pub fn prop_sampling_deterministic() {
    let ds = small_dataset();
    let classes: Vec<u32> = vec![2, 4, 6, 8];
    check("sampler is seed-deterministic", any::<u64>(), |seed| {
        let a = ds.sample_episode(&classes, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = ds.sample_episode(&classes, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(a == b);
        Ok(())
    });
}

pub fn prop_generator_deterministic() {
    use manet::episodes::ShapeKind;
    let dir = scratch(&format!("gen_det_{}", std::process::id()));
    let mut seen = 0;
    check("renderer is seed-deterministic", (any::<u64>(), 0usize..ShapeKind::ALL.len()), |(seed, k)| {
        let shape = ShapeKind::ALL[k];
        let a = manet::episodes::render(shape, 64, 0.05, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = manet::episodes::render(shape, 64, 0.05, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(a == b);
        prop_assert!(a.1.is_binary());
        Ok(())
    });
    // whole-dataset byte identity on a few seeds
    for seed in 0..3u64 {
        let spec = SynthSpec { num_classes: 3, images_per_class: 2, image_size: 64, noise: 0.05, seed };
        let files = |sub: &str| {
            let d = dir.join(sub);
            generate_synthetic_dataset(&spec, &d).unwrap();
            let mut out = Vec::new();
            for e in walk(&d) {
                out.push((e.strip_prefix(&d).unwrap().to_path_buf(), std::fs::read(&e).unwrap()));
            }
            out.sort();
            out
        };
        assert_eq!(files("a"), files("b"));
        seen += 1;
    }
    assert_eq!(seen, 3);
    let _ = std::fs::remove_dir_all(&dir);
}

fn walk(dir: &std::path::Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

pub fn prop_masks_stay_binary() {
    check(
        "resizing and augmentation keep masks binary",
        (mask_strategy(24), 1usize..40, 1usize..40, any::<u64>()),
        |(m, h, w, seed)| {
            prop_assert!(m.resized(h, w).is_binary());
            let img = RgbImage::new(m.height, m.width);
            let (_, a) = augment_pair(&img, &m, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(a.is_binary());
            Ok(())
        },
    );
}

// ---- backbone ----

pub fn prop_feature_geometry() {
    check("mid/high share ceil(side/8)", 64usize..=512, |side| {
        let s1 = ConvGeom::same(3, 2);
        let stage3 = s1.out_size(s1.out_size(s1.out_size(side)));
        let dilated = ConvGeom::new(3, 1, 2, 2);
        let high = dilated.out_size(dilated.out_size(stage3));
        prop_assert_eq!(stage3, feature_side(side));
        prop_assert_eq!(high, feature_side(side));
        prop_assert_eq!(feature_side(side), side.div_ceil(8));
        Ok(())
    });
}

pub fn prop_tiny_backbone_deterministic() {
    use manet::backbone::Backbone;
    use manet::params::ParamStore;
    check("tiny backbone is seed-deterministic", (any::<u64>(), 8usize..40, any::<u64>()), |(seed, side, img_seed)| {
        let build = || {
            let mut store = ParamStore::<f32>::new();
            let cfg = BackboneConfig { seed, ..BackboneConfig::default() };
            let bb = Backbone::build(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            (bb, store)
        };
        let (b1, s1) = build();
        let (b2, s2) = build();
        prop_assert!(s1 == s2);
        let mut rng = ChaCha8Rng::seed_from_u64(img_seed);
        let images = Tensor::from_fn(&[1, 3, side, side], |_| {
            use rand::Rng;
            rng.random_range(-1.0f32..1.0)
        });
        let f1 = b1.extract_features(&s1, &images).unwrap();
        let f2 = b2.extract_features(&s2, &images).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&f1.mid), bits(&f2.mid));
        prop_assert_eq!(bits(&f1.high), bits(&f2.high));
        let fs = feature_side(side);
        prop_assert_eq!(&f1.mid.shape()[2..], &[fs, fs][..]);
        prop_assert_eq!(&f1.high.shape()[2..], &[fs, fs][..]);
        Ok(())
    });
}

// ---- correlation ----

fn feature_pair() -> impl Strategy<Value = (usize, usize, usize, Tensor<f64>, Tensor<f64>, Mask)> {
    (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
        (
            Just(c),
            Just(h),
            Just(w),
            tensor(vec![c, h, w], -3.0..3.0),
            tensor(vec![c, h, w], -3.0..3.0),
            (1usize..20, 1usize..20).prop_flat_map(|(mh, mw)| {
                proptest::collection::vec(0u8..=1, mh * mw).prop_map(move |mut d| {
                    d[0] = 1;
                    Mask { height: mh, width: mw, data: d }
                })
            }),
        )
    })
}

pub fn prop_correlation_in_unit_interval() {
    check("correlation map within [0, 1]", feature_pair(), |(_, h, w, q, s, m)| {
        let cells = support_cells(&m, h, w).unwrap();
        prop_assert!(cells.iter().any(|&c| c != 0));
        let map = correlation_map(&q, &s, &cells).unwrap();
        prop_assert!(map.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
        Ok(())
    });
}

pub fn prop_gap_ignores_background() {
    check("masked GAP ignores background features", feature_pair(), |(c, h, w, f, noise, m)| {
        let cells = support_cells(&m, h, w).unwrap();
        let a = masked_gap(&f, &cells).unwrap();
        let mut g = f.clone();
        for ch in 0..c {
            for p in 0..h * w {
                if cells[p] == 0 {
                    g[ch * h * w + p] = noise[ch * h * w + p] * 100.0;
                }
            }
        }
        let b = masked_gap(&g, &cells).unwrap();
        prop_assert_eq!(a.vector, b.vector);
        Ok(())
    });
}

pub fn prop_correlation_scale_invariant() {
    check("raw correlation is scale invariant", (feature_pair(), 0.01f64..100.0), |((c, h, w, q, s, m), k)| {
        let cells = support_cells(&m, h, w).unwrap();
        let (a, _) = raw_correlation(q.data(), s.data(), c, h * w, &cells);
        let scaled = s.map(|v| v * k);
        let (b, _) = raw_correlation(q.data(), scaled.data(), c, h * w, &cells);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        Ok(())
    });
}

pub fn prop_fuse_shots_permutation() {
    let strat = (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(k, d, hw)| {
        (
            proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), k),
            proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, hw), k),
            Just(hw),
            any::<u64>(),
        )
    });
    check("shot fusion ignores shot order", strat, |(vs, ms, hw, seed)| {
        let protos: Vec<_> = vs.iter().map(|v| Prototype { vector: v.clone() }).collect();
        let maps: Vec<_> = ms.iter().map(|m| CorrelationMap { values: Tensor::from_vec(&[1, hw], m.clone()).unwrap() }).collect();
        let (p1, m1) = fuse_shots(&protos, &maps).unwrap();
        let mut order: Vec<usize> = (0..protos.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<_> = order.iter().map(|&i| protos[i].clone()).collect();
        let mp: Vec<_> = order.iter().map(|&i| maps[i].clone()).collect();
        let (p2, m2) = fuse_shots(&pp, &mp).unwrap();
        for (a, b) in p1.vector.iter().zip(&p2.vector) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(m1.values.max_abs_diff(&m2.values) < 1e-12);
        Ok(())
    });
}

// ---- model ----

fn cells_and_masks() -> impl Strategy<Value = (CellLogits<f64>, MaskStack<f64>)> {
    (1usize..9, 1usize..10, 1usize..10).prop_flat_map(|(s, h, w)| {
        (
            tensor(vec![2, s, s], -6.0..6.0).prop_map(|logits| CellLogits { logits }),
            tensor(vec![s * s, h, w], -8.0..8.0).prop_map(|logits| MaskStack { logits }),
        )
    })
}

/// Explicit per-cell loop of the aggregation.
pub fn aggregate_loop(cells: &CellLogits<f64>, masks: &MaskStack<f64>) -> Vec<f64> {
    let s = cells.grid();
    let (h, w) = (masks.logits.shape()[1], masks.logits.shape()[2]);
    let mut out = vec![0.0; h * w];
    for k in 0..s * s {
        let (bg, fg) = (cells.logits[k], cells.logits[s * s + k]);
        let p = fg.exp() / (fg.exp() + bg.exp());
        for (px, o) in out.iter_mut().enumerate() {
            let m = masks.logits[k * h * w + px];
            *o += p / (1.0 + (-m).exp());
        }
    }
    out.iter().map(|v| v.clamp(SCORE_EPS, 1.0 - SCORE_EPS)).collect()
}

pub fn prop_aggregate_matches_loop() {
    check("aggregation equals the per-cell loop", cells_and_masks(), |(cells, masks)| {
        let (h, w) = (masks.logits.shape()[1], masks.logits.shape()[2]);
        let pred = aggregate(&cells, &masks, (h, w), Aggregation::SigmoidFirst).unwrap();
        let want = aggregate_loop(&cells, &masks);
        for (a, b) in pred.score_map.data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        Ok(())
    });
}

pub fn prop_score_map_bounds() {
    check("score map bounds and threshold", (cells_and_masks(), 1usize..20, 1usize..20), |((cells, masks), oh, ow)| {
        let pred = aggregate(&cells, &masks, (oh, ow), Aggregation::SigmoidFirst).unwrap();
        for (i, &v) in pred.score_map.data().iter().enumerate() {
            prop_assert!(v >= SCORE_EPS - 1e-15 && v <= 1.0 - SCORE_EPS + 1e-15);
            prop_assert_eq!(pred.binary_mask.data[i] == 1, v > 0.5);
        }
        Ok(())
    });
}

pub fn prop_cell_softmax() {
    check("cell probabilities sum to one", cells_and_masks(), |(cells, _)| {
        let s = cells.grid();
        let fg = cells.fg_probs();
        for k in 0..s * s {
            let (b, f) = (cells.logits[k], cells.logits[s * s + k]);
            let bg = 1.0 / (1.0 + (f - b).exp());
            prop_assert!((fg[k] + bg - 1.0).abs() < 1e-6);
            prop_assert!((0.0..=1.0).contains(&fg[k]));
        }
        Ok(())
    });
}

/// A 2-shot episode from random blobs.
pub fn blob_episode(seed: u64, side: usize, shots: usize) -> Episode {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pair = || {
        let (cy, cx, r) = (rng.random_range(8..side - 8), rng.random_range(8..side - 8), rng.random_range(4..8) as f64);
        let m = Mask::from_fn(side, side, |y, x| ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt() <= r);
        let mut img = RgbImage::new(side, side);
        for c in 0..3 {
            let (a, b) = (rng.random::<f32>(), rng.random::<f32>());
            for y in 0..side {
                for x in 0..side {
                    img.set(c, y, x, if m.get(y, x) { a } else { b });
                }
            }
        }
        (img, m)
    };
    let (query_image, query_mask) = pair();
    let support = (0..shots).map(|_| pair()).collect();
    Episode { query_image, query_mask, support, class_id: 1, original_size: (side, side) }
}

pub fn prop_support_order_invariance() {
    let model = small_model(3, 6);
    let strat = any::<u64>();
    let cfg = Config { cases: CASES, failure_persistence: None, ..Config::default() };
    let mut r = TestRunner::new(cfg);
    r.run(&strat, |seed| {
        let ep = blob_episode(seed, 24, 2);
        let mut swapped = ep.clone();
        swapped.support.swap(0, 1);
        let (a, ca, _) = model.predict(&ep).unwrap();
        let (b, cb, _) = model.predict(&swapped).unwrap();
        prop_assert!(a.score_map.max_abs_diff(&b.score_map) < 1e-12);
        prop_assert!(ca.logits.max_abs_diff(&cb.logits) < 1e-12);
        Ok(())
    })
    .unwrap_or_else(|e| panic!("property `support order invariance` failed: {e}"));
}

// ---- losses ----

pub fn prop_grid_target_unit_interval() {
    check("grid target within [0, 1]", (mask_strategy(30), 1usize..8), |(m, s)| {
        prop_assume!(m.height >= s && m.width >= s);
        let t = grid_target::<f64>(&m, s).unwrap();
        prop_assert!(t.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if m.count() == 0 || m.count() == m.data.len() {
            prop_assert!(t.values.data().iter().all(|v| v.abs() < 1e-5));
        }
        Ok(())
    });
}

pub fn prop_grid_loss_nonnegative() {
    let strat = (1usize..6).prop_flat_map(|s| (tensor(vec![2, s, s], -30.0..30.0), tensor(vec![s, s], 0.0..1.0), any::<bool>()));
    check("grid loss is non-negative and zero on empty targets", strat, |(logits, target, zero)| {
        let cells = CellLogits { logits };
        let s = cells.grid();
        let t = if zero { Tensor::zeros(&[s, s]) } else { target };
        let l = grid_loss(&cells, &GridTarget { values: t }).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
        if zero {
            prop_assert_eq!(l, 0.0);
        }
        Ok(())
    });
}

pub fn prop_grid_loss_zero_when_confident() {
    let strat = (1usize..6).prop_flat_map(|s| (tensor(vec![s, s], 0.0..1.0), tensor(vec![2, s, s], -2.0..2.0), proptest::collection::vec(any::<bool>(), s * s)));
    check("grid loss vanishes when weighted cells are certain", strat, |(target, mut logits, confident)| {
        let s = target.shape()[0];
        let k = s * s;
        for c in 0..k {
            if target[c] > 0.0 || confident[c] {
                logits.data_mut()[c] = -40.0;
                logits.data_mut()[k + c] = 40.0;
            }
        }
        let l = grid_loss(&CellLogits { logits: logits.clone() }, &GridTarget { values: target.clone() }).unwrap();
        prop_assert!(l.abs() < 1e-12, "{l}");
        // a weighted cell that is not certain makes the loss positive
        if let Some(c) = (0..k).find(|&c| target[c] > 1e-3) {
            logits.data_mut()[k + c] = 0.0;
            logits.data_mut()[c] = 0.0;
            let l = grid_loss(&CellLogits { logits }, &GridTarget { values: target }).unwrap();
            prop_assert!(l > 0.0);
        }
        Ok(())
    });
}

pub fn prop_pixel_loss_symmetry() {
    let strat = (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(1e-6f64..1.0 - 1e-6, h * w),
            proptest::collection::vec(0u8..=1, h * w),
            Just((h, w)),
        )
    });
    check("pixel loss symmetric under complement", strat, |(p, y, (h, w))| {
        let score = Tensor::from_vec(&[h, w], p.clone()).unwrap();
        let flipped = Tensor::from_vec(&[h, w], p.iter().map(|v| 1.0 - v).collect()).unwrap();
        let gt = Mask { height: h, width: w, data: y.clone() };
        let gtf = Mask { height: h, width: w, data: y.iter().map(|v| 1 - v).collect() };
        let a = pixel_loss(&score, &gt, PixelLossKind::Bce).unwrap();
        let b = pixel_loss(&flipped, &gtf, PixelLossKind::Bce).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        prop_assert!(a >= 0.0);
        Ok(())
    });
}

pub fn prop_total_loss_linear() {
    check("total loss is linear in lambda", (0.0f64..10.0, 0.0f64..10.0, 0.0f64..5.0), |(p, g, l)| {
        let r = total_loss(p, g, l);
        prop_assert!((r.total - (p + l * g)).abs() < 1e-9);
        prop_assert!((total_loss(p, g, 2.0).total - total_loss(p, g, 1.0).total - g).abs() < 1e-9);
        Ok(())
    });
}

// ---- metrics ----

fn episodes_for_metrics() -> impl Strategy<Value = Vec<(Mask, Mask, u32)>> {
    proptest::collection::vec((mask_pair(6), 1u32..4), 1..12).prop_map(|v| v.into_iter().map(|((a, b), c)| (a, b, c)).collect())
}

pub fn prop_accumulator_order_invariant() {
    check("accumulator independent of update order", (episodes_for_metrics(), any::<u64>()), |(eps, seed)| {
        let mut a = MetricsAccumulator::new();
        for (p, g, c) in &eps {
            a.update(p, g, *c).unwrap();
        }
        let mut shuffled = eps.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut b = MetricsAccumulator::new();
        for (p, g, c) in &shuffled {
            b.update(p, g, *c).unwrap();
        }
        prop_assert_eq!(&a, &b);
        let (left, right) = eps.split_at(eps.len() / 2);
        let mut m1 = MetricsAccumulator::new();
        let mut m2 = MetricsAccumulator::new();
        left.iter().for_each(|(p, g, c)| m1.update(p, g, *c).unwrap());
        right.iter().for_each(|(p, g, c)| m2.update(p, g, *c).unwrap());
        m1.merge(&m2);
        prop_assert_eq!(&a, &m1);
        Ok(())
    });
}

pub fn prop_metric_ranges() {
    check("metrics within [0, 1] and counts consistent", episodes_for_metrics(), |eps| {
        let mut a = MetricsAccumulator::new();
        for (p, g, c) in &eps {
            a.update(p, g, *c).unwrap();
        }
        for mode in [IouMode::Pooled, IouMode::Mean] {
            prop_assert!((0.0..=1.0).contains(&a.miou(mode)));
            prop_assert!((0.0..=1.0).contains(&a.fb_iou(mode)));
        }
        for n in a.per_class.values().chain([&a.foreground, &a.background]) {
            prop_assert!(n.intersection <= n.union);
        }
        Ok(())
    });
}

pub fn prop_iou_symmetric() {
    check("binary IoU is symmetric", mask_pair(12), |(a, b)| {
        let x = binary_iou(&a, &b).unwrap();
        prop_assert_eq!(x, binary_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        Ok(())
    });
}

// ---- checkpoints ----

pub fn prop_checkpoint_roundtrip() {
    let strat = (
        proptest::collection::vec((proptest::collection::vec(1usize..4, 0..4), "[a-z.]{1,12}"), 0..5),
        any::<u64>(),
        any::<bool>(),
    );
    check("checkpoint bytes round-trip exactly", strat, |(specs, seed, with_opt)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || {
            use rand::Rng;
            f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)
        };
        let params: Vec<(String, Tensor<f32>)> = specs.iter().map(|(shape, name)| (name.clone(), Tensor::from_fn(shape, |_| next()))).collect();
        let moments = |p: &Vec<(String, Tensor<f32>)>| p.iter().map(|(_, t)| t.map(|v| v * 0.5)).collect::<Vec<_>>();
        let ckpt = Checkpoint {
            config: serde_json::json!({ "seed": seed }),
            epoch: seed % 100,
            step: seed % 1000,
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(seed)),
            optimizer: with_opt.then(|| OptimizerState { lr: 1e-4, step: 3, m: moments(&params), v: moments(&params) }),
            params,
        };
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert!(back == ckpt);
        Ok(())
    });
}

/// Every property, by name.
pub fn all_properties() -> Vec<(&'static str, fn())> {
    vec![
        ("folds partition classes", prop_folds_partition),
        ("sampled supports non-empty", prop_sampled_supports_nonempty),
        ("sampler deterministic", prop_sampling_deterministic),
        ("generator deterministic", prop_generator_deterministic),
        ("masks stay binary", prop_masks_stay_binary),
        ("feature geometry", prop_feature_geometry),
        ("tiny backbone deterministic", prop_tiny_backbone_deterministic),
        ("correlation in [0,1]", prop_correlation_in_unit_interval),
        ("GAP ignores background", prop_gap_ignores_background),
        ("correlation scale invariant", prop_correlation_scale_invariant),
        ("fuse_shots permutation invariant", prop_fuse_shots_permutation),
        ("aggregate equals loop", prop_aggregate_matches_loop),
        ("score map bounds", prop_score_map_bounds),
        ("cell softmax", prop_cell_softmax),
        ("support order invariance", prop_support_order_invariance),
        ("grid target in [0,1]", prop_grid_target_unit_interval),
        ("grid loss non-negative", prop_grid_loss_nonnegative),
        ("grid loss zero when confident", prop_grid_loss_zero_when_confident),
        ("pixel loss symmetry", prop_pixel_loss_symmetry),
        ("total loss linear", prop_total_loss_linear),
        ("accumulator order invariant", prop_accumulator_order_invariant),
        ("metric ranges", prop_metric_ranges),
        ("IoU symmetric", prop_iou_symmetric),
        ("checkpoint round-trip", prop_checkpoint_roundtrip),
    ]
}
