//! Finite-difference checks shared by the gradient tests and the acceptance run.

use manet::autograd::Graph;
use manet::imaging::Mask;
use manet::losses::{self, grid_loss, grid_target, pixel_loss, PixelLossKind};
use manet::model::{Batch, CellLogits, Manet};
use manet::params::ParamGroup;
use manet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const LOSS_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|)` over whole vectors; 0 when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        return 0.0;
    }
    norm(&diff) / scale
}

pub fn central(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += STEP;
            let mut m = x.clone();
            m.data_mut()[i] -= STEP;
            (f(&p) - f(&m)) / (2.0 * STEP)
        })
        .collect()
}

fn blob(side: usize, rng: &mut ChaCha8Rng) -> Mask {
    let (cy, cx) = (rng.random_range(0..side), rng.random_range(0..side));
    let r = rng.random_range(1.0..side as f64 / 2.0);
    Mask::from_fn(side, side, |y, x| ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt() <= r)
}

/// Largest relative error of the grid loss gradient over several grid sizes.
pub fn grid_loss_error() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in [1, 3, 6, 12] {
        let logits = Tensor::from_fn(&[2, s, s], |_| rng.random_range(-3.0..3.0));
        let gt = blob(48, &mut rng);
        let target = grid_target::<f64>(&gt, s).unwrap();
        let mut g = Graph::new();
        let x = g.variable(logits.clone().reshape(&[1, 2, s, s]).unwrap());
        let l = g.grid_nll(x, target.values.data().to_vec());
        let analytic = g.backward(l).get(x).unwrap().data().to_vec();
        let numeric = central(&logits, |t| grid_loss(&CellLogits { logits: t.clone() }, &target).unwrap());
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Largest relative error of the pixel loss gradient, both loss forms.
pub fn pixel_loss_error() -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for kind in [PixelLossKind::Bce, PixelLossKind::PositiveOnly] {
        for (h, w) in [(1, 1), (5, 7), (16, 16)] {
            let score = Tensor::from_fn(&[h, w], |_| rng.random_range(0.05..0.95));
            let gt = Mask { height: h, width: w, data: (0..h * w).map(|_| rng.random_bool(0.4) as u8).collect() };
            let mut g = Graph::new();
            let x = g.variable(score.clone());
            let l = g.bce(x, gt.to_tensor::<f64>().into_data(), kind == PixelLossKind::PositiveOnly);
            let analytic = g.backward(l).get(x).unwrap().data().to_vec();
            let numeric = central(&score, |t| pixel_loss(t, &gt, kind).unwrap());
            if gt.count() == 0 && kind == PixelLossKind::PositiveOnly {
                assert!(analytic.iter().chain(&numeric).all(|v| *v == 0.0));
                continue;
            }
            worst = worst.max(rel_err(&analytic, &numeric));
        }
    }
    worst
}

fn episode_loss(model: &Manet<f64>, ep: &manet::episodes::Episode, lambda: f64) -> f64 {
    let batch = Batch::<f64>::from_episodes(std::slice::from_ref(ep), model.backbone_config.mean, model.backbone_config.std).unwrap();
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward_graph(&mut g, &p, &batch, (64, 64)).unwrap();
    let l = losses::attach(&mut g, &out, &[ep.query_mask.clone()], model.config.grid, lambda, PixelLossKind::Bce).unwrap();
    g.value(l.total)[0]
}

/// Relative error of the total loss gradient for 10 random head parameters
/// on a 64x64 episode with the tiny backbone.
pub fn end_to_end_error() -> f64 {
    let mut model = super::small_model(9, 6);
    let ep = super::blob_episode(21, 64, 1);
    let analytic_all = {
        let batch = Batch::<f64>::from_episodes(std::slice::from_ref(&ep), model.backbone_config.mean, model.backbone_config.std).unwrap();
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let out = model.forward_graph(&mut g, &p, &batch, (64, 64)).unwrap();
        let l = losses::attach(&mut g, &out, &[ep.query_mask.clone()], model.config.grid, 1.0, PixelLossKind::Bce).unwrap();
        let grads = g.backward(l.total);
        model.params.ids().map(|id| grads.get(p.var(id)).cloned()).collect::<Vec<_>>()
    };
    let head: Vec<usize> = (0..model.params.len()).filter(|&i| model.params.params()[i].group == ParamGroup::Head).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..10 {
        let pi = head[rng.random_range(0..head.len())];
        let k = rng.random_range(0..model.params.params()[pi].value.len());
        analytic.push(analytic_all[pi].as_ref().expect("head parameter without gradient")[k]);
        let orig = model.params.params()[pi].value[k];
        model.params.params_mut()[pi].value.data_mut()[k] = orig + STEP;
        let up = episode_loss(&model, &ep, 1.0);
        model.params.params_mut()[pi].value.data_mut()[k] = orig - STEP;
        let down = episode_loss(&model, &ep, 1.0);
        model.params.params_mut()[pi].value.data_mut()[k] = orig;
        numeric.push((up - down) / (2.0 * STEP));
    }
    assert!(numeric.iter().any(|v| v.abs() > 1e-8), "all sampled derivatives vanish: {numeric:?}");
    rel_err(&analytic, &numeric)
}
