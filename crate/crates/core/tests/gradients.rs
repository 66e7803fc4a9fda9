//! Finite-difference checks for every differentiable kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenseg::diffgraph::{grad_check, GradCheckReport, Tensor};
use tokenseg::volume::Dims;

const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_shape(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [
        rng.random_range(1..=4),
        rng.random_range(1..=6),
        rng.random_range(1..=6),
        rng.random_range(1..=6),
    ]
}

fn assert_pass(what: &str, r: GradCheckReport) {
    assert!(r.passed, "{what}: {r:?}");
}

/// Weighted sum with fixed random weights so every output element matters.
fn probe(t: &mut tokenseg::diffgraph::Tape, y: tokenseg::diffgraph::Var, seed: u64) -> tokenseg::diffgraph::Var {
    let shape = t.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.input(random(&mut rng, &shape));
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

#[test]
fn conv3d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..20 {
        let shape = random_shape(&mut rng);
        let cout = rng.random_range(1..=3);
        let k = if case % 4 == 3 { 1 } else { 3 };
        let stride = if case % 2 == 0 { 1 } else { 2 };
        let w = random(&mut rng, &[cout, shape[0], k, k, k]);
        let b = random(&mut rng, &[cout]);
        let x = random(&mut rng, &shape);
        let r = grad_check(
            |t, x| {
                let w = t.input(w.clone());
                let b = t.input(b.clone());
                let y = t.conv3d(x, w, Some(b), stride)?;
                Ok(probe(t, y, case))
            },
            &x,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("conv case {case} {shape:?} k{k} s{stride}"), r);
    }
}

#[test]
fn conv3d_weight_gradients() {
    // differentiate with respect to the kernel by treating it as the input
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 4, 4, 4]);
    let w = random(&mut rng, &[1, 1, 3, 3, 3]);
    for stride in [1, 2] {
        let r = grad_check(
            |t, w| {
                let xv = t.input(x.clone());
                let y = t.conv3d(xv, w, None, stride)?;
                Ok(probe(t, y, 5))
            },
            &w,
            TOL,
        )
        .unwrap();
        assert_pass("conv weight", r);
    }
}

#[test]
fn pooling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..20 {
        let shape = random_shape(&mut rng);
        let cell = [
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        ];
        let x = random(&mut rng, &shape);
        let r = grad_check(
            |t, x| {
                let y = t.avg_pool(x, cell)?;
                Ok(probe(t, y, case))
            },
            &x,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("pool {shape:?} {cell:?}"), r);
    }
}

#[test]
fn upsample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..20 {
        let shape = random_shape(&mut rng);
        let x = random(&mut rng, &shape);
        let extra = (case % 3) as usize;
        let out = Dims::new(2 * shape[1] + usize::from(extra == 1), 2 * shape[2], 2 * shape[3] - usize::from(extra == 2));
        let r = grad_check(
            |t, x| {
                let y = t.upsample2(x, out)?;
                Ok(probe(t, y, case))
            },
            &x,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("upsample {shape:?} -> {out}"), r);
    }
}

#[test]
fn pointwise_concat_and_activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let shape = random_shape(&mut rng);
        let other = random(&mut rng, &[2, shape[1], shape[2], shape[3]]);
        let cout = rng.random_range(1..=3);
        let w = random(&mut rng, &[cout, shape[0] + 2]);
        let b = random(&mut rng, &[cout]);
        let mask: Vec<f64> = (0..shape[1] * shape[2] * shape[3]).map(|i| (i % 3) as f64 * 0.5).collect();
        let x = random(&mut rng, &shape);
        let r = grad_check(
            |t, x| {
                let o = t.input(other.clone());
                let c = t.concat(x, o)?;
                let m = t.mask_mul(c, mask.clone())?;
                let w = t.input(w.clone());
                let b = t.input(b.clone());
                let y = t.pointwise(m, w, Some(b))?;
                let y = if case % 2 == 0 { t.sigmoid(y) } else { t.relu(y) };
                Ok(probe(t, y, case))
            },
            &x,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("pointwise chain {shape:?}"), r);
    }
}

#[test]
fn token_plumbing_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[3, 7]);
    let r = grad_check(
        |t, x| {
            let s = t.select_columns(x, &[6, 1, 4])?;
            let g = t.scatter(s, Dims::new(2, 2, 2), &[5, 0, 2])?;
            Ok(probe(t, g, 1))
        },
        &x,
        TOL,
    )
    .unwrap();
    assert_pass("select/scatter", r);
}

#[test]
fn loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..20 {
        let n = rng.random_range(2..=64);
        let logits = random(&mut rng, &[1, 1, 1, n]);
        let target: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect();
        let r = grad_check(
            |t, x| {
                let p = t.sigmoid(x);
                let dice = t.dice_loss(p, &target, 1e-5)?;
                let bce = t.bce_loss(p, &target, 1e-7)?;
                t.weighted_sum(&[(dice, 1.0), (bce, 0.5)])
            },
            &logits,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("dice+bce case {case}"), r);
    }
}

#[test]
fn composite_conv_relu_pointwise_sigmoid_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..20u64 {
        let x = random(&mut rng, &[1, 4, 4, 4]);
        let w1 = random(&mut rng, &[3, 1, 3, 3, 3]);
        let w2 = random(&mut rng, &[1, 3]);
        let target: Vec<f64> = (0..64).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let r = grad_check(
            |t, x| {
                let w1 = t.input(w1.clone());
                let w2 = t.input(w2.clone());
                let h = t.conv3d(x, w1, None, 1)?;
                let h = t.relu(h);
                let y = t.pointwise(h, w2, None)?;
                let p = t.sigmoid(y);
                t.bce_loss(p, &target, 1e-7)
            },
            &x,
            TOL,
        )
        .unwrap();
        assert_pass(&format!("composite case {case}"), r);
    }
}
