//! Finite-difference checks of the composite stages and of the full graph.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenseg::decoder::{fuse_step, refine_coarse, DecoderParams, SkipMode};
use tokenseg::diffgraph::{grad_check, grad_check_params, ParamStore, Tape, Tensor, Var};
use tokenseg::encoder::{encode, level_dims, project_tokens, EncoderParams, TokenLayout};
use tokenseg::tokenizer::{quantize_columns, Codebook, Strategy};
use tokenseg::volume::Dims;

const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random linear read-out so every output element contributes.
fn readout(t: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = t.value(y).shape().to_vec();
    let w = t.input(random(&mut ChaCha8Rng::seed_from_u64(seed), &shape));
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

fn assert_all(checks: &[tokenseg::diffgraph::gradcheck::ParamCheck], what: &str) {
    for c in checks {
        assert!(c.report.passed, "{what}: {} {:?}", c.name, c.report);
    }
}

#[test]
fn encoder_pyramid_and_projection() {
    let channels = [2, 3];
    let dims = Dims::new(6, 8, 7);
    let lattices = level_dims(dims, 2).unwrap();
    let grids = TokenLayout(vec![6, 2]).fit(&lattices).unwrap().grids(&lattices).unwrap();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = EncoderParams::register(&mut store, &channels, 3, &mut rng);
        common::jitter_biases(&mut store, seed);
        let x = random(&mut rng, &[1, 6, 8, 7]);
        let checks = grad_check_params(
            &mut store,
            |t| {
                let xv = t.input(x.clone());
                let levels = encode(t, xv, &params)?;
                let toks = project_tokens(t, &levels, &grids, &params)?;
                let a = readout(t, toks[0], seed);
                let b = readout(t, toks[1], seed + 100);
                let c = readout(t, levels[1], seed + 200);
                t.weighted_sum(&[(a, 1.0), (b, 1.0), (c, 0.5)])
            },
            TOL,
            200,
        )
        .unwrap();
        assert_all(&checks, "encoder");
    }
}

#[test]
fn decoder_refine_and_fuse() {
    let channels = [2, 3];
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = DecoderParams::register(&mut store, &channels, 4, &mut rng);
        common::jitter_biases(&mut store, seed);
        // Stage inputs are checked as parameters too.
        let coarse = store.add("in.coarse", random(&mut rng, &[3, 2, 3, 2]));
        let skip = store.add("in.skip", random(&mut rng, &[2, 4, 5, 3]));
        let checks = grad_check_params(
            &mut store,
            |t| {
                let g = t.param(coarse);
                let s = t.param(skip);
                let g = refine_coarse(t, g, &params)?;
                let g = fuse_step(t, g, s, &params.psi[0])?;
                Ok(readout(t, g, seed))
            },
            TOL,
            200,
        )
        .unwrap();
        assert_all(&checks, "decoder");
    }
}

/// The STE copies the downstream gradient to the token unchanged and sends
/// nothing to the codebook; the VQ term splits as embedding to the codebook
/// and commitment to the token.
#[test]
fn straight_through_and_vq_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, n, m, beta, denom) = (3, 5, 4, 0.25, 7.0);
    let x = random(&mut rng, &[c, n]);
    let cb = random(&mut rng, &[m, c]);
    let codebook = Codebook::new(cb.clone()).unwrap();
    let codes = quantize_columns(&x, &codebook).unwrap().codes;
    let up = random(&mut rng, &[c, n]);

    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let xv = t.input_with_grad(x.clone());
    let cv = t.input_with_grad(cb.clone());
    let q = t.quantize_ste(xv, cv, &codes).unwrap();
    for j in 0..n {
        for ch in 0..c {
            assert_eq!(t.value(q).data()[ch * n + j], cb.data()[codes[j] * c + ch]);
        }
    }
    let w = t.input(up.clone());
    let p = t.mul(q, w).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(xv).unwrap().data(), up.data());
    assert!(g.wrt(cv).map_or(true, |g| g.data().iter().all(|&v| v == 0.0)));

    let mut t = Tape::new(&store);
    let xv = t.input_with_grad(x.clone());
    let cv = t.input_with_grad(cb.clone());
    let l = t.vq_loss(xv, cv, &codes, beta, denom).unwrap();
    let g = t.backward(l).unwrap();
    let (gx, gc) = (g.wrt(xv).unwrap(), g.wrt(cv).unwrap());
    let mut want_c = vec![0.0; m * c];
    for j in 0..n {
        for ch in 0..c {
            let d = x.data()[ch * n + j] - cb.data()[codes[j] * c + ch];
            assert!((gx.data()[ch * n + j] - 2.0 * beta * d / denom).abs() < 1e-12);
            want_c[codes[j] * c + ch] -= 2.0 * d / denom;
        }
    }
    for (a, b) in gc.data().iter().zip(&want_c) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    // Held-fixed stop-gradients make the same split visible to central
    // differences.
    let r = grad_check(
        |t, xv| {
            let cv = t.input(cb.clone());
            let q = t.quantize_ste(xv, cv, &codes)?;
            let l = t.vq_loss(xv, cv, &codes, beta, denom)?;
            let r = readout(t, q, 11);
            t.weighted_sum(&[(r, 1.0), (l, 1.0)])
        },
        &x,
        TOL,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn full_graph_all_parameters() {
    for (i, strategy) in [Strategy::Combined, Strategy::Hierarchical, Strategy::Random].into_iter().enumerate() {
        for skip in [SkipMode::TokenGated, SkipMode::Dense] {
            let mut cfg = common::tiny_config(40 + i as u64);
            cfg.strategy = strategy;
            cfg.skip_mode = skip;
            let checks = common::full_graph_check(&cfg, 700 + i as u64, TOL, 48).unwrap();
            assert_eq!(checks.len(), tokenseg::model::Model::new(&cfg).unwrap().store.len());
            assert_all(&checks, &format!("{strategy} {skip}"));
        }
    }
}
