//! Fixtures shared by the integration targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenseg::config::Config;
use tokenseg::diffgraph::{grad_check_params, ParamStore};
use tokenseg::diffgraph::gradcheck::ParamCheck;
use tokenseg::model::{prepare_input, Model};
use tokenseg::trainer::Case;
use tokenseg::volume::{generate_phantom, Dims, PhantomRecipe};
use tokenseg::Result;

/// Three-level network on 8³ inputs: lattices 4³, 2³, 1³ with 12 + 2 + 1
/// candidates.
pub fn tiny_config(seed: u64) -> Config {
    let mut c = Config::default();
    c.set("channels", "2,3,4").unwrap();
    c.set("layout", "12,2,1").unwrap();
    c.token_dim = 4;
    c.k = 6;
    c.codebook_size = 8;
    c.seed = seed;
    c.validate().unwrap();
    c
}

pub fn tiny_recipe() -> PhantomRecipe {
    PhantomRecipe {
        dims: Dims::cube(8),
        min_radius: 1.5,
        max_radius: 3.0,
        ..Default::default()
    }
}

/// Phantom cases drawn from `recipe` with seeds `base..base + n`.
pub fn cases(recipe: &PhantomRecipe, base: u64, n: usize) -> Vec<Case> {
    (0..n as u64)
        .map(|i| {
            let (v, m) = generate_phantom(&recipe.sample(base + i).unwrap()).unwrap();
            Case::new(format!("p{:03}", base + i), v, m).unwrap()
        })
        .collect()
}

/// Phantom recipe of the 32³ benchmark, radii scaled with the cube side.
pub fn bench_recipe(side: usize) -> PhantomRecipe {
    PhantomRecipe {
        dims: Dims::cube(side),
        min_radius: side as f64 * 5.0 / 32.0,
        max_radius: side as f64 * 9.0 / 32.0,
        ..Default::default()
    }
}

/// Biases start at zero, which leaves ReLU units fed by empty regions dead
/// with a zero gradient; jitter them so the check sees live bias gradients.
pub fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let last = p.name.rsplit('.').next().unwrap_or("");
        if last.starts_with('b') {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
}

/// Finite-difference check of the total loss against every parameter of a
/// tiny model, for one seeded phantom and selection.
pub fn full_graph_check(config: &Config, case_seed: u64, tol: f64, per_param: usize) -> Result<Vec<ParamCheck>> {
    let model = Model::new(config)?;
    let case = &cases(&tiny_recipe(), case_seed, 1)[0];
    let (field, _) = prepare_input(&case.volume, config.normalization);
    let target: Vec<f64> = case.mask.labels.iter().map(|&v| f64::from(v)).collect();
    let dims = case.volume.dims;
    let mut store = model.store.clone();
    jitter_biases(&mut store, case_seed ^ 0xB1A5);
    grad_check_params(
        &mut store,
        |t| {
            let f = model.forward(t, &field, dims, Some(&target), case_seed)?;
            Ok(f.loss.expect("target given").total)
        },
        tol,
        per_param,
    )
}
