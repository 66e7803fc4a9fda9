//! The full network: encoder pyramid, token scoring and selection, sparse
//! decoder and the training loss, recorded on one tape per volume.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Normalization};
use crate::decoder::{fuse_step, predict, refine_coarse, DecoderParams, SkipMode};
use crate::diffgraph::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::{encode, level_dims, project_tokens, EncoderParams, LevelGrid, TokenCandidate, CandidatePool};
use crate::error::{Error, Result};
use crate::tokenizer::{boundary_proximity, quantize_columns, score_pool, select_strategy, Codebook, QuantizedPool, ScoreRecord, SparseTokenSet};
use crate::volume::{normalize_intensity, Dims, Volume3D};

/// Normalised input field in 64-bit, plus whether the scan was constant.
pub fn prepare_input(v: &Volume3D, scheme: Normalization) -> (Vec<f64>, bool) {
    match scheme {
        Normalization::MinMax => {
            let (n, flat) = normalize_intensity(v);
            (n.to_f64(), flat)
        }
        Normalization::ZScore => {
            let x = v.to_f64();
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / x.len() as f64;
            if var == 0.0 {
                return (vec![0.0; x.len()], true);
            }
            let sd = var.sqrt();
            (x.iter().map(|a| (a - mean) / sd).collect(), false)
        }
    }
}

/// Values produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub prob: Var,
    pub loss: Option<LossTerms>,
    pub tokens: SparseTokenSet,
    pub quantized: QuantizedPool,
    pub records: Vec<ScoreRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub dice: f64,
    pub bce: f64,
    pub vq: f64,
}

/// Output of inference on one volume.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub prob: Vec<f64>,
    pub tokens: SparseTokenSet,
    pub codes: Vec<usize>,
}

#[derive(Debug)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub codebook: ParamId,
    grids: RefCell<Vec<(Dims, Vec<LevelGrid>)>>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            codebook: self.codebook,
            grids: RefCell::new(self.grids.borrow().clone()),
        }
    }
}

impl Model {
    /// Fresh parameters drawn from the config seed.
    pub fn new(config: &Config) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::register(&mut store, &config.channels, config.token_dim, &mut rng);
        let decoder = DecoderParams::register(&mut store, &config.channels, config.token_dim, &mut rng);
        let sigma = 1.0 / (config.token_dim as f64).sqrt();
        let cb = Codebook::gaussian(config.codebook_size, config.token_dim, sigma, config.seed ^ 0xC0DE)?;
        let codebook = store.add("codebook", cb.into_tensor());
        Ok(Model {
            config: config.clone(),
            store,
            encoder,
            decoder,
            codebook,
            grids: RefCell::new(Vec::new()),
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match.
    pub fn from_params(config: &Config, params: Vec<(String, Tensor)>) -> Result<Model> {
        let mut model = Model::new(config)?;
        if params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, config expects {}",
                params.len(),
                model.store.len()
            )));
        }
        for (name, t) in params {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint tensor {name:?} not in model")))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(model)
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.store.get(self.codebook).value.clone())
    }

    /// Level grids for an input of `dims`, refitting the layout if needed.
    pub fn grids(&self, dims: Dims) -> Result<Vec<LevelGrid>> {
        if let Some((_, g)) = self.grids.borrow().iter().find(|(d, _)| *d == dims) {
            return Ok(g.clone());
        }
        let lattices = level_dims(dims, self.config.levels())?;
        let grids = self.config.layout.fit(&lattices)?.grids(&lattices)?;
        self.grids.borrow_mut().push((dims, grids.clone()));
        Ok(grids)
    }

    /// Projected, pre-quantization candidate tokens of one volume.
    pub fn candidates(&self, field: &[f64], dims: Dims) -> Result<CandidatePool> {
        let mut tape = Tape::new(&self.store);
        let x = tape.input(Tensor::from_field(dims, field.to_vec())?);
        let grids = self.grids(dims)?;
        let levels = encode(&mut tape, x, &self.encoder)?;
        let toks = project_tokens(&mut tape, &levels, &grids, &self.encoder)?;
        let mut tokens = Vec::new();
        for (grid, &t) in grids.iter().zip(&toks) {
            let v = tape.value(t);
            let n = grid.count();
            for j in 0..n {
                tokens.push(TokenCandidate {
                    feature: (0..v.shape()[0]).map(|c| v.data()[c * n + j]).collect(),
                    level: grid.level,
                    coord: grid.anchor(j),
                    cell: grid.cell_extent(j),
                });
            }
        }
        Ok(CandidatePool {
            tokens,
            counts: grids.iter().map(LevelGrid::count).collect(),
        })
    }

    /// Re-draws the codebook from a zero-mean Gaussian whose scale matches
    /// the mean candidate norm of `fields`.
    pub fn init_codebook(&mut self, fields: &[(&[f64], Dims)]) -> Result<()> {
        let (mut acc, mut count) = (0.0, 0usize);
        for &(f, dims) in fields {
            for t in self.candidates(f, dims)?.tokens {
                acc += t.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
                count += 1;
            }
        }
        let mean = if count > 0 { acc / count as f64 } else { 0.0 };
        let sigma = if mean > 0.0 { mean / (self.config.token_dim as f64).sqrt() } else { 1e-3 };
        let cb = Codebook::gaussian(self.config.codebook_size, self.config.token_dim, sigma, self.config.seed ^ 0xC0DE)?;
        self.store.get_mut(self.codebook).value = cb.into_tensor();
        Ok(())
    }

    /// Records the forward pass of one volume. With a target, the weighted
    /// training loss is recorded too. `selection_seed` drives the random
    /// selection strategy only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        field: &[f64],
        dims: Dims,
        target: Option<&[f64]>,
        selection_seed: u64,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let grids = self.grids(dims)?;
        let x = tape.input(Tensor::from_field(dims, field.to_vec())?);
        let levels = encode(tape, x, &self.encoder)?;
        let toks = project_tokens(tape, &levels, &grids, &self.encoder)?;

        let cb_var = tape.param(self.codebook);
        let codebook = Codebook::new(tape.value(cb_var).clone())?;
        let n: usize = grids.iter().map(LevelGrid::count).sum();
        let mut quantized = QuantizedPool {
            codes: Vec::with_capacity(n),
            vectors: Vec::with_capacity(n),
            distances: Vec::with_capacity(n),
        };
        let mut qvars = Vec::with_capacity(toks.len());
        let mut vq_terms = Vec::with_capacity(toks.len());
        for &t in &toks {
            let q = quantize_columns(tape.value(t), &codebook)?;
            qvars.push(tape.quantize_ste(t, cb_var, &q.codes)?);
            vq_terms.push((tape.vq_loss(t, cb_var, &q.codes, cfg.weights.beta, n as f64)?, 1.0));
            quantized.codes.extend(q.codes);
            quantized.vectors.extend(q.vectors);
            quantized.distances.extend(q.distances);
        }

        let boundary = boundary_proximity(field, dims, &grids)?;
        let records = score_pool(&quantized, &boundary, cfg.codebook_size)?;
        let counts: Vec<usize> = grids.iter().map(LevelGrid::count).collect();
        let picked = select_strategy(cfg.strategy, &records, &counts, cfg.k.min(n), selection_seed)?;

        let mut offsets = Vec::with_capacity(counts.len());
        let mut acc = 0;
        for &c in &counts {
            offsets.push(acc);
            acc += c;
        }
        let mut inputs = Vec::with_capacity(grids.len());
        for (l, grid) in grids.iter().enumerate() {
            let local: Vec<usize> = picked
                .iter()
                .filter(|&&i| i >= offsets[l] && i < offsets[l] + counts[l])
                .map(|&i| i - offsets[l])
                .collect();
            let c_s = cfg.channels[l];
            let sparse = if local.is_empty() {
                tape.input(Tensor::zeros(&Tensor::feature_shape(c_s, grid.lattice)))
            } else {
                let sel = tape.select_columns(qvars[l], &local)?;
                let w = tape.param(self.decoder.back[l]);
                let back = tape.pointwise(sel, w, None)?;
                let sites: Vec<usize> = local.iter().map(|&j| grid.anchor_site(j)).collect();
                tape.scatter(back, grid.lattice, &sites)?
            };
            let x_s = match cfg.skip_mode {
                SkipMode::Dense if l + 1 == grids.len() => sparse,
                SkipMode::Dense => levels[l],
                SkipMode::TokenGated => {
                    let mut mask = vec![0.0; grid.lattice.len()];
                    for &j in &local {
                        let b = grid.bounds(j);
                        for d in b[0].0..b[0].1 {
                            for h in b[1].0..b[1].1 {
                                for w in b[2].0..b[2].1 {
                                    mask[grid.lattice.index(d, h, w)] = 1.0;
                                }
                            }
                        }
                    }
                    let gated = tape.mask_mul(levels[l], mask)?;
                    tape.add(sparse, gated)?
                }
            };
            inputs.push(x_s);
        }

        let top = inputs.len() - 1;
        let mut g = refine_coarse(tape, inputs[top], &self.decoder)?;
        for s in (0..top).rev() {
            g = fuse_step(tape, g, inputs[s], &self.decoder.psi[s])?;
        }
        let prob = predict(tape, g, &self.decoder, dims)?;

        let loss = match target {
            None => None,
            Some(y) => {
                let dice = tape.dice_loss(prob, y, cfg.weights.eps)?;
                let bce = tape.bce_loss(prob, y, crate::objective::BCE_CLAMP)?;
                let vq = tape.weighted_sum(&vq_terms)?;
                let terms = [
                    (dice, cfg.weights.dice),
                    (bce, cfg.weights.bce),
                    (vq, cfg.weights.vq),
                ];
                Some(LossTerms {
                    total: tape.weighted_sum(&terms)?,
                    dice: tape.value(dice).item(),
                    bce: tape.value(bce).item(),
                    vq: tape.value(vq).item(),
                })
            }
        };
        let pool = CandidatePool {
            tokens: grids
                .iter()
                .flat_map(|g| {
                    (0..g.count()).map(move |j| TokenCandidate {
                        feature: Vec::new(),
                        level: g.level,
                        coord: g.anchor(j),
                        cell: g.cell_extent(j),
                    })
                })
                .collect(),
            counts,
        };
        let tokens = SparseTokenSet::build(&pool, &quantized, &records, &picked);
        Ok(Forward {
            prob,
            loss,
            tokens,
            quantized,
            records,
        })
    }

    /// Probability volume and selected tokens for a raw volume.
    pub fn predict(&self, v: &Volume3D, selection_seed: u64) -> Result<Prediction> {
        let (field, _) = prepare_input(v, self.config.normalization);
        let mut tape = Tape::new(&self.store);
        let f = self.forward(&mut tape, &field, v.dims, None, selection_seed)?;
        let prob = tape.value(f.prob).data().to_vec();
        if prob.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("predicted probability".into()));
        }
        Ok(Prediction {
            prob,
            tokens: f.tokens,
            codes: f.quantized.codes,
        })
    }
}
