//! Finite-difference gradient checks of every building block.
//!
//! Each block is built in `f32`, cast to `f64` and checked with central
//! differences on its inputs and parameters. Biases start at zero in the
//! model, so they are randomized here to exercise their full backward rules.

use crate::bfe::{Bfe, BfeConfig};
use crate::data::{generate_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::model::{compute_losses, Model, ModelConfig};
use crate::nn::{Ffn, Hdc, Init};
use crate::tensor::gradcheck::{GradCheck, GradCheckReport};
use crate::tensor::{BackwardFault, Graph, NodeId, ParamStore, Rng, Tensor};
use crate::tfr::{TfrConfig, TfrStack};
use crate::tpp::{Tpp, TppConfig};
use crate::train::Example;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Checkable blocks in the order they are run.
pub const BLOCKS: [&str; 6] = ["tpp", "bfe", "tfr", "hdc", "ffn", "model"];

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub block: &'static str,
    pub report: GradCheckReport,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Init<'_>) -> Result<T>) -> Result<(ParamStore<f64>, T)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let block = f(&mut Init::new(&mut store, &mut rng))?;
    let mut rng = Rng::new(seed ^ 0x5eed);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id);
        if name.ends_with("bias") || name.ends_with("beta") {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::uniform(shape, -0.5, 0.5, &mut rng);
        }
    }
    Ok((store.cast(), block))
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut Rng::new(seed))
}

/// `sum(y ⊙ w)` for a fixed random `w`, so every output coordinate matters.
fn probe(g: &mut Graph<'_, f64>, ys: &[NodeId], seed: u64) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(ys.len());
    for (k, &y) in ys.iter().enumerate() {
        let w = g.input(rand(g.shape(y), seed + k as u64));
        let m = g.mul(y, w)?;
        terms.push(g.sum(m));
    }
    g.sum_all(&terms)
}

/// Checks one block by name, optionally with a deliberately wrong backward
/// rule in place.
pub fn check_block(name: &str, fault: Option<BackwardFault>) -> Result<BlockReport> {
    let checker = GradCheck {
        fault,
        ..GradCheck::default()
    };
    let (block, report) = match name {
        "tpp" => {
            let cfg = TppConfig {
                num_tasks: 2,
                c_p: 8,
                c_a: 8,
                heads: 2,
            };
            let (store, tpp) = build(1, |i| Tpp::new(i, cfg))?;
            let xs = [("p0", rand(&[8, 2, 2], 2)), ("p1", rand(&[8, 2, 2], 3))];
            let r = checker.run(&store, &xs, true, |g, ids| {
                let out = tpp.forward(g, ids)?;
                probe(g, &out, 4)
            })?;
            ("tpp", r)
        }
        "bfe" => {
            let cfg = BfeConfig {
                d: 2,
                l: 2,
                heads: 2,
                c_s: 4,
                c_p: 4,
                c_a: 4,
            };
            let (store, bfe) = build(5, |i| Bfe::new(i, cfg))?;
            let xs = [("s", rand(&[4, 4, 4], 6)), ("p0", rand(&[4, 4, 4], 7)), ("p1", rand(&[4, 4, 4], 8))];
            let r = checker.run(&store, &xs, true, |g, ids| {
                let y = bfe.forward(g, ids[0], &ids[1..])?;
                probe(g, &[y], 9)
            })?;
            ("bfe", r)
        }
        "tfr" => {
            let cfg = TfrConfig {
                depth: 2,
                c_a: 3,
                c_p: 3,
            };
            let (store, tfr) = build(10, |i| TfrStack::new(i, cfg))?;
            let xs = [("bridge", rand(&[3, 6, 6], 11)), ("p", rand(&[3, 6, 6], 12))];
            let r = checker.run(&store, &xs, true, |g, ids| {
                let y = tfr.forward(g, ids[0], ids[1])?;
                probe(g, &[y], 13)
            })?;
            ("tfr", r)
        }
        "hdc" => {
            let (store, hdc) = build(14, |i| Ok(Hdc::with_residual(i, 5, 3, Some(2))))?;
            let xs = [("x", rand(&[5, 7, 7], 15))];
            let r = checker.run(&store, &xs, true, |g, ids| {
                let y = hdc.forward(g, ids[0])?;
                probe(g, &[y], 16)
            })?;
            ("hdc", r)
        }
        "ffn" => {
            let (store, ffn) = build(17, |i| Ok(Ffn::new(i, 6)))?;
            let xs = [("x", rand(&[4, 6], 18))];
            let r = checker.run(&store, &xs, true, |g, ids| {
                let y = ffn.forward(g, ids[0])?;
                probe(g, &[y], 19)
            })?;
            ("ffn", r)
        }
        "model" => ("model", check_model(&checker)?),
        other => {
            return Err(Error::config(format!(
                "unknown block {other:?} (expected one of {})",
                BLOCKS.join(", ")
            )))
        }
    };
    Ok(BlockReport { block, report })
}

/// Full training loss of the 16×16 two-task model on a synthetic scene,
/// checked on a random subset of coordinates of every tensor.
fn check_model(checker: &GradCheck) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny();
    let (store, model) = Model::new_random(cfg.clone(), 20)?;
    let store = store.cast::<f64>();
    let scene = SceneConfig {
        height: cfg.image_h,
        width: cfg.image_w,
        classes: 3,
        snap: 2,
        ..SceneConfig::default()
    };
    let ex = Example::new(&generate_scene(&scene, 21)?, &cfg.tasks)?;
    let checker = GradCheck {
        max_coords: Some(4),
        seed: 22,
        ..checker.clone()
    };
    checker.run(&store, &[("image", ex.image.cast())], true, |g, ids| {
        let out = model.forward(g, ids[0])?;
        let losses = compute_losses(g, &model.cfg.tasks, &out, &ex.sup)?;
        Ok(losses.total)
    })
}

/// Runs every block in [`BLOCKS`] order.
pub fn check_all(fault: Option<BackwardFault>) -> Result<Vec<BlockReport>> {
    BLOCKS.iter().map(|b| check_block(b, fault)).collect()
}
