//! Full network: toy pyramid encoder, per-task preliminary decoders with deep
//! supervision, task pattern propagation at the coarsest scale, per-scale
//! bridge feature extraction and task feature refinement with top-down
//! fusion, multi-scale aggregation and task heads.
//!
//! The multi-task baseline is the same network with the three interaction
//! modules removed, so disabling them at run time reproduces it exactly.

mod config;
mod loss;

pub use config::{ModelConfig, Modules, TaskKind, TaskSpec, Variant, STRIDES};
pub use loss::{compute_losses, LossTerm, Losses, Supervision, Target, TaskTarget};

use crate::bfe::{Bfe, BfeConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv, Init};
use crate::tensor::{Conv2dSpec, Graph, NodeId, ParamStore, Real, Rng};
use crate::tfr::{TfrConfig, TfrStack};
use crate::tpp::{Tpp, TppConfig};

/// Strided convolution stages producing maps at strides 4, 8 and 16.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Conv,
    pub down0: Conv,
    pub conv0: Conv,
    pub down1: Conv,
    pub down2: Conv,
}

impl Encoder {
    fn new(init: &mut Init<'_>, c: usize) -> Self {
        let down = |init: &mut Init<'_>, name: &str, cin: usize, cout: usize| {
            let spec = Conv2dSpec {
                stride: 2,
                padding: 1,
                ..Default::default()
            };
            Conv::new(&mut init.scope(name), cin, cout, 3, spec, true)
        };
        Encoder {
            stem: down(init, "stem", 3, c / 2),
            down0: down(init, "down0", c / 2, c),
            conv0: Conv::same3(&mut init.scope("conv0"), c, c),
            down1: down(init, "down1", c, c),
            down2: down(init, "down2", c, c),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, image: NodeId) -> Result<[NodeId; 3]> {
        let conv = |g: &mut Graph<'_, F>, c: &Conv, x: NodeId| -> Result<NodeId> {
            let y = c.forward(g, x)?;
            Ok(g.gelu(y))
        };
        let x = conv(g, &self.stem, image)?;
        let x = conv(g, &self.down0, x)?;
        let s0 = conv(g, &self.conv0, x)?;
        let s1 = conv(g, &self.down1, s0)?;
        let s2 = conv(g, &self.down2, s1)?;
        Ok([s0, s1, s2])
    }
}

/// One (task, scale) preliminary decoder: a 3×3 conv producing the task
/// feature and a 1×1 head producing the initial prediction.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub conv: Conv,
    pub head: Conv,
}

/// Per-task aggregation and final prediction head.
#[derive(Clone, Debug)]
pub struct TaskHead {
    /// 1×1 fusion of the three upsampled scales.
    pub fuse: Conv,
    pub conv: Conv,
    pub out: Conv,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    /// `[task][scale]`
    pub decoders: Vec<Vec<Decoder>>,
    /// 1×1 convs applied to the coarser refined feature before it is added
    /// at scales 0 and 1; shared by all tasks.
    pub upsamplers: Vec<Conv>,
    pub heads: Vec<TaskHead>,
    pub tpp: Option<Tpp>,
    /// One per scale.
    pub bfe: Option<Vec<Bfe>>,
    /// `[scale][task]`
    pub tfr: Option<Vec<Vec<TfrStack>>>,
}

/// Per-task predictions of one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// Full-resolution prediction per task.
    pub finals: Vec<NodeId>,
    /// `[task][scale]` deep-supervision predictions.
    pub initials: Vec<Vec<NodeId>>,
}

/// Task features of every scale plus the initial predictions.
#[derive(Clone, Debug)]
pub struct TaskFeatures {
    /// `[scale][task]`
    pub features: Vec<Vec<NodeId>>,
    /// `[task][scale]`
    pub initials: Vec<Vec<NodeId>>,
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    ///
    /// Shared components draw from their own random streams, so a baseline
    /// and a full model built from the same seed start with identical
    /// encoder, decoder and head weights.
    ///
    /// The last layer of every residual branch in TPP, BFE and TFR starts at
    /// zero, so the full model initially computes exactly what the baseline
    /// does and the cross-task modules grow in from there. With all of them
    /// random the untrained model starts at over three times the baseline's
    /// loss and stays behind it for the whole toy training run.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(ParamStore<f32>, Model)> {
        let (mut store, model) = Model::new_random(cfg, seed)?;
        if let Some(tpp) = &model.tpp {
            tpp.zero_outputs(&mut store);
        }
        for b in model.bfe.iter().flatten() {
            b.zero_output(&mut store);
        }
        for s in model.tfr.iter().flatten().flatten() {
            s.zero_outputs(&mut store);
        }
        Ok((store, model))
    }

    /// Like [`Model::new`] but with every weight Kaiming-uniform, residual
    /// branch outputs included.
    pub fn new_random(cfg: ModelConfig, seed: u64) -> Result<(ParamStore<f32>, Model)> {
        cfg.validate()?;
        let c = cfg.channels;
        let root = Rng::new(seed);
        let mut store = ParamStore::new();

        let mut rng = root.fork(0);
        let encoder = Encoder::new(&mut Init::new(&mut store, &mut rng).scope("encoder"), c);

        let mut rng = root.fork(1);
        let mut init = Init::new(&mut store, &mut rng);
        let decoders = cfg
            .tasks
            .iter()
            .map(|t| {
                (0..3)
                    .map(|i| {
                        let mut s = init.scope(format!("decoder.{}.s{i}", t.name));
                        Decoder {
                            conv: Conv::same3(&mut s.scope("conv"), c, c),
                            head: Conv::pointwise(&mut s.scope("head"), c, t.out_channels()),
                        }
                    })
                    .collect()
            })
            .collect();
        let upsamplers = (0..2)
            .map(|i| Conv::pointwise(&mut init.scope(format!("upsample.s{i}")), c, c))
            .collect();
        let heads = cfg
            .tasks
            .iter()
            .map(|t| {
                let mut s = init.scope(format!("head.{}", t.name));
                TaskHead {
                    fuse: Conv::pointwise(&mut s.scope("fuse"), 3 * c, c),
                    conv: Conv::same3(&mut s.scope("conv"), c, c),
                    out: Conv::pointwise(&mut s.scope("out"), c, t.out_channels()),
                }
            })
            .collect();

        let active = cfg.active_modules();
        let tpp = if active.tpp {
            let mut rng = root.fork(2);
            let tc = TppConfig {
                num_tasks: cfg.tasks.len(),
                c_p: c,
                c_a: c,
                heads: cfg.heads,
            };
            Some(Tpp::new(&mut Init::new(&mut store, &mut rng).scope("tpp"), tc)?)
        } else {
            None
        };
        let bfe = if active.bfe {
            let mut rng = root.fork(3);
            let mut init = Init::new(&mut store, &mut rng);
            let blocks = (0..3)
                .map(|i| {
                    let bc = BfeConfig {
                        d: cfg.query_down,
                        l: cfg.kv_down[i],
                        heads: cfg.heads,
                        c_s: c,
                        c_p: c,
                        c_a: c,
                    };
                    Bfe::new(&mut init.scope(format!("bfe.s{i}")), bc)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(blocks)
        } else {
            None
        };
        let tfr = if active.tfr {
            let mut rng = root.fork(4);
            let mut init = Init::new(&mut store, &mut rng);
            let tc = TfrConfig {
                depth: cfg.tfr_depth,
                c_a: c,
                c_p: c,
            };
            let stacks = (0..3)
                .map(|i| {
                    cfg.tasks
                        .iter()
                        .map(|t| TfrStack::new(&mut init.scope(format!("tfr.s{i}.{}", t.name)), tc))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Some(stacks)
        } else {
            None
        };

        let model = Model {
            cfg,
            encoder,
            decoders,
            upsamplers,
            heads,
            tpp,
            bfe,
            tfr,
        };
        Ok((store, model))
    }

    pub fn num_tasks(&self) -> usize {
        self.cfg.tasks.len()
    }

    /// Modules whose parameters exist.
    pub fn built_modules(&self) -> Modules {
        Modules {
            tpp: self.tpp.is_some(),
            bfe: self.bfe.is_some(),
            tfr: self.tfr.is_some(),
        }
    }

    fn check_image<F: Real>(&self, g: &Graph<'_, F>, image: NodeId) -> Result<()> {
        let want = [3, self.cfg.image_h, self.cfg.image_w];
        if g.shape(image) != want {
            return Err(Error::shape("model input", g.shape(image), &want));
        }
        Ok(())
    }

    /// Generic feature pyramid at strides 4, 8, 16.
    pub fn encode<F: Real>(&self, g: &mut Graph<'_, F>, image: NodeId) -> Result<[NodeId; 3]> {
        self.check_image(g, image)?;
        self.encoder.forward(g, image)
    }

    /// Task features and initial predictions; with `use_tpp` the coarsest
    /// features pass through task pattern propagation before their heads.
    pub fn preliminary_decode<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        pyramid: &[NodeId; 3],
        use_tpp: bool,
    ) -> Result<TaskFeatures> {
        let t = self.num_tasks();
        let mut features = vec![Vec::with_capacity(t); 3];
        for (i, &s) in pyramid.iter().enumerate() {
            for dec in &self.decoders {
                let p = dec[i].conv.forward(g, s)?;
                features[i].push(g.gelu(p));
            }
        }
        if use_tpp {
            let tpp = self.tpp.as_ref().ok_or_else(|| Error::config("model has no tpp parameters"))?;
            features[2] = tpp.forward(g, &features[2])?;
        }
        let mut initials = Vec::with_capacity(t);
        for (j, dec) in self.decoders.iter().enumerate() {
            let mut per_scale = Vec::with_capacity(3);
            for (i, d) in dec.iter().enumerate() {
                per_scale.push(d.head.forward(g, features[i][j])?);
            }
            initials.push(per_scale);
        }
        Ok(TaskFeatures { features, initials })
    }

    /// Forward pass with every built module enabled.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, image: NodeId) -> Result<Outputs> {
        self.forward_with(g, image, Modules::ALL)
    }

    /// Forward pass with `modules` further restricted at run time. A disabled
    /// refiner falls back to adding the bridge feature; a disabled bridge
    /// leaves the refiner reading the generic feature.
    pub fn forward_with<F: Real>(&self, g: &mut Graph<'_, F>, image: NodeId, modules: Modules) -> Result<Outputs> {
        let m = modules.and(self.built_modules());
        let s = self.encode(g, image)?;
        let TaskFeatures { features: p, initials } = self.preliminary_decode(g, &s, m.tpp)?;
        let t = self.num_tasks();
        let mut refined: Vec<Vec<NodeId>> = vec![Vec::new(); 3];
        for i in (0..3).rev() {
            let bridge = match (&self.bfe, m.bfe) {
                (Some(b), true) => Some(b[i].forward(g, s[i], &p[i])?),
                _ => None,
            };
            let mut out = Vec::with_capacity(t);
            for j in 0..t {
                let mut ph = p[i][j];
                if i < 2 {
                    let coarse = self.upsamplers[i].forward(g, refined[i + 1][j])?;
                    let up = g.upsample_bilinear(coarse, 2)?;
                    ph = g.add(ph, up)?;
                }
                let r = match (&self.tfr, m.tfr, bridge) {
                    (Some(stacks), true, Some(b)) => stacks[i][j].forward(g, b, ph)?,
                    (Some(stacks), true, None) => stacks[i][j].forward(g, s[i], ph)?,
                    (_, _, Some(b)) => g.add(ph, b)?,
                    _ => ph,
                };
                out.push(r);
            }
            refined[i] = out;
        }
        let finals = (0..t)
            .map(|j| self.aggregate(g, j, [refined[0][j], refined[1][j], refined[2][j]]))
            .collect::<Result<_>>()?;
        Ok(Outputs { finals, initials })
    }

    /// Upsamples the refined maps of task `j` to stride 4, fuses them and
    /// runs the task head up to image resolution.
    fn aggregate<F: Real>(&self, g: &mut Graph<'_, F>, j: usize, refined: [NodeId; 3]) -> Result<NodeId> {
        let head = &self.heads[j];
        let r1 = g.upsample_bilinear(refined[1], 2)?;
        let r2 = g.upsample_bilinear(refined[2], 4)?;
        let cat = g.concat(&[refined[0], r1, r2], 0)?;
        let x = head.fuse.forward(g, cat)?;
        let x = head.conv.forward(g, x)?;
        let x = g.gelu(x);
        let x = head.out.forward(g, x)?;
        g.upsample_bilinear(x, STRIDES[0])
    }

    /// Shared encoder with independent per-task decoders and no cross-task
    /// interaction: decoder features fused top-down, aggregated, then headed.
    pub fn baseline_forward<F: Real>(&self, g: &mut Graph<'_, F>, image: NodeId) -> Result<Outputs> {
        let s = self.encode(g, image)?;
        let mut finals = Vec::with_capacity(self.num_tasks());
        let mut initials = Vec::with_capacity(self.num_tasks());
        for (j, dec) in self.decoders.iter().enumerate() {
            let mut p = Vec::with_capacity(3);
            let mut init = Vec::with_capacity(3);
            for (i, d) in dec.iter().enumerate() {
                let x = d.conv.forward(g, s[i])?;
                let x = g.gelu(x);
                init.push(d.head.forward(g, x)?);
                p.push(x);
            }
            for i in (0..2).rev() {
                let coarse = self.upsamplers[i].forward(g, p[i + 1])?;
                let up = g.upsample_bilinear(coarse, 2)?;
                p[i] = g.add(p[i], up)?;
            }
            finals.push(self.aggregate(g, j, [p[0], p[1], p[2]])?);
            initials.push(init);
        }
        Ok(Outputs { finals, initials })
    }
}
