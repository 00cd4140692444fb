//! Task feature refinement.
//!
//! Each (scale, task) pair owns a stack of M layers. Layer k concatenates the
//! bridge feature with the current task feature and fuses them with a hybrid
//! dilated convolution block; the previous task feature is added back so deep
//! stacks start close to the identity.

use crate::error::{Error, Result};
use crate::nn::{Hdc, Init};
use crate::tensor::{Graph, NodeId, ParamStore, Real};

/// Named stack depths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TfrSize {
    Base,
    Large,
    Huge,
}

impl TfrSize {
    pub fn depth(self) -> usize {
        match self {
            TfrSize::Base => 2,
            TfrSize::Large => 4,
            TfrSize::Huge => 6,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(TfrSize::Base),
            "large" => Some(TfrSize::Large),
            "huge" => Some(TfrSize::Huge),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TfrSize::Base => "base",
            TfrSize::Large => "large",
            TfrSize::Huge => "huge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TfrConfig {
    pub depth: usize,
    /// Bridge feature channels.
    pub c_a: usize,
    /// Task feature channels.
    pub c_p: usize,
}

/// One layer: `x + HDC(concat(S′, x))`, the residual taken from the `x` slice.
#[derive(Clone, Debug)]
pub struct TfrLayer {
    pub hdc: Hdc,
    pub c_a: usize,
}

impl TfrLayer {
    pub fn new(init: &mut Init<'_>, c_a: usize, c_p: usize) -> Self {
        TfrLayer {
            hdc: Hdc::with_residual(init, c_a + c_p, c_p, Some(c_a)),
            c_a,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, bridge: NodeId, x: NodeId) -> Result<NodeId> {
        let (sb, sx) = (g.shape(bridge), g.shape(x));
        if sb[1..] != sx[1..] {
            return Err(Error::shape("tfr_layer", sb, sx));
        }
        let cat = g.concat(&[bridge, x], 0)?;
        self.hdc.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
pub struct TfrStack {
    pub layers: Vec<TfrLayer>,
}

impl TfrStack {
    pub fn new(init: &mut Init<'_>, cfg: TfrConfig) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::config("refinement stack needs at least one layer"));
        }
        let layers = (0..cfg.depth)
            .map(|k| TfrLayer::new(&mut init.scope(format!("layer{k}")), cfg.c_a, cfg.c_p))
            .collect();
        Ok(TfrStack { layers })
    }

    /// `x⁽ᵏ⁾ = layer_k(S′, x⁽ᵏ⁻¹⁾)` from `x⁽⁰⁾ = p`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, bridge: NodeId, p: NodeId) -> Result<NodeId> {
        Ok(*self.forward_all(g, bridge, p)?.last().expect("nonempty stack"))
    }

    /// Every intermediate `x⁽ᵏ⁾`, k = 1..M.
    pub fn forward_all<F: Real>(&self, g: &mut Graph<'_, F>, bridge: NodeId, p: NodeId) -> Result<Vec<NodeId>> {
        let mut x = p;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(g, bridge, x)?;
            out.push(x);
        }
        Ok(out)
    }

    pub fn zero_outputs<F: Real>(&self, store: &mut ParamStore<F>) {
        for l in &self.layers {
            l.hdc.zero_output(store);
        }
    }
}
