//! Deterministic synthetic scenes with five aligned ground truths.
//!
//! A scene is a background plane plus depth-ordered rectangles and ellipses.
//! Each shape has a class, a slanted planar depth and a textured colour whose
//! brightness falls with depth. Normals are the depth derivative and edges
//! are the label boundaries, so the tasks are correlated by construction.

mod dataset;

pub use dataset::{build_dataset, load_manifest, sample_seed, ManifestEntry, Split, MANIFEST};

use crate::error::{Error, Result};
use crate::io::{Archive, IntTensor};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Class count including background (class 0).
    pub classes: usize,
    pub near: f64,
    pub far: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Shape bounds snap to multiples of this many pixels.
    pub snap: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            min_shapes: 2,
            max_shapes: 4,
            classes: 5,
            near: 1.0,
            far: 2.0,
            noise: 0.02,
            snap: 4,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near < self.far) || !self.near.is_finite() || !self.far.is_finite() {
            return Err(Error::config(format!("need near < far, got {} and {}", self.near, self.far)));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes (background and one object)"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes exceeds max_shapes"));
        }
        if self.snap == 0 || self.height < 4 * self.snap || self.width < 4 * self.snap {
            return Err(Error::config("image must span at least four snap cells per side"));
        }
        if self.noise < 0.0 {
            return Err(Error::config("noise must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: i32,
    /// Half-open pixel bounds.
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub depth: f64,
    pub slope_y: f64,
    pub slope_x: f64,
}

impl Shape {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || y >= self.y1 || x < self.x0 || x >= self.x1 {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let cy = (self.y0 + self.y1) as f64 / 2.0;
                let cx = (self.x0 + self.x1) as f64 / 2.0;
                let ry = (self.y1 - self.y0) as f64 / 2.0;
                let rx = (self.x1 - self.x0) as f64 / 2.0;
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    pub fn depth_at(&self, y: usize, x: usize) -> f64 {
        let cy = (self.y0 + self.y1) as f64 / 2.0;
        let cx = (self.x0 + self.x1) as f64 / 2.0;
        self.depth + self.slope_y * (y as f64 - cy) + self.slope_x * (x as f64 - cx)
    }
}

/// One scene and its ground truths. All masks are `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W`, roughly in `[0, 1]`.
    pub image: Tensor<f32>,
    pub seg: Vec<i32>,
    /// `1×H×W`
    pub depth: Tensor<f32>,
    /// `3×H×W`, unit length.
    pub normals: Tensor<f32>,
    pub edges: Vec<bool>,
    pub seg_valid: Vec<bool>,
    pub depth_valid: Vec<bool>,
    /// False where the depth difference stencil straddles two surfaces.
    pub normals_valid: Vec<bool>,
    pub edges_valid: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

/// Base colours per class; background is handled separately.
const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.2],
    [0.8, 0.3, 0.85],
    [0.2, 0.85, 0.85],
    [0.95, 0.55, 0.15],
    [0.55, 0.55, 0.55],
];

fn snapped(rng: &mut Rng, lo: usize, hi: usize, snap: usize) -> usize {
    rng.int_inclusive(lo.div_ceil(snap), hi / snap) * snap
}

/// Samples the shape list without rendering it.
pub fn sample_shapes(cfg: &SceneConfig, rng: &mut Rng) -> Vec<Shape> {
    let n = rng.int_inclusive(cfg.min_shapes, cfg.max_shapes);
    let (h, w, s) = (cfg.height, cfg.width, cfg.snap);
    let span = cfg.far - cfg.near;
    (0..n)
        .map(|_| {
            let sh = snapped(rng, (h / 5).max(2 * s), h / 2, s);
            let sw = snapped(rng, (w / 5).max(2 * s), w / 2, s);
            let y0 = snapped(rng, 0, h - sh, s);
            let x0 = snapped(rng, 0, w - sw, s);
            let kind = if rng.unit() < 0.5 { ShapeKind::Rect } else { ShapeKind::Ellipse };
            // shapes stay in front of the background band
            let depth = cfg.near + span * rng.uniform(0.1, 0.6);
            let tilt = 0.1 * span / h.max(w) as f64;
            Shape {
                kind,
                class: rng.int_inclusive(1, cfg.classes - 1) as i32,
                y0,
                y1: y0 + sh,
                x0,
                x1: x0 + sw,
                depth,
                slope_y: rng.uniform(-tilt, tilt),
                slope_x: rng.uniform(-tilt, tilt),
            }
        })
        .collect()
}

/// Renders a scene. The visible surface at each pixel is the one with the
/// smallest depth among the background and the shapes covering it.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    render(cfg, &scene_shapes(cfg, seed), &mut Rng::new(seed).fork(1))
}

/// The shapes [`generate_scene`] places for `seed`.
pub fn scene_shapes(cfg: &SceneConfig, seed: u64) -> Vec<Shape> {
    sample_shapes(cfg, &mut Rng::new(seed).fork(0))
}

pub fn render(cfg: &SceneConfig, shapes: &[Shape], rng: &mut Rng) -> Result<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let span = cfg.far - cfg.near;
    let bg_depth = cfg.near + span * rng.uniform(0.8, 0.9);
    let (bg_gy, bg_gx) = (
        rng.uniform(-0.05, 0.05) * span / h as f64,
        rng.uniform(-0.05, 0.05) * span / w as f64,
    );
    let bg_color = [rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5)];
    let textures: Vec<(f64, f64, f64)> = shapes
        .iter()
        .map(|_| (rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6), rng.uniform(0.0, std::f64::consts::TAU)))
        .collect();

    let mut seg = vec![0i32; n];
    let mut surface = vec![usize::MAX; n];
    let mut depth = vec![0.0f32; n];
    let mut image = vec![0.0f32; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut d = bg_depth + bg_gy * (y as f64 - h as f64 / 2.0) + bg_gx * (x as f64 - w as f64 / 2.0);
            let mut owner = None;
            for (k, s) in shapes.iter().enumerate() {
                if s.covers(y, x) && s.depth_at(y, x) < d {
                    d = s.depth_at(y, x);
                    owner = Some(k);
                }
            }
            depth[i] = d as f32;
            let shade = 1.15 - 0.7 * (d - cfg.near) / span;
            let color = match owner {
                None => {
                    let ramp = 0.85 + 0.3 * y as f64 / h as f64;
                    bg_color.map(|c| c * ramp)
                }
                Some(k) => {
                    let s = &shapes[k];
                    seg[i] = s.class;
                    surface[i] = k;
                    let (fy, fx, phase) = textures[k];
                    let tex = 1.0 + 0.08 * (fy * y as f64 + fx * x as f64 + phase).sin();
                    PALETTE[(s.class as usize - 1) % PALETTE.len()].map(|c| c * tex)
                }
            };
            for ch in 0..3 {
                let v = color[ch] * shade + cfg.noise * rng.normal();
                image[ch * n + i] = v as f32;
            }
        }
    }

    let normals = derive_normals(&depth, h, w);
    let edges = derive_edges(&seg, h, w);
    let normals_valid = smooth_stencil(&surface, h, w);
    Ok(Sample {
        image: Tensor::new(vec![3, h, w], image)?,
        seg,
        depth: Tensor::new(vec![1, h, w], depth)?,
        normals: Tensor::new(vec![3, h, w], normals)?,
        edges,
        seg_valid: vec![true; n],
        depth_valid: vec![true; n],
        normals_valid,
        edges_valid: vec![true; n],
        height: h,
        width: w,
    })
}

/// Unit normals `∝ (−∂d/∂x, −∂d/∂y, 1)` from central differences in pixel
/// units (one-sided at the border). Returns `3×H×W` channel-major.
pub fn derive_normals(depth: &[f32], h: usize, w: usize) -> Vec<f32> {
    let n = h * w;
    let mut out = vec![0.0f32; 3 * n];
    let at = |y: usize, x: usize| depth[y * w + x] as f64;
    let diff = |lo: f64, hi: f64, steps: usize| if steps == 0 { 0.0 } else { (hi - lo) / steps as f64 };
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let dx = diff(at(y, xl), at(y, xr), xr - xl);
            let dy = diff(at(yu, x), at(yd, x), yd - yu);
            let v = [-dx, -dy, 1.0];
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            for ch in 0..3 {
                out[ch * n + y * w + x] = (v[ch] / norm) as f32;
            }
        }
    }
    out
}

/// A pixel is an edge when any 4-neighbour carries a different label.
pub fn derive_edges(seg: &[i32], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = seg[y * w + x];
            let differs = (y > 0 && seg[(y - 1) * w + x] != c)
                || (y + 1 < h && seg[(y + 1) * w + x] != c)
                || (x > 0 && seg[y * w + x - 1] != c)
                || (x + 1 < w && seg[y * w + x + 1] != c);
            out[y * w + x] = differs;
        }
    }
    out
}

/// True where the pixel and its 4-neighbours lie on one surface.
fn smooth_stencil(surface: &[usize], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![true; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = surface[y * w + x];
            let nbrs = [
                (y > 0).then(|| (y - 1) * w + x),
                (y + 1 < h).then(|| (y + 1) * w + x),
                (x > 0).then(|| y * w + x - 1),
                (x + 1 < w).then(|| y * w + x + 1),
            ];
            out[y * w + x] = nbrs.iter().flatten().all(|&j| surface[j] == c);
        }
    }
    out
}

fn mask_tensor(m: &[bool], h: usize, w: usize) -> IntTensor {
    IntTensor {
        shape: vec![h, w],
        data: m.iter().map(|&b| b as i32).collect(),
    }
}

fn mask_from(t: &IntTensor, name: &str, h: usize, w: usize) -> Result<Vec<bool>> {
    if t.shape != [h, w] {
        return Err(Error::shape("sample mask", &t.shape, &[h, w]));
    }
    t.data
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Format(format!("mask {name} holds {v}"))),
        })
        .collect()
}

impl Sample {
    pub fn to_archive(&self) -> Result<Archive> {
        let (h, w) = (self.height, self.width);
        let mut a = Archive::new();
        a.push_f32("image", self.image.clone())?;
        a.push_i32("seg", IntTensor::new(vec![h, w], self.seg.clone())?)?;
        a.push_f32("depth", self.depth.clone())?;
        a.push_f32("normals", self.normals.clone())?;
        a.push_i32("edges", mask_tensor(&self.edges, h, w))?;
        a.push_i32("valid.seg", mask_tensor(&self.seg_valid, h, w))?;
        a.push_i32("valid.depth", mask_tensor(&self.depth_valid, h, w))?;
        a.push_i32("valid.normals", mask_tensor(&self.normals_valid, h, w))?;
        a.push_i32("valid.edges", mask_tensor(&self.edges_valid, h, w))?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let image = a.f32("image")?.clone();
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::shape("sample image", image.shape(), &[3]));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let seg = a.i32("seg")?;
        if seg.shape != [h, w] {
            return Err(Error::shape("sample seg", &seg.shape, &[h, w]));
        }
        let depth = a.f32("depth")?.clone();
        let normals = a.f32("normals")?.clone();
        if depth.shape() != [1, h, w] || normals.shape() != [3, h, w] {
            return Err(Error::shape("sample depth/normals", depth.shape(), normals.shape()));
        }
        Ok(Sample {
            image,
            seg: seg.data.clone(),
            depth,
            normals,
            edges: mask_from(a.i32("edges")?, "edges", h, w)?,
            seg_valid: mask_from(a.i32("valid.seg")?, "valid.seg", h, w)?,
            depth_valid: mask_from(a.i32("valid.depth")?, "valid.depth", h, w)?,
            normals_valid: mask_from(a.i32("valid.normals")?, "valid.normals", h, w)?,
            edges_valid: mask_from(a.i32("valid.edges")?, "valid.edges", h, w)?,
            height: h,
            width: w,
        })
    }

    /// Mirror image left to right, ground truths included. Normals flip the
    /// sign of their x component.
    pub fn hflip(&self) -> Sample {
        let (h, w) = (self.height, self.width);
        let flip_vec = |v: &[bool]| -> Vec<bool> { (0..h * w).map(|i| v[(i / w) * w + w - 1 - i % w]).collect() };
        let flip_t = |t: &Tensor<f32>| -> Tensor<f32> {
            let c = t.shape()[0];
            let d = t.data();
            Tensor::from_fn(vec![c, h, w], |i| {
                let (ch, p) = (i / (h * w), i % (h * w));
                d[ch * h * w + (p / w) * w + w - 1 - p % w]
            })
        };
        let mut normals = flip_t(&self.normals);
        normals.data_mut()[..h * w].iter_mut().for_each(|v| *v = -*v);
        Sample {
            image: flip_t(&self.image),
            seg: (0..h * w).map(|i| self.seg[(i / w) * w + w - 1 - i % w]).collect(),
            depth: flip_t(&self.depth),
            normals,
            edges: flip_vec(&self.edges),
            seg_valid: flip_vec(&self.seg_valid),
            depth_valid: flip_vec(&self.depth_valid),
            normals_valid: flip_vec(&self.normals_valid),
            edges_valid: flip_vec(&self.edges_valid),
            height: h,
            width: w,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            height: 32,
            width: 32,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn constant_depth_faces_the_camera() {
        let n = derive_normals(&[2.0; 12], 3, 4);
        assert!(n[..12].iter().all(|&v| v == 0.0));
        assert!(n[24..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn plane_in_x_tilts_normals() {
        let (h, w) = (4, 5);
        let d: Vec<f32> = (0..h * w).map(|i| (i % w) as f32).collect();
        let n = derive_normals(&d, h, w);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        for i in 0..h * w {
            assert!((n[i] + s).abs() < 1e-6 && n[h * w + i].abs() < 1e-6 && (n[2 * h * w + i] - s).abs() < 1e-6);
        }
    }

    #[test]
    fn half_plane_split_gives_two_edge_columns() {
        let (h, w) = (4, 6);
        let seg: Vec<i32> = (0..h * w).map(|i| if i % w < 3 { 0 } else { 2 }).collect();
        let e = derive_edges(&seg, h, w);
        for i in 0..h * w {
            assert_eq!(e[i], i % w == 2 || i % w == 3);
        }
        assert!(derive_edges(&[1; 9], 3, 3).iter().all(|&b| !b));
    }

    #[test]
    fn no_shapes_means_background_only() {
        let cfg = SceneConfig {
            min_shapes: 0,
            max_shapes: 0,
            noise: 0.0,
            ..small()
        };
        let s = generate_scene(&cfg, 3).unwrap();
        assert!(s.seg.iter().all(|&c| c == 0));
        assert!(s.edges.iter().all(|&e| !e));
        assert!(s.normals_valid.iter().all(|&v| v));
        // a plane has one normal everywhere
        let n0: Vec<f32> = (0..3).map(|c| s.normals.data()[c * 32 * 32]).collect();
        for p in 0..32 * 32 {
            for c in 0..3 {
                assert!((s.normals.data()[c * 32 * 32 + p] - n0[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn shapes_snap_to_the_grid() {
        let cfg = small();
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            for s in sample_shapes(&cfg, &mut rng) {
                assert!([s.y0, s.y1, s.x0, s.x1].iter().all(|v| v % cfg.snap == 0));
                assert!(s.y1 <= cfg.height && s.x1 <= cfg.width && s.y1 > s.y0 && s.x1 > s.x0);
                assert!((1..cfg.classes as i32).contains(&s.class));
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            SceneConfig { near: 2.0, far: 1.0, ..small() },
            SceneConfig { classes: 1, ..small() },
            SceneConfig { min_shapes: 3, max_shapes: 2, ..small() },
            SceneConfig { height: 8, ..small() },
        ] {
            assert!(generate_scene(&bad, 0).is_err());
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = generate_scene(&small(), 9).unwrap();
        assert_eq!(s.hflip().hflip(), s);
        assert_eq!(s.hflip().edges, derive_edges(&s.hflip().seg, 32, 32));
    }

    #[test]
    fn archive_round_trip() {
        let s = generate_scene(&small(), 2).unwrap();
        assert_eq!(Sample::from_archive(&s.to_archive().unwrap()).unwrap(), s);
    }
}
