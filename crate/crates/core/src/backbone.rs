//! Residual 3D encoder-decoder producing the four-level feature pyramid.

use malenia_tensor::{Binder, Conv3d, InitRng, Linear, Norm, NormKind, ParamStore, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder levels below full resolution; level `l` has spatial size `n / 2^l`.
pub const DEPTH: usize = 5;

/// Levels with fewer voxels than this use per-voxel channel normalisation,
/// since per-channel statistics over one or a few voxels are degenerate.
const MIN_INSTANCE_VOXELS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channel width per level, full resolution first.
    pub widths: [usize; DEPTH + 1],
    /// Width of the full-resolution decoder output before projection.
    pub full_res_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { in_channels: 1, widths: [8, 16, 32, 32, 32, 32], full_res_width: 16 }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv3d,
    norm: Norm,
}

impl Stage {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut InitRng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        Stage {
            conv: Conv3d::new(store, rng, &format!("{name}.conv"), cin, cout, stride),
            norm: Norm::new(store, &format!("{name}.norm"), cout, NormKind::Instance),
        }
    }

    fn forward<'g, T: Scalar>(&self, p: &Binder<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = self.conv.forward(p, x);
        norm_for_level(&self.norm, p, y).leaky_relu(T::lit(0.01))
    }
}

fn norm_for_level<'g, T: Scalar>(norm: &Norm, p: &Binder<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
    let voxels: usize = x.shape()[1..].iter().product();
    if voxels >= MIN_INSTANCE_VOXELS {
        norm.forward(p, x)
    } else {
        Norm { kind: NormKind::Channel, ..norm.clone() }.forward(p, x)
    }
}

/// Per-voxel features of one pyramid level, projected to the token dimension.
#[derive(Clone, Copy, Debug)]
pub struct Level<'g, T: Scalar> {
    /// `[voxels, C]`, voxels in row-major `(h, w, d)` order.
    pub features: Var<'g, T>,
    pub grid: [usize; 3],
}

/// `F1..F3` at `1/32, 1/16, 1/8` of the input and `F4` at full resolution.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid<'g, T: Scalar> {
    pub levels: [Level<'g, T>; 4],
}

impl<T: Scalar> FeaturePyramid<'_, T> {
    /// `(h, w, d, C)` of level `i` (0-based: `F1` is 0).
    pub fn level_shape(&self, i: usize) -> [usize; 4] {
        let l = &self.levels[i];
        [l.grid[0], l.grid[1], l.grid[2], l.features.shape()[1]]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Stage,
    down: Vec<Stage>,
    residual: Vec<Stage>,
    up: Vec<Stage>,
    full_mix: malenia_tensor::ParamId,
    full_norm: Norm,
    projections: Vec<Linear>,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut InitRng, config: &BackboneConfig, dim: usize) -> Self {
        let w = config.widths;
        let stem = Stage::new(store, rng, "backbone.stem", config.in_channels, w[0], 1);
        let down = (1..=DEPTH).map(|l| Stage::new(store, rng, &format!("backbone.down{l}"), w[l - 1], w[l], 2)).collect();
        let residual = (1..=DEPTH).map(|l| Stage::new(store, rng, &format!("backbone.res{l}"), w[l], w[l], 1)).collect();
        // Decoder stage at level l fuses the upsampled level l+1 with the skip.
        let up = (1..DEPTH)
            .map(|l| Stage::new(store, rng, &format!("backbone.up{l}"), w[l + 1] + w[l], w[l], 1))
            .collect();
        let mix_in = w[1] + w[0];
        let bound = (6.0 / (mix_in + config.full_res_width) as f64).sqrt();
        let full_mix = store.add("backbone.full.mix", rng.uniform(&[config.full_res_width, mix_in], bound));
        let full_norm = Norm::new(store, "backbone.full.norm", config.full_res_width, NormKind::Instance);
        let widths_out = [w[DEPTH], w[DEPTH - 1], w[DEPTH - 2], config.full_res_width];
        let projections = widths_out
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(store, rng, &format!("backbone.proj{}", i + 1), c, dim, true))
            .collect();
        Backbone { config: config.clone(), stem, down, residual, up, full_mix, full_norm, projections }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `volume: [in_channels, H, W, D]` with each side divisible by 32.
    pub fn forward<'g, T: Scalar>(&self, p: &Binder<'g, T>, volume: Var<'g, T>) -> Result<FeaturePyramid<'g, T>> {
        let shape = volume.shape();
        if shape.len() != 4 || shape[0] != self.config.in_channels {
            return Err(Error::Shape(format!("backbone input {shape:?}, expected [{}, H, W, D]", self.config.in_channels)));
        }
        let grid = [shape[1], shape[2], shape[3]];
        if grid.iter().any(|&n| n == 0 || n % 32 != 0) {
            return Err(Error::Shape(format!("volume {grid:?} is not divisible by 32")));
        }

        let mut skips = vec![self.stem.forward(p, volume)];
        for l in 0..DEPTH {
            let x = self.down[l].forward(p, skips[l]);
            let x = x.add(self.residual[l].forward(p, x));
            skips.push(x);
        }
        let mut decoded = vec![skips[DEPTH]];
        for l in (1..DEPTH).rev() {
            let prev = *decoded.last().expect("nonempty");
            let cat = Var::concat_rows(&[prev.upsample2(), skips[l]]);
            decoded.push(self.up[l - 1].forward(p, cat));
        }
        // decoded = [level 5, 4, 3, 2, 1]
        let lvl1 = decoded[DEPTH - 1];
        let cat = Var::concat_rows(&[lvl1.upsample2(), skips[0]]);
        let c_in = cat.shape()[0];
        let voxels: usize = grid.iter().product();
        let mixed = p.param(self.full_mix).matmul(cat.reshape(&[c_in, voxels]));
        let full = self.full_norm.forward(p, mixed).leaky_relu(T::lit(0.01));

        let grids = [5usize, 4, 3, 0].map(|l| grid.map(|n| n >> l));
        let raw = [decoded[0], decoded[1], decoded[2]];
        let mut levels = Vec::with_capacity(4);
        for (i, r) in raw.iter().enumerate() {
            let c = r.shape()[0];
            let v: usize = grids[i].iter().product();
            levels.push(Level { features: self.projections[i].forward(p, r.reshape(&[c, v]).transpose()), grid: grids[i] });
        }
        levels.push(Level { features: self.projections[3].forward(p, full.transpose()), grid });
        Ok(FeaturePyramid { levels: [levels[0], levels[1], levels[2], levels[3]] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use malenia_tensor::{Graph, Tensor};

    fn pyramid_shapes(n: usize) -> Vec<[usize; 4]> {
        let mut store = ParamStore::<f32>::new();
        let mut rng = InitRng::new(0);
        let cfg = BackboneConfig { widths: [2, 4, 4, 4, 4, 4], full_res_width: 4, ..Default::default() };
        let b = Backbone::new(&mut store, &mut rng, &cfg, 8);
        let g = Graph::inference();
        let p = Binder::new(&g, &store);
        let x = g.constant(Tensor::from_fn(&[1, n, n, n], |i| ((i % 7) as f32) * 0.1));
        let pyr = b.forward(&p, x).unwrap();
        assert!(pyr.levels.iter().all(|l| l.features.value().all_finite()));
        (0..4).map(|i| pyr.level_shape(i)).collect()
    }

    #[test]
    fn pyramid_resolutions_32() {
        assert_eq!(pyramid_shapes(32), vec![[1, 1, 1, 8], [2, 2, 2, 8], [4, 4, 4, 8], [32, 32, 32, 8]]);
    }

    #[test]
    fn non_multiple_of_32_rejected() {
        let mut store = ParamStore::<f32>::new();
        let b = Backbone::new(&mut store, &mut InitRng::new(0), &BackboneConfig::default(), 8);
        let g = Graph::inference();
        let p = Binder::new(&g, &store);
        let x = g.constant(Tensor::zeros(&[1, 33, 33, 33]));
        assert!(matches!(b.forward(&p, x), Err(Error::Shape(_))));
    }
}
