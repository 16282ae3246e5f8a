//! Sparse point tokens and the dense (mask, confidence) prompt.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sat3d_tensor::{ParamId, Tensor, Var};

use super::{grid_to_tokens, Builder, Conv, Cx, Init, Linear, ModelConfig};
use crate::error::{Error, Result};
use crate::promptloop::PointPrompt;

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    /// Fixed Fourier frequencies `[3, E/2]`, regenerated from the seed.
    freqs: Arc<Vec<f32>>,
    embed: usize,
    input: usize,
    grid: usize,
    strides: [usize; 2],
    labels: ParamId,
    no_mask: ParamId,
    mask_branch: [Conv; 2],
    conf_branch: [Conv; 2],
    fuse: Linear,
}

impl PromptEncoder {
    pub(crate) fn build(b: &mut Builder, model: &ModelConfig) -> Self {
        let e = model.embed_dim();
        let cfg = &model.prompt;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.pe_seed);
        let freqs = (0..3 * e / 2)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * cfg.pe_scale) as f32
            })
            .collect();
        let ds = model.encoder.downsample();
        let k = ds.trailing_zeros() as usize;
        let strides = [1 << k.div_ceil(2), 1 << (k / 2)];
        let [c1, c2] = cfg.dense_channels;
        let branch = |b: &mut Builder, name: &str| {
            [b.conv(&format!("prompt.{name}.0"), 1, c1, strides[0]), b.conv(&format!("prompt.{name}.1"), c1, c2, strides[1])]
        };
        Self {
            freqs: Arc::new(freqs),
            embed: e,
            input: model.input_size,
            grid: model.embed_grid(),
            strides,
            labels: b.param("prompt.label_embed", &[2, e], Init::Normal, 0),
            no_mask: b.param("prompt.no_mask_embed", &[1, e], Init::Normal, 0),
            mask_branch: branch(b, "mask_down"),
            conf_branch: branch(b, "conf_down"),
            fuse: b.linear("prompt.fuse", 2 * c2, e, true, Init::FanIn),
        }
    }

    /// Fourier features of points given in `[0, 1]^3`, one row of width E each.
    pub fn positional(&self, coords: &[[f64; 3]]) -> Tensor {
        let half = self.embed / 2;
        let f = &self.freqs;
        let mut out = Vec::with_capacity(coords.len() * self.embed);
        for c in coords {
            let u = [2.0 * c[0] - 1.0, 2.0 * c[1] - 1.0, 2.0 * c[2] - 1.0];
            let proj: Vec<f64> = (0..half).map(|j| 2.0 * PI * (0..3).map(|a| u[a] * f[a * half + j] as f64).sum::<f64>()).collect();
            out.extend(proj.iter().map(|p| p.sin() as f32));
            out.extend(proj.iter().map(|p| p.cos() as f32));
        }
        Tensor::new([coords.len(), self.embed], out)
    }

    /// Positional encoding of every embedding-grid cell centre, `[n^3, E]`.
    pub fn grid_positional(&self) -> Tensor {
        let n = self.grid;
        let c = |i: usize| (i as f64 + 0.5) / n as f64;
        let coords: Vec<[f64; 3]> = (0..n * n * n).map(|i| [c(i / (n * n)), c((i / n) % n), c(i % n)]).collect();
        self.positional(&coords)
    }

    pub fn check_points(&self, points: &[PointPrompt]) -> Result<()> {
        let s = self.input;
        for p in points {
            if p.coord.iter().any(|&c| c < 0 || c >= s as i64) {
                return Err(Error::PromptBounds { coord: p.coord, dims: [s; 3] });
            }
            if p.label > 1 {
                return Err(Error::Spec(format!("point label {} is neither 0 nor 1", p.label)));
            }
        }
        Ok(())
    }

    /// Sparse tokens `[P, E]` and dense prompt `[n^3, E]`. `mask` and `conf`
    /// are flat `S^3` grids; when both are blank the learned no-mask
    /// embedding fills the dense prompt.
    pub fn forward<'g>(&self, cx: Cx<'g>, points: &[PointPrompt], mask: &[f32], conf: &[f32]) -> Result<(Var<'g>, Var<'g>)> {
        self.check_points(points)?;
        let s = self.input;
        let norm = |c: i64| (c as f64 + 0.5) / s as f64;
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [norm(p.coord[0]), norm(p.coord[1]), norm(p.coord[2])]).collect();
        let sparse = if points.is_empty() {
            cx.constant(Tensor::zeros([0, self.embed]))
        } else {
            let labels = cx.p(self.labels).index_rows(Arc::new(points.iter().map(|p| p.label as usize).collect()));
            labels.add(&cx.constant(self.positional(&coords)))
        };
        let n3 = self.grid.pow(3);
        let dense = if mask.iter().chain(conf).all(|&v| v == 0.0) {
            cx.constant(Tensor::zeros([n3, self.embed])).add(&cx.p(self.no_mask))
        } else {
            let run = |branch: &[Conv; 2], x: &[f32]| {
                let x = cx.constant(Tensor::new([1, s, s, s], x.to_vec()));
                let h = branch[0].fwd(cx, &x, self.strides[0], 0).gelu();
                branch[1].fwd(cx, &h, self.strides[1], 0).gelu()
            };
            let both = Var::concat(&[&run(&self.mask_branch, mask), &run(&self.conf_branch, conf)], 0);
            self.fuse.fwd(cx, &grid_to_tokens(&both))
        };
        Ok((sparse, dense))
    }
}
