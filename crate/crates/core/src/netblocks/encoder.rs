//! Hierarchical shifted-window transformer over 3-D patch tokens.

use std::sync::Arc;

use sat3d_tensor::{attention, Tensor, Var};

use super::{grid_to_tokens, Builder, Conv, Cx, Init, Linear, ModelConfig, Norm};
use crate::netblocks::EncoderConfig;

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    rel_bias: sat3d_tensor::ParamId,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    /// Shifted-window block (every second block of a stage).
    shifted: bool,
}

#[derive(Clone, Debug)]
struct Merge {
    norm: Norm,
    reduce: Linear,
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<Block>,
    merge: Option<Merge>,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    input: usize,
    patch_embed: Conv,
    patch_norm: Norm,
    stages: Vec<Stage>,
    out_norm: Norm,
}

impl ImageEncoder {
    pub(crate) fn build(b: &mut Builder, model: &ModelConfig) -> Self {
        let cfg = model.encoder.clone();
        let c0 = cfg.embed_dim;
        let patch_embed = b.conv("encoder.patch_embed", 1, c0, cfg.patch);
        let patch_norm = b.norm("encoder.patch_norm", c0);
        let table = (2 * cfg.window - 1).pow(3);
        let mut stages = Vec::new();
        for (i, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
            let c = cfg.stage_dim(i);
            let hidden = c * cfg.mlp_ratio;
            let blocks = (0..depth)
                .map(|j| {
                    let p = format!("encoder.stages.{i}.blocks.{j}");
                    Block {
                        norm1: b.norm(&format!("{p}.norm1"), c),
                        qkv: b.linear(&format!("{p}.attn.qkv"), c, 3 * c, true, Init::TruncNormal),
                        rel_bias: b.param(&format!("{p}.attn.rel_bias"), &[table, heads], Init::TruncNormal, 0),
                        proj: b.linear(&format!("{p}.attn.proj"), c, c, true, Init::TruncNormal),
                        norm2: b.norm(&format!("{p}.norm2"), c),
                        fc1: b.linear(&format!("{p}.mlp.fc1"), c, hidden, true, Init::TruncNormal),
                        fc2: b.linear(&format!("{p}.mlp.fc2"), hidden, c, true, Init::TruncNormal),
                        heads,
                        shifted: j % 2 == 1,
                    }
                })
                .collect();
            let merge = (i + 1 < cfg.stages()).then(|| Merge {
                norm: b.norm(&format!("encoder.stages.{i}.merge.norm"), 8 * c),
                reduce: b.linear(&format!("encoder.stages.{i}.merge.reduce"), 8 * c, 2 * c, false, Init::TruncNormal),
            });
            stages.push(Stage { blocks, merge });
        }
        let out_norm = b.norm("encoder.norm", cfg.out_dim());
        Self { cfg, input: model.input_size, patch_embed, patch_norm, stages, out_norm }
    }

    /// `[1, S, S, S]` volume to `[n^3, E]` tokens.
    pub fn forward<'g>(&self, cx: Cx<'g>, x: &Var<'g>) -> Var<'g> {
        assert_eq!(x.shape(), &[1, self.input, self.input, self.input], "encoder input shape");
        let h = self.patch_embed.fwd(cx, x, self.cfg.patch, 0);
        let mut h = self.patch_norm.fwd(cx, &grid_to_tokens(&h));
        for (i, stage) in self.stages.iter().enumerate() {
            let g = self.cfg.stage_grid(self.input, i);
            for blk in &stage.blocks {
                h = blk.forward(cx, &h, g, self.cfg.window);
            }
            if let Some(m) = &stage.merge {
                h = m.forward(cx, &h, g);
            }
        }
        self.out_norm.fwd(cx, &h)
    }
}

impl Merge {
    fn forward<'g>(&self, cx: Cx<'g>, x: &Var<'g>, g: usize) -> Var<'g> {
        let c = x.shape()[1];
        let h = g / 2;
        let x = x.reshape(&[h, 2, h, 2, h, 2, c]).permute(&[0, 2, 4, 1, 3, 5, 6]).reshape(&[h * h * h, 8 * c]);
        self.reduce.fwd(cx, &self.norm.fwd(cx, &x))
    }
}

impl Block {
    fn forward<'g>(&self, cx: Cx<'g>, x: &Var<'g>, g: usize, window: usize) -> Var<'g> {
        let c = x.shape()[1];
        let w = window.min(g);
        let shift = if self.shifted && g > window { window / 2 } else { 0 };
        let (nw, t) = ((g / w).pow(3), w * w * w);
        let (heads, d) = (self.heads, c / self.heads);

        let mut h = self.norm1.fwd(cx, x).reshape(&[g, g, g, c]);
        if shift > 0 {
            let s = -(shift as isize);
            h = h.roll(&[(0, s), (1, s), (2, s)]);
        }
        let win = h.reshape(&[g / w, w, g / w, w, g / w, w, c]).permute(&[0, 2, 4, 1, 3, 5, 6]).reshape(&[nw * t, c]);
        let qkv = self.qkv.fwd(cx, &win).reshape(&[nw, t, 3, heads, d]).permute(&[2, 0, 3, 1, 4]);
        let part = |i| qkv.narrow(0, i, 1).reshape(&[nw, heads, t, d]);
        let (q, k, v) = (part(0), part(1), part(2));
        let bias = cx
            .p(self.rel_bias)
            .index_rows(Arc::new(relative_index(w, window)))
            .permute(&[1, 0])
            .reshape(&[heads, t, t]);
        let mask = (shift > 0).then(|| Arc::new(shift_mask(g, w, shift)));
        let o = attention(&q, &k, &v, Some(&bias), mask, 1.0 / (d as f32).sqrt());
        let o = self.proj.fwd(cx, &o.permute(&[0, 2, 1, 3]).reshape(&[nw * t, c]));
        let mut o = o.reshape(&[g / w, g / w, g / w, w, w, w, c]).permute(&[0, 3, 1, 4, 2, 5, 6]).reshape(&[g, g, g, c]);
        if shift > 0 {
            let s = shift as isize;
            o = o.roll(&[(0, s), (1, s), (2, s)]);
        }
        let x = x.add(&o.reshape(&[g * g * g, c]));
        let m = self.fc2.fwd(cx, &self.fc1.fwd(cx, &self.norm2.fwd(cx, &x)).gelu());
        x.add(&m)
    }
}

/// Row of the bias table for every (query, key) pair of a `w^3` window; the
/// table is laid out for windows of side `table_w`.
fn relative_index(w: usize, table_w: usize) -> Vec<usize> {
    let span = 2 * table_w - 1;
    let coords: Vec<[usize; 3]> = (0..w * w * w).map(|i| [i / (w * w), (i / w) % w, i % w]).collect();
    let mut idx = Vec::with_capacity(coords.len() * coords.len());
    for a in &coords {
        for b in &coords {
            let r = |k: usize| a[k] + table_w - 1 - b[k];
            idx.push((r(0) * span + r(1)) * span + r(2));
        }
    }
    idx
}

/// Additive mask keeping attention inside the regions a cyclic shift glued
/// together: `[windows, T, T]` with 0 within a region and -100 across.
fn shift_mask(g: usize, w: usize, shift: usize) -> Tensor {
    let region = |x: usize| {
        if x < g - w {
            0
        } else if x < g - shift {
            1
        } else {
            2
        }
    };
    let nwa = g / w;
    let t = w * w * w;
    let mut data = Vec::with_capacity(nwa.pow(3) * t * t);
    for wx in 0..nwa {
        for wy in 0..nwa {
            for wz in 0..nwa {
                let labels: Vec<usize> = (0..t)
                    .map(|i| {
                        let (a, b, c) = (wx * w + i / (w * w), wy * w + (i / w) % w, wz * w + i % w);
                        region(a) * 9 + region(b) * 3 + region(c)
                    })
                    .collect();
                for &la in &labels {
                    data.extend(labels.iter().map(|&lb| if la == lb { 0.0 } else { -100.0 }));
                }
            }
        }
    }
    Tensor::new([nwa.pow(3), t, t], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_index_is_symmetric_about_the_centre() {
        let idx = relative_index(4, 4);
        let centre = (3 * 7 + 3) * 7 + 3;
        assert!((0..64).all(|i| idx[i * 64 + i] == centre));
        assert_eq!(idx[63], 0); // query (0,0,0), key (3,3,3)
        assert_eq!(idx[63 * 64], 342);
    }

    #[test]
    fn shift_mask_blocks_only_wrapped_windows() {
        let m = shift_mask(8, 4, 2);
        assert_eq!(m.shape(), &[8, 64, 64]);
        // the first window lies wholly in region 0 on every axis
        assert!(m.data()[..64 * 64].iter().all(|&v| v == 0.0));
        // the last window mixes regions 1 and 2 on every axis
        let last = &m.data()[7 * 4096..];
        assert!(last.iter().any(|&v| v < 0.0));
    }
}
