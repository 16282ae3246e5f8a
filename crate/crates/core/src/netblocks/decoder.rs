//! Two-way transformer between prompt tokens and image tokens, followed by
//! learned upscaling and a hypernetwork mask head.

use sat3d_tensor::{attention, resize_trilinear, ParamId, Var};

use super::{Builder, Cx, Init, Linear, ModelConfig, Norm, PromptEncoder};

#[derive(Clone, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attn {
    fn build(b: &mut Builder, name: &str, e: usize, heads: usize, downsample: usize) -> Self {
        let i = e / downsample;
        Self {
            q: b.linear(&format!("{name}.q"), e, i, true, Init::FanIn),
            k: b.linear(&format!("{name}.k"), e, i, true, Init::FanIn),
            v: b.linear(&format!("{name}.v"), e, i, true, Init::FanIn),
            out: b.linear(&format!("{name}.out"), i, e, true, Init::FanIn),
            heads,
        }
    }

    fn forward<'g>(&self, cx: Cx<'g>, q: &Var<'g>, k: &Var<'g>, v: &Var<'g>) -> Var<'g> {
        let h = self.heads;
        let split = |x: Var<'g>| {
            let (t, i) = (x.shape()[0], x.shape()[1]);
            x.reshape(&[t, h, i / h]).permute(&[1, 0, 2]).reshape(&[1, h, t, i / h])
        };
        let (q, k, v) = (split(self.q.fwd(cx, q)), split(self.k.fwd(cx, k)), split(self.v.fwd(cx, v)));
        let (tq, d) = (q.shape()[2], q.shape()[3]);
        let o = attention(&q, &k, &v, None, None, 1.0 / (d as f32).sqrt());
        self.out.fwd(cx, &o.reshape(&[h, tq, d]).permute(&[1, 0, 2]).reshape(&[tq, h * d]))
    }
}

#[derive(Clone, Debug)]
struct TwoWayLayer {
    self_attn: Attn,
    norm1: Norm,
    cross_t2i: Attn,
    norm2: Norm,
    mlp: [Linear; 2],
    norm3: Norm,
    cross_i2t: Attn,
    norm4: Norm,
    skip_first_pe: bool,
}

impl TwoWayLayer {
    fn forward<'g>(&self, cx: Cx<'g>, queries: Var<'g>, keys: Var<'g>, qpe: &Var<'g>, kpe: &Var<'g>) -> (Var<'g>, Var<'g>) {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(cx, &queries, &queries, &queries)
        } else {
            let q = queries.add(qpe);
            queries.add(&self.self_attn.forward(cx, &q, &q, &queries))
        };
        let queries = self.norm1.fwd(cx, &queries);
        let (q, k) = (queries.add(qpe), keys.add(kpe));
        let queries = self.norm2.fwd(cx, &queries.add(&self.cross_t2i.forward(cx, &q, &k, &keys)));
        let m = self.mlp[1].fwd(cx, &self.mlp[0].fwd(cx, &queries).relu());
        let queries = self.norm3.fwd(cx, &queries.add(&m));
        let q = queries.add(qpe);
        let keys = self.norm4.fwd(cx, &keys.add(&self.cross_i2t.forward(cx, &k, &q, &queries)));
        (queries, keys)
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    embed: usize,
    grid: usize,
    input: usize,
    mask_token: ParamId,
    layers: Vec<TwoWayLayer>,
    final_attn: Attn,
    norm_final: Norm,
    up1: Linear,
    up_norm: Norm,
    up2: Linear,
    hyper: [Linear; 3],
}

impl MaskDecoder {
    pub(crate) fn build(b: &mut Builder, model: &ModelConfig) -> Self {
        let e = model.embed_dim();
        let cfg = &model.decoder;
        let layers = (0..cfg.depth)
            .map(|i| {
                let p = format!("decoder.layers.{i}");
                TwoWayLayer {
                    self_attn: Attn::build(b, &format!("{p}.self_attn"), e, cfg.heads, 1),
                    norm1: b.norm(&format!("{p}.norm1"), e),
                    cross_t2i: Attn::build(b, &format!("{p}.cross_t2i"), e, cfg.heads, cfg.attn_downsample),
                    norm2: b.norm(&format!("{p}.norm2"), e),
                    mlp: [
                        b.linear(&format!("{p}.mlp.0"), e, cfg.mlp_ratio * e, true, Init::FanIn),
                        b.linear(&format!("{p}.mlp.1"), cfg.mlp_ratio * e, e, true, Init::FanIn),
                    ],
                    norm3: b.norm(&format!("{p}.norm3"), e),
                    cross_i2t: Attn::build(b, &format!("{p}.cross_i2t"), e, cfg.heads, cfg.attn_downsample),
                    norm4: b.norm(&format!("{p}.norm4"), e),
                    skip_first_pe: i == 0,
                }
            })
            .collect();
        let (e4, e8) = (e / 4, e / 8);
        Self {
            embed: e,
            grid: model.embed_grid(),
            input: model.input_size,
            mask_token: b.param("decoder.mask_token", &[1, e], Init::Normal, 0),
            layers,
            final_attn: Attn::build(b, "decoder.final_attn", e, cfg.heads, cfg.attn_downsample),
            norm_final: b.norm("decoder.norm_final", e),
            up1: b.linear("decoder.upscale.0", e, 8 * e4, true, Init::FanIn),
            up_norm: b.norm("decoder.upscale.norm", e4),
            up2: b.linear("decoder.upscale.1", e4, 8 * e8, true, Init::FanIn),
            hyper: [
                b.linear("decoder.hyper.0", e, e, true, Init::FanIn),
                b.linear("decoder.hyper.1", e, e, true, Init::FanIn),
                b.linear("decoder.hyper.2", e, e8, true, Init::FanIn),
            ],
        }
    }

    /// Mask logits `[1, S, S, S]` from image tokens `[N, E]`, sparse tokens
    /// `[P, E]` and the dense prompt `[N, E]`.
    pub fn forward<'g>(&self, cx: Cx<'g>, prompt: &PromptEncoder, img: &Var<'g>, sparse: &Var<'g>, dense: &Var<'g>) -> Var<'g> {
        let n = self.grid;
        let token = cx.p(self.mask_token);
        let tokens = if sparse.shape()[0] == 0 { token } else { Var::concat(&[&token, sparse], 0) };
        let kpe = cx.constant(prompt.grid_positional());
        let mut queries = tokens.clone();
        let mut keys = img.add(dense);
        for layer in &self.layers {
            (queries, keys) = layer.forward(cx, queries, keys, &tokens, &kpe);
        }
        let q = queries.add(&tokens);
        let k = keys.add(&kpe);
        let queries = self.norm_final.fwd(cx, &queries.add(&self.final_attn.forward(cx, &q, &k, &keys)));

        let up = depth_to_space(&self.up1.fwd(cx, &keys), n);
        let up = self.up_norm.fwd(cx, &up).gelu();
        let up = depth_to_space(&self.up2.fwd(cx, &up), 2 * n).gelu();
        let t = queries.narrow(0, 0, 1);
        let hyper = self.hyper[2].fwd(cx, &self.hyper[1].fwd(cx, &self.hyper[0].fwd(cx, &t).relu()).relu());
        let e8 = self.embed / 8;
        let m = 4 * n;
        let logits = up.matmul(&hyper.reshape(&[e8, 1])).reshape(&[1, m, m, m]);
        resize_trilinear(&logits, [self.input; 3])
    }
}

/// `[n^3, 8C]` tokens to `[(2n)^3, C]`, the channel triple index giving the
/// offset within each 2x2x2 output block.
fn depth_to_space<'g>(x: &Var<'g>, n: usize) -> Var<'g> {
    let c = x.shape()[1] / 8;
    x.reshape(&[n, n, n, 2, 2, 2, c]).permute(&[0, 3, 1, 4, 2, 5, 6]).reshape(&[8 * n * n * n, c])
}
