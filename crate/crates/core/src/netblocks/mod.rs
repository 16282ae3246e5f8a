//! The four networks: a shifted-window 3-D transformer image encoder, the
//! prompt encoder (point tokens plus fused mask/confidence dense prompt), a
//! two-way transformer mask decoder and the voxel-wise critic.
//!
//! Every network reads its weights from one [`ParamStore`] under a stable
//! name prefix (`encoder.`, `prompt.`, `decoder.`, `critic.`). The `*_var`
//! methods build differentiable graphs for training; the plain methods run
//! eagerly without recording.

mod checkpoint;
mod critic;
mod decoder;
mod encoder;
mod prompt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sat3d_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::promptloop::PointPrompt;
use crate::volgrid::{BinaryMask, ConfidenceMap, ProbGrid, Spacing, Volume};

pub use checkpoint::{load_archive, save_archive, Archive};
pub use critic::Critic;
pub use decoder::MaskDecoder;
pub use encoder::ImageEncoder;
pub use prompt::PromptEncoder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Voxels per side of the initial patch.
    pub patch: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch: 2, embed_dim: 48, depths: vec![2, 2, 2, 2], heads: vec![3, 6, 12, 24], window: 4, mlp_ratio: 4 }
    }
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Channels of stage `i` (0-based).
    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    pub fn out_dim(&self) -> usize {
        self.stage_dim(self.stages() - 1)
    }

    /// Total spatial downsampling from input to embedding grid.
    pub fn downsample(&self) -> usize {
        self.patch << (self.stages() - 1)
    }

    /// Token grid side at stage `i` for an input of side `n`.
    pub fn stage_grid(&self, n: usize, i: usize) -> usize {
        n / (self.patch << i)
    }

    pub fn validate(&self, input: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad(format!("{} depths for {} head counts", self.depths.len(), self.heads.len()));
        }
        if self.patch == 0 || self.window == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return bad("patch, window, embed_dim and mlp_ratio must be positive".into());
        }
        if input == 0 || !input.is_multiple_of(self.downsample()) {
            return bad(format!("input side {input} is not divisible by {}", self.downsample()));
        }
        for i in 0..self.stages() {
            let (c, h) = (self.stage_dim(i), self.heads[i]);
            if h == 0 || c % h != 0 {
                return bad(format!("stage {i}: {c} channels not divisible by {h} heads"));
            }
            let g = self.stage_grid(input, i);
            if !g.is_multiple_of(self.window.min(g)) {
                return bad(format!("stage {i}: grid {g} not divisible by window {}", self.window));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Channels of the two strided convolutions in each dense branch.
    pub dense_channels: [usize; 2],
    /// Seed of the fixed Fourier positional-encoding matrix.
    pub pe_seed: u64,
    pub pe_scale: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { dense_channels: [4, 16], pe_seed: 0x5a73_3d00, pe_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Internal width divisor of the token/image cross-attentions.
    pub attn_downsample: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { depth: 2, heads: 8, mlp_ratio: 2, attn_downsample: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub channels: Vec<usize>,
    pub slope: f32,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { channels: vec![8, 16, 32, 64], slope: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the cubic input crop.
    pub input_size: usize,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub decoder: DecoderConfig,
    pub critic: CriticConfig,
    /// Confidence binarisation threshold.
    pub threshold: f64,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-scale 128^3 crops.
    pub fn full() -> Self {
        Self { input_size: 128, ..Self::desk() }
    }

    /// The default architecture on 64^3 crops.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            encoder: EncoderConfig::default(),
            prompt: PromptConfig::default(),
            decoder: DecoderConfig::default(),
            critic: CriticConfig::default(),
            threshold: 0.3,
            init_seed: 0,
        }
    }

    /// A narrow two-stage network for fast tests.
    pub fn tiny(input_size: usize) -> Self {
        Self {
            input_size,
            encoder: EncoderConfig { patch: 2, embed_dim: 8, depths: vec![2, 2], heads: vec![1, 2], window: 4, mlp_ratio: 2 },
            prompt: PromptConfig { dense_channels: [2, 4], ..PromptConfig::default() },
            decoder: DecoderConfig { depth: 1, heads: 2, mlp_ratio: 2, attn_downsample: 2 },
            critic: CriticConfig { channels: vec![4, 8], slope: 0.2 },
            threshold: 0.3,
            init_seed: 0,
        }
    }

    /// Width of image and prompt embeddings.
    pub fn embed_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    /// Side of the embedding grid.
    pub fn embed_grid(&self) -> usize {
        self.input_size / self.encoder.downsample()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.input_size)?;
        let e = self.embed_dim();
        let d = &self.decoder;
        if d.heads == 0 || d.attn_downsample == 0 || !e.is_multiple_of(d.heads * d.attn_downsample) || !e.is_multiple_of(8) {
            return Err(Error::Config(format!("decoder width {e} incompatible with {} heads / downsample {}", d.heads, d.attn_downsample)));
        }
        let levels = self.critic.channels.len();
        if levels == 0 || !self.input_size.is_multiple_of(1 << levels) {
            return Err(Error::Config(format!("critic with {levels} levels needs input divisible by {}", 1usize << levels)));
        }
        let ds = self.encoder.downsample();
        if !ds.is_power_of_two() || ds < 4 {
            return Err(Error::Config(format!("dense prompt downscaling needs a power-of-two factor >= 4, got {ds}")));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// Image features as tokens `[h*w*d, E]` in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub features: Tensor,
    pub grid: [usize; 3],
    pub spacing: Spacing,
}

impl ImageEmbedding {
    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    /// One token per point, `[P, E]`.
    pub sparse: Tensor,
    /// Dense prompt on the embedding grid, `[h*w*d, E]`.
    pub dense: Tensor,
}

impl PromptEmbedding {
    pub fn num_points(&self) -> usize {
        self.sparse.shape()[0]
    }
}

/// `c > t` voxel-wise.
pub fn binarize_confidence(c: &ConfidenceMap, t: f64, spacing: Spacing) -> Result<BinaryMask> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!("confidence threshold {t} outside (0, 1)")));
    }
    Ok(c.above(t as f32, spacing))
}

/// Parameter-group of a parameter name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    Prompt,
    Decoder,
    Critic,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::Prompt, Group::Decoder, Group::Critic];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Encoder => "encoder.",
            Group::Prompt => "prompt.",
            Group::Decoder => "decoder.",
            Group::Critic => "critic.",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        Self::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }

    pub fn is_generator(self) -> bool {
        self != Group::Critic
    }
}

/// Graph plus parameter store, threaded through forward passes.
#[derive(Clone, Copy)]
pub struct Cx<'g> {
    pub g: &'g Graph,
    pub store: &'g ParamStore,
}

impl<'g> Cx<'g> {
    pub fn new(g: &'g Graph, store: &'g ParamStore) -> Self {
        Self { g, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'g> {
        self.g.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.g.constant(t)
    }
}

/// Initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Truncated normal, std 0.02.
    TruncNormal,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zeros,
    Ones,
    Normal,
}

pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, fan_in: usize) -> ParamId {
        let t = match init {
            Init::TruncNormal => Tensor::trunc_normal(shape, 0.02, &mut self.rng),
            Init::FanIn => Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f32).sqrt(), &mut self.rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal => Tensor::randn(shape, 1.0, &mut self.rng),
        };
        self.store.insert(name, t)
    }

    pub fn linear(&mut self, name: &str, i: usize, o: usize, bias: bool, init: Init) -> Linear {
        let w = self.param(&format!("{name}.weight"), &[i, o], init, i);
        let b = bias.then(|| {
            let binit = if matches!(init, Init::FanIn) { Init::FanIn } else { Init::Zeros };
            self.param(&format!("{name}.bias"), &[o], binit, i)
        });
        Linear { w, b }
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm { g: self.param(&format!("{name}.weight"), &[c], Init::Ones, 0), b: self.param(&format!("{name}.bias"), &[c], Init::Zeros, 0) }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let fan = cin * k * k * k;
        Conv {
            w: self.param(&format!("{name}.weight"), &[cout, cin, k, k, k], Init::FanIn, fan),
            b: self.param(&format!("{name}.bias"), &[cout], Init::FanIn, fan),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn fwd<'g>(&self, cx: Cx<'g>, x: &Var<'g>) -> Var<'g> {
        let b = self.b.map(|b| cx.p(b));
        x.linear(&cx.p(self.w), b.as_ref())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    pub fn fwd<'g>(&self, cx: Cx<'g>, x: &Var<'g>) -> Var<'g> {
        x.layer_norm(&cx.p(self.g), &cx.p(self.b), 1e-5)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    pub fn fwd<'g>(&self, cx: Cx<'g>, x: &Var<'g>, stride: usize, padding: usize) -> Var<'g> {
        let k = cx.store.get(self.w).shape()[2];
        sat3d_tensor::conv3d(x, &cx.p(self.w), Some(&cx.p(self.b)), sat3d_tensor::Conv3dSpec { kernel: k, stride, padding })
    }
}

/// `[C, X, Y, Z]` to channels-last tokens `[X*Y*Z, C]`.
pub(crate) fn grid_to_tokens<'g>(x: &Var<'g>) -> Var<'g> {
    let s = x.shape().to_vec();
    x.permute(&[1, 2, 3, 0]).reshape(&[s[1] * s[2] * s[3], s[0]])
}

/// The complete generator and critic with their parameters.
#[derive(Clone, Debug)]
pub struct Sat3d {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: ImageEncoder,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
    pub critic: Critic,
}

impl Sat3d {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, config.init_seed);
        let encoder = ImageEncoder::build(&mut b, &config);
        let prompt = PromptEncoder::build(&mut b, &config);
        let decoder = MaskDecoder::build(&mut b, &config);
        let critic = Critic::build(&mut b, &config);
        Ok(Self { config, params, encoder, prompt, decoder, critic })
    }

    /// Rebuilds the network for `config` and loads named tensors into it.
    pub fn from_tensors(config: ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut m = Self::new(config)?;
        let mut seen = 0;
        for (name, t) in tensors {
            let Some(id) = m.params.id(name) else { continue };
            if m.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", t.shape(), m.params.get(id).shape())));
            }
            m.params.set(id, t.clone());
            seen += 1;
        }
        if seen != m.params.len() {
            let missing: Vec<&str> = m.params.iter().map(|(_, n, _)| n).filter(|n| !tensors.iter().any(|(t, _)| t == n)).take(5).collect();
            return Err(Error::Checkpoint(format!("missing parameters, e.g. {missing:?}")));
        }
        Ok(m)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, dims: [usize; 3], what: &str) -> Result<()> {
        let s = self.config.input_size;
        if dims != [s; 3] {
            return Err(Error::Shape(format!("{what} has shape {dims:?}, model expects {s}^3")));
        }
        Ok(())
    }

    /// Image embedding of a single-channel volume of the configured size.
    pub fn encode_image(&self, v: &Volume) -> Result<ImageEmbedding> {
        if v.channels() != 1 {
            return Err(Error::Shape(format!("expected one channel, got {}", v.channels())));
        }
        self.check_input(v.dims(), "volume")?;
        let g = Graph::no_grad();
        let cx = Cx::new(&g, &self.params);
        let x = cx.constant(Tensor::new([1, v.dims()[0], v.dims()[1], v.dims()[2]], v.data().to_vec()));
        let f = self.encoder.forward(cx, &x);
        let n = self.config.embed_grid();
        Ok(ImageEmbedding { features: (*f.value()).clone(), grid: [n; 3], spacing: v.spacing() })
    }

    /// Point tokens plus the dense prompt from the previous mask and
    /// binarised confidence. Blank dense inputs select the no-mask embedding.
    pub fn encode_prompts(&self, points: &[PointPrompt], prev_mask: &BinaryMask, prev_conf: &BinaryMask) -> Result<PromptEmbedding> {
        self.check_input(prev_mask.dims(), "previous mask")?;
        self.check_input(prev_conf.dims(), "previous confidence")?;
        let g = Graph::no_grad();
        let cx = Cx::new(&g, &self.params);
        let (s, d) = self.prompt.forward(cx, points, &prev_mask.to_f32(), &prev_conf.to_f32())?;
        Ok(PromptEmbedding { sparse: (*s.value()).clone(), dense: (*d.value()).clone() })
    }

    /// Mask logits `[1, S, S, S]`.
    pub fn decode_mask(&self, img: &ImageEmbedding, prompts: &PromptEmbedding) -> Result<Tensor> {
        let e = self.config.embed_dim();
        if img.features.shape() != prompts.dense.shape() || img.channels() != e || prompts.sparse.shape()[1] != e {
            return Err(Error::Shape(format!("image {:?}, dense {:?}, sparse {:?}", img.features.shape(), prompts.dense.shape(), prompts.sparse.shape())));
        }
        let g = Graph::no_grad();
        let cx = Cx::new(&g, &self.params);
        let out = self.decoder.forward(
            cx,
            &self.prompt,
            &cx.constant(img.features.clone()),
            &cx.constant(prompts.sparse.clone()),
            &cx.constant(prompts.dense.clone()),
        );
        Ok((*out.value()).clone())
    }

    /// Voxel-wise confidence that `prob` is a real mask.
    pub fn critic_forward(&self, prob: &ProbGrid) -> Result<ConfidenceMap> {
        self.check_input(prob.dims(), "critic input")?;
        let g = Graph::no_grad();
        let cx = Cx::new(&g, &self.params);
        let d = prob.dims();
        let logits = self.critic.forward(cx, &cx.constant(Tensor::new([1, d[0], d[1], d[2]], prob.data().to_vec())));
        ProbGrid::new(d, logits.value().data().iter().map(|&z| sat3d_tensor::sigmoid(z)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_arithmetic_for_full_config() {
        let c = ModelConfig::full();
        c.validate().unwrap();
        assert_eq!(c.embed_dim(), 384);
        assert_eq!(c.embed_grid(), 8);
        assert_eq!((0..4).map(|i| c.encoder.stage_dim(i)).collect::<Vec<_>>(), vec![48, 96, 192, 384]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::desk();
        c.input_size = 72;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk();
        c.encoder.heads[0] = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk();
        c.threshold = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn binarize_is_strict() {
        let d = [2, 2, 2];
        let all = |v| binarize_confidence(&ProbGrid::full(d, v), 0.3, Spacing::ISO).unwrap().count();
        assert_eq!(all(0.9), 8);
        assert_eq!(all(0.3), 0);
        let checker = ProbGrid::new(d, (0..8).map(|i| if i % 2 == 0 { 0.2 } else { 0.4 }).collect()).unwrap();
        let m = binarize_confidence(&checker, 0.3, Spacing::ISO).unwrap();
        assert_eq!(m.data(), &[0, 1, 0, 1, 0, 1, 0, 1]);
        assert!(binarize_confidence(&checker, 0.0, Spacing::ISO).is_err());
    }
}
