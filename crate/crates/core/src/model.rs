//! The miniature denoiser: a two-level token pyramid over the latent image,
//! each level running one adapter-equipped attention block (static ->
//! grounding -> dynamic) plus a frozen feed-forward, with a skip connection
//! across the downsample. Single channel, single head, f64.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    dynamic_cross_attention_var, grounding_attention_var, static_attention_var, AdapterConfig,
    AdapterParams, AdapterVars,
};
use crate::encoder::sinusoid_row;
use crate::error::{Error, Result};
use crate::fourier::FourierSpec;
use crate::layout::upsample_indices;
use crate::schedule::NoiseSchedule;
use crate::{Tape, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square single-channel latent.
    pub latent: usize,
    /// Patch-embedding side; level-0 tokens are `(latent/patch)²`.
    pub patch: usize,
    /// Token feature width.
    pub d: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    /// Vocabulary size of the frozen embedding table.
    pub vocab: usize,
    /// Maximum prompt length.
    pub max_prompt: usize,
    /// Learnable resampler query count (N).
    pub resampler_queries: usize,
    /// Perceiver block count.
    pub resampler_blocks: usize,
    /// Patch side used when featurizing subject reference images.
    pub subject_patch: usize,
    pub fourier: FourierSpec,
    pub adapter: AdapterConfig,
    /// Fraction of T at which the static refiner runs (zero injected noise).
    pub refiner_t_frac: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent: 32,
            patch: 2,
            d: 64,
            d_ff: 128,
            vocab: crate::data::vocab_size(),
            max_prompt: 16,
            resampler_queries: 16,
            resampler_blocks: 4,
            subject_patch: 8,
            fourier: FourierSpec::default(),
            adapter: AdapterConfig::default(),
            refiner_t_frac: 0.1,
        }
    }
}

impl ModelConfig {
    /// Tiny instance for gradient checks (8x8 latent, levels 4 and 2).
    pub fn gradcheck() -> Self {
        ModelConfig { latent: 8, subject_patch: 4, ..ModelConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.latent % self.patch != 0 {
            return Err(Error::Config(format!(
                "model: patch {} must divide latent {}",
                self.patch, self.latent
            )));
        }
        let p0 = self.latent / self.patch;
        if p0 < 2 || p0 % 2 != 0 {
            return Err(Error::Config(format!("model: level-0 size {p0} must be even and >= 2")));
        }
        if self.d % 2 != 0 || self.d < 4 {
            return Err(Error::Config("model: d must be even and >= 4".into()));
        }
        if self.subject_patch == 0 || self.latent % self.subject_patch != 0 {
            return Err(Error::Config(format!(
                "model: subject_patch {} must divide latent {}",
                self.subject_patch, self.latent
            )));
        }
        if self.vocab == 0 || self.max_prompt == 0 || self.resampler_queries == 0 {
            return Err(Error::Config("model: table sizes must be positive".into()));
        }
        if !(self.refiner_t_frac > 0.0 && self.refiner_t_frac <= 1.0) {
            return Err(Error::Config("model: refiner_t_frac must be in (0,1]".into()));
        }
        self.adapter.validate()
    }

    /// Pyramid spatial sizes, finest first.
    pub fn levels(&self) -> (usize, usize) {
        let p0 = self.latent / self.patch;
        (p0, p0 / 2)
    }

    /// Static-feature token count (coarsest-level cells).
    pub fn static_tokens(&self) -> usize {
        let (_, p1) = self.levels();
        p1 * p1
    }

    /// Width of one subject view token.
    pub fn subject_token_dim(&self) -> usize {
        3 * self.subject_patch * self.subject_patch
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn: AdapterParams,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

/// Full parameter set: frozen backbone plus trainable adapter, resampler,
/// grounding MLPs and refiner projection. The frozen/trainable partition is
/// explicit in [`DenoiserParams::visit`] and enforced by the checkpoint.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub cfg: ModelConfig,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub pos0: Tensor,
    pub pos1: Tensor,
    pub time_w1: Tensor,
    pub time_b1: Tensor,
    pub time_w2: Tensor,
    pub time_b2: Tensor,
    pub vocab_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub unembed_w: Tensor,
    pub unembed_b: Tensor,
    pub resampler: crate::encoder::ResamplerParams,
    pub grounding: crate::layout::GroundingMlpParams<f64>,
    pub refiner_w: Tensor,
    pub refiner_b: Tensor,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let std = (1.0 / rows as f64).sqrt();
    Tensor::randn(rng, &[rows, cols]).scale(std).unwrap()
}

impl DenoiserParams {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p0, p1) = cfg.levels();
        let d = cfg.d;
        let pp = cfg.patch * cfg.patch;
        let blocks = (0..2)
            .map(|_| BlockParams {
                attn: AdapterParams::init(d, &mut rng),
                ffn_w1: xavier(&mut rng, d, cfg.d_ff),
                ffn_b1: Tensor::zeros(&[cfg.d_ff]),
                ffn_w2: xavier(&mut rng, cfg.d_ff, d),
                ffn_b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(DenoiserParams {
            embed_w: xavier(&mut rng, pp, d),
            embed_b: Tensor::zeros(&[d]),
            pos0: Tensor::randn(&mut rng, &[p0 * p0, d]).scale(0.3)?,
            pos1: Tensor::randn(&mut rng, &[p1 * p1, d]).scale(0.3)?,
            time_w1: xavier(&mut rng, d, d),
            time_b1: Tensor::zeros(&[d]),
            time_w2: xavier(&mut rng, d, d),
            time_b2: Tensor::zeros(&[d]),
            vocab_emb: Tensor::randn(&mut rng, &[cfg.vocab, d]).scale(0.3)?,
            blocks,
            // Small output scale calibrates the initial noise prediction
            // near zero, the frozen stand-in for a pretrained backbone.
            unembed_w: xavier(&mut rng, d, pp).scale(0.05)?,
            unembed_b: Tensor::zeros(&[pp]),
            resampler: crate::encoder::ResamplerParams::init(
                cfg.resampler_queries,
                cfg.subject_token_dim(),
                d,
                cfg.resampler_blocks,
                &mut rng,
            ),
            grounding: crate::layout::GroundingMlpParams::init(d, cfg.fourier.encoding_dim(), &mut rng),
            refiner_w: xavier(&mut rng, 2 * d, d),
            refiner_b: Tensor::zeros(&[d]),
            cfg,
        })
    }

    /// Visits every parameter as `(name, tensor, frozen)`.
    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor, bool)) {
        f("embed_w", &self.embed_w, true);
        f("embed_b", &self.embed_b, true);
        f("pos0", &self.pos0, true);
        f("pos1", &self.pos1, true);
        f("time_w1", &self.time_w1, true);
        f("time_b1", &self.time_b1, true);
        f("time_w2", &self.time_w2, true);
        f("time_b2", &self.time_b2, true);
        f("vocab_emb", &self.vocab_emb, true);
        for (i, b) in self.blocks.iter().enumerate() {
            b.attn.visit(&format!("block{i}"), &mut f);
            f(&format!("block{i}.ffn_w1"), &b.ffn_w1, true);
            f(&format!("block{i}.ffn_b1"), &b.ffn_b1, true);
            f(&format!("block{i}.ffn_w2"), &b.ffn_w2, true);
            f(&format!("block{i}.ffn_b2"), &b.ffn_b2, true);
        }
        f("unembed_w", &self.unembed_w, true);
        f("unembed_b", &self.unembed_b, true);
        self.resampler.visit(|name, t| f(name, t, false));
        self.grounding.visit(|name, t| f(name, t, false));
        f("refiner_w", &self.refiner_w, false);
        f("refiner_b", &self.refiner_b, false);
    }

    /// Every parameter in visit order, mutable (checkpoint loading).
    pub fn all_params_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        let mut out: Vec<(String, &mut Tensor, bool)> = vec![
            ("embed_w".into(), &mut self.embed_w, true),
            ("embed_b".into(), &mut self.embed_b, true),
            ("pos0".into(), &mut self.pos0, true),
            ("pos1".into(), &mut self.pos1, true),
            ("time_w1".into(), &mut self.time_w1, true),
            ("time_b1".into(), &mut self.time_b1, true),
            ("time_w2".into(), &mut self.time_w2, true),
            ("time_b2".into(), &mut self.time_b2, true),
            ("vocab_emb".into(), &mut self.vocab_emb, true),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let a = &mut b.attn;
            out.push((format!("block{i}.self_wq"), &mut a.self_wq, true));
            out.push((format!("block{i}.self_wk"), &mut a.self_wk, true));
            out.push((format!("block{i}.self_wv"), &mut a.self_wv, true));
            out.push((format!("block{i}.text_wq"), &mut a.text_wq, true));
            out.push((format!("block{i}.text_wk"), &mut a.text_wk, true));
            out.push((format!("block{i}.text_wv"), &mut a.text_wv, true));
            out.push((format!("block{i}.mu"), &mut a.mu, false));
            out.push((format!("block{i}.gamma"), &mut a.gamma, false));
            out.push((format!("block{i}.static_wq"), &mut a.static_wq, false));
            out.push((format!("block{i}.static_wk"), &mut a.static_wk, false));
            out.push((format!("block{i}.static_wv"), &mut a.static_wv, false));
            out.push((format!("block{i}.ground_wq"), &mut a.ground_wq, false));
            out.push((format!("block{i}.ground_wk"), &mut a.ground_wk, false));
            out.push((format!("block{i}.ground_wv"), &mut a.ground_wv, false));
            out.push((format!("block{i}.img_wk"), &mut a.img_wk, false));
            out.push((format!("block{i}.img_wv"), &mut a.img_wv, false));
            out.push((format!("block{i}.ffn_w1"), &mut b.ffn_w1, true));
            out.push((format!("block{i}.ffn_b1"), &mut b.ffn_b1, true));
            out.push((format!("block{i}.ffn_w2"), &mut b.ffn_w2, true));
            out.push((format!("block{i}.ffn_b2"), &mut b.ffn_b2, true));
        }
        out.push(("unembed_w".into(), &mut self.unembed_w, true));
        out.push(("unembed_b".into(), &mut self.unembed_b, true));
        let r = &mut self.resampler;
        out.push(("resampler.queries".into(), &mut r.queries, false));
        out.push(("resampler.w_in".into(), &mut r.w_in, false));
        for (i, blk) in r.blocks.iter_mut().enumerate() {
            out.push((format!("resampler.block{i}.wq"), &mut blk.wq, false));
            out.push((format!("resampler.block{i}.wk"), &mut blk.wk, false));
            out.push((format!("resampler.block{i}.wv"), &mut blk.wv, false));
            out.push((format!("resampler.block{i}.ffn_w1"), &mut blk.ffn_w1, false));
            out.push((format!("resampler.block{i}.ffn_b1"), &mut blk.ffn_b1, false));
            out.push((format!("resampler.block{i}.ffn_w2"), &mut blk.ffn_w2, false));
            out.push((format!("resampler.block{i}.ffn_b2"), &mut blk.ffn_b2, false));
        }
        out.push(("resampler.w_out".into(), &mut r.w_out, false));
        out.push(("resampler.b_out".into(), &mut r.b_out, false));
        let g = &mut self.grounding;
        out.push(("grounding.vis_w1".into(), &mut g.vis_w1, false));
        out.push(("grounding.vis_b1".into(), &mut g.vis_b1, false));
        out.push(("grounding.vis_w2".into(), &mut g.vis_w2, false));
        out.push(("grounding.vis_b2".into(), &mut g.vis_b2, false));
        out.push(("grounding.txt_w1".into(), &mut g.txt_w1, false));
        out.push(("grounding.txt_b1".into(), &mut g.txt_b1, false));
        out.push(("grounding.txt_w2".into(), &mut g.txt_w2, false));
        out.push(("grounding.txt_b2".into(), &mut g.txt_b2, false));
        out.push(("grounding.out_w".into(), &mut g.out_w, false));
        out.push(("grounding.out_b".into(), &mut g.out_b, false));
        out.push(("refiner_w".into(), &mut self.refiner_w, false));
        out.push(("refiner_b".into(), &mut self.refiner_b, false));
        out
    }

    /// Trainable parameters in visit order, mutable (optimizer path).
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let a = &mut b.attn;
            out.push((format!("block{i}.mu"), &mut a.mu));
            out.push((format!("block{i}.gamma"), &mut a.gamma));
            out.push((format!("block{i}.static_wq"), &mut a.static_wq));
            out.push((format!("block{i}.static_wk"), &mut a.static_wk));
            out.push((format!("block{i}.static_wv"), &mut a.static_wv));
            out.push((format!("block{i}.ground_wq"), &mut a.ground_wq));
            out.push((format!("block{i}.ground_wk"), &mut a.ground_wk));
            out.push((format!("block{i}.ground_wv"), &mut a.ground_wv));
            out.push((format!("block{i}.img_wk"), &mut a.img_wk));
            out.push((format!("block{i}.img_wv"), &mut a.img_wv));
        }
        let r = &mut self.resampler;
        out.push(("resampler.queries".into(), &mut r.queries));
        out.push(("resampler.w_in".into(), &mut r.w_in));
        for (i, blk) in r.blocks.iter_mut().enumerate() {
            out.push((format!("resampler.block{i}.wq"), &mut blk.wq));
            out.push((format!("resampler.block{i}.wk"), &mut blk.wk));
            out.push((format!("resampler.block{i}.wv"), &mut blk.wv));
            out.push((format!("resampler.block{i}.ffn_w1"), &mut blk.ffn_w1));
            out.push((format!("resampler.block{i}.ffn_b1"), &mut blk.ffn_b1));
            out.push((format!("resampler.block{i}.ffn_w2"), &mut blk.ffn_w2));
            out.push((format!("resampler.block{i}.ffn_b2"), &mut blk.ffn_b2));
        }
        out.push(("resampler.w_out".into(), &mut r.w_out));
        out.push(("resampler.b_out".into(), &mut r.b_out));
        let g = &mut self.grounding;
        out.push(("grounding.vis_w1".into(), &mut g.vis_w1));
        out.push(("grounding.vis_b1".into(), &mut g.vis_b1));
        out.push(("grounding.vis_w2".into(), &mut g.vis_w2));
        out.push(("grounding.vis_b2".into(), &mut g.vis_b2));
        out.push(("grounding.txt_w1".into(), &mut g.txt_w1));
        out.push(("grounding.txt_b1".into(), &mut g.txt_b1));
        out.push(("grounding.txt_w2".into(), &mut g.txt_w2));
        out.push(("grounding.txt_b2".into(), &mut g.txt_b2));
        out.push(("grounding.out_w".into(), &mut g.out_w));
        out.push(("grounding.out_b".into(), &mut g.out_b));
        out.push(("refiner_w".into(), &mut self.refiner_w));
        out.push(("refiner_b".into(), &mut self.refiner_b));
        out
    }

    /// Prompt ids to `[n×d]` embeddings with sinusoidal positions.
    pub fn prompt_embedding(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::input("prompt_embedding: empty prompt"));
        }
        if ids.len() > self.cfg.max_prompt {
            return Err(Error::input(format!(
                "prompt length {} exceeds max {}",
                ids.len(),
                self.cfg.max_prompt
            )));
        }
        let d = self.cfg.d;
        let mut data = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= self.cfg.vocab {
                return Err(Error::input(format!("token id {id} out of vocabulary")));
            }
            let pe = sinusoid_row(pos, d, 10_000.0);
            for j in 0..d {
                data.push(self.vocab_emb.at2(id, j) + pe[j]);
            }
        }
        Tensor::from_vec(vec![ids.len(), d], data)
    }

    /// Frozen entity embedding (no position) for grounding tokens.
    pub fn entity_embedding(&self, id: usize) -> Result<Tensor> {
        if id >= self.cfg.vocab {
            return Err(Error::input(format!("token id {id} out of vocabulary")));
        }
        self.vocab_emb.narrow(0, id, 1)?.reshape(&[self.cfg.d])
    }
}

pub struct BlockVars<'t> {
    pub attn: AdapterVars<'t>,
    pub ffn_w1: Var<'t>,
    pub ffn_b1: Var<'t>,
    pub ffn_w2: Var<'t>,
    pub ffn_b2: Var<'t>,
}

pub struct DenoiserVars<'t> {
    pub embed_w: Var<'t>,
    pub embed_b: Var<'t>,
    pub pos0: Var<'t>,
    pub pos1: Var<'t>,
    pub time_w1: Var<'t>,
    pub time_b1: Var<'t>,
    pub time_w2: Var<'t>,
    pub time_b2: Var<'t>,
    pub blocks: Vec<BlockVars<'t>>,
    pub unembed_w: Var<'t>,
    pub unembed_b: Var<'t>,
}

impl DenoiserParams {
    /// Registers the backbone (always constant) and the adapter weights
    /// (parameters when `train_adapter`).
    pub fn vars<'t>(&self, tape: &'t Tape, train_adapter: bool) -> DenoiserVars<'t> {
        let c = |t: &Tensor| tape.constant(t.clone());
        DenoiserVars {
            embed_w: c(&self.embed_w),
            embed_b: c(&self.embed_b),
            pos0: c(&self.pos0),
            pos1: c(&self.pos1),
            time_w1: c(&self.time_w1),
            time_b1: c(&self.time_b1),
            time_w2: c(&self.time_w2),
            time_b2: c(&self.time_b2),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    attn: b.attn.vars(tape, train_adapter),
                    ffn_w1: c(&b.ffn_w1),
                    ffn_b1: c(&b.ffn_b1),
                    ffn_w2: c(&b.ffn_w2),
                    ffn_b2: c(&b.ffn_b2),
                })
                .collect(),
            unembed_w: c(&self.unembed_w),
            unembed_b: c(&self.unembed_b),
        }
    }
}

/// Subject conditioning already projected into model space.
pub struct SubjectVars<'t> {
    /// Static detail tokens, all subjects stacked: `[K·s × d]`.
    pub c_s: Var<'t>,
    /// Per-key subject mask over the stacked static tokens.
    pub key_mask: Vec<f64>,
    /// Dynamic tokens, all subjects stacked: `[K·N × d]`.
    pub c_d: Var<'t>,
}

/// Everything the denoiser is conditioned on.
pub struct CondVars<'t> {
    pub text: Var<'t>,
    pub subjects: Option<SubjectVars<'t>>,
    pub grounding: Option<Var<'t>>,
    /// Latent-space mask restricting self-attention keys (refiner mode).
    pub self_key_mask: Option<Tensor>,
}

pub struct ForwardOutput<'t> {
    pub eps: Var<'t>,
    /// Text-branch attention maps per level, finest first.
    pub text_maps: Vec<(Var<'t>, usize)>,
    /// Self-attention outputs per level, finest first (refiner harvest).
    pub self_feats: Vec<(Var<'t>, usize)>,
}

/// Nearest-neighbor resize of an `[H×W]` mask onto a `p×p` key grid, with a
/// snap to the cell nearest the mask centroid when decimation would lose a
/// small mask entirely.
pub fn mask_to_key_grid(mask: &Tensor, p: usize) -> Result<Vec<f64>> {
    let (h, w) = mask.dims2()?;
    let mut out = vec![0.0; p * p];
    let mut any = false;
    for i in 0..p {
        let sy = ((i as f64 + 0.5) * h as f64 / p as f64) as usize;
        for j in 0..p {
            let sx = ((j as f64 + 0.5) * w as f64 / p as f64) as usize;
            if mask.at2(sy.min(h - 1), sx.min(w - 1)) == 1.0 {
                out[i * p + j] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        let (mut cx, mut cy, mut count) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..h {
            for j in 0..w {
                if mask.at2(i, j) == 1.0 {
                    cy += i as f64;
                    cx += j as f64;
                    count += 1.0;
                }
            }
        }
        if count == 0.0 {
            return Err(Error::input("mask_to_key_grid: empty mask"));
        }
        let i = ((cy / count + 0.5) * p as f64 / h as f64) as usize;
        let j = ((cx / count + 0.5) * p as f64 / w as f64) as usize;
        out[i.min(p - 1) * p + j.min(p - 1)] = 1.0;
    }
    Ok(out)
}

fn patch_order(latent: usize, patch: usize) -> Vec<usize> {
    let p0 = latent / patch;
    let mut idx = Vec::with_capacity(latent * latent);
    for pi in 0..p0 {
        for pj in 0..p0 {
            for a in 0..patch {
                for b in 0..patch {
                    idx.push((pi * patch + a) * latent + pj * patch + b);
                }
            }
        }
    }
    idx
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (k, &i) in perm.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

fn pool4_indices(p_from: usize) -> [Vec<usize>; 4] {
    let p_to = p_from / 2;
    let mut out = [vec![], vec![], vec![], vec![]];
    for (slot, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
        let v: Vec<usize> = (0..p_to * p_to)
            .map(|k| {
                let (i, j) = (k / p_to, k % p_to);
                (2 * i + dy) * p_from + 2 * j + dx
            })
            .collect();
        out[slot] = v;
    }
    out
}

fn ffn<'t>(h: Var<'t>, b: &BlockVars<'t>) -> Result<Var<'t>> {
    h.matmul(b.ffn_w1)?
        .add_row(b.ffn_b1)?
        .gelu()?
        .matmul(b.ffn_w2)?
        .add_row(b.ffn_b2)
}

#[allow(clippy::too_many_arguments)]
fn attention_block<'t>(
    h: Var<'t>,
    block: &BlockVars<'t>,
    cond: &CondVars<'t>,
    adapter_cfg: &AdapterConfig,
    self_key_mask: Option<&[f64]>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let (c_s, key_mask, c_d) = match &cond.subjects {
        Some(s) => (Some(s.c_s), Some(s.key_mask.as_slice()), Some(s.c_d)),
        None => (None, None, None),
    };
    let (z_s, self_feat) =
        static_attention_var(h, c_s, key_mask, &block.attn, adapter_cfg, self_key_mask)?;
    let z_g = grounding_attention_var(z_s, cond.grounding, &block.attn, adapter_cfg)?;
    let (z_new, text_map) = dynamic_cross_attention_var(z_g, cond.text, c_d, &block.attn, adapter_cfg)?;
    let h = h.add(z_new)?;
    let h = h.add(ffn(h, block)?)?;
    Ok((h, text_map, self_feat))
}

/// One denoiser pass. Deterministic given its inputs; collects the
/// text-branch maps (for the layout losses) and the per-level self-attention
/// outputs (for the static refiner).
pub fn forward<'t>(
    tape: &'t Tape,
    params: &DenoiserParams,
    vars: &DenoiserVars<'t>,
    z_t: Var<'t>,
    t: usize,
    cond: &CondVars<'t>,
) -> Result<ForwardOutput<'t>> {
    let cfg = &params.cfg;
    let (p0, p1) = cfg.levels();
    let latent = cfg.latent;
    if z_t.shape() != [latent, latent] {
        return Err(Error::shape(format!(
            "forward: latent must be {latent}x{latent}, got {:?}",
            z_t.shape()
        )));
    }

    // Patch-embed.
    let order = patch_order(latent, cfg.patch);
    let pp = cfg.patch * cfg.patch;
    let tokens = z_t
        .reshape(&[latent * latent, 1])?
        .gather_rows(&order)?
        .reshape(&[p0 * p0, pp])?
        .matmul(vars.embed_w)?
        .add_row(vars.embed_b)?;

    // Timestep embedding.
    let temb = tape.constant(Tensor::from_vec(
        vec![1, cfg.d],
        sinusoid_row(t, cfg.d, 10_000.0),
    )?);
    let temb = temb
        .matmul(vars.time_w1)?
        .add_row(vars.time_b1)?
        .gelu()?
        .matmul(vars.time_w2)?
        .add_row(vars.time_b2)?
        .reshape(&[cfg.d])?;

    let key0 = cond
        .self_key_mask
        .as_ref()
        .map(|m| mask_to_key_grid(m, p0))
        .transpose()?;
    let key1 = cond
        .self_key_mask
        .as_ref()
        .map(|m| mask_to_key_grid(m, p1))
        .transpose()?;

    // Level 0.
    let h0 = tokens.add(tape.constant(params.pos0.clone()))?.add_row(temb)?;
    let (h0, map0, feat0) =
        attention_block(h0, &vars.blocks[0], cond, &cfg.adapter, key0.as_deref())?;

    // Down to level 1 (2x2 mean pool).
    let pools = pool4_indices(p0);
    let mut down = h0.gather_rows(&pools[0])?;
    for idx in &pools[1..] {
        down = down.add(h0.gather_rows(idx)?)?;
    }
    let down = down.scale(0.25)?;
    let h1 = down.add(tape.constant(params.pos1.clone()))?.add_row(temb)?;
    let (h1, map1, feat1) =
        attention_block(h1, &vars.blocks[1], cond, &cfg.adapter, key1.as_deref())?;

    // Up with skip.
    let up = h1.gather_rows(&upsample_indices(p1, p0))?;
    let merged = up.add(h0)?;

    // Unembed back to pixel space.
    let inv = inverse_permutation(&order);
    let eps = merged
        .matmul(vars.unembed_w)?
        .add_row(vars.unembed_b)?
        .reshape(&[latent * latent, 1])?
        .gather_rows(&inv)?
        .reshape(&[latent, latent])?;

    Ok(ForwardOutput {
        eps,
        text_maps: vec![(map0, p0), (map1, p1)],
        self_feats: vec![(feat0, p0), (feat1, p1)],
    })
}

/// Plain-tensor forward for paths that need no gradients.
pub fn forward_tensors(
    params: &DenoiserParams,
    z_t: &Tensor,
    t: usize,
    text: &Tensor,
    subjects: Option<(&Tensor, &[f64], &Tensor)>,
    grounding: Option<&Tensor>,
) -> Result<(Tensor, crate::layout::AttentionStack<f64>)> {
    let tape = Tape::new();
    let vars = params.vars(&tape, false);
    let cond = CondVars {
        text: tape.constant(text.clone()),
        subjects: subjects.map(|(c_s, km, c_d)| SubjectVars {
            c_s: tape.constant(c_s.clone()),
            key_mask: km.to_vec(),
            c_d: tape.constant(c_d.clone()),
        }),
        grounding: grounding.map(|g| tape.constant(g.clone())),
        self_key_mask: None,
    };
    let out = forward(&tape, params, &vars, tape.constant(z_t.clone()), t, &cond)?;
    let stack = crate::layout::VarStack { layers: out.text_maps, timestep: t }.values()?;
    Ok((out.eps.to_tensor(), stack))
}

/// Frozen refiner pass: runs the masked subject latent at a fixed low-noise
/// timestep with subject-masked self-attention, pools every level's
/// self-attention output onto the coarsest grid and concatenates along the
/// feature axis. The trainable projection is applied by the caller.
pub fn refiner_feature_maps(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    latent: &Tensor,
    class_embedding: &Tensor,
    subject_mask: &Tensor,
) -> Result<(Tensor, Vec<usize>)> {
    let cfg = &params.cfg;
    let t_ref = ((schedule.steps as f64 * cfg.refiner_t_frac).round() as usize)
        .clamp(1, schedule.steps);
    let z_ref = latent.scale(schedule.alpha_bar(t_ref)?.sqrt())?;

    let tape = Tape::new();
    let vars = params.vars(&tape, false);
    let text = class_embedding.reshape(&[1, cfg.d])?;
    let cond = CondVars {
        text: tape.constant(text),
        subjects: None,
        grounding: None,
        self_key_mask: Some(subject_mask.clone()),
    };
    let out = forward(&tape, params, &vars, tape.constant(z_ref), t_ref, &cond)?;

    let (p0, p1) = cfg.levels();
    let feat0 = out.self_feats[0].0.to_tensor();
    let feat1 = out.self_feats[1].0.to_tensor();
    // Pool the fine level onto the coarse grid.
    let pools = pool4_indices(p0);
    let mut pooled = feat0.gather_rows(&pools[0])?;
    for idx in &pools[1..] {
        pooled = pooled.add(&feat0.gather_rows(idx)?)?;
    }
    let pooled = pooled.scale(0.25)?;
    let maps = Tensor::concat_cols(&[&pooled, &feat1])?;
    Ok((maps, vec![p0, p1]))
}
