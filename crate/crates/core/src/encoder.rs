//! Subject feature extraction: a frozen patch featurizer feeding a trainable
//! perceiver resampler (dynamic features c_d), and a shared-weight denoiser
//! pass whose aggregated self-attention maps become static detail features
//! c_s. Augmentation-based frame pairs stand in for video data.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::BoundingBox;
use crate::model::{self, DenoiserParams};
use crate::schedule::NoiseSchedule;
use crate::{Tape, Tensor, Var};

/// One personalization target: subject pixels, its binary mask, the entity
/// token naming it in the prompt, and its layout box.
#[derive(Debug, Clone)]
pub struct SubjectReference {
    pub image: Tensor,
    pub mask: Tensor,
    pub entity_token: usize,
    pub bbox: BoundingBox,
}

impl SubjectReference {
    pub fn new(image: Tensor, mask: Tensor, entity_token: usize, bbox: BoundingBox) -> Result<Self> {
        let s = SubjectReference { image, mask, entity_token, bbox };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ishape = self.image.shape();
        if ishape.len() != 3 {
            return Err(Error::shape(format!("subject image must be CxHxW, got {ishape:?}")));
        }
        let (h, w) = (ishape[1], ishape[2]);
        if self.mask.shape() != [h, w] {
            return Err(Error::shape(format!(
                "mask {:?} does not match image {h}x{w}",
                self.mask.shape()
            )));
        }
        if self.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::input("subject image values must lie in [0,1]"));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::input("subject mask must be binary"));
        }
        if self.mask.data().iter().all(|&v| v == 0.0) {
            return Err(Error::input("subject mask needs at least one foreground pixel"));
        }
        self.bbox.validate()
    }

    /// Image with background pixels zeroed.
    pub fn masked_image(&self) -> Result<Tensor> {
        apply_mask(&self.image, &self.mask)
    }
}

/// Zeroes image pixels outside the mask, channelwise.
pub fn apply_mask(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let shape = image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if mask.shape() != [h, w] {
        return Err(Error::shape("apply_mask: mask does not match image"));
    }
    let mut data = image.data().to_vec();
    for ch in 0..c {
        for i in 0..h * w {
            data[ch * h * w + i] *= mask.data()[i];
        }
    }
    Tensor::from_vec(shape, data)
}

/// Tight normalized bounding box of a mask's foreground.
pub fn mask_extent_box(mask: &Tensor) -> Result<BoundingBox> {
    let (h, w) = mask.dims2()?;
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (w, h, 0usize, 0usize);
    let mut any = false;
    for i in 0..h {
        for j in 0..w {
            if mask.at2(i, j) == 1.0 {
                any = true;
                min_x = min_x.min(j);
                min_y = min_y.min(i);
                max_x = max_x.max(j);
                max_y = max_y.max(i);
            }
        }
    }
    if !any {
        return Err(Error::input("mask_extent_box: empty mask"));
    }
    BoundingBox::new(
        min_x as f64 / w as f64,
        min_y as f64 / h as f64,
        (max_x + 1) as f64 / w as f64,
        (max_y + 1) as f64 / h as f64,
    )
}

/// Masked patch tokens plus one leading mean-pooled global token.
///
/// Stands in for a frozen image encoder: background pixels are zeroed by the
/// mask, each `patch_size²` block flattens channel-major into one token, and
/// token 0 is the mean of all patch tokens.
pub fn patchify(image: &Tensor, mask: &Tensor, patch_size: usize) -> Result<Tensor> {
    let shape = image.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("patchify: image must be CxHxW"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::shape(format!(
            "patchify: patch {patch_size} must divide {h}x{w}"
        )));
    }
    let masked = apply_mask(image, mask)?;
    let (ph, pw) = (h / patch_size, w / patch_size);
    let d = c * patch_size * patch_size;
    let n = ph * pw;
    let mut tokens = vec![0.0; (n + 1) * d];
    for pi in 0..ph {
        for pj in 0..pw {
            let row = 1 + pi * pw + pj;
            let mut k = 0;
            for ch in 0..c {
                for a in 0..patch_size {
                    for b in 0..patch_size {
                        let y = pi * patch_size + a;
                        let x = pj * patch_size + b;
                        tokens[row * d + k] = masked.data()[ch * h * w + y * w + x];
                        k += 1;
                    }
                }
            }
        }
    }
    for j in 0..d {
        let mut acc = 0.0;
        for row in 1..=n {
            acc += tokens[row * d + j];
        }
        tokens[j] = acc / n as f64;
    }
    Tensor::from_vec(vec![n + 1, d], tokens)
}

/// Perceiver resampler: a fixed set of learnable queries cross-attends over
/// the (variable-length) view tokens through four blocks, emitting exactly
/// `N` feature vectors.
#[derive(Debug, Clone)]
pub struct ResamplerParams {
    pub queries: Tensor,
    pub w_in: Tensor,
    pub blocks: Vec<PerceiverBlock>,
    pub w_out: Tensor,
    pub b_out: Tensor,
    /// Add sinusoidal index positions to the input tokens. On by default so
    /// token order is information rather than noise.
    pub use_positions: bool,
}

#[derive(Debug, Clone)]
pub struct PerceiverBlock {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

pub struct ResamplerVars<'t> {
    pub queries: Var<'t>,
    pub w_in: Var<'t>,
    pub blocks: Vec<PerceiverBlockVars<'t>>,
    pub w_out: Var<'t>,
    pub b_out: Var<'t>,
}

pub struct PerceiverBlockVars<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub ffn_w1: Var<'t>,
    pub ffn_b1: Var<'t>,
    pub ffn_w2: Var<'t>,
    pub ffn_b2: Var<'t>,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let std = (1.0 / rows as f64).sqrt();
    Tensor::randn(rng, &[rows, cols]).scale(std).unwrap()
}

impl ResamplerParams {
    /// `num_queries`: N; `d_in`: view token width; `d`: model width.
    pub fn init(num_queries: usize, d_in: usize, d: usize, num_blocks: usize, rng: &mut impl Rng) -> Self {
        ResamplerParams {
            queries: Tensor::randn(rng, &[num_queries, d]).scale(0.5).unwrap(),
            w_in: xavier(rng, d_in, d),
            blocks: (0..num_blocks)
                .map(|_| PerceiverBlock {
                    wq: xavier(rng, d, d),
                    wk: xavier(rng, d, d),
                    wv: xavier(rng, d, d),
                    ffn_w1: xavier(rng, d, 2 * d),
                    ffn_b1: Tensor::zeros(&[2 * d]),
                    ffn_w2: xavier(rng, 2 * d, d),
                    ffn_b2: Tensor::zeros(&[d]),
                })
                .collect(),
            w_out: xavier(rng, d, d),
            b_out: Tensor::zeros(&[d]),
            use_positions: true,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn vars<'t>(&self, tape: &'t Tape, trainable: bool) -> ResamplerVars<'t> {
        let reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        ResamplerVars {
            queries: reg(&self.queries),
            w_in: reg(&self.w_in),
            blocks: self
                .blocks
                .iter()
                .map(|b| PerceiverBlockVars {
                    wq: reg(&b.wq),
                    wk: reg(&b.wk),
                    wv: reg(&b.wv),
                    ffn_w1: reg(&b.ffn_w1),
                    ffn_b1: reg(&b.ffn_b1),
                    ffn_w2: reg(&b.ffn_w2),
                    ffn_b2: reg(&b.ffn_b2),
                })
                .collect(),
            w_out: reg(&self.w_out),
            b_out: reg(&self.b_out),
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("resampler.queries", &self.queries);
        f("resampler.w_in", &self.w_in);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("resampler.block{i}.wq"), &b.wq);
            f(&format!("resampler.block{i}.wk"), &b.wk);
            f(&format!("resampler.block{i}.wv"), &b.wv);
            f(&format!("resampler.block{i}.ffn_w1"), &b.ffn_w1);
            f(&format!("resampler.block{i}.ffn_b1"), &b.ffn_b1);
            f(&format!("resampler.block{i}.ffn_w2"), &b.ffn_w2);
            f(&format!("resampler.block{i}.ffn_b2"), &b.ffn_b2);
        }
        f("resampler.w_out", &self.w_out);
        f("resampler.b_out", &self.b_out);
    }
}

/// Sinusoidal index encoding shared with the denoiser's token positions.
pub(crate) fn sinusoid_row(index: usize, d: usize, scale: f64) -> Vec<f64> {
    let mut row = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = 1.0 / scale.powf(2.0 * i as f64 / d as f64);
        let angle = index as f64 * freq;
        row[2 * i] = angle.sin();
        row[2 * i + 1] = angle.cos();
    }
    row
}

/// Distills the concatenated view tokens into exactly N dynamic feature
/// vectors (tape path, so the resampler can be trained end to end).
pub fn encode_dynamic_var<'t>(
    tape: &'t Tape,
    views: &[Tensor],
    params: &ResamplerParams,
    vars: &ResamplerVars<'t>,
) -> Result<Var<'t>> {
    if views.is_empty() {
        return Err(Error::input("encode_dynamic: need at least one view"));
    }
    let d_in = params.w_in.shape()[0];
    for v in views {
        let (_, dv) = v.dims2()?;
        if dv != d_in {
            return Err(Error::shape(format!(
                "encode_dynamic: view token dim {dv} does not match resampler input {d_in}"
            )));
        }
    }
    let refs: Vec<&Tensor> = views.iter().collect();
    let stacked = Tensor::concat_rows(&refs)?;
    let mut x = tape.constant(stacked).matmul(vars.w_in)?;
    if params.use_positions {
        let (tokens, d) = (x.shape()[0], x.shape()[1]);
        let mut pos = Vec::with_capacity(tokens * d);
        for i in 0..tokens {
            pos.extend(sinusoid_row(i, d, 10_000.0));
        }
        x = x.add(tape.constant(Tensor::from_vec(vec![tokens, d], pos)?))?;
    }
    let mut q = vars.queries;
    for block in &vars.blocks {
        let (attn_out, _) = crate::attention::scaled_dot_attention_var(
            q.matmul(block.wq)?,
            x.matmul(block.wk)?,
            x.matmul(block.wv)?,
            None,
        )?;
        q = q.add(attn_out)?;
        let ff = q.matmul(block.ffn_w1)?.add_row(block.ffn_b1)?.gelu()?.matmul(block.ffn_w2)?.add_row(block.ffn_b2)?;
        q = q.add(ff)?;
    }
    q.matmul(vars.w_out)?.add_row(vars.b_out)
}

/// Plain-tensor entry point for inference.
pub fn encode_dynamic(views: &[Tensor], params: &ResamplerParams) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = params.vars(&tape, false);
    Ok(encode_dynamic_var(&tape, views, params, &vars)?.to_tensor())
}

/// Static detail features distilled from the shared-weight denoiser.
#[derive(Debug, Clone)]
pub struct StaticDetailFeatures {
    pub tokens: Tensor,
    pub source_levels: Vec<usize>,
}

/// Runs the masked subject through the frozen denoiser at a fixed low-noise
/// timestep and returns the aggregated self-attention feature maps, before
/// the trainable projection. Deterministic, so training caches it.
pub fn refiner_features(
    subject: &SubjectReference,
    class_embedding: &Tensor,
    denoiser: &DenoiserParams,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, Vec<usize>)> {
    subject.validate()?;
    let latent = crate::data::image_to_latent(&subject.masked_image()?)?;
    model::refiner_feature_maps(denoiser, schedule, &latent, class_embedding, &subject.mask)
}

/// Full static-detail path: frozen feature maps + trainable projection.
pub fn refine_static(
    subject: &SubjectReference,
    class_embedding: &Tensor,
    denoiser: &DenoiserParams,
    schedule: &NoiseSchedule,
) -> Result<StaticDetailFeatures> {
    let (maps, levels) = refiner_features(subject, class_embedding, denoiser, schedule)?;
    let tokens = maps.matmul(&denoiser.refiner_w)?.add_row(&denoiser.refiner_b)?;
    Ok(StaticDetailFeatures { tokens, source_levels: levels })
}

/// Tape-path projection over cached refiner maps (the trainable half of
/// [`refine_static`]).
pub fn project_static_var<'t>(
    tape: &'t Tape,
    maps: &Tensor,
    refiner_w: Var<'t>,
    refiner_b: Var<'t>,
) -> Result<Var<'t>> {
    tape.constant(maps.clone()).matmul(refiner_w)?.add_row(refiner_b)
}

/// Deterministic augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub brightness: f64,
    pub hue: f64,
    pub flip: bool,
    pub quarter_turns: u8,
    pub dx: i64,
    pub dy: i64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation { brightness: 1.0, hue: 0.0, flip: false, quarter_turns: 0, dx: 0, dy: 0 }
    }

    /// Color jitter ±20%, flip, right-angle rotation, translation within
    /// ±10% of the side.
    pub fn sample(rng: &mut impl Rng, side: usize) -> Self {
        let max_shift = (side as f64 * 0.1).floor() as i64;
        Augmentation {
            brightness: rng.gen_range(0.8..1.2),
            hue: rng.gen_range(-0.2..0.2),
            flip: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4u8),
            dx: rng.gen_range(-max_shift..=max_shift),
            dy: rng.gen_range(-max_shift..=max_shift),
        }
    }

    /// Pose-emphasizing draw for frame-pair supplements: full geometric
    /// range, color jitter narrowed to ±5%.
    pub fn sample_pose(rng: &mut impl Rng, side: usize) -> Self {
        let max_shift = (side as f64 * 0.1).floor() as i64;
        Augmentation {
            brightness: rng.gen_range(0.95..1.05),
            hue: rng.gen_range(-0.05..0.05),
            flip: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4u8),
            dx: rng.gen_range(-max_shift..=max_shift),
            dy: rng.gen_range(-max_shift..=max_shift),
        }
    }

    /// Applies color to the image and geometry to image and mask in
    /// lockstep. Translation is clamped so no foreground pixel is lost.
    pub fn apply(&self, image: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let shape = image.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("augment: image must be CxHxW"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if h != w {
            return Err(Error::shape("augment: square images only"));
        }
        if mask.shape() != [h, w] {
            return Err(Error::shape("augment: mask does not match image"));
        }

        // Color.
        let mut img = image.data().to_vec();
        if self.hue != 0.0 && c == 3 {
            let t = self.hue.abs().min(1.0);
            let plane = h * w;
            for i in 0..plane {
                let (r, g, b) = (img[i], img[plane + i], img[2 * plane + i]);
                let (nr, ng, nb) = if self.hue >= 0.0 {
                    ((1.0 - t) * r + t * g, (1.0 - t) * g + t * b, (1.0 - t) * b + t * r)
                } else {
                    ((1.0 - t) * r + t * b, (1.0 - t) * g + t * r, (1.0 - t) * b + t * g)
                };
                img[i] = nr;
                img[plane + i] = ng;
                img[2 * plane + i] = nb;
            }
        }
        for v in img.iter_mut() {
            *v = (*v * self.brightness).clamp(0.0, 1.0);
        }

        // Geometry: flip then rotate then translate, identically on both.
        let plane = h * w;
        let geom = |src_of: &dyn Fn(usize, usize) -> (usize, usize),
                    data: &[f64],
                    channels: usize| {
            let mut out = vec![0.0; channels * plane];
            for ch in 0..channels {
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = src_of(y, x);
                        out[ch * plane + y * w + x] = data[ch * plane + sy * w + sx];
                    }
                }
            }
            out
        };

        let flip = self.flip;
        let turns = self.quarter_turns % 4;
        let flip_rot = move |y: usize, x: usize| -> (usize, usize) {
            // Inverse map: output (y,x) <- rotate^-1 then flip^-1.
            let (sy, mut sx) = match turns {
                0 => (y, x),
                1 => (x, w - 1 - y),         // 90 deg CCW output <- source
                2 => (h - 1 - y, w - 1 - x), // 180
                _ => (h - 1 - x, y),         // 270
            };
            if flip {
                sx = w - 1 - sx;
            }
            (sy, sx)
        };
        let img = geom(&flip_rot, &img, c);
        let msk = geom(&flip_rot, mask.data(), 1);

        // Clamp the shift so the transformed mask stays fully inside.
        let tmp_mask = Tensor::from_vec(vec![h, w], msk.clone())?;
        let ext = mask_extent_px(&tmp_mask)?;
        let dx = self.dx.clamp(-(ext.0 as i64), (w - 1 - ext.2) as i64);
        let dy = self.dy.clamp(-(ext.1 as i64), (h - 1 - ext.3) as i64);
        let translate = move |y: usize, x: usize| -> Option<(usize, usize)> {
            let sy = y as i64 - dy;
            let sx = x as i64 - dx;
            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                None
            } else {
                Some((sy as usize, sx as usize))
            }
        };
        let mut out_img = vec![0.0; c * plane];
        let mut out_msk = vec![0.0; plane];
        for y in 0..h {
            for x in 0..w {
                if let Some((sy, sx)) = translate(y, x) {
                    for ch in 0..c {
                        out_img[ch * plane + y * w + x] = img[ch * plane + sy * w + sx];
                    }
                    out_msk[y * w + x] = msk[sy * w + sx];
                }
            }
        }
        Ok((
            Tensor::from_vec(vec![c, h, w], out_img)?,
            Tensor::from_vec(vec![h, w], out_msk)?,
        ))
    }
}

fn mask_extent_px(mask: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (h, w) = mask.dims2()?;
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (w, h, 0usize, 0usize);
    let mut any = false;
    for i in 0..h {
        for j in 0..w {
            if mask.at2(i, j) == 1.0 {
                any = true;
                min_x = min_x.min(j);
                min_y = min_y.min(i);
                max_x = max_x.max(j);
                max_y = max_y.max(i);
            }
        }
    }
    if !any {
        return Err(Error::input("augment: mask became empty"));
    }
    Ok((min_x, min_y, max_x, max_y))
}

/// Seeded augmentation of an image/mask pair.
pub fn augment(image: &Tensor, mask: &Tensor, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = image.shape()[1];
    Augmentation::sample(&mut rng, side).apply(image, mask)
}

/// Simulates a second video frame of the same subject: the reference stays
/// untouched, the supplement gets a pose-like transform and a recomputed
/// tight box.
pub fn make_frame_pair(subject: &SubjectReference, seed: u64) -> Result<(SubjectReference, SubjectReference)> {
    subject.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = subject.image.shape()[1];
    let aug = Augmentation::sample_pose(&mut rng, side);
    let (image, mask) = aug.apply(&subject.image, &subject.mask)?;
    let bbox = mask_extent_box(&mask)?;
    let supplement = SubjectReference::new(image, mask, subject.entity_token, bbox)?;
    Ok((subject.clone(), supplement))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_subject() -> SubjectReference {
        // 8x8 RGB square subject in the top-left quadrant.
        let (c, h, w) = (3, 8, 8);
        let mut img = vec![0.0; c * h * w];
        let mut msk = vec![0.0; h * w];
        for y in 1..4 {
            for x in 1..4 {
                msk[y * w + x] = 1.0;
                img[y * w + x] = 0.9; // r
                img[h * w + y * w + x] = 0.2; // g
                img[2 * h * w + y * w + x] = 0.1; // b
            }
        }
        SubjectReference::new(
            Tensor::from_vec(vec![c, h, w], img).unwrap(),
            Tensor::from_vec(vec![h, w], msk).unwrap(),
            2,
            BoundingBox::new(1.0 / 8.0, 1.0 / 8.0, 4.0 / 8.0, 4.0 / 8.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn patchify_token_count_and_mean() {
        let s = toy_subject();
        let tokens = patchify(&s.image, &s.mask, 4).unwrap();
        assert_eq!(tokens.shape(), &[5, 48]); // (8/4)^2 + 1 tokens, 3*16 wide

        // Constant image under a full mask: global token mean equals v.
        let v = 0.625;
        let img = Tensor::full(&[3, 8, 8], v).unwrap();
        let full = Tensor::full(&[8, 8], 1.0).unwrap();
        let tokens = patchify(&img, &full, 4).unwrap();
        let global = tokens.narrow(0, 0, 1).unwrap();
        assert!((global.mean() - v).abs() < 1e-12);
        for &t in tokens.data() {
            assert!((t - v).abs() < 1e-12);
        }

        assert!(patchify(&s.image, &s.mask, 3).is_err());
    }

    #[test]
    fn resampler_fixed_output_arity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d_in = 48;
        let params = ResamplerParams::init(16, d_in, 32, 4, &mut rng);
        let v65 = Tensor::randn(&mut rng, &[65, d_in]).scale(0.1).unwrap();
        let v130 = Tensor::randn(&mut rng, &[130, d_in]).scale(0.1).unwrap();
        let a = encode_dynamic(&[v65.clone()], &params).unwrap();
        let b = encode_dynamic(&[v65, v130], &params).unwrap();
        assert_eq!(a.shape(), &[16, 32]);
        assert_eq!(b.shape(), &[16, 32]);
        assert!(encode_dynamic(&[], &params).is_err());
    }

    #[test]
    fn resampler_zero_value_weights_ignore_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ResamplerParams::init(8, 12, 16, 4, &mut rng);
        for b in params.blocks.iter_mut() {
            b.wv = Tensor::zeros(b.wv.shape());
        }
        let va = Tensor::randn(&mut rng, &[10, 12]);
        let vb = Tensor::randn(&mut rng, &[25, 12]);
        let a = encode_dynamic(&[va], &params).unwrap();
        let b = encode_dynamic(&[vb], &params).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn resampler_order_sensitivity_snapshot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ResamplerParams::init(4, 6, 8, 4, &mut rng);
        let view = Tensor::randn(&mut rng, &[5, 6]);
        let permuted = view.gather_rows(&[4, 3, 2, 1, 0]).unwrap();
        let a = encode_dynamic(&[view], &params).unwrap();
        let b = encode_dynamic(&[permuted], &params).unwrap();
        let dist: f64 = a.sub(&b).unwrap().data().iter().map(|v| v * v).sum();
        assert!(dist > 1e-9, "positions should make order matter");
    }

    #[test]
    fn augment_determinism_and_identity() {
        let s = toy_subject();
        let (a_img, a_msk) = augment(&s.image, &s.mask, 99).unwrap();
        let (b_img, b_msk) = augment(&s.image, &s.mask, 99).unwrap();
        assert_eq!(a_img.data(), b_img.data());
        assert_eq!(a_msk.data(), b_msk.data());

        let (i, m) = Augmentation::identity().apply(&s.image, &s.mask).unwrap();
        assert_eq!(i.data(), s.image.data());
        assert_eq!(m.data(), s.mask.data());
    }

    #[test]
    fn rotation_preserves_mask_area() {
        let s = toy_subject();
        let aug = Augmentation { quarter_turns: 1, ..Augmentation::identity() };
        let (_, m) = aug.apply(&s.image, &s.mask).unwrap();
        assert_eq!(m.sum(), s.mask.sum());
        // The toy mask is asymmetric in position; rotation must move it.
        assert_ne!(m.data(), s.mask.data());

        let aug = Augmentation { flip: true, ..Augmentation::identity() };
        let (_, m) = aug.apply(&s.image, &s.mask).unwrap();
        assert_eq!(m.sum(), s.mask.sum());
    }

    #[test]
    fn frame_pair_contract() {
        let s = toy_subject();
        let (reference, supplement) = make_frame_pair(&s, 7).unwrap();
        assert_eq!(reference.image.data(), s.image.data());
        assert_eq!(supplement.entity_token, s.entity_token);
        // Tight box of the transformed mask.
        let expect = mask_extent_box(&supplement.mask).unwrap();
        assert_eq!(supplement.bbox, expect);
        // Reproducible.
        let (_, supplement2) = make_frame_pair(&s, 7).unwrap();
        assert_eq!(supplement.image.data(), supplement2.image.data());
    }

    #[test]
    fn mask_extent_box_oracle() {
        let s = toy_subject();
        let b = mask_extent_box(&s.mask).unwrap();
        assert_eq!(b, BoundingBox::new(0.125, 0.125, 0.5, 0.5).unwrap());
    }
}
