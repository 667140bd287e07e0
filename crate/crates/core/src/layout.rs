//! Dual layout control: grounding-token construction for training-time
//! conditioning, and the training-free box-constrained cross-attention
//! regulation applied while sampling.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::fourier::{fourier_encode_box, FourierSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Axis-aligned rectangle in normalized [0,1] coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BoundingBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    /// Unvalidated constructor, for encoding degenerate coordinate tuples.
    pub fn unchecked(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(self.x0) && in_unit(self.y0) && in_unit(self.x1) && in_unit(self.y1)) {
            return Err(Error::input(format!("box {self:?} outside [0,1]")));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::input(format!("box {self:?} must have x0<x1 and y0<y1")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

/// One grounding token per subject.
#[derive(Debug, Clone)]
pub struct GroundingTokens<S> {
    pub tokens: Tensor<S>,
}

/// Per-layer text-branch attention maps captured during one denoiser pass.
#[derive(Debug, Clone)]
pub struct AttentionStack<S> {
    pub layers: Vec<StackLayer<S>>,
    pub timestep: usize,
}

#[derive(Debug, Clone)]
pub struct StackLayer<S> {
    /// `[p² × n]` softmax map, rows over spatial cells, columns over tokens.
    pub attn: Tensor<S>,
    pub p: usize,
}

impl<S: Scalar> AttentionStack<S> {
    /// Validates shapes and the row-normalization invariant (1e-9).
    pub fn new(layers: Vec<StackLayer<S>>, timestep: usize) -> Result<Self> {
        for layer in &layers {
            let (rows, _) = layer.attn.dims2()?;
            if rows != layer.p * layer.p {
                return Err(Error::shape(format!(
                    "stack layer p={} expects {} rows, got {rows}",
                    layer.p,
                    layer.p * layer.p
                )));
            }
            let (m, n) = layer.attn.dims2()?;
            for i in 0..m {
                let mut s = S::zero();
                for j in 0..n {
                    s += layer.attn.at2(i, j);
                }
                if (s - S::one()).abs() > S::cast(1e-9) {
                    return Err(Error::input(format!(
                        "stack row {i} sums to {s}, expected 1"
                    )));
                }
            }
        }
        Ok(AttentionStack { layers, timestep })
    }

    /// Skips row-sum validation; for synthetic test stacks only.
    pub fn from_maps_unchecked(layers: Vec<StackLayer<S>>, timestep: usize) -> Self {
        AttentionStack { layers, timestep }
    }
}

/// Tape-resident counterpart of [`AttentionStack`] used while gradients to
/// the latent are still needed.
pub struct VarStack<'t, S> {
    pub layers: Vec<(Var<'t, S>, usize)>,
    pub timestep: usize,
}

impl<'t, S: Scalar> VarStack<'t, S> {
    pub fn values(&self) -> Result<AttentionStack<S>> {
        let layers = self
            .layers
            .iter()
            .map(|(v, p)| StackLayer { attn: v.to_tensor(), p: *p })
            .collect();
        AttentionStack::new(layers, self.timestep)
    }

    /// Re-records a plain stack onto a tape as constants (diagnostics path).
    pub fn from_stack(tape: &'t Tape<S>, stack: &AttentionStack<S>) -> Self {
        let layers = stack
            .layers
            .iter()
            .map(|l| (tape.constant(l.attn.clone()), l.p))
            .collect();
        VarStack { layers, timestep: stack.timestep }
    }
}

/// Binds a prompt token index to its requested box.
#[derive(Debug, Clone, Copy)]
pub struct SubjectAssignment {
    pub token_index: usize,
    pub bbox: BoundingBox,
}

/// Axis-profile operator for the scale loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    #[default]
    Max,
    Sum,
}

/// Divisor of the per-axis scale-loss sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Count of grid columns/rows touched by any corner mask.
    #[default]
    CornerSupport,
    /// Count of grid columns/rows covered by the box mask.
    BoxWidth,
}

/// All inference-time regulation knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Layout-control intensity; 0 disables the latent update entirely.
    pub eta: f64,
    /// Initial step size of the linear decay.
    pub alpha0: f64,
    /// Fraction of sampling steps (from the noisy end) with guidance active.
    pub guided_fraction: f64,
    /// Corner-mask half-width as a fraction of the shorter box side.
    pub corner_ratio: f64,
    /// Denoiser levels (spatial size p) whose maps feed the losses.
    pub loss_layers: Vec<usize>,
    /// Log-sum-exp temperature of the differentiable axis projection.
    pub smooth_temp: f64,
    pub projection: Projection,
    pub normalization: Normalization,
    /// Re-run the denoiser after the latent update before the DDIM step.
    pub recompute_after_update: bool,
    /// Gradient steps per sampling step.
    pub guidance_iterations: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            eta: 10.0,
            alpha0: 1.0,
            guided_fraction: 0.5,
            corner_ratio: 0.25,
            loss_layers: vec![16, 8],
            smooth_temp: 0.01,
            projection: Projection::default(),
            normalization: Normalization::default(),
            recompute_after_update: true,
            guidance_iterations: 1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 0.0 {
            return Err(Error::Config("guidance.eta must be >= 0".into()));
        }
        if self.alpha0 <= 0.0 {
            return Err(Error::Config("guidance.alpha0 must be > 0".into()));
        }
        if !(self.guided_fraction > 0.0 && self.guided_fraction <= 1.0) {
            return Err(Error::Config("guidance.guided_fraction must be in (0,1]".into()));
        }
        if !(self.corner_ratio > 0.0 && self.corner_ratio <= 0.5) {
            return Err(Error::Config("guidance.corner_ratio must be in (0,0.5]".into()));
        }
        if self.loss_layers.is_empty() {
            return Err(Error::Config("guidance.loss_layers must not be empty".into()));
        }
        if self.smooth_temp <= 0.0 {
            return Err(Error::Config("guidance.smooth_temp must be > 0".into()));
        }
        if self.guidance_iterations == 0 {
            return Err(Error::Config("guidance.guidance_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Rasterizes a box onto a `p×p` grid by cell-center membership; boxes too
/// small to cover any center snap to the cell containing the box center.
pub fn box_to_mask<S: Scalar>(bbox: &BoundingBox, p: usize) -> Result<Tensor<S>> {
    if p < 2 {
        return Err(Error::input("box_to_mask: p must be >= 2"));
    }
    let mut data = vec![S::zero(); p * p];
    let mut any = false;
    for i in 0..p {
        let cy = (i as f64 + 0.5) / p as f64;
        for j in 0..p {
            let cx = (j as f64 + 0.5) / p as f64;
            if cx >= bbox.x0 && cx < bbox.x1 && cy >= bbox.y0 && cy < bbox.y1 {
                data[i * p + j] = S::one();
                any = true;
            }
        }
    }
    if !any {
        let (cx, cy) = bbox.center();
        let j = ((cx * p as f64).floor() as usize).min(p - 1);
        let i = ((cy * p as f64).floor() as usize).min(p - 1);
        data[i * p + j] = S::one();
    }
    Ok(Tensor::from_vec_unchecked(vec![p, p], data))
}

/// Four square masks centered at the box vertices, rasterized by cell
/// centers and clipped to the grid. Half-width is `ratio * min(side)`.
pub fn corner_masks<S: Scalar>(
    bbox: &BoundingBox,
    p: usize,
    ratio: f64,
) -> Result<[Tensor<S>; 4]> {
    if !(ratio > 0.0 && ratio <= 0.5) {
        return Err(Error::input("corner_masks: ratio must be in (0,0.5]"));
    }
    if p < 2 {
        return Err(Error::input("corner_masks: p must be >= 2"));
    }
    let w = ratio * bbox.width().min(bbox.height());
    let vertices = [
        (bbox.x0, bbox.y0),
        (bbox.x1, bbox.y0),
        (bbox.x0, bbox.y1),
        (bbox.x1, bbox.y1),
    ];
    let mut out = Vec::with_capacity(4);
    for (vx, vy) in vertices {
        let mut data = vec![S::zero(); p * p];
        let mut any = false;
        for i in 0..p {
            let cy = (i as f64 + 0.5) / p as f64;
            for j in 0..p {
                let cx = (j as f64 + 0.5) / p as f64;
                if (cx - vx).abs() <= w && (cy - vy).abs() <= w {
                    data[i * p + j] = S::one();
                    any = true;
                }
            }
        }
        if !any {
            let j = ((vx * p as f64).floor() as usize).min(p - 1);
            let i = ((vy * p as f64).floor() as usize).min(p - 1);
            data[i * p + j] = S::one();
        }
        out.push(Tensor::from_vec_unchecked(vec![p, p], data));
    }
    Ok([out.remove(0), out.remove(0), out.remove(0), out.remove(0)])
}

/// Hard max projection of a square map onto both axes:
/// `x_profile[j] = max_i map[i][j]`, `y_profile[i] = max_j map[i][j]`.
pub fn axis_project<S: Scalar>(map: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let (m, n) = map.dims2()?;
    if m != n {
        return Err(Error::shape(format!("axis_project: map must be square, got {m}x{n}")));
    }
    let mut x = vec![S::neg_infinity(); n];
    let mut y = vec![S::neg_infinity(); m];
    for i in 0..m {
        for j in 0..n {
            let v = map.at2(i, j);
            x[j] = x[j].max(v);
            y[i] = y[i].max(v);
        }
    }
    Ok((
        Tensor::from_vec_unchecked(vec![n], x),
        Tensor::from_vec_unchecked(vec![m], y),
    ))
}

/// Sum projection (the configurable alternative to max).
pub fn axis_project_sum<S: Scalar>(map: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let (m, n) = map.dims2()?;
    if m != n {
        return Err(Error::shape(format!("axis_project: map must be square, got {m}x{n}")));
    }
    let mut x = vec![S::zero(); n];
    let mut y = vec![S::zero(); m];
    for i in 0..m {
        for j in 0..n {
            let v = map.at2(i, j);
            x[j] += v;
            y[i] += v;
        }
    }
    Ok((
        Tensor::from_vec_unchecked(vec![n], x),
        Tensor::from_vec_unchecked(vec![m], y),
    ))
}

/// Row indices that nearest-neighbor upsample a `p×p` grid (flattened
/// row-major) to `target×target`.
pub(crate) fn upsample_indices(p: usize, target: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(target * target);
    for big_i in 0..target {
        let i = big_i * p / target;
        for big_j in 0..target {
            let j = big_j * p / target;
            idx.push(i * p + j);
        }
    }
    idx
}

/// The layers of `stack` selected by `loss_layers`, with the reference
/// resolution (largest selected p).
fn select_layers<'a, 't, S: Scalar>(
    stack: &'a VarStack<'t, S>,
    loss_layers: &[usize],
) -> Result<(Vec<&'a (Var<'t, S>, usize)>, usize)> {
    let selected: Vec<_> = stack
        .layers
        .iter()
        .filter(|(_, p)| loss_layers.contains(p))
        .collect();
    if selected.is_empty() {
        return Err(Error::input(format!(
            "no stack layer matches loss_layers {loss_layers:?}"
        )));
    }
    let target = selected.iter().map(|(_, p)| *p).max().unwrap();
    Ok((selected, target))
}

/// Averages one token's maps across the configured layers at the reference
/// resolution. Returns a `[target² × 1]` node.
pub(crate) fn aggregate_token_map<'t, S: Scalar>(
    stack: &VarStack<'t, S>,
    token_index: usize,
    loss_layers: &[usize],
) -> Result<(Var<'t, S>, usize)> {
    let (selected, target) = select_layers(stack, loss_layers)?;
    let mut acc: Option<Var<'t, S>> = None;
    for (attn, p) in selected.iter() {
        let n_tokens = attn.with_value(|t| t.dims2().map(|(_, n)| n))?;
        if token_index >= n_tokens {
            return Err(Error::input(format!(
                "token index {token_index} out of prompt length {n_tokens}"
            )));
        }
        let col = attn.narrow(1, token_index, 1)?;
        let col = if *p == target {
            col
        } else {
            col.gather_rows(&upsample_indices(*p, target))?
        };
        acc = Some(match acc {
            Some(a) => a.add(col)?,
            None => col,
        });
    }
    let count = selected.len();
    let avg = acc.unwrap().scale(S::one() / S::cast(count as f64))?;
    Ok((avg, target))
}

/// Position constraint: squared shortfall of each subject token's in-box
/// attention mass ratio, summed over subjects. Differentiable back to the
/// latent through the stack.
pub fn position_loss<'t, S: Scalar>(
    tape: &'t Tape<S>,
    stack: &VarStack<'t, S>,
    assignments: &[SubjectAssignment],
    loss_layers: &[usize],
) -> Result<Var<'t, S>> {
    if assignments.is_empty() {
        return Err(Error::input("position_loss: need at least one subject"));
    }
    let mut total: Option<Var<'t, S>> = None;
    for a in assignments {
        a.bbox.validate()?;
        let (map, target) = aggregate_token_map(stack, a.token_index, loss_layers)?;
        let mask = box_to_mask::<S>(&a.bbox, target)?.reshape(&[target * target, 1])?;
        let mass_total = map.sum_all()?;
        if mass_total.to_tensor().item()? <= S::zero() {
            return Err(Error::DegenerateDistribution(format!(
                "token {} has no attention mass",
                a.token_index
            )));
        }
        let mass_in = map.mul(tape.constant(mask))?.sum_all()?;
        let ratio = mass_in.div(mass_total)?;
        let term = ratio.affine(-S::one(), S::one())?.square()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// One axis of the scale loss from already-projected profiles:
/// `(1/N) Σ_j v(j) · |a(j) − m(j)|` with `N` = active support count.
pub fn scale_axis_term<S: Scalar>(a: &[S], m: &[S], v: &[S]) -> Result<S> {
    if a.len() != m.len() || a.len() != v.len() {
        return Err(Error::shape("scale_axis_term: profile lengths differ"));
    }
    let n_active = v.iter().filter(|&&x| x > S::zero()).count();
    if n_active == 0 {
        return Err(Error::DegenerateCorner("no active columns in profile".into()));
    }
    let mut sum = S::zero();
    for i in 0..a.len() {
        sum += v[i] * (a[i] - m[i]).abs();
    }
    Ok(sum / S::cast(n_active as f64))
}

fn mask_profiles<S: Scalar>(
    mask: &Tensor<S>,
    projection: Projection,
) -> Result<(Tensor<S>, Tensor<S>)> {
    match projection {
        Projection::Max => axis_project(mask),
        Projection::Sum => axis_project_sum(mask),
    }
}

/// Scale constraint (both axes): corner-weighted absolute deviation between
/// the projected attention map and the projected box mask. The attention
/// profile uses the smooth projection so gradients flow; masks project hard.
pub fn scale_loss<'t, S: Scalar>(
    tape: &'t Tape<S>,
    stack: &VarStack<'t, S>,
    assignments: &[SubjectAssignment],
    config: &GuidanceConfig,
) -> Result<Var<'t, S>> {
    if assignments.is_empty() {
        return Err(Error::input("scale_loss: need at least one subject"));
    }
    config.validate()?;
    let temp = S::cast(config.smooth_temp);
    let mut total: Option<Var<'t, S>> = None;
    for a in assignments {
        a.bbox.validate()?;
        let (map_flat, target) = aggregate_token_map(stack, a.token_index, config.loss_layers.as_slice())?;
        let map = map_flat.reshape(&[target, target])?;

        let box_mask = box_to_mask::<S>(&a.bbox, target)?;
        let corners = corner_masks::<S>(&a.bbox, target, config.corner_ratio)?;
        let mut union = corners[0].clone();
        for c in &corners[1..] {
            union = union.map("corner_union", |x| x)?;
            let merged: Vec<S> = union
                .data()
                .iter()
                .zip(c.data())
                .map(|(&u, &w)| u.max(w))
                .collect();
            union = Tensor::from_vec_unchecked(vec![target, target], merged);
        }

        let (m_x, m_y) = mask_profiles(&box_mask, config.projection)?;
        let (v_x, v_y) = mask_profiles(&union, config.projection)?;

        let (a_x, a_y) = match config.projection {
            Projection::Max => (
                map.smooth_max(temp, true)?,
                map.smooth_max(temp, false)?,
            ),
            Projection::Sum => {
                let ones_row = tape.constant(Tensor::full(&[1, target], S::one())?);
                let ones_col = tape.constant(Tensor::full(&[target, 1], S::one())?);
                (
                    ones_row.matmul(map)?.reshape(&[target])?,
                    map.matmul(ones_col)?.reshape(&[target])?,
                )
            }
        };

        for (a_profile, m_profile, v_profile) in [(a_x, m_x, v_x), (a_y, m_y, v_y)] {
            let divisor = match config.normalization {
                Normalization::CornerSupport => {
                    v_profile.data().iter().filter(|&&x| x > S::zero()).count()
                }
                Normalization::BoxWidth => {
                    m_profile.data().iter().filter(|&&x| x > S::zero()).count()
                }
            };
            if divisor == 0 {
                return Err(Error::DegenerateCorner(format!(
                    "token {} has empty corner support",
                    a.token_index
                )));
            }
            // Binarize the weighting profile so sum-projected corner masks
            // still act as a {0,1} support indicator.
            let v_bin = v_profile.map("v_bin", |x| if x > S::zero() { S::one() } else { S::zero() })?;
            let term = a_profile
                .reshape(&[1, a_profile.shape()[0]])?
                .sub(tape.constant(m_profile.reshape(&[1, m_profile.numel()])?))?
                .abs()?
                .mul(tape.constant(v_bin.reshape(&[1, v_bin.numel()])?))?
                .sum_all()?
                .scale(S::one() / S::cast(divisor as f64))?;
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
    }
    Ok(total.unwrap())
}

/// Linearly decaying guidance step size under the descending-t convention:
/// largest at the first (noisiest) step, `alpha0/T` at the last.
pub fn step_size(t: usize, total_steps: usize, alpha0: f64) -> Result<f64> {
    if t >= total_steps {
        return Err(Error::input(format!("step_size: t={t} out of range 0..{total_steps}")));
    }
    Ok(alpha0 * (t + 1) as f64 / total_steps as f64)
}

/// `z_t ← z_t − α_t · η · ∇_{z_t}(loss)`. With `eta == 0` the input is
/// returned bit-identically and no backward pass runs.
pub fn guided_update<'t, S: Scalar>(
    tape: &'t Tape<S>,
    z_var: Var<'t, S>,
    loss: Var<'t, S>,
    alpha_t: f64,
    eta: f64,
) -> Result<Tensor<S>> {
    let z = z_var.to_tensor();
    if eta == 0.0 {
        return Ok(z);
    }
    let mut grads: Gradients<S> = tape.backward(loss).map_err(|e| match e {
        Error::NonFinite(op) => Error::GuidanceDivergence(format!("non-finite gradient in {op}")),
        other => other,
    })?;
    let grad = grads
        .take(z_var)
        .ok_or_else(|| Error::input("guided_update: loss does not depend on the latent"))?;
    let step = S::cast(alpha_t * eta);
    z.sub(&grad.scale(step).map_err(divergence)?).map_err(divergence)
}

fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::GuidanceDivergence(format!("non-finite update in {op}")),
        other => other,
    }
}

/// Inputs to one grounding token: pooled static features, entity embedding,
/// and the subject's box.
pub struct GroundingInput<'t, S> {
    pub pooled_static: Var<'t, S>,
    pub entity_embedding: Var<'t, S>,
    pub bbox: BoundingBox,
}

/// Weights of the two grounding MLPs and the joint output projection.
#[derive(Debug, Clone)]
pub struct GroundingMlpParams<S> {
    pub vis_w1: Tensor<S>,
    pub vis_b1: Tensor<S>,
    pub vis_w2: Tensor<S>,
    pub vis_b2: Tensor<S>,
    pub txt_w1: Tensor<S>,
    pub txt_b1: Tensor<S>,
    pub txt_w2: Tensor<S>,
    pub txt_b2: Tensor<S>,
    pub out_w: Tensor<S>,
    pub out_b: Tensor<S>,
}

/// Tape handles for [`GroundingMlpParams`].
pub struct GroundingMlpVars<'t, S> {
    pub vis_w1: Var<'t, S>,
    pub vis_b1: Var<'t, S>,
    pub vis_w2: Var<'t, S>,
    pub vis_b2: Var<'t, S>,
    pub txt_w1: Var<'t, S>,
    pub txt_b1: Var<'t, S>,
    pub txt_w2: Var<'t, S>,
    pub txt_b2: Var<'t, S>,
    pub out_w: Var<'t, S>,
    pub out_b: Var<'t, S>,
}

impl<S: Scalar> GroundingMlpParams<S> {
    /// `d`: feature dim; `enc`: Fourier encoding dim.
    pub fn init(d: usize, enc: usize, rng: &mut impl rand::Rng) -> Self {
        fn w<S: Scalar>(r: usize, c: usize, rng: &mut impl rand::Rng) -> Tensor<S> {
            let std = (1.0 / r as f64).sqrt();
            Tensor::randn(rng, &[r, c]).scale(S::cast(std)).unwrap()
        }
        GroundingMlpParams {
            vis_w1: w(d + enc, d, rng),
            vis_b1: Tensor::zeros(&[d]),
            vis_w2: w(d, d, rng),
            vis_b2: Tensor::zeros(&[d]),
            txt_w1: w(d + enc, d, rng),
            txt_b1: Tensor::zeros(&[d]),
            txt_w2: w(d, d, rng),
            txt_b2: Tensor::zeros(&[d]),
            out_w: w(2 * d, d, rng),
            out_b: Tensor::zeros(&[d]),
        }
    }

    pub fn vars<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> GroundingMlpVars<'t, S> {
        let reg = |t: &Tensor<S>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        GroundingMlpVars {
            vis_w1: reg(&self.vis_w1),
            vis_b1: reg(&self.vis_b1),
            vis_w2: reg(&self.vis_w2),
            vis_b2: reg(&self.vis_b2),
            txt_w1: reg(&self.txt_w1),
            txt_b1: reg(&self.txt_b1),
            txt_w2: reg(&self.txt_w2),
            txt_b2: reg(&self.txt_b2),
            out_w: reg(&self.out_w),
            out_b: reg(&self.out_b),
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &Tensor<S>)) {
        f("grounding.vis_w1", &self.vis_w1);
        f("grounding.vis_b1", &self.vis_b1);
        f("grounding.vis_w2", &self.vis_w2);
        f("grounding.vis_b2", &self.vis_b2);
        f("grounding.txt_w1", &self.txt_w1);
        f("grounding.txt_b1", &self.txt_b1);
        f("grounding.txt_w2", &self.txt_w2);
        f("grounding.txt_b2", &self.txt_b2);
        f("grounding.out_w", &self.out_w);
        f("grounding.out_b", &self.out_b);
    }
}

fn concat_cols<'t, S: Scalar>(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let cols: Vec<Var<'t, S>> = parts
        .iter()
        .map(|v| v.transpose())
        .collect::<Result<_>>()?;
    Var::concat_rows(&cols)?.transpose()
}

fn mlp2<'t, S: Scalar>(
    x: Var<'t, S>,
    w1: Var<'t, S>,
    b1: Var<'t, S>,
    w2: Var<'t, S>,
    b2: Var<'t, S>,
) -> Result<Var<'t, S>> {
    x.matmul(w1)?.add_row(b1)?.gelu()?.matmul(w2)?.add_row(b2)
}

/// Builds one grounding token per subject: each is the projection of the
/// concatenated visual and textual halves, both conditioned on the
/// Fourier-encoded box.
pub fn build_grounding_tokens_var<'t, S: Scalar>(
    tape: &'t Tape<S>,
    subjects: &[GroundingInput<'t, S>],
    spec: &FourierSpec,
    weights: &GroundingMlpVars<'t, S>,
) -> Result<Var<'t, S>> {
    if subjects.is_empty() {
        return Err(Error::input("build_grounding_tokens: need at least one subject"));
    }
    let mut tokens = Vec::with_capacity(subjects.len());
    for s in subjects {
        s.bbox.validate()?;
        let enc = tape.constant(
            fourier_encode_box::<S>(&s.bbox, spec).reshape(&[1, spec.encoding_dim()])?,
        );
        let vis_in = concat_cols(&[s.pooled_static, enc])?;
        let txt_in = concat_cols(&[s.entity_embedding, enc])?;
        let vis = mlp2(vis_in, weights.vis_w1, weights.vis_b1, weights.vis_w2, weights.vis_b2)?;
        let txt = mlp2(txt_in, weights.txt_w1, weights.txt_b1, weights.txt_w2, weights.txt_b2)?;
        let joint = concat_cols(&[vis, txt])?;
        tokens.push(joint.matmul(weights.out_w)?.add_row(weights.out_b)?);
    }
    Var::concat_rows(&tokens)
}

/// Plain-tensor entry point (inference path; weights act as constants).
pub fn build_grounding_tokens<S: Scalar>(
    subjects: &[(Tensor<S>, Tensor<S>, BoundingBox)],
    spec: &FourierSpec,
    weights: &GroundingMlpParams<S>,
) -> Result<GroundingTokens<S>> {
    let tape = Tape::new();
    let vars = weights.vars(&tape, false);
    let inputs: Vec<GroundingInput<'_, S>> = subjects
        .iter()
        .map(|(cs, ce, bbox)| {
            Ok(GroundingInput {
                pooled_static: tape.constant(cs.reshape(&[1, cs.numel()])?),
                entity_embedding: tape.constant(ce.reshape(&[1, ce.numel()])?),
                bbox: *bbox,
            })
        })
        .collect::<Result<_>>()?;
    let tokens = build_grounding_tokens_var(&tape, &inputs, spec, &vars)?;
    Ok(GroundingTokens { tokens: tokens.to_tensor() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type T = Tensor<f64>;

    fn uniform_stack(p: usize, n: usize) -> AttentionStack<f64> {
        let attn = T::full(&[p * p, n], 1.0 / n as f64).unwrap();
        AttentionStack::new(vec![StackLayer { attn, p }], 0).unwrap()
    }

    #[test]
    fn box_mask_worked_examples() {
        let full = box_to_mask::<f64>(&BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 8).unwrap();
        assert_eq!(full.sum(), 64.0);

        // Cell-center enumeration oracle for the quarter box.
        let b = BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let m = box_to_mask::<f64>(&b, 8).unwrap();
        let mut expect = 0;
        for i in 0..8 {
            for j in 0..8 {
                let (cx, cy) = ((j as f64 + 0.5) / 8.0, (i as f64 + 0.5) / 8.0);
                let inside = cx < 0.5 && cy < 0.5;
                assert_eq!(m.at2(i, j) == 1.0, inside);
                expect += inside as usize;
            }
        }
        assert_eq!(expect, 16);
        assert_eq!(m.sum(), 16.0);

        // Sub-cell box snaps to exactly one cell.
        let tiny = BoundingBox::new(0.49, 0.49, 0.51, 0.51).unwrap();
        let m = box_to_mask::<f64>(&tiny, 4).unwrap();
        assert_eq!(m.sum(), 1.0);
        assert_eq!(m.at2(2, 2), 1.0);
    }

    #[test]
    fn corner_mask_worked_examples() {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let masks = corner_masks::<f64>(&b, 8, 0.25).unwrap();
        // Enumeration oracle: half-width 0.25 catches two cell centers per
        // axis at each image corner.
        for (mask, (vx, vy)) in masks.iter().zip([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]) {
            assert_eq!(mask.sum(), 4.0, "corner at ({vx},{vy})");
            for i in 0..8 {
                for j in 0..8 {
                    let (cx, cy) = ((j as f64 + 0.5) / 8.0, (i as f64 + 0.5) / 8.0);
                    let inside = (cx - vx).abs() <= 0.25 && (cy - vy).abs() <= 0.25;
                    assert_eq!(mask.at2(i, j) == 1.0, inside);
                }
            }
        }

        // Vanishing ratio snaps each mask to the vertex cell.
        let b = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let masks = corner_masks::<f64>(&b, 8, 1e-9).unwrap();
        for mask in &masks {
            assert_eq!(mask.sum(), 1.0);
        }
        assert_eq!(masks[0].at2(2, 2), 1.0);
        assert_eq!(masks[3].at2(6, 6), 1.0);

        // Pairwise disjoint when box sides are at least 4x the half-width.
        let b = BoundingBox::new(0.1, 0.1, 0.9, 0.9).unwrap();
        let masks = corner_masks::<f64>(&b, 16, 0.2).unwrap();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let overlap = masks[i].mul(&masks[j]).unwrap().sum();
                assert_eq!(overlap, 0.0, "masks {i} and {j} overlap");
            }
        }
    }

    #[test]
    fn axis_project_examples() {
        let zero = T::zeros(&[4, 4]);
        let (x, y) = axis_project(&zero).unwrap();
        assert_eq!(x.data(), &[0.0; 4]);
        assert_eq!(y.data(), &[0.0; 4]);

        let mut data = vec![0.0; 64];
        data[2 * 8 + 5] = 1.0;
        let one_hot = T::from_vec(vec![8, 8], data).unwrap();
        let (x, y) = axis_project(&one_hot).unwrap();
        assert_eq!(x.data()[5], 1.0);
        assert_eq!(x.sum(), 1.0);
        assert_eq!(y.data()[2], 1.0);
        assert_eq!(y.sum(), 1.0);

        // Brute-force oracle on a random map.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = T::rand_uniform(&mut rng, &[4, 4], 0.0, 1.0);
        let (x, y) = axis_project(&map).unwrap();
        for j in 0..4 {
            let expect = (0..4).map(|i| map.at2(i, j)).fold(f64::MIN, f64::max);
            assert_eq!(x.data()[j], expect);
        }
        for i in 0..4 {
            let expect = (0..4).map(|j| map.at2(i, j)).fold(f64::MIN, f64::max);
            assert_eq!(y.data()[i], expect);
        }
    }

    #[test]
    fn position_loss_worked_examples() {
        // Uniform 8x8 map, box covering 16 of 64 cells: (1 - 0.25)^2.
        let stack = uniform_stack(8, 2);
        let tape = Tape::new();
        let vstack = VarStack::from_stack(&tape, &stack);
        let assign = [SubjectAssignment {
            token_index: 0,
            bbox: BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
        }];
        let loss = position_loss(&tape, &vstack, &assign, &[8]).unwrap();
        assert!((loss.to_tensor().item().unwrap() - 0.5625).abs() < 1e-12);

        // Two tokens each with half their mass in-box: 2 * 0.25.
        let stack = uniform_stack(4, 2);
        let tape = Tape::new();
        let vstack = VarStack::from_stack(&tape, &stack);
        let assign = [
            SubjectAssignment {
                token_index: 0,
                bbox: BoundingBox::new(0.0, 0.0, 0.5, 1.0).unwrap(),
            },
            SubjectAssignment {
                token_index: 1,
                bbox: BoundingBox::new(0.5, 0.0, 1.0, 1.0).unwrap(),
            },
        ];
        let loss = position_loss(&tape, &vstack, &assign, &[4]).unwrap();
        assert!((loss.to_tensor().item().unwrap() - 0.5).abs() < 1e-12);

        // All mass inside the box -> 0.
        let mut data = vec![0.0; 16 * 1];
        data[0] = 0.3;
        data[1] = 0.7;
        let attn = T::from_vec(vec![16, 1], data).unwrap();
        let stack = AttentionStack::from_maps_unchecked(
            vec![StackLayer { attn, p: 4 }],
            0,
        );
        let tape = Tape::new();
        let vstack = VarStack::from_stack(&tape, &stack);
        let assign = [SubjectAssignment {
            token_index: 0,
            bbox: BoundingBox::new(0.0, 0.0, 0.75, 0.3).unwrap(),
        }];
        let loss = position_loss(&tape, &vstack, &assign, &[4]).unwrap();
        assert_eq!(loss.to_tensor().item().unwrap(), 0.0);
    }

    #[test]
    fn position_loss_scale_invariance() {
        // The in-box ratio cancels any uniform rescaling of a token's mass.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = T::rand_uniform(&mut rng, &[16, 2], 0.01, 1.0);
        let assign = [SubjectAssignment {
            token_index: 1,
            bbox: BoundingBox::new(0.25, 0.25, 1.0, 0.75).unwrap(),
        }];
        let loss_for = |scale: f64| {
            let attn = base.scale(scale).unwrap();
            let stack = AttentionStack::from_maps_unchecked(
                vec![StackLayer { attn, p: 4 }],
                0,
            );
            let tape = Tape::new();
            let vstack = VarStack::from_stack(&tape, &stack);
            position_loss(&tape, &vstack, &assign, &[4])
                .unwrap()
                .to_tensor()
                .item()
                .unwrap()
        };
        let l1 = loss_for(1.0);
        for s in [0.1, 3.0, 17.5] {
            assert!((loss_for(s) - l1).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_axis_term_worked_example() {
        // (1/2) * (|0.5-1| + |1-1|) over the two corner-active columns.
        let a = [0.5f64, 1.0, 0.0, 0.0];
        let m = [1.0f64, 1.0, 0.0, 0.0];
        let v = [1.0f64, 1.0, 0.0, 0.0];
        let term = scale_axis_term(&a, &m, &v).unwrap();
        assert!((term - 0.25).abs() < 1e-12);

        // Zero residual on the support -> 0.
        let term = scale_axis_term(&m, &m, &v).unwrap();
        assert_eq!(term, 0.0);

        // Empty support errors.
        assert!(matches!(
            scale_axis_term(&a, &m, &[0.0; 4]),
            Err(Error::DegenerateCorner(_))
        ));
    }

    #[test]
    fn scale_loss_symmetry() {
        // A transpose-symmetric map with a symmetric box gives L_y == L_x,
        // so the total is exactly twice one axis.
        let p = 8;
        let mut data = vec![-0.5; p * p];
        for i in 2..6 {
            for j in 2..6 {
                data[i * p + j] = if i == j { 0.9 } else { 0.4 };
            }
        }
        let attn = T::from_vec(vec![p * p, 1], data).unwrap();
        let stack = AttentionStack::from_maps_unchecked(vec![StackLayer { attn, p }], 0);
        let bbox = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let assign = [SubjectAssignment { token_index: 0, bbox }];
        let config = GuidanceConfig { loss_layers: vec![p], ..GuidanceConfig::default() };

        let tape = Tape::new();
        let vstack = VarStack::from_stack(&tape, &stack);
        let total = scale_loss(&tape, &vstack, &assign, &config)
            .unwrap()
            .to_tensor()
            .item()
            .unwrap();

        // Independent single-axis evaluation using the shared profile math.
        let map = stack.layers[0].attn.reshape(&[p, p]).unwrap();
        let (m_x, _) = axis_project(&box_to_mask::<f64>(&bbox, p).unwrap()).unwrap();
        let corners = corner_masks::<f64>(&bbox, p, config.corner_ratio).unwrap();
        let mut union = vec![0.0; p * p];
        for c in &corners {
            for (u, &w) in union.iter_mut().zip(c.data()) {
                *u = f64::max(*u, w);
            }
        }
        let union = T::from_vec(vec![p, p], union).unwrap();
        let (v_x, _) = axis_project(&union).unwrap();
        // Smooth profile oracle at the configured temperature.
        let mut a_x = vec![0.0; p];
        for j in 0..p {
            let col: Vec<f64> = (0..p).map(|i| map.at2(i, j)).collect();
            let mx = col.iter().cloned().fold(f64::MIN, f64::max);
            let s: f64 = col.iter().map(|&v| ((v - mx) / config.smooth_temp).exp()).sum();
            a_x[j] = mx + config.smooth_temp * s.ln();
        }
        let lx = scale_axis_term(&a_x, m_x.data(), v_x.data()).unwrap();
        assert!((total - 2.0 * lx).abs() < 1e-12, "total {total} vs 2*{lx}");
    }

    #[test]
    fn step_size_boundaries() {
        assert_eq!(step_size(49, 50, 1.0).unwrap(), 1.0);
        assert!((step_size(0, 50, 1.0).unwrap() - 0.02).abs() < 1e-15);
        assert!((step_size(24, 50, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(step_size(50, 50, 1.0).is_err());
    }

    #[test]
    fn guided_update_eta_zero_and_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = T::randn(&mut rng, &[4, 4]);

        let tape = Tape::new();
        let z = tape.param(z0.clone());
        let loss = z.square().unwrap().sum_all().unwrap().scale(0.5).unwrap();
        let out = guided_update(&tape, z, loss, 0.7, 0.0).unwrap();
        assert_eq!(out.data(), z0.data());

        // Quadratic toy loss: update is z * (1 - alpha * eta).
        let tape = Tape::new();
        let z = tape.param(z0.clone());
        let loss = z.square().unwrap().sum_all().unwrap().scale(0.5).unwrap();
        let out = guided_update(&tape, z, loss, 0.1, 2.0).unwrap();
        let expect = z0.scale(1.0 - 0.1 * 2.0).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grounding_tokens_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 8;
        let spec = FourierSpec::new(2).unwrap();
        let weights = GroundingMlpParams::<f64>::init(d, spec.encoding_dim(), &mut rng);
        let cs = T::randn(&mut rng, &[d]);
        let ce = T::randn(&mut rng, &[d]);
        let b1 = BoundingBox::new(0.1, 0.1, 0.4, 0.5).unwrap();
        let b2 = BoundingBox::new(0.5, 0.5, 0.9, 0.9).unwrap();

        let toks = build_grounding_tokens(
            &[(cs.clone(), ce.clone(), b1), (cs.clone(), ce.clone(), b2)],
            &spec,
            &weights,
        )
        .unwrap();
        assert_eq!(toks.tokens.shape(), &[2, d]);

        // Same subject, different boxes -> distinct tokens.
        let t0 = toks.tokens.narrow(0, 0, 1).unwrap();
        let t1 = toks.tokens.narrow(0, 1, 1).unwrap();
        let dist = t0.sub(&t1).unwrap().data().iter().map(|v| v * v).sum::<f64>();
        assert!(dist > 0.0);

        // Zero weights collapse every token onto the output bias.
        let mut zeroed = weights.clone();
        zeroed.vis_w1 = T::zeros(zeroed.vis_w1.shape());
        zeroed.vis_w2 = T::zeros(zeroed.vis_w2.shape());
        zeroed.txt_w1 = T::zeros(zeroed.txt_w1.shape());
        zeroed.txt_w2 = T::zeros(zeroed.txt_w2.shape());
        zeroed.out_w = T::zeros(zeroed.out_w.shape());
        zeroed.out_b = T::randn(&mut rng, &[d]);
        let toks = build_grounding_tokens(&[(cs, ce, b1)], &spec, &zeroed).unwrap();
        assert_eq!(toks.tokens.narrow(0, 0, 1).unwrap().data(), zeroed.out_b.data());
    }

    #[test]
    fn position_loss_bounds_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let attn = T::rand_uniform(&mut rng, &[64, 3], 1e-6, 1.0);
            let stack =
                AttentionStack::from_maps_unchecked(vec![StackLayer { attn, p: 8 }], 0);
            let assign = [
                SubjectAssignment {
                    token_index: 0,
                    bbox: BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
                },
                SubjectAssignment {
                    token_index: 2,
                    bbox: BoundingBox::new(0.25, 0.5, 0.75, 1.0).unwrap(),
                },
            ];
            let tape = Tape::new();
            let vstack = VarStack::from_stack(&tape, &stack);
            let loss = position_loss(&tape, &vstack, &assign, &[8])
                .unwrap()
                .to_tensor()
                .item()
                .unwrap();
            assert!((0.0..=2.0).contains(&loss));
        }
    }
}
