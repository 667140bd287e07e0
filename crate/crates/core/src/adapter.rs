//! Three-stage adapter installed in every denoiser attention block:
//! static attention, gated grounding attention, and dynamic decoupled
//! cross-attention. The frozen backbone weights (self- and text-branch
//! projections) live next to the trainable adapter weights so each stage is
//! self-contained.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{key_mask_to_full, scaled_dot_attention_var};
use crate::error::{Error, Result};
use crate::{Tape, Tensor, Var};

/// Fixed per-model attention coefficients.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Static-branch injection strength.
    pub alpha: f64,
    /// Grounding-branch conditioning coefficient.
    pub beta: f64,
    /// Image-branch weight of the decoupled cross-attention.
    pub lambda: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { alpha: 1.0, beta: 1.0, lambda: 1.0 }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(0.0..=4.0).contains(&v) {
                return Err(Error::Config(format!("adapter.{name} must lie in [0,4], got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-block attention weights: the frozen backbone projections plus the
/// trainable adapter projections and its two learnable gates.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    // Frozen backbone.
    pub self_wq: Tensor,
    pub self_wk: Tensor,
    pub self_wv: Tensor,
    pub text_wq: Tensor,
    pub text_wk: Tensor,
    pub text_wv: Tensor,
    // Trainable adapter.
    pub mu: Tensor,
    pub gamma: Tensor,
    pub static_wq: Tensor,
    pub static_wk: Tensor,
    pub static_wv: Tensor,
    pub ground_wq: Tensor,
    pub ground_wk: Tensor,
    pub ground_wv: Tensor,
    pub img_wk: Tensor,
    pub img_wv: Tensor,
}

pub struct AdapterVars<'t> {
    pub self_wq: Var<'t>,
    pub self_wk: Var<'t>,
    pub self_wv: Var<'t>,
    pub text_wq: Var<'t>,
    pub text_wk: Var<'t>,
    pub text_wv: Var<'t>,
    pub mu: Var<'t>,
    pub gamma: Var<'t>,
    pub static_wq: Var<'t>,
    pub static_wk: Var<'t>,
    pub static_wv: Var<'t>,
    pub ground_wq: Var<'t>,
    pub ground_wk: Var<'t>,
    pub ground_wv: Var<'t>,
    pub img_wk: Var<'t>,
    pub img_wv: Var<'t>,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let std = (1.0 / rows as f64).sqrt();
    Tensor::randn(rng, &[rows, cols]).scale(std).unwrap()
}

impl AdapterParams {
    /// Gates start at exactly zero and the static branch zero-initialized,
    /// so a fresh block is an identity wrapper around the backbone (up to
    /// the lambda image branch). Grounding and image-branch projections get
    /// small random values.
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        AdapterParams {
            self_wq: xavier(rng, d, d),
            self_wk: xavier(rng, d, d),
            self_wv: xavier(rng, d, d),
            text_wq: xavier(rng, d, d),
            text_wk: xavier(rng, d, d),
            text_wv: xavier(rng, d, d),
            mu: Tensor::zeros(&[1]),
            gamma: Tensor::zeros(&[1]),
            static_wq: Tensor::zeros(&[d, d]),
            static_wk: Tensor::zeros(&[d, d]),
            static_wv: Tensor::zeros(&[d, d]),
            ground_wq: xavier(rng, d, d),
            ground_wk: xavier(rng, d, d),
            ground_wv: xavier(rng, d, d),
            img_wk: xavier(rng, d, d).scale(0.2).unwrap(),
            img_wv: xavier(rng, d, d).scale(0.2).unwrap(),
        }
    }

    pub fn vars<'t>(&self, tape: &'t Tape, train_adapter: bool) -> AdapterVars<'t> {
        let frozen = |t: &Tensor| tape.constant(t.clone());
        let train = |t: &Tensor| if train_adapter { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        AdapterVars {
            self_wq: frozen(&self.self_wq),
            self_wk: frozen(&self.self_wk),
            self_wv: frozen(&self.self_wv),
            text_wq: frozen(&self.text_wq),
            text_wk: frozen(&self.text_wk),
            text_wv: frozen(&self.text_wv),
            mu: train(&self.mu),
            gamma: train(&self.gamma),
            static_wq: train(&self.static_wq),
            static_wk: train(&self.static_wk),
            static_wv: train(&self.static_wv),
            ground_wq: train(&self.ground_wq),
            ground_wk: train(&self.ground_wk),
            ground_wv: train(&self.ground_wv),
            img_wk: train(&self.img_wk),
            img_wv: train(&self.img_wv),
        }
    }

    /// Visits `(name, tensor, frozen)` for every weight in the block.
    pub fn visit(&self, prefix: &str, mut f: impl FnMut(&str, &Tensor, bool)) {
        let mut emit = |name: &str, t: &Tensor, frozen: bool| f(&format!("{prefix}.{name}"), t, frozen);
        emit("self_wq", &self.self_wq, true);
        emit("self_wk", &self.self_wk, true);
        emit("self_wv", &self.self_wv, true);
        emit("text_wq", &self.text_wq, true);
        emit("text_wk", &self.text_wk, true);
        emit("text_wv", &self.text_wv, true);
        emit("mu", &self.mu, false);
        emit("gamma", &self.gamma, false);
        emit("static_wq", &self.static_wq, false);
        emit("static_wk", &self.static_wk, false);
        emit("static_wv", &self.static_wv, false);
        emit("ground_wq", &self.ground_wq, false);
        emit("ground_wk", &self.ground_wk, false);
        emit("ground_wv", &self.ground_wv, false);
        emit("img_wk", &self.img_wk, false);
        emit("img_wv", &self.img_wv, false);
    }
}

/// Static attention: `z_s = SelfAttn(z) + mu * CrossAttn(z, c_s, M_s) * alpha`.
///
/// `key_mask` is the subject mask resized to the static-feature token grid,
/// one {0,1} entry per key; it restricts the cross branch to subject tokens.
/// `self_key_mask` restricts the self-attention keys the same way (only the
/// static refiner uses it). Returns `(z_s, self_out)`; the latter is what
/// the refiner harvests.
pub fn static_attention_var<'t>(
    z: Var<'t>,
    c_s: Option<Var<'t>>,
    key_mask: Option<&[f64]>,
    vars: &AdapterVars<'t>,
    config: &AdapterConfig,
    self_key_mask: Option<&[f64]>,
) -> Result<(Var<'t>, Var<'t>)> {
    let self_mask = match self_key_mask {
        Some(km) => {
            let queries = z.shape()[0];
            if km.len() != queries {
                return Err(Error::shape(format!(
                    "static attention: self key mask length {} does not match {queries} tokens",
                    km.len()
                )));
            }
            Some(key_mask_to_full(km, queries)?)
        }
        None => None,
    };
    let (self_out, _) = scaled_dot_attention_var(
        z.matmul(vars.self_wq)?,
        z.matmul(vars.self_wk)?,
        z.matmul(vars.self_wv)?,
        self_mask.as_ref(),
    )?;
    let z_s = match c_s {
        Some(c_s) => {
            let queries = z.shape()[0];
            let mask = match key_mask {
                Some(km) => {
                    let keys = c_s.shape()[0];
                    if km.len() != keys {
                        return Err(Error::shape(format!(
                            "static attention: key mask length {} does not match {keys} keys",
                            km.len()
                        )));
                    }
                    Some(key_mask_to_full(km, queries)?)
                }
                None => None,
            };
            let (cross, _) = scaled_dot_attention_var(
                z.matmul(vars.static_wq)?,
                c_s.matmul(vars.static_wk)?,
                c_s.matmul(vars.static_wv)?,
                mask.as_ref(),
            )?;
            self_out.add(cross.scale_by(vars.mu)?.scale(config.alpha)?)?
        }
        None => self_out,
    };
    Ok((z_s, self_out))
}

/// Grounding attention: `z_g = z_s + beta * tanh(gamma) * SelfAttn([z_s, g])`,
/// keeping only the first `p²` output rows so the sequence length never
/// changes. `g = None` (or zero grounding tokens) degrades to gated
/// self-attention over `z_s` alone.
pub fn grounding_attention_var<'t>(
    z_s: Var<'t>,
    g: Option<Var<'t>>,
    vars: &AdapterVars<'t>,
    config: &AdapterConfig,
) -> Result<Var<'t>> {
    let visual_len = z_s.shape()[0];
    let seq = match g {
        Some(g) => Var::concat_rows(&[z_s, g])?,
        None => z_s,
    };
    let (attn_out, _) = scaled_dot_attention_var(
        seq.matmul(vars.ground_wq)?,
        seq.matmul(vars.ground_wk)?,
        seq.matmul(vars.ground_wv)?,
        None,
    )?;
    let visual = attn_out.narrow(0, 0, visual_len)?;
    let gate = vars.gamma.tanh()?;
    z_s.add(visual.scale_by(gate)?.scale(config.beta)?)
}

/// Decoupled cross-attention: `z_new = CrossAttn(z_g, c_t) + lambda *
/// CrossAttn(z_g, c_d)`, sharing the query projection across branches. The
/// text-branch map is returned for the layout losses.
pub fn dynamic_cross_attention_var<'t>(
    z_g: Var<'t>,
    c_t: Var<'t>,
    c_d: Option<Var<'t>>,
    vars: &AdapterVars<'t>,
    config: &AdapterConfig,
) -> Result<(Var<'t>, Var<'t>)> {
    let q = z_g.matmul(vars.text_wq)?;
    let (text_out, text_attn) = scaled_dot_attention_var(
        q,
        c_t.matmul(vars.text_wk)?,
        c_t.matmul(vars.text_wv)?,
        None,
    )?;
    let out = match c_d {
        Some(c_d) => {
            let (img_out, _) = scaled_dot_attention_var(
                q,
                c_d.matmul(vars.img_wk)?,
                c_d.matmul(vars.img_wv)?,
                None,
            )?;
            text_out.add(img_out.scale(config.lambda)?)?
        }
        None => text_out,
    };
    Ok((out, text_attn))
}

/// Plain-tensor static attention.
pub fn static_attention(
    z: &Tensor,
    c_s: Option<&Tensor>,
    key_mask: Option<&[f64]>,
    params: &AdapterParams,
    config: &AdapterConfig,
) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = params.vars(&tape, false);
    let zv = tape.constant(z.clone());
    let cv = c_s.map(|c| tape.constant(c.clone()));
    let (z_s, _) = static_attention_var(zv, cv, key_mask, &vars, config, None)?;
    Ok(z_s.to_tensor())
}

/// Plain-tensor grounding attention.
pub fn grounding_attention(
    z_s: &Tensor,
    g: Option<&Tensor>,
    params: &AdapterParams,
    config: &AdapterConfig,
) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = params.vars(&tape, false);
    let zv = tape.constant(z_s.clone());
    let gv = g.map(|g| tape.constant(g.clone()));
    Ok(grounding_attention_var(zv, gv, &vars, config)?.to_tensor())
}

/// Plain-tensor decoupled cross-attention.
pub fn dynamic_cross_attention(
    z_g: &Tensor,
    c_t: &Tensor,
    c_d: Option<&Tensor>,
    params: &AdapterParams,
    config: &AdapterConfig,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let vars = params.vars(&tape, false);
    let zv = tape.constant(z_g.clone());
    let tv = tape.constant(c_t.clone());
    let dv = c_d.map(|c| tape.constant(c.clone()));
    let (out, attn) = dynamic_cross_attention_var(zv, tv, dv, &vars, config)?;
    Ok((out.to_tensor(), attn.to_tensor()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{scaled_dot_attention, softmax_rows};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(d: usize, seed: u64) -> AdapterParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = AdapterParams::init(d, &mut rng);
        // Randomize the usually-zero pieces so branches are live.
        p.mu = Tensor::scalar(0.7).unwrap();
        p.gamma = Tensor::scalar(1.3).unwrap();
        p.static_wq = Tensor::randn(&mut rng, &[d, d]).scale(0.3).unwrap();
        p.static_wk = Tensor::randn(&mut rng, &[d, d]).scale(0.3).unwrap();
        p.static_wv = Tensor::randn(&mut rng, &[d, d]).scale(0.3).unwrap();
        p
    }

    #[test]
    fn static_attention_reductions_and_oracle() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor::randn(&mut rng, &[4, d]);
        let c_s = Tensor::randn(&mut rng, &[6, d]);
        let km = vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let cfg = AdapterConfig::default();

        // mu = 0 reduces to pure self-attention.
        let mut p = random_params(d, 1);
        p.mu = Tensor::zeros(&[1]);
        let z_s = static_attention(&z, Some(&c_s), Some(&km), &p, &cfg).unwrap();
        let (self_only, _) = scaled_dot_attention(
            &z.matmul(&p.self_wq).unwrap(),
            &z.matmul(&p.self_wk).unwrap(),
            &z.matmul(&p.self_wv).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(z_s.data(), self_only.data());

        // alpha = 0 gives the same reduction.
        let p = random_params(d, 1);
        let cfg0 = AdapterConfig { alpha: 0.0, ..cfg };
        let z_s = static_attention(&z, Some(&c_s), Some(&km), &p, &cfg0).unwrap();
        assert_eq!(z_s.data(), self_only.data());

        // Random case against an independent composition.
        let z_s = static_attention(&z, Some(&c_s), Some(&km), &p, &cfg).unwrap();
        let full_mask = key_mask_to_full(&km, 4).unwrap();
        let (cross, _) = scaled_dot_attention(
            &z.matmul(&p.static_wq).unwrap(),
            &c_s.matmul(&p.static_wk).unwrap(),
            &c_s.matmul(&p.static_wv).unwrap(),
            Some(&full_mask),
        )
        .unwrap();
        let expect = self_only
            .add(&cross.scale(p.mu.item().unwrap() * cfg.alpha).unwrap())
            .unwrap();
        for (a, b) in z_s.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // All-masked key set is degenerate.
        let dead = vec![0.0; 6];
        assert!(matches!(
            static_attention(&z, Some(&c_s), Some(&dead), &p, &cfg),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn grounding_attention_gate_and_lengths() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z_s = Tensor::randn(&mut rng, &[9, d]);
        let cfg = AdapterConfig::default();

        // gamma = 0 is an exact identity.
        let mut p = random_params(d, 2);
        p.gamma = Tensor::zeros(&[1]);
        let g = Tensor::randn(&mut rng, &[3, d]);
        let z_g = grounding_attention(&z_s, Some(&g), &p, &cfg).unwrap();
        assert_eq!(z_g.data(), z_s.data());

        // Output length stays p^2 for any grounding token count.
        let p = random_params(d, 2);
        for count in 0..=8usize {
            let g = (count > 0).then(|| Tensor::randn(&mut rng, &[count, d]));
            let z_g = grounding_attention(&z_s, g.as_ref(), &p, &cfg).unwrap();
            assert_eq!(z_g.shape(), &[9, d]);
        }

        // Feature-dim mismatch errors.
        let bad = Tensor::randn(&mut rng, &[2, d + 1]);
        assert!(grounding_attention(&z_s, Some(&bad), &p, &cfg).is_err());

        // Large gate against the compositional oracle.
        let mut p = random_params(d, 3);
        p.gamma = Tensor::scalar(4.0).unwrap();
        let g = Tensor::randn(&mut rng, &[2, d]);
        let z_g = grounding_attention(&z_s, Some(&g), &p, &cfg).unwrap();
        let seq = Tensor::concat_rows(&[&z_s, &g]).unwrap();
        let (attn_out, _) = scaled_dot_attention(
            &seq.matmul(&p.ground_wq).unwrap(),
            &seq.matmul(&p.ground_wk).unwrap(),
            &seq.matmul(&p.ground_wv).unwrap(),
            None,
        )
        .unwrap();
        let expect = z_s
            .add(
                &attn_out
                    .narrow(0, 0, 9)
                    .unwrap()
                    .scale(cfg.beta * 4.0f64.tanh())
                    .unwrap(),
            )
            .unwrap();
        for (a, b) in z_g.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_cross_attention_reduction_and_sum() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z_g = Tensor::randn(&mut rng, &[4, d]);
        let c_t = Tensor::randn(&mut rng, &[5, d]);
        let c_d = Tensor::randn(&mut rng, &[3, d]);
        let p = random_params(d, 4);

        // lambda = 0 reduces to text-only cross-attention.
        let cfg0 = AdapterConfig { lambda: 0.0, ..AdapterConfig::default() };
        let (out0, attn) = dynamic_cross_attention(&z_g, &c_t, Some(&c_d), &p, &cfg0).unwrap();
        let q = z_g.matmul(&p.text_wq).unwrap();
        let (text_only, _) = scaled_dot_attention(
            &q,
            &c_t.matmul(&p.text_wk).unwrap(),
            &c_t.matmul(&p.text_wv).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(out0.data(), text_only.data());

        // Attention rows are normalized.
        for i in 0..4 {
            let s: f64 = (0..5).map(|j| attn.at2(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        // lambda = 1 equals the sum of two independent attention calls.
        let cfg = AdapterConfig::default();
        let (out, _) = dynamic_cross_attention(&z_g, &c_t, Some(&c_d), &p, &cfg).unwrap();
        let (img_only, _) = scaled_dot_attention(
            &q,
            &c_d.matmul(&p.img_wk).unwrap(),
            &c_d.matmul(&p.img_wv).unwrap(),
            None,
        )
        .unwrap();
        let expect = text_only.add(&img_only).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // The exported map is the text branch softmax.
        let scores = q
            .matmul_nt(&c_t.matmul(&p.text_wk).unwrap())
            .unwrap()
            .scale(1.0 / (d as f64).sqrt())
            .unwrap();
        let expect_attn = softmax_rows(&scores).unwrap();
        for (a, b) in attn.data().iter().zip(expect_attn.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_config_bounds() {
        assert!(AdapterConfig::default().validate().is_ok());
        assert!(AdapterConfig { alpha: 4.5, ..AdapterConfig::default() }.validate().is_err());
        assert!(AdapterConfig { lambda: -0.1, ..AdapterConfig::default() }.validate().is_err());
    }
}
