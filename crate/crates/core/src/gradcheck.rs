//! End-to-end gradient verification: reverse-mode gradient of the combined
//! layout loss through the denoiser, against central finite differences.
//! Shared by the CLI gradcheck command and the acceptance suite.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_gradient, max_rel_error};
use crate::error::Result;
use crate::layout::{
    position_loss, scale_loss, BoundingBox, GuidanceConfig, SubjectAssignment, VarStack,
};
use crate::model::{CondVars, DenoiserParams, SubjectVars};
use crate::{Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub latent: usize,
    pub runtime_seconds: f64,
}

/// Fixed synthetic conditioning for the check (independent of the latent).
struct Fixture {
    z0: Tensor,
    text: Tensor,
    c_s: Tensor,
    key_mask: Vec<f64>,
    c_d: Tensor,
    grounding: Tensor,
    assignments: Vec<SubjectAssignment>,
    t: usize,
    guidance: GuidanceConfig,
}

fn fixture(params: &DenoiserParams, seed: u64) -> Result<Fixture> {
    let cfg = &params.cfg;
    let (p0, p1) = cfg.levels();
    let mut rng = crate::rng::derive_rng(seed, 0x96ad, 0);
    let s = cfg.static_tokens();
    Ok(Fixture {
        z0: Tensor::randn(&mut rng, &[cfg.latent, cfg.latent]),
        text: params.prompt_embedding(&[1, 3, 11])?,
        c_s: Tensor::randn(&mut rng, &[s, cfg.d]).scale(0.3)?,
        key_mask: vec![1.0; s],
        c_d: Tensor::randn(&mut rng, &[cfg.resampler_queries, cfg.d]).scale(0.3)?,
        grounding: Tensor::randn(&mut rng, &[1, cfg.d]).scale(0.3)?,
        assignments: vec![SubjectAssignment {
            token_index: 2,
            bbox: BoundingBox::new(0.1, 0.15, 0.6, 0.7)?,
        }],
        t: 700,
        guidance: GuidanceConfig { loss_layers: vec![p0, p1], ..GuidanceConfig::default() },
    })
}

fn combined_loss(params: &DenoiserParams, fx: &Fixture, z: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let vars = params.vars(&tape, false);
    let cond = CondVars {
        text: tape.constant(fx.text.clone()),
        subjects: Some(SubjectVars {
            c_s: tape.constant(fx.c_s.clone()),
            key_mask: fx.key_mask.clone(),
            c_d: tape.constant(fx.c_d.clone()),
        }),
        grounding: Some(tape.constant(fx.grounding.clone())),
        self_key_mask: None,
    };
    let out = crate::model::forward(&tape, params, &vars, tape.constant(z.clone()), fx.t, &cond)?;
    let vstack = VarStack { layers: out.text_maps, timestep: fx.t };
    let l_pos = position_loss(&tape, &vstack, &fx.assignments, &fx.guidance.loss_layers)?;
    let l_scale = scale_loss(&tape, &vstack, &fx.assignments, &fx.guidance)?;
    l_pos.add(l_scale)?.to_tensor().item()
}

/// Reverse-mode gradient of `L_pos + L_scale` with respect to the latent,
/// compared elementwise against central finite differences (eps 1e-5).
pub fn gradcheck(params: &DenoiserParams, seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let fx = fixture(params, seed)?;

    // Reverse-mode gradient.
    let tape = Tape::new();
    let vars = params.vars(&tape, false);
    let zv = tape.param(fx.z0.clone());
    let cond = CondVars {
        text: tape.constant(fx.text.clone()),
        subjects: Some(SubjectVars {
            c_s: tape.constant(fx.c_s.clone()),
            key_mask: fx.key_mask.clone(),
            c_d: tape.constant(fx.c_d.clone()),
        }),
        grounding: Some(tape.constant(fx.grounding.clone())),
        self_key_mask: None,
    };
    let out = crate::model::forward(&tape, params, &vars, zv, fx.t, &cond)?;
    let vstack = VarStack { layers: out.text_maps, timestep: fx.t };
    let l_pos = position_loss(&tape, &vstack, &fx.assignments, &fx.guidance.loss_layers)?;
    let l_scale = scale_loss(&tape, &vstack, &fx.assignments, &fx.guidance)?;
    let loss = l_pos.add(l_scale)?;
    let grads = tape.backward(loss)?;
    let reverse = grads.wrt(zv).expect("latent gradient");

    // Independent oracle.
    let fd = finite_difference_gradient(|z| combined_loss(params, &fx, z), &fx.z0, 1e-5)?;

    let max_rel = max_rel_error(reverse, &fd);
    Ok(GradcheckReport {
        max_rel_error: max_rel,
        tolerance,
        passed: max_rel < tolerance,
        latent: params.cfg.latent,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn gradient_matches_finite_differences_on_8x8() {
        let params = DenoiserParams::init(ModelConfig::gradcheck(), 5).unwrap();
        let report = gradcheck(&params, 17, 1e-4).unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
        assert!(report.runtime_seconds < 60.0);
    }
}
