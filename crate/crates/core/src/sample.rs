//! Guided sampling: deterministic DDIM with classifier-free text guidance
//! and, when boxes are given, box-constrained cross-attention regulation
//! during the first part of the trajectory (guidance-then-denoise ordering
//! with a recomputed forward pass after each latent update).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{render_subject, ShapeKind, ShapeSpec, Texture, PALETTE};
use crate::encoder::{encode_dynamic, mask_extent_box, patchify, refine_static, SubjectReference};
use crate::error::{Error, Result};
use crate::layout::{
    guided_update, position_loss, scale_loss, step_size, BoundingBox, GuidanceConfig,
    SubjectAssignment, VarStack,
};
use crate::model::{mask_to_key_grid, CondVars, DenoiserParams, SubjectVars};
use crate::schedule::{ddim_step, ddim_timesteps, NoiseSchedule};
use crate::{Tape, Tensor};

/// Inference-time sampler knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    /// DDIM transition count.
    pub steps: usize,
    /// Classifier-free guidance scale on the text branch (1 = off).
    pub cfg_scale: f64,
    pub guidance: GuidanceConfig,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings { steps: 50, cfg_scale: 7.5, guidance: GuidanceConfig::default() }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sample.steps must be positive".into()));
        }
        if self.cfg_scale <= 0.0 {
            return Err(Error::Config("sample.cfg_scale must be positive".into()));
        }
        self.guidance.validate()
    }
}

/// One requested subject: the entity word in the prompt plus enough
/// rendering detail to build its reference image. `box` omitted on every
/// subject selects box-free mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRequest {
    pub entity: String,
    pub color: String,
    #[serde(default = "default_size")]
    pub size: f64,
    #[serde(default = "default_texture")]
    pub texture: Texture,
    #[serde(rename = "box")]
    pub bbox: Option<[f64; 4]>,
}

fn default_size() -> f64 {
    0.3
}

fn default_texture() -> Texture {
    Texture::Solid
}

/// One sampling request (the JSON record of a request file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRequest {
    pub prompt: String,
    pub subjects: Vec<SubjectRequest>,
    pub seed: u64,
}

/// Request resolved against the vocabulary and rendered into references.
pub struct ResolvedRequest {
    pub prompt_ids: Vec<usize>,
    pub subjects: Vec<SubjectReference>,
    /// One per subject when boxes were provided.
    pub assignments: Option<Vec<SubjectAssignment>>,
    pub seed: u64,
}

impl SampleRequest {
    pub fn resolve(&self, params: &DenoiserParams) -> Result<ResolvedRequest> {
        let (prompt_ids, spans) = crate::data::tokenize_prompt(&self.prompt)?;
        if spans.len() != self.subjects.len() {
            return Err(Error::Input(format!(
                "prompt has {} entity words but request lists {} subjects",
                spans.len(),
                self.subjects.len()
            )));
        }
        let with_box = self.subjects.iter().filter(|s| s.bbox.is_some()).count();
        if with_box != 0 && with_box != self.subjects.len() {
            return Err(Error::Config(
                "subject boxes must be given for all subjects or none".into(),
            ));
        }
        let mut subjects = Vec::with_capacity(self.subjects.len());
        let mut assignments = Vec::new();
        for (req, &span) in self.subjects.iter().zip(&spans) {
            let word = crate::data::id_word(prompt_ids[span])?;
            if word != req.entity {
                return Err(Error::Input(format!(
                    "subject entity {:?} does not match prompt entity {word:?}",
                    req.entity
                )));
            }
            let kind = ShapeKind::ALL
                .into_iter()
                .find(|k| k.name() == req.entity)
                .ok_or_else(|| Error::Input(format!("{:?} is not a shape entity", req.entity)))?;
            let color = PALETTE
                .iter()
                .position(|(name, _)| *name == req.color)
                .ok_or_else(|| Error::Input(format!("unknown color {:?}", req.color)))?;
            let spec = ShapeSpec { kind, color, size: req.size, texture: req.texture };
            let (image, mask) = render_subject(&spec, params.cfg.latent)?;
            let bbox = match req.bbox {
                Some([x0, y0, x1, y1]) => {
                    let b = BoundingBox::new(x0, y0, x1, y1)?;
                    assignments.push(SubjectAssignment { token_index: span, bbox: b });
                    b
                }
                None => mask_extent_box(&mask)?,
            };
            subjects.push(SubjectReference::new(image, mask, prompt_ids[span], bbox)?);
        }
        Ok(ResolvedRequest {
            prompt_ids,
            subjects,
            assignments: (with_box > 0).then_some(assignments),
            seed: self.seed,
        })
    }
}

/// Per-request conditioning, computed once (it does not depend on the
/// latent).
pub struct InferenceCond {
    pub text: Tensor,
    pub uncond_text: Tensor,
    pub subjects: Option<(Tensor, Vec<f64>, Tensor)>,
    pub grounding: Option<Tensor>,
}

pub fn inference_conditioning(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    resolved: &ResolvedRequest,
) -> Result<InferenceCond> {
    let cfg = &params.cfg;
    let (_, p1) = cfg.levels();
    let text = params.prompt_embedding(&resolved.prompt_ids)?;
    let uncond_text = params.prompt_embedding(&[0])?;

    if resolved.subjects.is_empty() {
        return Ok(InferenceCond { text, uncond_text, subjects: None, grounding: None });
    }

    let mut cs_parts = Vec::new();
    let mut cd_parts = Vec::new();
    let mut key_mask = Vec::new();
    let mut ground_inputs = Vec::new();
    for subject in &resolved.subjects {
        let entity_embedding = params.entity_embedding(subject.entity_token)?;
        let static_features = refine_static(subject, &entity_embedding, params, schedule)?;
        let views = vec![patchify(&subject.image, &subject.mask, cfg.subject_patch)?];
        let c_d = encode_dynamic(&views, &params.resampler)?;
        key_mask.extend(mask_to_key_grid(&subject.mask, p1)?);
        let pooled = mean_rows_tensor(&static_features.tokens)?;
        ground_inputs.push((pooled, entity_embedding, subject.bbox));
        cs_parts.push(static_features.tokens);
        cd_parts.push(c_d);
    }
    let cs_refs: Vec<&Tensor> = cs_parts.iter().collect();
    let cd_refs: Vec<&Tensor> = cd_parts.iter().collect();
    let c_s = Tensor::concat_rows(&cs_refs)?;
    let c_d = Tensor::concat_rows(&cd_refs)?;

    // Grounding tokens only exist when the request carries boxes.
    let grounding = if resolved.assignments.is_some() {
        Some(
            crate::layout::build_grounding_tokens(&ground_inputs, &cfg.fourier, &params.grounding)?
                .tokens,
        )
    } else {
        None
    };
    Ok(InferenceCond { text, uncond_text, subjects: Some((c_s, key_mask, c_d)), grounding })
}

fn mean_rows_tensor(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    let ones = Tensor::full(&[1, rows], 1.0 / rows as f64)?;
    ones.matmul(x)?.reshape(&[cols])
}

/// Per-step guidance diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub guided: bool,
    pub l_pos: Option<f64>,
    pub l_scale: Option<f64>,
    /// In-box attention mass ratio per subject.
    pub in_box: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latent: Tensor,
    pub diagnostics: Vec<StepDiagnostics>,
    pub box_free: bool,
}

/// Runs one sampling trajectory. Bit-deterministic given (request, params,
/// settings): the only randomness is the seeded initial noise.
pub fn sample(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    request: &SampleRequest,
    settings: &SamplerSettings,
) -> Result<SampleOutput> {
    settings.validate()?;
    let resolved = request.resolve(params)?;
    let cond = inference_conditioning(params, schedule, &resolved)?;
    let box_free = resolved.assignments.is_none();
    let assignments = resolved.assignments.clone().unwrap_or_default();
    let gcfg = &settings.guidance;
    let cfg = &params.cfg;

    let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(resolved.seed, 0x5a3, 0));
    let mut z = Tensor::randn(&mut rng, &[cfg.latent, cfg.latent]);

    let taus = ddim_timesteps(schedule.steps, settings.steps)?;
    let transitions = taus.len() - 1;
    let guided_steps = ((transitions as f64) * gcfg.guided_fraction).ceil() as usize;

    let subj_ref = cond
        .subjects
        .as_ref()
        .map(|(c_s, km, c_d)| (c_s, km.as_slice(), c_d));

    let mut diagnostics = Vec::with_capacity(transitions);
    for (i, win) in taus.windows(2).enumerate() {
        let (t, t_prev) = (win[0], win[1]);
        let guided_active = i < guided_steps && !box_free;

        let (eps_c, diag) = if guided_active {
            let alpha_t = step_size(t - 1, schedule.steps, gcfg.alpha0)?;
            let mut diag = StepDiagnostics {
                t,
                guided: true,
                l_pos: None,
                l_scale: None,
                in_box: None,
            };
            let mut eps_c: Option<Tensor> = None;
            for _iter in 0..gcfg.guidance_iterations {
                let tape = Tape::new();
                let vars = params.vars(&tape, false);
                let zv = tape.param(z.clone());
                let cond_vars = CondVars {
                    text: tape.constant(cond.text.clone()),
                    subjects: cond.subjects.as_ref().map(|(c_s, km, c_d)| SubjectVars {
                        c_s: tape.constant(c_s.clone()),
                        key_mask: km.clone(),
                        c_d: tape.constant(c_d.clone()),
                    }),
                    grounding: cond.grounding.as_ref().map(|g| tape.constant(g.clone())),
                    self_key_mask: None,
                };
                let out = crate::model::forward(&tape, params, &vars, zv, t, &cond_vars)?;
                let vstack = VarStack { layers: out.text_maps, timestep: t };
                let l_pos = position_loss(&tape, &vstack, &assignments, &gcfg.loss_layers)?;
                let l_scale = scale_loss(&tape, &vstack, &assignments, gcfg)?;
                diag.l_pos = Some(l_pos.to_tensor().item()?);
                diag.l_scale = Some(l_scale.to_tensor().item()?);
                let stack = vstack.values()?;
                diag.in_box = Some(crate::eval::attention_in_box_ratio(
                    &stack,
                    &assignments,
                    &gcfg.loss_layers,
                )?);
                let total = l_pos.add(l_scale)?;
                if gcfg.eta == 0.0 {
                    // Identity update: reuse this forward pass directly.
                    eps_c = Some(out.eps.to_tensor());
                    break;
                }
                z = guided_update(&tape, zv, total, alpha_t, gcfg.eta)?;
                if !gcfg.recompute_after_update {
                    eps_c = Some(out.eps.to_tensor());
                }
            }
            let eps_c = match eps_c {
                Some(e) => e,
                None => {
                    // Recompute on the updated latent; refresh diagnostics so
                    // they describe the state the DDIM step consumes.
                    let (eps, stack) = crate::model::forward_tensors(
                        params,
                        &z,
                        t,
                        &cond.text,
                        subj_ref,
                        cond.grounding.as_ref(),
                    )?;
                    diag.in_box = Some(crate::eval::attention_in_box_ratio(
                        &stack,
                        &assignments,
                        &gcfg.loss_layers,
                    )?);
                    eps
                }
            };
            (eps_c, diag)
        } else {
            let (eps, stack) = crate::model::forward_tensors(
                params,
                &z,
                t,
                &cond.text,
                subj_ref,
                cond.grounding.as_ref(),
            )?;
            let in_box = if assignments.is_empty() {
                None
            } else {
                Some(crate::eval::attention_in_box_ratio(&stack, &assignments, &gcfg.loss_layers)?)
            };
            (
                eps,
                StepDiagnostics { t, guided: false, l_pos: None, l_scale: None, in_box },
            )
        };

        let eps = if settings.cfg_scale == 1.0 {
            eps_c
        } else {
            let (eps_u, _) =
                crate::model::forward_tensors(params, &z, t, &cond.uncond_text, None, None)?;
            eps_u.add(&eps_c.sub(&eps_u)?.scale(settings.cfg_scale)?)?
        };

        z = ddim_step(&z, &eps, t, t_prev, schedule)?;
        diagnostics.push(diag);
    }

    Ok(SampleOutput { latent: z, diagnostics, box_free })
}

/// Independent requests, optionally across threads; output order matches
/// input order regardless of the parallelism degree.
pub fn sample_many(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    requests: &[SampleRequest],
    settings: &SamplerSettings,
    parallel: usize,
) -> Result<Vec<SampleOutput>> {
    let workers = parallel.max(1).min(requests.len().max(1));
    if workers <= 1 {
        return requests.iter().map(|r| sample(params, schedule, r, settings)).collect();
    }
    let mut slots: Vec<Option<Result<SampleOutput>>> = Vec::new();
    slots.resize_with(requests.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_mutex = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= requests.len() {
                    break;
                }
                let out = sample(params, schedule, &requests[i], settings);
                slots_mutex.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

/// Reads a JSON request file (an array of requests).
pub fn read_requests(path: &std::path::Path) -> Result<Vec<SampleRequest>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("request file: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::schedule::make_schedule;

    fn tiny_model() -> (DenoiserParams, NoiseSchedule) {
        let cfg = ModelConfig {
            latent: 16,
            d: 32,
            d_ff: 64,
            subject_patch: 8,
            resampler_queries: 8,
            resampler_blocks: 2,
            ..ModelConfig::default()
        };
        (
            DenoiserParams::init(cfg, 21).unwrap(),
            make_schedule(100, 1e-4, 0.02).unwrap(),
        )
    }

    fn boxed_request(seed: u64) -> SampleRequest {
        SampleRequest {
            prompt: "a red circle".into(),
            subjects: vec![SubjectRequest {
                entity: "circle".into(),
                color: "red".into(),
                size: 0.3,
                texture: Texture::Solid,
                bbox: Some([0.1, 0.1, 0.5, 0.5]),
            }],
            seed,
        }
    }

    #[test]
    fn resolution_contract() {
        let (params, _) = tiny_model();
        let req = boxed_request(1);
        let r = req.resolve(&params).unwrap();
        assert_eq!(r.prompt_ids.len(), 3);
        assert_eq!(r.assignments.as_ref().unwrap()[0].token_index, 2);

        // Mixed boxed/box-free subjects are rejected.
        let mut bad = SampleRequest {
            prompt: "a red circle and a blue square".into(),
            subjects: vec![
                SubjectRequest {
                    entity: "circle".into(),
                    color: "red".into(),
                    size: 0.3,
                    texture: Texture::Solid,
                    bbox: Some([0.1, 0.1, 0.4, 0.4]),
                },
                SubjectRequest {
                    entity: "square".into(),
                    color: "blue".into(),
                    size: 0.3,
                    texture: Texture::Solid,
                    bbox: None,
                },
            ],
            seed: 0,
        };
        assert!(matches!(bad.resolve(&params), Err(Error::Config(_))));
        bad.subjects[1].bbox = Some([0.5, 0.5, 0.9, 0.9]);
        assert!(bad.resolve(&params).is_ok());

        // Entity word must match the prompt.
        let mut wrong = boxed_request(0);
        wrong.subjects[0].entity = "square".into();
        assert!(wrong.resolve(&params).is_err());
    }

    #[test]
    fn zero_eta_equals_box_free_trajectory() {
        let (params, schedule) = tiny_model();
        let settings = SamplerSettings {
            steps: 6,
            cfg_scale: 2.0,
            guidance: GuidanceConfig { eta: 0.0, loss_layers: vec![8, 4], ..Default::default() },
        };
        let boxed = boxed_request(33);
        let mut free = boxed.clone();
        free.subjects[0].bbox = None;

        let a = sample(&params, &schedule, &boxed, &settings).unwrap();
        let b = sample(&params, &schedule, &free, &settings).unwrap();
        assert_eq!(a.latent.data(), b.latent.data());
        assert!(!a.box_free);
        assert!(b.box_free);
        assert!(a.diagnostics[0].l_pos.is_some());
    }

    #[test]
    fn sampling_is_deterministic_and_parallel_consistent() {
        let (params, schedule) = tiny_model();
        let settings = SamplerSettings {
            steps: 4,
            cfg_scale: 1.0,
            guidance: GuidanceConfig { eta: 2.0, loss_layers: vec![8, 4], ..Default::default() },
        };
        let reqs = vec![boxed_request(5), boxed_request(6)];
        let serial = sample_many(&params, &schedule, &reqs, &settings, 1).unwrap();
        let threaded = sample_many(&params, &schedule, &reqs, &settings, 2).unwrap();
        for (a, b) in serial.iter().zip(&threaded) {
            assert_eq!(a.latent.data(), b.latent.data());
        }
        let again = sample(&params, &schedule, &reqs[0], &settings).unwrap();
        assert_eq!(serial[0].latent.data(), again.latent.data());
    }
}
