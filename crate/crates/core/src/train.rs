//! Training loop: denoising MSE objective over the shapes corpus, updating
//! only the adapter, resampler, grounding MLPs and refiner projection while
//! the backbone stays frozen. Refiner feature maps depend only on frozen
//! weights, so they are computed once per subject and cached.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var as GenericVar;
use crate::data::Scene;
use crate::encoder::{
    encode_dynamic_var, make_frame_pair, patchify, project_static_var, ResamplerVars,
    SubjectReference,
};
use crate::error::{Error, Result};
use crate::layout::{BoundingBox, GroundingInput, GroundingMlpVars};
use crate::model::{mask_to_key_grid, CondVars, DenoiserParams, DenoiserVars, SubjectVars};
use crate::schedule::{add_noise, NoiseSchedule};
use crate::{Tape, Tensor};

type Var<'t> = GenericVar<'t, f64>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fraction of batch items trained as augmentation frame pairs.
    pub frame_pair_fraction: f64,
    /// Prompt dropout probability (classifier-free guidance training).
    pub cfg_dropout: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Batch-sharding worker threads; 0 picks the machine's parallelism.
    /// Results are identical for any worker count (per-item seed streams,
    /// ordered reduction).
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            frame_pair_fraction: 0.7,
            cfg_dropout: 0.1,
            seed: 0,
            log_every: 100,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("train: steps and batch must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("train: lr must be positive".into()));
        }
        for (name, v) in [
            ("frame_pair_fraction", self.frame_pair_fraction),
            ("cfg_dropout", self.cfg_dropout),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("train.{name} must lie in [0,1]")));
            }
        }
        Ok(())
    }
}

/// One subject with everything the training graph needs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub reference: SubjectReference,
    /// Cached frozen refiner feature maps `[s × 2d]`.
    pub refiner_maps: Tensor,
    /// Subject mask on the static-token grid.
    pub key_grid: Vec<f64>,
    /// Frozen entity embedding `[1 × d]`.
    pub entity_embedding: Tensor,
    pub bbox: BoundingBox,
    /// Shape head-word position in the prompt.
    pub entity_index: usize,
}

#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub latent: Tensor,
    pub prompt_ids: Vec<usize>,
    pub subjects: Vec<PreparedSubject>,
}

pub fn prepare_scene(
    scene: &Scene,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
) -> Result<PreparedScene> {
    let (_, p1) = params.cfg.levels();
    let latent = scene.latent()?;
    let mut subjects = Vec::with_capacity(scene.annotation.subjects.len());
    for (i, ann) in scene.annotation.subjects.iter().enumerate() {
        let reference = scene.annotation.subject_reference(i)?;
        let entity_embedding = params
            .entity_embedding(reference.entity_token)?
            .reshape(&[1, params.cfg.d])?;
        let (refiner_maps, _) = crate::encoder::refiner_features(
            &reference,
            &entity_embedding.reshape(&[params.cfg.d])?,
            params,
            schedule,
        )?;
        let key_grid = mask_to_key_grid(&reference.mask, p1)?;
        subjects.push(PreparedSubject {
            key_grid,
            entity_embedding,
            bbox: ann.bbox,
            entity_index: ann.entity_index,
            reference,
            refiner_maps,
        });
    }
    Ok(PreparedScene { latent, prompt_ids: scene.annotation.prompt_ids.clone(), subjects })
}

/// Registered trainable handles in the canonical `trainable_mut` order.
struct TrainVars<'t> {
    denoiser: DenoiserVars<'t>,
    resampler: ResamplerVars<'t>,
    grounding: GroundingMlpVars<'t, f64>,
    refiner_w: Var<'t>,
    refiner_b: Var<'t>,
}

impl<'t> TrainVars<'t> {
    fn register(tape: &'t Tape, params: &DenoiserParams) -> Self {
        TrainVars {
            denoiser: params.vars(tape, true),
            resampler: params.resampler.vars(tape, true),
            grounding: params.grounding.vars(tape, true),
            refiner_w: tape.param(params.refiner_w.clone()),
            refiner_b: tape.param(params.refiner_b.clone()),
        }
    }

    fn ordered(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for b in &self.denoiser.blocks {
            let a = &b.attn;
            out.extend([
                a.mu, a.gamma, a.static_wq, a.static_wk, a.static_wv, a.ground_wq, a.ground_wk,
                a.ground_wv, a.img_wk, a.img_wv,
            ]);
        }
        let r = &self.resampler;
        out.extend([r.queries, r.w_in]);
        for blk in &r.blocks {
            out.extend([blk.wq, blk.wk, blk.wv, blk.ffn_w1, blk.ffn_b1, blk.ffn_w2, blk.ffn_b2]);
        }
        out.extend([r.w_out, r.b_out]);
        let g = &self.grounding;
        out.extend([
            g.vis_w1, g.vis_b1, g.vis_w2, g.vis_b2, g.txt_w1, g.txt_b1, g.txt_w2, g.txt_b2,
            g.out_w, g.out_b,
        ]);
        out.extend([self.refiner_w, self.refiner_b]);
        out
    }
}

/// Row-mean as a `[1×d]` node.
fn mean_rows<'t>(tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
    let rows = x.shape()[0];
    let ones = Tensor::full(&[1, rows], 1.0 / rows as f64)?;
    tape.constant(ones).matmul(x)
}

/// Builds one item's denoising loss on the tape. Conditioning follows the
/// training recipe: optional prompt dropout (full unconditional item) and
/// frame-pair views for the dynamic encoder.
#[allow(clippy::too_many_arguments)]
fn item_loss<'t>(
    tape: &'t Tape,
    vars: &TrainVars<'t>,
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    scene: &PreparedScene,
    rng: &mut ChaCha8Rng,
    frame_pair_fraction: f64,
    cfg_dropout: f64,
) -> Result<Var<'t>> {
    let cfg = &params.cfg;
    let t = rng.gen_range(1..=schedule.steps);
    let eps = Tensor::randn(rng, &[cfg.latent, cfg.latent]);
    let z_t = add_noise(&scene.latent, t, &eps, schedule)?;

    let uncond = rng.gen_bool(cfg_dropout);
    let cond = if uncond {
        // Draw the frame-pair coin anyway so the rng stream does not depend
        // on the dropout outcome.
        for _ in &scene.subjects {
            let _ = rng.gen_bool(frame_pair_fraction);
            let _ = rng.gen::<u64>();
        }
        CondVars {
            text: tape.constant(params.prompt_embedding(&[0])?),
            subjects: None,
            grounding: None,
            self_key_mask: None,
        }
    } else {
        let mut cs_parts = Vec::new();
        let mut cd_parts = Vec::new();
        let mut key_mask = Vec::new();
        let mut ground_inputs = Vec::new();
        for subject in &scene.subjects {
            let pair = rng.gen_bool(frame_pair_fraction);
            let pair_seed = rng.gen::<u64>();
            let mut views = vec![patchify(
                &subject.reference.image,
                &subject.reference.mask,
                cfg.subject_patch,
            )?];
            if pair {
                let (_, supplement) = make_frame_pair(&subject.reference, pair_seed)?;
                views.push(patchify(&supplement.image, &supplement.mask, cfg.subject_patch)?);
            }
            let c_d = encode_dynamic_var(tape, &views, &params.resampler, &vars.resampler)?;
            let c_s = project_static_var(tape, &subject.refiner_maps, vars.refiner_w, vars.refiner_b)?;
            ground_inputs.push(GroundingInput {
                pooled_static: mean_rows(tape, c_s)?,
                entity_embedding: tape.constant(subject.entity_embedding.clone()),
                bbox: subject.bbox,
            });
            cs_parts.push(c_s);
            cd_parts.push(c_d);
            key_mask.extend_from_slice(&subject.key_grid);
        }
        let grounding = crate::layout::build_grounding_tokens_var(
            tape,
            &ground_inputs,
            &cfg.fourier,
            &vars.grounding,
        )?;
        CondVars {
            text: tape.constant(params.prompt_embedding(&scene.prompt_ids)?),
            subjects: Some(SubjectVars {
                c_s: Var::concat_rows(&cs_parts)?,
                key_mask,
                c_d: Var::concat_rows(&cd_parts)?,
            }),
            grounding: Some(grounding),
            self_key_mask: None,
        }
    };

    let out = crate::model::forward(tape, params, &vars.denoiser, tape.constant(z_t), t, &cond)?;
    out.eps.sub(tape.constant(eps))?.square()?.mean_all()
}

struct AdamState {
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

pub struct Trainer {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub scenes: Vec<PreparedScene>,
    opt: AdamState,
}

impl Trainer {
    pub fn new(
        params: DenoiserParams,
        schedule: NoiseSchedule,
        scenes: &[Scene],
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if scenes.is_empty() {
            return Err(Error::Data("trainer: empty corpus".into()));
        }
        let prepared: Vec<PreparedScene> = scenes
            .iter()
            .map(|s| prepare_scene(s, &params, &schedule))
            .collect::<Result<_>>()?;
        let mut shapes = Vec::new();
        {
            let mut p = params.clone();
            for (_, t) in p.trainable_mut() {
                shapes.push(t.shape().to_vec());
            }
        }
        let opt = AdamState {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        };
        Ok(Trainer { params, schedule, config, scenes: prepared, opt })
    }

    /// Gradient of one batch item, drawn from its own derived seed stream.
    fn item_gradient(&self, step: usize, item: usize) -> Result<(f64, Vec<Tensor>)> {
        let mut rng = crate::rng::derive_rng(
            self.config.seed,
            0x7121,
            (step * self.config.batch + item) as u64,
        );
        let idx = rng.gen_range(0..self.scenes.len());
        let tape = Tape::new();
        let vars = TrainVars::register(&tape, &self.params);
        let loss = item_loss(
            &tape,
            &vars,
            &self.params,
            &self.schedule,
            &self.scenes[idx],
            &mut rng,
            self.config.frame_pair_fraction,
            self.config.cfg_dropout,
        )?;
        let loss_value = loss.to_tensor().item()?;
        if !loss_value.is_finite() {
            return Err(Error::TrainingDivergence(format!("non-finite loss at step {step}")));
        }
        let mut grads = tape.backward(loss).map_err(|e| match e {
            Error::NonFinite(op) => {
                Error::TrainingDivergence(format!("non-finite gradient in {op}"))
            }
            other => other,
        })?;
        let gs = vars
            .ordered()
            .iter()
            .map(|v| grads.take(*v).expect("trainable gradient"))
            .collect();
        Ok((loss_value, gs))
    }

    /// One optimizer step over a random batch; returns the batch loss.
    /// Batch items shard across worker threads; the reduction is ordered,
    /// so any worker count produces identical results.
    pub fn training_step(&mut self, step: usize) -> Result<f64> {
        let workers = if self.config.workers == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            self.config.workers
        }
        .min(self.config.batch);

        let mut results: Vec<Option<Result<(f64, Vec<Tensor>)>>> = Vec::new();
        results.resize_with(self.config.batch, || None);
        if workers <= 1 {
            for (item, slot) in results.iter_mut().enumerate() {
                *slot = Some(self.item_gradient(step, item));
            }
        } else {
            let next = std::sync::atomic::AtomicUsize::new(0);
            let slots = std::sync::Mutex::new(&mut results);
            let this = &*self;
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let item = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        if item >= this.config.batch {
                            break;
                        }
                        let out = this.item_gradient(step, item);
                        slots.lock().unwrap()[item] = Some(out);
                    });
                }
            });
        }

        let mut grad_sum: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        for slot in results {
            let (loss_value, gs) = slot.expect("worker filled slot")?;
            loss_sum += loss_value;
            match &mut grad_sum {
                None => grad_sum = Some(gs),
                Some(sum) => {
                    for (acc, g) in sum.iter_mut().zip(&gs) {
                        *acc = acc.add(g)?;
                    }
                }
            }
        }
        let scale = 1.0 / self.config.batch as f64;
        let grads: Vec<Tensor> = grad_sum
            .unwrap()
            .into_iter()
            .map(|g| g.scale(scale))
            .collect::<Result<_>>()?;
        self.apply_adamw(&grads)?;
        Ok(loss_sum * scale)
    }

    fn apply_adamw(&mut self, grads: &[Tensor]) -> Result<()> {
        let c = &self.config;
        self.opt.step += 1;
        let t = self.opt.step as f64;
        let bc1 = 1.0 - c.adam_beta1.powf(t);
        let bc2 = 1.0 - c.adam_beta2.powf(t);
        for (i, (_, w)) in self.params.trainable_mut().into_iter().enumerate() {
            let g = &grads[i];
            self.opt.m[i] = self.opt.m[i]
                .scale(c.adam_beta1)?
                .add(&g.scale(1.0 - c.adam_beta1)?)?;
            self.opt.v[i] = self.opt.v[i]
                .scale(c.adam_beta2)?
                .add(&g.mul(g)?.scale(1.0 - c.adam_beta2)?)?;
            let update: Vec<f64> = self.opt.m[i]
                .data()
                .iter()
                .zip(self.opt.v[i].data())
                .zip(w.data())
                .map(|((&m, &v), &wv)| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    c.lr * (mhat / (vhat.sqrt() + c.adam_eps) + c.weight_decay * wv)
                })
                .collect();
            *w = w.sub(&Tensor::from_vec(w.shape().to_vec(), update)?)?;
        }
        Ok(())
    }

    /// Deterministic denoising loss over fixed probe draws (no dropout, no
    /// optimizer side effects). Used to compare before/after training.
    pub fn eval_loss(&self, probes: usize, probe_seed: u64) -> Result<f64> {
        let mut total = 0.0;
        for p in 0..probes {
            let mut rng = crate::rng::derive_rng(probe_seed, 0xe7a1, p as u64);
            let idx = rng.gen_range(0..self.scenes.len());
            let tape = Tape::new();
            let vars = TrainVars::register(&tape, &self.params);
            let loss = item_loss(
                &tape,
                &vars,
                &self.params,
                &self.schedule,
                &self.scenes[idx],
                &mut rng,
                1.0, // always frame pairs for a stable probe
                0.0,
            )?;
            total += loss.to_tensor().item()?;
        }
        Ok(total / probes as f64)
    }

    /// Runs `steps` optimizer steps, returning the per-step batch losses.
    pub fn train(&mut self, steps: usize, mut progress: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
        let mut history = Vec::with_capacity(steps);
        for step in 0..steps {
            let loss = self.training_step(step)?;
            if self.config.log_every > 0 && step % self.config.log_every == 0 {
                progress(step, loss);
            }
            history.push(loss);
        }
        Ok(history)
    }
}
