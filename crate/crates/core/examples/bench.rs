use deskdiff_core::data::{generate_corpus, SceneConfig};
use deskdiff_core::model::{DenoiserParams, ModelConfig};
use deskdiff_core::schedule::make_schedule;
use deskdiff_core::train::{TrainConfig, Trainer};
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = ModelConfig::default();
    let params = DenoiserParams::init(cfg, 1).unwrap();
    let schedule = make_schedule(1000, 1e-4, 0.02).unwrap();
    let scene_cfg = SceneConfig::default();
    let (scenes, _) = generate_corpus(&scene_cfg, 7, 128, 1).unwrap();
    let tc = TrainConfig { batch: 32, log_every: 0, ..TrainConfig::default() };
    let mut trainer = Trainer::new(params, schedule, &scenes, tc).unwrap();
    let probe0 = trainer.eval_loss(32, 99).unwrap();
    println!("probe loss at step 0: {probe0:.4}");
    let t0 = Instant::now();
    for step in 0..steps {
        let loss = trainer.training_step(step).unwrap();
        if step % 25 == 0 {
            let dt = t0.elapsed().as_secs_f64();
            println!("step {step:4} batch-loss {loss:.4}  ({:.2} s/step)", dt / (step + 1) as f64);
        }
    }
    let probe1 = trainer.eval_loss(32, 99).unwrap();
    println!("probe loss after {steps}: {probe1:.4}  (drop {:.1}%)", 100.0 * (1.0 - probe1 / probe0));
}
