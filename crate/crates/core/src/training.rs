//! Mini-batch sampling and the two-stage SGD schedule.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::diffcore::{ParamStore, Sgd};
use crate::error::{Error, Result};
use crate::geometry::{label_proposals, LabeledProposal};
use crate::model::ModelConfig;
use crate::recursion::{train_step, RecursionConfig};
use crate::synthdata::{generate_proposals, substream, Scene, SceneConfig};

const STEP_DOMAIN: u64 = 0x7A41_0001;
/// Proposal indices used during training start here so they never collide
/// with the per-image indices used at test time.
const TRAIN_PROPOSAL_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gateless steps.
    pub stage1_steps: usize,
    /// Gated fine-tuning steps.
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub fg_fraction: f64,
    pub flip_prob: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            stage1_steps: 4000,
            stage2_steps: 3000,
            batch_size: 64,
            fg_fraction: 0.25,
            flip_prob: 0.5,
            checkpoint_every: 500,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("need lr > 0, momentum in [0, 1), weight_decay >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) || !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("fg_fraction and flip_prob must be in [0, 1]");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }

    pub fn foreground_per_batch(&self) -> usize {
        (self.batch_size as f64 * self.fg_fraction).round() as usize
    }
}

/// Draws `n` items, without replacement when enough exist and with
/// replacement otherwise.
fn draw<R: Rng>(pool: &[LabeledProposal], n: usize, rng: &mut R) -> Vec<LabeledProposal> {
    if pool.is_empty() || n == 0 {
        return Vec::new();
    }
    if pool.len() >= n {
        pool.choose_multiple(rng, n).copied().collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Foreground share first, background fills the rest; one kind alone fills
/// the batch when the other is missing.
pub fn sample_batch<R: Rng>(labeled: &[LabeledProposal], batch_size: usize, n_fg: usize, rng: &mut R) -> Vec<LabeledProposal> {
    let (fg, bg): (Vec<_>, Vec<_>) = labeled.iter().partition(|p| p.is_foreground());
    let n_fg = match (fg.is_empty(), bg.is_empty()) {
        (true, _) => 0,
        (false, true) => batch_size,
        _ => n_fg.min(batch_size),
    };
    let mut out = draw(&fg, n_fg, rng);
    out.extend(draw(&bg, batch_size - out.len(), rng));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based.
    pub step: usize,
    pub stage: usize,
    pub gates: bool,
    pub image: usize,
    pub flipped: bool,
    pub loss: f64,
    /// Counts of t' = 1..T.
    pub t_prime_hist: Vec<usize>,
}

pub struct Trainer<'a> {
    pub scenes: &'a [Scene],
    pub scene_cfg: SceneConfig,
    pub model: ModelConfig,
    pub recursion: RecursionConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    /// Steps completed.
    pub step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        scenes: &'a [Scene],
        scene_cfg: SceneConfig,
        model: ModelConfig,
        recursion: RecursionConfig,
        train: TrainConfig,
        params: ParamStore,
    ) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        train.validate()?;
        recursion.validate()?;
        Ok(Trainer {
            scenes,
            scene_cfg,
            model,
            recursion,
            train,
            params,
            step: 0,
        })
    }

    pub fn finished(&self) -> bool {
        self.step >= self.train.total_steps()
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let s = self.step as u64;
        let mut rng = substream(self.train.seed, STEP_DOMAIN, s);
        let image = rng.random_range(0..self.scenes.len());
        let flipped = rng.random_bool(self.train.flip_prob);
        let flipped_scene;
        let scene = if flipped {
            flipped_scene = self.scenes[image].flip_h();
            &flipped_scene
        } else {
            &self.scenes[image]
        };
        let cfg = SceneConfig {
            img_w: scene.image.width,
            img_h: scene.image.height,
            ..self.scene_cfg.clone()
        };
        let proposals = generate_proposals(&scene.instances, &cfg, TRAIN_PROPOSAL_BASE + s);
        let labeled = label_proposals(&proposals, &scene.instances);
        let batch = sample_batch(&labeled, self.train.batch_size, self.train.foreground_per_batch(), &mut rng);
        if batch.is_empty() {
            return Err(Error::State(format!("image {image} produced no proposals")));
        }
        let stage = if self.step < self.train.stage1_steps { 1 } else { 2 };
        let gates = stage == 2 && self.recursion.gates_enabled;
        let stats = train_step(
            &mut self.params,
            &self.model,
            &self.recursion,
            &scene.image,
            &scene.instances,
            &batch,
            gates,
        )?;
        Sgd {
            lr: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
        }
        .step(&mut self.params);
        self.step += 1;
        let mut hist = vec![0; self.recursion.train_iterations()];
        for &t in &stats.t_primes {
            hist[t - 1] += 1;
        }
        Ok(StepLog {
            step: self.step,
            stage,
            gates,
            image,
            flipped,
            loss: stats.loss,
            t_prime_hist: hist,
        })
    }
}
