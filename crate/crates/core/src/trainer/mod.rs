//! Rollout → score → shape → update loop.
//!
//! Every sampled group contributes to the update, including groups whose
//! responses are all correct or all wrong: with shaping enabled those still
//! carry a token-level signal.

pub mod pretrain;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint;
use crate::config::{InitKind, RunConfig};
use crate::error::{CesError, Result};
use crate::objective::{norm, objective_gradient};
use crate::optim::adam_step;
use crate::policy::{FeatureMap, Vocabulary};
use crate::records::{MetricsRecord, RolloutRecord, SCHEMA_VERSION};
use crate::rollout::{sample_group, score_group};
use crate::shaping::{shape_advantages, ShapingConfig};
use crate::streams::stream;
use crate::tasks::generate_instance;
use crate::{Adam, Batch, Params, Plan};

pub use pretrain::{pretrain_verbose, PretrainConfig};

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub fmap: FeatureMap,
    pub params: Params,
    pub adam: Adam,
    pub step: u64,
    pub samples: u64,
}

/// Everything one step produced; `plans` are the shaped advantages of the
/// first (on-policy) inner epoch.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub metrics: MetricsRecord,
    pub batches: Vec<Batch>,
    pub plans: Vec<Plan>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: Params,
    pub metrics: Vec<MetricsRecord>,
}

/// The starting policy a config asks for.
pub fn initial_policy(config: &RunConfig) -> Result<Params> {
    let fmap = config.feature_map();
    let p = &config.policy;
    let init = pretrain::initial_params(p.architecture(), &fmap, p.temperature, p.init_scale, config.train.seed);
    match config.train.init {
        InitKind::Random => Ok(init),
        InitKind::PretrainVerbose => pretrain_verbose(init, &fmap, &config.pretrain, config.train.seed),
    }
}

/// Live entropies of every recorded token under `params`.
fn live_entropies(params: &Params, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    batch
        .responses
        .iter()
        .map(|r| {
            r.records
                .iter()
                .map(|rec| Ok(params.distribution(&rec.features)?.entropy_bits()))
                .collect()
        })
        .collect()
}

pub fn shape_all(params: &Params, batches: &[Batch], config: &ShapingConfig) -> Result<Vec<Plan>> {
    batches
        .par_iter()
        .map(|b| shape_advantages(b, config, &live_entropies(params, b)?))
        .collect()
}

impl Trainer {
    pub fn new(config: RunConfig, initial: Params) -> Result<Self> {
        config.validate()?;
        let fmap = config.feature_map();
        if initial.feature_dim() != fmap.dim() || initial.vocab_size() != fmap.vocab_size {
            return Err(CesError::Dimension(format!(
                "initial policy has feature dim {}, config implies {}",
                initial.feature_dim(),
                fmap.dim()
            )));
        }
        initial.validate()?;
        let adam = Adam::new(initial.len());
        Ok(Trainer {
            config,
            fmap,
            params: initial,
            adam,
            step: 0,
            samples: 0,
        })
    }

    /// Samples and scores one rollout batch under the current parameters.
    pub fn rollout(&self) -> Result<Vec<Batch>> {
        let t = &self.config.train;
        (0..t.prompts_per_batch)
            .into_par_iter()
            .map(|i| {
                let path = [self.step, i as u64];
                let mut rng = stream(t.seed, "prompts", &path);
                let id = self.step * t.prompts_per_batch as u64 + i as u64;
                let instance = generate_instance(&mut rng, t.tier_mix, id);
                let mut batch =
                    sample_group(&self.params, &self.fmap, &instance, t.samples_per_prompt, t.budget, t.seed, &path)?;
                score_group(&mut batch);
                Ok(batch)
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let batches = self.rollout()?;
        let shaping = self.config.shaping.config();
        let clip = self.config.clip;
        let lr = self.config.train.lr;

        let mut first: Option<(f64, f64, Vec<Plan>)> = None;
        for _ in 0..clip.inner_epochs {
            let plans = shape_all(&self.params, &batches, &shaping)?;
            let (value, grad) = objective_gradient(&batches, &plans, &self.params, &clip)?;
            let gnorm = norm(&grad);
            adam_step(&mut self.params, &grad, &mut self.adam, lr)?;
            if first.is_none() {
                first = Some((value, gnorm, plans));
            }
        }
        let (objective, grad_norm, plans) = first.expect("at least one inner epoch");

        let tokens: usize = batches.iter().map(Batch::token_count).sum();
        let responses: usize = batches.iter().map(Batch::size).sum();
        let entropy_sum: f64 = batches
            .iter()
            .flat_map(|b| &b.responses)
            .flat_map(|r| &r.records)
            .map(|rec| rec.entropy_bits)
            .sum();
        self.samples += responses as u64;
        let metrics = MetricsRecord {
            schema_version: SCHEMA_VERSION,
            step: self.step,
            samples: self.samples,
            groups: plans.len(),
            mean_length: tokens as f64 / responses as f64,
            mean_entropy_bits: entropy_sum / tokens as f64,
            mean_group_accuracy: batches.iter().map(|b| b.accuracy).sum::<f64>() / batches.len() as f64,
            objective,
            grad_norm,
            selected_tokens: plans.iter().map(Plan::selected_total).sum(),
            mode: shaping.mode.name().to_string(),
        };
        self.step += 1;
        Ok(StepOutcome {
            metrics,
            batches,
            plans,
        })
    }
}

pub fn rollout_records(step: u64, batches: &[Batch]) -> Vec<RolloutRecord> {
    batches
        .iter()
        .flat_map(|b| {
            b.responses.iter().map(move |r| RolloutRecord {
                schema_version: SCHEMA_VERSION,
                step,
                prompt_id: b.instance.id,
                response_index: r.index,
                tokens: r.tokens(),
                entropy_bits: r.entropies(),
                old_log_prob: r.records.iter().map(|x| x.old_log_prob).collect(),
                r_acc: r.r_acc,
                r_fmt: r.r_fmt,
            })
        })
        .collect()
}

/// Runs every step the sample budget allows, handing each outcome to
/// `observe` as it is produced.
pub fn train_loop(
    config: &RunConfig,
    initial: Params,
    mut observe: impl FnMut(&StepOutcome) -> Result<()>,
) -> Result<TrainResult> {
    let mut trainer = Trainer::new(config.clone(), initial)?;
    let mut metrics = Vec::new();
    for _ in 0..config.total_steps() {
        let outcome = trainer.step()?;
        observe(&outcome)?;
        metrics.push(outcome.metrics);
    }
    Ok(TrainResult {
        params: trainer.params,
        metrics,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CesError::io(path, e))
}

/// `train_loop` plus the configured files: metrics, optional rollout dump
/// and the final checkpoint.
pub fn run_training(config: &RunConfig, initial: Params) -> Result<TrainResult> {
    let out = &config.output;
    let mut metrics_w = create(&out.metrics)?;
    let mut rollouts_w = out.rollouts.as_deref().map(create).transpose()?;
    let result = train_loop(config, initial, |o| {
        let line = serde_json::to_string(&o.metrics).expect("metrics serialize");
        writeln!(metrics_w, "{line}").map_err(|e| CesError::io(&out.metrics, e))?;
        if let (Some(w), Some(path)) = (rollouts_w.as_mut(), out.rollouts.as_ref()) {
            for rec in rollout_records(o.metrics.step, &o.batches) {
                let line = serde_json::to_string(&rec).expect("rollout serializes");
                writeln!(w, "{line}").map_err(|e| CesError::io(path, e))?;
            }
        }
        Ok(())
    })?;
    metrics_w.flush().map_err(|e| CesError::io(&out.metrics, e))?;
    if let (Some(w), Some(path)) = (rollouts_w.as_mut(), out.rollouts.as_ref()) {
        w.flush().map_err(|e| CesError::io(path, e))?;
    }
    checkpoint::save(&out.checkpoint, &result.params, &config.feature_map(), &Vocabulary::arithmetic())?;
    Ok(result)
}
