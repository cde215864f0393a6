//! The training loop and its on-disk outputs.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::autodiff::Graph;
use crate::env::hypergrid::TRUE_DISTRIBUTION_LIMIT;
use crate::env::{true_distribution, Hypergrid};
use crate::error::{Error, Result};
use crate::evaluator::{
    kl_divergence, record_visit, MetricsRow, ModeTracker, RunMetrics, VisitBuffer, VISIT_CAPACITY,
};
use crate::path_reg::{combined_loss, required_states, RegularizerConfig};
use crate::policy::{PolicyConfig, PolicyEval, PolicyModel};
use crate::tb::sample_batch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub dims: usize,
    pub side: usize,
    pub r0: f64,
}

impl GridConfig {
    pub fn build(&self) -> Result<Hypergrid> {
        Ok(Hypergrid::new(self.dims, self.side, self.r0)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub env: GridConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr_policy: f64,
    pub lr_logz: f64,
    /// Weight of the uniform component in the sampling policy.
    pub explore: f64,
    pub reg: RegularizerConfig,
    pub policy: PolicyConfig,
    pub seed: u64,
    /// Metrics are recorded every this many steps and after the last one.
    pub log_every: usize,
    pub visit_capacity: usize,
    /// End the run as soon as every mode has been sampled once.
    pub stop_when_all_modes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: GridConfig {
                dims: 4,
                side: 8,
                r0: 1e-3,
            },
            steps: 62_500,
            batch: 16,
            lr_policy: 1e-3,
            lr_logz: 0.1,
            explore: 0.01,
            reg: RegularizerConfig::default(),
            policy: PolicyConfig::default(),
            seed: 0,
            log_every: 500,
            visit_capacity: VISIT_CAPACITY,
            stop_when_all_modes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps as f64),
            ("batch", self.batch as f64),
            ("lr_policy", self.lr_policy),
            ("lr_logz", self.lr_logz),
            ("log_every", self.log_every as f64),
            ("visit_capacity", self.visit_capacity as f64),
            ("hidden", self.policy.hidden as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.explore) {
            return Err(Error::Config(format!("explore must be in [0, 1], got {}", self.explore)));
        }
        self.reg.validate()?;
        self.env.build()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub model: PolicyModel,
    pub steps_run: usize,
    pub trajectories: u64,
    /// Trajectory count at which the last mode was first sampled.
    pub all_modes_at: Option<u64>,
}

/// Independent random streams derived from the run seed.
fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut sampler = ChaCha8Rng::seed_from_u64(seed);
    sampler.set_stream(1);
    let mut dropout = ChaCha8Rng::seed_from_u64(seed);
    dropout.set_stream(2);
    (sampler, dropout)
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(config, |_| {})
}

/// Runs training, calling `on_row` for every metrics row as it is recorded.
pub fn train_with(config: &TrainConfig, mut on_row: impl FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    config.validate()?;
    let env = config.env.build()?;
    let target = true_distribution(&env, TRUE_DISTRIBUTION_LIMIT)?;
    let mut model = PolicyModel::new(&env, config.policy.clone(), config.seed);
    let (mut sampler, mut dropout) = streams(config.seed);
    let mut adam_net = AdamState::new(model.layers());
    let mut adam_logz = AdamState::new(std::slice::from_ref(model.log_z_mut()));
    let mut buffer = VisitBuffer::new(config.visit_capacity);
    let mut modes = ModeTracker::new(env.modes());
    let mut metrics = RunMetrics::default();
    let mut trajectories = 0u64;
    let (mut tb_acc, mut reg_acc, mut acc_steps) = (0.0, 0.0, 0usize);
    let n_layers = model.layers().len();
    let inv_batch = 1.0 / config.batch as f64;

    let mut step = 0;
    while step < config.steps {
        step += 1;
        let samples = sample_batch(&model, &env, config.explore, config.batch, &mut sampler)?;
        for s in &samples {
            record_visit(&mut buffer, &mut modes, s.terminal());
        }
        trajectories += samples.len() as u64;

        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let mut needed = Vec::new();
        for s in &samples {
            needed.extend(required_states(&env, s, &config.reg)?);
        }
        let mut eval = PolicyEval::new(&mut g, &model, &bound, &env, needed)?;
        let mut totals = Vec::with_capacity(samples.len());
        let (mut tb_sum, mut reg_sum) = (0.0, 0.0);
        for s in &samples {
            let parts = combined_loss(&mut g, &mut eval, &env, s, &config.reg, &mut dropout)?;
            tb_sum += g.item(parts.tb);
            reg_sum += g.item(parts.reg);
            totals.push((parts.total, inv_batch));
        }
        let loss = g.weighted_sum(&totals);
        let grads = g
            .grad(loss, &bound.params())
            .map_err(|source| Error::Diverged { step, source })?;
        adam_step(model.layers_mut(), &grads[..n_layers], &mut adam_net, config.lr_policy)?;
        adam_step(
            std::slice::from_mut(model.log_z_mut()),
            &grads[n_layers..],
            &mut adam_logz,
            config.lr_logz,
        )?;
        tb_acc += tb_sum * inv_batch;
        reg_acc += reg_sum * inv_batch;
        acc_steps += 1;

        let done = step == config.steps || (config.stop_when_all_modes && modes.all_found());
        if step % config.log_every == 0 || done {
            let row = MetricsRow {
                step,
                trajectories,
                modes_found: modes.found(),
                kl: kl_divergence(&buffer, &target),
                loss_tb: tb_acc / acc_steps as f64,
                loss_ot: reg_acc / acc_steps as f64,
            };
            on_row(&row);
            metrics.push(row);
            (tb_acc, reg_acc, acc_steps) = (0.0, 0.0, 0);
        }
        if done {
            break;
        }
    }
    Ok(TrainOutcome {
        metrics,
        model,
        steps_run: step,
        trajectories,
        all_modes_at: modes.all_found_at(),
    })
}

/// Writes `config.json`, `metrics.csv` and `model.ckpt` into `dir`.
pub fn write_outputs(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    fs::write(dir.join("metrics.csv"), outcome.metrics.to_csv())?;
    outcome.model.save(&dir.join("model.ckpt"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_reg::RegMode;

    fn tiny() -> TrainConfig {
        TrainConfig {
            env: GridConfig {
                dims: 2,
                side: 4,
                r0: 0.1,
            },
            steps: 20,
            batch: 4,
            log_every: 5,
            policy: PolicyConfig {
                hidden: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn logs_on_cadence() {
        let out = train(&tiny()).unwrap();
        let steps: Vec<usize> = out.metrics.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![5, 10, 15, 20]);
        assert_eq!(out.trajectories, 80);
        assert_eq!(out.metrics.rows[3].trajectories, 80);
    }

    #[test]
    fn zero_lambda_matches_plain_tb() {
        let base = tiny();
        let reg = TrainConfig {
            reg: RegularizerConfig {
                mode: RegMode::Min,
                lambda: 0.0,
                ..Default::default()
            },
            ..tiny()
        };
        let a = train(&base).unwrap();
        let b = train(&reg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn regularized_run_reports_ot_loss() {
        let cfg = TrainConfig {
            reg: RegularizerConfig {
                mode: RegMode::Min,
                ..Default::default()
            },
            ..tiny()
        };
        let out = train(&cfg).unwrap();
        assert!(out.metrics.rows.iter().all(|r| r.loss_ot > 0.0));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = tiny();
        cfg.batch = 0;
        assert!(matches!(train(&cfg), Err(Error::Config(_))));
        let mut cfg = tiny();
        cfg.env.side = 1;
        assert!(train(&cfg).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = tiny();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
    }
}
