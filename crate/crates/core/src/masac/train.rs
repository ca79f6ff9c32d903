use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{policy_entropy, ActionMode, Masac, MasacConfig, MasacError, ReplayBuffer, Transition, UpdateStats};
use crate::datamodel::{FlowSpec, Phase, RoadNetwork};
use crate::par::Exec;
use crate::simulator::{run_episode, Controller, MetricsRecord, SimConfig, SimError, Simulation};

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    /// 1-based.
    pub episode: usize,
    pub att: f64,
    pub throughput: u64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub recon_loss: f64,
    pub alpha: f64,
    pub mean_entropy: f64,
    pub updates: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeLog>,
    /// Temperature after every gradient update.
    pub alpha_trace: Vec<f64>,
}

pub const LOG_HEADER: &str = "episode,ATT,throughput,critic_loss,actor_loss,recon_loss,alpha,mean_entropy";

pub fn write_log_csv<W: Write>(mut out: W, log: &TrainingLog) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for e in &log.episodes {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.episode, e.att, e.throughput, e.critic_loss, e.actor_loss, e.recon_loss, e.alpha, e.mean_entropy
        )?;
    }
    Ok(())
}

/// Simulator seed of training episode `episode` (0-based).
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(episode as u64 + 1)
}

#[derive(Default)]
struct Mean {
    sum: UpdateStats,
    count: u64,
}

impl Mean {
    fn push(&mut self, s: UpdateStats) {
        self.sum.critic_loss += s.critic_loss;
        self.sum.actor_loss += s.actor_loss;
        self.sum.recon_loss += s.recon_loss;
        self.count += 1;
    }

    fn get(&self) -> UpdateStats {
        let k = self.count.max(1) as f64;
        UpdateStats {
            critic_loss: self.sum.critic_loss / k,
            actor_loss: self.sum.actor_loss / k,
            recon_loss: self.sum.recon_loss / k,
            ..UpdateStats::default()
        }
    }
}

/// Trains from scratch. `on_episode` sees each log row as it is produced.
///
/// Actions are sampled from the current policies; after every environment
/// step one update runs on a uniform batch once the buffer is full. Episode
/// ends are time limits, so targets always bootstrap.
pub fn train<F: FnMut(&EpisodeLog)>(
    net: Arc<RoadNetwork>,
    flow: &FlowSpec,
    sim_config: SimConfig,
    config: &MasacConfig,
    seed: u64,
    mut on_episode: F,
) -> Result<(Masac, TrainingLog), MasacError> {
    let mut model = Masac::new(config.clone(), net.agent_count(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut buffer = ReplayBuffer::new(config.buffer_size);
    let mut log = TrainingLog::default();
    let n = model.agents;

    for ep in 0..config.episodes {
        let (mut sim, first) = Simulation::reset(net.clone(), flow, episode_seed(seed, ep), sim_config)?;
        let mut obs = model.prepare(&first.values);
        let mut prev = obs.clone();
        let mut mean = Mean::default();
        let mut entropy = 0.0;
        let mut steps = 0usize;
        while !sim.done() {
            let policies = model.policies(&obs);
            entropy += policies.iter().map(|p| policy_entropy(p)).sum::<f64>() / n as f64;
            steps += 1;
            let actions: Vec<usize> = policies.iter().map(|p| super::sample_categorical(p, &mut rng)).collect();
            let phases: Vec<Phase> = actions.iter().map(|&a| Phase::from_index(a)).collect();
            let out = sim.step(&phases)?;
            let next = model.prepare(&out.observations.values);
            buffer.push(Transition {
                obs_prev: std::mem::take(&mut prev),
                obs: obs.clone(),
                actions,
                rewards: out.rewards.iter().map(|r| r * config.reward_scale).collect(),
                obs_next: next.clone(),
            });
            prev = std::mem::replace(&mut obs, next);
            if buffer.len() >= config.buffer_size {
                let batch = buffer.batch(&buffer.sample_indices(&mut rng, config.batch_size));
                mean.push(model.update(&batch)?);
                log.alpha_trace.push(model.alpha());
            }
        }
        let stats = if mean.count == 0 && buffer.len() >= config.batch_size {
            // No update yet: report losses on one batch so every column is populated.
            let batch = buffer.batch(&buffer.sample_indices(&mut rng, config.batch_size));
            model.diagnose(&batch)?
        } else {
            mean.get()
        };
        let metrics = sim.metrics()?;
        let row = EpisodeLog {
            episode: ep + 1,
            att: metrics.att,
            throughput: metrics.throughput,
            critic_loss: stats.critic_loss,
            actor_loss: stats.actor_loss,
            recon_loss: stats.recon_loss,
            alpha: model.alpha(),
            mean_entropy: entropy / steps.max(1) as f64,
            updates: mean.count,
        };
        on_episode(&row);
        log.episodes.push(row);
    }
    Ok((model, log))
}

/// Argmax actions from a trained model.
pub struct GreedyPolicy<'a>(pub &'a Masac);

impl Controller for GreedyPolicy<'_> {
    fn act(&mut self, sim: &Simulation) -> Vec<Phase> {
        let obs = self.0.prepare(&sim.observations().values);
        // Greedy selection never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.0.select_phases(&obs, ActionMode::Greedy, &mut rng)
    }
}

/// One greedy episode per seed.
pub fn evaluate(
    model: &Masac,
    net: Arc<RoadNetwork>,
    flow: &FlowSpec,
    seeds: &[u64],
    sim_config: SimConfig,
) -> Result<Vec<MetricsRecord>, MasacError> {
    let records = evaluate_policy(net, flow, seeds, sim_config, model.config.exec, || GreedyPolicy(model))?;
    Ok(records)
}

/// Runs a fresh controller from `make` on every seed, fanned out by `exec`.
pub fn evaluate_policy<C, M>(
    net: Arc<RoadNetwork>,
    flow: &FlowSpec,
    seeds: &[u64],
    sim_config: SimConfig,
    exec: Exec,
    make: M,
) -> Result<Vec<MetricsRecord>, SimError>
where
    C: Controller,
    M: Fn() -> C + Sync + Send,
{
    exec.map(seeds, |&s| run_episode(net.clone(), flow, s, sim_config, &mut make()))
        .into_iter()
        .collect()
}
