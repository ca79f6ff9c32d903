//! Multi-agent soft actor-critic over the four discrete phases.
//!
//! Each agent owns an actor `16 -> 64 -> 64 -> 4` and two critics fed with
//! its hypergraph node embedding, the one-hot actions of the other agents and
//! the graph readout. One encoder is shared by all critics; the target
//! encoder and target critics live in a cloned store.

mod buffer;
mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datamodel::{Phase, PHASE_COUNT};
use crate::diffcore::{checkpoint, softmax_in_place, Adam, Graph, Mlp, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::hypergraph::{HGConfig, HypergraphEncoder, HypergraphError};
use crate::par::Exec;
use crate::simulator::{SimError, OBS_DIM};

pub use buffer::{Batch, ReplayBuffer, Transition};
pub use train::{episode_seed, evaluate, evaluate_policy, train, write_log_csv, EpisodeLog, GreedyPolicy, TrainingLog, LOG_HEADER};

pub const ACTIONS: usize = PHASE_COUNT;

#[derive(Debug, Error)]
pub enum MasacError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint does not match this model: {0}")]
    CheckpointMismatch(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<HypergraphError> for MasacError {
    fn from(e: HypergraphError) -> Self {
        match e {
            HypergraphError::Config(m) => MasacError::Config(m),
            HypergraphError::Tensor(t) => MasacError::Tensor(t),
        }
    }
}

/// Target-network blending rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftUpdateRule {
    /// `target <- rho * target + (1 - rho) * main`.
    AsPrinted,
    /// `target <- (1 - rho) * target + rho * main`.
    Conventional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MasacConfig {
    pub episodes: usize,
    pub batch_size: usize,
    /// Replay capacity; updates start once the buffer holds this many steps.
    pub buffer_size: usize,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub target_entropy: f64,
    pub initial_alpha: f64,
    pub rho: f64,
    pub soft_update: SoftUpdateRule,
    /// Multiplier applied to simulator rewards before storage.
    pub reward_scale: f64,
    /// Multiplier applied to observation counts before they reach any network.
    pub obs_scale: f64,
    pub hidden: usize,
    pub encoder: HGConfig,
    pub exec: Exec,
}

impl Default for MasacConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            batch_size: 20,
            buffer_size: 1000,
            gamma: 0.98,
            actor_lr: 1e-4,
            critic_lr: 1e-2,
            alpha_lr: 1e-3,
            target_entropy: -0.5,
            initial_alpha: 1.0,
            rho: 0.005,
            soft_update: SoftUpdateRule::AsPrinted,
            reward_scale: 0.01,
            obs_scale: 1.0,
            hidden: 64,
            encoder: HGConfig::default(),
            exec: Exec::default(),
        }
    }
}

impl MasacConfig {
    pub fn validate(&self) -> Result<(), MasacError> {
        let fail = |m: &str| Err(MasacError::Config(m.to_string()));
        if self.episodes == 0 || self.batch_size == 0 || self.buffer_size == 0 || self.hidden == 0 {
            return fail("episodes, batch_size, buffer_size and hidden must be positive");
        }
        if self.batch_size > self.buffer_size {
            return fail("batch_size cannot exceed buffer_size");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return fail("rho must lie in [0, 1]");
        }
        for (name, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("alpha_lr", self.alpha_lr),
            ("initial_alpha", self.initial_alpha),
            ("reward_scale", self.reward_scale),
            ("obs_scale", self.obs_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MasacError::Config(format!("{name} must be positive and finite")));
            }
        }
        if !self.target_entropy.is_finite() {
            return fail("target_entropy must be finite");
        }
        self.encoder.validate()?;
        Ok(())
    }
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn policy_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Blends `main` into `target` in place.
pub fn soft_update(main: &ParamStore, target: &mut ParamStore, rho: f64, rule: SoftUpdateRule) -> Result<(), TensorError> {
    target.check_layout(main)?;
    let (keep, take) = match rule {
        SoftUpdateRule::AsPrinted => (rho, 1.0 - rho),
        SoftUpdateRule::Conventional => (1.0 - rho, rho),
    };
    let ids: Vec<ParamId> = main.ids().collect();
    for id in ids {
        let src = main.get(id).values();
        for (t, m) in target.get_mut(id).values_mut().iter_mut().zip(src) {
            *t = keep * *t + take * m;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Actor {
    pub store: ParamStore,
    pub net: Mlp,
    opt: Adam,
}

impl Actor {
    fn new<R: Rng>(hidden: usize, lr: f64, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let net = Mlp::new(&mut store, "pi", &[OBS_DIM, hidden, hidden, ACTIONS], rng);
        let opt = Adam::new(&store, lr);
        Self { store, net, opt }
    }

    /// Action probabilities for `rows` observations, row-major `rows x 4`.
    pub fn probs(&self, obs: &[f64], rows: usize) -> Vec<f64> {
        let mut logits = self.net.apply(&self.store, obs, rows);
        for row in logits.chunks_mut(ACTIONS) {
            softmax_in_place(row);
        }
        logits
    }

    /// Exact-expectation actor objective
    /// `mean_b sum_a pi(a) (alpha log pi(a) - q_min(a))`.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, obs: &[f64], q_min: &[f64], alpha: f64) -> Result<Var, TensorError> {
        let rows = obs.len() / OBS_DIM;
        let x = g.constant(rows, OBS_DIM, obs.to_vec())?;
        let logits = self.net.forward(g, store, x)?;
        let logp = g.log_softmax_rows(logits);
        let p = g.softmax_rows(logits);
        let q = g.constant(rows, ACTIONS, q_min.to_vec())?;
        let scaled = g.scale(logp, alpha);
        let inner = g.sub(scaled, q)?;
        let prod = g.mul(p, inner)?;
        let total = g.sum(prod);
        Ok(g.scale(total, 1.0 / rows as f64))
    }

    /// One Adam step; returns `(loss, mean entropy)` before the step.
    fn update(&mut self, obs: &[f64], q_min: &[f64], alpha: f64) -> Result<(f64, f64), TensorError> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, &self.store, obs, q_min, alpha)?;
        let rows = obs.len() / OBS_DIM;
        let entropy = self.probs(obs, rows).chunks(ACTIONS).map(policy_entropy).sum::<f64>() / rows as f64;
        self.store.zero_grad();
        g.backward_into(loss, &mut self.store)?;
        self.opt.step(&mut self.store)?;
        Ok((g.scalar(loss), entropy))
    }
}

#[derive(Clone, Debug)]
pub struct Temperature {
    pub store: ParamStore,
    log_alpha: ParamId,
    opt: Adam,
    pub target_entropy: f64,
}

impl Temperature {
    pub fn new(initial_alpha: f64, target_entropy: f64, lr: f64) -> Self {
        let mut store = ParamStore::new();
        let log_alpha = store.add("log_alpha", Tensor::scalar(initial_alpha.ln()));
        let opt = Adam::new(&store, lr);
        Self {
            store,
            log_alpha,
            opt,
            target_entropy,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.store.get(self.log_alpha).values()[0].exp()
    }

    /// `alpha * (mean_entropy - H0)` as a graph over `log_alpha`.
    pub fn loss(&self, g: &mut Graph, mean_entropy: f64) -> Var {
        let la = g.param(&self.store, self.log_alpha);
        let a = g.exp(la);
        g.scale(a, mean_entropy - self.target_entropy)
    }

    pub fn update(&mut self, mean_entropy: f64) -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, mean_entropy);
        self.store.zero_grad();
        g.backward_into(loss, &mut self.store)?;
        self.opt.step(&mut self.store)?;
        Ok(g.scalar(loss))
    }
}

/// Parameter handles of the shared encoder and per-agent critics.
#[derive(Clone, Debug)]
pub struct Critics {
    pub encoder: HypergraphEncoder,
    pub q1: Vec<Mlp>,
    pub q2: Vec<Mlp>,
}

/// Per-agent Q rows from one critic pass.
#[derive(Clone, Debug)]
pub struct CriticForward {
    /// `q1[i]` is `B x 4`.
    pub q1: Vec<Var>,
    pub q2: Vec<Var>,
    pub recon: Var,
}

#[derive(Clone, Debug)]
pub struct CriticLoss {
    /// Agent-mean of the per-agent batch MSE of Q1 against the targets.
    pub td1: Var,
    pub td2: Var,
    pub recon: Var,
    /// `(1 - beta) (td1 + td2) + beta recon`.
    pub total: Var,
    /// `min(Q1, Q2)` values per agent, `B x 4` row-major.
    pub q_min: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub recon_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug)]
pub struct Masac {
    pub config: MasacConfig,
    pub agents: usize,
    pub actors: Vec<Actor>,
    pub critics: Critics,
    pub critic_store: ParamStore,
    pub target_store: ParamStore,
    critic_opt: Adam,
    pub temperature: Temperature,
    pub updates: u64,
}

impl Masac {
    pub fn new(config: MasacConfig, agents: usize, seed: u64) -> Result<Self, MasacError> {
        config.validate()?;
        if agents == 0 {
            return Err(MasacError::Config("the network has no signalized intersections".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actors = (0..agents).map(|_| Actor::new(config.hidden, config.actor_lr, &mut rng)).collect();
        let mut store = ParamStore::new();
        let encoder = HypergraphEncoder::new(&mut store, "encoder", config.encoder, agents, OBS_DIM, &mut rng)?;
        let d = config.encoder.d_embed;
        let input = 2 * d + ACTIONS * (agents - 1);
        let mut q1 = Vec::with_capacity(agents);
        let mut q2 = Vec::with_capacity(agents);
        for i in 0..agents {
            q1.push(Mlp::new(&mut store, &format!("q1.{i}"), &[input, config.hidden, ACTIONS], &mut rng));
            q2.push(Mlp::new(&mut store, &format!("q2.{i}"), &[input, config.hidden, ACTIONS], &mut rng));
        }
        let critic_opt = Adam::new(&store, config.critic_lr);
        let temperature = Temperature::new(config.initial_alpha, config.target_entropy, config.alpha_lr);
        Ok(Self {
            agents,
            actors,
            critics: Critics { encoder, q1, q2 },
            target_store: store.clone(),
            critic_store: store,
            critic_opt,
            temperature,
            updates: 0,
            config,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.temperature.alpha()
    }

    /// Raw simulator observations as the networks see them.
    pub fn prepare(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|x| x * self.config.obs_scale).collect()
    }

    /// Per-agent action probabilities for one prepared joint observation `N x 16`.
    pub fn policies(&self, obs: &[f64]) -> Vec<Vec<f64>> {
        (0..self.agents)
            .map(|i| self.actors[i].probs(&obs[i * OBS_DIM..(i + 1) * OBS_DIM], 1))
            .collect()
    }

    /// 0-based phase index per agent.
    pub fn select_actions<R: Rng>(&self, obs: &[f64], mode: ActionMode, rng: &mut R) -> Vec<usize> {
        self.policies(obs)
            .iter()
            .map(|p| match mode {
                ActionMode::Sample => sample_categorical(p, rng),
                ActionMode::Greedy => argmax(p),
            })
            .collect()
    }

    pub fn select_phases<R: Rng>(&self, obs: &[f64], mode: ActionMode, rng: &mut R) -> Vec<Phase> {
        self.select_actions(obs, mode, rng).into_iter().map(Phase::from_index).collect()
    }

    /// Critics on `(obs_prev, obs)` with the joint `actions[b][i]` used for
    /// the other-agent conditioning.
    pub fn critic_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        obs_prev: &Tensor,
        obs: &Tensor,
        actions: &[Vec<usize>],
    ) -> Result<CriticForward, TensorError> {
        let n = self.agents;
        let b = actions.len();
        let x_prev = g.input(obs_prev);
        let x = g.input(obs);
        let enc = self.critics.encoder.encode(g, store, x, x_prev)?;
        let mut q1 = Vec::with_capacity(n);
        let mut q2 = Vec::with_capacity(n);
        for i in 0..n {
            let rows: Vec<usize> = (0..b).map(|k| k * n + i).collect();
            let node = g.gather_rows(enc.nodes, &rows)?;
            let mut parts = vec![node];
            if n > 1 {
                let width = ACTIONS * (n - 1);
                let mut onehot = vec![0.0; b * width];
                for (k, joint) in actions.iter().enumerate() {
                    for (slot, j) in (0..n).filter(|&j| j != i).enumerate() {
                        onehot[k * width + slot * ACTIONS + joint[j]] = 1.0;
                    }
                }
                parts.push(g.constant(b, width, onehot)?);
            }
            parts.push(enc.readout);
            let input = g.concat_cols(&parts)?;
            q1.push(self.critics.q1[i].forward(g, store, input)?);
            q2.push(self.critics.q2[i].forward(g, store, input)?);
        }
        Ok(CriticForward {
            q1,
            q2,
            recon: enc.recon,
        })
    }

    /// Soft TD targets `y[b][i]` with the exact expectation over next actions.
    /// Other agents are conditioned on their greedy next actions.
    pub fn td_targets(&self, batch: &Batch, alpha: f64) -> Result<Vec<Vec<f64>>, TensorError> {
        let n = self.agents;
        let b = batch.size;
        let next_probs: Vec<Vec<f64>> = self.config.exec.map_range(n, |i| {
            self.actors[i].probs(&Batch::agent_rows(&batch.obs_next, n, i), b)
        });
        let next_actions: Vec<Vec<usize>> = (0..b)
            .map(|k| (0..n).map(|i| argmax(&next_probs[i][k * ACTIONS..(k + 1) * ACTIONS])).collect())
            .collect();
        let mut g = Graph::new();
        let f = self.critic_forward(&mut g, &self.target_store, &batch.obs, &batch.obs_next, &next_actions)?;
        let gamma = self.config.gamma;
        let mut y = vec![vec![0.0; n]; b];
        for i in 0..n {
            let (q1, q2) = (g.value(f.q1[i]), g.value(f.q2[i]));
            for k in 0..b {
                let mut v = 0.0;
                for a in 0..ACTIONS {
                    let idx = k * ACTIONS + a;
                    let p = next_probs[i][idx];
                    if p > 0.0 {
                        v += p * (q1[idx].min(q2[idx]) - alpha * p.ln());
                    }
                }
                y[k][i] = batch.rewards[k][i] + gamma * v;
            }
        }
        Ok(y)
    }

    /// Mixed critic objective on the online critic store.
    pub fn critic_loss(&self, g: &mut Graph, store: &ParamStore, batch: &Batch, targets: &[Vec<f64>]) -> Result<CriticLoss, TensorError> {
        let n = self.agents;
        let b = batch.size;
        let f = self.critic_forward(g, store, &batch.obs_prev, &batch.obs, &batch.actions)?;
        let mut td = [None, None];
        let mut q_min = Vec::with_capacity(n);
        for i in 0..n {
            let mut taken = vec![0.0; b * ACTIONS];
            for k in 0..b {
                taken[k * ACTIONS + batch.actions[k][i]] = 1.0;
            }
            let mask = g.constant(b, ACTIONS, taken)?;
            let y = g.constant(b, 1, targets.iter().map(|row| row[i]).collect())?;
            for (slot, q) in [f.q1[i], f.q2[i]].into_iter().enumerate() {
                let picked = g.mul(q, mask)?;
                let picked = g.row_sum(picked);
                let err = g.mse(picked, y)?;
                td[slot] = Some(match td[slot] {
                    Some(acc) => g.add(acc, err)?,
                    None => err,
                });
            }
            q_min.push(g.value(f.q1[i]).iter().zip(g.value(f.q2[i])).map(|(a, c)| a.min(*c)).collect());
        }
        let td1 = g.scale(td[0].expect("at least one agent"), 1.0 / n as f64);
        let td2 = g.scale(td[1].expect("at least one agent"), 1.0 / n as f64);
        let beta = self.config.encoder.beta;
        let both = g.add(td1, td2)?;
        let td_part = g.scale(both, 1.0 - beta);
        let recon_part = g.scale(f.recon, beta);
        let total = g.add(td_part, recon_part)?;
        Ok(CriticLoss {
            td1,
            td2,
            recon: f.recon,
            total,
            q_min,
        })
    }

    /// Losses on `batch` without touching any parameter.
    pub fn diagnose(&self, batch: &Batch) -> Result<UpdateStats, TensorError> {
        let alpha = self.alpha();
        let y = self.td_targets(batch, alpha)?;
        let mut g = Graph::new();
        let loss = self.critic_loss(&mut g, &self.critic_store, batch, &y)?;
        let mut actor_loss = 0.0;
        let mut entropy = 0.0;
        for (i, actor) in self.actors.iter().enumerate() {
            let obs = Batch::agent_rows(&batch.obs, self.agents, i);
            let mut ga = Graph::new();
            let l = actor.loss(&mut ga, &actor.store, &obs, &loss.q_min[i], alpha)?;
            actor_loss += ga.scalar(l);
            entropy += actor.probs(&obs, batch.size).chunks(ACTIONS).map(policy_entropy).sum::<f64>() / batch.size as f64;
        }
        Ok(UpdateStats {
            critic_loss: g.scalar(loss.total),
            actor_loss: actor_loss / self.agents as f64,
            recon_loss: g.scalar(loss.recon),
            alpha,
            entropy: entropy / self.agents as f64,
        })
    }

    /// One gradient step in the order critics, actors, temperature, targets.
    /// Every loss is evaluated with the parameters from before this call.
    pub fn update(&mut self, batch: &Batch) -> Result<UpdateStats, TensorError> {
        let alpha = self.alpha();
        let y = self.td_targets(batch, alpha)?;

        let mut g = Graph::new();
        let loss = self.critic_loss(&mut g, &self.critic_store, batch, &y)?;
        self.critic_store.zero_grad();
        g.backward_into(loss.total, &mut self.critic_store)?;
        self.critic_opt.step(&mut self.critic_store)?;

        let n = self.agents;
        let q_min = &loss.q_min;
        let mut results: Vec<Result<(f64, f64), TensorError>> = vec![Ok((0.0, 0.0)); n];
        let mut work: Vec<(&mut Actor, &mut Result<(f64, f64), TensorError>)> =
            self.actors.iter_mut().zip(results.iter_mut()).collect();
        self.config.exec.for_each_mut(&mut work, |i, (actor, out)| {
            let obs = Batch::agent_rows(&batch.obs, n, i);
            **out = actor.update(&obs, &q_min[i], alpha);
        });
        let mut actor_loss = 0.0;
        let mut entropy = 0.0;
        for r in results {
            let (l, h) = r?;
            actor_loss += l;
            entropy += h;
        }
        let (actor_loss, entropy) = (actor_loss / n as f64, entropy / n as f64);

        self.temperature.update(entropy)?;
        soft_update(&self.critic_store, &mut self.target_store, self.config.rho, self.config.soft_update)?;
        self.updates += 1;
        Ok(UpdateStats {
            critic_loss: g.scalar(loss.total),
            actor_loss,
            recon_loss: g.scalar(loss.recon),
            alpha,
            entropy,
        })
    }

    fn store_names(&self) -> Vec<String> {
        (0..self.agents).map(|i| format!("agent{i}")).collect()
    }

    pub fn checkpoint_json(&self) -> String {
        let names = self.store_names();
        let mut stores: Vec<(&str, &ParamStore)> =
            names.iter().zip(&self.actors).map(|(n, a)| (n.as_str(), &a.store)).collect();
        stores.push(("critic", &self.critic_store));
        stores.push(("target", &self.target_store));
        stores.push(("temperature", &self.temperature.store));
        checkpoint::to_json(&stores)
    }

    pub fn save(&self, path: &Path) -> Result<(), MasacError> {
        std::fs::write(path, self.checkpoint_json()).map_err(|source| MasacError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_json(&mut self, json: &str) -> Result<(), MasacError> {
        let names = self.store_names();
        let mut stores: Vec<(&str, &mut ParamStore)> =
            names.iter().zip(self.actors.iter_mut()).map(|(n, a)| (n.as_str(), &mut a.store)).collect();
        stores.push(("critic", &mut self.critic_store));
        stores.push(("target", &mut self.target_store));
        stores.push(("temperature", &mut self.temperature.store));
        checkpoint::load_into(json, &mut stores).map_err(|e| MasacError::CheckpointMismatch(e.to_string()))
    }

    /// Builds a model for `agents` agents and fills it from `path`.
    pub fn load(path: &Path, config: MasacConfig, agents: usize) -> Result<Self, MasacError> {
        let json = std::fs::read_to_string(path).map_err(|source| MasacError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut model = Self::new(config, agents, 0)?;
        model.load_json(&json)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
