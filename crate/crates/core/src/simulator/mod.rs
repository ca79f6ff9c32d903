//! Deterministic point-queue traffic dynamics.
//!
//! Time advances in 1 s ticks; agents choose phases every `step_seconds`.
//! Each tick, in order:
//!
//! 1. flows spawn vehicles onto the first link of their route;
//! 2. vehicles that finished traversing a link either complete their trip
//!    (route end) or join the FIFO queue of the lane for their next movement;
//! 3. green lanes discharge one vehicle per saturation headway, capped at
//!    `floor(effective_green / headway)` per decision step, where a phase
//!    change costs `yellow_seconds` of green. Right turns always discharge.

mod metrics;

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datamodel::{Approach, DataError, FlowSpec, Movement, Phase, RoadNetwork, PHASE_COUNT};

pub use metrics::{write_step_csv, write_vehicle_csv, MetricsRecord, StepRecord, TripRecord};

/// Phase one-hot (4) plus 12 incoming-lane counts.
pub const OBS_DIM: usize = PHASE_COUNT + 12;
/// Incoming lanes per intersection (4 approaches x 3 movements).
pub const LANES_PER_AGENT: usize = 12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid phase {phase} for agent {agent}")]
    InvalidPhase { agent: usize, phase: u8 },
    #[error("expected {expected} phases, got {got}")]
    PhaseCount { expected: usize, got: usize },
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("episode not finished")]
    EpisodeNotFinished,
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub step_seconds: u32,
    pub yellow_seconds: u32,
    pub saturation_headway: u32,
    pub episode_seconds: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            step_seconds: 10,
            yellow_seconds: 3,
            saturation_headway: 2,
            episode_seconds: 3600,
        }
    }
}

impl SimConfig {
    /// Vehicles one lane may discharge in a step with the given green time.
    pub fn discharge_cap(&self, changed: bool) -> u32 {
        let green = if changed {
            self.step_seconds.saturating_sub(self.yellow_seconds)
        } else {
            self.step_seconds
        };
        green / self.saturation_headway
    }

    pub fn steps_per_episode(&self) -> usize {
        self.episode_seconds.div_ceil(self.step_seconds) as usize
    }
}

/// Per-agent observation rows, `N x OBS_DIM`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub agents: usize,
    pub values: Vec<f64>,
}

impl Observations {
    pub fn row(&self, agent: usize) -> &[f64] {
        &self.values[agent * OBS_DIM..(agent + 1) * OBS_DIM]
    }

    pub fn zeros(agents: usize) -> Self {
        Self {
            agents,
            values: vec![0.0; agents * OBS_DIM],
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observations: Observations,
    pub rewards: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct Vehicle {
    flow: usize,
    leg: usize,
    enter_time: u32,
    exit_time: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
struct SpawnCursor {
    offset: f64,
    next: u64,
}

/// Mutable episode state. Owned by one [`Simulation`].
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub clock: u32,
    pub phases: Vec<Phase>,
    pub phase_changed: Vec<bool>,
    /// FIFO of vehicle ids per `(link, movement)`, index `link * 3 + movement`.
    queues: Vec<VecDeque<u32>>,
    /// Vehicles on each link as `(arrival tick, vehicle id)`, in arrival order.
    transit: Vec<VecDeque<(u32, u32)>>,
    /// In-transit vehicles per `(link, next movement)`.
    transit_by_lane: Vec<u32>,
    vehicles: Vec<Vehicle>,
    cursors: Vec<SpawnCursor>,
    pub spawned: u64,
    pub in_transit: u64,
    pub queued: u64,
    pub completed: u64,
    pub steps: Vec<StepRecord>,
    conservation_ok: bool,
}

/// One episode: the network, resolved routes and the evolving [`SimState`].
#[derive(Clone, Debug)]
pub struct Simulation {
    net: Arc<RoadNetwork>,
    routes: Vec<Vec<usize>>,
    intervals: Vec<(f64, f64, f64)>,
    travel: Vec<u32>,
    /// For each agent, lane slot -> `(link, movement)` in observation order.
    lane_slots: Vec<[Option<(usize, Movement)>; LANES_PER_AGENT]>,
    config: SimConfig,
    state: SimState,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Spawn offsets depend on the seed and on the undirected corridor a route
/// covers, so a stream and its opposite-direction twin share an offset.
fn spawn_offsets(net: &RoadNetwork, flow: &FlowSpec, routes: &[Vec<usize>], seed: u64) -> Vec<f64> {
    let mut offsets = Vec::with_capacity(routes.len());
    for (k, route) in routes.iter().enumerate() {
        let mut nodes: Vec<usize> = route.iter().flat_map(|&l| [net.links[l].from, net.links[l].to]).collect();
        nodes.sort_unstable();
        nodes.dedup();
        let f = &flow.flows[k];
        let repeat = routes[..k]
            .iter()
            .zip(&flow.flows)
            .filter(|(r, g)| *r == route && g.interval == f.interval && g.start_time == f.start_time)
            .count();
        let mut h = splitmix(seed);
        for n in nodes {
            h = splitmix(h ^ n as u64);
        }
        h = splitmix(h ^ f.interval.to_bits());
        h = splitmix(h ^ f.start_time.to_bits());
        h = splitmix(h ^ repeat as u64);
        let u: f64 = ChaCha8Rng::seed_from_u64(h).gen();
        offsets.push(u * f.interval);
    }
    offsets
}

impl Simulation {
    pub fn reset(
        net: Arc<RoadNetwork>,
        flow: &FlowSpec,
        seed: u64,
        config: SimConfig,
    ) -> Result<(Self, Observations), SimError> {
        let routes = flow.resolve(&net)?;
        let offsets = spawn_offsets(&net, flow, &routes, seed);
        let n_links = net.links.len();
        let agents = net.agent_count();
        let lane_slots = (0..agents)
            .map(|a| {
                let node = net.agent(a);
                let mut slots = [None; LANES_PER_AGENT];
                for approach in Approach::ALL {
                    if let Some(link) = node.approaches[approach.index()] {
                        for m in Movement::ALL {
                            slots[approach.index() * 3 + m.index()] = Some((link, m));
                        }
                    }
                }
                slots
            })
            .collect();
        let state = SimState {
            clock: 0,
            phases: vec![Phase::ALL[0]; agents],
            phase_changed: vec![false; agents],
            queues: vec![VecDeque::new(); n_links * 3],
            transit: vec![VecDeque::new(); n_links],
            transit_by_lane: vec![0; n_links * 3],
            vehicles: Vec::new(),
            cursors: offsets.into_iter().map(|offset| SpawnCursor { offset, next: 0 }).collect(),
            spawned: 0,
            in_transit: 0,
            queued: 0,
            completed: 0,
            steps: Vec::new(),
            conservation_ok: true,
        };
        let sim = Self {
            travel: net.links.iter().map(|l| l.travel_seconds()).collect(),
            intervals: flow.flows.iter().map(|f| (f.interval, f.start_time, f.end_time)).collect(),
            routes,
            lane_slots,
            config,
            state,
            net,
        };
        let obs = sim.observations();
        Ok((sim, obs))
    }

    pub fn network(&self) -> &Arc<RoadNetwork> {
        &self.net
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn agent_count(&self) -> usize {
        self.net.agent_count()
    }

    pub fn done(&self) -> bool {
        self.state.clock >= self.config.episode_seconds
    }

    /// Whether `spawned = in_transit + queued + completed` held after every tick.
    pub fn conservation_held(&self) -> bool {
        self.state.conservation_ok
    }

    pub fn lane_queue(&self, link: usize, movement: Movement) -> usize {
        self.state.queues[link * 3 + movement.index()].len()
    }

    /// Queued vehicles over all lanes of `link`.
    pub fn link_queue(&self, link: usize) -> usize {
        (0..3).map(|m| self.state.queues[link * 3 + m].len()).sum()
    }

    /// Queue lengths of the agent's 12 incoming lanes, observation order.
    pub fn agent_queues(&self, agent: usize) -> [usize; LANES_PER_AGENT] {
        let mut q = [0; LANES_PER_AGENT];
        for (slot, entry) in self.lane_slots[agent].iter().enumerate() {
            if let Some((link, m)) = entry {
                q[slot] = self.lane_queue(*link, *m);
            }
        }
        q
    }

    /// Test hook: sets the queue of an incoming lane to `count` placeholder
    /// vehicles. Breaks conservation bookkeeping; use only on scratch states.
    pub fn set_lane_queue(&mut self, link: usize, movement: Movement, count: usize) {
        let q = &mut self.state.queues[link * 3 + movement.index()];
        self.state.queued = self.state.queued - q.len() as u64 + count as u64;
        q.clear();
        q.extend(std::iter::repeat(u32::MAX).take(count));
    }

    pub fn total_queue(&self) -> u64 {
        self.state.queued
    }

    pub fn observations(&self) -> Observations {
        let n = self.agent_count();
        let mut values = vec![0.0; n * OBS_DIM];
        for a in 0..n {
            let row = &mut values[a * OBS_DIM..(a + 1) * OBS_DIM];
            row[self.state.phases[a].index()] = 1.0;
            for (slot, entry) in self.lane_slots[a].iter().enumerate() {
                if let Some((link, m)) = entry {
                    let idx = link * 3 + m.index();
                    let count = self.state.queues[idx].len() as u32 + self.state.transit_by_lane[idx];
                    row[PHASE_COUNT + slot] = count as f64;
                }
            }
        }
        Observations { agents: n, values }
    }

    /// Reward: minus the queued vehicles on the agent's lanes.
    pub fn reward(&self, agent: usize) -> f64 {
        -(self.agent_queues(agent).iter().sum::<usize>() as f64)
    }

    pub fn rewards(&self) -> Vec<f64> {
        (0..self.agent_count()).map(|a| self.reward(a)).collect()
    }

    /// Advances one decision step with the given phase per agent.
    pub fn step(&mut self, phases: &[Phase]) -> Result<StepOutcome, SimError> {
        let n = self.agent_count();
        if phases.len() != n {
            return Err(SimError::PhaseCount {
                expected: n,
                got: phases.len(),
            });
        }
        if self.done() {
            return Err(SimError::EpisodeFinished);
        }
        for (a, &p) in phases.iter().enumerate() {
            self.state.phase_changed[a] = p != self.state.phases[a];
            self.state.phases[a] = p;
        }
        let mut discharged = vec![0u32; self.net.links.len() * 3];
        let step_start = self.state.clock;
        let end = (step_start + self.config.step_seconds).min(self.config.episode_seconds);
        for t in step_start..end {
            self.spawn(t);
            self.arrive(t);
            self.discharge(t, t - step_start, &mut discharged);
            let s = &self.state;
            if s.spawned != s.in_transit + s.queued + s.completed {
                self.state.conservation_ok = false;
            }
        }
        self.state.clock = end;
        let record = StepRecord {
            step: self.state.steps.len() + 1,
            clock: end,
            total_queue: self.state.queued,
            throughput: self.state.completed,
        };
        self.state.steps.push(record);
        Ok(StepOutcome {
            observations: self.observations(),
            rewards: self.rewards(),
            done: self.done(),
        })
    }

    /// Parses raw phase ids, rejecting anything outside 1..=4.
    pub fn step_ids(&mut self, ids: &[u8]) -> Result<StepOutcome, SimError> {
        let phases = ids
            .iter()
            .enumerate()
            .map(|(agent, &id)| Phase::new(id).ok_or(SimError::InvalidPhase { agent, phase: id }))
            .collect::<Result<Vec<_>, _>>()?;
        self.step(&phases)
    }

    fn spawn(&mut self, t: u32) {
        for k in 0..self.routes.len() {
            let (interval, start, stop) = self.intervals[k];
            loop {
                let cursor = &self.state.cursors[k];
                let at = start + cursor.offset + cursor.next as f64 * interval;
                if at >= stop || at.floor() > t as f64 {
                    break;
                }
                self.state.cursors[k].next += 1;
                let id = self.state.vehicles.len() as u32;
                self.state.vehicles.push(Vehicle {
                    flow: k,
                    leg: 0,
                    enter_time: t,
                    exit_time: None,
                });
                self.state.spawned += 1;
                self.enter_link(id, t);
            }
        }
    }

    fn next_movement(&self, vid: u32) -> Option<Movement> {
        let v = &self.state.vehicles[vid as usize];
        let route = &self.routes[v.flow];
        let link = &self.net.links[route[v.leg]];
        let next = *route.get(v.leg + 1)?;
        let node = &self.net.intersections[link.to];
        if !node.signalized {
            return None;
        }
        let from = Approach::toward(node.position, self.net.intersections[link.from].position)?;
        let to = Approach::toward(node.position, self.net.intersections[self.net.links[next].to].position)?;
        Movement::between(from, to)
    }

    fn enter_link(&mut self, vid: u32, t: u32) {
        let v = &self.state.vehicles[vid as usize];
        let link = self.routes[v.flow][v.leg];
        self.state.transit[link].push_back((t + self.travel[link], vid));
        self.state.in_transit += 1;
        if let Some(m) = self.next_movement(vid) {
            self.state.transit_by_lane[link * 3 + m.index()] += 1;
        }
    }

    fn arrive(&mut self, t: u32) {
        for link in 0..self.state.transit.len() {
            while let Some(&(at, vid)) = self.state.transit[link].front() {
                if at > t {
                    break;
                }
                self.state.transit[link].pop_front();
                self.state.in_transit -= 1;
                let movement = self.next_movement(vid);
                if let Some(m) = movement {
                    self.state.transit_by_lane[link * 3 + m.index()] -= 1;
                }
                let v = &self.state.vehicles[vid as usize];
                let last = v.leg + 1 == self.routes[v.flow].len();
                match (last, movement) {
                    (true, _) => {
                        let v = &mut self.state.vehicles[vid as usize];
                        v.exit_time = Some(t);
                        self.state.completed += 1;
                    }
                    (false, Some(m)) => {
                        self.state.queues[link * 3 + m.index()].push_back(vid);
                        self.state.queued += 1;
                    }
                    (false, None) => {
                        // Unsignalized junction mid-route: pass straight through.
                        self.state.vehicles[vid as usize].leg += 1;
                        self.enter_link(vid, t);
                    }
                }
            }
        }
    }

    fn discharge(&mut self, t: u32, offset: u32, discharged: &mut [u32]) {
        let headway = self.config.saturation_headway.max(1);
        for a in 0..self.agent_count() {
            let phase = self.state.phases[a];
            let changed = self.state.phase_changed[a];
            for slot in 0..LANES_PER_AGENT {
                let Some((link, m)) = self.lane_slots[a][slot] else { continue };
                let approach = Approach::from_index(slot / 3);
                if !phase.enables(approach, m) {
                    continue;
                }
                let right = m == Movement::Right;
                let green_start = if changed && !right { self.config.yellow_seconds } else { 0 };
                let cap = self.config.discharge_cap(changed && !right);
                let idx = link * 3 + m.index();
                if offset < green_start || (offset - green_start) % headway != 0 || discharged[idx] >= cap {
                    continue;
                }
                let Some(vid) = self.state.queues[idx].pop_front() else { continue };
                discharged[idx] += 1;
                self.state.queued -= 1;
                if vid == u32::MAX {
                    // Placeholder inserted by `set_lane_queue`.
                    continue;
                }
                self.state.vehicles[vid as usize].leg += 1;
                self.enter_link(vid, t);
            }
        }
    }

    /// Final metrics. Vehicles still in the network are charged up to the
    /// episode end.
    pub fn metrics(&self) -> Result<MetricsRecord, SimError> {
        if !self.done() {
            return Err(SimError::EpisodeNotFinished);
        }
        Ok(self.metrics_at_end(self.state.clock))
    }

    /// Metrics as if the episode ended now.
    pub fn metrics_snapshot(&self) -> MetricsRecord {
        self.metrics_at_end(self.state.clock)
    }

    fn metrics_at_end(&self, end: u32) -> MetricsRecord {
        let trips: Vec<TripRecord> = self
            .state
            .vehicles
            .iter()
            .enumerate()
            .map(|(id, v)| TripRecord {
                vehicle: id,
                flow: v.flow,
                enter_time: v.enter_time,
                exit_time: v.exit_time.unwrap_or(end),
                completed: v.exit_time.is_some(),
            })
            .collect();
        MetricsRecord::from_trips(trips, self.state.steps.clone())
    }
}

/// Chooses one phase per agent at every decision step.
pub trait Controller {
    fn act(&mut self, sim: &Simulation) -> Vec<Phase>;
}

impl<F: FnMut(&Simulation) -> Vec<Phase>> Controller for F {
    fn act(&mut self, sim: &Simulation) -> Vec<Phase> {
        self(sim)
    }
}

/// Runs one full episode under `controller`.
pub fn run_episode<C: Controller + ?Sized>(
    net: Arc<RoadNetwork>,
    flow: &FlowSpec,
    seed: u64,
    config: SimConfig,
    controller: &mut C,
) -> Result<MetricsRecord, SimError> {
    let (mut sim, _) = Simulation::reset(net, flow, seed, config)?;
    while !sim.done() {
        let phases = controller.act(&sim);
        sim.step(&phases)?;
    }
    sim.metrics()
}
