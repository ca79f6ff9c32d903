//! Fixed-time and MaxPressure controllers.

use crate::datamodel::{Approach, DataError, Movement, Phase, PHASE_COUNT};
use crate::simulator::{Controller, Simulation, LANES_PER_AGENT};

/// The same cyclic plan at every intersection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedTimePlan {
    pub order: [Phase; PHASE_COUNT],
    pub green_seconds: u32,
}

impl Default for FixedTimePlan {
    fn default() -> Self {
        Self {
            order: Phase::ALL,
            green_seconds: 30,
        }
    }
}

impl FixedTimePlan {
    /// Fails unless `green_seconds` is a positive multiple of `step_seconds`.
    pub fn new(order: [Phase; PHASE_COUNT], green_seconds: u32, step_seconds: u32) -> Result<Self, DataError> {
        if green_seconds == 0 || step_seconds == 0 || green_seconds % step_seconds != 0 {
            return Err(DataError::Validation(format!(
                "green time {green_seconds} s is not a positive multiple of the {step_seconds} s step"
            )));
        }
        Ok(Self { order, green_seconds })
    }

    pub fn cycle_seconds(&self) -> u32 {
        self.green_seconds * PHASE_COUNT as u32
    }
}

pub fn fixed_time_action(clock: u32, plan: &FixedTimePlan) -> Phase {
    let slot = (clock % plan.cycle_seconds()) / plan.green_seconds;
    plan.order[slot as usize]
}

/// Upstream lane queue and downstream link queue per incoming-lane slot,
/// in observation order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PressureView {
    pub upstream: [usize; LANES_PER_AGENT],
    pub downstream: [usize; LANES_PER_AGENT],
}

impl PressureView {
    pub fn from_sim(sim: &Simulation, agent: usize) -> Self {
        let node = sim.network().agent(agent);
        let mut view = Self {
            upstream: sim.agent_queues(agent),
            ..Self::default()
        };
        for approach in Approach::ALL {
            for m in Movement::ALL {
                if let Some(out) = node.outgoing_for(approach, m) {
                    view.downstream[approach.index() * 3 + m.index()] = sim.link_queue(out);
                }
            }
        }
        view
    }

    pub fn pressure(&self, approach: Approach, movement: Movement) -> i64 {
        let slot = approach.index() * 3 + movement.index();
        self.upstream[slot] as i64 - self.downstream[slot] as i64
    }

    /// Sum over the phase's through/left movements. Right turns run under
    /// every phase and would add the same term to each.
    pub fn phase_pressure(&self, phase: Phase) -> i64 {
        phase.movements().iter().map(|&(a, m)| self.pressure(a, m)).sum()
    }
}

/// Highest-pressure phase; ties go to the lowest phase id.
pub fn max_pressure_phase(view: &PressureView) -> Phase {
    let mut best = Phase::ALL[0];
    let mut best_p = view.phase_pressure(best);
    for &phase in &Phase::ALL[1..] {
        let p = view.phase_pressure(phase);
        if p > best_p {
            best = phase;
            best_p = p;
        }
    }
    best
}

pub fn max_pressure_action(sim: &Simulation, agent: usize) -> Phase {
    max_pressure_phase(&PressureView::from_sim(sim, agent))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FixedTime(pub FixedTimePlan);

impl Controller for FixedTime {
    fn act(&mut self, sim: &Simulation) -> Vec<Phase> {
        vec![fixed_time_action(sim.state().clock, &self.0); sim.agent_count()]
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MaxPressure;

impl Controller for MaxPressure {
    fn act(&mut self, sim: &Simulation) -> Vec<Phase> {
        (0..sim.agent_count()).map(|a| max_pressure_action(sim, a)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_grid, FlowMode};
    use crate::simulator::{run_episode, SimConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn fixed_time_examples() {
        let plan = FixedTimePlan::default();
        let id = |c| fixed_time_action(c, &plan).id();
        assert_eq!(id(0), 1);
        assert_eq!(id(70), 3);
        assert_eq!(id(120), 1);
        let table: Vec<u8> = (0..12).map(|k| id(k * 10)).collect();
        assert_eq!(table, [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]);
        for c in 0..1000 {
            assert_eq!(id(c), id(c + plan.cycle_seconds()));
        }
    }

    #[test]
    fn plan_validation() {
        assert!(FixedTimePlan::new(Phase::ALL, 25, 10).is_err());
        assert!(FixedTimePlan::new(Phase::ALL, 0, 10).is_err());
        assert_eq!(FixedTimePlan::new(Phase::ALL, 20, 10).unwrap().cycle_seconds(), 80);
    }

    #[test]
    fn max_pressure_examples() {
        assert_eq!(max_pressure_phase(&PressureView::default()).id(), 1);
        let mut view = PressureView::default();
        view.upstream[Approach::E.index() * 3] = 3;
        view.upstream[Approach::W.index() * 3] = 2;
        assert_eq!(max_pressure_phase(&view).id(), 1);
        view.upstream[Approach::N.index() * 3 + 1] = 9;
        assert_eq!(max_pressure_phase(&view).id(), 4);
    }

    fn brute_force(view: &PressureView) -> Phase {
        // Independent evaluation straight from the movement lists.
        let scores: Vec<i64> = Phase::ALL
            .iter()
            .map(|p| {
                let mut s = 0i64;
                for a in Approach::ALL {
                    for m in [Movement::Through, Movement::Left] {
                        if p.enables(a, m) {
                            let slot = a.index() * 3 + m.index();
                            s += view.upstream[slot] as i64 - view.downstream[slot] as i64;
                        }
                    }
                }
                s
            })
            .collect();
        let best = *scores.iter().max().unwrap();
        Phase::ALL[scores.iter().position(|&s| s == best).unwrap()]
    }

    #[test]
    fn max_pressure_matches_brute_force_and_is_scale_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let mut view = PressureView::default();
            for k in 0..LANES_PER_AGENT {
                view.upstream[k] = rng.gen_range(0..6);
                view.downstream[k] = rng.gen_range(0..6);
            }
            let chosen = max_pressure_phase(&view);
            assert_eq!(chosen, brute_force(&view));
            let mut scaled = view;
            scaled.upstream.iter_mut().chain(scaled.downstream.iter_mut()).for_each(|q| *q *= 3);
            assert_eq!(max_pressure_phase(&scaled), chosen);
        }
    }

    #[test]
    fn pressure_view_reads_downstream_link() {
        let (net, flow) = generate_grid(1, 2, FlowMode::Bidirectional, 0.0, 0.0).unwrap();
        let net = Arc::new(net);
        let (mut sim, _) = Simulation::reset(net.clone(), &flow, 0, SimConfig::default()).unwrap();
        // Agent 0's east exit is agent 1's west approach.
        let between = net.agent(0).exits[Approach::E.index()].unwrap();
        assert_eq!(net.agent(1).approaches[Approach::W.index()], Some(between));
        sim.set_lane_queue(between, Movement::Left, 4);
        let west_in = net.agent(0).approaches[Approach::W.index()].unwrap();
        sim.set_lane_queue(west_in, Movement::Through, 3);
        let view = PressureView::from_sim(&sim, 0);
        assert_eq!(view.pressure(Approach::W, Movement::Through), -1);
        // The boundary exit on the west side carries no queue.
        assert_eq!(view.pressure(Approach::E, Movement::Through), 0);
    }

    #[test]
    fn max_pressure_beats_fixed_time_on_a_grid() {
        let (net, flow) = generate_grid(3, 3, FlowMode::Bidirectional, 300.0, 90.0).unwrap();
        let net = Arc::new(net);
        let cfg = SimConfig::default();
        let fixed = run_episode(net.clone(), &flow, 1, cfg, &mut FixedTime::default()).unwrap();
        let mp = run_episode(net, &flow, 1, cfg, &mut MaxPressure).unwrap();
        assert!(mp.att < fixed.att, "maxpressure {} vs fixed {}", mp.att, fixed.att);
    }
}
