//! Gradient and invariant suites shared by the test harness and the
//! `selfcheck` command.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{fixed_time_action, max_pressure_phase, FixedTimePlan, PressureView};
use crate::datamodel::{generate_grid, Approach, FlowMode, Movement, Phase};
use crate::diffcore::{analytic_gradient, compare, numeric_gradient, Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::hypergraph::HGConfig;
use crate::masac::{Batch, Masac, MasacConfig, Transition, ACTIONS};
use crate::par::Exec;
use crate::simulator::{SimConfig, Simulation, LANES_PER_AGENT, OBS_DIM};

pub const GRADIENT_TOLERANCE: f64 = 1e-3;
pub const EPSILON: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    /// Worst relative gradient error, or the number of violations for
    /// invariant suites.
    pub max_error: f64,
    pub checked: usize,
    pub detail: String,
}

impl SuiteResult {
    fn gradient(name: &str, max_error: f64, checked: usize, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: max_error < GRADIENT_TOLERANCE && checked > 0,
            max_error,
            checked,
            detail,
        }
    }

    fn invariant(name: &str, violations: usize, checked: usize, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: violations == 0 && checked > 0,
            max_error: violations as f64,
            checked,
            detail,
        }
    }
}

/// Deliberate faults for exercising the failure path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Adds 0.01 to the first analytic gradient coordinate.
    CorruptGradient,
}

fn checked_gradient<F>(store: &ParamStore, f: F, fault: Fault) -> Result<(f64, usize, String), TensorError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, TensorError> + Sync + Send,
{
    let params: Vec<ParamId> = store.ids().collect();
    let mut analytic = analytic_gradient(store, &params, &f)?;
    if fault == Fault::CorruptGradient {
        analytic[0] += 0.01;
    }
    let numeric = numeric_gradient(store, &params, &f, EPSILON, Exec::default())?;
    let report = compare(store, &params, &analytic, &numeric);
    let worst = report.worst.map(|c| format!("{}[{}]", c.param, c.index)).unwrap_or_default();
    Ok((report.max_rel_error, report.checked, format!("worst {worst}, {} excluded", report.excluded.len())))
}

/// Every op on `cases` random 3x3 operand pairs.
pub fn gradcheck_ops(cases: usize, seed: u64, fault: Fault) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for case in 0..cases {
        let mut store = ParamStore::new();
        let mut operand = || Tensor::matrix(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("3x3");
        let ia = store.add("a", operand());
        let ib = store.add("b", operand());
        for (name, op) in op_suite() {
            let fault = if case == 0 { fault } else { Fault::None };
            let out = checked_gradient(
                &store,
                |g, s| {
                    let a = g.param(s, ia);
                    let b = g.param(s, ib);
                    op(g, a, b)
                },
                fault,
            );
            match out {
                Ok((err, n, _)) => {
                    checked += n;
                    if err > worst.0 || err.is_nan() {
                        worst = (if err.is_nan() { f64::INFINITY } else { err }, name.to_string());
                    }
                }
                Err(e) => return SuiteResult::gradient("ops", f64::INFINITY, checked, format!("{name}: {e}")),
            }
        }
    }
    SuiteResult::gradient("ops", worst.0, checked, format!("worst op {}", worst.1))
}

/// Two-agent toy critic: encoder plus both critics through the full mixed loss.
pub fn toy_critic() -> (Masac, Batch, Vec<Vec<f64>>) {
    let config = MasacConfig {
        hidden: 8,
        batch_size: 3,
        buffer_size: 3,
        encoder: HGConfig {
            d_embed: 8,
            beta: 0.3,
            ..HGConfig::default()
        },
        exec: Exec::Sequential,
        ..MasacConfig::default()
    };
    let model = Masac::new(config, 2, 21).expect("valid toy config");
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut obs = || (0..2 * OBS_DIM).map(|_| rng.gen_range(0..6) as f64).collect::<Vec<f64>>();
    let items: Vec<Transition> = (0..3)
        .map(|k| Transition {
            obs_prev: obs(),
            obs: obs(),
            actions: vec![k % ACTIONS, (k + 2) % ACTIONS],
            rewards: vec![-0.1 * k as f64, -0.05],
            obs_next: obs(),
        })
        .collect();
    let batch = Batch::from_transitions(items.iter());
    let targets = model.td_targets(&batch, 0.5).expect("toy forward");
    (model, batch, targets)
}

/// Hypergraph encoder and critic loss end to end.
pub fn gradcheck_composite(fault: Fault) -> SuiteResult {
    let (model, batch, targets) = toy_critic();
    match checked_gradient(&model.critic_store, |g, s| Ok(model.critic_loss(g, s, &batch, &targets)?.total), fault) {
        Ok((err, n, detail)) => SuiteResult::gradient("encode+critic_loss", err, n, detail),
        Err(e) => SuiteResult::gradient("encode+critic_loss", f64::INFINITY, 0, e.to_string()),
    }
}

/// Random-action 3x3 episodes: exact conservation at every sub-tick and
/// identical metrics when each episode is replayed with its seed.
pub fn conservation_suite(episodes: usize, seed: u64, config: SimConfig) -> SuiteResult {
    let (net, flow) = generate_grid(3, 3, FlowMode::Bidirectional, 300.0, 90.0).expect("3x3 grid");
    let net = Arc::new(net);
    let run = |episode: usize| {
        let env_seed = seed.wrapping_add(episode as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(env_seed);
        let (mut sim, _) = Simulation::reset(net.clone(), &flow, env_seed, config).expect("valid scenario");
        while !sim.done() {
            let phases: Vec<Phase> = (0..sim.agent_count()).map(|_| Phase::from_index(rng.gen_range(0..4))).collect();
            sim.step(&phases).expect("valid phases");
        }
        (sim.conservation_held(), sim.metrics().expect("finished"))
    };
    let outcomes = Exec::default().map_range(episodes, |e| {
        let (held, first) = run(e);
        let (held_again, second) = run(e);
        (held && held_again, first == second)
    });
    let broken = outcomes.iter().filter(|o| !o.0).count();
    let diverged = outcomes.iter().filter(|o| !o.1).count();
    SuiteResult::invariant(
        "conservation+replay",
        broken + diverged,
        episodes,
        format!("{broken} conservation failures, {diverged} replay mismatches"),
    )
}

/// Fixed-time table over a full cycle and MaxPressure against brute force.
pub fn baseline_suite(views: usize, seed: u64) -> SuiteResult {
    let plan = FixedTimePlan::default();
    let mut violations = 0;
    let mut checked = 0;
    for clock in (0..plan.cycle_seconds()).step_by(10) {
        let expect = (clock / 30) as u8 + 1;
        violations += usize::from(fixed_time_action(clock, &plan).id() != expect);
        checked += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..views {
        let mut view = PressureView::default();
        for k in 0..LANES_PER_AGENT {
            view.upstream[k] = rng.gen_range(0..8);
            view.downstream[k] = rng.gen_range(0..8);
        }
        let mut best = (i64::MIN, 0u8);
        for phase in Phase::ALL {
            let mut score = 0;
            for a in Approach::ALL {
                for m in [Movement::Through, Movement::Left] {
                    if phase.enables(a, m) {
                        let slot = a.index() * 3 + m.index();
                        score += view.upstream[slot] as i64 - view.downstream[slot] as i64;
                    }
                }
            }
            if score > best.0 {
                best = (score, phase.id());
            }
        }
        violations += usize::from(max_pressure_phase(&view).id() != best.1);
        checked += 1;
    }
    SuiteResult::invariant("baselines", violations, checked, format!("{checked} decisions compared"))
}

/// The full report used by `hgsignal selfcheck`.
pub fn run_all(fault: Fault) -> Vec<SuiteResult> {
    vec![
        gradcheck_ops(5, 1, fault),
        gradcheck_composite(Fault::None),
        conservation_suite(20, 1, SimConfig::default()),
        baseline_suite(1000, 7),
    ]
}

pub type OpFn = fn(&mut Graph, Var, Var) -> Result<Var, TensorError>;

/// Every differentiable op reduced to a scalar through a fixed smooth
/// readout so that each output element contributes distinctly.
pub fn op_suite() -> Vec<(&'static str, OpFn)> {
    fn readout(g: &mut Graph, v: Var) -> Result<Var, TensorError> {
        let (r, c) = g.dims(v);
        let w: Vec<f64> = (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect();
        let wv = g.constant(r, c, w)?;
        let p = g.mul(v, wv)?;
        Ok(g.sum(p))
    }
    vec![
        ("matmul", |g, a, b| {
            let bt = g.slice_cols(b, 0, 2)?;
            let sq = g.gather_rows(bt, &[0, 1, 2])?;
            let m = g.matmul(a, sq)?;
            readout(g, m)
        }),
        ("add", |g, a, b| {
            let s = g.add(a, b)?;
            readout(g, s)
        }),
        ("sub", |g, a, b| {
            let s = g.sub(a, b)?;
            readout(g, s)
        }),
        ("mul", |g, a, b| {
            let s = g.mul(a, b)?;
            readout(g, s)
        }),
        ("scale", |g, a, _| {
            let s = g.scale(a, -1.7);
            readout(g, s)
        }),
        ("concat", |g, a, b| {
            let s = g.concat_cols(&[a, b])?;
            readout(g, s)
        }),
        ("relu", |g, a, _| {
            let s = g.relu(a);
            readout(g, s)
        }),
        ("sigmoid", |g, a, _| {
            let s = g.sigmoid(a);
            readout(g, s)
        }),
        ("softmax", |g, a, _| {
            let s = g.softmax_rows(a);
            readout(g, s)
        }),
        ("log_softmax", |g, a, _| {
            let s = g.log_softmax_rows(a);
            readout(g, s)
        }),
        ("log", |g, a, _| {
            let sq = g.mul(a, a)?;
            let pos = g.add_scalar(sq, 0.5);
            let s = g.log(pos);
            readout(g, s)
        }),
        ("exp", |g, a, _| {
            let s = g.exp(a);
            readout(g, s)
        }),
        ("mean", |g, a, _| {
            let m = g.mean(a);
            let e = g.exp(m);
            Ok(g.sum(e))
        }),
        ("mse", |g, a, b| g.mse(a, b)),
        ("l1_norm", |g, a, _| Ok(g.l1_norm(a))),
        ("l2_norm", |g, a, _| Ok(g.l2_norm(a))),
        ("row_l2", |g, a, _| {
            let s = g.row_l2(a);
            readout(g, s)
        }),
        ("row_dot", |g, a, b| {
            let s = g.row_dot(a, b)?;
            readout(g, s)
        }),
        ("row_sum_div", |g, a, b| {
            let sq = g.mul(b, b)?;
            let rs = g.row_sum(sq);
            let d = g.add_scalar(rs, 1.0);
            let s = g.div_col(a, d)?;
            readout(g, s)
        }),
        ("mul_col", |g, a, b| {
            let col = g.slice_cols(b, 1, 1)?;
            let s = g.mul_col(a, col)?;
            readout(g, s)
        }),
        ("add_row", |g, a, b| {
            let row = g.gather_rows(b, &[2])?;
            let s = g.add_row(a, row)?;
            readout(g, s)
        }),
        ("pick_cols", |g, a, _| {
            let s = g.pick_cols(a, &[2, 0, 1])?;
            readout(g, s)
        }),
        ("min", |g, a, b| {
            let s = g.min(a, b)?;
            readout(g, s)
        }),
        ("block_matmul", |g, a, b| {
            let l = g.slice_cols(a, 0, 3)?;
            let s = g.block_matmul(l, b)?;
            readout(g, s)
        }),
        ("block_mean_repeat", |g, a, _| {
            let m = g.block_mean(a, 3)?;
            let r = g.repeat_blocks(m, 2);
            let sq = g.mul(r, r)?;
            readout(g, sq)
        }),
    ]
}
