use super::*;
use crate::datamodel::{generate_grid, FlowMode};
use crate::diffcore::gradcheck_params;
use crate::simulator::SimConfig;
use std::sync::Arc;

fn small_config(beta: f64) -> MasacConfig {
    MasacConfig {
        hidden: 8,
        batch_size: 4,
        buffer_size: 8,
        encoder: HGConfig {
            d_embed: 8,
            heads: 2,
            beta,
            ..HGConfig::default()
        },
        exec: Exec::Sequential,
        ..MasacConfig::default()
    }
}

fn random_batch(agents: usize, size: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs = |rng: &mut ChaCha8Rng| (0..agents * OBS_DIM).map(|_| rng.gen_range(0..6) as f64).collect::<Vec<f64>>();
    let items: Vec<Transition> = (0..size)
        .map(|_| Transition {
            obs_prev: obs(&mut rng),
            obs: obs(&mut rng),
            actions: (0..agents).map(|_| rng.gen_range(0..ACTIONS)).collect(),
            rewards: (0..agents).map(|_| -rng.gen_range(0.0..0.3)).collect(),
            obs_next: obs(&mut rng),
        })
        .collect();
    Batch::from_transitions(items.iter())
}

fn one_sample(batch: &Batch, k: usize) -> Batch {
    let n = batch.agents;
    let slice = |t: &Tensor| t.values()[k * n * OBS_DIM..(k + 1) * n * OBS_DIM].to_vec();
    let t = Transition {
        obs_prev: slice(&batch.obs_prev),
        obs: slice(&batch.obs),
        actions: batch.actions[k].clone(),
        rewards: batch.rewards[k].clone(),
        obs_next: slice(&batch.obs_next),
    };
    Batch::from_transitions([t].iter())
}

#[test]
fn helpers() {
    assert!((policy_entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
    assert_eq!(policy_entropy(&[1.0, 0.0, 0.0, 0.0]), 0.0);
    assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    assert!(small_config(0.001).validate().is_ok());
    let bad = MasacConfig {
        gamma: 1.5,
        ..MasacConfig::default()
    };
    assert!(matches!(bad.validate(), Err(MasacError::Config(_))));
    assert!(matches!(Masac::new(MasacConfig::default(), 0, 1), Err(MasacError::Config(_))));
}

#[test]
fn sampling_frequencies_match_policy() {
    let p = [0.1, 0.2, 0.3, 0.4];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 40_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[sample_categorical(&p, &mut rng)] += 1;
    }
    for (c, q) in counts.iter().zip(p) {
        let sigma = (draws as f64 * q * (1.0 - q)).sqrt();
        assert!((*c as f64 - draws as f64 * q).abs() < 5.0 * sigma, "{counts:?}");
    }
}

#[test]
fn greedy_selection_takes_argmax_of_each_policy() {
    let model = Masac::new(small_config(0.001), 3, 5).unwrap();
    let obs: Vec<f64> = (0..3 * OBS_DIM).map(|i| (i % 5) as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let chosen = model.select_actions(&obs, ActionMode::Greedy, &mut rng);
    let policies = model.policies(&obs);
    for (a, p) in chosen.iter().zip(&policies) {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(*a, argmax(p));
    }
}

#[test]
fn td_targets_match_enumeration() {
    let model = Masac::new(small_config(0.001), 3, 11).unwrap();
    let batch = random_batch(3, 5, 2);
    let alpha = 0.7;
    let y = model.td_targets(&batch, alpha).unwrap();
    for k in 0..batch.size {
        // One sample at a time, with the critic queried separately for each
        // own action and other agents fixed at their greedy next actions.
        let single = one_sample(&batch, k);
        let next: Vec<usize> = (0..3)
            .map(|i| argmax(&model.actors[i].probs(&Batch::agent_rows(&single.obs_next, 3, i), 1)))
            .collect();
        for i in 0..3 {
            let pi = model.actors[i].probs(&Batch::agent_rows(&single.obs_next, 3, i), 1);
            let mut expect = 0.0;
            for a in 0..ACTIONS {
                let mut joint = next.clone();
                joint[i] = a;
                let mut g = Graph::new();
                let f = model
                    .critic_forward(&mut g, &model.target_store, &single.obs, &single.obs_next, &[joint])
                    .unwrap();
                let q = g.value(f.q1[i])[a].min(g.value(f.q2[i])[a]);
                expect += pi[a] * (q - alpha * pi[a].ln());
            }
            let expect = batch.rewards[k][i] + 0.98 * expect;
            assert!((y[k][i] - expect).abs() < 1e-10, "sample {k} agent {i}: {} vs {expect}", y[k][i]);
        }
    }
}

#[test]
fn critic_ignores_own_action_in_conditioning() {
    let model = Masac::new(small_config(0.001), 2, 4).unwrap();
    let batch = random_batch(2, 1, 9);
    let q_for = |joint: Vec<usize>| {
        let mut g = Graph::new();
        let f = model.critic_forward(&mut g, &model.critic_store, &batch.obs_prev, &batch.obs, &[joint]).unwrap();
        (g.value(f.q1[0]).to_vec(), g.value(f.q1[1]).to_vec())
    };
    let (a0, a1) = q_for(vec![0, 2]);
    let (b0, b1) = q_for(vec![3, 2]);
    // Agent 0's critic only sees agent 1's action, and vice versa.
    assert_eq!(a0, b0);
    assert_ne!(a1, b1);
}

#[test]
fn gamma_zero_targets_are_rewards() {
    let config = MasacConfig {
        gamma: 0.0,
        ..small_config(0.001)
    };
    let model = Masac::new(config, 2, 1).unwrap();
    let batch = random_batch(2, 3, 8);
    let y = model.td_targets(&batch, 1.0).unwrap();
    assert_eq!(y, batch.rewards);
}

#[test]
fn critic_loss_mixes_terms_by_beta() {
    let batch = random_batch(2, 4, 3);
    for beta in [0.0, 0.001, 0.5, 1.0] {
        let model = Masac::new(small_config(beta), 2, 6).unwrap();
        let y = model.td_targets(&batch, 1.0).unwrap();
        let mut g = Graph::new();
        let l = model.critic_loss(&mut g, &model.critic_store, &batch, &y).unwrap();
        let (td1, td2, recon, total) = (g.scalar(l.td1), g.scalar(l.td2), g.scalar(l.recon), g.scalar(l.total));
        assert!(recon > 0.0);
        let expect = (1.0 - beta) * (td1 + td2) + beta * recon;
        assert!((total - expect).abs() < 1e-12);
        if beta == 0.0 {
            assert_eq!(total, td1 + td2);
        }
        if beta == 1.0 {
            assert_eq!(total, recon);
        }
        // Independent TD term for Q1: per-agent MSE, averaged over agents.
        let mut g2 = Graph::new();
        let f = model.critic_forward(&mut g2, &model.critic_store, &batch.obs_prev, &batch.obs, &batch.actions).unwrap();
        let mut oracle = 0.0;
        for i in 0..2 {
            let q = g2.value(f.q1[i]);
            let mse: f64 = (0..4).map(|k| (q[k * ACTIONS + batch.actions[k][i]] - y[k][i]).powi(2)).sum::<f64>() / 4.0;
            oracle += mse / 2.0;
        }
        assert!((td1 - oracle).abs() < 1e-12);
    }
}

#[test]
fn critic_loss_passes_gradcheck_with_two_agents() {
    let model = Masac::new(small_config(0.3), 2, 21).unwrap();
    let batch = random_batch(2, 3, 17);
    let y = model.td_targets(&batch, 0.5).unwrap();
    let report = gradcheck_params(
        &model.critic_store,
        None,
        |g, s| Ok(model.critic_loss(g, s, &batch, &y)?.total),
        1e-5,
        Exec::default(),
    )
    .unwrap();
    assert!(report.checked > 500, "{}", report.checked);
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn actor_loss_matches_hand_formula_and_gradcheck() {
    let model = Masac::new(small_config(0.001), 1, 2).unwrap();
    let actor = &model.actors[0];
    let obs: Vec<f64> = (0..2 * OBS_DIM).map(|i| ((i * 3) % 7) as f64).collect();
    let q = vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -0.5, 0.3];
    let alpha = 0.4;
    let p = actor.probs(&obs, 2);
    let expect: f64 = (0..8).map(|k| p[k] * (alpha * p[k].ln() - q[k])).sum::<f64>() / 2.0;
    let mut g = Graph::new();
    let l = actor.loss(&mut g, &actor.store, &obs, &q, alpha).unwrap();
    assert!((g.scalar(l) - expect).abs() < 1e-12);
    let report = gradcheck_params(&actor.store, None, |g, s| actor.loss(g, s, &obs, &q, alpha), 1e-5, Exec::default()).unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn alpha_falls_while_entropy_exceeds_target() {
    let mut t = Temperature::new(1.0, -0.5, 1e-3);
    let mut g = Graph::new();
    let l = t.loss(&mut g, 1.2);
    assert!((g.scalar(l) - 1.7).abs() < 1e-12);
    let mut last = t.alpha();
    for _ in 0..200 {
        t.update(4f64.ln()).unwrap();
        let a = t.alpha();
        assert!(a < last && a > 0.0);
        last = a;
    }
    let mut up = Temperature::new(0.2, -0.5, 1e-3);
    up.update(-1.0).unwrap();
    assert!(up.alpha() > 0.2);
}

#[test]
fn soft_update_rules() {
    let mut main = ParamStore::new();
    main.add("w", Tensor::row(vec![1.0, 2.0]));
    let mut target = ParamStore::new();
    target.add("w", Tensor::row(vec![0.0, 0.0]));
    let mut a = target.clone();
    soft_update(&main, &mut a, 0.25, SoftUpdateRule::AsPrinted).unwrap();
    assert_eq!(a.iter().next().unwrap().1.values(), &[0.75, 1.5]);
    let mut c = target.clone();
    soft_update(&main, &mut c, 0.25, SoftUpdateRule::Conventional).unwrap();
    assert_eq!(c.iter().next().unwrap().1.values(), &[0.25, 0.5]);
    let mut other = ParamStore::new();
    other.add("v", Tensor::row(vec![0.0]));
    assert!(soft_update(&main, &mut other, 0.5, SoftUpdateRule::AsPrinted).is_err());
}

#[test]
fn update_uses_pre_update_snapshot() {
    let mut model = Masac::new(small_config(0.001), 2, 31).unwrap();
    let batch = random_batch(2, 4, 5);
    let before = model.clone();
    let diag = before.diagnose(&batch).unwrap();
    let stats = model.update(&batch).unwrap();
    // Every reported number comes from the parameters before the step.
    assert!((stats.critic_loss - diag.critic_loss).abs() < 1e-12);
    assert!((stats.actor_loss - diag.actor_loss).abs() < 1e-12);
    assert!((stats.recon_loss - diag.recon_loss).abs() < 1e-12);
    assert!((stats.entropy - diag.entropy).abs() < 1e-12);
    assert_eq!(stats.alpha, before.alpha());
    assert!(model.alpha() < before.alpha());
    assert_ne!(model.critic_store.fingerprint(), before.critic_store.fingerprint());
    for (a, b) in model.actors.iter().zip(&before.actors) {
        assert_ne!(a.store.fingerprint(), b.store.fingerprint());
    }
    // target <- rho * target + (1 - rho) * critic, with the new critic.
    let rho = model.config.rho;
    for id in model.target_store.ids() {
        let old = before.target_store.get(id).values();
        let main = model.critic_store.get(id).values();
        for ((t, o), m) in model.target_store.get(id).values().iter().zip(old).zip(main) {
            assert!((t - (rho * o + (1.0 - rho) * m)).abs() < 1e-12);
        }
    }
    assert_eq!(model.updates, 1);
}

#[test]
fn parallel_and_sequential_updates_agree() {
    let batch = random_batch(3, 4, 12);
    let run = |exec| {
        let mut model = Masac::new(
            MasacConfig {
                exec,
                ..small_config(0.001)
            },
            3,
            8,
        )
        .unwrap();
        for _ in 0..3 {
            model.update(&batch).unwrap();
        }
        model.checkpoint_json()
    };
    assert_eq!(run(Exec::Parallel), run(Exec::Sequential));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let mut model = Masac::new(small_config(0.001), 2, 1).unwrap();
    model.update(&random_batch(2, 4, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let loaded = Masac::load(&path, small_config(0.001), 2).unwrap();
    assert_eq!(loaded.checkpoint_json(), model.checkpoint_json());
    assert_eq!(loaded.alpha(), model.alpha());
    let obs: Vec<f64> = (0..2 * OBS_DIM).map(|i| i as f64 * 0.1).collect();
    assert_eq!(loaded.policies(&obs), model.policies(&obs));
    assert!(matches!(
        Masac::load(&path, small_config(0.001), 3),
        Err(MasacError::CheckpointMismatch(_))
    ));
    assert!(matches!(
        Masac::load(&dir.path().join("missing.json"), small_config(0.001), 2),
        Err(MasacError::Io { .. })
    ));
}

#[test]
fn short_training_run_is_deterministic_and_logs_every_column() {
    let (net, flow) = generate_grid(1, 2, FlowMode::Bidirectional, 300.0, 90.0).unwrap();
    let net = Arc::new(net);
    let sim = SimConfig {
        episode_seconds: 600,
        ..SimConfig::default()
    };
    let config = MasacConfig {
        episodes: 3,
        buffer_size: 80,
        batch_size: 8,
        ..small_config(0.001)
    };
    let mut seen = 0;
    let (model, log) = train(net.clone(), &flow, sim, &config, 9, |_| seen += 1).unwrap();
    assert_eq!(seen, 3);
    assert_eq!(log.episodes.len(), 3);
    // 60 steps per episode: updates start at step 80.
    assert_eq!(log.episodes.iter().map(|e| e.updates).collect::<Vec<_>>(), [0, 41, 60]);
    assert_eq!(log.alpha_trace.len(), 101);
    for e in &log.episodes {
        assert!(e.recon_loss > 0.0 && e.critic_loss.is_finite() && e.att > 0.0);
        assert!(e.mean_entropy > 0.0 && e.mean_entropy <= 4f64.ln() + 1e-12);
    }
    // Entropy of a 4-way policy never drops below the -0.5 target.
    assert!(log.alpha_trace.windows(2).all(|w| w[1] < w[0]));
    let (again, log2) = train(net.clone(), &flow, sim, &config, 9, |_| {}).unwrap();
    assert_eq!(log, log2);
    assert_eq!(model.checkpoint_json(), again.checkpoint_json());

    let mut csv = Vec::new();
    write_log_csv(&mut csv, &log).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(text.lines().count(), 4);

    let eval = evaluate(&model, net, &flow, &[1, 2], sim).unwrap();
    assert_eq!(eval.len(), 2);
    assert!(eval.iter().all(|m| m.att > 0.0));
}
