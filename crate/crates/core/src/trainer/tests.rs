use super::*;
use crate::models::tests::{mini_config, mini_grid};

fn tiny_planner() -> PlannerConfig {
    PlannerConfig { particles: 4, nested: 2, depth: 2, resample_period: 1, temperature: 0.5, discount: 0.99 }
}

fn tiny_train(env: &EnvSpec) -> TrainConfig {
    TrainConfig {
        minibatch: 12,
        sgd_steps: 2,
        unroll: env.horizon(),
        parallel_envs: 2,
        elbo_samples: 2,
        burn_in: 3,
        decode_window: 2,
        unroll_window: 2,
        max_age: 4,
        ..TrainConfig::for_env(env)
    }
}

fn tiny_trainer(env: &EnvSpec, seed: u64) -> Trainer {
    Trainer::new(env, &mini_config(), &tiny_planner(), &tiny_train(env), seed).unwrap()
}

fn groups(t: &Trainer) -> Vec<WindowGroup<'_>> {
    let u = t.cfg.unroll_window;
    let all = t.replay.windows(u, t.cfg.burn_in);
    let mut out: Vec<WindowGroup> = Vec::new();
    for burn in [0, 2, 3] {
        let ws: Vec<_> = all.iter().filter(|w| w.burn == burn).take(2).map(|w| t.replay.window_entries(w, u)).collect();
        if !ws.is_empty() {
            out.push(WindowGroup { burn, windows: ws });
        }
    }
    out
}

fn eval_loss(t: &Trainer, gr: &[WindowGroup], coef: &LossCoefficients) -> (f64, LossParts) {
    let mut g = Graph::new();
    let out = batch_loss(&t.model, &mut g, &t.model.params, Detach::StopGradient, gr, coef, &mut RngStream::new(5)).unwrap();
    (g.value(out.total).item().unwrap(), out.parts)
}

#[test]
fn default_capacity_matches_formula() {
    assert_eq!(TrainConfig::for_env(&EnvSpec::fourier()).buffer_capacity(), 16 * 32 * 64);
    let c = TrainConfig::for_env(&EnvSpec::grid());
    assert_eq!((c.unroll, c.burn_in, c.decode_window, c.entropy_coef), (128, 12, 6, 0.1));
}

#[test]
fn inconsistent_windows_are_rejected_at_startup() {
    let env = EnvSpec::fourier();
    let bad = TrainConfig { unroll: 2, unroll_window: 4, ..tiny_train(&env) };
    assert!(matches!(Trainer::new(&env, &mini_config(), &tiny_planner(), &bad, 0), Err(Error::Config(_))));
    let bad = TrainConfig { decode_window: 5, ..tiny_train(&env) };
    let msg = bad.validate(&env).unwrap_err();
    assert!(msg.contains("decode_window"), "{msg}");
}

#[test]
fn total_loss_recomputes_from_components() {
    for env in [EnvSpec::fourier(), mini_grid()] {
        let mut t = tiny_trainer(&env, 1);
        t.iterate().unwrap();
        let gr = groups(&t);
        assert!(gr.len() >= 2);
        let coef = t.cfg.coefficients();
        let (total, parts) = eval_loss(&t, &gr, &coef);
        assert!((total - parts.total(&coef)).abs() <= 1e-12 * total.abs().max(1.0), "{total} vs {parts:?}");
        // each weight enters linearly
        let only_value = LossCoefficients { policy: 0.0, entropy: 0.0, belief: 0.0, ..coef.clone() };
        let (v, _) = eval_loss(&t, &gr, &only_value);
        assert!((v - coef.value * parts.value).abs() < 1e-12);
    }
}

#[test]
fn exact_value_and_policy_reach_their_floors() {
    let env = mini_grid();
    let mut t = tiny_trainer(&env, 2);
    t.iterate().unwrap();
    let u = t.cfg.unroll_window;
    let windows = t.replay.windows(u, t.cfg.burn_in);
    // overwrite targets with the model's own outputs
    for w in &windows {
        let entries: Vec<ReplayEntry> = t.replay.window_entries(w, u).into_iter().cloned().collect();
        let init = if entries[0].offset == 0 { None } else { Some(&entries[0].hidden) };
        let inputs: Vec<Vec<f64>> = entries.iter().map(|e| e.input.clone()).collect();
        let states = t.model.infer_sequences(&[init], &[inputs]).unwrap().remove(0);
        for (k, (_, phi)) in states.iter().enumerate().skip(w.burn) {
            let f = vec![entries[k].features.clone()];
            let v = t.model.values(&f, &[phi.mean.clone()]).unwrap()[0];
            let p = t.model.policies(&f, &[phi.mean.clone()]).unwrap().remove(0).probs().expect("discrete policy");
            let e = &mut t.replay.rings[w.env][w.start + k];
            e.td_target = v;
            e.target = p.into_iter().enumerate().map(|(a, q)| (Action::Discrete(a), q)).collect();
        }
    }
    let gr: Vec<WindowGroup> = vec![WindowGroup { burn: windows[3].burn, windows: vec![t.replay.window_entries(&windows[3], u)] }];
    let (_, parts) = eval_loss(&t, &gr, &t.cfg.coefficients());
    assert!(parts.value < 1e-20, "{parts:?}");
    assert!((parts.policy - parts.entropy).abs() < 1e-9, "{parts:?}");
}

#[test]
fn full_loss_passes_gradient_check() {
    for env in [EnvSpec::fourier(), mini_grid()] {
        let report = full_loss_gradcheck(&env, 3, 4).unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_error < 1e-3, "{env:?}: {report:?}");
    }
}

#[test]
fn reference_detach_matches_stop_gradient_at_the_reference() {
    let mut t = tiny_trainer(&EnvSpec::fourier(), 4);
    t.iterate().unwrap();
    let gr = groups(&t);
    let coef = t.cfg.coefficients();
    let run = |detach: Detach| {
        let mut g = Graph::new();
        let out = batch_loss(&t.model, &mut g, &t.model.params, detach, &gr, &coef, &mut RngStream::new(2)).unwrap();
        (g.value(out.total).item().unwrap(), g.backward(out.total).unwrap())
    };
    let (a, ga) = run(Detach::StopGradient);
    let reference = t.model.params.clone();
    let (b, gb) = run(Detach::Reference(&reference));
    assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    assert_eq!(ga.len(), gb.len());
    for (name, x) in ga.iter() {
        let y = gb.get(name).unwrap();
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-10 * p.abs().max(1.0), "{name}: {p} vs {q}");
        }
    }
}

#[test]
fn non_finite_loss_names_the_window() {
    let env = EnvSpec::fourier();
    let mut t = tiny_trainer(&env, 4);
    t.iterate().unwrap();
    let u = t.cfg.unroll_window;
    let w = t.replay.windows(u, t.cfg.burn_in)[2];
    t.replay.rings[w.env][w.start + w.burn].td_target = f64::NAN;
    let gr = vec![WindowGroup { burn: w.burn, windows: vec![t.replay.window_entries(&w, u)] }];
    let mut g = Graph::new();
    let err = batch_loss(&t.model, &mut g, &t.model.params, Detach::StopGradient, &gr, &t.cfg.coefficients(), &mut RngStream::new(0))
        .err()
        .unwrap();
    match err {
        Error::NonFiniteLoss(label) => assert!(label.contains("env ") && label.contains("lifetime"), "{label}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn value_head_regresses_constant_target() {
    let env = EnvSpec::fourier();
    let mut t = tiny_trainer(&env, 5);
    t.iterate().unwrap();
    for ring in t.replay.rings.iter_mut() {
        for e in ring.iter_mut() {
            e.td_target = 0.7;
        }
    }
    t.cfg.policy_coef = 0.0;
    t.cfg.entropy_coef = 0.0;
    t.cfg.belief_coef = 0.0;
    t.cfg.value_coef = 1.0;
    t.opt = AdamW::new(AdamWConfig { learning_rate: 1e-2, ..AdamWConfig::default() });
    let windows = t.replay.windows(t.cfg.unroll_window, t.cfg.burn_in);
    let mut rng = RngStream::new(6);
    for s in 0..600 {
        t.sgd_step(&windows, &mut rng.split(s)).unwrap();
    }
    let (_, parts, _) = t.sgd_step(&windows, &mut rng).unwrap();
    // ½(V̂ − V)² < 5e-5 means |V̂ − V| < 1e-2
    assert!(parts.value < 5e-5, "{parts:?}");
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let (m, t) = train_run(&EnvSpec::fourier(), &mini_config(), &tiny_planner(), &tiny_train(&EnvSpec::fourier()), 3, 11).unwrap();
        (m, t.model.params, t.returns)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.0.iter().all(|m| m.loss.is_finite()));
    assert_eq!(a.0.len(), 3);
}

#[test]
fn beliefs_persist_across_inner_resets_and_reset_with_the_task() {
    let env = mini_grid();
    let (_, t) = train_run(&env, &mini_config(), &tiny_planner(), &tiny_train(&env), 3, 7).unwrap();
    let a = &t.audit;
    assert!(a.is_clean(), "{a:?}");
    assert_eq!(a.steps, 3 * 2 * 8);
    assert_eq!(a.meta_resets, 6);
    assert_eq!(a.inner_resets, 6);
    // replayed lifetimes hold a meta flag only on their final step
    for ring in &t.replay.rings {
        for e in ring {
            assert_eq!(e.meta_done, e.offset + 1 == env.horizon());
            assert_eq!(e.inner_done, (e.offset + 1) % env.inner_len() == 0);
        }
    }
}

#[test]
fn stale_caches_are_recomputed_from_lifetime_start() {
    let env = EnvSpec::fourier();
    let mut t = tiny_trainer(&env, 8);
    t.iterate().unwrap();
    let w = t.replay.windows(t.cfg.unroll_window, t.cfg.burn_in).into_iter().find(|w| t.replay.rings[w.env][w.start].offset > 0).unwrap();
    let ring = &t.replay.rings[w.env];
    let first = (0..w.start).rev().take_while(|&j| ring[j].lifetime == ring[w.start].lifetime).last().unwrap_or(w.start);
    assert_eq!(ring[first].offset, 0);
    let inputs: Vec<Vec<f64>> = (first..w.start).map(|j| ring[j].input.clone()).collect();
    let fresh = t.model.infer_sequences(&[None], &[inputs]).unwrap().remove(0).pop().unwrap().0;
    t.replay.rings[w.env][w.start].hidden.layers[0][0] += 1.0;
    t.iteration += t.cfg.max_age;
    t.refresh_stale(&w).unwrap();
    let e = &t.replay.rings[w.env][w.start];
    assert_eq!(e.cached_at, t.iteration);
    for (a, b) in e.hidden.layers.iter().flatten().zip(fresh.layers.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn random_agent_evaluation_is_seeded() {
    let env = mini_grid();
    let a = eval::evaluate(eval::Agent::Random, &env, 5, 3).unwrap();
    assert_eq!(a, eval::evaluate(eval::Agent::Random, &env, 5, 3).unwrap());
    assert!(a.iter().all(|r| r.rewards.len() == 8 && r.tiles.len() == 8));
    let occ = eval::occupancy(&env, &a);
    assert_eq!(occ.len(), 2 * 9);
    for e in 0..2 {
        let s: f64 = occ.iter().filter(|o| o.0 == e).map(|o| o.2).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let f = eval::evaluate(eval::Agent::Random, &EnvSpec::fourier(), 4, 3).unwrap();
    assert!(f.iter().all(|r| r.regret().unwrap() >= -1e-9));
}

#[test]
fn planner_agent_evaluates_both_envs() {
    for env in [EnvSpec::fourier(), mini_grid()] {
        let m = Model::new(&env, &mini_config(), 1).unwrap();
        let p = tiny_planner();
        let r = eval::evaluate(eval::Agent::Planner { model: &m, planner: &p }, &env, 3, 2).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|e| e.rewards.len() == env.horizon() && e.total_return().is_finite()));
    }
}
