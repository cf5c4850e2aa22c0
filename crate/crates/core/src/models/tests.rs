use super::*;
use crate::autodiff::param_gradcheck;
use crate::autodiff::suite::randn;
use crate::envs::grid::tile_image;
use crate::tensor::softplus;

pub(crate) fn mini_config() -> ModelConfig {
    ModelConfig::miniature()
}

pub(crate) fn mini_grid() -> EnvSpec {
    EnvSpec::Grid { side: 3, inner_steps: 4, inner_episodes: 2, allow_goal_at_start: false }
}

fn random_inputs(m: &Model, rng: &mut RngStream, n: usize) -> Vec<Vec<f64>> {
    let space = m.action_space();
    (0..n)
        .map(|i| {
            let obs: Vec<f64> = match m.env.image_side() {
                Some(side) => tile_image(side, i % (side * side)),
                None => vec![rand::Rng::gen_range(rng, -1.0..1.0); m.env.obs_dim()],
            };
            let a = Action::random(space, rng);
            m.step_input(if i == 0 { None } else { Some((&a, 0.3 * i as f64, i % 3 == 0)) }, &obs)
        })
        .collect()
}

#[test]
fn default_belief_has_thirty_two_dimensions_and_is_deterministic() {
    let m = Model::new(&EnvSpec::grid(), &ModelConfig::default(), 1).unwrap();
    let h = m.initial_hidden();
    let x = m.step_input(None, &tile_image(5, 7));
    let (h1, phi) = m.infer_step(&[&h], &[x.clone()]).unwrap();
    let (h2, phi2) = m.infer_step(&[&h], &[x]).unwrap();
    assert_eq!(phi[0].dim(), 32);
    assert_eq!(phi, phi2);
    assert_eq!(h1, h2);
    assert!(phi[0].mean.iter().all(|v| v.is_finite()));
    assert!(phi[0].log_std.iter().all(|s| (LOG_STD_MIN..=LOG_STD_MAX).contains(s)));
}

#[test]
fn sequence_scan_equals_step_calls() {
    for env in [EnvSpec::fourier(), mini_grid()] {
        let m = Model::new(&env, &mini_config(), 2).unwrap();
        let mut rng = RngStream::new(3);
        let seqs: Vec<Vec<Vec<f64>>> = (0..2).map(|_| random_inputs(&m, &mut rng, 16)).collect();
        let cached = Hidden { layers: (0..2).map(|_| randn(&mut rng, &[3]).into_data()).collect() };
        let init = [None, Some(&cached)];
        let stepped = m.infer_sequences(&init, &seqs).unwrap();
        let mut g = Graph::new();
        let flat: Vec<Vec<f64>> = seqs.iter().flatten().cloned().collect();
        let x = g.constant(Tensor::from_rows(&flat, m.input_width()).unwrap());
        let inf = m.infer_graph(&mut g, &m.params, x, 2, 16, &init, true).unwrap();
        let (mean, ls) = (g.value(inf.mean), g.value(inf.log_std));
        for b in 0..2 {
            for t in 0..16 {
                let phi = &stepped[b][t].1;
                for (p, q) in phi.mean.iter().zip(mean.row(b * 16 + t)).chain(phi.log_std.iter().zip(ls.row(b * 16 + t))) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
            for (l, v) in inf.finals.iter().enumerate() {
                for (p, q) in stepped[b][15].0.layers[l].iter().zip(g.value(*v).row(b)) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn fresh_value_head_on_zero_input_returns_bias() {
    let mut m = Model::new(&EnvSpec::fourier(), &ModelConfig::default(), 4).unwrap();
    m.params.insert("value.out.b", Tensor::vector(vec![0.37]));
    let v = m.values(&[vec![0.0]], &[vec![0.0; 32]]).unwrap();
    assert!((v[0] - 0.37).abs() < 1e-15);
    assert_eq!(v, m.values(&[vec![0.0]], &[vec![0.0; 32]]).unwrap());
}

#[test]
fn uniform_grid_policy_has_ln5_entropy() {
    let mut m = Model::new(&EnvSpec::grid(), &mini_config(), 5).unwrap();
    let out_w = m.params.get("policy.out.w").unwrap().shape().to_vec();
    m.params.insert("policy.out.w", Tensor::zeros(&out_w));
    let f = EnvSpec::grid().features(&tile_image(5, 0), 0);
    let p = m.policies(&[f], &[vec![0.1, 0.2, 0.3]]).unwrap();
    assert!((p[0].entropy() - 5f64.ln()).abs() < 1e-12);
}

fn decode_rows(m: &Model, rng: &mut RngStream, n: usize) -> Vec<DecodeRow> {
    (0..n)
        .map(|i| {
            let obs = match m.env.image_side() {
                Some(side) => tile_image(side, (i + 1) % (side * side)),
                None => vec![0.2],
            };
            DecodeRow {
                features: m.env.features(&obs, i),
                action: Action::random(m.action_space(), rng),
                reward: 0.1 * i as f64 - 0.2,
                next_obs: obs,
            }
        })
        .collect()
}

#[test]
fn decode_is_sum_of_reward_state_and_policy_terms() {
    for env in [EnvSpec::fourier(), mini_grid()] {
        let m = Model::new(&env, &mini_config(), 6).unwrap();
        let mut rng = RngStream::new(7);
        let rows = decode_rows(&m, &mut rng, 5);
        let z: Vec<Vec<f64>> = (0..5).map(|_| randn(&mut rng, &[3]).into_data()).collect();
        let feats: Vec<Vec<f64>> = rows.iter().map(|r| r.features.clone()).collect();
        let acts: Vec<Action> = rows.iter().map(|r| r.action.clone()).collect();
        let (mu, logits) = m.outcome_heads(&feats, &acts, &z).unwrap();
        let pol = m.policies(&feats, &z).unwrap();
        let refs: Vec<&DecodeRow> = rows.iter().collect();
        let got = m.decode_log_likelihoods(&z, &refs).unwrap();
        for i in 0..5 {
            let s = m.cfg.reward_scale;
            let zr = (rows[i].reward - mu[i]) / s;
            let mut want = -0.5 * zr * zr - s.ln() - HALF_LN_2PI + pol[i].log_prob(&rows[i].action);
            if let Some(l) = &logits {
                want += l[i].iter().zip(&rows[i].next_obs).map(|(l, y)| y * l - softplus(*l)).sum::<f64>();
            }
            assert!((got[i] - want).abs() < 1e-10, "{} vs {want}", got[i]);
        }
        // window additivity
        let pair = m.decode_log_likelihoods(&z[..2], &refs[..2]).unwrap();
        assert_eq!(pair[0] + pair[1], got[0] + got[1]);
    }
}

#[test]
fn exact_reward_prediction_gives_gaussian_mode() {
    let m = Model::new(&EnvSpec::fourier(), &mini_config(), 8).unwrap();
    let z = vec![vec![0.5, -0.5, 0.0]];
    let action = Action::Continuous(vec![0.3]);
    let feats = vec![vec![0.25]];
    let mu = m.reward_means(&feats, std::slice::from_ref(&action), &z).unwrap()[0];
    let row = DecodeRow { features: feats[0].clone(), action: action.clone(), reward: mu, next_obs: vec![mu] };
    let ll = m.decode_log_likelihoods(&z, &[&row]).unwrap()[0];
    let lp = m.policies(&feats, &z).unwrap()[0].log_prob(&action);
    let mode = -0.5 * (2.0 * std::f64::consts::PI * 0.01f64).ln();
    assert!((ll - lp - mode).abs() < 1e-12);
}

#[test]
fn certain_tile_prediction_has_zero_state_term() {
    let env = mini_grid();
    let m = Model::new(&env, &mini_config(), 9).unwrap();
    let y = tile_image(3, 4);
    let logits = Tensor::matrix(1, 9, y.iter().map(|v| if *v > 0.5 { 60.0 } else { -60.0 }).collect()).unwrap();
    let mut g = Graph::new();
    let l = g.constant(logits);
    let yv = g.constant(Tensor::matrix(1, 9, y).unwrap());
    let yl = g.mul(yv, l).unwrap();
    let sp = g.softplus(l).unwrap();
    let b = g.sub(yl, sp).unwrap();
    let b = g.sum_last(b).unwrap();
    assert!(g.value(b).data()[0].abs() < 1e-20);
    let _ = m;
}

#[test]
fn decode_blocks_policy_gradients() {
    let m = Model::new(&mini_grid(), &mini_config(), 10).unwrap();
    let mut rng = RngStream::new(11);
    let rows = decode_rows(&m, &mut rng, 4);
    let refs: Vec<&DecodeRow> = rows.iter().collect();
    let mut g = Graph::new();
    let z = g.param(&m.params, "belief.b").unwrap();
    let z = g.slice(z, 0, 3).unwrap();
    let z = g.reshape(z, &[1, 3]).unwrap();
    let z = g.gather_rows(z, vec![0; 4]).unwrap();
    let ll = m.decode_graph(&mut g, &m.params, &m.params, z, &refs, false).unwrap();
    let s = g.sum(ll).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.iter().all(|(name, _)| !name.starts_with("policy.")));
    assert!(grads.get("reward.out.w").is_some());
    assert!(grads.get("belief.b").is_some());
}

#[test]
fn reparameterized_sample_has_identity_mean_jacobian() {
    let mut g = Graph::new();
    let mean = g.input("mean", Tensor::vector(vec![0.1, -0.4, 2.0]));
    let ls = g.input("ls", Tensor::vector(vec![-1.0, 0.3, 0.0]));
    let eps = g.constant(Tensor::vector(vec![0.7, -1.2, 0.4]));
    let sd = g.exp(ls).unwrap();
    let noise = g.mul(sd, eps).unwrap();
    let m = g.add(mean, noise).unwrap();
    let proj = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = g.mul(m, proj).unwrap();
    let y = g.sum(y).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(mean).unwrap().data(), &[1.0, 2.0, 3.0]);
}

fn full_model_gradcheck(env: EnvSpec) -> f64 {
    let mut m = Model::new(&env, &mini_config(), 12).unwrap();
    let mut rng = RngStream::new(13);
    // zero biases put zero-input rows exactly on the rectifier kink
    let names: Vec<String> = m.params.names().filter(|n| n.ends_with(".b")).map(String::from).collect();
    for name in names {
        let shape = m.params.get(&name).unwrap().shape().to_vec();
        m.params.insert(name, randn(&mut rng, &shape).map(|v| 0.3 * v));
    }
    let inputs = random_inputs(&m, &mut rng, 6);
    let rows = decode_rows(&m, &mut rng, 6);
    let refs: Vec<&DecodeRow> = rows.iter().collect();
    let eps = randn(&mut rng, &[6, 3]);
    let feats = Tensor::from_rows(&rows.iter().map(|r| r.features.clone()).collect::<Vec<_>>(), env.feature_dim()).unwrap();
    let acts: Vec<Action> = rows.iter().map(|r| r.action.clone()).collect();
    let report = param_gradcheck(
        &m.params,
        |g, s| {
            let x = g.constant(Tensor::from_rows(&inputs, m.input_width())?);
            let inf = m.infer_graph(g, s, x, 2, 3, &[None, None], false)?;
            let sd = g.exp(inf.log_std)?;
            let e = g.constant(eps.clone());
            let noise = g.mul(sd, e)?;
            let z = g.add(inf.mean, noise)?;
            let dec = m.decode_graph(g, s, &m.params, z, &refs, false)?;
            let f = g.constant(feats.clone());
            let v = m.value_head(g, s, f, inf.mean, false)?;
            let v = g.square(v)?;
            let ph = m.policy_head(g, s, f, inf.mean, false)?;
            let lp = m.policy_log_prob(g, ph, &acts)?;
            let h = m.policy_entropy(g, ph)?;
            let mut total = g.sum(dec)?;
            for t in [v, lp, h] {
                let t = g.sum(t)?;
                total = g.add(total, t)?;
            }
            let fin = g.concat(&inf.finals)?;
            let fin = g.tanh(fin)?;
            let fin = g.sum(fin)?;
            g.add(total, fin)
        },
        1e-6,
        6,
    )
    .unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

#[test]
fn all_heads_pass_gradient_check() {
    for env in [EnvSpec::fourier(), mini_grid()] {
        let e = full_model_gradcheck(env);
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn checkpoint_params_round_trip_into_model() {
    let env = EnvSpec::fourier();
    let m = Model::new(&env, &mini_config(), 14).unwrap();
    let m2 = Model::with_params(&env, &mini_config(), m.params.clone()).unwrap();
    assert_eq!(m.params.iter().count(), m2.params.iter().count());
    let mut bad = m.params.clone();
    bad.insert("value.out.b", Tensor::zeros(&[2]));
    assert!(matches!(Model::with_params(&env, &mini_config(), bad), Err(Error::Checkpoint(_))));
}
