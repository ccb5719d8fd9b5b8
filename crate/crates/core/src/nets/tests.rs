use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{read_checkpoint, write_checkpoint, Gradients};

fn nets(seed: u64, obs: usize, space: ActionSpace) -> CadeNetworks {
    let cfg = NetConfig {
        hidden: 16,
        ..NetConfig::default()
    };
    CadeNetworks::new(&mut ChaCha8Rng::seed_from_u64(seed), obs, space, &cfg)
}

fn random_obs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[test]
fn zero_weights_give_uniform_policy_and_half_cost() {
    let mut n = nets(0, 25, ActionSpace::discrete(5));
    n.actor.zero();
    n.cost.zero();
    let obs = vec![1.0; 25];
    let b = n.cade_forward(&obs, None, &vec![0.0; 16]).unwrap();
    for lp in log_probs(&b.logits, &n.space) {
        assert!((lp.exp() - 0.2).abs() < 1e-15);
    }
    assert_eq!(b.cost, 0.5);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let n = nets(0, 25, ActionSpace::discrete(5));
    assert!(matches!(
        n.cade_forward(&[0.0; 24], None, &[0.0; 16]),
        Err(NetError::Dimension { expected: 25, found: 24, .. })
    ));
}

#[test]
fn identical_seeds_give_identical_bundles_and_reset_forgets_history() {
    let a = nets(7, 9, ActionSpace::multi_discrete(&[3, 3]));
    let b = nets(7, 9, ActionSpace::multi_discrete(&[3, 3]));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs = random_obs(&mut rng, 6, 9);
    let mut ha = vec![0.0; 16];
    let mut hb = vec![0.0; 16];
    let mut prev: Option<Action> = None;
    for o in &obs {
        let ba = a.cade_forward(o, prev.as_deref(), &ha).unwrap();
        let bb = b.cade_forward(o, prev.as_deref(), &hb).unwrap();
        assert_eq!(ba, bb);
        ha = ba.hidden;
        hb = bb.hidden;
        prev = Some(vec![1, 2]);
    }
    // A new episode starts from zeros; its first bundle cannot depend on ha.
    let fresh = a.cade_forward(&obs[0], None, &vec![0.0; 16]).unwrap();
    let first = b.cade_forward(&obs[0], None, &vec![0.0; 16]).unwrap();
    assert_eq!(fresh, first);
}

#[test]
fn sampling_contracts() {
    let space = ActionSpace::discrete(5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, lp) = sample_action(&[1e9, 0.0, 0.0, 0.0, 0.0], &space, &mut rng).unwrap();
    assert_eq!(a, vec![0]);
    assert!(lp.abs() < 1e-12);

    let md = ActionSpace::multi_discrete(&[3, 3, 3, 3]);
    let (_, lp) = sample_action(&[0.0; 12], &md, &mut rng).unwrap();
    assert!((lp - 4.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12);

    let n = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[sample_action(&[0.0; 5], &space, &mut rng).unwrap().0[0]] += 1;
    }
    let sigma = (n as f64 * 0.2 * 0.8).sqrt();
    for c in counts {
        assert!((c as f64 - 0.2 * n as f64).abs() < 3.0 * sigma, "{counts:?}");
    }
    assert!(sample_action(&[f64::NAN; 5], &space, &mut rng).is_err());
}

#[test]
fn index_round_trip() {
    let md = ActionSpace::multi_discrete(&[3, 3, 3, 3]);
    for i in 0..md.count() {
        assert_eq!(md.to_index(&md.from_index(i)), i);
    }
}

#[test]
fn mse_examples() {
    assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
    assert_eq!(mse(&[0.5], &[1.0]).unwrap(), 0.25);
    assert!(mse(&[], &[]).is_err());
    let mut t = Tape::new();
    let p = t.constant(Tensor::zeros(0, 1)).unwrap();
    let q = t.constant(Tensor::zeros(0, 1)).unwrap();
    assert!(mse_loss(&mut t, p, q).is_err());
}

/// Reward MSE and a policy-like loss sharing one unroll.
fn losses(n: &CadeNetworks, obs: &[Vec<f64>], actions: &[Action], which: u8) -> Gradients {
    let mut t = Tape::new();
    let u = n.unroll(&mut t, obs, actions).unwrap();
    let r = n.reward_forward(&mut t, u.hidden, actions).unwrap();
    let target = t.constant(Tensor::new(obs.len(), 1, vec![1.0; obs.len()]).unwrap()).unwrap();
    let lr = mse_loss(&mut t, r, target).unwrap();
    let lp = t.log_softmax(u.logits, n.space.branches()).unwrap();
    let mask = t.constant(n.actions_tensor(actions)).unwrap();
    let sel = t.mul(lp, mask).unwrap();
    let lpi = t.mean(sel).unwrap();
    let loss = match which {
        0 => lr,
        1 => lpi,
        _ => t.add(lr, lpi).unwrap(),
    };
    t.backward(loss).unwrap()
}

#[test]
fn reward_loss_never_reaches_the_trunk() {
    let n = nets(2, 9, ActionSpace::discrete(5));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let obs = random_obs(&mut rng, 8, 9);
    let actions: Vec<Action> = (0..8).map(|i| vec![i % 5]).collect();
    let g_r = losses(&n, &obs, &actions, 0);
    let g_p = losses(&n, &obs, &actions, 1);
    let g_c = losses(&n, &obs, &actions, 2);
    for p in n.trunk.params() {
        assert!(g_r.param(p.key()).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        let gp = g_p.param(p.key()).unwrap();
        assert!(gp.iter().any(|&v| v != 0.0));
        assert_eq!(gp, g_c.param(p.key()).unwrap());
    }
    for p in n.reward.params() {
        assert!(g_r.param(p.key()).unwrap().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn unroll_matches_step_eval() {
    let n = nets(4, 9, ActionSpace::multi_discrete(&[3, 3]));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = random_obs(&mut rng, 5, 9);
    let actions: Vec<Action> = (0..5).map(|i| vec![i % 3, (i + 1) % 3]).collect();
    let mut t = Tape::new();
    let u = n.unroll(&mut t, &obs, &actions).unwrap();
    let rf = n.reward_forward(&mut t, u.hidden, &actions).unwrap();
    let mut h = vec![0.0; 16];
    for (i, o) in obs.iter().enumerate() {
        let prev = if i == 0 { None } else { Some(actions[i - 1].as_slice()) };
        let b = n.cade_forward(o, prev, &h).unwrap();
        assert_eq!(t.value(u.logits).row_slice(i), b.logits.as_slice());
        assert_eq!(t.value(rf).get(i, 0), n.reward_eval(&b.hidden, &actions[i]));
        h = b.hidden;
    }
}

#[test]
fn checkpoint_round_trip_restores_every_parameter() {
    let a = nets(1, 9, ActionSpace::discrete(5));
    let mut b = nets(2, 9, ActionSpace::discrete(5));
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &a.named_tensors()).unwrap();
    b.load_tensors(&read_checkpoint(buf.as_slice()).unwrap()).unwrap();
    for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(&b.named_tensors()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb);
    }
    let names: Vec<_> = a.named_tensors().into_iter().map(|(n, _)| n).collect();
    for prefix in ["trunk.", "actor.", "reward.", "cost.", "sdm."] {
        assert!(names.iter().any(|n| n.starts_with(prefix)));
    }
    let mut c = nets(3, 10, ActionSpace::discrete(5));
    assert!(c.load_tensors(&a.named_tensors()).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn probabilities_and_cost_are_well_formed(seed in 0u64..50, bits in prop::collection::vec(any::<bool>(), 16)) {
            let n = nets(seed, 16, ActionSpace::multi_discrete(&[3, 3, 3, 3]));
            let obs: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
            let b = n.cade_forward(&obs, Some(&[0, 1, 2, 1]), &vec![0.1; 16]).unwrap();
            prop_assert!((0.0..=1.0).contains(&b.cost));
            let lp = log_probs(&b.logits, &n.space);
            for k in 0..4 {
                let s: f64 = lp[3 * k..3 * k + 3].iter().map(|v| v.exp()).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, l) = sample_action(&b.logits, &n.space, &mut rng).unwrap();
            prop_assert!(l.exp() > 0.0 && l.exp() <= 1.0);
            prop_assert!((l - log_prob(&b.logits, &n.space, &a)).abs() < 1e-12);
        }
    }
}
