use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nets::NetConfig;

/// One-cell world: the next observation encodes the action, and only
/// action 0 is predicted to be costly.
struct Toy {
    space: ActionSpace,
}

impl WorldModel for Toy {
    fn space(&self) -> &ActionSpace {
        &self.space
    }

    fn predict(&self, _obs: &PatchGrid, action: &[usize]) -> Result<PatchGrid, FocopsError> {
        Ok(PatchGrid::filled(1, 1, action[0] as f64 / 4.0))
    }

    fn cost(&self, obs: &PatchGrid) -> f64 {
        if obs.get(0, 0) == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    fn policy_step(&self, _obs: &PatchGrid, _prev: &[usize], hidden: &[f64]) -> Result<(Vec<f64>, Vec<f64>), FocopsError> {
        Ok((vec![0.0; 5], hidden.to_vec()))
    }
}

fn toy() -> Toy {
    Toy {
        space: ActionSpace::discrete(5),
    }
}

fn cfg() -> SafetyConfig {
    SafetyConfig {
        mode: SafetyMode::Both,
        ..SafetyConfig::default()
    }
}

#[test]
fn safe_proposal_passes_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let obs = PatchGrid::filled(1, 1, 0.0);
    let s = screen_action(&toy(), &obs, &[], &[0.0; 5], &[3], -1.6, &cfg(), 1.0, &mut rng).unwrap();
    assert!(!s.overridden);
    assert_eq!((s.action, s.log_prob), (vec![3], -1.6));
    assert_eq!(s.proposed_cost, 0.0);
}

#[test]
fn unsafe_proposal_is_replaced_by_the_cheap_action() {
    let obs = PatchGrid::filled(1, 1, 0.0);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = screen_action(&toy(), &obs, &[], &[0.0; 5], &[0], -1.6, &cfg(), 1.0, &mut rng).unwrap();
        assert!(s.overridden);
        assert_ne!(s.action, vec![0]);
        assert_eq!((s.proposed_cost, s.chosen_cost), (1.0, 0.0));
        assert!((s.log_prob - (0.2f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn horizon_sums_predicted_costs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs = PatchGrid::filled(1, 1, 0.0);
    let c = rollout_cost(&toy(), &obs, &[0], &[], 1, &mut rng).unwrap();
    assert_eq!(c, 1.0);
    // Later actions are sampled; the total counts the first step once.
    let c = rollout_cost(&toy(), &obs, &[0], &[], 4, &mut rng).unwrap();
    assert!((1.0..=4.0).contains(&c));
}

fn nets() -> CadeNetworks {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    CadeNetworks::new(&mut rng, 25, ActionSpace::discrete(5), &NetConfig::default())
}

#[test]
fn always_unsafe_estimator_always_overrides() {
    let nets = nets();
    let model = FixedCost { nets: &nets, value: 1.0 };
    let obs = PatchGrid::filled(5, 5, 0.0);
    let h = vec![0.0; nets.hidden_dim()];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = nets.cade_forward(obs.data(), None, &h).unwrap().logits;
    for _ in 0..50 {
        let (a, lp) = sample_action(&logits, &nets.space, &mut rng).unwrap();
        let s = screen_action(&model, &obs, &h, &logits, &a, lp, &cfg(), 1.0, &mut rng).unwrap();
        assert!(s.overridden);
        assert!(s.chosen_cost <= s.proposed_cost);
    }
}

#[test]
fn harmless_estimator_never_overrides() {
    let nets = nets();
    let model = FixedCost { nets: &nets, value: 0.0 };
    let obs = PatchGrid::filled(5, 5, 1.0);
    let h = vec![0.0; nets.hidden_dim()];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = screen_action(&model, &obs, &h, &[0.0; 5], &[1], -1.0, &cfg(), 1.0, &mut rng).unwrap();
    assert_eq!((s.action, s.log_prob, s.overridden), (vec![1], -1.0, false));
}

#[test]
fn activation_gates_training_screens() {
    let c = cfg();
    assert!(!c.active_in_training(0, 300));
    assert!(!c.active_in_training(99, 300));
    assert!(c.active_in_training(100, 300));
    let off = SafetyConfig::default();
    assert!(!off.active_in_training(1000, 300));
    let infer = SafetyConfig {
        mode: SafetyMode::Infer,
        ..SafetyConfig::default()
    };
    assert!(!infer.active_in_training(1000, 300));
    assert!(infer.mode.in_inference());
}

#[test]
fn thresholds_follow_the_environment() {
    let c = SafetyConfig::default();
    assert_eq!(c.threshold_for(EnvKind::CliffCircular), 1.0);
    assert_eq!(c.threshold_for(EnvKind::PlanarRiver), 0.5);
    let c = SafetyConfig {
        threshold: Some(0.3),
        ..c
    };
    assert_eq!(c.threshold_for(EnvKind::CliffCircular), 0.3);
}
