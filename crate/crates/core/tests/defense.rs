use paimfl::attack::{attack_condition, AttackConfig, AttackMode, DefenseCondition, DefenseRow, DefenseSetup};
use paimfl::data::{synthetic_gaussian, SyntheticSpec};
use paimfl::model::MlpModel;
use paimfl::privacy::PrivacyParams;

fn setup(seed: u64, targets: usize, steps: usize) -> DefenseSetup {
    let data = synthetic_gaussian(SyntheticSpec { classes: 10, per_class: 20, feature_dim: 64, separation: 4.0, seed })
        .unwrap();
    let victim = MlpModel::init(vec![64, 32, 10], seed).unwrap();
    let attack = AttackConfig { optimizer_steps: steps, step_size: 5.0, ..AttackConfig::default() };
    DefenseSetup::new(victim, &data, targets, attack, seed).unwrap()
}

fn mean_mse(setup: &DefenseSetup, condition: &DefenseCondition) -> f64 {
    DefenseRow::summarize(condition, &attack_condition(setup, condition).unwrap()).mean_mse
}

#[test]
fn defended_attack_is_worse_on_every_seed() {
    let defended =
        DefenseCondition::defended(PrivacyParams { gamma: 0.07, epsilon: 0.1, ..PrivacyParams::default() }, AttackMode::Iterative);
    for seed in 0..10 {
        let s = setup(seed, 8, 300);
        let open = mean_mse(&s, &DefenseCondition::undefended(AttackMode::Iterative));
        let closed = mean_mse(&s, &defended);
        assert!(closed >= open, "seed {seed}: defended {closed} < undefended {open}");
    }
}

/// Full pipeline at ε = 0.1 and t = 100: the mean reconstruction error over
/// 20 targets must not fall as γ shrinks.
#[test]
fn smaller_gamma_does_not_help_the_attacker() {
    let s = setup(42, 20, 300);
    let means: Vec<f64> = [0.25, 0.15, 0.07]
        .iter()
        .map(|&gamma| {
            let c = DefenseCondition::defended(
                PrivacyParams { gamma, epsilon: 0.1, ..PrivacyParams::default() },
                AttackMode::Iterative,
            );
            mean_mse(&s, &c)
        })
        .collect();
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "mean MSE over gamma 0.25, 0.15, 0.07: {means:?}");
}

#[test]
fn analytic_inversion_recovers_undefended_targets() {
    let s = setup(3, 10, 0);
    let results = attack_condition(&s, &DefenseCondition::undefended(AttackMode::Analytic)).unwrap();
    assert!(results.iter().all(|r| r.mse <= 1e-8), "{:?}", results.iter().map(|r| r.mse).collect::<Vec<_>>());
}

/// Subsampling alone (no noise, no sign reset): fewer kept coordinates leave
/// the attacker less to match.
#[test]
fn smaller_gamma_hurts_the_attacker_when_only_subsampling() {
    let s = setup(42, 20, 300);
    let means: Vec<f64> = [0.25, 0.15, 0.07]
        .iter()
        .map(|&gamma| {
            let c = DefenseCondition::defended(
                PrivacyParams { gamma, epsilon: f64::INFINITY, t: 0, ..PrivacyParams::default() },
                AttackMode::Iterative,
            );
            mean_mse(&s, &c)
        })
        .collect();
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "mean MSE over gamma 0.25, 0.15, 0.07: {means:?}");
}
