//! Honest-but-curious reconstruction of private inputs from intercepted
//! updates, and the harness that scores defenses by reconstruction MSE.

use std::fmt;
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetShard;
use crate::engine::{end_local_round, ClientState, EngineError, GlobalUpdate, RoundConfig, Scheme, TrainingParams};
use crate::grad::{GradientVector, SparseUpdate};
use crate::model::{MlpModel, ModelError};
use crate::privacy::PrivacyParams;
use crate::seed::{derive_seed, stream_rng, Stream};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("gradient is not invertible: every first-layer bias gradient is zero")]
    NonInvertible,
    #[error("intercepted update has dimension {found}, victim model has {expected} parameters")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no attack targets")]
    NoTargets,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// `(1/n)·Σ(aᵢ − bᵢ)²`.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AttackError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Gradient-matching distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    /// `‖g − T‖² / ‖T‖²` (plain `‖g‖²` when `T = 0`).
    #[default]
    SquaredL2,
    /// `1 − cos(g, T)`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// The adversary is assumed to know the label; always true.
    pub known_label: bool,
    pub optimizer_steps: usize,
    pub step_size: f64,
    pub distance: Distance,
    pub init_seed: u64,
    /// Box every iterate is projected onto; inputs are known to be
    /// min-max scaled.
    pub bounds: Option<(f64, f64)>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { known_label: true, optimizer_steps: 2000, step_size: 20.0, distance: Distance::SquaredL2, init_seed: 0, bounds: Some((0.0, 1.0)) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    Analytic,
    Iterative,
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::Analytic => "analytic",
            AttackMode::Iterative => "iterative",
        })
    }
}

/// What the adversary produced, before it is scored against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub input: Vec<f64>,
    pub iterations: usize,
    pub mode: AttackMode,
    /// Matching objective of `input` (0 for analytic inversion).
    pub objective: f64,
}

impl Reconstruction {
    pub fn score(self, target: &[f64], target_client: usize) -> Result<AttackResult> {
        let mse = mse(target, &self.input)?;
        Ok(AttackResult {
            reconstruction: self.input,
            mse,
            iterations: self.iterations,
            mode: self.mode,
            objective: self.objective,
            target_client,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub reconstruction: Vec<f64>,
    pub mse: f64,
    pub iterations: usize,
    pub mode: AttackMode,
    pub objective: f64,
    pub target_client: usize,
}

/// Recovers the input of a single-sample gradient through the first dense
/// layer: `∂l/∂W₁[j,:] = δⱼ·x` and `∂l/∂b₁[j] = δⱼ`, so any row with a
/// nonzero bias gradient gives `x`. Uses the row with the largest `|δⱼ|`.
/// The label is not needed.
pub fn analytic_fc_invert(grad: &GradientVector, layer_dims: &[usize]) -> Result<Reconstruction> {
    let expected = crate::model::param_count(layer_dims);
    if layer_dims.len() < 2 || grad.dim() != expected {
        return Err(AttackError::DimensionMismatch { expected, found: grad.dim() });
    }
    let slot = crate::model::layer_slots(layer_dims)[0];
    let g = grad.values();
    let bias = &g[slot.bias_range()];
    let (row, db) = bias
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |best, (j, &b)| if b.abs() > best.1.abs() { (j, b) } else { best });
    if db == 0.0 {
        return Err(AttackError::NonInvertible);
    }
    let w = &g[slot.weight_range()][row * slot.fan_in..(row + 1) * slot.fan_in];
    Ok(Reconstruction { input: w.iter().map(|v| v / db).collect(), iterations: 0, mode: AttackMode::Analytic, objective: 0.0 })
}

/// Single-sample forward and backward pass, keeping what the second-order
/// sweep needs.
struct Tape {
    /// `a₀ = x`, hidden ReLU outputs, then softmax probabilities.
    activations: Vec<Vec<f64>>,
    /// `δ_l = ∂l/∂z_l` for layers `1..=L`, stored at index `l − 1`.
    deltas: Vec<Vec<f64>>,
    grad: Vec<f64>,
}

fn tape(model: &MlpModel, x: &[f64], label: usize) -> Tape {
    let slots = model.slots();
    let w = model.weights();
    let trace = model.forward_one(x);
    let activations = trace.activations;
    let depth = slots.len();
    let mut grad = vec![0.0; model.param_count()];
    let mut deltas = vec![Vec::new(); depth];
    let mut delta = activations[depth].clone();
    delta[label] -= 1.0;
    for l in (0..depth).rev() {
        let slot = slots[l];
        let input = &activations[l];
        let gw = &mut grad[slot.weight_range()];
        for (j, &dj) in delta.iter().enumerate() {
            gw[j * slot.fan_in..(j + 1) * slot.fan_in].iter_mut().zip(input).for_each(|(g, a)| *g = dj * a);
        }
        grad[slot.bias_range()].copy_from_slice(&delta);
        let next = (l > 0).then(|| {
            let wl = &w[slot.weight_range()];
            let mut prev = vec![0.0; slot.fan_in];
            for (j, &dj) in delta.iter().enumerate() {
                prev.iter_mut().zip(&wl[j * slot.fan_in..(j + 1) * slot.fan_in]).for_each(|(p, v)| *p += v * dj);
            }
            prev.iter_mut().zip(input).for_each(|(p, a)| {
                if *a <= 0.0 {
                    *p = 0.0
                }
            });
            prev
        });
        deltas[l] = std::mem::take(&mut delta);
        if let Some(prev) = next {
            delta = prev;
        }
    }
    Tape { activations, deltas, grad }
}

/// Distance between `g` and `target` and its gradient with respect to `g`.
fn distance_and_grad(g: &[f64], target: &[f64], target_sq: f64, distance: Distance) -> (f64, Vec<f64>) {
    match distance {
        Distance::SquaredL2 => {
            let norm = if target_sq > 0.0 { target_sq } else { 1.0 };
            let mut d = 0.0;
            let grad = g
                .iter()
                .zip(target)
                .map(|(a, t)| {
                    let r = a - t;
                    d += r * r;
                    2.0 * r / norm
                })
                .collect();
            (d / norm, grad)
        }
        Distance::Cosine => {
            let gg: f64 = g.iter().map(|v| v * v).sum();
            let gt: f64 = g.iter().zip(target).map(|(a, b)| a * b).sum();
            if gg == 0.0 || target_sq == 0.0 {
                return (1.0, vec![0.0; g.len()]);
            }
            let (gn, tn) = (gg.sqrt(), target_sq.sqrt());
            let cos = gt / (gn * tn);
            let grad = g.iter().zip(target).map(|(a, t)| -t / (gn * tn) + cos * a / gg).collect();
            (1.0 - cos, grad)
        }
    }
}

/// Matching objective at `x` and its gradient with respect to `x`, by
/// reverse-mode differentiation through the backward pass.
fn objective_and_input_grad(
    model: &MlpModel,
    x: &[f64],
    label: usize,
    target: &[f64],
    target_sq: f64,
    distance: Distance,
) -> (f64, Vec<f64>) {
    let slots = model.slots();
    let w = model.weights();
    let depth = slots.len();
    let t = tape(model, x, label);
    let (objective, gbar) = distance_and_grad(&t.grad, target, target_sq, distance);

    // adjoints of the backward pass: δ̄ per layer, ā per layer input
    let mut dbar: Vec<Vec<f64>> = slots.iter().map(|s| vec![0.0; s.fan_out]).collect();
    let mut abar: Vec<Vec<f64>> = slots.iter().map(|s| vec![0.0; s.fan_in]).collect();
    for l in 0..depth {
        let slot = slots[l];
        let input = &t.activations[l];
        let gw = &gbar[slot.weight_range()];
        let delta = &t.deltas[l];
        for (j, db) in dbar[l].iter_mut().enumerate() {
            let row = &gw[j * slot.fan_in..(j + 1) * slot.fan_in];
            *db += gbar[slot.bias_offset + j] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            let dj = delta[j];
            if dj != 0.0 {
                abar[l].iter_mut().zip(row).for_each(|(ab, r)| *ab += r * dj);
            }
        }
        if l + 1 < depth {
            // δ_l = (W_{l+1}ᵀ δ_{l+1}) ⊙ 1[a_l > 0]; the mask is locally constant
            let up = slots[l + 1];
            let wl = &w[up.weight_range()];
            let masked: Vec<f64> =
                dbar[l].iter().zip(&t.activations[l + 1]).map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }).collect();
            for k in 0..up.fan_out {
                let row = &wl[k * up.fan_in..(k + 1) * up.fan_in];
                dbar[l + 1][k] += row.iter().zip(&masked).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }

    // δ_L = p − onehot(y): p̄ = δ̄_L, then back through softmax and the forward pass
    let p = &t.activations[depth];
    let pbar = &dbar[depth - 1];
    let dot: f64 = p.iter().zip(pbar).map(|(a, b)| a * b).sum();
    let mut zbar: Vec<f64> = p.iter().zip(pbar).map(|(pi, bi)| pi * (bi - dot)).collect();
    for l in (0..depth).rev() {
        let slot = slots[l];
        let wl = &w[slot.weight_range()];
        for (j, &zj) in zbar.iter().enumerate() {
            if zj != 0.0 {
                abar[l].iter_mut().zip(&wl[j * slot.fan_in..(j + 1) * slot.fan_in]).for_each(|(ab, v)| *ab += v * zj);
            }
        }
        if l > 0 {
            zbar = abar[l].iter().zip(&t.activations[l]).map(|(a, act)| if *act > 0.0 { *a } else { 0.0 }).collect();
        }
    }
    (objective, abar.swap_remove(0))
}

/// Gradient-matching reconstruction: plain gradient descent on a dummy input
/// so that its single-sample gradient approaches the (densified) intercepted
/// update. Returns the iterate with the lowest objective.
pub fn iterative_dra(
    intercepted: &SparseUpdate,
    victim: &MlpModel,
    true_label: usize,
    config: &AttackConfig,
) -> Result<Reconstruction> {
    if intercepted.dim() != victim.param_count() {
        return Err(AttackError::DimensionMismatch { expected: victim.param_count(), found: intercepted.dim() });
    }
    if true_label >= victim.classes() {
        return Err(AttackError::LabelOutOfRange { label: true_label, classes: victim.classes() });
    }
    let target = intercepted.densify().into_values();
    let target_sq: f64 = target.iter().map(|v| v * v).sum();
    let mut rng = stream_rng(config.init_seed, Stream::AttackInit, &[]);
    let mut x: Vec<f64> = (0..victim.input_dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

    let mut best = Reconstruction { input: x.clone(), iterations: 0, mode: AttackMode::Iterative, objective: f64::INFINITY };
    for step in 0..=config.optimizer_steps {
        let (objective, gx) = objective_and_input_grad(victim, &x, true_label, &target, target_sq, config.distance);
        if !objective.is_finite() || gx.iter().any(|v| !v.is_finite()) {
            break;
        }
        if objective < best.objective {
            best.input.clone_from(&x);
            best.objective = objective;
        }
        best.iterations = step;
        if step == config.optimizer_steps {
            break;
        }
        x.iter_mut().zip(&gx).for_each(|(xi, g)| *xi -= config.step_size * g);
        if let Some((lo, hi)) = config.bounds {
            x.iter_mut().for_each(|xi| *xi = xi.clamp(lo, hi));
        }
    }
    Ok(best)
}

/// One attacked configuration of the defense experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseCondition {
    pub name: String,
    pub scheme: Scheme,
    pub privacy: PrivacyParams,
    pub mode: AttackMode,
}

impl DefenseCondition {
    pub fn undefended(mode: AttackMode) -> Self {
        Self {
            name: "undefended".into(),
            scheme: Scheme::NoDefenseFedAvg,
            privacy: PrivacyParams { epsilon: f64::INFINITY, gamma: 1.0, t: 0, ..PrivacyParams::default() },
            mode,
        }
    }

    pub fn defended(privacy: PrivacyParams, mode: AttackMode) -> Self {
        Self { name: "pa-imfl".into(), scheme: Scheme::PaImfl, privacy, mode }
    }
}

/// The victim and its private samples.
#[derive(Debug, Clone)]
pub struct DefenseSetup {
    /// Model whose gradients are intercepted (the initial global model).
    pub victim: MlpModel,
    /// One row per attacked sample.
    pub targets: DatasetShard,
    pub attack: AttackConfig,
    pub seed: u64,
}

impl DefenseSetup {
    /// Picks `n` distinct rows of `data` as targets.
    pub fn new(victim: MlpModel, data: &DatasetShard, n: usize, attack: AttackConfig, seed: u64) -> Result<Self> {
        if n == 0 || data.is_empty() {
            return Err(AttackError::NoTargets);
        }
        let mut rng = stream_rng(seed, Stream::Targets, &[]);
        let mut rows = index::sample(&mut rng, data.len(), n.min(data.len())).into_vec();
        rows.sort_unstable();
        Ok(Self { victim, targets: data.select(&rows), attack, seed })
    }
}

/// The uplink target `i` would send in round 0 when training on its sample
/// alone, as seen by the edge.
pub fn intercept_end_uplink(setup: &DefenseSetup, condition: &DefenseCondition, i: usize) -> Result<SparseUpdate> {
    let sample = setup.targets.select(&[i]);
    let cfg = RoundConfig {
        scheme: condition.scheme,
        privacy: condition.privacy,
        training: TrainingParams { eta: 0.0, decay: 0.0, batch_size: 1, local_steps: 1 },
    };
    let client_seed = derive_seed(setup.seed, &[Stream::Participant as u64, i as u64]);
    let state = ClientState::new(i, client_seed, setup.victim.layer_dims().to_vec())?;
    let initial = GlobalUpdate::InitialModel(setup.victim.weights().to_vec());
    let (payload, _, _) = end_local_round(state, &initial, 0, &cfg, &sample)?;
    Ok(payload.to_sparse())
}

/// Attacks every target under `condition`. Attack initializations depend on
/// the target index only, so conditions are paired.
pub fn attack_condition(setup: &DefenseSetup, condition: &DefenseCondition) -> Result<Vec<AttackResult>> {
    (0..setup.targets.len())
        .into_par_iter()
        .map(|i| {
            let intercepted = intercept_end_uplink(setup, condition, i)?;
            let target = setup.targets.row(i);
            let reconstruction = match condition.mode {
                AttackMode::Analytic => match analytic_fc_invert(&intercepted.densify(), setup.victim.layer_dims()) {
                    Ok(r) => r,
                    // nothing to invert: the best guess is the zero image
                    Err(AttackError::NonInvertible) => Reconstruction {
                        input: vec![0.0; target.len()],
                        iterations: 0,
                        mode: AttackMode::Analytic,
                        objective: f64::INFINITY,
                    },
                    Err(e) => return Err(e),
                },
                AttackMode::Iterative => {
                    let attack =
                        AttackConfig { init_seed: derive_seed(setup.seed, &[i as u64]), ..setup.attack };
                    iterative_dra(&intercepted, &setup.victim, setup.targets.labels()[i], &attack)?
                }
            };
            reconstruction.score(target, i)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseRow {
    pub condition: String,
    pub gamma: f64,
    pub epsilon: f64,
    pub t: u32,
    pub n_targets: usize,
    pub mean_mse: f64,
    /// Population standard deviation.
    pub std_mse: f64,
    pub mode: AttackMode,
}

impl DefenseRow {
    pub fn summarize(condition: &DefenseCondition, results: &[AttackResult]) -> Self {
        let n = results.len();
        let mean = results.iter().map(|r| r.mse).sum::<f64>() / n.max(1) as f64;
        let var = results.iter().map(|r| (r.mse - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
        Self {
            condition: condition.name.clone(),
            gamma: condition.privacy.gamma,
            epsilon: condition.privacy.epsilon,
            t: condition.privacy.t,
            n_targets: n,
            mean_mse: mean,
            std_mse: var.sqrt(),
            mode: condition.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DefenseReport {
    pub rows: Vec<DefenseRow>,
}

impl DefenseReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,gamma,epsilon,t,n_targets,mean_mse,std_mse,mode\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.condition, r.gamma, r.epsilon, r.t, r.n_targets, r.mean_mse, r.std_mse, r.mode
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Attacks every condition on the same targets.
pub fn defense_report(setup: &DefenseSetup, conditions: &[DefenseCondition]) -> Result<DefenseReport> {
    let rows = conditions
        .iter()
        .map(|c| attack_condition(setup, c).map(|results| DefenseRow::summarize(c, &results)))
        .collect::<Result<_>>()?;
    Ok(DefenseReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_gaussian, SyntheticSpec};
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    fn small_model(seed: u64) -> MlpModel {
        MlpModel::init(vec![6, 5, 4, 3], seed).unwrap()
    }

    fn single_gradient(model: &MlpModel, x: &[f64], y: usize) -> GradientVector {
        let shard = DatasetShard::new(x.to_vec(), vec![y], x.len(), model.classes()).unwrap();
        model.forward_backward(shard.view()).unwrap().1
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert_eq!(mse(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(mse(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn tape_gradient_matches_model() {
        let model = small_model(3);
        let x = [0.1, 0.9, 0.4, 0.0, 0.7, 0.3];
        let t = tape(&model, &x, 2);
        assert_eq!(t.grad, single_gradient(&model, &x, 2).into_values());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for distance in [Distance::SquaredL2, Distance::Cosine] {
            let model = small_model(11);
            let truth = [0.2, 0.8, 0.5, 0.1, 0.9, 0.4];
            let target = single_gradient(&model, &truth, 1).into_values();
            let tsq: f64 = target.iter().map(|v| v * v).sum();
            let x = [0.5, 0.3, 0.6, 0.7, 0.2, 0.6];
            let (_, g) = objective_and_input_grad(&model, &x, 1, &target, tsq, distance);
            let h = 1e-6;
            for i in 0..x.len() {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fp = objective_and_input_grad(&model, &xp, 1, &target, tsq, distance).0;
                let fm = objective_and_input_grad(&model, &xm, 1, &target, tsq, distance).0;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "{distance:?} coord {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn analytic_inversion_is_exact_for_one_sample() {
        let model = MlpModel::init(vec![784, 64, 10], 1).unwrap();
        let x: Vec<f64> = (0..784).map(|i| ((i * 37) % 255) as f64 / 255.0).collect();
        let g = single_gradient(&model, &x, 4);
        let r = analytic_fc_invert(&g, model.layer_dims()).unwrap();
        assert!(mse(&x, &r.input).unwrap() <= 1e-8);
    }

    #[test]
    fn analytic_inversion_of_a_batch_is_a_mixture() {
        // no hidden layer: every output row mixes both samples
        let model = MlpModel::init(vec![6, 3], 5).unwrap();
        let a = [0.9, 0.1, 0.8, 0.2, 0.7, 0.3];
        let b = [0.1, 0.9, 0.2, 0.8, 0.3, 0.7];
        let single = analytic_fc_invert(&single_gradient(&model, &a, 0), model.layer_dims()).unwrap();
        let batch = DatasetShard::new([a, b].concat(), vec![0, 2], 6, 3).unwrap();
        let g = model.forward_backward(batch.view()).unwrap().1;
        let mixed = analytic_fc_invert(&g, model.layer_dims()).unwrap();
        let e_single = mse(&a, &single.input).unwrap();
        let e_mixed = mse(&a, &mixed.input).unwrap();
        assert!(e_mixed > e_single, "{e_mixed} vs {e_single}");
    }

    #[test]
    fn zero_gradient_is_not_invertible() {
        let dims = [6, 5, 3];
        let zero = GradientVector::zeros(crate::model::param_count(&dims));
        assert!(matches!(analytic_fc_invert(&zero, &dims), Err(AttackError::NonInvertible)));
    }

    #[test]
    fn zero_steps_return_initialization() {
        let model = small_model(2);
        let g = single_gradient(&model, &[0.5; 6], 0).sparsify();
        let cfg = AttackConfig { optimizer_steps: 0, init_seed: 77, ..AttackConfig::default() };
        let r = iterative_dra(&g, &model, 0, &cfg).unwrap();
        let mut rng = stream_rng(77, Stream::AttackInit, &[]);
        let init: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        assert_eq!(r.input, init);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn attack_leaves_victim_untouched_and_is_deterministic() {
        let model = small_model(4);
        let before = model.clone();
        let g = single_gradient(&model, &[0.2, 0.4, 0.6, 0.8, 1.0, 0.0], 1).sparsify();
        let cfg = AttackConfig { optimizer_steps: 50, ..AttackConfig::default() };
        let a = iterative_dra(&g, &model, 1, &cfg).unwrap();
        let b = iterative_dra(&g, &model, 1, &cfg).unwrap();
        assert_eq!(model, before);
        assert_eq!(a, b);
    }

    #[test]
    fn singleton_report_statistics() {
        let c = DefenseCondition::undefended(AttackMode::Iterative);
        let r = AttackResult {
            reconstruction: vec![],
            mse: 0.25,
            iterations: 1,
            mode: AttackMode::Iterative,
            objective: 0.0,
            target_client: 0,
        };
        let row = DefenseRow::summarize(&c, &[r]);
        assert_eq!(row.mean_mse, 0.25);
        assert_eq!(row.std_mse, 0.0);
    }

    #[test]
    fn report_is_deterministic() {
        let data =
            synthetic_gaussian(SyntheticSpec { classes: 3, per_class: 5, feature_dim: 8, separation: 4.0, seed: 1 }).unwrap();
        let victim = MlpModel::init(vec![8, 6, 3], 3).unwrap();
        let setup = DefenseSetup::new(
            victim,
            &data,
            4,
            AttackConfig { optimizer_steps: 20, ..AttackConfig::default() },
            9,
        )
        .unwrap();
        let conditions = [
            DefenseCondition::undefended(AttackMode::Iterative),
            DefenseCondition::defended(PrivacyParams { gamma: 0.5, ..PrivacyParams::default() }, AttackMode::Iterative),
        ];
        let a = defense_report(&setup, &conditions).unwrap();
        assert_eq!(a, defense_report(&setup, &conditions).unwrap());
        assert_eq!(a.rows.len(), 2);
        assert!(a.to_csv().starts_with("condition,gamma,epsilon,t,n_targets,mean_mse,std_mse,mode\n"));
    }

    proptest! {
        #[test]
        fn mse_is_symmetric(a in prop::collection::vec(-5.0f64..5.0, 1..40), seed in any::<u64>()) {
            let mut rng = stream_rng(seed, Stream::AttackInit, &[]);
            let b: Vec<f64> = a.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn best_iterate_never_worse_than_init(seed in 0u64..50) {
            let model = small_model(seed);
            let g = single_gradient(&model, &[0.3, 0.6, 0.9, 0.1, 0.4, 0.7], 2).sparsify();
            let zero = AttackConfig { optimizer_steps: 0, init_seed: seed, ..AttackConfig::default() };
            let many = AttackConfig { optimizer_steps: 30, ..zero };
            let a = iterative_dra(&g, &model, 2, &zero).unwrap();
            let b = iterative_dra(&g, &model, 2, &many).unwrap();
            prop_assert!(b.objective <= a.objective);
        }
    }
}
