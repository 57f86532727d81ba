//! Runnable invariant suite behind `ebm-lab verify`.
//!
//! Every check draws its cases from a fixed seed, reports the worst observed
//! statistic against its bound, and passes or fails on that alone.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{parse_config, RunConfig, Target, TargetKind};
use super::dataset::random_vector;
use super::params_io::{params_to_toml, parse_params};
use super::{stream_rng, Stream};
use crate::bridge::{self, NudgeExperimentConfig, NudgeMode};
use crate::dynamics::{self, DynamicsConfig, NoiseRng};
use crate::learning::{self, Example, LearningConfig, Trainer};
use crate::model::{self, HardSigmoid, LayeredTopology, NetworkParams, StateVector, WeightScale};

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Only checks whose name contains this substring run.
    pub filter: Option<String>,
    pub seed: u64,
    /// Test hook: size of an antisymmetric perturbation added to the
    /// coupling matrix seen by the Jacobian-symmetry check. Zero in normal runs.
    pub inject_asymmetry: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            filter: None,
            seed: 42,
            inject_asymmetry: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
}

impl Bound {
    fn holds(self, value: f64) -> bool {
        match self {
            Bound::AtMost(b) => value <= b,
            Bound::AtLeast(b) => value >= b,
        }
    }
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bound::AtMost(b) if *b == 0.0 => write!(f, "== 0"),
            Bound::AtMost(b) => write!(f, "<= {b:e}"),
            Bound::AtLeast(b) => write!(f, ">= {b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub description: &'static str,
    pub cases: usize,
    /// Worst value over all cases (largest for `AtMost`, smallest for `AtLeast`).
    pub statistic: f64,
    pub bound: Bound,
    pub passed: bool,
}

struct Check {
    name: &'static str,
    description: &'static str,
    bound: Bound,
    run: fn(&mut NoiseRng, &VerifyOptions) -> (usize, f64),
}

const CHECKS: &[Check] = &[
    Check {
        name: "drive-identity",
        description: "drive equals state minus energy gradient",
        bound: Bound::AtMost(1e-12),
        run: check_drive_identity,
    },
    Check {
        name: "energy-gradient-fd",
        description: "energy gradient matches central differences of the energy (relative)",
        bound: Bound::AtMost(1e-6),
        run: check_energy_gradient_fd,
    },
    Check {
        name: "jacobian-symmetry",
        description: "drive Jacobian is symmetric",
        bound: Bound::AtMost(1e-12),
        run: check_jacobian_symmetry,
    },
    Check {
        name: "jacobian-transpose",
        description: "dR_h1/dy equals (dR_y/dh1)^T at fixed points",
        bound: Bound::AtMost(1e-12),
        run: check_jacobian_transpose,
    },
    Check {
        name: "energy-descent",
        description: "noise-free dynamics never raise the energy",
        bound: Bound::AtMost(1e-12),
        run: check_energy_descent,
    },
    Check {
        name: "langevin-identity",
        description: "noisy-state chain satisfies the Langevin update",
        bound: Bound::AtMost(1e-10),
        run: check_langevin,
    },
    Check {
        name: "saturation-decay",
        description: "saturated units decay as (1 - eps)^t",
        bound: Bound::AtMost(1e-10),
        run: check_saturation_decay,
    },
    Check {
        name: "no-saturated-fixed-points",
        description: "largest distance of a converged free unit outside [beta1, beta2]",
        bound: Bound::AtMost(0.0),
        run: check_no_saturated_fixed_points,
    },
    Check {
        name: "settle-stationary",
        description: "settled states are fixed points of the drive",
        bound: Bound::AtMost(1e-10),
        run: check_settle_stationary,
    },
    Check {
        name: "cost-nudge-identity",
        description: "C equals |dy|^2 / (2 eps^2)",
        bound: Bound::AtMost(1e-9),
        run: check_cost_nudge,
    },
    Check {
        name: "one-shot-backprop",
        description: "one-shot probe equals -eps^(k+1) dC/dh_k (relative L2)",
        bound: Bound::AtMost(1e-9),
        run: check_one_shot,
    },
    Check {
        name: "free-run-cosine",
        description: "free-run layer changes align with backprop (cosine)",
        bound: Bound::AtLeast(0.999),
        run: check_free_run,
    },
    Check {
        name: "oracle-agreement",
        description: "chain-rule and finite-difference gradients agree (relative L2)",
        bound: Bound::AtMost(1e-6),
        run: check_oracle_agreement,
    },
    Check {
        name: "stdp-bilinear",
        description: "STDP update scales linearly in the rate of change",
        bound: Bound::AtMost(1e-12),
        run: check_stdp_bilinear,
    },
    Check {
        name: "stdp-fixed-point-zero",
        description: "undriven steps at a fixed point produce no weight change",
        bound: Bound::AtMost(1e-10),
        run: check_stdp_fixed_point,
    },
    Check {
        name: "weight-symmetry",
        description: "symmetrized training keeps forward and backward weights equal",
        bound: Bound::AtMost(1e-12),
        run: check_weight_symmetry,
    },
    Check {
        name: "config-echo",
        description: "resolved config echo parses back identically (mismatches)",
        bound: Bound::AtMost(0.0),
        run: check_config_echo,
    },
    Check {
        name: "params-roundtrip",
        description: "parameter files round-trip bit-exactly (mismatches)",
        bound: Bound::AtMost(0.0),
        run: check_params_roundtrip,
    },
];

/// Names of all checks in run order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

/// Runs the selected checks (in parallel) and returns them in table order.
pub fn run_verify(options: &VerifyOptions) -> Vec<CheckResult> {
    let selected: Vec<(usize, &Check)> = CHECKS
        .iter()
        .enumerate()
        .filter(|(_, c)| options.filter.as_deref().is_none_or(|f| c.name.contains(f)))
        .collect();
    selected
        .par_iter()
        .map(|&(index, check)| {
            let mut rng = stream_rng(options.seed.wrapping_add(index as u64), Stream::Verify);
            let (cases, statistic) = (check.run)(&mut rng, options);
            CheckResult {
                name: check.name,
                description: check.description,
                cases,
                statistic,
                bound: check.bound,
                passed: cases > 0 && check.bound.holds(statistic),
            }
        })
        .collect()
}

/// Fixed-width pass/fail table.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut out = format!("{:<28} {:>6} {:>14} {:>12}  result\n", "check", "cases", "worst", "bound");
    for r in results {
        out.push_str(&format!(
            "{:<28} {:>6} {:>14.3e} {:>12}  {}\n",
            r.name,
            r.cases,
            r.statistic,
            r.bound.to_string(),
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    out
}

// ---- case generation -------------------------------------------------------

fn random_sizes(rng: &mut NoiseRng) -> Vec<usize> {
    let hidden = rng.random_range(2..=4);
    (0..hidden + 2).map(|_| rng.random_range(2..=8)).collect()
}

fn random_net(rng: &mut NoiseRng) -> NetworkParams {
    let topology = LayeredTopology::new(random_sizes(rng)).expect("sizes are valid");
    NetworkParams::random(topology, HardSigmoid::default(), WeightScale::FanIn, rng).expect("init succeeds")
}

fn random_state(n: usize, rng: &mut NoiseRng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.2..1.2)).collect()
}

/// A net, its settled state, input and a random target, with every unit at
/// least `1e-3` from a kink.
struct LinearCase {
    params: NetworkParams,
    fixed: StateVector,
    y: Vec<f64>,
}

fn linear_case(rng: &mut NoiseRng, dynamics: &DynamicsConfig) -> LinearCase {
    loop {
        let params = random_net(rng);
        let topology = params.topology();
        let x = random_vector(topology.layer_size(topology.input_layer()), rng);
        let y = random_vector(topology.layer_size(topology.output_layer()), rng);
        let Ok(fixed) = bridge::settle(&params, &x, dynamics) else {
            continue;
        };
        if model::kink_contacts(params.nonlinearity(), fixed.values(), 1e-3).is_empty() {
            return LinearCase { params, fixed, y };
        }
    }
}

// ---- checks ----------------------------------------------------------------

fn check_drive_identity(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = random_net(rng);
        let s = random_state(p.n_units(), rng);
        let r = model::drive(&p, &s).expect("sizes match");
        let g = model::energy_gradient(&p, &s).expect("sizes match");
        for i in 0..s.len() {
            worst = worst.max((r[i] - (s[i] - g[i])).abs());
        }
    }
    (1000, worst)
}

fn check_energy_gradient_fd(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 200 {
        let p = random_net(rng);
        let mut s = random_state(p.n_units(), rng);
        if !model::kink_contacts(p.nonlinearity(), &s, 10.0 * h).is_empty() {
            continue;
        }
        cases += 1;
        let g = model::energy_gradient(&p, &s).expect("sizes match");
        let mut fd = vec![0.0; s.len()];
        for i in 0..s.len() {
            let c = s[i];
            s[i] = c + h;
            let up = model::energy(&p, &s).expect("sizes match");
            s[i] = c - h;
            let down = model::energy(&p, &s).expect("sizes match");
            s[i] = c;
            fd[i] = (up - down) / (2.0 * h);
        }
        worst = worst.max(bridge::relative_l2_error(&fd, &g));
    }
    (cases, worst)
}

fn check_jacobian_symmetry(rng: &mut NoiseRng, options: &VerifyOptions) -> (usize, f64) {
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = random_net(rng);
        let s = random_state(p.n_units(), rng);
        let mut w = p.global_weights();
        if options.inject_asymmetry != 0.0 {
            let n = w.nrows();
            let a = DMatrix::from_fn(n, n, |i, j| if w[(i, j)] != 0.0 && i < j { options.inject_asymmetry } else { 0.0 });
            w += &a - a.transpose();
        }
        let j = model::jacobian_from_dense(&w, p.nonlinearity(), &s, 0.0);
        worst = worst.max(j.max_asymmetry());
    }
    (1000, worst)
}

fn check_jacobian_transpose(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let cfg = DynamicsConfig::default();
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 200 {
        let p = random_net(rng);
        let topology = p.topology();
        let x = random_vector(topology.layer_size(topology.input_layer()), rng);
        let Ok(fixed) = bridge::settle(&p, &x, &cfg) else {
            continue;
        };
        cases += 1;
        let j = model::drive_jacobian(&p, fixed.values(), 0.0).expect("sizes match").matrix;
        for a in topology.layer_range(0) {
            for b in topology.layer_range(1) {
                worst = worst.max((j[(b, a)] - j[(a, b)]).abs());
            }
        }
    }
    (cases, worst)
}

fn check_energy_descent(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = random_net(rng);
        let mut state = StateVector::free(random_state(p.n_units(), rng));
        let eps = 0.05;
        let mut e = model::energy(&p, state.values()).expect("sizes match");
        for _ in 0..1000 {
            state = dynamics::step_deterministic(&p, &state, eps);
            let next = model::energy(&p, state.values()).expect("sizes match");
            worst = worst.max(next - e);
            e = next;
        }
    }
    (20, worst)
}

fn check_langevin(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let mut worst = 0.0f64;
    for case in 0..10 {
        let p = random_net(rng);
        let topology = p.topology();
        let mut state = StateVector::zeros(topology);
        let x = random_vector(topology.layer_size(topology.input_layer()), rng);
        state.clamp_layer(topology, topology.input_layer(), &x).expect("sizes match");
        let cfg = DynamicsConfig {
            sigma: 0.05,
            seed: case,
            ..Default::default()
        };
        let log = dynamics::langevin_chain(&p, &state, &cfg, 500).expect("valid chain");
        worst = worst.max(dynamics::verify_langevin_identity(&p, &log, &cfg).expect("noise logged"));
    }
    (10, worst)
}

fn check_saturation_decay(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = random_net(rng);
        let unit = rng.random_range(0..p.n_units());
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let s0 = sign * rng.random_range(1.0..3.0);
        let mut values = random_state(p.n_units(), rng);
        values[unit] = s0;
        let mut state = StateVector::free(values);
        let eps = 0.05;
        for t in 1..=200 {
            state = dynamics::step_deterministic(&p, &state, eps);
            let s = state.values()[unit];
            if p.nonlinearity().is_linear(s) {
                break;
            }
            worst = worst.max((s - (1.0 - eps).powi(t) * s0).abs());
        }
    }
    (100, worst)
}

fn check_no_saturated_fixed_points(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let cfg = DynamicsConfig::default();
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 100 {
        let p = random_net(rng);
        let topology = p.topology();
        let mut start = StateVector::free(random_state(p.n_units(), rng));
        let x = random_vector(topology.layer_size(topology.input_layer()), rng);
        start.clamp_layer(topology, topology.input_layer(), &x).expect("sizes match");
        let Ok(relaxed) = dynamics::relax(&p, &start, &cfg) else {
            continue;
        };
        cases += 1;
        let nl = p.nonlinearity();
        for (i, &s) in relaxed.state.values().iter().enumerate() {
            if relaxed.state.is_free(i) && s != 0.0 {
                worst = worst.max((nl.beta1() - s).max(s - nl.beta2()).max(0.0));
            }
        }
    }
    (cases, worst)
}

fn check_settle_stationary(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let cfg = DynamicsConfig::default();
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 100 {
        let p = random_net(rng);
        let topology = p.topology();
        let x = random_vector(topology.layer_size(topology.input_layer()), rng);
        let Ok(fixed) = bridge::settle(&p, &x, &cfg) else {
            continue;
        };
        cases += 1;
        worst = worst.max(dynamics::fixed_point_residual(&p, &fixed).expect("sizes match"));
    }
    (cases, worst)
}

fn check_cost_nudge(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let cfg = DynamicsConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = linear_case(rng, &cfg);
        let eps = 0.01;
        let dy = bridge::nudge_once(&c.params, &c.fixed, &c.y, eps).expect("sizes match");
        let via = dy.iter().map(|d| d * d).sum::<f64>() / (2.0 * eps * eps);
        let cost = bridge::cost(&c.params, &c.fixed, &c.y).expect("sizes match");
        worst = worst.max((cost - via).abs());
    }
    (50, worst)
}

fn nudge_cases(rng: &mut NoiseRng, mode: NudgeMode, epsilon: f64) -> Vec<f64> {
    let cfg = DynamicsConfig::default();
    let nudge = NudgeExperimentConfig {
        epsilon,
        mode,
        ..Default::default()
    };
    (0..20)
        .flat_map(|_| {
            let c = linear_case(rng, &cfg);
            let report = bridge::measure_at_fixed_point(&c.params, &c.fixed, &c.y, &nudge).expect("valid case");
            report
                .layers
                .into_iter()
                .map(move |l| match mode {
                    NudgeMode::OneShotProbe => l.relative_l2_error,
                    NudgeMode::FreeRun => l.cosine_similarity,
                })
        })
        .collect()
}

fn check_one_shot(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let errors = nudge_cases(rng, NudgeMode::OneShotProbe, 0.01);
    (20, errors.into_iter().fold(0.0, f64::max))
}

fn check_free_run(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let cosines = nudge_cases(rng, NudgeMode::FreeRun, 0.01);
    (20, cosines.into_iter().fold(1.0, f64::min))
}

fn check_oracle_agreement(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let cfg = DynamicsConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let c = linear_case(rng, &cfg);
        let bp = bridge::backprop_oracle(&c.params, &c.fixed, &c.y, 1e-3).expect("sizes match");
        let fd = bridge::finite_difference_oracle(&c.params, &c.fixed, &c.y, 1e-5).expect("sizes match");
        worst = worst.max(bridge::relative_l2_error(&fd, &bp.hidden[0]));
    }
    (20, worst)
}

fn check_stdp_bilinear(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let cfg = LearningConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let p = random_net(rng);
        let before = random_state(p.n_units(), rng);
        let change = random_state(p.n_units(), rng);
        let a = rng.random_range(-3.0..3.0);
        let after = |scale: f64| StateVector::free(before.iter().zip(&change).map(|(b, d)| b + scale * d).collect());
        let s0 = StateVector::free(before.clone());
        let d1 = learning::stdp_update(&p, &s0, &after(1.0), &cfg).expect("sizes match");
        let da = learning::stdp_update(&p, &s0, &after(a), &cfg).expect("sizes match");
        for (m1, ma) in d1.forward.iter().zip(&da.forward) {
            let scale = m1.amax().max(1.0);
            worst = worst.max((m1 * a - ma).amax() / scale);
        }
    }
    (200, worst)
}

fn check_stdp_fixed_point(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let dynamics = DynamicsConfig::default();
    let cfg = LearningConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = linear_case(rng, &dynamics);
        let mut state = c.fixed.clone();
        let mut total = learning::WeightDeltas::zeros(c.params.topology());
        for _ in 0..10 {
            let next = dynamics::step_deterministic(&c.params, &state, dynamics.epsilon);
            total.add_assign(&learning::stdp_update(&c.params, &state, &next, &cfg).expect("sizes match"));
            state = next;
        }
        worst = worst.max(total.max_abs());
    }
    (50, worst)
}

fn check_weight_symmetry(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let cfg = LearningConfig {
        epochs: 3,
        dynamics: DynamicsConfig {
            epsilon: 0.02,
            sigma: 0.01,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let p = random_net(rng);
        let topology = p.topology().clone();
        let data: Vec<Example> = (0..8)
            .map(|_| Example {
                x: random_vector(topology.layer_size(topology.input_layer()), rng),
                y: random_vector(topology.layer_size(topology.output_layer()), rng),
            })
            .collect();
        let mut trainer = Trainer::new(p, cfg).expect("valid config");
        for row in trainer.train(&data).expect("training runs") {
            worst = worst.max(row.weight_asymmetry);
        }
        worst = worst.max(model::max_asymmetry(&trainer.params().global_weights()));
    }
    (5, worst)
}

fn check_config_echo(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let mut mismatches = 0.0;
    for _ in 0..50 {
        let layers = random_sizes(rng);
        let n_out = layers[0];
        let config = RunConfig {
            epsilon: rng.random_range(0.001..0.5),
            sigma: rng.random_range(0.0..0.2),
            seed: rng.random_range(0..1u64 << 62),
            target: if rng.random_bool(0.5) {
                Target::Values(random_vector(n_out, rng))
            } else {
                Target::Kind(TargetKind::Free)
            },
            layers,
            ..Default::default()
        };
        if parse_config(&config.to_toml()).as_ref() != Ok(&config) {
            mismatches += 1.0;
        }
    }
    (50, mismatches)
}

fn check_params_roundtrip(rng: &mut NoiseRng, _: &VerifyOptions) -> (usize, f64) {
    let mut mismatches = 0.0;
    for _ in 0..50 {
        let p = random_net(rng);
        if parse_params(&params_to_toml(&p)).ok().as_ref() != Some(&p) {
            mismatches += 1.0;
        }
    }
    (50, mismatches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_selects_by_substring() {
        let r = run_verify(&VerifyOptions {
            filter: Some("langevin".into()),
            ..Default::default()
        });
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].name, "langevin-identity");
        assert!(r[0].passed, "{r:?}");
    }

    #[test]
    fn injected_asymmetry_fails_symmetry_check() {
        let r = run_verify(&VerifyOptions {
            filter: Some("jacobian-symmetry".into()),
            inject_asymmetry: 1e-3,
            ..Default::default()
        });
        assert_eq!(r.len(), 1);
        assert!(!r[0].passed);
        assert!(format_table(&r).contains("jacobian-symmetry"));
    }

    #[test]
    fn check_names_are_unique() {
        let mut names = check_names();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), CHECKS.len());
    }
}
