//! Self-play losses.
//!
//! With `A`/`B` the squared residuals of a real/synthetic sample under the
//! main player and `A_k`/`B_k` under the frozen opponent, each loss is a
//! mean of `l(u)` where
//!
//! * exact: `u = -sum_t (beta_t / T) [A - A_k - B + B_k]` over whole paths,
//!   residuals `x_{t-1} - mu(x_t)`;
//! * approx-mu: `u = -beta_t [A - A_k - B + B_k]` for one pair;
//! * approx-eps: `u = -beta_t h_t^2 [A - A_k - B + B_k]` with residuals
//!   `eps - eps_theta(x_t)`. With backward synthetic samples the synthetic
//!   residual becomes `eps_k(x'_t) - eps_theta(x'_t)` and `B_k` vanishes.

use super::{eps_residual_term, mu_residual_term, LossVariant, NoisedSample, SpinLossConfig, SpinTerms, SyntheticPairs};
use crate::diffusion::{mu_theta, pairs_from_trajectory, PairProvenance, Provenance, StepPair, Trajectory};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score_net::{eval_loss, eval_scores, Graph, ScoreModelParams, ScoreQuery, Var};

/// One real and one synthetic path.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub real: Trajectory,
    pub synth: Trajectory,
}

/// Batch for any loss variant.
#[derive(Debug, Clone, PartialEq)]
pub enum SpinBatch {
    Trajectories(Vec<TrajectoryPair>),
    Pairs { real: Vec<StepPair>, synth: Vec<StepPair> },
    Noised { real: Vec<NoisedSample>, synth: Vec<NoisedSample> },
}

impl SpinBatch {
    pub fn len(&self) -> usize {
        match self {
            SpinBatch::Trajectories(v) => v.len(),
            SpinBatch::Pairs { real, .. } => real.len(),
            SpinBatch::Noised { real, .. } => real.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn variant(&self) -> LossVariant {
        match self {
            SpinBatch::Trajectories(_) => LossVariant::Exact,
            SpinBatch::Pairs { .. } => LossVariant::ApproxMu,
            SpinBatch::Noised { .. } => LossVariant::ApproxEps,
        }
    }
}

fn exact_terms(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    batch: &[TrajectoryPair],
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<SpinTerms> {
    let steps = schedule.steps();
    let mut real = Vec::with_capacity(batch.len() * steps);
    let mut synth = Vec::with_capacity(batch.len() * steps);
    for p in batch {
        for (traj, want) in [(&p.real, Provenance::Real), (&p.synth, Provenance::Synthetic)] {
            if traj.states.len() != steps + 1 {
                return Err(Error::Dimension { expected: steps + 1, got: traj.states.len() });
            }
            if traj.provenance != want {
                return Err(Error::config(format!("expected a {want:?} trajectory, got {:?}", traj.provenance)));
            }
        }
        real.extend(pairs_from_trajectory(&p.real));
        synth.extend(pairs_from_trajectory(&p.synth));
    }
    let real_refs: Vec<&StepPair> = real.iter().collect();
    let synth_refs: Vec<&StepPair> = synth.iter().collect();
    let weights: Vec<f64> = real.iter().map(|p| cfg.beta(p.t) / steps as f64).collect();
    SpinTerms::with_opponent(
        mu_residual_term(theta, &real_refs, schedule)?,
        mu_residual_term(theta, &synth_refs, schedule)?,
        weights.clone(),
        weights,
        steps,
        theta_k,
    )
}

fn approx_terms(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    real: &[StepPair],
    synth: &[StepPair],
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<SpinTerms> {
    if real.len() != synth.len() {
        return Err(Error::config(format!("{} real pairs vs {} synthetic pairs", real.len(), synth.len())));
    }
    if let Some(p) = real.iter().find(|p| p.provenance != PairProvenance::Real) {
        return Err(Error::config(format!("real batch contains a {:?} pair", p.provenance)));
    }
    if let Some(p) = synth.iter().find(|p| p.provenance == PairProvenance::Real) {
        return Err(Error::config(format!("synthetic batch contains a {:?} pair", p.provenance)));
    }
    let real_refs: Vec<&StepPair> = real.iter().collect();
    let synth_refs: Vec<&StepPair> = synth.iter().collect();
    SpinTerms::with_opponent(
        mu_residual_term(theta, &real_refs, schedule)?,
        mu_residual_term(theta, &synth_refs, schedule)?,
        real.iter().map(|p| cfg.beta(p.t)).collect(),
        synth.iter().map(|p| cfg.beta(p.t)).collect(),
        1,
        theta_k,
    )
}

fn eps_terms(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    real: &[NoisedSample],
    synth: &[NoisedSample],
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<SpinTerms> {
    if synth.is_empty() && !real.is_empty() {
        return Err(Error::config("missing synthetic batch"));
    }
    if real.len() != synth.len() {
        return Err(Error::config(format!("{} real samples vs {} synthetic samples", real.len(), synth.len())));
    }
    let weight = |t: usize| cfg.beta(t) * schedule.h(t).powi(2);
    let real_term = eps_residual_term(theta, real, schedule)?;
    let synth_term = match cfg.synthetic_pairs {
        SyntheticPairs::Forwardized => eps_residual_term(theta, synth, schedule)?,
        SyntheticPairs::Backward => {
            // target is the opponent's own prediction; eps is unused
            let queries: Vec<ScoreQuery<'_>> = synth
                .iter()
                .map(|s| ScoreQuery { x: &s.x_t, condition: s.condition.label, t: s.t })
                .collect();
            let opp = eval_scores(theta_k, &queries, schedule.steps())?;
            let targeted: Vec<NoisedSample> = synth
                .iter()
                .enumerate()
                .map(|(i, s)| NoisedSample { eps: opp.row(i).to_vec(), ..s.clone() })
                .collect();
            eps_residual_term(theta, &targeted, schedule)?
        }
    };
    SpinTerms::with_opponent(
        real_term,
        synth_term,
        real.iter().map(|s| weight(s.t)).collect(),
        synth.iter().map(|s| weight(s.t)).collect(),
        1,
        theta_k,
    )
}

/// Residual terms for `batch`, checked against the configured variant.
pub(crate) fn spin_terms(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    batch: &SpinBatch,
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<SpinTerms> {
    cfg.validate(schedule)?;
    if batch.variant() != cfg.variant {
        return Err(Error::config(format!(
            "batch is for the {:?} loss but the configuration selects {:?}",
            batch.variant(),
            cfg.variant
        )));
    }
    if theta.arch() != theta_k.arch() {
        return Err(Error::config("main player and opponent architectures differ"));
    }
    match batch {
        SpinBatch::Trajectories(b) => exact_terms(theta, theta_k, b, cfg, schedule),
        SpinBatch::Pairs { real, synth } => approx_terms(theta, theta_k, real, synth, cfg, schedule),
        SpinBatch::Noised { real, synth } => eps_terms(theta, theta_k, real, synth, cfg, schedule),
    }
}

/// The configured loss on `g` (whose parameters are the main player).
pub fn spin_loss_graph(
    g: &mut Graph<'_>,
    theta_k: &ScoreModelParams,
    batch: &SpinBatch,
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let terms = spin_terms(g.params(), theta_k, batch, cfg, schedule)?;
    Ok(terms.loss(g, cfg.ell))
}

pub fn spin_loss(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    batch: &SpinBatch,
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    eval_loss(theta, |g| spin_loss_graph(g, theta_k, batch, cfg, schedule))
}

fn with_variant(cfg: &SpinLossConfig, variant: LossVariant) -> SpinLossConfig {
    SpinLossConfig { variant, ..cfg.clone() }
}

pub fn spin_exact_graph(
    g: &mut Graph<'_>,
    theta_k: &ScoreModelParams,
    batch: &[TrajectoryPair],
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let cfg = SpinLossConfig { synthetic_pairs: SyntheticPairs::Backward, ..with_variant(cfg, LossVariant::Exact) };
    spin_loss_graph(g, theta_k, &SpinBatch::Trajectories(batch.to_vec()), &cfg, schedule)
}

/// Trajectory-level loss averaged over path pairs.
pub fn spin_exact_loss(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    batch: &[TrajectoryPair],
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    eval_loss(theta, |g| spin_exact_graph(g, theta_k, batch, cfg, schedule))
}

pub fn spin_approx_graph(
    g: &mut Graph<'_>,
    theta_k: &ScoreModelParams,
    real: &[StepPair],
    synth: &[StepPair],
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let batch = SpinBatch::Pairs { real: real.to_vec(), synth: synth.to_vec() };
    spin_loss_graph(g, theta_k, &batch, &with_variant(cfg, LossVariant::ApproxMu), schedule)
}

/// Pairwise loss; real pair `i` is compared with synthetic pair `i`.
pub fn spin_approx_loss(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    real: &[StepPair],
    synth: &[StepPair],
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    eval_loss(theta, |g| spin_approx_graph(g, theta_k, real, synth, cfg, schedule))
}

pub fn spin_eps_graph(
    g: &mut Graph<'_>,
    theta_k: &ScoreModelParams,
    real: &[NoisedSample],
    synth: &[NoisedSample],
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let batch = SpinBatch::Noised { real: real.to_vec(), synth: synth.to_vec() };
    spin_loss_graph(g, theta_k, &batch, &with_variant(cfg, LossVariant::ApproxEps), schedule)
}

/// Noise-space loss. `cfg.synthetic_pairs` picks the four-term form
/// (forwardized synthetic samples) or the three-term form (synthetic `x'_t`
/// taken from opponent reverse paths; their `eps` is ignored).
pub fn spin_eps_loss(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    real: &[NoisedSample],
    synth: &[NoisedSample],
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    eval_loss(theta, |g| spin_eps_graph(g, theta_k, real, synth, cfg, schedule))
}

/// `lambda * log(p_theta / p_theta_k)` of the path `x_{1:T}` given `c`,
/// through the per-step Gaussian transitions. The final step into `x_0` is
/// deterministic and carries no density, so it is left out; the terminal
/// `x_T` factor is parameter-free and cancels.
pub fn test_function(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    traj: &Trajectory,
    lambda: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("lambda must be positive, got {lambda}")));
    }
    let steps = schedule.steps();
    if traj.states.len() != steps + 1 {
        return Err(Error::Dimension { expected: steps + 1, got: traj.states.len() });
    }
    if let Some(t) = (2..=steps).find(|&t| schedule.sigma(t) == 0.0) {
        return Err(Error::Schedule(format!("sigma_{t} = 0: the path has no density")));
    }
    let mut total = 0.0;
    for t in 2..=steps {
        let x_prev = &traj.states[t - 1];
        let x_t = &traj.states[t];
        let sq = |mu: Vec<f64>| -> f64 { x_prev.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum() };
        let main = sq(mu_theta(x_t, traj.condition, t, theta, schedule)?);
        let opp = sq(mu_theta(x_t, traj.condition, t, theta_k, schedule)?);
        total += (opp - main) / (2.0 * schedule.sigma(t).powi(2));
    }
    Ok(lambda * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forward_trajectory, forwardized_synthetic_pair, real_pair, reverse_sample, reverse_trajectories};
    use crate::losses::EllKind;
    use crate::rng::{self, StreamId};
    use crate::schedule::{make_schedule, NoiseSchedule, ScheduleShape};
    use crate::score_net::{Activation, Architecture, Condition};

    fn arch(d: usize) -> Architecture {
        Architecture {
            data_dim: d,
            conditions: 2,
            time_features: 4,
            hidden: vec![6],
            activation: Activation::Tanh,
            output_clamp: 10.0,
        }
    }

    fn random(arch: Architecture, seed: u64, scale: f64) -> ScoreModelParams {
        let mut r = rng::seeded(seed);
        let v = rng::standard_normal(&mut r, arch.param_count()).into_iter().map(|x| scale * x).collect();
        ScoreModelParams::from_flat(arch, v).unwrap()
    }

    fn cfg(schedule: &NoiseSchedule, variant: LossVariant, pairs: SyntheticPairs) -> SpinLossConfig {
        SpinLossConfig {
            variant,
            synthetic_pairs: pairs,
            ..SpinLossConfig::new(vec![1.0; schedule.steps()])
        }
    }

    fn cond(i: usize) -> Condition {
        Condition::new(i % 2, 2).unwrap()
    }

    fn traj_batch(theta_k: &ScoreModelParams, s: &NoiseSchedule, n: usize, seed: u64) -> Vec<TrajectoryPair> {
        let conds: Vec<Condition> = (0..n).map(cond).collect();
        let synth = reverse_trajectories(theta_k, &conds, s, seed, 2).unwrap();
        let mut r = rng::seeded(seed);
        synth
            .into_iter()
            .enumerate()
            .map(|(i, sy)| {
                let x0 = rng::standard_normal(&mut r, theta_k.arch().data_dim);
                let real = forward_trajectory(&x0, cond(i), s, StreamId::new(seed, 1, i as u64)).unwrap();
                TrajectoryPair { real, synth: sy }
            })
            .collect()
    }

    #[test]
    fn fixed_point_for_every_variant() {
        let s = make_schedule(6, ScheduleShape::Cosine, 1.0).unwrap();
        let theta_k = random(arch(2), 3, 0.5);
        let trajs = traj_batch(&theta_k, &s, 4, 9);
        for ell in EllKind::all() {
            let mut c = cfg(&s, LossVariant::Exact, SyntheticPairs::Backward);
            c.ell = ell;
            assert_eq!(spin_exact_loss(&theta_k, &theta_k, &trajs, &c, &s).unwrap(), ell.at_zero());
            let real: Vec<StepPair> = trajs.iter().map(|p| pairs_from_trajectory(&p.real)[2].clone()).collect();
            let synth: Vec<StepPair> = trajs.iter().map(|p| pairs_from_trajectory(&p.synth)[2].clone()).collect();
            assert_eq!(spin_approx_loss(&theta_k, &theta_k, &real, &synth, &c, &s).unwrap(), ell.at_zero());
            let mut r = rng::seeded(1);
            let noised: Vec<NoisedSample> = (0..4)
                .map(|i| NoisedSample::new(&[0.1, 0.2], cond(i), rng::standard_normal(&mut r, 2), 1 + i, &s).unwrap())
                .collect();
            for pairs in [SyntheticPairs::Forwardized, SyntheticPairs::Backward] {
                c.synthetic_pairs = pairs;
                let v = spin_eps_loss(&theta_k, &theta_k, &noised, &noised[..], &c, &s).unwrap();
                assert_eq!(v, ell.at_zero());
            }
        }
        assert!((EllKind::Logistic.at_zero() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn correlation_loss_with_equal_norms_is_one() {
        // theta and theta_k differ, but the synthetic pair equals the real pair
        let s = make_schedule(4, ScheduleShape::Cosine, 1.0).unwrap();
        let theta = random(arch(2), 1, 0.4);
        let theta_k = random(arch(2), 2, 0.4);
        let mut r = rng::seeded(3);
        let real = real_pair(&[0.5, 0.5], cond(0), 3, &s, &mut r).unwrap();
        let synth = StepPair { provenance: PairProvenance::SyntheticForwardized, ..real.clone() };
        let mut c = cfg(&s, LossVariant::ApproxMu, SyntheticPairs::Forwardized);
        c.ell = EllKind::Correlation;
        let v = spin_approx_loss(&theta, &theta_k, &[real], &[synth], &c, &s).unwrap();
        assert_eq!(v, 1.0);
    }

    /// d = 1 nets whose output is a constant bias.
    fn constant_net(b: f64) -> ScoreModelParams {
        let a = Architecture {
            data_dim: 1,
            conditions: 2,
            time_features: 2,
            hidden: vec![1],
            activation: Activation::Tanh,
            output_clamp: 10.0,
        };
        let mut v = vec![0.0; a.param_count()];
        *v.last_mut().unwrap() = b;
        ScoreModelParams::from_flat(a, v).unwrap()
    }

    fn hand_schedule() -> NoiseSchedule {
        // alpha = [1, 0.5, 0.04], sigma = [0, 0.3]
        NoiseSchedule::from_parts(vec![1.0, 0.5, 0.04], vec![0.0, 0.3], vec![1.0, 1.0]).unwrap()
    }

    /// Hand-expanded `mu = sqrt(a_{t-1}) (x - sqrt(1 - a_t) e) / sqrt(a_t) + sqrt(1 - a_{t-1} - s^2) e`.
    fn hand_mu(t: usize, x: f64, e: f64) -> f64 {
        match t {
            1 => (x - 0.5f64.sqrt() * e) / 0.5f64.sqrt(),
            2 => 0.5f64.sqrt() * (x - 0.96f64.sqrt() * e) / 0.2 + (1.0 - 0.5 - 0.09f64).sqrt() * e,
            _ => unreachable!(),
        }
    }

    fn hand_traj(states: [f64; 3], provenance: Provenance) -> Trajectory {
        Trajectory {
            condition: cond(0),
            states: states.iter().map(|&v| vec![v]).collect(),
            provenance,
            seed: StreamId::new(0, 0, 0),
            model: None,
        }
    }

    #[test]
    fn hand_computed_two_step_instance() {
        let s = hand_schedule();
        let (theta, theta_k) = (constant_net(0.3), constant_net(-0.2));
        let real = hand_traj([0.4, 0.9, -0.3], Provenance::Real);
        let synth = hand_traj([-1.1, 0.2, 1.5], Provenance::Synthetic);
        let mut c = SpinLossConfig {
            variant: LossVariant::Exact,
            synthetic_pairs: SyntheticPairs::Backward,
            ..SpinLossConfig::new(vec![0.7, 1.3])
        };
        let sq = |a: f64, b: f64| (a - b).powi(2);
        let mut inner = [0.0; 3];
        for t in 1..=2 {
            let d = sq(real.states[t - 1][0], hand_mu(t, real.states[t][0], 0.3))
                - sq(real.states[t - 1][0], hand_mu(t, real.states[t][0], -0.2))
                - sq(synth.states[t - 1][0], hand_mu(t, synth.states[t][0], 0.3))
                + sq(synth.states[t - 1][0], hand_mu(t, synth.states[t][0], -0.2));
            inner[t] = d;
        }
        let beta = [0.0, 0.7, 1.3];
        let u_exact = -(beta[1] / 2.0 * inner[1] + beta[2] / 2.0 * inner[2]);
        let pair = TrajectoryPair { real: real.clone(), synth: synth.clone() };
        let got = spin_exact_loss(&theta, &theta_k, &[pair], &c, &s).unwrap();
        assert!((got - EllKind::Logistic.value(u_exact)).abs() < 1e-13);

        c.variant = LossVariant::ApproxMu;
        let rp = pairs_from_trajectory(&real);
        let sp = pairs_from_trajectory(&synth);
        let got = spin_approx_loss(&theta, &theta_k, &rp, &sp, &c, &s).unwrap();
        let expected = 0.5 * (EllKind::Logistic.value(-beta[1] * inner[1]) + EllKind::Logistic.value(-beta[2] * inner[2]));
        assert!((got - expected).abs() < 1e-13);
    }

    #[test]
    fn test_function_hand_instance_and_linearity() {
        let s = hand_schedule();
        let (theta, theta_k) = (constant_net(0.3), constant_net(-0.2));
        let traj = hand_traj([0.4, 0.9, -0.3], Provenance::Real);
        let logpdf = |x: f64, m: f64, sd: f64| -0.5 * ((x - m) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let expected = logpdf(0.9, hand_mu(2, -0.3, 0.3), 0.3) - logpdf(0.9, hand_mu(2, -0.3, -0.2), 0.3);
        let f = test_function(&theta, &theta_k, &traj, 1.0, &s).unwrap();
        assert!((f - expected).abs() < 1e-12, "{f} vs {expected}");
        let f2 = test_function(&theta, &theta_k, &traj, 2.0, &s).unwrap();
        assert!((f2 - 2.0 * f).abs() < 1e-12 * f.abs());
        assert_eq!(test_function(&theta, &theta, &traj, 1.0, &s).unwrap(), 0.0);

        let det = make_schedule(2, ScheduleShape::Cosine, 0.0).unwrap();
        assert!(matches!(test_function(&theta, &theta_k, &traj, 1.0, &det), Err(Error::Schedule(_))));
        assert!(test_function(&theta, &theta_k, &traj, 0.0, &s).is_err());
    }

    #[test]
    fn exact_loss_is_bounded_by_approx_over_all_steps() {
        let s = make_schedule(5, ScheduleShape::Cosine, 1.0).unwrap();
        for seed in 0..10 {
            let theta = random(arch(2), 100 + seed, 0.5);
            let theta_k = random(arch(2), 200 + seed, 0.5);
            let trajs = traj_batch(&theta_k, &s, 6, seed);
            let c = SpinLossConfig {
                variant: LossVariant::Exact,
                synthetic_pairs: SyntheticPairs::Backward,
                ..SpinLossConfig::new(vec![3.0; 5])
            };
            let exact = spin_exact_loss(&theta, &theta_k, &trajs, &c, &s).unwrap();
            let real: Vec<StepPair> = trajs.iter().flat_map(|p| pairs_from_trajectory(&p.real)).collect();
            let synth: Vec<StepPair> = trajs.iter().flat_map(|p| pairs_from_trajectory(&p.synth)).collect();
            let approx = spin_approx_loss(&theta, &theta_k, &real, &synth, &c, &s).unwrap();
            assert!(exact <= approx + 1e-12, "{exact} > {approx}");
        }
    }

    #[test]
    fn eps_form_agrees_with_state_form_when_deterministic() {
        let s = make_schedule(8, ScheduleShape::LinearCumulative, 0.0).unwrap();
        let theta = random(arch(2), 7, 0.5);
        let theta_k = random(arch(2), 8, 0.5);
        let beta: Vec<f64> = (1..=8).map(|t| 0.1 * t as f64).collect();
        let mut r = rng::seeded(4);
        let mut real_pairs = Vec::new();
        let mut real_noised = Vec::new();
        let mut fw_pairs = Vec::new();
        let mut fw_noised = Vec::new();
        for i in 0..8 {
            let t = 1 + i;
            let x0 = rng::standard_normal(&mut r, 2);
            let eps = rng::standard_normal(&mut r, 2);
            let n = NoisedSample::new(&x0, cond(i), eps, t, &s).unwrap();
            let x_prev = if t == 1 {
                x0.clone()
            } else {
                crate::diffusion::posterior_mean(&x0, &n.x_t, t, &s).unwrap()
            };
            real_pairs.push(StepPair { condition: cond(i), x_prev, x_curr: n.x_t.clone(), t, provenance: PairProvenance::Real });
            real_noised.push(n);

            let x0s = rng::standard_normal(&mut r, 2);
            let eps_s = rng::standard_normal(&mut r, 2);
            let ns = NoisedSample::new(&x0s, cond(i), eps_s, t, &s).unwrap();
            let xp = if t == 1 { x0s.clone() } else { crate::diffusion::posterior_mean(&x0s, &ns.x_t, t, &s).unwrap() };
            fw_pairs.push(StepPair {
                condition: cond(i),
                x_prev: xp,
                x_curr: ns.x_t.clone(),
                t,
                provenance: PairProvenance::SyntheticForwardized,
            });
            fw_noised.push(ns);
        }
        let c_mu = SpinLossConfig { variant: LossVariant::ApproxMu, ..SpinLossConfig::new(beta.clone()) };
        let c_eps = SpinLossConfig { variant: LossVariant::ApproxEps, ..SpinLossConfig::new(beta.clone()) };
        let a = spin_approx_loss(&theta, &theta_k, &real_pairs, &fw_pairs, &c_mu, &s).unwrap();
        let b = spin_eps_loss(&theta, &theta_k, &real_noised, &fw_noised, &c_eps, &s).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs(), "{a} vs {b}");

        // three-term form against opponent reverse paths
        let conds: Vec<Condition> = (0..8).map(cond).collect();
        let paths = reverse_trajectories(&theta_k, &conds, &s, 5, 2).unwrap();
        let back_pairs: Vec<StepPair> = paths.iter().enumerate().map(|(i, p)| pairs_from_trajectory(p)[i].clone()).collect();
        let back_noised: Vec<NoisedSample> = back_pairs
            .iter()
            .map(|p| NoisedSample { condition: p.condition, x_t: p.x_curr.clone(), eps: vec![f64::NAN; 2], t: p.t })
            .collect();
        let c_eps3 = SpinLossConfig { synthetic_pairs: SyntheticPairs::Backward, ..c_eps };
        let a = spin_approx_loss(&theta, &theta_k, &real_pairs, &back_pairs, &c_mu, &s).unwrap();
        let b = spin_eps_loss(&theta, &theta_k, &real_noised, &back_noised, &c_eps3, &s).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs(), "{a} vs {b}");
    }

    #[test]
    fn swapping_labels_negates_the_argument() {
        let s = make_schedule(5, ScheduleShape::Cosine, 1.0).unwrap();
        let theta = random(arch(2), 1, 0.5);
        let theta_k = random(arch(2), 2, 0.5);
        let mut r = rng::seeded(8);
        let a: Vec<StepPair> = (0..5).map(|i| real_pair(&[0.2, -0.4], cond(i), 1 + i, &s, &mut r).unwrap()).collect();
        let b: Vec<StepPair> = (0..5).map(|i| real_pair(&[0.9, 0.1], cond(i), 1 + i, &s, &mut r).unwrap()).collect();
        let as_synth = |v: &[StepPair]| -> Vec<StepPair> {
            v.iter().map(|p| StepPair { provenance: PairProvenance::SyntheticForwardized, ..p.clone() }).collect()
        };
        let c = SpinLossConfig { variant: LossVariant::ApproxMu, ..SpinLossConfig::new(vec![2.0; 5]) };
        let args = |real: &[StepPair], synth: &[StepPair]| -> Vec<f64> {
            let terms = approx_terms(&theta, &theta_k, real, synth, &c, &s).unwrap();
            let mut g = Graph::new(&theta);
            let u = terms.arguments(&mut g);
            g.value(u).data().to_vec()
        };
        let ab = args(&a, &as_synth(&b));
        let ba = args(&b, &as_synth(&a));
        for (x, y) in ab.iter().zip(&ba) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn validation() {
        let s = make_schedule(4, ScheduleShape::Cosine, 1.0).unwrap();
        let p = random(arch(2), 1, 0.2);
        let mut r = rng::seeded(1);
        let real = vec![real_pair(&[0.0, 0.0], cond(0), 2, &s, &mut r).unwrap()];
        let fw = vec![forwardized_synthetic_pair(&[0.0, 0.0], cond(0), 2, &s, &mut r).unwrap()];
        let c = SpinLossConfig { variant: LossVariant::ApproxMu, ..SpinLossConfig::new(vec![1.0; 4]) };
        assert!(spin_approx_loss(&p, &p, &real, &[], &c, &s).is_err());
        assert!(spin_approx_loss(&p, &p, &real, &real, &c, &s).is_err());
        assert!(spin_approx_loss(&p, &p, &fw, &fw, &c, &s).is_err());
        let bad_beta = SpinLossConfig { beta: vec![1.0, 0.0, 1.0, 1.0], ..c.clone() };
        assert!(spin_approx_loss(&p, &p, &real, &fw, &bad_beta, &s).is_err());
        let short = SpinLossConfig { beta: vec![1.0; 3], ..c.clone() };
        assert!(spin_approx_loss(&p, &p, &real, &fw, &short, &s).is_err());
        let exact_fw = SpinLossConfig { variant: LossVariant::Exact, ..c.clone() };
        assert!(exact_fw.validate(&s).is_err());
        let n = NoisedSample::new(&[0.0, 0.0], cond(0), vec![0.1, 0.1], 2, &s).unwrap();
        let eps_cfg = SpinLossConfig::new(vec![1.0; 4]);
        assert!(spin_eps_loss(&p, &p, &[n], &[], &eps_cfg, &s).is_err());

        let synth = reverse_sample(&p, cond(0), &s, StreamId::new(1, 1, 1)).unwrap();
        let mut short_traj = synth.clone();
        short_traj.states.pop();
        let real_traj = forward_trajectory(&[0.0, 0.0], cond(0), &s, StreamId::new(1, 1, 2)).unwrap();
        let ce = SpinLossConfig { synthetic_pairs: SyntheticPairs::Backward, ..exact_fw };
        let bad = TrajectoryPair { real: real_traj.clone(), synth: short_traj };
        assert!(spin_exact_loss(&p, &p, &[bad], &ce, &s).is_err());
        let swapped = TrajectoryPair { real: synth, synth: real_traj };
        assert!(spin_exact_loss(&p, &p, &[swapped], &ce, &s).is_err());
    }
}
