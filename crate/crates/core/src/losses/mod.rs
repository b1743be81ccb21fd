//! Training objectives: denoising score matching, the self-play losses in
//! their trajectory, pairwise and noise-space forms, the test function, and
//! the reweighted matching/pushing split of the pairwise gradient.
//!
//! Every loss here reduces to squared residuals of the form
//! `||target - scale * eps_theta(input)||^2`. The opponent's residuals are
//! evaluated without a tape, so no gradient can reach the frozen parameters.

pub mod decomposition;
pub mod dsm;
pub mod ell;
pub mod spin;

use serde::{Deserialize, Serialize};

use crate::diffusion::forward_marginal_sample;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score_net::{build_inputs, Condition, Graph, Matrix, ScoreModelParams, ScoreQuery, Var};

pub use decomposition::{spin_gradient_decomposed, DecomposedGradient};
pub use dsm::{dsm_graph, dsm_loss};
pub use ell::EllKind;
pub use spin::{
    spin_approx_graph, spin_approx_loss, spin_eps_graph, spin_eps_loss, spin_exact_graph, spin_exact_loss,
    spin_loss, spin_loss_graph, test_function, SpinBatch, TrajectoryPair,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// Whole-trajectory loss.
    Exact,
    /// One `(x_{t-1}, x_t)` pair per sample, residuals in state space.
    ApproxMu,
    /// One pair per sample, residuals in noise space.
    #[default]
    ApproxEps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticPairs {
    /// Consecutive states of opponent reverse trajectories.
    Backward,
    /// Forward-process pairs around opponent `x_0` samples.
    #[default]
    Forwardized,
}

/// How real and synthetic members of a batch are matched up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Synthetic sample `i` is generated for the condition of real sample `i`.
    #[default]
    Aligned,
    /// Synthetic partners are permuted among samples of the same condition.
    Shuffled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinLossConfig {
    pub ell: EllKind,
    /// `beta_1..beta_T`.
    pub beta: Vec<f64>,
    /// KL weight, recorded for reference; `beta` is the knob that is used.
    pub lambda: f64,
    pub synthetic_pairs: SyntheticPairs,
    pub variant: LossVariant,
    pub pairing: Pairing,
    /// One `t` per aligned pair; otherwise both members draw their own.
    pub shared_t: bool,
}

impl SpinLossConfig {
    pub fn new(beta: Vec<f64>) -> Self {
        SpinLossConfig {
            ell: EllKind::default(),
            beta,
            lambda: 1.0,
            synthetic_pairs: SyntheticPairs::default(),
            variant: LossVariant::default(),
            pairing: Pairing::default(),
            shared_t: true,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.beta.len() != schedule.steps() {
            return Err(Error::config(format!(
                "beta has {} entries for {} steps",
                self.beta.len(),
                schedule.steps()
            )));
        }
        if let Some(b) = self.beta.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::config(format!("beta must be positive and finite, got {b}")));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.variant == LossVariant::Exact && self.synthetic_pairs == SyntheticPairs::Forwardized {
            return Err(Error::config("the exact loss needs full synthetic trajectories (synthetic_pairs = backward)"));
        }
        Ok(())
    }

    pub(crate) fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
}

/// A forward-process draw `x_t = sqrt(alpha_t) x_0 + sqrt(1 - alpha_t) eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub condition: Condition,
    pub x_t: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: usize,
}

impl NoisedSample {
    pub fn new(x0: &[f64], condition: Condition, eps: Vec<f64>, t: usize, schedule: &NoiseSchedule) -> Result<Self> {
        let x_t = forward_marginal_sample(x0, t, &eps, schedule)?;
        Ok(NoisedSample { condition, x_t, eps, t })
    }
}

/// Rows of `target - scale * eps_theta(inputs)`, reduced to squared norms.
#[derive(Debug, Clone)]
pub(crate) struct ResidualTerm {
    pub inputs: Matrix,
    pub target: Matrix,
    pub scale: Vec<f64>,
}

impl ResidualTerm {
    pub fn new(
        arch_params: &ScoreModelParams,
        queries: &[ScoreQuery<'_>],
        targets: Vec<Vec<f64>>,
        scale: Vec<f64>,
        steps: usize,
    ) -> Result<Self> {
        let inputs = build_inputs(arch_params.arch(), queries, steps)?;
        let target = Matrix::from_rows(&targets);
        if target.rows() != inputs.rows() || target.cols() != arch_params.arch().data_dim {
            return Err(Error::Dimension { expected: arch_params.arch().data_dim, got: target.cols() });
        }
        Ok(ResidualTerm { inputs, target, scale })
    }

    pub fn rows(&self) -> usize {
        self.inputs.rows()
    }

    /// Per-row squared residual norms as a column on `g`.
    pub fn graph(&self, g: &mut Graph<'_>) -> Var {
        let out = g.score(self.inputs.clone());
        let scaled = g.row_scale(out, self.scale.clone());
        let target = g.constant(self.target.clone());
        let r = g.sub(target, scaled);
        g.row_sq_norm(r)
    }

    /// The same norms under `params`, with no tape attached to the caller.
    pub fn values(&self, params: &ScoreModelParams) -> Result<Vec<f64>> {
        let mut g = Graph::new(params);
        let v = self.graph(&mut g);
        let out = g.value(v).data().to_vec();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("residual norms".into()));
        }
        Ok(out)
    }
}

/// Real and synthetic residual terms with their per-row weights.
///
/// Per segment `i` (a single row, or `group` consecutive rows for the
/// trajectory loss) the outer argument is
/// `u_i = -sum_rows [w_r (A_theta - A_k) - w_s (B_theta - B_k)]`.
#[derive(Debug, Clone)]
pub(crate) struct SpinTerms {
    pub real: ResidualTerm,
    pub synth: ResidualTerm,
    pub real_weight: Vec<f64>,
    pub synth_weight: Vec<f64>,
    pub real_opponent: Vec<f64>,
    pub synth_opponent: Vec<f64>,
    pub group: usize,
}

impl SpinTerms {
    pub fn with_opponent(
        real: ResidualTerm,
        synth: ResidualTerm,
        real_weight: Vec<f64>,
        synth_weight: Vec<f64>,
        group: usize,
        theta_k: &ScoreModelParams,
    ) -> Result<Self> {
        if real.rows() != synth.rows() {
            return Err(Error::config(format!(
                "real batch has {} rows, synthetic batch {}",
                real.rows(),
                synth.rows()
            )));
        }
        if real.rows() == 0 {
            return Err(Error::config("empty batch"));
        }
        let real_opponent = real.values(theta_k)?;
        let synth_opponent = synth.values(theta_k)?;
        Ok(SpinTerms { real, synth, real_weight, synth_weight, real_opponent, synth_opponent, group })
    }

    /// Column of outer-loss arguments `u_i`.
    pub fn arguments(&self, g: &mut Graph<'_>) -> Var {
        let a = self.real.graph(g);
        let ak = g.constant(Matrix::column(self.real_opponent.clone()));
        let da = g.sub(a, ak);
        let b = self.synth.graph(g);
        let bk = g.constant(Matrix::column(self.synth_opponent.clone()));
        let db = g.sub(b, bk);
        let wa = g.row_scale(da, self.real_weight.iter().map(|w| -w).collect());
        let wb = g.row_scale(db, self.synth_weight.clone());
        let u = g.add(wa, wb);
        if self.group > 1 {
            g.segment_sum(u, self.group)
        } else {
            u
        }
    }

    pub fn loss(&self, g: &mut Graph<'_>, ell: EllKind) -> Var {
        let u = self.arguments(g);
        let l = g.ell(u, ell);
        g.mean(l)
    }
}

/// Inputs and `x_prev - a x_curr` targets for state-space residuals
/// `x_{t-1} - mu_theta(x_t)`; the scale column is `h_t`.
pub(crate) fn mu_residual_term(
    params: &ScoreModelParams,
    pairs: &[&crate::diffusion::StepPair],
    schedule: &NoiseSchedule,
) -> Result<ResidualTerm> {
    let mut queries = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    let mut scale = Vec::with_capacity(pairs.len());
    for p in pairs {
        schedule.check_step(p.t)?;
        if p.x_prev.len() != p.x_curr.len() {
            return Err(Error::Dimension { expected: p.x_curr.len(), got: p.x_prev.len() });
        }
        let (a, b) = crate::diffusion::mu_coefficients(p.t, schedule);
        queries.push(ScoreQuery { x: &p.x_curr, condition: p.condition.label, t: p.t });
        targets.push(p.x_prev.iter().zip(&p.x_curr).map(|(xp, xc)| xp - a * xc).collect());
        scale.push(b);
    }
    ResidualTerm::new(params, &queries, targets, scale, schedule.steps())
}

/// `eps - eps_theta(x_t)` residuals.
pub(crate) fn eps_residual_term(
    params: &ScoreModelParams,
    samples: &[NoisedSample],
    schedule: &NoiseSchedule,
) -> Result<ResidualTerm> {
    let queries: Vec<ScoreQuery<'_>> = samples
        .iter()
        .map(|s| ScoreQuery { x: &s.x_t, condition: s.condition.label, t: s.t })
        .collect();
    for s in samples {
        if s.eps.len() != s.x_t.len() {
            return Err(Error::Dimension { expected: s.x_t.len(), got: s.eps.len() });
        }
    }
    let targets = samples.iter().map(|s| s.eps.clone()).collect();
    ResidualTerm::new(params, &queries, targets, vec![1.0; samples.len()], schedule.steps())
}
