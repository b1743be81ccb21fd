//! The pairwise-loss gradient written as reweighting x (matching - pushing).
//!
//! For `L = mean_i l(u_i)` with `u_i = -(w_i A_i - w'_i B_i) + const`,
//! `grad L = mean_i (-l'(u_i)) (w_i grad A_i - w'_i grad B_i)`: the first
//! factor is a nonnegative per-sample weight, `grad A` pulls the main
//! player towards real pairs and `grad B` pushes it away from synthetic ones.

use super::spin::{spin_terms, SpinBatch};
use super::SpinLossConfig;
use crate::error::Result;
use crate::schedule::NoiseSchedule;
use crate::score_net::{grad_loss, Graph, ScoreModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedGradient {
    pub gradient: Vec<f64>,
    pub loss: f64,
    /// Per-row reweighting factor `-l'(u_i) w_i`; `-beta_t l'(u_i)` for the
    /// state-space pairwise loss.
    pub weights: Vec<f64>,
    /// Outer-loss arguments `u_i`.
    pub arguments: Vec<f64>,
    pub matching: Vec<f64>,
    pub pushing: Vec<f64>,
    pub matching_norm: f64,
    pub pushing_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient of the configured loss assembled from its three factors.
pub fn spin_gradient_decomposed(
    theta: &ScoreModelParams,
    theta_k: &ScoreModelParams,
    batch: &SpinBatch,
    cfg: &SpinLossConfig,
    schedule: &NoiseSchedule,
) -> Result<DecomposedGradient> {
    let terms = spin_terms(theta, theta_k, batch, cfg, schedule)?;
    let (arguments, loss) = {
        let mut g = Graph::new(theta);
        let u = terms.arguments(&mut g);
        let l = terms.loss(&mut g, cfg.ell);
        (g.value(u).data().to_vec(), g.scalar(l)?)
    };
    let outer: Vec<f64> = arguments.iter().map(|&u| -cfg.ell.derivative(u)).collect();
    let segments = arguments.len() as f64;
    let row_outer = |i: usize| outer[i / terms.group];
    let weights: Vec<f64> = (0..terms.real.rows()).map(|i| row_outer(i) * terms.real_weight[i]).collect();
    let push_weights: Vec<f64> = (0..terms.synth.rows()).map(|i| row_outer(i) * terms.synth_weight[i]).collect();

    let (_, matching) = grad_loss(theta, |g| {
        let a = terms.real.graph(g);
        let w = g.row_scale(a, weights.iter().map(|w| w / segments).collect());
        Ok(g.sum(w))
    })?;
    let (_, pushing) = grad_loss(theta, |g| {
        let b = terms.synth.graph(g);
        let w = g.row_scale(b, push_weights.iter().map(|w| w / segments).collect());
        Ok(g.sum(w))
    })?;
    let gradient = matching.iter().zip(&pushing).map(|(m, p)| m - p).collect();
    Ok(DecomposedGradient {
        gradient,
        loss,
        weights,
        arguments,
        matching_norm: norm(&matching),
        pushing_norm: norm(&pushing),
        matching,
        pushing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{forwardized_synthetic_pair, real_pair, StepPair};
    use crate::losses::spin::spin_loss_graph;
    use crate::losses::{EllKind, LossVariant};
    use crate::rng;
    use crate::schedule::{make_schedule, ScheduleShape};
    use crate::score_net::finite_diff::max_relative_error;
    use crate::score_net::{Activation, Architecture, Condition};

    fn params(seed: u64, scale: f64) -> ScoreModelParams {
        let arch = Architecture {
            data_dim: 2,
            conditions: 2,
            time_features: 4,
            hidden: vec![8, 8],
            activation: Activation::Silu,
            output_clamp: 10.0,
        };
        let mut r = rng::seeded(seed);
        let v = rng::standard_normal(&mut r, arch.param_count()).into_iter().map(|x| scale * x).collect();
        ScoreModelParams::from_flat(arch, v).unwrap()
    }

    fn pair_batch(seed: u64, n: usize, s: &NoiseSchedule) -> SpinBatch {
        let mut r = rng::seeded(seed);
        let mut real: Vec<StepPair> = Vec::new();
        let mut synth = Vec::new();
        for i in 0..n {
            let c = Condition::new(i % 2, 2).unwrap();
            let t = 1 + i % s.steps();
            let x0 = rng::standard_normal(&mut r, 2);
            let y0 = rng::standard_normal(&mut r, 2);
            real.push(real_pair(&x0, c, t, s, &mut r).unwrap());
            synth.push(forwardized_synthetic_pair(&y0, c, t, s, &mut r).unwrap());
        }
        SpinBatch::Pairs { real, synth }
    }

    #[test]
    fn matches_autodiff_for_every_ell() {
        let s = make_schedule(6, ScheduleShape::Cosine, 1.0).unwrap();
        for seed in 0..5 {
            for ell in EllKind::all() {
                let theta = params(seed, 0.4);
                let theta_k = params(seed + 50, 0.4);
                let batch = pair_batch(seed, 7, &s);
                let cfg = SpinLossConfig { ell, variant: LossVariant::ApproxMu, ..SpinLossConfig::new(vec![0.8; 6]) };
                let d = spin_gradient_decomposed(&theta, &theta_k, &batch, &cfg, &s).unwrap();
                let (loss, auto) = grad_loss(&theta, |g| spin_loss_graph(g, &theta_k, &batch, &cfg, &s)).unwrap();
                assert_eq!(d.loss, loss);
                let scale = auto.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(max_relative_error(&d.gradient, &auto, scale) < 1e-12);
                assert!(d.weights.iter().all(|w| *w >= 0.0));
            }
        }
    }

    #[test]
    fn fixed_point_weights_are_half_beta() {
        let s = make_schedule(6, ScheduleShape::Cosine, 1.0).unwrap();
        let theta = params(3, 0.4);
        let batch = pair_batch(4, 6, &s);
        let beta: Vec<f64> = (1..=6).map(|t| t as f64).collect();
        let cfg = SpinLossConfig { variant: LossVariant::ApproxMu, ..SpinLossConfig::new(beta) };
        let d = spin_gradient_decomposed(&theta, &theta, &batch, &cfg, &s).unwrap();
        let SpinBatch::Pairs { real, .. } = &batch else { unreachable!() };
        for (w, p) in d.weights.iter().zip(real) {
            assert_eq!(*w, cfg.beta[p.t - 1] / 2.0);
        }
        assert!(d.matching_norm > 0.0 && d.pushing_norm > 0.0);
    }
}
