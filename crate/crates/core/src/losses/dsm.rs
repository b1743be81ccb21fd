//! Denoising score matching, `mean_i gamma_t ||eps_theta(x_t, c, t) - eps||^2`.

use super::{eps_residual_term, NoisedSample};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score_net::{eval_loss, Graph, ScoreModelParams, Var};

pub fn dsm_graph(g: &mut Graph<'_>, batch: &[NoisedSample], schedule: &NoiseSchedule) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::config("empty DSM batch"));
    }
    let term = eps_residual_term(g.params(), batch, schedule)?;
    let norms = term.graph(g);
    let weighted = g.row_scale(norms, batch.iter().map(|s| schedule.gamma(s.t)).collect());
    Ok(g.mean(weighted))
}

pub fn dsm_loss(params: &ScoreModelParams, batch: &[NoisedSample], schedule: &NoiseSchedule) -> Result<f64> {
    eval_loss(params, |g| dsm_graph(g, batch, schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::schedule::{make_schedule, ScheduleShape};
    use crate::score_net::{grad_loss, Architecture, Condition};

    fn batch(n: usize, d: usize, schedule: &NoiseSchedule, seed: u64) -> Vec<NoisedSample> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|i| {
                let x0 = rng::standard_normal(&mut r, d);
                let eps = rng::standard_normal(&mut r, d);
                let t = 1 + i % schedule.steps();
                NoisedSample::new(&x0, Condition::new(i % 2, 2).unwrap(), eps, t, schedule).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_network_gives_chi_square_mean() {
        let s = make_schedule(10, ScheduleShape::Cosine, 0.0).unwrap();
        let zero = ScoreModelParams::zeros(Architecture::new(2, 2)).unwrap();
        let b = batch(20_000, 2, &s, 1);
        let l = dsm_loss(&zero, &b, &s).unwrap();
        // Var ||eps||^2 = 2d for a standard normal in d dimensions
        let se = (4.0f64 / 20_000.0).sqrt();
        assert!((l - 2.0).abs() < 4.0 * se, "{l}");
    }

    #[test]
    fn perfect_prediction_and_arithmetic() {
        let arch = Architecture {
            data_dim: 1,
            conditions: 1,
            time_features: 2,
            hidden: vec![1],
            activation: crate::score_net::Activation::Tanh,
            output_clamp: 10.0,
        };
        // output = bias of the last layer
        let mut v = vec![0.0; arch.param_count()];
        *v.last_mut().unwrap() = 0.5;
        let p = ScoreModelParams::from_flat(arch, v).unwrap();
        let s = make_schedule(4, ScheduleShape::Cosine, 0.0).unwrap().with_gamma(vec![2.0; 4]).unwrap();
        let c = Condition::new(0, 1).unwrap();
        let one = NoisedSample::new(&[0.3], c, vec![1.5], 2, &s).unwrap();
        assert!((dsm_loss(&p, &[one], &s).unwrap() - 2.0).abs() < 1e-15);
        let exact = NoisedSample::new(&[0.3], c, vec![0.5], 3, &s).unwrap();
        assert_eq!(dsm_loss(&p, &[exact], &s).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = Architecture {
            data_dim: 2,
            conditions: 2,
            time_features: 4,
            hidden: vec![6, 5],
            activation: crate::score_net::Activation::Silu,
            output_clamp: 10.0,
        };
        assert!(arch.param_count() <= 200);
        let s = make_schedule(5, ScheduleShape::Cosine, 0.0).unwrap();
        let mut r = rng::seeded(5);
        let v = rng::standard_normal(&mut r, arch.param_count()).into_iter().map(|x| 0.5 * x).collect();
        let p = ScoreModelParams::from_flat(arch, v).unwrap();
        let b = batch(3, 2, &s, 6);
        let (_, g) = grad_loss(&p, |gr| dsm_graph(gr, &b, &s)).unwrap();
        let fd = crate::score_net::finite_diff::finite_diff_gradient(&p, |gr| dsm_graph(gr, &b, &s), 1e-5).unwrap();
        let err = crate::score_net::finite_diff::max_relative_error(&g, &fd, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_bad_batches() {
        let s = make_schedule(4, ScheduleShape::Cosine, 0.0).unwrap();
        let zero = ScoreModelParams::zeros(Architecture::new(2, 2)).unwrap();
        assert!(dsm_loss(&zero, &[], &s).is_err());
        let c = Condition::new(0, 2).unwrap();
        let wrong = NoisedSample { condition: c, x_t: vec![0.0; 3], eps: vec![0.0; 3], t: 1 };
        assert!(matches!(dsm_loss(&zero, &[wrong], &s), Err(Error::Dimension { .. })));
    }
}
