use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::config::BetaPrior;
use crate::error::{Error, Result};

/// Log of a Gamma(shape, 1) draw. Small shapes use
/// `Gamma(a) = Gamma(a + 1) · U^(1/a)`, which stays representable in log space.
fn ln_gamma_draw<R: Rng>(rng: &mut R, boosted: &Gamma<f64>, shape: f64) -> f64 {
    let g: f64 = boosted.sample(rng);
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    g.ln() + u.ln() / shape
}

/// Draws i.i.d. Beta(α, β) values from `rng` via the ratio of two Gamma draws.
pub fn sample_beta_with<R: Rng>(prior: &BetaPrior, n: usize, rng: &mut R) -> Result<Vec<f32>> {
    let (a, b) = (prior.alpha, prior.beta);
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Config(format!("Beta parameters must be positive, got ({a}, {b})")));
    }
    let ga = Gamma::new(a + 1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let gb = Gamma::new(b + 1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let lx = ln_gamma_draw(rng, &ga, a);
            let ly = ln_gamma_draw(rng, &gb, b);
            // x / (x + y) = 1 / (1 + exp(ly − lx))
            (1.0 / (1.0 + (ly - lx).exp())) as f32
        })
        .collect())
}

/// `n` Beta(α, β) samples from a generator seeded with `seed`.
pub fn sample_beta_prior(prior: &BetaPrior, n: usize, seed: u64) -> Result<Vec<f32>> {
    sample_beta_with(prior, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_lie_in_unit_interval_and_are_seeded() {
        let p = BetaPrior::default();
        let a = sample_beta_prior(&p, 1000, 3).unwrap();
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, sample_beta_prior(&p, 1000, 3).unwrap());
        assert!(sample_beta_prior(&BetaPrior { alpha: 0.0, beta: 1.0 }, 1, 0).is_err());
    }

    #[test]
    fn symmetric_prior_has_mean_half() {
        let s = sample_beta_prior(&BetaPrior { alpha: 2.0, beta: 2.0 }, 20000, 1).unwrap();
        let mean = s.iter().map(|&v| f64::from(v)).sum::<f64>() / s.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }
}
