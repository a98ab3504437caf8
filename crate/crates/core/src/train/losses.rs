use std::rc::Rc;

use crate::autograd::{BoundParams, Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::critic_score;

/// Mean Chamfer distance between predicted `[B, N, 3]` and target `[B, M, 3]` sets.
pub fn recon_loss(tape: &Tape, pred: Var, target: Var) -> Result<Var> {
    let c = tape.chamfer(pred, target)?;
    Ok(tape.mean(c))
}

/// Scalar parts of a critic objective, for logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticTerms {
    pub total: Var,
    /// `mean D(fake) − mean D(real)`.
    pub wasserstein: f32,
    /// `mean (‖∇D(x̂)‖ − 1)²`, before weighting.
    pub penalty: f32,
}

/// `mean D(fake) − mean D(real) + λ·mean (‖∇ₓ D(x̂)‖₂ − 1)²` with
/// `x̂ = ε·real + (1 − ε)·fake`, one `ε` per sample.
///
/// `real` and `fake` are `[B, N]`; `eps` has `B` entries.
pub fn critic_loss(
    tape: &Tape,
    critic: &BoundParams,
    cfg: &ModelConfig,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f32],
    lambda: f32,
) -> Result<CriticTerms> {
    if real.shape() != fake.shape() || real.rank() != 2 {
        return Err(Error::dim(format!(
            "critic samples must be equal [B, N] shapes, got {:?} and {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let (b, n) = (real.shape()[0], real.shape()[1]);
    if eps.len() != b {
        return Err(Error::dim(format!("{} interpolation weights for {b} samples", eps.len())));
    }
    let mut mixed = Vec::with_capacity(b * n);
    for s in 0..b {
        for i in 0..n {
            let k = s * n + i;
            mixed.push(eps[s] * real.data()[k] + (1.0 - eps[s]) * fake.data()[k]);
        }
    }
    let d_real = critic_score(tape, critic, cfg, tape.constant(real.clone()), b)?;
    let d_fake = critic_score(tape, critic, cfg, tape.constant(fake.clone()), b)?;
    let w = tape.sub(tape.mean(d_fake), tape.mean(d_real))?;

    let x_hat = tape.leaf(Tensor::new(vec![b, n], mixed)?);
    let d_hat = critic_score(tape, critic, cfg, x_hat, b)?;
    let penalty = gradient_penalty(tape, d_hat, x_hat, b, n)?;
    let pen_value = tape.value(penalty).item()?;
    if !pen_value.is_finite() {
        return Err(Error::Training(format!("non-finite gradient penalty {pen_value}")));
    }
    let total = tape.add(w, tape.scale(penalty, lambda))?;
    Ok(CriticTerms {
        total,
        wasserstein: tape.value(w).item()?,
        penalty: pen_value,
    })
}

/// `mean_b (‖∂(Σ scores)/∂x_b‖₂ − 1)²` for inputs `x` of shape `[B, N]`.
/// Samples are scored independently, so the gradient of the summed score
/// splits into per-sample gradients.
pub fn gradient_penalty(tape: &Tape, scores: Var, x: Var, b: usize, n: usize) -> Result<Var> {
    let g = tape.grad(tape.sum(scores), &[x], true)?[0];
    let sq = tape.reshape(tape.square(g), &[b, n])?;
    let ones = tape.constant(Tensor::ones(vec![n, 1]));
    let norm = tape.sqrt(tape.add_scalar(tape.matmul(sq, ones)?, 1e-12));
    let dev = tape.add_scalar(norm, -1.0);
    Ok(tape.mean(tape.square(dev)))
}

/// `−mean D(fake)` for saliency vectors `[1, B·N]`.
pub fn generator_gan_loss(tape: &Tape, critic: &BoundParams, cfg: &ModelConfig, fake: Var, batch: usize) -> Result<Var> {
    let d = critic_score(tape, critic, cfg, fake, batch)?;
    Ok(tape.neg(tape.mean(d)))
}

/// Sparsity baseline replacing the adversarial term: `mean Φ`.
pub fn l1_sparsity(tape: &Tape, phi: Var) -> Var {
    tape.mean(phi)
}

/// `Σ_pairs w_p (|Φᵢ − Φⱼ| + ‖hᵢ − hⱼ‖₁)` over point columns of `phi [1, P]`
/// and `h [F, P]`. With `w_p = 1/|S|` this is the per-cloud mean.
pub fn sym_loss_weighted(tape: &Tape, phi: Var, h: Var, pairs: &[(usize, usize)], weights: &[f32]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    if weights.len() != pairs.len() {
        return Err(Error::dim("one weight per symmetric pair required"));
    }
    let p = tape.shape(phi).iter().product::<usize>();
    let f = tape.shape(h)[0];
    if let Some(&(i, j)) = pairs.iter().find(|(i, j)| *i >= p || *j >= p) {
        return Err(Error::dim(format!("symmetric pair ({i}, {j}) out of range {p}")));
    }
    let m = pairs.len();
    let w = tape.constant(Tensor::new(vec![1, m], weights.to_vec())?);
    let pick = |v: Var, rows: usize, side: fn(&(usize, usize)) -> usize| {
        let idx: Vec<usize> = (0..rows).flat_map(|r| pairs.iter().map(move |q| r * p + side(q))).collect();
        tape.gather(v, Rc::new(idx), &[rows, m])
    };
    let abs = |v: Var| tape.add(tape.relu(v), tape.relu(tape.neg(v)));
    let dphi = abs(tape.sub(pick(phi, 1, |q| q.0)?, pick(phi, 1, |q| q.1)?)?)?;
    let dh = abs(tape.sub(pick(h, f, |q| q.0)?, pick(h, f, |q| q.1)?)?)?;
    let per_pair = tape.add(dphi, tape.sum_to_shape(dh, &[1, m])?)?;
    Ok(tape.sum(tape.mul(per_pair, w)?))
}

/// Mean over pairs of `|Φᵢ − Φⱼ| + ‖hᵢ − hⱼ‖₁` for one cloud.
pub fn sym_loss(tape: &Tape, phi: Var, h: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let w = vec![1.0 / pairs.len().max(1) as f32; pairs.len()];
    sym_loss_weighted(tape, phi, h, pairs, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::init_critic;
    use crate::autograd::ParamStore;

    fn constant_critic(cfg: &ModelConfig, c: f32) -> ParamStore {
        let mut s = init_critic(cfg, 3).unwrap();
        let names: Vec<String> = s.names().to_vec();
        let last = format!("critic.{}.b", cfg.critic_channels.len() - 1);
        for n in names {
            let shape = s.get(&n).unwrap().shape().to_vec();
            let v = if n == last { c } else { 0.0 };
            s.insert(n, Tensor::full(shape, v));
        }
        s
    }

    #[test]
    fn sym_loss_single_pair() {
        let tape = Tape::new();
        let phi = tape.leaf(Tensor::new(vec![1, 2], vec![0.2, 0.7]).unwrap());
        let h = tape.leaf(Tensor::new(vec![2, 2], vec![0.6, 0.6, 0.8, 0.8]).unwrap());
        let l = sym_loss(&tape, phi, h, &[(0, 1)]).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.5).abs() < 1e-6);
        let none = sym_loss(&tape, phi, h, &[]).unwrap();
        assert_eq!(tape.value(none).item().unwrap(), 0.0);
        assert!(sym_loss(&tape, phi, h, &[(0, 2)]).is_err());
    }

    #[test]
    fn critic_loss_identical_samples_is_penalty_only() {
        let cfg = RunConfig::tiny().model;
        let critic = init_critic(&cfg, 1).unwrap();
        let x = Tensor::new(vec![2, 5], (0..10).map(|i| i as f32 / 10.0).collect()).unwrap();
        let tape = Tape::new();
        let cp = critic.bind(&tape);
        let t = critic_loss(&tape, &cp, &cfg, &x, &x, &[0.3, 0.9], 2.0).unwrap();
        assert_eq!(t.wasserstein, 0.0);
        let total = tape.value(t.total).item().unwrap();
        assert!((total - 2.0 * t.penalty).abs() < 1e-6 * (1.0 + total.abs()));
    }

    #[test]
    fn constant_critic_cases() {
        let cfg = RunConfig::tiny().model;
        let critic = constant_critic(&cfg, 0.75);
        let real = Tensor::new(vec![2, 4], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let fake = Tensor::full(vec![2, 4], 0.5);
        let tape = Tape::new();
        let cp = critic.bind(&tape);
        let t = critic_loss(&tape, &cp, &cfg, &real, &fake, &[0.5, 0.5], 0.0).unwrap();
        assert_eq!(tape.value(t.total).item().unwrap(), 0.0);
        let phi = tape.constant(Tensor::full(vec![1, 8], 0.3));
        let g = generator_gan_loss(&tape, &cp, &cfg, phi, 2).unwrap();
        assert_eq!(tape.value(g).item().unwrap(), -0.75);
    }

    #[test]
    fn generator_loss_reaches_saliency() {
        let cfg = RunConfig::tiny().model;
        let critic = init_critic(&cfg, 5).unwrap();
        let tape = Tape::new();
        let cp = critic.bind_frozen(&tape);
        let phi = tape.leaf(Tensor::new(vec![1, 6], vec![0.1, 0.9, 0.4, 0.6, 0.2, 0.3]).unwrap());
        let g = generator_gan_loss(&tape, &cp, &cfg, phi, 2).unwrap();
        let grads = tape.backward(g).unwrap();
        let d = grads.get(phi).unwrap();
        assert!(d.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn l1_is_mean() {
        let tape = Tape::new();
        let phi = tape.constant(Tensor::new(vec![1, 4], vec![0.0, 0.5, 1.0, 0.5]).unwrap());
        assert_eq!(tape.value(l1_sparsity(&tape, phi)).item().unwrap(), 0.5);
    }
}
