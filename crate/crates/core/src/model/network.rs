use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::features::CloudFeatures;
use crate::autograd::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Saliency and embedding head outputs for `P` points.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// Pre-sigmoid saliency, `[1, P]`.
    pub logits: Var,
    /// Saliency Φ in `[0, 1]`, `[1, P]`.
    pub phi: Var,
    /// Unit-norm embeddings, `[F, P]`.
    pub h: Var,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, slope: f32) -> Tensor {
    let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f32)).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn dense(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, slope: f32) {
    store.insert(format!("{name}.w"), uniform(rng, vec![cout, cin], cin, slope));
    store.insert(format!("{name}.b"), Tensor::zeros(vec![cout, 1]));
}

/// Generator parameters: encoder, trunk, heads and decoder.
pub fn init_generator(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let slope = cfg.leaky_slope;
    if cfg.use_lrf {
        let k = cfg.enc_kernel;
        let mut cin = 1;
        for (l, &cout) in cfg.enc_channels.iter().enumerate() {
            let fan_in = cin * k * k * k;
            s.insert(format!("enc.{l}.w"), uniform(&mut rng, vec![cout, cin, k, k, k], fan_in, slope));
            s.insert(format!("enc.{l}.b"), Tensor::zeros(vec![cout]));
            cin = cout;
        }
    } else {
        let mut cin = 3;
        for (l, &cout) in cfg.raw_channels.iter().enumerate() {
            dense(&mut s, &mut rng, &format!("raw.{l}"), cin, cout, slope);
            cin = cout;
        }
    }
    let mut cin = cfg.point_feature_dim();
    for (l, &cout) in cfg.trunk.iter().enumerate() {
        dense(&mut s, &mut rng, &format!("trunk.{l}"), cin, cout, slope);
        cin = cout;
    }
    dense(&mut s, &mut rng, "sal", cin, 1, 1.0);
    s.insert("sal.b", Tensor::full(vec![1, 1], cfg.sal_bias));
    dense(&mut s, &mut rng, "emb", cin, cfg.feat_dim, 1.0);
    let levels = cfg.decoder_levels()?;
    let g = cfg.global_dim();
    for l in 0..levels {
        let (fan, out) = decoder_level_shape(cfg, l, levels);
        let mut cin = if l == 0 { g } else { cfg.node_dim + g };
        for (k, &cout) in cfg.dec_hidden.iter().enumerate() {
            dense(&mut s, &mut rng, &format!("dec.{l}.{k}"), cin, cout, slope);
            cin = cout;
        }
        dense(&mut s, &mut rng, &format!("dec.{l}.{}", cfg.dec_hidden.len()), cin, fan * out, 1.0);
    }
    Ok(s)
}

/// Critic parameters: point-wise layers ending in one channel.
pub fn init_critic(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c417);
    let mut s = ParamStore::new();
    let mut cin = 1;
    for (l, &cout) in cfg.critic_channels.iter().enumerate() {
        dense(&mut s, &mut rng, &format!("critic.{l}"), cin, cout, cfg.leaky_slope);
        cin = cout;
    }
    Ok(s)
}

/// (fan-out, values per child) of decoder level `l`.
fn decoder_level_shape(cfg: &ModelConfig, l: usize, levels: usize) -> (usize, usize) {
    let fan = if l == 0 { cfg.root_fanout } else { cfg.fanout };
    let out = if l + 1 == levels { 3 } else { cfg.node_dim };
    (fan, out)
}

/// `W x + b` on column features.
fn linear(tape: &Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(p.var(&format!("{name}.w"))?, x)?;
    tape.add(y, p.var(&format!("{name}.b"))?)
}

fn mlp(tape: &Tape, p: &BoundParams, prefix: &str, widths: usize, x: Var, slope: f32, last_linear: bool) -> Result<Var> {
    let mut h = x;
    for l in 0..widths {
        h = linear(tape, p, &format!("{prefix}.{l}"), h)?;
        if !(last_linear && l + 1 == widths) {
            h = tape.leaky_relu(h, slope);
        }
    }
    Ok(h)
}

fn check_batch(batch: &[&CloudFeatures]) -> Result<usize> {
    let Some(first) = batch.first() else {
        return Err(Error::dim("empty batch"));
    };
    if batch.iter().any(|f| f.n != first.n) {
        return Err(Error::dim("clouds in one batch must have equal point counts"));
    }
    if first.n == 0 {
        return Err(Error::dim("cloud has no points"));
    }
    Ok(first.n)
}

/// Per-point features `[C, B·N]` for a batch of equally sized clouds.
pub fn encode(tape: &Tape, p: &BoundParams, cfg: &ModelConfig, batch: &[&CloudFeatures]) -> Result<Var> {
    let n = check_batch(batch)?;
    let total = batch.len() * n;
    if cfg.use_lrf {
        let g = cfg.grid;
        let mut data = Vec::with_capacity(total * g * g * g);
        for f in batch {
            if f.grid != g || f.sdv.len() != f.n * g * g * g {
                return Err(Error::dim(format!(
                    "descriptor grid {} does not match model grid {g}",
                    f.grid
                )));
            }
            data.extend_from_slice(&f.sdv);
        }
        let mut h = tape.constant(Tensor::new(vec![1, total, g, g, g], data)?);
        for (l, &s) in cfg.enc_strides.iter().enumerate() {
            let w = p.var(&format!("enc.{l}.w"))?;
            let b = p.var(&format!("enc.{l}.b"))?;
            h = tape.conv3d(h, w, Some(b), s, cfg.enc_padding)?;
            h = tape.leaky_relu(h, cfg.leaky_slope);
        }
        tape.mean_trailing(h)
    } else {
        let mut data = vec![0.0f32; 3 * total];
        for (b, f) in batch.iter().enumerate() {
            for (i, q) in f.xyz.iter().enumerate() {
                for a in 0..3 {
                    data[a * total + b * n + i] = q[a];
                }
            }
        }
        let x = tape.constant(Tensor::new(vec![3, total], data)?);
        mlp(tape, p, "raw", cfg.raw_channels.len(), x, cfg.leaky_slope, false)
    }
}

/// Shared trunk, then the saliency and embedding heads.
pub fn heads(tape: &Tape, p: &BoundParams, cfg: &ModelConfig, features: Var) -> Result<HeadOutputs> {
    let t = mlp(tape, p, "trunk", cfg.trunk.len(), features, cfg.leaky_slope, false)?;
    let logits = linear(tape, p, "sal", t)?;
    let phi = tape.sigmoid(logits);
    let e = linear(tape, p, "emb", t)?;
    let h = tape.l2_normalize(e)?;
    Ok(HeadOutputs { logits, phi, h })
}

/// `max_x Φ·max(h, 0) ⊕ max_x Φ·max(−h, 0)` per coordinate and cloud: `[2F, B]`.
pub fn distill(tape: &Tape, phi: Var, h: Var, batch: usize) -> Result<Var> {
    let (f, n) = split_points(tape, h, batch)?;
    let pos = tape.mul(phi, tape.relu(h))?;
    let neg = tape.mul(phi, tape.relu(tape.neg(h)))?;
    let pos = tape.reduce_max_over_points(tape.reshape(pos, &[f, batch, n])?)?;
    let neg = tape.reduce_max_over_points(tape.reshape(neg, &[f, batch, n])?)?;
    tape.concat(&[pos, neg])
}

/// `Σ_x Φ^γ h^γ / Σ_x Φ^γ` per cloud (`[F, B]`); powers of `h` keep their sign.
/// A cloud whose weights are all zero maps to the zero vector.
pub fn distill_soft(tape: &Tape, phi: Var, h: Var, batch: usize, gamma: f32) -> Result<Var> {
    let (f, n) = split_points(tape, h, batch)?;
    let w = if gamma == 1.0 { phi } else { tape.signed_pow(phi, gamma) };
    let hg = if gamma == 1.0 { h } else { tape.signed_pow(h, gamma) };
    let ones = tape.constant(Tensor::ones(vec![n, 1]));
    let num = tape.mul(w, hg)?;
    let num = tape.matmul(tape.reshape(num, &[f * batch, n])?, ones)?;
    let num = tape.reshape(num, &[f, batch])?;
    let z = tape.matmul(tape.reshape(w, &[batch, n])?, ones)?;
    let z = tape.add_scalar(tape.reshape(z, &[1, batch])?, f32::MIN_POSITIVE);
    tape.div(num, z)
}

fn split_points(tape: &Tape, h: Var, batch: usize) -> Result<(usize, usize)> {
    let s = tape.shape(h);
    if s.len() != 2 || batch == 0 || s[1] % batch != 0 || s[1] == 0 {
        return Err(Error::dim(format!("cannot split {s:?} into {batch} clouds")));
    }
    Ok((s[0], s[1] / batch))
}

/// Global feature per the configured distillation: `[G, B]`.
pub fn global_feature(tape: &Tape, cfg: &ModelConfig, heads: &HeadOutputs, batch: usize) -> Result<Var> {
    if cfg.soft_distill {
        distill_soft(tape, heads.phi, heads.h, batch, cfg.gamma)
    } else {
        distill(tape, heads.phi, heads.h, batch)
    }
}

/// Tree decoder: `[G, B]` global features to `[B, n_out, 3]` points.
pub fn decode(tape: &Tape, p: &BoundParams, cfg: &ModelConfig, g: Var) -> Result<Var> {
    let gs = tape.shape(g);
    if gs.len() != 2 || gs[0] != cfg.global_dim() {
        return Err(Error::dim(format!(
            "decoder expects a [{}, B] global feature, got {gs:?}",
            cfg.global_dim()
        )));
    }
    let (gd, b) = (gs[0], gs[1]);
    let levels = cfg.decoder_levels()?;
    let stages = cfg.dec_hidden.len() + 1;
    let mut nodes = 1;
    let mut x = g;
    for l in 0..levels {
        let (fan, out) = decoder_level_shape(cfg, l, levels);
        let input = if l == 0 {
            g
        } else {
            // Node embeddings with the global feature appended to every node.
            let cols = b * nodes;
            let idx: Vec<usize> = (0..gd).flat_map(|r| (0..cols).map(move |c| r * b + c / nodes)).collect();
            let gt = tape.gather(g, Rc::new(idx), &[gd, cols])?;
            tape.concat(&[x, gt])?
        };
        let y = mlp(tape, p, &format!("dec.{l}"), stages, input, cfg.leaky_slope, true)?;
        // [fan·out, cols] -> [out, cols·fan]; child c of column j lands at j·fan + c.
        let cols = b * nodes;
        let idx: Vec<usize> = (0..out)
            .flat_map(|r| (0..cols * fan).map(move |k| ((k % fan) * out + r) * cols + k / fan))
            .collect();
        x = tape.gather(y, Rc::new(idx), &[out, cols * fan])?;
        nodes *= fan;
    }
    let total = b * nodes;
    let idx: Vec<usize> = (0..total).flat_map(|j| (0..3).map(move |a| a * total + j)).collect();
    tape.gather(x, Rc::new(idx), &[b, nodes, 3])
}

/// Critic score per cloud for saliency vectors `[1, B·N]` (or `[B, N]`): `[B]`.
pub fn critic_score(tape: &Tape, p: &BoundParams, cfg: &ModelConfig, x: Var, batch: usize) -> Result<Var> {
    let s = tape.shape(x);
    let total: usize = s.iter().product();
    if batch == 0 || total == 0 || total % batch != 0 {
        return Err(Error::dim(format!("critic cannot split {s:?} into {batch} samples")));
    }
    let n = total / batch;
    let x = tape.reshape(x, &[1, total])?;
    let h = mlp(tape, p, "critic", cfg.critic_channels.len(), x, cfg.leaky_slope, true)?;
    let m = tape.reduce_max_over_points(tape.reshape(h, &[1, batch, n])?)?;
    tape.reshape(m, &[batch])
}
