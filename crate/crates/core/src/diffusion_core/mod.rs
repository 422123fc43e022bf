//! Denoising model: noise schedule, extended embeddings, the UNet with its
//! control branch, and the ε-prediction loss.
//!
//! Images are denoised directly in pixel space (`[-1, 1]`); there is no
//! latent autoencoder at this scale.

mod embed;
mod schedule;
mod unet;

pub use embed::{extend_embeddings, ExtendedEmbedding, TokenTag};
pub use schedule::{add_noise, make_schedule, noise_with, NoiseSchedule};
pub use unet::{timestep_embedding, Context, Denoiser, DenoiserConfig};

use crate::error::{Error, Result};
use crate::nn::{Float, Graph, ParamStore, Segment, Tensor, Var};

/// Value-level ε prediction for a single image.
///
/// `x_t` and `cond` are planar `[3, H, W]` values; `cond = None` runs the
/// base network alone.
pub fn denoise(
    store: &ParamStore<f32>,
    net: &Denoiser,
    x_t: &Tensor<f32>,
    t: usize,
    cond: Option<&Tensor<f32>>,
    c: &ExtendedEmbedding,
) -> Result<Tensor<f32>> {
    let s = x_t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("x_t must be [3, H, W], got {s:?}")));
    }
    if s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(Error::Shape(format!("image sides {}x{} must be divisible by 4", s[2], s[1])));
    }
    if let Some(cd) = cond {
        if cd.shape() != s {
            return Err(Error::Shape(format!("conditioning image {:?} does not match x_t {s:?}", cd.shape())));
        }
    }
    if c.width() != net.cfg.d_text || c.is_empty() {
        return Err(Error::Shape(format!("context is {:?}, denoiser expects width {}", c.tokens.shape(), net.cfg.d_text)));
    }
    if !x_t.all_finite() || cond.is_some_and(|cd| !cd.all_finite()) || !c.tokens.all_finite() {
        return Err(Error::Numerical("non-finite denoiser input".into()));
    }
    let mut g = Graph::new(store);
    let x = g.constant(x_t.clone().reshape([1, 3, s[1], s[2]]));
    let cv = cond.map(|cd| g.constant(cd.clone().reshape([1, 3, s[1], s[2]])));
    let ctx = Context { tokens: g.constant(c.tokens.clone()), segments: vec![Segment::new(0, c.len())] };
    let out = net.forward(&mut g, x, &[t], cv, &ctx);
    Ok(g.value(out).clone().reshape(s.to_vec()))
}

/// Noises `x0` to `x_t` with `eps`, runs `predict` on the noised input and
/// returns the mean squared error against `eps`.
pub fn ldm_loss<T: Float>(
    g: &mut Graph<'_, T>,
    sched: &NoiseSchedule,
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    predict: impl FnOnce(&mut Graph<'_, T>, Var) -> Var,
) -> Result<Var> {
    let xt = noised_batch(sched, x0, t, eps)?;
    let xv = g.constant(xt);
    let pred = predict(g, xv);
    if g.shape(pred) != eps.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs noise {:?}", g.shape(pred), eps.shape())));
    }
    let target = g.constant(eps.clone());
    Ok(g.mse(pred, target))
}

/// Applies the forward process per sample of a `[B, ...]` batch.
pub fn noised_batch<T: Float>(sched: &NoiseSchedule, x0: &Tensor<T>, t: &[usize], eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() || x0.shape().first() != Some(&t.len()) {
        return Err(Error::Shape(format!("x0 {:?}, eps {:?}, {} timesteps", x0.shape(), eps.shape(), t.len())));
    }
    let per = x0.numel() / t.len().max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (b, &tb) in t.iter().enumerate() {
        sched.check_t(tb)?;
        let ab = sched.alpha_bars[tb];
        let (a, s) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        let range = b * per..(b + 1) * per;
        out.extend(x0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(&x, &e)| a * x + s * e));
    }
    Ok(Tensor::new(x0.shape().to_vec(), out))
}
