//! The variational objective: reparameterized sampling, closed-form KL to
//! the standard normal prior, the reconstruction term, and their sum.
//!
//! All terms are per-example (batch mean) so loss curves do not depend on
//! the batch size.

use serde::{Deserialize, Serialize};

use crate::nn::{Bindings, NnError, VaeModel};
use crate::rng::SeededRng;
use crate::tensor::{Element, Graph, Result, Tensor, TensorError, Var};

/// Upper clamp applied to logvar before exponentiation.
pub const LOGVAR_MAX: f64 = 20.0;

/// Clamp range for decoder output inside the Bernoulli log-likelihood.
const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLikelihood {
    /// Unit-variance Gaussian: ½·SSE per image.
    #[default]
    Gaussian,
    /// Per-pixel Bernoulli: summed binary cross-entropy per image.
    Bernoulli,
}

/// A reparameterized draw `z = mu + exp(logvar/2)·eps`.
#[derive(Clone, Debug)]
pub struct LatentSample<T: Element> {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    /// The unit-normal draw, held constant for differentiation.
    pub eps: Tensor<T>,
}

fn batch_size(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[0]
    } else {
        1
    }
}

fn clamped_logvar<T: Element>(g: &mut Graph<T>, logvar: Var) -> Result<Var> {
    g.clamp(logvar, f64::NEG_INFINITY, LOGVAR_MAX)
}

pub fn reparameterize<T: Element>(
    g: &mut Graph<T>,
    mu: Var,
    logvar: Var,
    rng: &mut SeededRng,
) -> Result<LatentSample<T>> {
    let eps = rng.normal_tensor(g.shape(mu));
    reparameterize_with_eps(g, mu, logvar, eps)
}

/// Same as [`reparameterize`] with a caller-supplied draw.
pub fn reparameterize_with_eps<T: Element>(
    g: &mut Graph<T>,
    mu: Var,
    logvar: Var,
    eps: Tensor<T>,
) -> Result<LatentSample<T>> {
    for other in [g.shape(logvar), eps.shape()] {
        if g.shape(mu) != other {
            return Err(TensorError::ShapeMismatch {
                op: "reparameterize",
                lhs: g.shape(mu).to_vec(),
                rhs: other.to_vec(),
            });
        }
    }
    let lv = clamped_logvar(g, logvar)?;
    let half = g.scale(lv, 0.5)?;
    let std = g.exp(half)?;
    let e = g.constant(eps.clone())?;
    let noise = g.mul(std, e)?;
    let z = g.add(mu, noise)?;
    Ok(LatentSample { mu, logvar, z, eps })
}

/// `½ Σ (mu² + σ² − 1 − log σ²)` averaged over the leading batch axis
/// (rank-1 inputs count as one example).
pub fn kl_standard_normal<T: Element>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    if g.shape(mu) != g.shape(logvar) {
        return Err(TensorError::ShapeMismatch {
            op: "kl_standard_normal",
            lhs: g.shape(mu).to_vec(),
            rhs: g.shape(logvar).to_vec(),
        });
    }
    let b = batch_size(g.shape(mu));
    let lv = clamped_logvar(g, logvar)?;
    let mu2 = g.square(mu)?;
    let var = g.exp(lv)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, lv)?;
    let t = g.add_scalar(t, -1.0)?;
    let s = g.sum_all(t)?;
    g.scale(s, 0.5 / b as f64)
}

/// `½‖x − x̂‖²` per image, averaged over the batch.
pub fn recon_loss<T: Element>(g: &mut Graph<T>, x_hat: Var, x: Var) -> Result<Var> {
    if g.shape(x_hat) != g.shape(x) {
        return Err(TensorError::ShapeMismatch {
            op: "recon_loss",
            lhs: g.shape(x_hat).to_vec(),
            rhs: g.shape(x).to_vec(),
        });
    }
    let b = batch_size(g.shape(x));
    let d = g.sub(x_hat, x)?;
    let sq = g.square(d)?;
    let s = g.sum_all(sq)?;
    g.scale(s, 0.5 / b as f64)
}

/// Summed per-pixel binary cross-entropy per image, batch averaged.
/// `x` is treated as a constant target.
pub fn bce_loss<T: Element>(g: &mut Graph<T>, x_hat: Var, x: Var) -> Result<Var> {
    if g.shape(x_hat) != g.shape(x) {
        return Err(TensorError::ShapeMismatch {
            op: "bce_loss",
            lhs: g.shape(x_hat).to_vec(),
            rhs: g.shape(x).to_vec(),
        });
    }
    let b = batch_size(g.shape(x));
    let target = g.value(x).clone();
    let complement = target.map(|v| T::one() - v);
    let t = g.constant(target)?;
    let tc = g.constant(complement)?;
    let p = g.clamp(x_hat, BCE_EPS, 1.0 - BCE_EPS)?;
    let log_p = g.log(p)?;
    let neg = g.neg(p)?;
    let q = g.add_scalar(neg, 1.0)?;
    let log_q = g.log(q)?;
    let a = g.mul(t, log_p)?;
    let c = g.mul(tc, log_q)?;
    let ll = g.add(a, c)?;
    let s = g.sum_all(ll)?;
    g.scale(s, -1.0 / b as f64)
}

pub fn reconstruction<T: Element>(
    g: &mut Graph<T>,
    likelihood: ReconLikelihood,
    x_hat: Var,
    x: Var,
) -> Result<Var> {
    match likelihood {
        ReconLikelihood::Gaussian => recon_loss(g, x_hat, x),
        ReconLikelihood::Bernoulli => bce_loss(g, x_hat, x),
    }
}

/// Scalar values of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub kl: f64,
    pub recon: f64,
    pub total: f64,
}

/// Graph handles produced by [`elbo_loss`].
#[derive(Clone, Debug)]
pub struct Elbo<T: Element> {
    pub total: Var,
    pub kl: Var,
    pub recon: Var,
    pub x_hat: Var,
    pub sample: LatentSample<T>,
}

impl<T: Element> Elbo<T> {
    pub fn terms(&self, g: &Graph<T>) -> ElboTerms {
        ElboTerms {
            kl: g.value(self.kl).item().as_f64(),
            recon: g.value(self.recon).item().as_f64(),
            total: g.value(self.total).item().as_f64(),
        }
    }
}

/// Where the latent noise comes from.
pub enum Noise<'a, T: Element> {
    Sample(&'a mut SeededRng),
    Fixed(Tensor<T>),
}

/// Single-sample estimate of `KL(q(z|x) ‖ N(0, I)) − E_q[log p(x|z)]`.
pub fn elbo_loss<T: Element>(
    g: &mut Graph<T>,
    model: &VaeModel<T>,
    p: &Bindings,
    x: Var,
    noise: Noise<'_, T>,
    likelihood: ReconLikelihood,
) -> Result<Elbo<T>, NnError> {
    let wrap = |e| NnError::Layer {
        layer: "elbo".into(),
        source: e,
    };
    let (mu, logvar) = model.encode(g, p, x)?;
    let sample = match noise {
        Noise::Sample(rng) => reparameterize(g, mu, logvar, rng),
        Noise::Fixed(eps) => reparameterize_with_eps(g, mu, logvar, eps),
    }
    .map_err(wrap)?;
    let x_hat = model.decode(g, p, sample.z)?;
    let kl = kl_standard_normal(g, mu, logvar).map_err(wrap)?;
    let recon = reconstruction(g, likelihood, x_hat, x).map_err(wrap)?;
    let total = g.add(kl, recon).map_err(wrap)?;
    Ok(Elbo {
        total,
        kl,
        recon,
        x_hat,
        sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn kl_zero_at_prior() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::zeros(&[3, 4])).unwrap();
        let lv = g.constant(Tensor::zeros(&[3, 4])).unwrap();
        let kl = kl_standard_normal(&mut g, mu, lv).unwrap();
        assert_eq!(g.value(kl).item(), 0.0);
    }

    #[test]
    fn kl_closed_form_cases() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(t(&[1, 2], &[1.0, 0.0])).unwrap();
        let lv = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let kl = kl_standard_normal(&mut g, mu, lv).unwrap();
        assert!((g.value(kl).item() - 0.5).abs() < 1e-15);

        let mu = g.constant(t(&[1], &[0.0])).unwrap();
        let lv = g.constant(t(&[1], &[4f64.ln()])).unwrap();
        let kl = kl_standard_normal(&mut g, mu, lv).unwrap();
        let expected = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((g.value(kl).item() - expected).abs() < 1e-15);
        assert!((expected - 0.806_852_8).abs() < 1e-7);
    }

    #[test]
    fn recon_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1], &[0.0])).unwrap();
        let xh = g.input(t(&[1, 1], &[1.0])).unwrap();
        let r = recon_loss(&mut g, xh, x).unwrap();
        assert_eq!(g.value(r).item(), 0.5);
        let r0 = recon_loss(&mut g, x, x).unwrap();
        assert_eq!(g.value(r0).item(), 0.0);
    }

    #[test]
    fn recon_gradient_is_residual() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[0.2, 0.5, 0.9])).unwrap();
        let xh = g.input(t(&[1, 3], &[0.1, 0.7, 0.4])).unwrap();
        let r = recon_loss(&mut g, xh, x).unwrap();
        let grads = g.backward(r).unwrap();
        let gx = grads.wrt(xh);
        for ((&gv, &a), &b) in gx.data().iter().zip(&[0.1, 0.7, 0.4]).zip(&[0.2, 0.5, 0.9]) {
            assert!((gv - (a - b)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_variance_limit() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(t(&[1, 3], &[0.3, -1.2, 2.0])).unwrap();
        let lv = g.constant(Tensor::full(&[1, 3], -80.0)).unwrap();
        let mut rng = SeededRng::from_seed(5);
        let s = reparameterize(&mut g, mu, lv, &mut rng).unwrap();
        assert!(g.value(s.z).max_abs_diff(g.value(mu)) < 1e-15);
    }

    #[test]
    fn logvar_is_clamped_above() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::zeros(&[1, 1])).unwrap();
        let lv = g.input(Tensor::full(&[1, 1], 500.0)).unwrap();
        let kl = kl_standard_normal(&mut g, mu, lv).unwrap();
        let expected = 0.5 * (LOGVAR_MAX.exp() - 1.0 - LOGVAR_MAX);
        assert!((g.value(kl).item() - expected).abs() / expected < 1e-12);
        let grads = g.backward(kl).unwrap();
        assert_eq!(grads.wrt(lv).data()[0], 0.0);
    }

    #[test]
    fn bce_is_non_negative_and_small_when_exact() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[0.0, 1.0])).unwrap();
        let near = g.input(t(&[1, 2], &[1e-9, 1.0 - 1e-9])).unwrap();
        let l = bce_loss(&mut g, near, x).unwrap();
        let v = g.value(l).item();
        assert!(v >= 0.0 && v < 1e-6, "{v}");
    }
}
