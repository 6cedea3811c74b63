use candle_core::Tensor;

use super::LatentParams;
use crate::nn::softplus;
use crate::{Error, Result};

/// The four scalar terms of one first-stage evaluation.
#[derive(Debug, Clone)]
pub struct Stage1Losses {
    pub recon: Tensor,
    /// Discriminator objective `E log D(x) + E log(1 − D(x̃))`.
    pub adv: Tensor,
    /// Generator term `−E log D(x̃)`.
    pub adv_generator: Tensor,
    pub reg: Tensor,
    /// `recon + λ_adv · adv_generator + λ_reg · reg`.
    pub total: Tensor,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn recon_loss(x: &Tensor, x_rec: &Tensor) -> Result<Tensor> {
    same_shape(x, x_rec, "reconstruction")?;
    Ok((x_rec - x)?.sqr()?.mean_all()?)
}

/// `KL(N(μ, σ²) ‖ N(0, 1))` averaged over elements.
pub fn kl_loss(p: &LatentParams) -> Result<Tensor> {
    let lv = p.logvar();
    let per = ((p.mu.sqr()? + lv.exp()?)? - lv)?;
    Ok(((per - 1.0)? * 0.5)?.mean_all()?)
}

/// `mean log D(x) + mean log(1 − D(x̃))` with `D = sigmoid(logit)`.
pub fn discriminator_objective(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    let log_real = softplus(&d_real.neg()?)?.mean_all()?.neg()?;
    let log_fake = softplus(d_fake)?.mean_all()?.neg()?;
    Ok((log_real + log_fake)?)
}

/// Non-saturating generator term `−mean log D(x̃)`.
pub fn generator_adv_loss(d_fake: &Tensor) -> Result<Tensor> {
    Ok(softplus(&d_fake.neg()?)?.mean_all()?)
}

pub fn stage1_losses(
    x: &Tensor,
    x_rec: &Tensor,
    p: &LatentParams,
    d_real: &Tensor,
    d_fake: &Tensor,
    lambda_adv: f64,
    lambda_reg: f64,
) -> Result<Stage1Losses> {
    if lambda_adv < 0.0 || lambda_reg < 0.0 {
        return Err(Error::Domain("loss weights must be nonnegative".into()));
    }
    same_shape(d_real, d_fake, "discriminator logits")?;
    let recon = recon_loss(x, x_rec)?;
    let reg = kl_loss(p)?;
    let adv = discriminator_objective(d_real, d_fake)?;
    let adv_generator = generator_adv_loss(d_fake)?;
    let total = ((&recon + (&adv_generator * lambda_adv)?)? + (&reg * lambda_reg)?)?;
    Ok(Stage1Losses {
        recon,
        adv,
        adv_generator,
        reg,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream};
    use candle_core::{DType, Device};
    use rand::Rng;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn params(mu: f64, sigma: f64, n: usize) -> LatentParams {
        let dev = Device::Cpu;
        LatentParams::from_mu_sigma(
            Tensor::full(mu, n, &dev).unwrap(),
            &Tensor::full(sigma, n, &dev).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_reconstruction_error() {
        let x = Tensor::new(&[0.1f64, -0.4, 0.9], &Device::Cpu).unwrap();
        assert_eq!(scalar(&recon_loss(&x, &x).unwrap()), 0.0);
    }

    #[test]
    fn kl_closed_form_values() {
        assert!(scalar(&kl_loss(&params(0.0, 1.0, 8)).unwrap()).abs() < 1e-15);
        assert!((scalar(&kl_loss(&params(1.0, 1.0, 8)).unwrap()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = stream(17, "kl-mc", 0);
        for _ in 0..5 {
            let mu: f64 = rng.random_range(-1.5..1.5);
            let sigma: f64 = rng.random_range(0.5..2.0);
            let closed = scalar(&kl_loss(&params(mu, sigma, 1)).unwrap());
            // E_q[log q(z) − log p(z)] with z = mu + sigma·e.
            let n = 100_000;
            let est = normal_vec(&mut rng, n)
                .into_iter()
                .map(|e| {
                    let z = mu + sigma * e;
                    -sigma.ln() - 0.5 * e * e + 0.5 * z * z
                })
                .sum::<f64>()
                / n as f64;
            let tol = 0.02 * closed.max(0.05);
            assert!((est - closed).abs() < tol, "mu={mu} sigma={sigma}: {est} vs {closed}");
        }
    }

    #[test]
    fn adversarial_terms() {
        let dev = Device::Cpu;
        let big = Tensor::full(30.0f64, 4, &dev).unwrap();
        let obj = discriminator_objective(&big, &big.neg().unwrap()).unwrap();
        assert!(scalar(&obj).abs() < 1e-12);
        let zero = Tensor::zeros(4, DType::F64, &dev).unwrap();
        let g = generator_adv_loss(&zero).unwrap();
        assert!((scalar(&g) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn composite_weights() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[0.0f64, 0.5], &dev).unwrap();
        let y = Tensor::new(&[0.2f64, 0.1], &dev).unwrap();
        let p = params(1.0, 1.0, 2);
        let d = Tensor::new(&[0.3f64, -0.2], &dev).unwrap();
        let plain = stage1_losses(&x, &y, &p, &d, &d, 0.0, 0.0).unwrap();
        assert_eq!(scalar(&plain.total), scalar(&plain.recon));
        let full = stage1_losses(&x, &y, &p, &d, &d, 0.5, 1e-6).unwrap();
        let want = scalar(&full.recon) + 0.5 * scalar(&full.adv_generator) + 1e-6 * 0.5;
        assert!((scalar(&full.total) - want).abs() < 1e-15);
        assert!(stage1_losses(&x, &y, &p, &d, &d, -1.0, 0.0).is_err());
    }

    #[test]
    fn random_inputs_give_finite_terms() {
        let mut rng = stream(3, "rand", 0);
        let dev = Device::Cpu;
        let v = Tensor::new(normal_vec(&mut rng, 16), &dev).unwrap();
        let p = params(0.2, 0.7, 16);
        let l = stage1_losses(&v, &v.tanh().unwrap(), &p, &v, &v.neg().unwrap(), 0.5, 1e-6).unwrap();
        for t in [&l.recon, &l.adv, &l.adv_generator, &l.reg, &l.total] {
            assert!(scalar(t).is_finite());
        }
        assert!(scalar(&l.adv) <= 0.0);
    }
}
