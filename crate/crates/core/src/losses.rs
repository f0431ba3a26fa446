//! Loss terms for both generator stages. All functions are differentiable
//! tensor expressions reducing to a scalar.

use candle_core::{Tensor, D};

use crate::error::{Result, StampError};

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(StampError::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Discriminator hinge loss: `E[max(0, 1 - real)] + E[max(0, 1 + fake)]`.
pub fn hinge_d_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    hinge_d_loss_multi(real, &[fake])
}

/// Hinge loss with one real branch and any number of fake branches, each
/// averaged separately and summed.
pub fn hinge_d_loss_multi(real: &Tensor, fakes: &[&Tensor]) -> Result<Tensor> {
    let mut loss = (1.0 - real)?.relu()?.mean_all()?;
    for fake in fakes {
        loss = (loss + (*fake + 1.0)?.relu()?.mean_all()?)?;
    }
    Ok(loss)
}

/// Generator hinge loss: `-E[fake]`.
pub fn hinge_g_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.mean_all()?.neg()?)
}

/// Adversarial terms for the texture stage: one real and two fake branches.
/// Returns `(g_loss, d_loss)`.
pub fn texture_adv(real: &Tensor, fake_random: &Tensor, fake_encoded: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = hinge_d_loss_multi(real, &[fake_random, fake_encoded])?;
    let g = (hinge_g_loss(fake_random)? + hinge_g_loss(fake_encoded)?)?;
    Ok((g, d))
}

/// Latent reconstruction: mean absolute error between `z` and its
/// reconstruction, i.e. `(1/|z|) * ||z - z_hat||_1` averaged over the batch.
pub fn latent_l1(z: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
    check_same(z, z_hat, "latent reconstruction")?;
    Ok((z - z_hat)?.abs()?.mean_all()?)
}

/// Feature matching against per-layer running means. `fake[l]` is
/// `(B, ...)`, `targets[l]` has the per-sample shape. Sum over layers of the
/// per-element mean squared difference.
pub fn moving_average_feature_matching(fake: &[Tensor], targets: &[Tensor]) -> Result<Tensor> {
    if fake.len() != targets.len() || fake.is_empty() {
        return Err(StampError::Dimension(format!(
            "feature matching over {} fake layers and {} targets",
            fake.len(),
            targets.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (f, t) in fake.iter().zip(targets) {
        if &f.dims()[1..] != t.dims() {
            return Err(StampError::Dimension(format!(
                "feature layer {:?} vs running mean {:?}",
                f.shape(),
                t.shape()
            )));
        }
        let term = f.broadcast_sub(&t.unsqueeze(0)?)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Paired feature matching: per-layer mean squared difference, averaged
/// over layers.
pub fn paired_feature_matching(fake: &[Tensor], real: &[Tensor]) -> Result<Tensor> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(StampError::Dimension(format!(
            "feature matching over {} fake and {} real layers",
            fake.len(),
            real.len()
        )));
    }
    let mut terms = Vec::with_capacity(fake.len());
    for (f, r) in fake.iter().zip(real) {
        check_same(f, r, "feature layer")?;
        terms.push((f - r)?.sqr()?.mean_all()?);
    }
    Ok((Tensor::stack(&terms, 0)?.sum_all()? / fake.len() as f64)?)
}

/// Mean absolute difference over every element.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b, "L1")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `KL(N(mu, exp(logvar)) || N(0, I))`, summed over latent dimensions and
/// averaged over the batch. `mu`, `logvar`: `(B, n)`.
pub fn kl_standard_normal(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    check_same(mu, logvar, "KL")?;
    let per_dim = ((mu.sqr()? + logvar.exp()?)? - logvar)?;
    let per_dim = ((per_dim - 1.0)? * 0.5)?;
    Ok(per_dim.sum(D::Minus1)?.mean_all()?)
}
