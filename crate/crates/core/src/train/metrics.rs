use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Pearson correlation with population moments. `degenerate` marks a
/// zero-variance input, for which `value` is 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pearson {
    pub value: f64,
    pub degenerate: bool,
}

fn check_lengths(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "vectors have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < min {
        return Err(Error::InvalidInput(format!(
            "need at least {min} entries, got {}",
            a.len()
        )));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn pearson(g: &[f64], g_hat: &[f64]) -> Result<Pearson> {
    check_lengths(g, g_hat, 2)?;
    let (mg, mh) = (mean(g), mean(g_hat));
    let (mut cov, mut vg, mut vh) = (0.0, 0.0, 0.0);
    for (&a, &b) in g.iter().zip(g_hat) {
        let (da, db) = (a - mg, b - mh);
        cov += da * db;
        vg += da * da;
        vh += db * db;
    }
    if vg == 0.0 || vh == 0.0 {
        return Ok(Pearson {
            value: 0.0,
            degenerate: true,
        });
    }
    let k = g.len() as f64;
    let value = (cov / k) / ((vg / k) * (vh / k)).sqrt();
    Ok(Pearson {
        value: value.clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Pearson correlation; 0 for zero-variance inputs.
pub fn pcc(g: &[f64], g_hat: &[f64]) -> Result<f64> {
    Ok(pearson(g, g_hat)?.value)
}

pub fn rmse(g: &[f64], g_hat: &[f64]) -> Result<f64> {
    check_lengths(g, g_hat, 1)?;
    let ss: f64 = g.iter().zip(g_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / g.len() as f64).sqrt())
}

/// Mean over all entries of the squared difference.
pub fn mse_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::mismatch("mse_loss", g.shape(pred), g.shape(target)));
    }
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}
