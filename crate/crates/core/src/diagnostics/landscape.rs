use rand::Rng;
use rand_distr::StandardNormal;

use crate::distill::train::seeded;
use crate::error::{invalid, Result};
use crate::finetune::evaluate;
use crate::io::data::Dataset;
use crate::model::Encoder;
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandscapeSample {
    pub alpha: f64,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeCurve {
    pub direction: usize,
    pub seed: u64,
    pub samples: Vec<LandscapeSample>,
}

/// Whether a tensor is split into per-output filters: linear weights
/// (`[in, out]`, one filter per output column). Everything else is one
/// filter.
pub fn is_filtered(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name.ends_with(".weight")
}

/// Element indices of each filter of a tensor.
fn filters(name: &str, shape: &[usize]) -> Vec<Vec<usize>> {
    if is_filtered(name, shape) {
        let (rows, cols) = (shape[0], shape[1]);
        (0..cols).map(|j| (0..rows).map(|i| i * cols + j).collect()).collect()
    } else {
        vec![(0..shape.iter().product()).collect()]
    }
}

/// ℓ2 norm of every filter of `t`, in column order for linear weights.
pub fn filter_norms(name: &str, t: &Tensor) -> Vec<f64> {
    filters(name, t.shape())
        .iter()
        .map(|idx| idx.iter().map(|&i| t.data()[i] * t.data()[i]).sum::<f64>().sqrt())
        .collect()
}

/// Gaussian direction with each filter rescaled to the norm of the
/// matching weight filter. Zero filters get a zero direction.
pub fn filter_normalized_direction<R: Rng + ?Sized>(params: &Params, rng: &mut R) -> Result<Params> {
    let mut out = Params::new();
    for (name, theta) in params.iter() {
        let mut d: Vec<f64> = (0..theta.len()).map(|_| rng.sample(StandardNormal)).collect();
        for idx in filters(name, theta.shape()) {
            let tn = idx.iter().map(|&i| theta.data()[i].powi(2)).sum::<f64>().sqrt();
            let dn = idx.iter().map(|&i| d[i].powi(2)).sum::<f64>().sqrt();
            let scale = if tn == 0.0 || dn == 0.0 { 0.0 } else { tn / dn };
            idx.iter().for_each(|&i| d[i] *= scale);
        }
        out.insert(name.clone(), Tensor::new(theta.shape().to_vec(), d)?)?;
    }
    Ok(out)
}

/// `theta + alpha * dir` as a new store.
pub fn perturb(theta: &Params, dir: &Params, alpha: f64) -> Result<Params> {
    let mut out = theta.clone();
    for (name, t) in out.iter_mut() {
        let d = dir.get(name)?;
        t.data_mut()
            .iter_mut()
            .zip(d.data())
            .for_each(|(p, v)| *p += alpha * v);
    }
    Ok(out)
}

/// Loss and top-1 along `n_dirs` random filter-normalized directions. The
/// encoder is read only; every probe runs on a perturbed copy. The loss is
/// plain cross-entropy. Non-finite losses are recorded as they come.
pub fn loss_landscape(
    enc: &Encoder,
    data: &Dataset,
    n_dirs: usize,
    alphas: &[f64],
    seed: u64,
) -> Result<Vec<LandscapeCurve>> {
    if data.is_empty() {
        return Err(invalid("landscape needs a nonempty evaluation set"));
    }
    let mut rng = seeded(seed, 0);
    let mut curves = Vec::with_capacity(n_dirs);
    for direction in 0..n_dirs {
        let dir = filter_normalized_direction(&enc.params, &mut rng)?;
        let mut samples = Vec::with_capacity(alphas.len());
        for &alpha in alphas {
            let probe = Encoder::from_params(enc.cfg.clone(), perturb(&enc.params, &dir, alpha)?)?;
            let e = evaluate(&probe, data)?;
            samples.push(LandscapeSample { alpha, loss: e.loss, top1: e.top1 });
        }
        curves.push(LandscapeCurve { direction, seed, samples });
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Params {
        let mut p = Params::new();
        p.insert("fc.weight", Tensor::new(vec![2, 3], vec![3.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        p.insert("fc.bias", Tensor::from_vec(vec![0.5, -0.5, 0.0])).unwrap();
        p.insert("zero.weight", Tensor::zeros(&[2, 2])).unwrap();
        p
    }

    #[test]
    fn filters_match_weight_norms() {
        let p = params();
        let d = filter_normalized_direction(&p, &mut seeded(0, 0)).unwrap();
        for (name, t) in p.iter() {
            let want = filter_norms(name, t);
            let got = filter_norms(name, d.get(name).unwrap());
            for (a, b) in want.iter().zip(&got) {
                assert!((a - b).abs() < 1e-9, "{name}: {a} vs {b}");
            }
        }
        assert_eq!(filter_norms("fc.weight", p.get("fc.weight").unwrap()), vec![3.0, 0.0, 2f64.sqrt()]);
        assert!(d.get("zero.weight").unwrap().data().iter().all(|&v| v == 0.0));
        let col1: Vec<f64> = [1, 4].iter().map(|&i| d.get("fc.weight").unwrap().data()[i]).collect();
        assert_eq!(col1, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_alpha_is_identity() {
        let p = params();
        let d = filter_normalized_direction(&p, &mut seeded(1, 0)).unwrap();
        assert!(perturb(&p, &d, 0.0).unwrap().bit_eq(&p));
        let moved = perturb(&p, &d, 0.5).unwrap();
        assert!(!moved.bit_eq(&p));
    }
}
