//! Latitude-weighted verification scores.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `α(i) = cos(lat_i) / mean_j cos(lat_j)`.
pub fn latitude_weights(lats: &[f64]) -> Result<Vec<f64>> {
    if lats.is_empty() {
        return Err(Error::contract("no latitude rows"));
    }
    if let Some(l) = lats.iter().find(|l| !(l.abs() < 90.0)) {
        return Err(Error::contract(format!("latitude {l}° is a pole or out of range")));
    }
    let cos: Vec<f64> = lats.iter().map(|l| l.to_radians().cos()).collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    Ok(cos.into_iter().map(|c| c / mean).collect())
}

fn check(pred: &Tensor, truth: &Tensor, lats: &[f64]) -> Result<(usize, usize, usize)> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    match pred.shape() {
        [h, w, v] if *h == lats.len() => Ok((*h, *w, *v)),
        s => Err(Error::geometry(format!("field {s:?} against {} latitudes", lats.len()))),
    }
}

/// Per-variable `sqrt(mean_ij α(i)·(pred − truth)²)` of `h×w×V` fields.
pub fn lat_weighted_rmse(pred: &Tensor, truth: &Tensor, lats: &[f64]) -> Result<Vec<f64>> {
    let (h, w, v) = check(pred, truth, lats)?;
    let alpha = latitude_weights(lats)?;
    let mut acc = vec![0.0; v];
    let (p, t) = (pred.data(), truth.data());
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * v;
            for k in 0..v {
                let d = p[base + k] - t[base + k];
                acc[k] += alpha[i] * d * d;
            }
        }
    }
    Ok(acc.into_iter().map(|s| (s / (h * w) as f64).sqrt()).collect())
}

/// Headline score: unweighted mean of per-variable values.
pub fn mean_over_variables(per_variable: &[f64]) -> f64 {
    per_variable.iter().sum::<f64>() / per_variable.len() as f64
}

/// Per-variable anomaly correlation against `clim`:
/// `Σ α·p′·t′ / sqrt(Σ α·p′² · Σ α·t′²)` with `x′ = x − clim`.
/// `None` marks a not-a-score result (zero anomaly variance in either field).
pub fn acc(pred: &Tensor, truth: &Tensor, clim: &Tensor, lats: &[f64]) -> Result<Vec<Option<f64>>> {
    let (h, w, v) = check(pred, truth, lats)?;
    if clim.shape() != pred.shape() {
        return Err(Error::geometry(format!("climatology {:?} for fields {:?}", clim.shape(), pred.shape())));
    }
    let alpha = latitude_weights(lats)?;
    let (mut pt, mut pp, mut tt) = (vec![0.0; v], vec![0.0; v], vec![0.0; v]);
    let (p, t, c) = (pred.data(), truth.data(), clim.data());
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * v;
            for k in 0..v {
                let a = p[base + k] - c[base + k];
                let b = t[base + k] - c[base + k];
                pt[k] += alpha[i] * a * b;
                pp[k] += alpha[i] * a * a;
                tt[k] += alpha[i] * b * b;
            }
        }
    }
    Ok((0..v).map(|k| if pp[k] > 0.0 && tt[k] > 0.0 { Some((pt[k] / (pp[k] * tt[k]).sqrt()).clamp(-1.0, 1.0)) } else { None }).collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn weight_examples() {
        assert_eq!(latitude_weights(&[0.0, 0.0, 0.0]).unwrap(), vec![1.0; 3]);
        let a = latitude_weights(&[0.0, 60.0]).unwrap();
        assert!((a[0] - 4.0 / 3.0).abs() < 1e-12 && (a[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(latitude_weights(&[90.0, 0.0]).is_err());
        assert!(latitude_weights(&[-90.0]).is_err());
    }

    #[test]
    fn rmse_hand_example() {
        let pred = Tensor::new(vec![2, 1, 1], vec![3.0, 0.0]).unwrap();
        let truth = Tensor::zeros(&[2, 1, 1]);
        let r = lat_weighted_rmse(&pred, &truth, &[0.0, 60.0]).unwrap();
        assert!((r[0] - 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn acc_constructed_cases() {
        let lats = [10.0, -20.0];
        let clim = Tensor::full(&[2, 2, 1], 3.0);
        let anom = Tensor::new(vec![2, 2, 1], vec![1.0, -2.0, 0.5, 0.0]).unwrap();
        let truth = anom.map(|x| x + 3.0);
        assert!((acc(&truth, &truth, &clim, &lats).unwrap()[0].unwrap() - 1.0).abs() < 1e-12);
        let neg = anom.map(|x| 3.0 - x);
        assert!((acc(&neg, &truth, &clim, &lats).unwrap()[0].unwrap() + 1.0).abs() < 1e-12);
        let a = Tensor::new(vec![2, 2, 1], vec![4.0, 3.0, 3.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 1], vec![3.0, 5.0, 3.0, 3.0]).unwrap();
        assert_eq!(acc(&a, &b, &clim, &lats).unwrap()[0], Some(0.0));
        assert_eq!(acc(&clim, &b, &clim, &lats).unwrap()[0], None);
    }

    fn field(v: &[f64], h: usize) -> Tensor {
        Tensor::new(vec![h, v.len() / h, 1], v.to_vec()).unwrap()
    }

    proptest! {
        #[test]
        fn weights_mean_to_one(lats in prop::collection::vec(-89.9f64..89.9, 1..40)) {
            let a = latitude_weights(&lats).unwrap();
            prop_assert!((a.iter().sum::<f64>() / a.len() as f64 - 1.0).abs() < 1e-12);
        }

        #[test]
        fn constant_error_rmse(lats in prop::collection::vec(-89.0f64..89.0, 1..8), c in 0.0f64..10.0) {
            let h = lats.len();
            let truth = Tensor::zeros(&[h, 3, 2]);
            let pred = Tensor::full(&[h, 3, 2], c);
            let r = lat_weighted_rmse(&pred, &truth, &lats).unwrap();
            prop_assert!((r[0] - c).abs() < 1e-9 * (1.0 + c));
        }

        #[test]
        fn acc_invariances(p in prop::collection::vec(-5.0f64..5.0, 8), t in prop::collection::vec(-5.0f64..5.0, 8),
                           c in prop::collection::vec(-5.0f64..5.0, 8), k in 0.1f64..10.0) {
            let lats = [-30.0, 0.0, 45.0, 60.0];
            let (pf, tf, cf) = (field(&p, 4), field(&t, 4), field(&c, 4));
            let zero = Tensor::zeros(&[4, 2, 1]);
            let base = acc(&pf, &tf, &zero, &lats).unwrap()[0];
            // Adding the climatology to both fields.
            let shifted = acc(&pf.zip_map(&cf, |a, b| a + b).unwrap(), &tf.zip_map(&cf, |a, b| a + b).unwrap(), &cf, &lats).unwrap()[0];
            // Positive rescaling of both anomalies.
            let scaled = acc(&pf.map(|x| k * x), &tf.map(|x| k * x), &zero, &lats).unwrap()[0];
            if let (Some(b), Some(s), Some(r)) = (base, shifted, scaled) {
                prop_assert!((b - s).abs() < 1e-9 && (b - r).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&b));
            }
        }
    }
}
