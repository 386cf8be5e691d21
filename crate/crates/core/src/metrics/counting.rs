use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CountingErrors {
    pub mae: f64,
    /// `sqrt(mean((y - y_hat)^2))`.
    pub rmse: f64,
    /// `1 - SS_res / SS_tot`; `None` when the ground truth is constant.
    pub r2: Option<f64>,
}

pub fn counting_errors(y: &[f64], y_hat: &[f64]) -> Result<CountingErrors> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(Error::Validation(format!(
            "counting metrics need equal-length nonempty vectors, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    let n = y.len() as f64;
    let mae = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let rmse = (ss_res / n).sqrt();
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|a| (a - mean) * (a - mean)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(CountingErrors { mae, rmse, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let y = [1.0, 2.0, 3.0];
        let e = counting_errors(&y, &y).unwrap();
        assert_eq!((e.mae, e.rmse, e.r2), (0.0, 0.0, Some(1.0)));

        let e = counting_errors(&y, &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(e.r2, Some(0.0));

        let e = counting_errors(&y, &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(e.mae, 1.0 / 3.0);
        assert_eq!(e.rmse, (1.0f64 / 3.0).sqrt());
        assert_eq!(e.r2, Some(0.5));
    }

    #[test]
    fn undefined_and_invalid_inputs() {
        assert_eq!(counting_errors(&[2.0, 2.0], &[1.0, 3.0]).unwrap().r2, None);
        assert!(counting_errors(&[], &[]).is_err());
        assert!(counting_errors(&[1.0], &[1.0, 2.0]).is_err());
    }
}
