use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Floor applied to predicted probabilities before taking logarithms.
pub const EPS_LOG: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Loss {
    #[default]
    CrossEntropy,
    KlDivergence,
}

impl std::str::FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" | "crossentropy" => Ok(Loss::CrossEntropy),
            "kl" | "kl_divergence" => Ok(Loss::KlDivergence),
            other => Err(Error::Validation(format!("unknown loss `{other}`"))),
        }
    }
}

impl Loss {
    pub fn evaluate(self, pred: &Matrix, target: &Matrix) -> Result<f64> {
        match self {
            Loss::CrossEntropy => loss_ce(pred, target),
            Loss::KlDivergence => loss_kl(pred, target),
        }
    }
}

fn check_aligned(pred: &Matrix, target: &Matrix) -> Result<()> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() {
        return Err(Error::shape(format!(
            "prediction is {}x{} but target is {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    if pred.rows() == 0 {
        return Err(Error::EmptyInput("loss over zero rows".into()));
    }
    Ok(())
}

/// Mean over rows of `-sum_c t_c ln(max(p_c, EPS_LOG))`.
pub fn loss_ce(pred: &Matrix, target: &Matrix) -> Result<f64> {
    check_aligned(pred, target)?;
    let total: f64 = pred
        .iter_rows()
        .zip(target.iter_rows())
        .map(|(p, t)| {
            -p.iter()
                .zip(t)
                .map(|(p, t)| {
                    if *t == 0.0 {
                        0.0
                    } else {
                        t * p.max(EPS_LOG).ln()
                    }
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / pred.rows() as f64)
}

/// Mean over rows of `sum_c t_c ln(t_c / max(p_c, EPS_LOG))`, with `0 ln 0 = 0`.
pub fn loss_kl(pred: &Matrix, target: &Matrix) -> Result<f64> {
    check_aligned(pred, target)?;
    let total: f64 = pred
        .iter_rows()
        .zip(target.iter_rows())
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .map(|(p, t)| {
                    if *t == 0.0 {
                        0.0
                    } else {
                        t * (t.ln() - p.max(EPS_LOG).ln())
                    }
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / pred.rows() as f64)
}

/// Mean Shannon entropy (nats) of the rows of `dist`.
pub fn entropy(dist: &Matrix) -> f64 {
    let total: f64 = dist
        .iter_rows()
        .map(|t| {
            -t.iter()
                .filter(|v| **v > 0.0)
                .map(|v| v * v.ln())
                .sum::<f64>()
        })
        .sum();
    total / dist.rows().max(1) as f64
}

/// Gradient of either loss with respect to the predictions. Both losses share
/// it because the entropy term of KL does not depend on the prediction.
pub fn loss_grad(pred: &Matrix, target: &Matrix) -> Result<Matrix> {
    check_aligned(pred, target)?;
    let b = pred.rows() as f64;
    let data = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, t)| if *p < EPS_LOG { 0.0 } else { -t / (p * b) })
        .collect();
    Matrix::from_vec(pred.rows(), pred.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn ce_uniform_prediction_is_ln_l() {
        let v = loss_ce(&m(&[&[0.25; 4]]), &m(&[&[0.0, 0.0, 1.0, 0.0]])).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!((v - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn ce_perfect_one_hot_is_near_zero() {
        let t = m(&[&[0.0, 1.0, 0.0, 0.0]]);
        let v = loss_ce(&t, &t).unwrap();
        assert!(v.abs() <= (1.0 - 4.0 * EPS_LOG).ln().abs());
    }

    #[test]
    fn ce_of_distribution_with_itself_is_its_entropy() {
        let t = m(&[&[0.6, 0.2, 0.2]]);
        let direct = -(0.6f64 * 0.6f64.ln() + 2.0 * 0.2 * 0.2f64.ln());
        let v = loss_ce(&t, &t).unwrap();
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 0.950271).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        let t = m(&[&[0.6, 0.2, 0.2]]);
        assert!(loss_kl(&t, &t).unwrap().abs() < 1e-15);
        let v = loss_kl(&m(&[&[0.25; 4]]), &m(&[&[1.0, 0.0, 0.0, 0.0]])).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let v = loss_kl(&m(&[&[0.9, 0.1]]), &m(&[&[0.5, 0.5]])).unwrap();
        let direct = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn misaligned_shapes_are_rejected() {
        let err = loss_ce(&m(&[&[0.5, 0.5]]), &m(&[&[1.0, 0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(loss_kl(&m(&[&[0.5, 0.5]]), &m(&[&[1.0, 0.0], &[0.0, 1.0]])).is_err());
    }
}
