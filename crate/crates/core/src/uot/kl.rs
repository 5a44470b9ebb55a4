use crate::error::{Error, Result};

/// `<x, log(x/y)> + <y - x, 1>` with `0 log(0/0) = 0`, `0 log 0 = 0` and
/// `kl(x | 0) = +inf` whenever `x != 0` on that entry.
pub fn kl_divergence(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Parameter(format!(
            "kl: lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    check_nonnegative(x, "kl: first argument")?;
    check_nonnegative(y, "kl: second argument")?;
    Ok(kl_unchecked(x, y))
}

pub(crate) fn kl_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        if xi == 0.0 {
            acc += yi;
        } else if yi == 0.0 {
            return f64::INFINITY;
        } else {
            acc += xi * (xi / yi).ln() - xi + yi;
        }
    }
    acc
}

pub(crate) fn check_nonnegative(x: &[f64], what: &str) -> Result<()> {
    match x.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
        Some(i) => Err(Error::Domain(format!(
            "{what} has invalid entry {} at index {i}",
            x[i]
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_zero() {
        let x = [0.3, 1.7, 4.0, 1e-8];
        assert_eq!(kl_divergence(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn positive_mass_against_zero_is_infinite() {
        assert_eq!(kl_divergence(&[1.0], &[0.0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn hand_value() {
        let e = std::f64::consts::E;
        let v = kl_divergence(&[1.0], &[e]).unwrap();
        assert!((v - (e - 2.0)).abs() < 1e-15);
        assert!((v - 0.71828).abs() < 1e-5);
    }

    #[test]
    fn zero_conventions() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 2.5]).unwrap(), 2.5);
    }

    #[test]
    fn negative_entries_rejected() {
        assert!(matches!(kl_divergence(&[-1.0], &[1.0]), Err(Error::Domain(_))));
        assert!(matches!(kl_divergence(&[1.0], &[-1.0]), Err(Error::Domain(_))));
    }
}
