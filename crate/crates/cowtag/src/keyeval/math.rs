//! Secret-key arithmetic for the coherent-one-way protocol.

use super::EvalError;

/// Binary entropy `h(p) = -p log2(p) - (1-p) log2(1-p)`, with `h(0) = h(1) = 0`.
pub fn binary_entropy(p: f64) -> Result<f64, EvalError> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(EvalError::Domain {
            name: "binary_entropy argument",
            value: p,
        });
    }
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    Ok(-p * p.log2() - (1.0 - p) * (1.0 - p).log2())
}

/// Coherence parameter bounding the eavesdropper's information, from the
/// observed interference visibility `v` and mean photon number `mu`:
///
/// `delta = (2v - 1) e^(-mu) - 2 sqrt(v (1 - v)) sqrt(1 - e^(-2 mu))`
///
/// Ranges over [-1, 1]; 1 means perfectly preserved coherence.
pub fn delta(visibility: f64, mu: f64) -> Result<f64, EvalError> {
    if !visibility.is_finite() || !(0.0..=1.0).contains(&visibility) {
        return Err(EvalError::Domain {
            name: "visibility",
            value: visibility,
        });
    }
    if !mu.is_finite() || mu <= 0.0 {
        return Err(EvalError::Domain { name: "mu", value: mu });
    }
    let coherent = (2.0 * visibility - 1.0) * (-mu).exp();
    let leaked = 2.0 * (visibility * (1.0 - visibility)).sqrt() * (-(-2.0 * mu).exp_m1()).sqrt();
    Ok(coherent - leaked)
}

/// Asymptotic secret fraction per sifted bit:
///
/// `r = 1 - h(q) - q - (1 - q) h((1 + delta) / 2)`
///
/// where `q` is the bit error rate of the sifted key and `delta` comes from
/// [`delta`]. The entropy argument `(1 + delta) / 2` maps the coherence
/// parameter onto [0, 1]. The result may be negative, meaning no secret key
/// can be distilled.
pub fn secret_fraction(qber: f64, visibility: f64, mu: f64) -> Result<f64, EvalError> {
    if !qber.is_finite() || !(0.0..=1.0).contains(&qber) {
        return Err(EvalError::Domain {
            name: "qber",
            value: qber,
        });
    }
    let d = delta(visibility, mu)?;
    let arg = ((1.0 + d) / 2.0).clamp(0.0, 1.0);
    Ok(1.0 - binary_entropy(qber)? - qber - (1.0 - qber) * binary_entropy(arg)?)
}

/// Secret key rate in bits per second. A negative fraction yields zero.
pub fn secret_rate(fraction: f64, sifted_bps: f64) -> f64 {
    fraction.max(0.0) * sifted_bps
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn entropy_edge_cases_and_symmetry() {
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_abs_diff_eq!(
            binary_entropy(0.11).unwrap(),
            0.4999157,
            epsilon = 1e-5
        );
        assert_abs_diff_eq!(
            binary_entropy(0.3).unwrap(),
            binary_entropy(0.7).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn entropy_rejects_out_of_range() {
        assert!(binary_entropy(-0.01).is_err());
        assert!(binary_entropy(1.01).is_err());
        assert!(binary_entropy(f64::NAN).is_err());
    }

    #[test]
    fn delta_matches_closed_form_values() {
        // Perfect visibility: only the coherent term survives.
        assert_abs_diff_eq!(delta(1.0, 0.1).unwrap(), 0.9048374180, epsilon = 1e-6);
        // v = 0.5 kills the coherent term, leaving the leakage term.
        assert_abs_diff_eq!(delta(0.5, 0.1).unwrap(), -0.4257570468, epsilon = 1e-6);
    }

    #[test]
    fn delta_requires_positive_mu_and_unit_visibility() {
        assert!(delta(0.9, 0.0).is_err());
        assert!(delta(0.9, -0.1).is_err());
        assert!(delta(1.2, 0.1).is_err());
        assert!(delta(-0.1, 0.1).is_err());
    }

    #[test]
    fn secret_fraction_at_ideal_operating_point() {
        let r = secret_fraction(0.0, 1.0, 0.1).unwrap();
        assert_abs_diff_eq!(r, 0.7240, epsilon = 5e-4);
    }

    #[test]
    fn secret_fraction_decreases_with_qber() {
        let mut prev = f64::INFINITY;
        for i in 0..=12 {
            let q = i as f64 * 0.01;
            let r = secret_fraction(q, 0.98, 0.1).unwrap();
            assert!(r < prev, "r({q}) = {r} not below {prev}");
            prev = r;
        }
    }

    #[test]
    fn secret_fraction_increases_with_visibility() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=8 {
            let v = 0.8 + i as f64 * 0.025;
            let r = secret_fraction(0.02, v, 0.1).unwrap();
            assert!(r > prev, "r(v={v}) = {r} not above {prev}");
            prev = r;
        }
    }

    #[test]
    fn negative_fraction_yields_zero_rate() {
        let r = secret_fraction(0.3, 0.5, 0.1).unwrap();
        assert!(r < 0.0);
        assert_eq!(secret_rate(r, 1e6), 0.0);
        assert_eq!(secret_rate(0.5, 1e6), 5e5);
    }
}
