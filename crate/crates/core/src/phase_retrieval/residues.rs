use ndarray::Array2;

use crate::error::{QpiError, Result};
use crate::forward_model::PhaseMap;

/// Wraps an angle into (−π, π].
pub fn wrap(angle: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let pi = std::f64::consts::PI;
    let mut a = angle - tau * (angle / tau).round();
    if a <= -pi {
        a += tau;
    } else if a > pi {
        a -= tau;
    }
    a
}

/// Phase vortex in the 2×2 plaquette whose top-left pixel is `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Residue {
    pub row: usize,
    pub col: usize,
    pub charge: i8,
}

/// Net winding of the plaquette at `(r, c)` traversed
/// (r,c) → (r,c+1) → (r+1,c+1) → (r+1,c) → (r,c), in units of 2π. With x
/// along columns and y along rows, arg((x − x0) + i(y − y0)) has charge +1.
pub(crate) fn plaquette_charge(values: &Array2<f64>, r: usize, c: usize) -> i8 {
    let a = values[[r, c]];
    let b = values[[r, c + 1]];
    let d = values[[r + 1, c + 1]];
    let e = values[[r + 1, c]];
    let sum = wrap(b - a) + wrap(d - b) + wrap(e - d) + wrap(a - e);
    (sum / std::f64::consts::TAU).round() as i8
}

/// Every plaquette whose wrapped differences sum to ±2π.
pub fn find_residues(wrapped: &PhaseMap) -> Result<Vec<Residue>> {
    if !wrapped.wrapped {
        return Err(QpiError::Contract("residue detection needs a wrapped phase map".into()));
    }
    let (rows, cols) = wrapped.shape();
    if rows < 2 || cols < 2 {
        return Err(QpiError::Shape(format!("phase map {rows}x{cols} is smaller than 2x2")));
    }
    let mut residues = Vec::new();
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let charge = plaquette_charge(&wrapped.values, r, c);
            if charge != 0 {
                residues.push(Residue { row: r, col: c, charge });
            }
        }
    }
    Ok(residues)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wrapped_map(values: Array2<f64>) -> PhaseMap {
        PhaseMap {
            values: values.mapv(wrap),
            wrapped: true,
            wavelength_um: 0.632,
        }
    }

    /// arg((x − x0) + i·s·(y − y0)) with x along columns and y along rows.
    fn spiral(rows: usize, cols: usize, center: (f64, f64), sign: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            let x = c as f64 - center.1;
            let y = r as f64 - center.0;
            (sign * y).atan2(x)
        })
    }

    #[test]
    fn ramp_has_no_residues() {
        let ramp = Array2::from_shape_fn((32, 40), |(r, c)| 0.3 * c as f64 + 0.2 * r as f64);
        assert!(find_residues(&wrapped_map(ramp)).unwrap().is_empty());
    }

    #[test]
    fn single_vortex_is_one_positive_residue() {
        let field = spiral(21, 21, (10.5, 10.5), 1.0);
        let residues = find_residues(&wrapped_map(field)).unwrap();
        assert_eq!(residues, vec![Residue { row: 10, col: 10, charge: 1 }]);
    }

    #[test]
    fn conjugate_vortex_is_one_negative_residue() {
        let field = spiral(21, 21, (10.5, 10.5), -1.0);
        let residues = find_residues(&wrapped_map(field)).unwrap();
        assert_eq!(residues, vec![Residue { row: 10, col: 10, charge: -1 }]);
    }

    #[test]
    fn vortex_pair_has_zero_net_charge() {
        let a = spiral(32, 48, (15.5, 12.5), 1.0);
        let b = spiral(32, 48, (15.5, 34.5), -1.0);
        let field = &a + &b;
        let residues = find_residues(&wrapped_map(field)).unwrap();
        assert_eq!(residues.len(), 2);
        assert_eq!(residues.iter().map(|r| r.charge as i32).sum::<i32>(), 0);
    }

    #[test]
    fn unwrapped_input_is_a_contract_error() {
        let map = PhaseMap::unwrapped(Array2::zeros((4, 4)), 0.5);
        assert!(find_residues(&map).is_err());
    }

    proptest! {
        #[test]
        fn wrap_lands_in_half_open_interval(a in -100.0f64..100.0) {
            let w = wrap(a);
            prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
            let k = (a - w) / std::f64::consts::TAU;
            prop_assert!((k - k.round()).abs() < 1e-9);
        }
    }
}
