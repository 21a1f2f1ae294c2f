//! Phase recovery from a single off-axis interferogram: Fourier fringe
//! analysis, Goldstein unwrapping and background plane removal.

mod fourier;
mod goldstein;
mod residues;

use ndarray::Array2;

use crate::error::{QpiError, Result};
use crate::forward_model::{Interferogram, PhaseMap};

pub use fourier::{
    detect_carrier, extract_complex_field, fft2, ifft2, ComplexField, FilterOptions, SpectralBin, SpectralFilter,
};
pub use goldstein::{branch_cuts, goldstein_unwrap, goldstein_unwrap_with, UnwrapOutput};
pub use residues::{find_residues, wrap, Residue};

/// Per-pixel argument of the field in (−π, π], plus its modulus.
pub fn wrapped_phase(field: &ComplexField) -> Result<(PhaseMap, Array2<f64>)> {
    field.validate()?;
    if field.re.iter().chain(field.im.iter()).all(|&v| v == 0.0) {
        return Err(QpiError::DegenerateField);
    }
    let pi = std::f64::consts::PI;
    let mut values = Array2::zeros(field.shape());
    let mut amplitude = Array2::zeros(field.shape());
    ndarray::Zip::from(&mut values)
        .and(&mut amplitude)
        .and(&field.re)
        .and(&field.im)
        .for_each(|v, a, &re, &im| {
            let phi = im.atan2(re);
            *v = if phi <= -pi { pi } else { phi };
            *a = re.hypot(im);
        });
    Ok((
        PhaseMap {
            values,
            wrapped: true,
            wavelength_um: 0.0,
        },
        amplitude,
    ))
}

/// Least-squares plane `a + b·col + c·row` over the selected pixels.
pub fn fit_plane(values: &Array2<f64>, select: impl Fn(usize, usize) -> bool) -> Option<[f64; 3]> {
    let mut m = [[0.0f64; 3]; 3];
    let mut v = [0.0f64; 3];
    for ((r, c), &z) in values.indexed_iter() {
        if !select(r, c) {
            continue;
        }
        let basis = [1.0, c as f64, r as f64];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += basis[i] * basis[j];
            }
            v[i] += basis[i] * z;
        }
    }
    solve3(m, v)
}

fn solve3(mut m: [[f64; 3]; 3], mut v: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        v.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..3 {
                    m[row][k] -= f * m[col][k];
                }
                v[row] -= f * v[col];
            }
        }
    }
    Some([v[0] / m[0][0], v[1] / m[1][1], v[2] / m[2][2]])
}

fn plane_residual(values: &Array2<f64>, plane: [f64; 3]) -> Array2<f64> {
    Array2::from_shape_fn(values.dim(), |(r, c)| {
        values[[r, c]] - (plane[0] + plane[1] * c as f64 + plane[2] * r as f64)
    })
}

/// Removes the background plane. The background is found robustly: an
/// all-pixel fit, a refit on the lower half of the residuals (cells only add
/// positive phase), then two refits on pixels within three robust standard
/// deviations of the plane.
pub fn subtract_background_plane(values: &Array2<f64>) -> Array2<f64> {
    let Some(mut plane) = fit_plane(values, |_, _| true) else {
        return values.clone();
    };
    let mut residual = plane_residual(values, plane);
    let mut sorted: Vec<f64> = residual.iter().copied().collect();
    let median = crate::imaging::median(&mut sorted);
    let mut inliers = residual.mapv(|v| v <= median);
    for _ in 0..3 {
        if let Some(p) = fit_plane(values, |r, c| inliers[[r, c]]) {
            plane = p;
        }
        residual = plane_residual(values, plane);
        let mut abs_dev: Vec<f64> = residual
            .iter()
            .zip(inliers.iter())
            .filter(|(_, &keep)| keep)
            .map(|(v, _)| v.abs())
            .collect();
        let sigma = (1.4826 * crate::imaging::median(&mut abs_dev)).max(1e-6);
        inliers = residual.mapv(|v| v.abs() <= 3.0 * sigma);
    }
    residual
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalConfig {
    pub filter: FilterOptions,
    pub plane_fit: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            filter: FilterOptions::default(),
            plane_fit: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub phase: PhaseMap,
    pub amplitude: Array2<f64>,
    pub residue_count: usize,
    pub flagged: Array2<bool>,
}

/// Full single-frame retrieval: filtered first order → wrapped phase →
/// Goldstein unwrapping → background plane removal.
pub fn retrieve(frame: &Interferogram, config: &RetrievalConfig) -> Result<Retrieval> {
    frame.validate()?;
    let field = extract_complex_field(frame, &config.filter)?;
    let (mut wrapped, amplitude) = wrapped_phase(&field)?;
    wrapped.wavelength_um = frame.wavelength_um;
    let unwrapped = goldstein_unwrap_with(&wrapped, Some(&amplitude))?;
    let mut phase = unwrapped.phase;
    if config.plane_fit {
        phase.values = subtract_background_plane(&phase.values);
    }
    Ok(Retrieval {
        phase,
        amplitude,
        residue_count: unwrapped.residues.len(),
        flagged: unwrapped.flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_model::{
        make_subject, synthesize_interferogram, CellClass, Channel, FringeParams, SubjectSpec,
    };

    fn gaussian_bump(shape: (usize, usize), peak: f64, sigma: f64) -> Array2<f64> {
        let (rows, cols) = shape;
        let (cy, cx) = (rows as f64 / 2.0, cols as f64 / 2.0);
        Array2::from_shape_fn(shape, |(r, c)| {
            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
            peak * (-d2 / (2.0 * sigma * sigma)).exp()
        })
    }

    fn interior_rms(a: &Array2<f64>, b: &Array2<f64>, border: usize) -> f64 {
        let (rows, cols) = a.dim();
        let mut diffs = Vec::new();
        for r in border..rows - border {
            for c in border..cols - border {
                diffs.push(a[[r, c]] - b[[r, c]]);
            }
        }
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt()
    }

    fn bump_frame(peak: f64, noise: f64) -> (Array2<f64>, Interferogram) {
        let truth = gaussian_bump((256, 256), peak, 18.0);
        let params = FringeParams {
            noise_sigma: noise,
            seed: 17,
            ..FringeParams::default()
        };
        let frame = synthesize_interferogram(&PhaseMap::unwrapped(truth.clone(), 0.632), &params).unwrap();
        (truth, frame)
    }

    #[test]
    fn wrapped_phase_of_constant_fields() {
        let one = ComplexField {
            re: Array2::from_elem((4, 4), 1.0),
            im: Array2::zeros((4, 4)),
        };
        let (phase, amp) = wrapped_phase(&one).unwrap();
        assert!(phase.values.iter().all(|&v| v == 0.0));
        assert!(amp.iter().all(|&a| (a - 1.0).abs() < 1e-15));
        let i = ComplexField {
            re: Array2::zeros((4, 4)),
            im: Array2::from_elem((4, 4), 1.0),
        };
        let (phase, _) = wrapped_phase(&i).unwrap();
        assert!(phase.values.iter().all(|&v| (v - std::f64::consts::FRAC_PI_2).abs() < 1e-15));
        let neg = ComplexField {
            re: Array2::from_elem((2, 2), -1.0),
            im: Array2::from_elem((2, 2), -0.0),
        };
        let (phase, _) = wrapped_phase(&neg).unwrap();
        assert!(phase.values.iter().all(|&v| v == std::f64::consts::PI));
        let zero = ComplexField {
            re: Array2::zeros((3, 3)),
            im: Array2::zeros((3, 3)),
        };
        assert!(matches!(wrapped_phase(&zero), Err(QpiError::DegenerateField)));
    }

    #[test]
    fn bump_field_round_trip() {
        let (truth, frame) = bump_frame(2.0, 0.0);
        let field = extract_complex_field(&frame, &FilterOptions::default()).unwrap();
        let (wrapped, _) = wrapped_phase(&field).unwrap();
        let rms = interior_rms(&wrapped.values, &truth, 8);
        assert!(rms < 0.02, "rms {rms}");
    }

    #[test]
    fn tall_bump_wraps_in_a_closed_contour() {
        let (_, frame) = bump_frame(3.5, 0.0);
        let field = extract_complex_field(&frame, &FilterOptions::default()).unwrap();
        let (wrapped, _) = wrapped_phase(&field).unwrap();
        // Jumps along the row through the peak: one on each flank.
        let row = 128;
        let jumps: Vec<usize> = (1..256)
            .filter(|&c| (wrapped.values[[row, c]] - wrapped.values[[row, c - 1]]).abs() > std::f64::consts::PI)
            .collect();
        assert_eq!(jumps.len(), 2, "{jumps:?}");
        assert!(jumps[0] < 128 && jumps[1] > 128);
        let col_jumps = (1..256)
            .filter(|&r| (wrapped.values[[r, 128]] - wrapped.values[[r - 1, 128]]).abs() > std::f64::consts::PI)
            .count();
        assert_eq!(col_jumps, 2);
    }

    #[test]
    fn full_round_trip_through_unwrapping() {
        let (truth, frame) = bump_frame(2.0, 0.5);
        let out = retrieve(&frame, &RetrievalConfig::default()).unwrap();
        let rms = interior_rms(&out.phase.values, &truth, 8);
        assert!(rms < 0.02, "rms {rms}");
        let (truth, frame) = bump_frame(5.0, 0.5);
        let out = retrieve(&frame, &RetrievalConfig::default()).unwrap();
        let rms = interior_rms(&out.phase.values, &truth, 8);
        assert!(rms < 0.03, "rms {rms}");
    }

    #[test]
    fn flat_scene_is_flat_after_plane_removal() {
        let mut spec = SubjectSpec::single_class("flat", CellClass::Healthy, 0, 3);
        spec.fov = (256, 256);
        let subject = make_subject(&spec).unwrap();
        let out = retrieve(&subject.frames.red, &RetrievalConfig::default()).unwrap();
        let v = &out.phase.values;
        let mean = v.mean().unwrap();
        let std = (v.mapv(|x| (x - mean).powi(2)).mean().unwrap()).sqrt();
        assert!(std < 1e-2, "std {std}");
    }

    #[test]
    fn single_cell_scene_round_trip_and_dispersion() {
        let mut spec = SubjectSpec::single_class("one", CellClass::LateTrophozoite, 1, 21);
        spec.fov = (256, 256);
        let subject = make_subject(&spec).unwrap();
        let mut recovered = Vec::new();
        for ch in Channel::ALL {
            let out = retrieve(subject.frames.get(ch), &RetrievalConfig::default()).unwrap();
            let rms = interior_rms(&out.phase.values, &subject.truth.get(ch).values, 8);
            assert!(rms < 0.03, "{} rms {rms}", ch.name());
            recovered.push(out.phase.values);
        }
        let cell = subject.truth.red.values.mapv(|v| v > 0.0);
        let (mut num, mut den) = (0.0, 0.0);
        for ((red, blue), &inside) in recovered[0].iter().zip(recovered[2].iter()).zip(cell.iter()) {
            if inside {
                num += red * blue;
                den += blue * blue;
            }
        }
        let ratio = num / den;
        let d = CellClass::LateTrophozoite.dispersion();
        let expected = Channel::Blue.wavelength_um() / Channel::Red.wavelength_um() * d.red / d.blue;
        assert!((ratio / expected - 1.0).abs() < 0.02, "ratio {ratio} expected {expected}");
    }

    #[test]
    fn plane_fit_recovers_tilt() {
        let values = Array2::from_shape_fn((30, 40), |(r, c)| 0.5 + 0.01 * c as f64 - 0.02 * r as f64);
        let plane = fit_plane(&values, |_, _| true).unwrap();
        assert!((plane[0] - 0.5).abs() < 1e-10);
        assert!((plane[1] - 0.01).abs() < 1e-12);
        assert!((plane[2] + 0.02).abs() < 1e-12);
        let flat = subtract_background_plane(&values);
        assert!(flat.iter().all(|v| v.abs() < 1e-9));
    }
}
