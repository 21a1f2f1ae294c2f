use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{QpiError, Result};
use crate::forward_model::Interferogram;

/// Complex field with separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub re: Array2<f64>,
    pub im: Array2<f64>,
}

impl ComplexField {
    pub fn from_complex(data: &Array2<Complex64>) -> Self {
        Self {
            re: data.mapv(|z| z.re),
            im: data.mapv(|z| z.im),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.re.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.re.dim() != self.im.dim() {
            return Err(QpiError::Shape(format!(
                "real part {:?} and imaginary part {:?} differ in shape",
                self.re.dim(),
                self.im.dim()
            )));
        }
        if self.re.iter().chain(self.im.iter()).any(|v| !v.is_finite()) {
            return Err(QpiError::Contract("complex field contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Signed spectral frequency index: `row` along the vertical frequency axis,
/// `col` along the horizontal one, each in `[-N/2, N/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpectralBin {
    pub row: i64,
    pub col: i64,
}

impl SpectralBin {
    pub fn norm(&self) -> f64 {
        ((self.row * self.row + self.col * self.col) as f64).sqrt()
    }

    /// Nearest bin to a carrier given in cycles per pixel.
    pub fn from_carrier(carrier: (f64, f64), shape: (usize, usize)) -> Self {
        let (rows, cols) = shape;
        Self {
            row: (carrier.1 * rows as f64).round() as i64,
            col: (carrier.0 * cols as f64).round() as i64,
        }
    }
}

/// Circular pass band in the spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralFilter {
    pub center: SpectralBin,
    pub radius_bins: f64,
}

impl SpectralFilter {
    pub fn validate(&self, shape: (usize, usize)) -> Result<()> {
        let (rows, cols) = shape;
        let (half_r, half_c) = ((rows / 2) as i64, (cols / 2) as i64);
        if self.center.row.abs() > half_r || self.center.col.abs() > half_c {
            return Err(QpiError::FilterBounds(format!(
                "filter centre ({}, {}) lies outside the {rows}x{cols} spectrum",
                self.center.row, self.center.col
            )));
        }
        if self.radius_bins < 2.0 {
            return Err(QpiError::FilterBounds(format!(
                "filter radius {} bins is below the 2-bin minimum",
                self.radius_bins
            )));
        }
        if self.center.norm() <= self.radius_bins {
            return Err(QpiError::OrderOverlap {
                row: self.center.row,
                col: self.center.col,
                radius: self.radius_bins,
            });
        }
        Ok(())
    }

    /// Pass band centred on the +1 order with radius half its distance to DC.
    pub fn around(center: SpectralBin) -> Self {
        Self {
            center,
            radius_bins: center.norm() / 2.0,
        }
    }
}

fn signed(index: usize, n: usize) -> i64 {
    if index < n.div_ceil(2) {
        index as i64
    } else {
        index as i64 - n as i64
    }
}

fn transform_axis(data: &mut Array2<Complex64>, fft: &dyn Fft<f64>, axis_rows: bool) {
    let (rows, cols) = data.dim();
    if axis_rows {
        let mut line = vec![Complex64::new(0.0, 0.0); rows];
        for c in 0..cols {
            for r in 0..rows {
                line[r] = data[[r, c]];
            }
            fft.process(&mut line);
            for r in 0..rows {
                data[[r, c]] = line[r];
            }
        }
    } else {
        let slice = data.as_slice_mut().expect("owned arrays are contiguous");
        for row in slice.chunks_mut(cols) {
            fft.process(row);
        }
    }
}

/// Unnormalised forward 2D FFT.
pub fn fft2(data: &mut Array2<Complex64>) {
    let (rows, cols) = data.dim();
    let mut planner = FftPlanner::new();
    transform_axis(data, planner.plan_fft_forward(cols).as_ref(), false);
    transform_axis(data, planner.plan_fft_forward(rows).as_ref(), true);
}

/// Inverse 2D FFT normalised by `1/(rows·cols)`.
pub fn ifft2(data: &mut Array2<Complex64>) {
    let (rows, cols) = data.dim();
    let mut planner = FftPlanner::new();
    transform_axis(data, planner.plan_fft_inverse(cols).as_ref(), false);
    transform_axis(data, planner.plan_fft_inverse(rows).as_ref(), true);
    let scale = 1.0 / (rows * cols) as f64;
    data.mapv_inplace(|z| z * scale);
}

fn spectrum(frame: &Interferogram, hann: bool) -> Array2<Complex64> {
    let (rows, cols) = frame.shape();
    let mut data = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let w = if hann {
            let wr = 0.5 - 0.5 * (std::f64::consts::TAU * r as f64 / (rows - 1).max(1) as f64).cos();
            let wc = 0.5 - 0.5 * (std::f64::consts::TAU * c as f64 / (cols - 1).max(1) as f64).cos();
            wr * wc
        } else {
            1.0
        };
        Complex64::new(frame.pixels[[r, c]] * w, 0.0)
    });
    fft2(&mut data);
    data
}

/// Locates the +1 order: the strongest spectral peak on the side of DC that
/// the frame's nominal carrier points to, away from the DC lobe.
pub fn detect_carrier(frame: &Interferogram) -> Result<SpectralBin> {
    let spec = spectrum(frame, false);
    Ok(detect_in_spectrum(&spec, frame))
}

fn detect_in_spectrum(spec: &Array2<Complex64>, frame: &Interferogram) -> SpectralBin {
    let (rows, cols) = spec.dim();
    let nominal = SpectralBin::from_carrier(frame.carrier_cycles_per_px, (rows, cols));
    let exclusion = (nominal.norm() / 2.0).max(2.0);
    let mut best = (f64::MIN, nominal);
    for r in 0..rows {
        for c in 0..cols {
            let bin = SpectralBin {
                row: signed(r, rows),
                col: signed(c, cols),
            };
            let along = bin.row * nominal.row + bin.col * nominal.col;
            if along <= 0 || bin.norm() <= exclusion {
                continue;
            }
            let power = spec[[r, c]].norm_sqr();
            if power > best.0 {
                best = (power, bin);
            }
        }
    }
    best.1
}

/// Options for isolating the first order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOptions {
    /// Explicit pass band; auto-detected from the carrier when `None`.
    pub filter: Option<SpectralFilter>,
    /// Radius override for the auto-detected pass band.
    pub radius_bins: Option<f64>,
    pub hann_window: bool,
    /// Demodulate against a numerically generated object-free hologram with
    /// the frame's nominal carrier, passed through the same filter. This
    /// cancels the systematic ringing a non-integer carrier leaves at the
    /// frame borders.
    pub reference_correction: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            filter: None,
            radius_bins: None,
            hann_window: false,
            reference_correction: true,
        }
    }
}

fn band_pass(spec: &mut Array2<Complex64>, filter: &SpectralFilter) {
    let (rows, cols) = spec.dim();
    let r2 = filter.radius_bins * filter.radius_bins;
    for r in 0..rows {
        for c in 0..cols {
            let dr = (signed(r, rows) - filter.center.row) as f64;
            let dc = (signed(c, cols) - filter.center.col) as f64;
            if dr * dr + dc * dc > r2 {
                spec[[r, c]] = Complex64::new(0.0, 0.0);
            }
        }
    }
    ifft2(spec);
}

/// Fourier fringe analysis: forward FFT, circular pass band around one first
/// order, shift of that order to DC and inverse FFT.
///
/// Without reference correction the shift uses the frame's nominal carrier
/// when it lies within one bin of the pass-band centre, which also removes
/// the sub-bin carrier remainder; otherwise the pass-band centre itself.
pub fn extract_complex_field(frame: &Interferogram, options: &FilterOptions) -> Result<ComplexField> {
    let (rows, cols) = frame.shape();
    if rows < 4 || cols < 4 {
        return Err(QpiError::Shape(format!("frame {rows}x{cols} is too small for fringe analysis")));
    }
    let mut spec = spectrum(frame, options.hann_window);
    let filter = match options.filter {
        Some(filter) => filter,
        None => {
            let mut filter = SpectralFilter::around(detect_in_spectrum(&spec, frame));
            if let Some(radius) = options.radius_bins {
                filter.radius_bins = radius;
            }
            filter
        }
    };
    filter.validate((rows, cols))?;
    band_pass(&mut spec, &filter);

    let (fx, fy) = frame.carrier_cycles_per_px;
    let tau = std::f64::consts::TAU;
    if options.reference_correction {
        let reference = Interferogram {
            pixels: Array2::from_shape_fn((rows, cols), |(r, c)| {
                1.0 + (tau * (fx * c as f64 + fy * r as f64)).cos()
            }),
            ..frame.clone()
        };
        let mut ref_spec = spectrum(&reference, options.hann_window);
        band_pass(&mut ref_spec, &filter);
        ndarray::Zip::from(&mut spec).and(&ref_spec).for_each(|z, &w| {
            let n = w.norm();
            if n > 1e-12 {
                *z *= w.conj() / n;
            }
        });
        return Ok(ComplexField::from_complex(&spec));
    }

    let nominal_row = fy * rows as f64;
    let nominal_col = fx * cols as f64;
    let near = (nominal_row - filter.center.row as f64).abs() <= 1.0
        && (nominal_col - filter.center.col as f64).abs() <= 1.0;
    let (shift_x, shift_y) = if near {
        (fx, fy)
    } else {
        (
            filter.center.col as f64 / cols as f64,
            filter.center.row as f64 / rows as f64,
        )
    };
    for ((r, c), z) in spec.indexed_iter_mut() {
        let phase = -tau * (shift_x * c as f64 + shift_y * r as f64);
        *z *= Complex64::from_polar(1.0, phase);
    }
    Ok(ComplexField::from_complex(&spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_model::{synthesize_interferogram, FringeParams, PhaseMap};

    fn frame_of(truth: Array2<f64>, noise: f64) -> Interferogram {
        let params = FringeParams {
            noise_sigma: noise,
            seed: 5,
            ..FringeParams::default()
        };
        synthesize_interferogram(&PhaseMap::unwrapped(truth, 0.632), &params).unwrap()
    }

    #[test]
    fn fft_round_trip() {
        let original = Array2::from_shape_fn((6, 10), |(r, c)| Complex64::new((r * 10 + c) as f64, -(r as f64)));
        let mut data = original.clone();
        fft2(&mut data);
        ifft2(&mut data);
        for (a, b) in data.iter().zip(original.iter()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn detects_default_carrier_to_nearest_bin() {
        let frame = frame_of(Array2::zeros((256, 256)), 0.0);
        let bin = detect_carrier(&frame).unwrap();
        // 0.2·256 = 51.2 → 51, 0.05·256 = 12.8 → 13
        assert_eq!(bin, SpectralBin { row: 13, col: 51 });
    }

    fn interior_arg_std(field: &ComplexField) -> f64 {
        let mut args = Vec::new();
        for r in 8..248 {
            for c in 8..248 {
                args.push(field.im[[r, c]].atan2(field.re[[r, c]]));
            }
        }
        let mean = args.iter().sum::<f64>() / args.len() as f64;
        (args.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / args.len() as f64).sqrt()
    }

    #[test]
    fn flat_phase_gives_constant_argument() {
        // Default carrier, 51.2 × 12.8 bins: not periodic over the frame.
        let frame = frame_of(Array2::zeros((256, 256)), 0.0);
        let field = extract_complex_field(&frame, &FilterOptions::default()).unwrap();
        let std = interior_arg_std(&field);
        assert!(std < 1e-3, "std {std}");

        // Integer-bin carrier needs no reference.
        let params = FringeParams {
            carrier: (0.1875, 0.0625),
            noise_sigma: 0.0,
            ..FringeParams::default()
        };
        let frame = synthesize_interferogram(&PhaseMap::unwrapped(Array2::zeros((256, 256)), 0.632), &params).unwrap();
        let plain = FilterOptions {
            reference_correction: false,
            ..FilterOptions::default()
        };
        let std = interior_arg_std(&extract_complex_field(&frame, &plain).unwrap());
        assert!(std < 1e-9, "std {std}");
    }

    #[test]
    fn hann_window_tames_leakage_without_reference() {
        let frame = frame_of(Array2::zeros((256, 256)), 0.0);
        let plain = FilterOptions {
            reference_correction: false,
            ..FilterOptions::default()
        };
        let windowed = FilterOptions {
            hann_window: true,
            ..plain
        };
        let raw = interior_arg_std(&extract_complex_field(&frame, &plain).unwrap());
        let hann = interior_arg_std(&extract_complex_field(&frame, &windowed).unwrap());
        assert!(hann < raw, "hann {hann} raw {raw}");
    }

    #[test]
    fn filter_at_dc_is_an_overlap_error() {
        let frame = frame_of(Array2::zeros((64, 64)), 0.0);
        let options = FilterOptions {
            filter: Some(SpectralFilter {
                center: SpectralBin { row: 0, col: 0 },
                radius_bins: 4.0,
            }),
            ..FilterOptions::default()
        };
        assert!(matches!(
            extract_complex_field(&frame, &options),
            Err(QpiError::OrderOverlap { .. })
        ));
    }

    #[test]
    fn filter_outside_spectrum_is_a_bounds_error() {
        let frame = frame_of(Array2::zeros((64, 64)), 0.0);
        let options = FilterOptions {
            filter: Some(SpectralFilter {
                center: SpectralBin { row: 0, col: 40 },
                radius_bins: 4.0,
            }),
            ..FilterOptions::default()
        };
        assert!(matches!(
            extract_complex_field(&frame, &options),
            Err(QpiError::FilterBounds(_))
        ));
        let tiny = FilterOptions {
            radius_bins: Some(1.0),
            ..FilterOptions::default()
        };
        assert!(matches!(extract_complex_field(&frame, &tiny), Err(QpiError::FilterBounds(_))));
    }
}
