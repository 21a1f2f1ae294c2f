use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{check_carrier, Interferogram, PhaseMap, CAMERA_PIXEL_PITCH_UM, DEFAULT_CARRIER};
use crate::error::{QpiError, Result};

/// Recording parameters for an off-axis fringe image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FringeParams {
    /// `(fx, fy)` cycles/px along columns and rows.
    pub carrier: (f64, f64),
    pub background: f64,
    pub modulation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for FringeParams {
    fn default() -> Self {
        Self {
            carrier: DEFAULT_CARRIER,
            background: 100.0,
            modulation: 0.8,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl FringeParams {
    /// Fringe amplitude over noise, in dB.
    pub fn snr_db(&self) -> f64 {
        20.0 * (self.background * self.modulation / self.noise_sigma).log10()
    }
}

/// `I = B (1 + m cos(2π(fx·x + fy·y) + φ)) + n`, clamped at zero, with `x`
/// the column and `y` the row index.
pub fn synthesize_interferogram(truth: &PhaseMap, params: &FringeParams) -> Result<Interferogram> {
    check_carrier(params.carrier)?;
    if !(params.background > 0.0 && params.background.is_finite()) {
        return Err(QpiError::Domain("background intensity must be positive".into()));
    }
    if !(params.modulation > 0.0 && params.modulation <= 1.0) {
        return Err(QpiError::Domain("modulation depth must lie in (0, 1]".into()));
    }
    if !(params.noise_sigma >= 0.0 && params.noise_sigma.is_finite()) {
        return Err(QpiError::Domain("noise sigma must be non-negative".into()));
    }
    let (fx, fy) = params.carrier;
    let tau = std::f64::consts::TAU;
    let mut pixels = Array2::from_shape_fn(truth.values.dim(), |(r, c)| {
        let carrier_phase = tau * (fx * c as f64 + fy * r as f64);
        params.background * (1.0 + params.modulation * (carrier_phase + truth.values[[r, c]]).cos())
    });
    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let normal = Normal::new(0.0, params.noise_sigma).expect("sigma validated above");
        pixels.iter_mut().for_each(|p| *p += normal.sample(&mut rng));
    }
    pixels.mapv_inplace(|p| p.max(0.0));
    Ok(Interferogram {
        pixels,
        wavelength_um: truth.wavelength_um,
        carrier_cycles_per_px: params.carrier,
        pixel_pitch_um: CAMERA_PIXEL_PITCH_UM,
        subject_id: String::new(),
    })
}
