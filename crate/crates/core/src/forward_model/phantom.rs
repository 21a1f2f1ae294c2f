use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_pixel_um, CellClass, Channel, PerChannel, PhaseMap};
use crate::error::{QpiError, Result};

// Base profile g(u) = (1 - u)^2 (A + B u) with u = (r/R)^2. The (1 - u)^2
// factor keeps the rim C1 against the flat background; A + B u lifts the
// torus above the central dip. Maximum at u = (B - 2A) / (3B).
const PROFILE_A: f64 = 0.5;
const PROFILE_B: f64 = 3.0;
const INCLUSION_HEIGHT: f64 = 1.6;
const PIGMENT_HEIGHT: f64 = 0.5;

fn profile_max() -> f64 {
    let u = (PROFILE_B - 2.0 * PROFILE_A) / (3.0 * PROFILE_B);
    (1.0 - u).powi(2) * (PROFILE_A + PROFILE_B * u)
}

/// Normalised biconcave disk, 1 at the torus crest and 0 outside the cell.
pub(crate) fn biconcave(rho: f64) -> f64 {
    if rho >= 1.0 {
        return 0.0;
    }
    let u = rho * rho;
    (1.0 - u).powi(2) * (PROFILE_A + PROFILE_B * u) / profile_max()
}

/// Raised cosine: 1 at the centre, 0 beyond `t = 1`.
fn bump(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        0.5 + 0.5 * (std::f64::consts::PI * t).cos()
    }
}

/// Flat-topped bump: 1 up to `t = 0.5`, cosine taper to 0 at `t = 1`.
fn plateau(t: f64) -> f64 {
    if t <= 0.5 {
        1.0
    } else {
        bump(2.0 * (t - 0.5))
    }
}

/// Morphology and per-wavelength strength of a single synthetic cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub class: CellClass,
    pub cell_radius_um: f64,
    /// Crest phase of the healthy biconcave profile at each wavelength.
    pub peak_phase_rad: PerChannel<f64>,
    pub inclusion_count: usize,
    pub pigment_fraction: f64,
    pub center_px: (f64, f64),
    pub rng_seed: u64,
}

impl PhantomSpec {
    pub fn radius_px(&self) -> f64 {
        self.cell_radius_um / sample_pixel_um()
    }

    pub fn inclusion_radius_px(&self) -> f64 {
        (0.15 * self.radius_px()).max(2.5)
    }

    pub fn validate(&self) -> Result<()> {
        let limit = 8.0 * std::f64::consts::PI;
        for (channel, &peak) in self.peak_phase_rad.iter() {
            if !(peak > 0.0 && peak <= limit) {
                return Err(QpiError::Domain(format!(
                    "peak phase {peak} rad for {} must lie in (0, 8π]",
                    channel.name()
                )));
            }
        }
        if !(self.cell_radius_um > 0.0 && self.cell_radius_um.is_finite()) {
            return Err(QpiError::Domain("cell radius must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pigment_fraction) {
            return Err(QpiError::Domain("pigment fraction must lie in [0, 1]".into()));
        }
        match self.class {
            CellClass::EarlyTrophozoite if self.inclusion_count < 2 => Err(QpiError::Domain(
                "early trophozoite needs at least two chromatin inclusions".into(),
            )),
            CellClass::LateTrophozoite if self.pigment_fraction <= 0.0 => Err(QpiError::Domain(
                "late trophozoite needs a positive pigment fraction".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Cell morphology normalised so the healthy crest is 1. The same shape
/// scaled by each channel's peak phase gives the per-wavelength truth, so the
/// red/blue ratio is constant over the cell.
pub fn phantom_shape(spec: &PhantomSpec, canvas: (usize, usize)) -> Result<Array2<f64>> {
    spec.validate()?;
    let (rows, cols) = canvas;
    let radius = spec.radius_px();
    let (cy, cx) = spec.center_px;
    if cy - radius < 2.0
        || cx - radius < 2.0
        || cy + radius > rows as f64 - 3.0
        || cx + radius > cols as f64 - 3.0
    {
        return Err(QpiError::Geometry(format!(
            "cell of radius {radius:.1} px at ({cy:.1}, {cx:.1}) does not fit a {rows}x{cols} canvas with 2 px margin"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let inclusions = place_inclusions(spec, &mut rng)?;
    let pigment = if spec.pigment_fraction > 0.0 {
        let pr = radius * spec.pigment_fraction.sqrt();
        let room = (0.95 * radius - pr).max(0.0);
        let dist = rng.gen::<f64>() * room;
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        Some((cy + dist * angle.sin(), cx + dist * angle.cos(), pr))
    } else {
        None
    };
    let dot_radius = spec.inclusion_radius_px();

    let r0 = (cy - radius).floor().max(0.0) as usize;
    let r1 = ((cy + radius).ceil() as usize).min(rows - 1);
    let c0 = (cx - radius).floor().max(0.0) as usize;
    let c1 = ((cx + radius).ceil() as usize).min(cols - 1);
    let mut out = Array2::zeros((rows, cols));
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let rho = (dy * dy + dx * dx).sqrt() / radius;
            if rho >= 1.0 {
                continue;
            }
            let mut v = biconcave(rho);
            for &(iy, ix) in &inclusions {
                let d = ((r as f64 - iy).powi(2) + (c as f64 - ix).powi(2)).sqrt();
                v += INCLUSION_HEIGHT * bump(d / dot_radius);
            }
            if let Some((py, px, pr)) = pigment {
                let d = ((r as f64 - py).powi(2) + (c as f64 - px).powi(2)).sqrt();
                v += PIGMENT_HEIGHT * plateau(d / pr);
            }
            out[[r, c]] = v;
        }
    }
    Ok(out)
}

fn place_inclusions(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    let radius = spec.radius_px();
    let dot = spec.inclusion_radius_px();
    let min_sep = 2.0 * dot + 2.0;
    let reach = 0.6 * radius;
    let (cy, cx) = spec.center_px;
    let mut placed: Vec<(f64, f64)> = Vec::with_capacity(spec.inclusion_count);
    let mut attempts = 0;
    while placed.len() < spec.inclusion_count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(QpiError::Geometry(format!(
                "cannot fit {} separated inclusions in a cell of radius {radius:.1} px",
                spec.inclusion_count
            )));
        }
        let dist = reach * rng.gen::<f64>().sqrt();
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        let candidate = (cy + dist * angle.sin(), cx + dist * angle.cos());
        let clear = placed
            .iter()
            .all(|p| ((p.0 - candidate.0).powi(2) + (p.1 - candidate.1).powi(2)).sqrt() >= min_sep);
        if clear {
            placed.push(candidate);
        }
    }
    Ok(placed)
}

/// Ground-truth unwrapped phase of one cell at one wavelength; the
/// background is exactly zero.
pub fn make_phantom_field(spec: &PhantomSpec, canvas: (usize, usize), channel: Channel) -> Result<PhaseMap> {
    let shape = phantom_shape(spec, canvas)?;
    let peak = *spec.peak_phase_rad.get(channel);
    Ok(PhaseMap::unwrapped(shape * peak, channel.wavelength_um()))
}
