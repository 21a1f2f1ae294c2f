//! Synthetic ground truth: red blood cell phase phantoms for three classes
//! and slightly off-axis interferograms recorded at three wavelengths.
//!
//! Geometry follows the instrument the pipeline emulates: a 4.65 µm camera
//! pixel behind a 20X / NA 0.4 objective. The default canvas is 512×512,
//! a desk-scale stand-in for the 1392×1040 sensor.

mod interferogram;
pub mod io;
mod phantom;
mod scene;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{QpiError, Result};

pub use interferogram::{synthesize_interferogram, FringeParams};
pub use phantom::{make_phantom_field, phantom_shape, PhantomSpec};
pub use scene::{make_subject, CellTruth, OverlapPolicy, Subject, SubjectSpec};

pub const CAMERA_PIXEL_PITCH_UM: f64 = 4.65;
pub const SENSOR_SHAPE: (usize, usize) = (1040, 1392);
pub const MAGNIFICATION: f64 = 20.0;
pub const NUMERICAL_APERTURE: f64 = 0.4;
pub const DEFAULT_CANVAS: (usize, usize) = (512, 512);
pub const DEFAULT_CARRIER: (f64, f64) = (0.2, 0.05);

/// Pixel size referred to the sample plane.
pub fn sample_pixel_um() -> f64 {
    CAMERA_PIXEL_PITCH_UM / MAGNIFICATION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellClass {
    Healthy,
    EarlyTrophozoite,
    LateTrophozoite,
}

impl CellClass {
    pub const ALL: [CellClass; 3] = [
        CellClass::Healthy,
        CellClass::EarlyTrophozoite,
        CellClass::LateTrophozoite,
    ];

    pub fn index(self) -> usize {
        match self {
            CellClass::Healthy => 0,
            CellClass::EarlyTrophozoite => 1,
            CellClass::LateTrophozoite => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CellClass::Healthy => "healthy",
            CellClass::EarlyTrophozoite => "early",
            CellClass::LateTrophozoite => "late",
        }
    }

    /// Refractive-index dispersion factor applied to the optical path
    /// difference at each wavelength, relative to red.
    pub fn dispersion(self) -> PerChannel<f64> {
        match self {
            CellClass::Healthy => PerChannel::new(1.0, 1.02, 1.04),
            CellClass::EarlyTrophozoite => PerChannel::new(1.0, 1.03, 1.06),
            CellClass::LateTrophozoite => PerChannel::new(1.0, 1.05, 1.10),
        }
    }
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellClass {
    type Err = QpiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "healthy" | "Healthy" => Ok(CellClass::Healthy),
            "early" | "EarlyTrophozoite" => Ok(CellClass::EarlyTrophozoite),
            "late" | "LateTrophozoite" => Ok(CellClass::LateTrophozoite),
            other => Err(QpiError::Domain(format!("unknown cell class {other:?}"))),
        }
    }
}

/// Illumination channel. One laser is on at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Red,
    Green,
    Blue,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Red, Channel::Green, Channel::Blue];

    pub fn wavelength_um(self) -> f64 {
        match self {
            Channel::Red => 0.632,
            Channel::Green => 0.532,
            Channel::Blue => 0.460,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Red => "red",
            Channel::Green => "green",
            Channel::Blue => "blue",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Channel::Red => 0,
            Channel::Green => 1,
            Channel::Blue => 2,
        }
    }
}

/// One value per illumination channel, red/green/blue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerChannel<T> {
    pub red: T,
    pub green: T,
    pub blue: T,
}

impl<T> PerChannel<T> {
    pub fn new(red: T, green: T, blue: T) -> Self {
        Self { red, green, blue }
    }

    pub fn from_fn(mut f: impl FnMut(Channel) -> T) -> Self {
        Self {
            red: f(Channel::Red),
            green: f(Channel::Green),
            blue: f(Channel::Blue),
        }
    }

    pub fn get(&self, channel: Channel) -> &T {
        match channel {
            Channel::Red => &self.red,
            Channel::Green => &self.green,
            Channel::Blue => &self.blue,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerChannel<U> {
        PerChannel {
            red: f(&self.red),
            green: f(&self.green),
            blue: f(&self.blue),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(Channel, &T) -> Result<U>) -> Result<PerChannel<U>> {
        Ok(PerChannel {
            red: f(Channel::Red, &self.red)?,
            green: f(Channel::Green, &self.green)?,
            blue: f(Channel::Blue, &self.blue)?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (Channel, &T)> {
        [
            (Channel::Red, &self.red),
            (Channel::Green, &self.green),
            (Channel::Blue, &self.blue),
        ]
        .into_iter()
    }
}

/// A recorded fringe image.
#[derive(Debug, Clone, PartialEq)]
pub struct Interferogram {
    pub pixels: Array2<f64>,
    pub wavelength_um: f64,
    /// Spatial carrier `(fx, fy)` in cycles per pixel; `fx` runs along
    /// columns, `fy` along rows.
    pub carrier_cycles_per_px: (f64, f64),
    pub pixel_pitch_um: f64,
    pub subject_id: String,
}

impl Interferogram {
    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(QpiError::Contract(
                "interferogram pixels must be finite and non-negative".into(),
            ));
        }
        check_carrier(self.carrier_cycles_per_px)
    }
}

pub fn check_carrier((fx, fy): (f64, f64)) -> Result<()> {
    let finite = fx.is_finite() && fy.is_finite();
    if !finite || fx.abs() >= 0.5 || fy.abs() >= 0.5 {
        return Err(QpiError::Aliasing { fx, fy });
    }
    if fx == 0.0 && fy == 0.0 {
        return Err(QpiError::Domain("carrier frequency must be nonzero".into()));
    }
    Ok(())
}

/// Phase surface in radians, either wrapped into (−π, π] or continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMap {
    pub values: Array2<f64>,
    pub wrapped: bool,
    pub wavelength_um: f64,
}

impl PhaseMap {
    pub fn unwrapped(values: Array2<f64>, wavelength_um: f64) -> Self {
        Self {
            values,
            wrapped: false,
            wavelength_um,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(QpiError::Contract("phase map contains non-finite values".into()));
        }
        if self.wrapped {
            let pi = std::f64::consts::PI;
            if self.values.iter().any(|&v| v <= -pi || v > pi) {
                return Err(QpiError::Contract("wrapped phase outside (−π, π]".into()));
            }
        }
        Ok(())
    }
}
