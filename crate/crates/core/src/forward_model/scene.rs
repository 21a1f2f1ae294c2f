use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    phantom_shape, sample_pixel_um, synthesize_interferogram, CellClass, Channel, FringeParams, Interferogram,
    PerChannel, PhantomSpec, PhaseMap,
};
use crate::error::{QpiError, Result};
use crate::imaging::BoundingBox;
use crate::seed;

/// How cells may be arranged in a field of view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OverlapPolicy {
    /// Every pair of cells is separated by at least `min_gap_px` of background.
    Disjoint { min_gap_px: f64 },
    /// Cells come in pairs whose centres sit `distance_factor · (R₁ + R₂) / 2`
    /// apart; pairs are disjoint from each other. A factor below 2 overlaps.
    Pairs { distance_factor: f64, min_gap_px: f64 },
}

impl Default for OverlapPolicy {
    fn default() -> Self {
        OverlapPolicy::Disjoint { min_gap_px: 14.0 }
    }
}

/// One field of view of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSpec {
    pub subject_id: String,
    /// Relative weights of each class among the cells.
    pub class_mix: Vec<(CellClass, f64)>,
    pub cell_count: usize,
    pub fov: (usize, usize),
    pub seed: u64,
    pub overlap: OverlapPolicy,
    /// Cell radius range in µm at the sample plane.
    pub cell_radius_um: (f64, f64),
    /// Crest phase range at the red wavelength.
    pub red_peak_rad: (f64, f64),
    pub fringe: FringeParams,
}

impl SubjectSpec {
    pub fn single_class(subject_id: impl Into<String>, class: CellClass, cell_count: usize, seed: u64) -> Self {
        Self {
            subject_id: subject_id.into(),
            class_mix: vec![(class, 1.0)],
            cell_count,
            fov: super::DEFAULT_CANVAS,
            seed,
            overlap: OverlapPolicy::default(),
            cell_radius_um: (23.0 * sample_pixel_um(), 25.0 * sample_pixel_um()),
            red_peak_rad: (1.6, 2.0),
            fringe: FringeParams::default(),
        }
    }
}

/// Ground truth for one synthetic cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTruth {
    pub phantom: PhantomSpec,
    pub radius_px: f64,
    /// Tight box around every pixel strictly inside the cell.
    pub bbox: BoundingBox,
}

impl CellTruth {
    pub fn class(&self) -> CellClass {
        self.phantom.class
    }

    pub fn center(&self) -> (f64, f64) {
        self.phantom.center_px
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub subject_id: String,
    pub frames: PerChannel<Interferogram>,
    pub truth: PerChannel<PhaseMap>,
    pub cells: Vec<CellTruth>,
}

fn draw_class(mix: &[(CellClass, f64)], rng: &mut ChaCha8Rng) -> Result<CellClass> {
    let total: f64 = mix.iter().map(|(_, w)| w.max(0.0)).sum();
    if mix.is_empty() || total <= 0.0 {
        return Err(QpiError::Domain("class mix needs at least one positive weight".into()));
    }
    let mut pick = rng.gen::<f64>() * total;
    for &(class, weight) in mix {
        pick -= weight.max(0.0);
        if pick < 0.0 {
            return Ok(class);
        }
    }
    Ok(mix[mix.len() - 1].0)
}

fn morphology(class: CellClass, rng: &mut ChaCha8Rng) -> (usize, f64) {
    match class {
        CellClass::Healthy => (0, 0.0),
        CellClass::EarlyTrophozoite => (rng.gen_range(2..=4), 0.0),
        CellClass::LateTrophozoite => (rng.gen_range(0..=1), rng.gen_range(0.15..0.35)),
    }
}

fn cell_bbox(center: (f64, f64), radius: f64, shape: (usize, usize)) -> BoundingBox {
    let (rows, cols) = shape;
    let mut r0 = usize::MAX;
    let mut c0 = usize::MAX;
    let mut r1 = 0;
    let mut c1 = 0;
    let rlo = (center.0 - radius).floor().max(0.0) as usize;
    let rhi = ((center.0 + radius).ceil() as usize).min(rows - 1);
    let clo = (center.1 - radius).floor().max(0.0) as usize;
    let chi = ((center.1 + radius).ceil() as usize).min(cols - 1);
    for r in rlo..=rhi {
        for c in clo..=chi {
            let d = ((r as f64 - center.0).powi(2) + (c as f64 - center.1).powi(2)).sqrt();
            if d < radius {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    BoundingBox {
        row: r0,
        col: c0,
        height: r1 - r0 + 1,
        width: c1 - c0 + 1,
    }
}

fn place_centers(spec: &SubjectSpec, radii: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    let (rows, cols) = spec.fov;
    let margin = 3.0;
    let fits = |c: (f64, f64), r: f64| {
        c.0 - r >= margin && c.1 - r >= margin && c.0 + r <= rows as f64 - 1.0 - margin && c.1 + r <= cols as f64 - 1.0 - margin
    };
    let uniform = |rng: &mut ChaCha8Rng, r: f64| {
        let lo = r + margin;
        (
            rng.gen_range(lo..(rows as f64 - lo).max(lo + 1e-9)),
            rng.gen_range(lo..(cols as f64 - lo).max(lo + 1e-9)),
        )
    };
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    const ATTEMPTS: usize = 5_000;

    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(radii.len());
    match spec.overlap {
        OverlapPolicy::Disjoint { min_gap_px } => {
            for (i, &radius) in radii.iter().enumerate() {
                let placed = (0..ATTEMPTS).map(|_| uniform(rng, radius)).find(|&cand| {
                    fits(cand, radius)
                        && centers
                            .iter()
                            .zip(radii)
                            .all(|(&c, &r)| dist(c, cand) >= r + radius + min_gap_px)
                });
                match placed {
                    Some(c) => centers.push(c),
                    None => {
                        return Err(QpiError::Placement(format!(
                            "could not place cell {} of {} without overlap in a {rows}x{cols} field",
                            i + 1,
                            radii.len()
                        )))
                    }
                }
            }
        }
        OverlapPolicy::Pairs {
            distance_factor,
            min_gap_px,
        } => {
            // Each group is one or two cells; groups keep their bounding
            // circles apart by min_gap_px.
            let mut groups: Vec<((f64, f64), f64)> = Vec::new();
            for pair in radii.chunks(2) {
                let placed = (0..ATTEMPTS).find_map(|_| {
                    let first = uniform(rng, pair[0]);
                    let (members, bound) = if pair.len() == 2 {
                        let d = distance_factor * (pair[0] + pair[1]) / 2.0;
                        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
                        let second = (first.0 + d * angle.sin(), first.1 + d * angle.cos());
                        if !fits(second, pair[1]) {
                            return None;
                        }
                        let mid = ((first.0 + second.0) / 2.0, (first.1 + second.1) / 2.0);
                        (vec![first, second], (mid, d / 2.0 + pair[0].max(pair[1])))
                    } else {
                        (vec![first], (first, pair[0]))
                    };
                    let clear = fits(first, pair[0])
                        && groups
                            .iter()
                            .all(|&(gc, gr)| dist(gc, bound.0) >= gr + bound.1 + min_gap_px);
                    clear.then_some((members, bound))
                });
                match placed {
                    Some((members, bound)) => {
                        centers.extend(members);
                        groups.push(bound);
                    }
                    None => {
                        return Err(QpiError::Placement(format!(
                            "could not place cell pair {} in a {rows}x{cols} field",
                            groups.len() + 1
                        )))
                    }
                }
            }
        }
    }
    Ok(centers)
}

/// Generates one field of view: per-cell phantoms, the three ground-truth
/// phase maps and the three recorded interferograms.
///
/// Phase at wavelength λ is `(2π/λ)·OPD·d_class(λ)`: the crest phase drawn for
/// red is rescaled by `λ_red/λ` and the class dispersion factor, so every
/// in-cell pixel has the same red/blue ratio for a given class.
pub fn make_subject(spec: &SubjectSpec) -> Result<Subject> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, "scene:layout"));
    let (rmin, rmax) = spec.cell_radius_um;
    if !(rmin > 0.0 && rmax >= rmin) {
        return Err(QpiError::Domain("cell radius range must be positive and ordered".into()));
    }
    let radii_um: Vec<f64> = (0..spec.cell_count)
        .map(|_| if rmax > rmin { rng.gen_range(rmin..rmax) } else { rmin })
        .collect();
    let radii_px: Vec<f64> = radii_um.iter().map(|r| r / sample_pixel_um()).collect();
    let centers = place_centers(spec, &radii_px, &mut rng)?;

    let mut truth = PerChannel::from_fn(|_| Array2::<f64>::zeros(spec.fov));
    let mut cells = Vec::with_capacity(spec.cell_count);
    for (i, (&radius_um, &center)) in radii_um.iter().zip(&centers).enumerate() {
        let class = draw_class(&spec.class_mix, &mut rng)?;
        let (inclusion_count, pigment_fraction) = morphology(class, &mut rng);
        let (plo, phi) = spec.red_peak_rad;
        let red_peak = if phi > plo { rng.gen_range(plo..phi) } else { plo };
        let dispersion = class.dispersion();
        let peak_phase_rad = PerChannel::from_fn(|ch| {
            red_peak * Channel::Red.wavelength_um() / ch.wavelength_um() * dispersion.get(ch)
        });
        let phantom = PhantomSpec {
            class,
            cell_radius_um: radius_um,
            peak_phase_rad,
            inclusion_count,
            pigment_fraction,
            center_px: center,
            rng_seed: seed::derive(spec.seed, &format!("scene:cell{i}")),
        };
        let shape = phantom_shape(&phantom, spec.fov)?;
        for ch in Channel::ALL {
            let peak = *phantom.peak_phase_rad.get(ch);
            let map = match ch {
                Channel::Red => &mut truth.red,
                Channel::Green => &mut truth.green,
                Channel::Blue => &mut truth.blue,
            };
            map.zip_mut_with(&shape, |t, &s| *t += s * peak);
        }
        let radius_px = phantom.radius_px();
        cells.push(CellTruth {
            bbox: cell_bbox(center, radius_px, spec.fov),
            radius_px,
            phantom,
        });
    }

    let truth = PerChannel::from_fn(|ch| PhaseMap::unwrapped(truth.get(ch).clone(), ch.wavelength_um()));
    let frames = truth.try_map(|ch, map| {
        let params = FringeParams {
            seed: seed::derive(spec.seed, &format!("scene:noise:{}", ch.name())),
            ..spec.fringe
        };
        let mut frame = synthesize_interferogram(map, &params)?;
        frame.subject_id = spec.subject_id.clone();
        Ok(frame)
    })?;
    Ok(Subject {
        subject_id: spec.subject_id.clone(),
        frames,
        truth,
        cells,
    })
}
