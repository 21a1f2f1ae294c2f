use super::AugTag;
use crate::imaging::{border_median, rotate_bilinear};
use crate::patch_extraction::RbcPatch;

/// Rotates every channel about the patch centre. Corners that fall outside
/// the source take that channel's border-median phase.
pub fn rotate_patch(patch: &RbcPatch, degrees: f64) -> RbcPatch {
    RbcPatch {
        channels: patch.channels.map(|c| rotate_bilinear(c, degrees, border_median(c))),
        ..patch.clone()
    }
}

/// `[original, rotated 45°, rotated 135°]`.
pub fn augment_rotations(patch: &RbcPatch) -> Vec<RbcPatch> {
    AugTag::ALL
        .iter()
        .map(|tag| match tag {
            AugTag::None => patch.clone(),
            t => rotate_patch(patch, t.degrees()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_model::{CellClass, PerChannel};
    use crate::imaging::BoundingBox;
    use crate::patch_extraction::PATCH_SIDE;
    use ndarray::Array2;

    fn patch(f: impl Fn(f64, f64) -> f64) -> RbcPatch {
        let c = (PATCH_SIDE as f64 - 1.0) / 2.0;
        let plane = Array2::from_shape_fn((PATCH_SIDE, PATCH_SIDE), |(r, k)| f(r as f64 - c, k as f64 - c));
        RbcPatch {
            channels: PerChannel::new(plane.clone(), plane.clone() * 0.9, plane * 0.8),
            label: Some(CellClass::LateTrophozoite),
            subject_id: "s1".into(),
            bbox: BoundingBox {
                row: 0,
                col: 0,
                height: PATCH_SIDE,
                width: PATCH_SIDE,
            },
            normalized: true,
        }
    }

    fn rms(a: &Array2<f64>, b: &Array2<f64>, interior: f64) -> f64 {
        let c = (PATCH_SIDE as f64 - 1.0) / 2.0;
        let mut sum = 0.0;
        let mut n = 0;
        for ((r, k), v) in a.indexed_iter() {
            if ((r as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt() <= interior {
                sum += (v - b[[r, k]]).powi(2);
                n += 1;
            }
        }
        (sum / n as f64).sqrt()
    }

    #[test]
    fn three_outputs_with_labels_kept() {
        let p = patch(|y, x| 0.01 * x + 0.02 * y);
        let out = augment_rotations(&p);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], p);
        for q in &out {
            assert_eq!(q.label, p.label);
            assert_eq!(q.subject_id, p.subject_id);
            assert_eq!(q.shape(), p.shape());
        }
    }

    #[test]
    fn symmetric_disk_is_unchanged() {
        let p = patch(|y, x| {
            let rho = (x * x + y * y).sqrt() / 24.0;
            if rho < 1.0 {
                2.0 * (1.0 - rho * rho)
            } else {
                0.0
            }
        });
        for q in augment_rotations(&p) {
            for (a, b) in [
                (&q.channels.red, &p.channels.red),
                (&q.channels.green, &p.channels.green),
                (&q.channels.blue, &p.channels.blue),
            ] {
                let full = (a - b).mapv(|v| v * v).mean().unwrap().sqrt();
                assert!(full < 0.01, "rms {full}");
            }
        }
    }

    #[test]
    fn two_eighth_turns_make_a_quarter_turn() {
        let p = patch(|y, x| 0.5 * (0.15 * x).sin() + 0.3 * (0.1 * y).cos() + 0.02 * x);
        let twice = rotate_patch(&rotate_patch(&p, 45.0), 45.0);
        let quarter = rotate_patch(&p, 90.0);
        for (a, b) in [
            (&twice.channels.red, &quarter.channels.red),
            (&twice.channels.blue, &quarter.channels.blue),
        ] {
            let e = rms(a, b, 20.0);
            assert!(e < 0.02, "rms {e}");
        }
    }

    #[test]
    fn corners_take_the_border_median() {
        let p = patch(|_, _| 0.7);
        let q = rotate_patch(&p, 45.0);
        assert!((q.channels.red[[0, 0]] - 0.7).abs() < 1e-12);
        assert!((q.channels.blue[[0, 0]] - 0.56).abs() < 1e-12);
    }
}
