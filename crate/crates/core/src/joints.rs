//! Articulation parameter decomposition from fitted part transforms,
//! coordinate-frame alignment for evaluation, and the motion/geometry
//! metrics.

use std::collections::BTreeMap;

use nalgebra::Unit;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{rotation_geodesic, Rotation, SimilarityTransform, Vec3};
use crate::render::{psnr, render_splats, ssim, Camera};
use crate::splat::{chamfer, GaussianSet};
use crate::synth::{JointKind, JointSpec, SceneBundle};

/// Default rotation-angle threshold separating revolute from prismatic
/// motion (0.5 degrees).
pub const JOINT_KIND_ANGLE_THRESHOLD: f64 = 0.5 * std::f64::consts::PI / 180.0;

/// Translation below which a near-identity relative motion is reported as
/// "no motion" instead of a prismatic joint.
pub const NO_MOTION_TRANSLATION_EPS: f64 = 1e-6;

/// Estimated articulation parameters of one moving part.
#[derive(Debug, Clone, PartialEq)]
pub enum JointEstimate {
    Revolute {
        part_id: u32,
        axis: Unit<Vec3>,
        /// Radians, in `(0, pi]`.
        angle: f64,
        /// The axis point nearest the moving part's centroid.
        pivot: Vec3,
    },
    Prismatic {
        part_id: u32,
        axis: Unit<Vec3>,
        magnitude: f64,
    },
}

impl JointEstimate {
    pub fn kind(&self) -> JointKind {
        match self {
            JointEstimate::Revolute { .. } => JointKind::Revolute,
            JointEstimate::Prismatic { .. } => JointKind::Prismatic,
        }
    }

    pub fn part_id(&self) -> u32 {
        match self {
            JointEstimate::Revolute { part_id, .. } => *part_id,
            JointEstimate::Prismatic { part_id, .. } => *part_id,
        }
    }

    pub fn axis(&self) -> Unit<Vec3> {
        match self {
            JointEstimate::Revolute { axis, .. } => *axis,
            JointEstimate::Prismatic { axis, .. } => *axis,
        }
    }

    /// The estimate re-expressed in another frame: directions rotate,
    /// points map through the similarity, prismatic magnitudes scale.
    pub fn in_frame(&self, frame: &SimilarityTransform) -> JointEstimate {
        match self {
            JointEstimate::Revolute {
                part_id,
                axis,
                angle,
                pivot,
            } => JointEstimate::Revolute {
                part_id: *part_id,
                axis: Unit::new_normalize(frame.rotation.apply(axis)),
                angle: *angle,
                pivot: frame.apply_to_point(pivot),
            },
            JointEstimate::Prismatic {
                part_id,
                axis,
                magnitude,
            } => JointEstimate::Prismatic {
                part_id: *part_id,
                axis: Unit::new_normalize(frame.rotation.apply(axis)),
                magnitude: frame.scale * magnitude,
            },
        }
    }
}

/// `compose(inverse(pi_root), pi_leaf)`: the leaf's motion expressed in the
/// root's (object) frame.
pub fn relative_motion(
    pi_root: &SimilarityTransform,
    pi_leaf: &SimilarityTransform,
) -> SimilarityTransform {
    SimilarityTransform::compose(&pi_root.inverse(), pi_leaf)
}

/// Decomposes a relative motion into joint parameters. Rotations below
/// `angle_threshold` are prismatic (axis from the translation); otherwise
/// revolute with the pivot solving `(I - R) p = t_perp` in least squares
/// (the translation component along the axis is discarded as screw
/// translation) and slid along the axis to the point nearest
/// `leaf_centroid`.
pub fn decompose_joint(
    rel: &SimilarityTransform,
    leaf_centroid: &Vec3,
    angle_threshold: f64,
    part_id: u32,
) -> Result<JointEstimate> {
    if !(0.95..=1.05).contains(&rel.scale) {
        return Err(Error::Degenerate(format!(
            "relative motion scale {} outside [0.95, 1.05]; frames are not aligned",
            rel.scale
        )));
    }
    let angle = rel.rotation.angle();
    if angle < angle_threshold {
        let t = rel.translation;
        let magnitude = t.norm();
        if magnitude < NO_MOTION_TRANSLATION_EPS {
            return Err(Error::NoMotion);
        }
        return Ok(JointEstimate::Prismatic {
            part_id,
            axis: Unit::new_normalize(t),
            magnitude,
        });
    }

    let axis = rel
        .rotation
        .axis()
        .ok_or_else(|| Error::Degenerate("rotation has no axis".into()))?;
    let t = rel.translation;
    let t_perp = t - axis.into_inner() * axis.dot(&t);
    let m = nalgebra::Matrix3::identity() - rel.rotation.matrix();
    let svd = m.svd(true, true);
    let p0 = svd
        .solve(&t_perp, 1e-9)
        .map_err(|e| Error::Degenerate(format!("pivot solve failed: {e}")))?;
    let pivot = p0 + axis.into_inner() * axis.dot(&(leaf_centroid - p0));
    Ok(JointEstimate::Revolute {
        part_id,
        axis,
        angle,
        pivot,
    })
}

/// Unsigned angular error between two axis directions in degrees:
/// `arccos(|a . b|)`, in `[0, 90]`.
pub fn angular_error(a_est: &Unit<Vec3>, a_gt: &Unit<Vec3>) -> f64 {
    a_est.dot(a_gt).abs().clamp(0.0, 1.0).acos().to_degrees()
}

/// An infinite line through `point` along `direction`.
#[derive(Debug, Clone, Copy)]
pub struct AxisLine {
    pub point: Vec3,
    pub direction: Unit<Vec3>,
}

/// Minimum Euclidean distance between two infinite lines (skew-line
/// formula; parallel lines reduce to point-to-line distance).
pub fn position_error(a: &AxisLine, b: &AxisLine) -> f64 {
    let d = b.point - a.point;
    let cross = a.direction.cross(&b.direction);
    let cn = cross.norm();
    if cn < 1e-9 {
        (d - a.direction.into_inner() * a.direction.dot(&d)).norm()
    } else {
        (d.dot(&cross) / cn).abs()
    }
}

/// Motion distance between an estimate and ground truth: geodesic distance
/// of the full rotations in degrees (revolute) or absolute magnitude
/// difference in scene units (prismatic). `None` on kind mismatch.
pub fn motion_distance(est: &JointEstimate, gt: &JointSpec) -> Option<f64> {
    match (est, gt.kind) {
        (JointEstimate::Revolute { axis, angle, .. }, JointKind::Revolute) => {
            let r_est = Rotation::from_axis_angle(axis, *angle);
            let r_gt = Rotation::from_axis_angle(&gt.axis, gt.motion);
            Some(rotation_geodesic(&r_est, &r_gt).to_degrees())
        }
        (JointEstimate::Prismatic { magnitude, .. }, JointKind::Prismatic) => {
            Some((magnitude - gt.motion.abs()).abs())
        }
        _ => None,
    }
}

/// How the evaluation alignment was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignmentMethod {
    CameraUmeyama,
    /// Degenerate camera configuration: centroid/spread matching of the
    /// point sets, then Chamfer refinement.
    PointSetFallback,
}

/// Sim(3) aligning the estimated frame onto the reference frame: Umeyama on
/// corresponding camera centers, then backtracking gradient refinement of
/// the 7-DoF alignment minimizing the Chamfer distance between the aligned
/// estimate and the reference geometry. The refinement never increases the
/// Chamfer distance.
pub fn align_to_reference(
    est_cameras: &[Camera],
    est_points: &GaussianSet,
    ref_cameras: &[Camera],
    ref_points: &GaussianSet,
    refine_iters: usize,
) -> Result<(SimilarityTransform, AlignmentMethod)> {
    let n = est_cameras.len().min(ref_cameras.len());
    let camera_fit = if n >= 3 {
        let corr = crate::parts::CorrespondenceSet {
            pairs: (0..n)
                .map(|k| crate::parts::CorrespondencePair {
                    source_index: k,
                    source: est_cameras[k].center(),
                    target: ref_cameras[k].center(),
                })
                .collect(),
        };
        crate::parts::umeyama(&corr, true).ok()
    } else {
        None
    };
    let (initial, method) = match camera_fit {
        Some(fit) => (fit, AlignmentMethod::CameraUmeyama),
        None => (
            point_set_fallback(est_points, ref_points)?,
            AlignmentMethod::PointSetFallback,
        ),
    };
    let refined = refine_alignment(est_points, ref_points, initial, refine_iters)?;
    Ok((refined, method))
}

/// Centroid + RMS-radius matching with identity rotation; a coarse seed for
/// the Chamfer refinement when cameras are unusable.
fn point_set_fallback(est: &GaussianSet, reference: &GaussianSet) -> Result<SimilarityTransform> {
    if est.is_empty() || reference.is_empty() {
        return Err(Error::EmptySet("alignment point set"));
    }
    let centroid = |s: &GaussianSet| {
        s.points.iter().map(|p| p.mean).sum::<Vec3>() / s.len() as f64
    };
    let rms = |s: &GaussianSet, c: &Vec3| {
        (s.points.iter().map(|p| (p.mean - c).norm_squared()).sum::<f64>() / s.len() as f64).sqrt()
    };
    let ce = centroid(est);
    let cr = centroid(reference);
    let scale = (rms(reference, &cr) / rms(est, &ce).max(1e-12)).max(1e-6);
    Ok(SimilarityTransform::new(
        Rotation::identity(),
        cr - scale * ce,
        scale,
    ))
}

fn alignment_chamfer(
    est_means: &[Vec3],
    ref_means: &[[f64; 3]],
    ref_tree: &crate::splat::KdTree<3>,
    transform: &SimilarityTransform,
) -> f64 {
    let moved: Vec<[f64; 3]> = est_means
        .iter()
        .map(|p| {
            let q = transform.apply_to_point(p);
            [q.x, q.y, q.z]
        })
        .collect();
    match crate::splat::KdTree::build(&moved) {
        Ok(tree) => {
            crate::splat::chamfer_assignments_with(&moved, ref_means, &tree, ref_tree).value()
        }
        Err(_) => f64::INFINITY,
    }
}

/// Backtracking gradient descent on (rotation delta, translation,
/// log-scale) minimizing the symmetric Chamfer distance.
fn refine_alignment(
    est: &GaussianSet,
    reference: &GaussianSet,
    initial: SimilarityTransform,
    iters: usize,
) -> Result<SimilarityTransform> {
    if iters == 0 {
        return Ok(initial);
    }
    let est_means: Vec<Vec3> = est.points.iter().map(|p| p.mean).collect();
    let ref_means = reference.means();
    let ref_tree = crate::splat::KdTree::build(&ref_means)?;

    let mut current = initial;
    let mut cur_val = alignment_chamfer(&est_means, &ref_means, &ref_tree, &current);
    let mut step = 0.05;
    for _ in 0..iters {
        // Frozen-assignment gradient.
        let moved: Vec<Vec3> = est_means
            .iter()
            .map(|p| current.apply_to_point(p))
            .collect();
        let moved_arr: Vec<[f64; 3]> = moved.iter().map(|q| [q.x, q.y, q.z]).collect();
        let Ok(moved_tree) = crate::splat::KdTree::build(&moved_arr) else {
            break;
        };
        let asg = crate::splat::chamfer_assignments_with(
            &moved_arr,
            &ref_means,
            &moved_tree,
            &ref_tree,
        );
        let n = moved.len() as f64;
        let m = ref_means.len() as f64;
        let mut dq = vec![Vec3::zeros(); moved.len()];
        for (i, &(j, _)) in asg.a_to_b.iter().enumerate() {
            let t = &ref_means[j];
            dq[i] += (2.0 / n) * (moved[i] - Vec3::new(t[0], t[1], t[2]));
        }
        for (j, &(i, _)) in asg.b_to_a.iter().enumerate() {
            let t = &ref_means[j];
            dq[i] += (2.0 / m) * (moved[i] - Vec3::new(t[0], t[1], t[2]));
        }
        let mut gw = Vec3::zeros();
        let mut gt = Vec3::zeros();
        let mut gs = 0.0;
        for (i, g) in dq.iter().enumerate() {
            let v = moved[i] - current.translation; // s R x
            gw += v.cross(g);
            gt += g;
            gs += g.dot(&v);
        }
        let gnorm = (gw.norm_squared() + gt.norm_squared() + gs * gs).sqrt();
        if gnorm < 1e-15 {
            break;
        }
        let mut accepted = false;
        for _ in 0..24 {
            let cand = SimilarityTransform::new(
                Rotation::from_matrix_unchecked(
                    nalgebra::Rotation3::from_scaled_axis(-step * gw).into_inner()
                        * current.rotation.matrix(),
                ),
                current.translation - step * gt,
                current.scale * (-step * gs).exp(),
            );
            let val = alignment_chamfer(&est_means, &ref_means, &ref_tree, &cand);
            if val <= cur_val {
                current = cand;
                cur_val = val;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(current)
}

/// Everything the two-state pipeline hands to evaluation, in its own
/// (arbitrary) source/target frames.
#[derive(Debug, Clone)]
pub struct PipelineEstimate {
    /// Final learnable splats with labels, source frame.
    pub source_splats: GaussianSet,
    /// Forward-deformed splats, target frame.
    pub target_splats: GaussianSet,
    pub part_transforms: BTreeMap<u32, SimilarityTransform>,
    pub joints: Vec<JointEstimate>,
    pub source_cameras: Vec<Camera>,
    pub target_cameras: Vec<Camera>,
}

impl PipelineEstimate {
    /// Re-expresses the estimate in transformed source/target frames; used
    /// to verify that evaluation is frame-invariant.
    pub fn in_frames(
        &self,
        q_source: &SimilarityTransform,
        q_target: &SimilarityTransform,
    ) -> PipelineEstimate {
        let move_set = |set: &GaussianSet, q: &SimilarityTransform| {
            let mut out = set.clone();
            for p in &mut out.points {
                *p = p.transformed(q);
                p.scale_vec *= q.scale;
            }
            out
        };
        let move_cams = |cams: &[Camera], q: &SimilarityTransform| {
            cams.iter()
                .map(|c| crate::synth::camera_in_frame(c, q))
                .collect()
        };
        // pi' maps the new source frame to the new target frame.
        let transforms = self
            .part_transforms
            .iter()
            .map(|(k, pi)| {
                (
                    *k,
                    SimilarityTransform::compose(
                        q_target,
                        &SimilarityTransform::compose(pi, &q_source.inverse()),
                    ),
                )
            })
            .collect();
        PipelineEstimate {
            source_splats: move_set(&self.source_splats, q_source),
            target_splats: move_set(&self.target_splats, q_target),
            part_transforms: transforms,
            joints: self.joints.iter().map(|j| j.in_frame(q_source)).collect(),
            source_cameras: move_cams(&self.source_cameras, q_source),
            target_cameras: move_cams(&self.target_cameras, q_target),
        }
    }
}

/// Per-joint metric row of the evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointErrorReport {
    pub part_id: u32,
    pub kind_est: String,
    pub kind_gt: String,
    pub kind_match: bool,
    /// Degrees, unsigned, in [0, 90].
    pub ang_err_deg: Option<f64>,
    /// Scene units; revolute joints only.
    pub pos_err: Option<f64>,
    /// Degrees for revolute, scene units for prismatic.
    pub motion_dist: Option<f64>,
    pub motion_units: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartIouReport {
    pub true_part: u32,
    pub matched_part: Option<u32>,
    pub iou: f64,
}

/// The full metric set of one two-state run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub joints: Vec<JointErrorReport>,
    /// Chamfer distance to ground-truth geometry, averaged over states.
    pub chamfer_dist: f64,
    /// Averaged over held-out views of both states.
    pub psnr: f64,
    pub ssim: f64,
    pub segmentation_iou: Vec<PartIouReport>,
    pub mean_iou: f64,
    pub alignment: AlignmentMethod,
}

/// Best-matching mean IoU between true and estimated label sets
/// (exhaustive over injective part mappings; part counts are small).
pub fn label_iou(true_labels: &[u32], est_labels: &[u32]) -> Vec<PartIouReport> {
    assert_eq!(true_labels.len(), est_labels.len());
    let mut true_parts: Vec<u32> = true_labels.to_vec();
    true_parts.sort_unstable();
    true_parts.dedup();
    let mut est_parts: Vec<u32> = est_labels.to_vec();
    est_parts.sort_unstable();
    est_parts.dedup();

    let iou = |tp: u32, ep: u32| {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (t, e) in true_labels.iter().zip(est_labels) {
            let a = *t == tp;
            let b = *e == ep;
            if a && b {
                inter += 1;
            }
            if a || b {
                union += 1;
            }
        }
        inter as f64 / union.max(1) as f64
    };
    let matrix: Vec<Vec<f64>> = true_parts
        .iter()
        .map(|&tp| est_parts.iter().map(|&ep| iou(tp, ep)).collect())
        .collect();

    // Exhaustive assignment maximizing the total IoU.
    fn assign(
        row: usize,
        used: &mut Vec<bool>,
        matrix: &[Vec<f64>],
        current: &mut Vec<Option<usize>>,
        best: &mut (f64, Vec<Option<usize>>),
        acc: f64,
    ) {
        if row == matrix.len() {
            if acc > best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        // Leave this true part unmatched.
        current.push(None);
        assign(row + 1, used, matrix, current, best, acc);
        current.pop();
        for col in 0..used.len() {
            if used[col] {
                continue;
            }
            used[col] = true;
            current.push(Some(col));
            assign(row + 1, used, matrix, current, best, acc + matrix[row][col]);
            current.pop();
            used[col] = false;
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut used = vec![false; est_parts.len()];
    assign(0, &mut used, &matrix, &mut Vec::new(), &mut best, 0.0);

    true_parts
        .iter()
        .enumerate()
        .map(|(row, &tp)| {
            let matched = best.1.get(row).copied().flatten();
            PartIouReport {
                true_part: tp,
                matched_part: matched.map(|c| est_parts[c]),
                iou: matched.map(|c| matrix[row][c]).unwrap_or(0.0),
            }
        })
        .collect()
}

/// Scales splat extents along with an alignment so renders stay consistent
/// (the plain gaussian transform deliberately leaves extents unchanged).
fn aligned_for_eval(set: &GaussianSet, align: &SimilarityTransform) -> GaussianSet {
    let mut out = set.clone();
    for p in &mut out.points {
        *p = p.transformed(align);
        p.scale_vec *= align.scale;
    }
    out
}

/// Aligns the pipeline estimate to the ground-truth frame via the cameras
/// and computes every metric. `target_state` selects which bundle state the
/// estimate's target side corresponds to (1 for the two-state pipeline).
pub fn evaluate(
    est: &PipelineEstimate,
    bundle: &SceneBundle,
    target_state: usize,
) -> Result<EvaluationReport> {
    if target_state == 0 || target_state >= bundle.canonical_states.len() {
        return Err(Error::Config(format!(
            "target_state {target_state} out of range"
        )));
    }
    let gt_source = &bundle.canonical_states[0];
    let gt_target = &bundle.canonical_states[target_state];

    let (align_s, method) = align_to_reference(
        &est.source_cameras,
        &est.source_splats,
        &bundle.reference_cameras,
        gt_source,
        60,
    )?;
    let (align_t, _) = align_to_reference(
        &est.target_cameras,
        &est.target_splats,
        &bundle.reference_cameras,
        gt_target,
        60,
    )?;

    let aligned_source = aligned_for_eval(&est.source_splats, &align_s);
    let aligned_target = aligned_for_eval(&est.target_splats, &align_t);

    // Geometry.
    let cd_source = chamfer(&aligned_source, gt_source)?;
    let cd_target = chamfer(&aligned_target, gt_target)?;
    let chamfer_dist = 0.5 * (cd_source + cd_target);

    // Appearance over held-out views, averaged over views and states.
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    let mut views = 0usize;
    for cam in &bundle.eval_cameras {
        for (pred, gt) in [(&aligned_source, gt_source), (&aligned_target, gt_target)] {
            let img_pred = render_splats(pred, cam);
            let img_gt = render_splats(gt, cam);
            psnr_acc += psnr(&img_pred, &img_gt)?;
            ssim_acc += ssim(&img_pred, &img_gt)?;
            views += 1;
        }
    }
    let psnr_avg = psnr_acc / views.max(1) as f64;
    let ssim_avg = ssim_acc / views.max(1) as f64;

    // Joints: bring estimates into the reference frame, then match to the
    // true joints of this state transition by minimal angular error.
    let true_joints = &bundle.true_joints[target_state - 1];
    let est_aligned: Vec<JointEstimate> =
        est.joints.iter().map(|j| j.in_frame(&align_s)).collect();
    let joints = match_joints(&est_aligned, true_joints);

    // Segmentation IoU against the true labels of the source state.
    let true_labels = &bundle.state_labels[0];
    if true_labels.len() != est.source_splats.len() {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {} source points, ground truth {}",
            est.source_splats.len(),
            true_labels.len()
        )));
    }
    let segmentation_iou = label_iou(true_labels, &est.source_splats.labels());
    let mean_iou = segmentation_iou.iter().map(|p| p.iou).sum::<f64>()
        / segmentation_iou.len().max(1) as f64;

    Ok(EvaluationReport {
        joints,
        chamfer_dist,
        psnr: psnr_avg,
        ssim: ssim_avg,
        segmentation_iou,
        mean_iou,
        alignment: method,
    })
}

fn kind_name(kind: JointKind) -> &'static str {
    match kind {
        JointKind::Revolute => "revolute",
        JointKind::Prismatic => "prismatic",
    }
}

fn joint_row(est: &JointEstimate, gt: &JointSpec) -> JointErrorReport {
    let kind_match = est.kind() == gt.kind;
    let ang = angular_error(&est.axis(), &gt.axis);
    let pos = match est {
        JointEstimate::Revolute { axis, pivot, .. } if gt.kind == JointKind::Revolute => {
            Some(position_error(
                &AxisLine {
                    point: *pivot,
                    direction: *axis,
                },
                &AxisLine {
                    point: gt.pivot,
                    direction: gt.axis,
                },
            ))
        }
        _ => None,
    };
    JointErrorReport {
        part_id: est.part_id(),
        kind_est: kind_name(est.kind()).to_string(),
        kind_gt: kind_name(gt.kind).to_string(),
        kind_match,
        ang_err_deg: Some(ang),
        pos_err: pos,
        motion_dist: motion_distance(est, gt),
        motion_units: match gt.kind {
            JointKind::Revolute => "degrees".to_string(),
            JointKind::Prismatic => "scene units".to_string(),
        },
    }
}

/// Greedy exhaustive matching of estimated joints to true joints by total
/// angular error; unmatched true joints produce rows with empty metrics.
fn match_joints(est: &[JointEstimate], truth: &[JointSpec]) -> Vec<JointErrorReport> {
    if truth.is_empty() {
        return Vec::new();
    }
    let mut rows = Vec::new();
    let mut used = vec![false; est.len()];
    for gt in truth {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in est.iter().enumerate() {
            if used[i] {
                continue;
            }
            let ang = angular_error(&e.axis(), &gt.axis);
            if best.map_or(true, |(_, b)| ang < b) {
                best = Some((i, ang));
            }
        }
        match best {
            Some((i, _)) => {
                used[i] = true;
                rows.push(joint_row(&est[i], gt));
            }
            None => rows.push(JointErrorReport {
                part_id: gt.child_part,
                kind_est: "missing".to_string(),
                kind_gt: kind_name(gt.kind).to_string(),
                kind_match: false,
                ang_err_deg: None,
                pos_err: None,
                motion_dist: None,
                motion_units: String::new(),
            }),
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::tests_support::{random_rotation, random_transform};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec3) -> Unit<Vec3> {
        Unit::new_normalize(v)
    }

    #[test]
    fn relative_motion_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_transform(&mut rng);
        let rel = relative_motion(&a, &a);
        assert!(rel.translation.norm() < 1e-9);
        assert!(rel.rotation.angle() < 1e-7);
        assert_relative_eq!(rel.scale, 1.0, epsilon = 1e-12);

        let b = random_transform(&mut rng);
        let rel = relative_motion(&SimilarityTransform::identity(), &b);
        assert_relative_eq!(rel.translation, b.translation, epsilon = 1e-12);

        // compose(root, rel) = leaf.
        let root = random_transform(&mut rng);
        let leaf = random_transform(&mut rng);
        let rel = relative_motion(&root, &leaf);
        let back = SimilarityTransform::compose(&root, &rel);
        for _ in 0..10 {
            let p = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            assert_relative_eq!(
                back.apply_to_point(&p),
                leaf.apply_to_point(&p),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn decompose_constructed_revolute() {
        let axis = unit(Vec3::new(0.0, 0.0, 1.0));
        let pivot = Vec3::new(1.0, 2.0, 0.0);
        let angle = 30f64.to_radians();
        let rot = Rotation::from_axis_angle(&axis, angle);
        let rel = SimilarityTransform::rigid(rot, pivot - rot.apply(&pivot));
        let est = decompose_joint(&rel, &Vec3::new(1.5, 2.5, 0.3), JOINT_KIND_ANGLE_THRESHOLD, 1)
            .unwrap();
        match est {
            JointEstimate::Revolute {
                axis: a,
                angle: th,
                pivot: p,
                ..
            } => {
                assert!(angular_error(&a, &axis) < 1e-6);
                assert_relative_eq!(th, angle, epsilon = 1e-9);
                // Recovered pivot lies on the line x=1, y=2.
                assert_relative_eq!(p.x, 1.0, epsilon = 1e-6);
                assert_relative_eq!(p.y, 2.0, epsilon = 1e-6);
                // Slid to the axis point nearest the centroid.
                assert_relative_eq!(p.z, 0.3, epsilon = 1e-6);
            }
            other => panic!("expected revolute, got {other:?}"),
        }
    }

    #[test]
    fn decompose_pure_translation_is_prismatic() {
        let rel = SimilarityTransform::from_translation(Vec3::new(0.0, 0.0, 0.5));
        let est = decompose_joint(&rel, &Vec3::zeros(), JOINT_KIND_ANGLE_THRESHOLD, 2).unwrap();
        match est {
            JointEstimate::Prismatic {
                axis, magnitude, ..
            } => {
                assert!(angular_error(&axis, &unit(Vec3::new(0.0, 0.0, 1.0))) < 1e-9);
                assert_relative_eq!(magnitude, 0.5, epsilon = 1e-12);
            }
            other => panic!("expected prismatic, got {other:?}"),
        }
    }

    #[test]
    fn decompose_no_motion_and_bad_scale() {
        let rel = SimilarityTransform::identity();
        assert!(matches!(
            decompose_joint(&rel, &Vec3::zeros(), JOINT_KIND_ANGLE_THRESHOLD, 0),
            Err(Error::NoMotion)
        ));
        let rel = SimilarityTransform::new(Rotation::identity(), Vec3::new(1.0, 0.0, 0.0), 1.2);
        assert!(decompose_joint(&rel, &Vec3::zeros(), JOINT_KIND_ANGLE_THRESHOLD, 0).is_err());
    }

    #[test]
    fn decompose_roundtrip_random_revolute() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..500 {
            let axis = unit(Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5 + 1e-3,
            ));
            // Include near-180-degree rotations.
            let angle = if trial % 10 == 0 {
                std::f64::consts::PI - rng.gen::<f64>() * 1e-3
            } else {
                0.05 + rng.gen::<f64>() * (std::f64::consts::PI - 0.1)
            };
            let pivot = Vec3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            );
            let rot = Rotation::from_axis_angle(&axis, angle);
            let rel = SimilarityTransform::rigid(rot, pivot - rot.apply(&pivot));
            let centroid = pivot
                + Vec3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                );
            let est =
                decompose_joint(&rel, &centroid, JOINT_KIND_ANGLE_THRESHOLD, 1).unwrap();
            let JointEstimate::Revolute {
                axis: a,
                angle: th,
                pivot: p,
                ..
            } = est
            else {
                panic!("trial {trial}: expected revolute");
            };
            assert!(
                angular_error(&a, &axis).to_radians() < 1e-6,
                "trial {trial}: axis error"
            );
            assert_relative_eq!(th, angle, epsilon = 1e-6);
            // Axis-line distance (pivot is only defined up to axis slide).
            let d = position_error(
                &AxisLine {
                    point: p,
                    direction: a,
                },
                &AxisLine {
                    point: pivot,
                    direction: axis,
                },
            );
            assert!(d < 1e-6, "trial {trial}: pivot line distance {d}");
        }
    }

    #[test]
    fn decompose_roundtrip_random_prismatic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..500 {
            let axis = unit(Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5 + 1e-3,
            ));
            let magnitude = 0.01 + rng.gen::<f64>();
            let rel = SimilarityTransform::from_translation(axis.into_inner() * magnitude);
            let est = decompose_joint(&rel, &Vec3::zeros(), JOINT_KIND_ANGLE_THRESHOLD, 1).unwrap();
            let JointEstimate::Prismatic {
                axis: a,
                magnitude: d,
                ..
            } = est
            else {
                panic!("trial {trial}: expected prismatic");
            };
            assert!(angular_error(&a, &axis).to_radians() < 1e-6);
            assert_relative_eq!(d, magnitude, epsilon = 1e-9);
        }
    }

    #[test]
    fn angular_error_conventions() {
        let z = unit(Vec3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(angular_error(&z, &z), 0.0, epsilon = 1e-12);
        let minus_z = unit(Vec3::new(0.0, 0.0, -1.0));
        assert_relative_eq!(angular_error(&z, &minus_z), 0.0, epsilon = 1e-12);
        let x = unit(Vec3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(angular_error(&z, &x), 90.0, epsilon = 1e-12);

        // Always within [0, 90].
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a = unit(Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5 + 1e-3,
            ));
            let b = unit(Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5 + 1e-3,
            ));
            let e = angular_error(&a, &b);
            assert!((0.0..=90.0).contains(&e));
        }
    }

    #[test]
    fn position_error_cases() {
        let z = unit(Vec3::new(0.0, 0.0, 1.0));
        let a = AxisLine {
            point: Vec3::zeros(),
            direction: z,
        };
        assert_relative_eq!(position_error(&a, &a), 0.0, epsilon = 1e-12);

        let b = AxisLine {
            point: Vec3::new(0.2, 0.0, 5.0),
            direction: z,
        };
        assert_relative_eq!(position_error(&a, &b), 0.2, epsilon = 1e-12);

        // Random skew pairs vs dense sampling.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a = AxisLine {
                point: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
                direction: unit(Vec3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5 + 1e-3,
                )),
            };
            let b = AxisLine {
                point: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
                direction: unit(Vec3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5 + 1e-3,
                )),
            };
            let formula = position_error(&a, &b);
            let mut sampled = f64::INFINITY;
            for i in -500..=500 {
                let pa = a.point + a.direction.into_inner() * (i as f64 * 0.02);
                for j in -500..=500 {
                    let pb = b.point + b.direction.into_inner() * (j as f64 * 0.02);
                    sampled = sampled.min((pa - pb).norm());
                }
            }
            assert!(
                (formula - sampled).abs() < 1e-3,
                "formula {formula} vs sampled {sampled}"
            );
        }
    }

    #[test]
    fn motion_distance_cases() {
        let z = unit(Vec3::new(0.0, 0.0, 1.0));
        let est = JointEstimate::Revolute {
            part_id: 1,
            axis: z,
            angle: 30f64.to_radians(),
            pivot: Vec3::zeros(),
        };
        let gt = JointSpec::revolute(z, Vec3::zeros(), 30f64.to_radians(), 1);
        assert_relative_eq!(motion_distance(&est, &gt).unwrap(), 0.0, epsilon = 1e-9);

        let gt10 = JointSpec::revolute(z, Vec3::zeros(), 10f64.to_radians(), 1);
        assert_relative_eq!(motion_distance(&est, &gt10).unwrap(), 20.0, epsilon = 1e-9);

        let pe = JointEstimate::Prismatic {
            part_id: 1,
            axis: z,
            magnitude: 0.5,
        };
        let pg = JointSpec::prismatic(z, 0.45, 1);
        assert_relative_eq!(motion_distance(&pe, &pg).unwrap(), 0.05, epsilon = 1e-12);

        // Kind mismatch flagged.
        assert!(motion_distance(&pe, &gt).is_none());
    }

    #[test]
    fn align_recovers_known_sim3() {
        // Build a bundle-free scenario: reference cameras + point set, and
        // an estimate expressed in a random frame.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let obj = crate::synth::generate_object(crate::synth::Template::BoxDoor, 150, 7).unwrap();
        let ref_points = obj.canonical.clone();
        let focal = 100.0;
        let ref_cams: Vec<Camera> = (0..4)
            .map(|k| {
                let az = 0.3 + k as f64 * 1.55;
                Camera::look_at(
                    format!("c{k}"),
                    Vec3::new(2.0 * az.cos(), 2.0 * az.sin(), 1.0),
                    Vec3::zeros(),
                    Vec3::new(0.0, 0.0, 1.0),
                    focal,
                    96,
                    96,
                )
                .unwrap()
            })
            .collect();

        for _ in 0..5 {
            let frame = crate::synth::random_frame_perturbation(&mut rng);
            let est_points = GaussianSet::new(
                ref_points
                    .points
                    .iter()
                    .map(|p| p.transformed(&frame))
                    .collect(),
                "est",
            );
            let est_cams: Vec<Camera> = ref_cams
                .iter()
                .map(|c| crate::synth::camera_in_frame(c, &frame))
                .collect();
            let (align, method) =
                align_to_reference(&est_cams, &est_points, &ref_cams, &ref_points, 0).unwrap();
            assert_eq!(method, AlignmentMethod::CameraUmeyama);
            // align must invert the frame.
            let expect = frame.inverse();
            assert_relative_eq!(align.scale, expect.scale, epsilon = 1e-6);
            assert!((align.translation - expect.translation).norm() < 1e-6);
            assert!(
                rotation_geodesic(&align.rotation, &expect.rotation) < 1e-6,
                "rotation mismatch"
            );
        }
    }

    #[test]
    fn align_refinement_reduces_chamfer_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let obj = crate::synth::generate_object(crate::synth::Template::Laptop, 200, 9).unwrap();
        let ref_points = obj.canonical.clone();
        let focal = 100.0;
        let ref_cams: Vec<Camera> = (0..4)
            .map(|k| {
                let az = 0.9 + k as f64 * 1.5;
                Camera::look_at(
                    format!("c{k}"),
                    Vec3::new(2.0 * az.cos(), 2.0 * az.sin(), 1.2),
                    Vec3::zeros(),
                    Vec3::new(0.0, 0.0, 1.0),
                    focal,
                    96,
                    96,
                )
                .unwrap()
            })
            .collect();
        let frame = crate::synth::random_frame_perturbation(&mut rng);
        let est_points = GaussianSet::new(
            ref_points
                .points
                .iter()
                .map(|p| {
                    let mut q = p.transformed(&frame);
                    q.mean += Vec3::new(
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                    ) * 0.005;
                    q
                })
                .collect(),
            "est",
        );
        // Noisy camera centers: Umeyama alone is off; refinement helps.
        let est_cams: Vec<Camera> = ref_cams
            .iter()
            .map(|c| {
                let mut cam = crate::synth::camera_in_frame(c, &frame);
                let noise = Vec3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                ) * 0.03;
                cam.extrinsic =
                    SimilarityTransform::rigid(cam.extrinsic.rotation, cam.extrinsic.translation + noise);
                cam
            })
            .collect();

        let (coarse, _) =
            align_to_reference(&est_cams, &est_points, &ref_cams, &ref_points, 0).unwrap();
        let (refined, _) =
            align_to_reference(&est_cams, &est_points, &ref_cams, &ref_points, 80).unwrap();
        let cd = |t: &SimilarityTransform| {
            let moved = GaussianSet::new(
                est_points.points.iter().map(|p| p.transformed(t)).collect(),
                "m",
            );
            chamfer(&moved, &ref_points).unwrap()
        };
        let before = cd(&coarse);
        let after = cd(&refined);
        assert!(after <= before, "refinement increased chamfer: {after} > {before}");
        assert!(after < before * 0.9, "no measurable improvement: {after} vs {before}");
    }

    #[test]
    fn label_iou_matching_invariance() {
        let truth = vec![0u32, 0, 0, 1, 1, 2];
        let est_same = truth.clone();
        let rows = label_iou(&truth, &est_same);
        assert!(rows.iter().all(|r| r.iou == 1.0));

        // Swapped labels still match perfectly.
        let est_swapped: Vec<u32> = truth
            .iter()
            .map(|&l| match l {
                0 => 2,
                2 => 0,
                other => other,
            })
            .collect();
        let rows = label_iou(&truth, &est_swapped);
        assert!(rows.iter().all(|r| r.iou == 1.0));
    }

    #[test]
    fn random_revolute_geodesic_involves_both_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            let axis = r.axis().unwrap_or_else(|| unit(Vec3::new(0.0, 0.0, 1.0)));
            let angle = r.angle().max(1e-3);
            let est = JointEstimate::Revolute {
                part_id: 1,
                axis,
                angle,
                pivot: Vec3::zeros(),
            };
            let gt = JointSpec::revolute(axis, Vec3::zeros(), angle, 1);
            let d = motion_distance(&est, &gt).unwrap();
            // The arccos in the geodesic cannot resolve below ~1e-8 rad.
            assert!(d < 1e-5, "self distance {d}");
        }
    }
}
