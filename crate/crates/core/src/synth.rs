//! Ground-truth articulated scene generation and a simulated sparse-view
//! reconstruction front-end: per-state splat sets in perturbed, unrelated
//! coordinate frames with noise and independent resampling.

use std::str::FromStr;

use nalgebra::Unit;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geom::{Quat, Rotation, SimilarityTransform, Vec3};
use crate::render::Camera;
use crate::splat::{GaussianPoint, GaussianSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// One joint of the articulated object.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub kind: JointKind,
    pub axis: Unit<Vec3>,
    /// Point on the axis; meaningful for revolute joints only (zero for
    /// prismatic).
    pub pivot: Vec3,
    /// Full motion: angle in radians in `(-pi, pi]` for revolute, magnitude
    /// in scene units (>= 0) for prismatic.
    pub motion: f64,
    pub child_part: u32,
}

impl JointSpec {
    pub fn revolute(axis: Unit<Vec3>, pivot: Vec3, angle: f64, child_part: u32) -> Self {
        JointSpec {
            kind: JointKind::Revolute,
            axis,
            pivot,
            motion: angle,
            child_part,
        }
    }

    pub fn prismatic(axis: Unit<Vec3>, magnitude: f64, child_part: u32) -> Self {
        JointSpec {
            kind: JointKind::Prismatic,
            axis,
            pivot: Vec3::zeros(),
            motion: magnitude,
            child_part,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.axis.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Degenerate("joint axis must be unit length".into()));
        }
        match self.kind {
            JointKind::Revolute => {
                if self.motion <= -std::f64::consts::PI || self.motion > std::f64::consts::PI {
                    return Err(Error::Degenerate(format!(
                        "revolute motion {} outside (-pi, pi]",
                        self.motion
                    )));
                }
            }
            JointKind::Prismatic => {
                if self.motion < 0.0 {
                    return Err(Error::Degenerate(format!(
                        "prismatic magnitude {} is negative",
                        self.motion
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rigid motion of the child part at `amount` (fraction of the full
    /// motion). Revolute: rotation of `amount * angle` about (axis, pivot);
    /// prismatic: translation of `amount * magnitude` along the axis.
    pub fn motion_at(&self, amount: f64) -> SimilarityTransform {
        match self.kind {
            JointKind::Revolute => {
                let rot = Rotation::from_axis_angle(&self.axis, amount * self.motion);
                let translation = self.pivot - rot.apply(&self.pivot);
                SimilarityTransform::rigid(rot, translation)
            }
            JointKind::Prismatic => SimilarityTransform::from_translation(
                self.axis.into_inner() * (amount * self.motion),
            ),
        }
    }

    /// The same joint with its motion scaled; used to record the realized
    /// delta between two articulation states.
    pub fn with_motion(&self, motion: f64) -> JointSpec {
        let mut j = self.clone();
        j.motion = motion;
        j
    }
}

/// Synthetic object templates. Each consists of a root part plus one or two
/// moving parts attached by revolute or prismatic joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// Wall panel + door on a vertical hinge (1 revolute).
    BoxDoor,
    /// Base slab + lid on a horizontal hinge (1 revolute).
    Laptop,
    /// Cabinet + sliding drawer (1 prismatic).
    Drawer,
    /// Two crossed blades about a common pivot (1 revolute).
    Scissor,
    /// Body with two independently hinged arms (2 revolute).
    TwoArm,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::BoxDoor,
        Template::Laptop,
        Template::Drawer,
        Template::Scissor,
        Template::TwoArm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Template::BoxDoor => "box_door",
            Template::Laptop => "laptop",
            Template::Drawer => "drawer",
            Template::Scissor => "scissor",
            Template::TwoArm => "two_arm",
        }
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box_door" => Ok(Template::BoxDoor),
            "laptop" => Ok(Template::Laptop),
            "drawer" => Ok(Template::Drawer),
            "scissor" => Ok(Template::Scissor),
            "two_arm" => Ok(Template::TwoArm),
            other => Err(Error::UnknownTemplate(other.to_string())),
        }
    }
}

/// Canonical object: splats, ground-truth labels, and joint definitions.
#[derive(Debug, Clone)]
pub struct ObjectModel {
    pub canonical: GaussianSet,
    pub labels: Vec<u32>,
    pub joints: Vec<JointSpec>,
}

/// Axis-aligned box between `lo` and `hi`; optionally rotated about `rot`
/// around its center before placement.
struct PartShape {
    lo: Vec3,
    hi: Vec3,
    rot: Option<Rotation>,
    color: Vec3,
}

struct TemplateDef {
    parts: Vec<PartShape>,
    joints: Vec<JointSpec>,
}

fn unit_z() -> Unit<Vec3> {
    Unit::new_unchecked(Vec3::new(0.0, 0.0, 1.0))
}

fn unit_x() -> Unit<Vec3> {
    Unit::new_unchecked(Vec3::new(1.0, 0.0, 0.0))
}

fn template_def(template: Template) -> TemplateDef {
    let deg = |d: f64| d.to_radians();
    match template {
        Template::BoxDoor => TemplateDef {
            parts: vec![
                PartShape {
                    lo: Vec3::new(-0.5, -0.5, -0.5),
                    hi: Vec3::new(0.5, -0.3, 0.5),
                    rot: None,
                    color: Vec3::new(0.65, 0.45, 0.2),
                },
                PartShape {
                    lo: Vec3::new(-0.45, -0.28, -0.45),
                    hi: Vec3::new(0.45, -0.22, 0.45),
                    rot: None,
                    color: Vec3::new(0.2, 0.35, 0.8),
                },
            ],
            joints: vec![JointSpec::revolute(
                unit_z(),
                Vec3::new(-0.45, -0.25, 0.0),
                deg(90.0),
                1,
            )],
        },
        Template::Laptop => TemplateDef {
            parts: vec![
                PartShape {
                    lo: Vec3::new(-0.45, -0.35, -0.30),
                    hi: Vec3::new(0.45, 0.35, -0.24),
                    rot: None,
                    color: Vec3::new(0.3, 0.3, 0.35),
                },
                PartShape {
                    lo: Vec3::new(-0.45, -0.35, -0.23),
                    hi: Vec3::new(0.45, 0.35, -0.17),
                    rot: None,
                    color: Vec3::new(0.75, 0.75, 0.78),
                },
            ],
            joints: vec![JointSpec::revolute(
                unit_x(),
                Vec3::new(0.0, 0.35, -0.2),
                deg(-100.0),
                1,
            )],
        },
        Template::Drawer => TemplateDef {
            parts: vec![
                PartShape {
                    lo: Vec3::new(-0.5, -0.4, -0.4),
                    hi: Vec3::new(0.3, 0.4, 0.4),
                    rot: None,
                    color: Vec3::new(0.5, 0.3, 0.15),
                },
                PartShape {
                    lo: Vec3::new(-0.42, -0.32, -0.32),
                    hi: Vec3::new(0.34, 0.32, 0.0),
                    rot: None,
                    color: Vec3::new(0.15, 0.55, 0.3),
                },
            ],
            joints: vec![JointSpec::prismatic(unit_x(), 0.5, 1)],
        },
        Template::Scissor => {
            let tilt = deg(20.0);
            TemplateDef {
                parts: vec![
                    PartShape {
                        lo: Vec3::new(-0.5, -0.05, -0.02),
                        hi: Vec3::new(0.5, 0.05, 0.02),
                        rot: Some(Rotation::about_z(tilt)),
                        color: Vec3::new(0.7, 0.15, 0.15),
                    },
                    PartShape {
                        lo: Vec3::new(-0.5, -0.05, 0.025),
                        hi: Vec3::new(0.5, 0.05, 0.065),
                        rot: Some(Rotation::about_z(-tilt)),
                        color: Vec3::new(0.15, 0.2, 0.7),
                    },
                ],
                joints: vec![JointSpec::revolute(unit_z(), Vec3::zeros(), deg(40.0), 1)],
            }
        }
        Template::TwoArm => TemplateDef {
            parts: vec![
                PartShape {
                    lo: Vec3::new(-0.15, -0.5, -0.1),
                    hi: Vec3::new(0.15, 0.5, 0.1),
                    rot: None,
                    color: Vec3::new(0.8, 0.7, 0.2),
                },
                PartShape {
                    lo: Vec3::new(-0.5, 0.3, -0.05),
                    hi: Vec3::new(-0.15, 0.4, 0.05),
                    rot: None,
                    color: Vec3::new(0.4, 0.7, 0.9),
                },
                PartShape {
                    lo: Vec3::new(0.15, 0.3, -0.05),
                    hi: Vec3::new(0.5, 0.4, 0.05),
                    rot: None,
                    color: Vec3::new(0.85, 0.35, 0.55),
                },
            ],
            joints: vec![
                JointSpec::revolute(unit_z(), Vec3::new(-0.15, 0.35, 0.0), deg(75.0), 1),
                JointSpec::revolute(unit_z(), Vec3::new(0.15, 0.35, 0.0), deg(-75.0), 2),
            ],
        },
    }
}

/// Samples a point uniformly on the surface of an axis-aligned box.
fn sample_box_surface(rng: &mut impl Rng, lo: &Vec3, hi: &Vec3) -> Vec3 {
    let d = hi - lo;
    let areas = [d.y * d.z, d.y * d.z, d.x * d.z, d.x * d.z, d.x * d.y, d.x * d.y];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut face = 5;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.gen::<f64>();
    let v = rng.gen::<f64>();
    match face {
        0 => Vec3::new(lo.x, lo.y + u * d.y, lo.z + v * d.z),
        1 => Vec3::new(hi.x, lo.y + u * d.y, lo.z + v * d.z),
        2 => Vec3::new(lo.x + u * d.x, lo.y, lo.z + v * d.z),
        3 => Vec3::new(lo.x + u * d.x, hi.y, lo.z + v * d.z),
        4 => Vec3::new(lo.x + u * d.x, lo.y + v * d.y, lo.z),
        _ => Vec3::new(lo.x + u * d.x, lo.y + v * d.y, hi.z),
    }
}

/// Generates a canonical articulated object: surface-sampled splats over
/// parametric box parts, per-part base colors with jitter, deterministic
/// under the seed. The object is normalized to fit a unit cube before
/// articulation.
pub fn generate_object(
    template: Template,
    points_per_part: usize,
    seed: u64,
) -> Result<ObjectModel> {
    if points_per_part < 50 {
        return Err(Error::Config(format!(
            "points_per_part must be >= 50, got {points_per_part}"
        )));
    }
    let def = template_def(template);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(def.parts.len() * points_per_part);
    let mut labels = Vec::with_capacity(def.parts.len() * points_per_part);

    for (part_id, shape) in def.parts.iter().enumerate() {
        let center = (shape.lo + shape.hi) / 2.0;
        for _ in 0..points_per_part {
            let mut mean = sample_box_surface(&mut rng, &shape.lo, &shape.hi);
            if let Some(rot) = &shape.rot {
                mean = rot.apply(&(mean - center)) + center;
            }
            let jitter = Vec3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ) * 0.05;
            let color = Vec3::new(
                (shape.color.x + jitter.x).clamp(0.0, 1.0),
                (shape.color.y + jitter.y).clamp(0.0, 1.0),
                (shape.color.z + jitter.z).clamp(0.0, 1.0),
            );
            let s = 0.015 + rng.gen::<f64>() * 0.01;
            let mut g = GaussianPoint::new(
                mean,
                Quat::identity(),
                Vec3::new(s, s, s),
                0.85 + rng.gen::<f64>() * 0.15,
                color,
            );
            g.part_label = part_id as u32;
            points.push(g);
            labels.push(part_id as u32);
        }
    }

    // Normalize to the unit cube (centered, max extent 1) so thresholds and
    // frequency defaults are scale-meaningful.
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in &points {
        lo = lo.inf(&p.mean);
        hi = hi.sup(&p.mean);
    }
    let center = (lo + hi) / 2.0;
    let extent = (hi - lo).max().max(1e-9);
    let scale = 1.0 / extent;
    for p in &mut points {
        p.mean = (p.mean - center) * scale;
        p.scale_vec *= scale;
    }
    let joints = def
        .joints
        .iter()
        .map(|j| {
            let mut out = j.clone();
            out.pivot = (j.pivot - center) * scale;
            if j.kind == JointKind::Prismatic {
                out.motion *= scale;
            }
            out
        })
        .collect::<Vec<_>>();
    for j in &joints {
        j.validate()?;
    }

    Ok(ObjectModel {
        canonical: GaussianSet::new(points, "canonical"),
        labels,
        joints,
    })
}

/// Applies each joint's rigid motion, scaled by its amount, to the points of
/// its child part. Root-part points are unchanged.
pub fn articulate(
    canonical: &GaussianSet,
    labels: &[u32],
    joints: &[JointSpec],
    amounts: &[f64],
) -> Result<GaussianSet> {
    if amounts.len() != joints.len() {
        return Err(Error::Config(format!(
            "amounts length {} != joints length {}",
            amounts.len(),
            joints.len()
        )));
    }
    if labels.len() != canonical.len() {
        return Err(Error::Config(format!(
            "labels length {} != point count {}",
            labels.len(),
            canonical.len()
        )));
    }
    let mut motions = std::collections::BTreeMap::new();
    for (j, amount) in joints.iter().zip(amounts) {
        motions.insert(j.child_part, j.motion_at(*amount));
    }
    let mut points = Vec::with_capacity(canonical.len());
    for (g, &label) in canonical.points.iter().zip(labels) {
        if label == 0 {
            points.push(g.clone());
        } else {
            let pi = motions.get(&label).ok_or_else(|| {
                Error::Config(format!("point label {label} references no joint"))
            })?;
            points.push(g.transformed(pi));
        }
    }
    Ok(GaussianSet::new(points, canonical.frame_id.clone()))
}

/// Models an imperfect, frame-inconsistent reconstruction: applies the frame
/// perturbation to every splat, adds isotropic Gaussian noise to the means,
/// and replaces `resample_fraction` of the points with re-jittered copies of
/// other points (then shuffles point order) so that no exact index
/// correspondence survives. Part labels travel with the points for
/// ground-truth bookkeeping; the pipeline never reads them.
pub fn simulate_reconstruction(
    state: &GaussianSet,
    noise_sigma: f64,
    resample_fraction: f64,
    frame_perturbation: &SimilarityTransform,
    seed: u64,
) -> GaussianSet {
    assert!(noise_sigma >= 0.0);
    assert!((0.0..=1.0).contains(&resample_fraction));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<GaussianPoint> = state
        .points
        .iter()
        .map(|g| g.transformed(frame_perturbation))
        .collect();

    if noise_sigma > 0.0 {
        for g in &mut points {
            g.mean += Vec3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ) * noise_sigma;
        }
    }

    if resample_fraction > 0.0 {
        let n = points.len();
        let k = ((n as f64) * resample_fraction).round() as usize;
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        let dropped = &indices[..k.min(n)];
        let jitter_sigma = noise_sigma.max(1e-3) * 1.5;
        for &i in dropped {
            // Replace the dropped point with a re-jittered copy of a random
            // surviving point.
            let mut j = rng.gen_range(0..n);
            while dropped.contains(&j) && n > k {
                j = rng.gen_range(0..n);
            }
            let mut copy = points[j].clone();
            copy.mean += Vec3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ) * jitter_sigma;
            points[i] = copy;
        }
        points.shuffle(&mut rng);
    }

    GaussianSet::new(points, format!("{}-recon", state.frame_id))
}

/// Everything the synthetic generator knows about a scene: the reconstructed
/// states handed to the pipeline plus the hidden ground truth used only by
/// evaluation.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    /// Per-state reconstructions in their own perturbed frames; part labels
    /// are zeroed. `states[0]` is the source state.
    pub states: Vec<GaussianSet>,
    /// Cameras per state, expressed in that state's frame.
    pub state_cameras: Vec<Vec<Camera>>,
    /// Clean per-state geometry in the canonical frame.
    pub canonical_states: Vec<GaussianSet>,
    /// Ground-truth part label per canonical point.
    pub true_labels: Vec<u32>,
    /// Ground-truth label per point of each reconstructed state (tracks
    /// resampling and shuffling).
    pub state_labels: Vec<Vec<u32>>,
    /// Full joint definitions of the object.
    pub template_joints: Vec<JointSpec>,
    /// Realized joint motions between state 0 and state k+1: only joints
    /// that actually moved, with `motion` set to the realized delta.
    pub true_joints: Vec<Vec<JointSpec>>,
    /// Canonical frame -> state frame, hidden from the pipeline.
    pub frame_perturbations: Vec<SimilarityTransform>,
    /// The camera rig in the canonical frame (alignment reference; index
    /// corresponds to each state's camera list).
    pub reference_cameras: Vec<Camera>,
    /// Held-out canonical-frame cameras for image metrics.
    pub eval_cameras: Vec<Camera>,
}

/// Scene generation settings.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub template: Template,
    pub points_per_part: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub resample_fraction: f64,
    /// Joint amounts per state; `state_amounts[k][j]` scales joint `j` in
    /// state `k`. Empty selects the template default (closed source state,
    /// half-articulated target).
    pub state_amounts: Vec<Vec<f64>>,
    pub cameras_per_state: usize,
    pub eval_camera_count: usize,
    pub image_size: u32,
    /// Draw random frame perturbations per state (rotation <= 45 deg,
    /// translation <= 0.5, scale in [0.8, 1.25]); identity when off.
    pub frame_perturbation: bool,
    /// Relative jitter applied to per-state focal lengths, modelling
    /// front-end intrinsics disagreement.
    pub intrinsics_jitter: f64,
}

impl SceneConfig {
    pub fn new(template: Template) -> Self {
        SceneConfig {
            template,
            points_per_part: 1000,
            seed: 0,
            noise_sigma: 0.003,
            resample_fraction: 0.1,
            state_amounts: Vec::new(),
            cameras_per_state: 4,
            eval_camera_count: 2,
            image_size: 160,
            frame_perturbation: true,
            intrinsics_jitter: 0.01,
        }
    }
}

fn default_amounts(template: Template) -> Vec<Vec<f64>> {
    match template {
        Template::TwoArm => vec![vec![0.0, 0.0], vec![0.6, 0.6]],
        _ => vec![vec![0.0], vec![0.5]],
    }
}

/// Random frame perturbation within the documented envelope.
pub fn random_frame_perturbation(rng: &mut impl Rng) -> SimilarityTransform {
    let axis = loop {
        let v = Vec3::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        );
        if let Some(u) = Unit::try_new(v, 1e-6) {
            break u;
        }
    };
    let angle = rng.gen::<f64>() * 45f64.to_radians();
    let translation = Vec3::new(
        rng.gen::<f64>() * 2.0 - 1.0,
        rng.gen::<f64>() * 2.0 - 1.0,
        rng.gen::<f64>() * 2.0 - 1.0,
    ) * 0.5
        / 3f64.sqrt();
    let scale = 0.8 + rng.gen::<f64>() * 0.45;
    SimilarityTransform::new(Rotation::from_axis_angle(&axis, angle), translation, scale)
}

/// The canonical hemisphere camera rig: `count` cameras at radius 2.2
/// looking at the origin, azimuths evenly spaced (offset by `phase`),
/// elevations alternating between two rings.
fn camera_rig(
    prefix: &str,
    count: usize,
    phase: f64,
    focal: f64,
    image_size: u32,
) -> Result<Vec<Camera>> {
    let radius = 2.2;
    (0..count)
        .map(|k| {
            let azimuth = phase + k as f64 * std::f64::consts::TAU / count as f64;
            let elevation = if k % 2 == 0 { 25f64 } else { 40f64 }.to_radians();
            let pos = Vec3::new(
                radius * elevation.cos() * azimuth.cos(),
                radius * elevation.cos() * azimuth.sin(),
                radius * elevation.sin(),
            );
            Camera::look_at(
                format!("{prefix}{k}"),
                pos,
                Vec3::zeros(),
                Vec3::new(0.0, 0.0, 1.0),
                focal,
                image_size,
                image_size,
            )
        })
        .collect()
}

/// Conjugates a canonical-frame camera into a state frame: the center moves
/// with the similarity transform, the orientation with its rotation. The
/// extrinsic stays rigid; the frame's scale only rescales depths, which the
/// pinhole projection is invariant to.
pub fn camera_in_frame(cam: &Camera, frame: &SimilarityTransform) -> Camera {
    let center = frame.apply_to_point(&cam.center());
    let rotation = Rotation::from_matrix_unchecked(
        cam.extrinsic.rotation.matrix() * frame.rotation.matrix().transpose(),
    );
    let translation = -(rotation.apply(&center));
    let mut out = cam.clone();
    out.extrinsic = SimilarityTransform::rigid(rotation, translation);
    out
}

/// Generates a full synthetic scene: canonical object, per-state
/// articulation, simulated reconstructions in perturbed frames, cameras,
/// and ground truth for evaluation.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneBundle> {
    let object = generate_object(cfg.template, cfg.points_per_part, cfg.seed)?;
    let amounts = if cfg.state_amounts.is_empty() {
        default_amounts(cfg.template)
    } else {
        cfg.state_amounts.clone()
    };
    if amounts.len() < 2 {
        return Err(Error::Config("a scene needs at least two states".into()));
    }

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(7));
    let focal = 0.5 * cfg.image_size as f64 / (22.5f64.to_radians()).tan();
    let reference_cameras = camera_rig("cam", cfg.cameras_per_state, 0.35, focal, cfg.image_size)?;
    let eval_cameras = camera_rig(
        "eval",
        cfg.eval_camera_count.max(1),
        1.15,
        focal,
        cfg.image_size,
    )?;

    let mut states = Vec::new();
    let mut state_cameras = Vec::new();
    let mut canonical_states = Vec::new();
    let mut state_labels = Vec::new();
    let mut true_joints = Vec::new();
    let mut frame_perturbations = Vec::new();

    for (k, state_amounts) in amounts.iter().enumerate() {
        let canonical_state =
            articulate(&object.canonical, &object.labels, &object.joints, state_amounts)?;
        let perturbation = if cfg.frame_perturbation {
            random_frame_perturbation(&mut master)
        } else {
            SimilarityTransform::identity()
        };
        let recon_seed = master.gen::<u64>();
        let recon = simulate_reconstruction(
            &canonical_state,
            cfg.noise_sigma,
            cfg.resample_fraction,
            &perturbation,
            recon_seed,
        );
        state_labels.push(recon.labels());
        let mut public = recon;
        public.frame_id = format!("state{k}");
        for p in &mut public.points {
            p.part_label = 0;
        }

        let jitter = 1.0 + cfg.intrinsics_jitter * (master.gen::<f64>() * 2.0 - 1.0);
        let cams = reference_cameras
            .iter()
            .map(|c| {
                let mut cam = camera_in_frame(c, &perturbation);
                cam.id = format!("s{k}-{}", c.id);
                cam.intrinsics[(0, 0)] *= jitter;
                cam.intrinsics[(1, 1)] *= jitter;
                cam
            })
            .collect();

        if k > 0 {
            let realized: Vec<JointSpec> = object
                .joints
                .iter()
                .enumerate()
                .filter_map(|(j, joint)| {
                    let delta = state_amounts[j] - amounts[0][j];
                    (delta.abs() > 1e-12).then(|| joint.with_motion(delta * joint.motion))
                })
                .collect();
            true_joints.push(realized);
        }

        states.push(public);
        state_cameras.push(cams);
        canonical_states.push(canonical_state);
        frame_perturbations.push(perturbation);
    }

    Ok(SceneBundle {
        states,
        state_cameras,
        canonical_states,
        true_labels: object.labels,
        state_labels,
        template_joints: object.joints,
        true_joints,
        frame_perturbations,
        reference_cameras,
        eval_cameras,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn generate_object_contract() {
        let obj = generate_object(Template::BoxDoor, 500, 7).unwrap();
        assert_eq!(obj.canonical.len(), 1000);
        let mut labels: Vec<u32> = obj.labels.clone();
        labels.dedup();
        assert_eq!(labels, vec![0, 1]);
        assert_eq!(obj.joints.len(), 1);
        assert_eq!(obj.joints[0].kind, JointKind::Revolute);

        // Determinism.
        let again = generate_object(Template::BoxDoor, 500, 7).unwrap();
        assert_eq!(obj.canonical, again.canonical);

        // Fits in the unit cube.
        for p in &obj.canonical.points {
            assert!(p.mean.abs().max() <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn drawer_is_prismatic() {
        let obj = generate_object(Template::Drawer, 100, 1).unwrap();
        assert_eq!(obj.joints[0].kind, JointKind::Prismatic);
    }

    #[test]
    fn small_point_count_rejected() {
        assert!(generate_object(Template::BoxDoor, 10, 0).is_err());
    }

    #[test]
    fn articulate_zero_amounts_is_identity() {
        let obj = generate_object(Template::Laptop, 120, 3).unwrap();
        let out = articulate(&obj.canonical, &obj.labels, &obj.joints, &[0.0]).unwrap();
        assert_eq!(out, obj.canonical);
    }

    #[test]
    fn articulate_revolute_analytic_case() {
        // Revolute 90 deg about z through the origin moves (1,0,0) to (0,1,0).
        let mut canonical = crate::splat::GaussianSet::new(
            vec![
                GaussianPoint::new(
                    Vec3::new(0.0, 0.0, 0.0),
                    Quat::identity(),
                    Vec3::repeat(0.01),
                    1.0,
                    Vec3::repeat(0.5),
                ),
                GaussianPoint::new(
                    Vec3::new(1.0, 0.0, 0.0),
                    Quat::identity(),
                    Vec3::repeat(0.01),
                    1.0,
                    Vec3::repeat(0.5),
                ),
            ],
            "c",
        );
        canonical.points[1].part_label = 1;
        let joints = vec![JointSpec::revolute(
            unit_z(),
            Vec3::zeros(),
            90f64.to_radians(),
            1,
        )];
        let out = articulate(&canonical, &[0, 1], &joints, &[1.0]).unwrap();
        assert_relative_eq!(out.points[1].mean, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        assert_eq!(out.points[0].mean, canonical.points[0].mean);
    }

    #[test]
    fn articulate_prismatic_partial_amount() {
        let joints = vec![JointSpec::prismatic(unit_z(), 0.5, 1)];
        let mut canonical = crate::splat::GaussianSet::new(
            vec![GaussianPoint::new(
                Vec3::new(0.2, 0.1, 0.0),
                Quat::identity(),
                Vec3::repeat(0.01),
                1.0,
                Vec3::repeat(0.5),
            )],
            "c",
        );
        canonical.points[0].part_label = 1;
        let out = articulate(&canonical, &[1], &joints, &[0.5]).unwrap();
        assert_relative_eq!(
            out.points[0].mean,
            Vec3::new(0.2, 0.1, 0.25),
            epsilon = 1e-12
        );
    }

    #[test]
    fn articulate_unknown_label_errors() {
        let obj = generate_object(Template::BoxDoor, 100, 5).unwrap();
        let mut labels = obj.labels.clone();
        labels[0] = 9;
        assert!(articulate(&obj.canonical, &labels, &obj.joints, &[0.5]).is_err());
    }

    #[test]
    fn articulate_preserves_within_part_distances() {
        let obj = generate_object(Template::TwoArm, 150, 11).unwrap();
        let out = articulate(&obj.canonical, &obj.labels, &obj.joints, &[0.7, 0.4]).unwrap();
        let mut checked = 0;
        for i in (0..obj.canonical.len()).step_by(17) {
            for j in (i + 1..obj.canonical.len()).step_by(29) {
                if obj.labels[i] != obj.labels[j] {
                    continue;
                }
                let before = (obj.canonical.points[i].mean - obj.canonical.points[j].mean).norm();
                let after = (out.points[i].mean - out.points[j].mean).norm();
                assert_relative_eq!(before, after, epsilon = 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn articulate_roundtrip_through_inverse_motion() {
        let obj = generate_object(Template::Scissor, 200, 13).unwrap();
        let opened = articulate(&obj.canonical, &obj.labels, &obj.joints, &[1.0]).unwrap();
        let inverse: Vec<JointSpec> = obj
            .joints
            .iter()
            .map(|j| j.with_motion(-j.motion))
            .collect();
        let closed = articulate(&opened, &obj.labels, &inverse, &[1.0]).unwrap();
        for (a, b) in closed.points.iter().zip(&obj.canonical.points) {
            assert_relative_eq!(a.mean, b.mean, epsilon = 1e-9);
        }
    }

    #[test]
    fn simulate_reconstruction_identity_passthrough() {
        let obj = generate_object(Template::BoxDoor, 100, 17).unwrap();
        let out = simulate_reconstruction(
            &obj.canonical,
            0.0,
            0.0,
            &SimilarityTransform::identity(),
            99,
        );
        assert_eq!(out.points, obj.canonical.points);
    }

    #[test]
    fn simulate_reconstruction_noise_statistics() {
        let obj = generate_object(Template::BoxDoor, 5000, 19).unwrap();
        let sigma = 0.01;
        let out = simulate_reconstruction(
            &obj.canonical,
            sigma,
            0.0,
            &SimilarityTransform::identity(),
            123,
        );
        let mut sq = 0.0;
        let mut n = 0.0;
        for (a, b) in out.points.iter().zip(&obj.canonical.points) {
            let d = a.mean - b.mean;
            sq += d.norm_squared();
            n += 3.0;
        }
        let empirical = (sq / n).sqrt();
        assert!(
            (empirical - sigma).abs() < 0.1 * sigma,
            "empirical sigma {empirical} vs {sigma}"
        );
    }

    #[test]
    fn simulate_reconstruction_pure_frame_matches_transform() {
        let obj = generate_object(Template::Laptop, 150, 23).unwrap();
        let frame = SimilarityTransform::new(
            Rotation::about_y(25f64.to_radians()),
            Vec3::new(0.3, 0.0, 0.0),
            1.2,
        );
        let out = simulate_reconstruction(&obj.canonical, 0.0, 0.0, &frame, 7);
        for (a, b) in out.points.iter().zip(&obj.canonical.points) {
            assert_relative_eq!(a.mean, frame.apply_to_point(&b.mean), epsilon = 1e-12);
        }
        // Invert and compare.
        let inv = frame.inverse();
        for (a, b) in out.points.iter().zip(&obj.canonical.points) {
            assert_relative_eq!(inv.apply_to_point(&a.mean), b.mean, epsilon = 1e-9);
        }
    }

    #[test]
    fn simulate_reconstruction_resampling_breaks_correspondence() {
        let obj = generate_object(Template::BoxDoor, 300, 29).unwrap();
        let out = simulate_reconstruction(
            &obj.canonical,
            0.0,
            0.25,
            &SimilarityTransform::identity(),
            5,
        );
        assert_eq!(out.len(), obj.canonical.len());
        let moved = out
            .points
            .iter()
            .zip(&obj.canonical.points)
            .filter(|(a, b)| a.mean != b.mean)
            .count();
        assert!(
            moved > obj.canonical.len() / 2,
            "shuffle should break index correspondence, only {moved} moved"
        );
        // Labels still partition into the original parts.
        assert!(out.points.iter().all(|p| p.part_label <= 1));
    }

    #[test]
    fn generate_scene_shapes_and_determinism() {
        let mut cfg = SceneConfig::new(Template::BoxDoor);
        cfg.points_per_part = 120;
        cfg.seed = 33;
        let a = generate_scene(&cfg).unwrap();
        assert_eq!(a.states.len(), 2);
        assert_eq!(a.state_cameras[0].len(), 4);
        assert_eq!(a.true_joints.len(), 1);
        assert_eq!(a.true_joints[0].len(), 1);
        assert_relative_eq!(
            a.true_joints[0][0].motion,
            45f64.to_radians(),
            epsilon = 1e-12
        );
        assert!(a.states[0].points.iter().all(|p| p.part_label == 0));
        assert_eq!(a.state_labels[0].len(), a.states[0].len());

        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.frame_perturbations.len(), b.frame_perturbations.len());
    }

    #[test]
    fn camera_in_frame_preserves_projection() {
        // Projecting a point through the conjugated camera in the perturbed
        // frame gives the same pixel as the canonical camera.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(61);
        let cam = camera_rig("c", 1, 0.2, 193.0, 160).unwrap().remove(0);
        for _ in 0..20 {
            let frame = random_frame_perturbation(&mut rng);
            let p = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ) * 0.8;
            let (u0, v0, _) = cam.project(&p).unwrap();
            let moved_cam = camera_in_frame(&cam, &frame);
            let (u1, v1, _) = moved_cam.project(&frame.apply_to_point(&p)).unwrap();
            assert_relative_eq!(u0, u1, epsilon = 1e-6);
            assert_relative_eq!(v0, v1, epsilon = 1e-6);
        }
    }
}
