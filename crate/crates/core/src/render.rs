//! Pinhole cameras, a z-buffered point-splat software renderer for
//! evaluation imagery, image metrics (PSNR, SSIM), intrinsic averaging, and
//! extrinsic refinement.
//!
//! The renderer is deliberately non-differentiable; gradients elsewhere in
//! the pipeline come from the color-augmented Chamfer proxy (see `splat`).

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geom::{Rotation, SimilarityTransform, Vec3};
use crate::splat::{chamfer_assignments, embed6, GaussianSet};

/// PSNR reported for identical images (dB).
pub const PSNR_SENTINEL: f64 = 99.0;

/// Pinhole camera: intrinsics `[fx 0 cx; 0 fy cy; 0 0 1]` in pixels and a
/// rigid world-to-camera extrinsic (+z looks into the scene).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub intrinsics: Matrix3<f64>,
    /// World-to-camera transform; scale is fixed at 1.
    pub extrinsic: SimilarityTransform,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        id: impl Into<String>,
        intrinsics: Matrix3<f64>,
        extrinsic: SimilarityTransform,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = Camera {
            id: id.into(),
            intrinsics,
            extrinsic,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx() <= 0.0 || self.fy() <= 0.0 {
            return Err(Error::Degenerate(format!(
                "camera {}: focal lengths must be positive",
                self.id
            )));
        }
        if self.cx() <= 0.0
            || self.cx() >= self.width as f64
            || self.cy() <= 0.0
            || self.cy() >= self.height as f64
        {
            return Err(Error::Degenerate(format!(
                "camera {}: principal point outside the image",
                self.id
            )));
        }
        if (self.extrinsic.scale - 1.0).abs() > 1e-12 {
            return Err(Error::Degenerate(format!(
                "camera {}: extrinsic must be rigid (scale 1)",
                self.id
            )));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn intrinsics_from_params(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.extrinsic.inverse().apply_to_point(&Vec3::zeros())
    }

    /// Camera looking from `position` toward `target` with the given world
    /// up direction.
    pub fn look_at(
        id: impl Into<String>,
        position: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let z = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Degenerate("camera position equals target".into()))?;
        let x = up
            .cross(&z)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::Degenerate("camera view direction parallel to up".into()))?;
        let y = z.cross(&x);
        let rot = Rotation::from_matrix_unchecked(Matrix3::from_rows(&[
            x.transpose(),
            y.transpose(),
            z.transpose(),
        ]));
        let translation = -(rot.apply(&position));
        let intrinsics =
            Self::intrinsics_from_params(focal, focal, width as f64 / 2.0, height as f64 / 2.0);
        Camera::new(
            id,
            intrinsics,
            SimilarityTransform::rigid(rot, translation),
            width,
            height,
        )
    }

    /// Projects a world point to `(u, v, depth)`; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.extrinsic.apply_to_point(p);
        if c.z <= 1e-9 {
            return None;
        }
        let u = self.fx() * c.x / c.z + self.cx();
        let v = self.fy() * c.y / c.z + self.cy();
        Some((u, v, c.z))
    }
}

/// RGBA + depth raster; channel values in `[0, 1]`, depth `+inf` where empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major, 4 values per pixel.
    pub rgba: Vec<f64>,
    pub depth: Vec<f64>,
}

impl Image {
    pub fn blank(width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        Image {
            width,
            height,
            rgba: vec![0.0; n * 4],
            depth: vec![f64::INFINITY; n],
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [f64; 4] {
        let i = ((y * self.width + x) * 4) as usize;
        [
            self.rgba[i],
            self.rgba[i + 1],
            self.rgba[i + 2],
            self.rgba[i + 3],
        ]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgba: [f64; 4]) {
        let i = ((y * self.width + x) * 4) as usize;
        self.rgba[i..i + 4].copy_from_slice(&rgba);
    }

    /// RGB composited over a black background (premultiplied by alpha).
    #[inline]
    pub fn composite_rgb(&self, x: u32, y: u32) -> [f64; 3] {
        let p = self.pixel(x, y);
        [p[0] * p[3], p[1] * p[3], p[2] * p[3]]
    }
}

/// Z-buffered disc splatting: each point is drawn as a screen-space disc of
/// radius `fx * mean(scale_vec) / depth` clamped to `[1, 16]` px; the nearest
/// depth wins per pixel (first point drawn wins exact ties); alpha is the
/// winning point's opacity; the background is transparent black.
pub fn render_splats(set: &GaussianSet, cam: &Camera) -> Image {
    let mut img = Image::blank(cam.width, cam.height);
    let w = cam.width as i64;
    let h = cam.height as i64;
    for g in &set.points {
        let Some((u, v, z)) = cam.project(&g.mean) else {
            continue;
        };
        let mean_scale = (g.scale_vec.x + g.scale_vec.y + g.scale_vec.z) / 3.0;
        let radius = (cam.fx() * mean_scale / z).clamp(1.0, 16.0);
        let r2 = radius * radius;
        let x0 = ((u - radius).floor() as i64).max(0);
        let x1 = ((u + radius).ceil() as i64).min(w - 1);
        let y0 = ((v - radius).floor() as i64).max(0);
        let y1 = ((v + radius).ceil() as i64).min(h - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 + 0.5 - u;
                let dy = py as f64 + 0.5 - v;
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                let idx = (py * w + px) as usize;
                if z < img.depth[idx] {
                    img.depth[idx] = z;
                    img.set_pixel(
                        px as u32,
                        py as u32,
                        [g.color.x, g.color.y, g.color.z, g.opacity],
                    );
                }
            }
        }
    }
    img
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(format!(
            "images {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_SENTINEL
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR in dB over RGB with MAX = 1, computed over the union of
/// non-transparent pixels of the two images (RGB composited over black).
/// Identical images report the sentinel (>= 99 dB).
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let mut se = 0.0;
    let mut n = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if a.pixel(x, y)[3] <= 0.0 && b.pixel(x, y)[3] <= 0.0 {
                continue;
            }
            let ca = a.composite_rgb(x, y);
            let cb = b.composite_rgb(x, y);
            for ch in 0..3 {
                let d = ca[ch] - cb[ch];
                se += d * d;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok(psnr_from_mse(se / (3 * n) as f64))
}

/// PSNR over every pixel regardless of coverage.
pub fn psnr_full_frame(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let mut se = 0.0;
    for y in 0..a.height {
        for x in 0..a.width {
            let ca = a.composite_rgb(x, y);
            let cb = b.composite_rgb(x, y);
            for ch in 0..3 {
                let d = ca[ch] - cb[ch];
                se += d * d;
            }
        }
    }
    Ok(psnr_from_mse(se / (3 * a.width as u64 * a.height as u64) as f64))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_window_weights() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean SSIM over RGB channels (composited over black) with the standard
/// 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, L = 1; windows
/// are evaluated only where they fit entirely inside the frame.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::DimensionMismatch(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let weights = ssim_window_weights();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    // Per-channel planes composited over black.
    let mut planes_a = vec![vec![0.0f64; w * h]; 3];
    let mut planes_b = vec![vec![0.0f64; w * h]; 3];
    for y in 0..h {
        for x in 0..w {
            let ca = a.composite_rgb(x as u32, y as u32);
            let cb = b.composite_rgb(x as u32, y as u32);
            for ch in 0..3 {
                planes_a[ch][y * w + x] = ca[ch];
                planes_b[ch][y * w + x] = cb[ch];
            }
        }
    }

    let mut total = 0.0;
    for ch in 0..3 {
        let pa = &planes_a[ch];
        let pb = &planes_b[ch];
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let wgt = weights[wy * SSIM_WINDOW + wx];
                        mu_a += wgt * pa[(y0 + wy) * w + x0 + wx];
                        mu_b += wgt * pb[(y0 + wy) * w + x0 + wx];
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let wgt = weights[wy * SSIM_WINDOW + wx];
                        let da = pa[(y0 + wy) * w + x0 + wx] - mu_a;
                        let db = pb[(y0 + wy) * w + x0 + wx] - mu_b;
                        var_a += wgt * da * da;
                        var_b += wgt * db * db;
                        cov += wgt * da * db;
                    }
                }
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                acc += s;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / 3.0)
}

/// Element-wise mean of every intrinsic matrix from both lists.
pub fn average_intrinsics(a: &[Camera], b: &[Camera]) -> Result<Matrix3<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("camera list"));
    }
    let mut acc = Matrix3::zeros();
    for cam in a.iter().chain(b.iter()) {
        acc += cam.intrinsics;
    }
    Ok(acc / (a.len() + b.len()) as f64)
}

/// A fixed colored point cloud in camera coordinates: the back-projection of
/// a rendered reference view, used as the observation extrinsic refinement
/// aligns against.
#[derive(Debug, Clone)]
pub struct Observation {
    /// `[x, y, z, lambda_c * rgb]` in the observing camera's frame.
    pub points: Vec<[f64; 6]>,
    pub lambda_c: f64,
}

/// Back-projects every covered pixel (subsampled by `stride`) of a rendered
/// image into camera-frame colored points.
pub fn backproject(img: &Image, cam: &Camera, lambda_c: f64, stride: u32) -> Observation {
    let stride = stride.max(1);
    let mut points = Vec::new();
    let mut y = 0;
    while y < img.height {
        let mut x = 0;
        while x < img.width {
            let d = img.depth[(y * img.width + x) as usize];
            if d.is_finite() {
                let px = img.pixel(x, y);
                let xc = (x as f64 + 0.5 - cam.cx()) / cam.fx() * d;
                let yc = (y as f64 + 0.5 - cam.cy()) / cam.fy() * d;
                points.push([
                    xc,
                    yc,
                    d,
                    lambda_c * px[0],
                    lambda_c * px[1],
                    lambda_c * px[2],
                ]);
            }
            x += stride;
        }
        y += stride;
    }
    Observation { points, lambda_c }
}

fn camera_objective(set_embedded: &[[f64; 6]], extrinsic: &SimilarityTransform, obs: &Observation) -> f64 {
    let transformed: Vec<[f64; 6]> = set_embedded
        .iter()
        .map(|p| {
            let q = extrinsic.apply_to_point(&Vec3::new(p[0], p[1], p[2]));
            [q.x, q.y, q.z, p[3], p[4], p[5]]
        })
        .collect();
    match chamfer_assignments(&transformed, &obs.points) {
        Ok(asg) => asg.value(),
        Err(_) => f64::INFINITY,
    }
}

fn camera_gradient(
    set_embedded: &[[f64; 6]],
    extrinsic: &SimilarityTransform,
    obs: &Observation,
) -> (Vec3, Vec3, f64) {
    let transformed: Vec<[f64; 6]> = set_embedded
        .iter()
        .map(|p| {
            let q = extrinsic.apply_to_point(&Vec3::new(p[0], p[1], p[2]));
            [q.x, q.y, q.z, p[3], p[4], p[5]]
        })
        .collect();
    let asg = match chamfer_assignments(&transformed, &obs.points) {
        Ok(a) => a,
        Err(_) => return (Vec3::zeros(), Vec3::zeros(), f64::INFINITY),
    };
    let value = asg.value();

    // dL/dq per transformed splat point, assignments frozen.
    let n = transformed.len() as f64;
    let m = obs.points.len() as f64;
    let mut dq = vec![Vec3::zeros(); transformed.len()];
    for (i, &(j, _)) in asg.a_to_b.iter().enumerate() {
        let diff = Vec3::new(
            transformed[i][0] - obs.points[j][0],
            transformed[i][1] - obs.points[j][1],
            transformed[i][2] - obs.points[j][2],
        );
        dq[i] += (2.0 / n) * diff;
    }
    for (j, &(i, _)) in asg.b_to_a.iter().enumerate() {
        let diff = Vec3::new(
            transformed[i][0] - obs.points[j][0],
            transformed[i][1] - obs.points[j][1],
            transformed[i][2] - obs.points[j][2],
        );
        dq[i] += (2.0 / m) * diff;
    }

    // q = exp(w^) R x + t: dq/dw_k = e_k x (R x), dq/dt = I.
    let mut grad_w = Vec3::zeros();
    let mut grad_t = Vec3::zeros();
    for (i, p) in set_embedded.iter().enumerate() {
        let rx = extrinsic.apply_to_point(&Vec3::new(p[0], p[1], p[2])) - extrinsic.translation;
        grad_w += rx.cross(&dq[i]);
        grad_t += dq[i];
    }
    (grad_w, grad_t, value)
}

/// Refines one camera's 6-DoF extrinsic against a fixed observation by
/// backtracking gradient descent on the symmetric color Chamfer between the
/// camera-frame splats and the observation. The returned camera's objective
/// never exceeds the input's.
pub fn refine_extrinsic_to_observation(
    set: &GaussianSet,
    obs: &Observation,
    cam: &Camera,
    iters: usize,
) -> Camera {
    if iters == 0 || obs.points.is_empty() || set.is_empty() {
        return cam.clone();
    }
    let embedded: Vec<[f64; 6]> = set
        .points
        .iter()
        .map(|g| embed6(&g.mean, &g.color, obs.lambda_c))
        .collect();

    let mut extrinsic = cam.extrinsic;
    let mut cur = camera_objective(&embedded, &extrinsic, obs);
    let mut step = 0.1;
    for _ in 0..iters {
        let (gw, gt, _) = camera_gradient(&embedded, &extrinsic, obs);
        let gnorm = (gw.norm_squared() + gt.norm_squared()).sqrt();
        if gnorm < 1e-15 {
            break;
        }
        let mut accepted = false;
        for _ in 0..24 {
            let dw = -step * gw;
            let dt = -step * gt;
            let cand = SimilarityTransform::rigid(
                Rotation::from_matrix_unchecked(
                    nalgebra::Rotation3::from_scaled_axis(dw).into_inner()
                        * extrinsic.rotation.matrix(),
                ),
                extrinsic.translation + dt,
            );
            let val = camera_objective(&embedded, &cand, obs);
            if val <= cur {
                extrinsic = cand;
                cur = val;
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
    let mut out = cam.clone();
    out.extrinsic = extrinsic;
    out
}

/// Refines each camera's extrinsic against the back-projection of its own
/// reference rendering of `set`. With `iters = 0` the input cameras are
/// returned verbatim; the refinement never increases a camera's objective.
pub fn refine_extrinsics(set: &GaussianSet, cams: &[Camera], iters: usize) -> Vec<Camera> {
    cams.iter()
        .map(|cam| {
            if iters == 0 {
                return cam.clone();
            }
            let reference = render_splats(set, cam);
            let stride = 1 + (cam.width * cam.height) / 4096;
            let obs = backproject(&reference, cam, 0.25, stride);
            refine_extrinsic_to_observation(set, &obs, cam, iters)
        })
        .collect()
}
