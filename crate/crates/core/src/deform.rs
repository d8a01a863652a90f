//! The low-frequency deformation field: positional encoding, a small
//! feed-forward network predicting per-point rigid transforms plus one
//! global scale, analytic backpropagation, and its training loop.
//!
//! The loss is `chamfer(deformed, target) + lambda_photo *
//! color_chamfer(deformed, target)`; nearest-neighbor assignments are frozen
//! per iteration and the loss is differentiated through the distances only.

use nalgebra::Matrix3;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{Rotation, SimilarityTransform, Vec3};
use crate::splat::{chamfer_assignments_with, embed6, GaussianSet, KdTree};

/// Training and architecture settings for the deformation field.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationConfig {
    /// Base-frequency exponent of the positional encoding.
    pub k0: f64,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Weight of the color-Chamfer term in the training loss.
    pub lambda_photo: f64,
    /// Color weight inside the color-Chamfer embedding.
    pub lambda_color: f64,
    /// Decoupled weight decay applied to the weight matrices (not biases or
    /// the log-scale). The Chamfer loss pins only deformed positions, never
    /// the per-point rotation/translation split; the decay selects the
    /// minimal-norm (most rigid) field inside that null space.
    pub weight_decay: f64,
    /// Number of encoding bands; 1 is the single frequency `2^k0`. Extra
    /// bands use `2^(k0 + b)`.
    pub bands: usize,
    pub seed: u64,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        DeformationConfig {
            k0: 1e-8,
            hidden_layers: 4,
            hidden_width: 128,
            learning_rate: 1e-3,
            iterations: 2000,
            lambda_photo: 1.0,
            lambda_color: 0.25,
            weight_decay: 1.0,
            bands: 1,
            seed: 0,
        }
    }
}

impl DeformationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.hidden_width < 8 {
            return Err(Error::Config("hidden_width must be >= 8".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.bands < 1 {
            return Err(Error::Config("bands must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// `PE(mu) = [sin(2^k0 pi mu), cos(2^k0 pi mu)]`, the single frequency band.
pub fn positional_encoding(mu: &Vec3, k0: f64) -> [f64; 6] {
    let f = 2f64.powf(k0) * std::f64::consts::PI;
    [
        (f * mu.x).sin(),
        (f * mu.y).sin(),
        (f * mu.z).sin(),
        (f * mu.x).cos(),
        (f * mu.y).cos(),
        (f * mu.z).cos(),
    ]
}

/// Multi-band variant (band `b` uses `2^(k0 + b)`); `bands = 1` reproduces
/// [`positional_encoding`].
pub fn positional_encoding_bands(mu: &Vec3, k0: f64, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * bands);
    for b in 0..bands {
        out.extend_from_slice(&positional_encoding(mu, k0 + b as f64));
    }
    out
}

fn softsign(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

/// Derivative of softsign expressed through its output: `(1 - |a|)^2`.
fn softsign_grad_from_output(a: f64) -> f64 {
    let t = 1.0 - a.abs();
    t * t
}

struct Layer {
    /// `(in, out)`, applied as `x . w + b`.
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Fully-connected network mapping `PE(mu)` to 6 raw outputs (3 Euler
/// angles squashed by `pi * tanh`, 3 raw translations) plus one trainable
/// global log-scale shared across all points. The final layer is
/// zero-initialized so the initial deformation is exactly the identity.
pub struct DeformationNetwork {
    layers: Vec<Layer>,
    log_scale: f64,
    k0: f64,
    bands: usize,
}

/// Raw per-point head outputs before the transform is assembled.
struct HeadOutputs {
    /// `(B, 6)` final-layer outputs.
    raw: Array2<f64>,
}

impl HeadOutputs {
    fn transform(&self, i: usize) -> (f64, f64, f64, Vec3) {
        let row = self.raw.row(i);
        let a = std::f64::consts::PI * row[0].tanh();
        let b = std::f64::consts::PI * row[1].tanh();
        let c = std::f64::consts::PI * row[2].tanh();
        (a, b, c, Vec3::new(row[3], row[4], row[5]))
    }
}

impl DeformationNetwork {
    pub fn new(cfg: &DeformationConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let in_dim = 6 * cfg.bands;
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(cfg.hidden_width).take(cfg.hidden_layers));
        dims.push(6);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let w = if l == n - 1 {
                    Array2::zeros((fan_in, fan_out))
                } else {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Array2::from_shape_fn((fan_in, fan_out), |_| {
                        (rng.gen::<f64>() * 2.0 - 1.0) * bound
                    })
                };
                Layer {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        DeformationNetwork {
            layers,
            log_scale: 0.0,
            k0: cfg.k0,
            bands: cfg.bands,
        }
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    pub fn global_scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn input_dim(&self) -> usize {
        6 * self.bands
    }

    fn encode(&self, means: &[Vec3]) -> Array2<f64> {
        let in_dim = self.input_dim();
        let mut x = Array2::zeros((means.len(), in_dim));
        for (i, mu) in means.iter().enumerate() {
            let pe = positional_encoding_bands(mu, self.k0, self.bands);
            for (d, v) in pe.iter().enumerate() {
                x[(i, d)] = *v;
            }
        }
        x
    }

    /// Forward pass: returns the hidden activations (input included as the
    /// first entry) and the raw head outputs.
    fn forward(&self, x: Array2<f64>) -> (Vec<Array2<f64>>, HeadOutputs) {
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts.last().unwrap().dot(&layer.w);
            z += &layer.b;
            if l + 1 < self.layers.len() {
                z.mapv_inplace(softsign);
            }
            acts.push(z);
        }
        let raw = acts.pop().unwrap();
        (acts, HeadOutputs { raw })
    }

    /// Per-point similarity transforms for a batch of means.
    pub fn predict_batch(&self, means: &[Vec3]) -> Vec<SimilarityTransform> {
        let (_, head) = self.forward(self.encode(means));
        let s = self.global_scale();
        (0..means.len())
            .map(|i| {
                let (a, b, c, t) = head.transform(i);
                SimilarityTransform::new(Rotation::from_euler_xyz(a, b, c), t, s)
            })
            .collect()
    }

    /// The transform predicted for a single mean.
    pub fn predict(&self, mu: &Vec3) -> SimilarityTransform {
        self.predict_batch(std::slice::from_ref(mu)).pop().unwrap()
    }

    fn param_tensors(&self) -> usize {
        self.layers.len() * 2 + 1
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum::<usize>()
            + 1
    }

    pub fn get_param(&self, idx: usize) -> f64 {
        let mut i = idx;
        for l in &self.layers {
            if i < l.w.len() {
                return l.w.as_slice().unwrap()[i];
            }
            i -= l.w.len();
            if i < l.b.len() {
                return l.b[i];
            }
            i -= l.b.len();
        }
        debug_assert_eq!(i, 0);
        self.log_scale
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let mut i = idx;
        for l in &mut self.layers {
            if i < l.w.len() {
                l.w.as_slice_mut().unwrap()[i] = value;
                return;
            }
            i -= l.w.len();
            if i < l.b.len() {
                l.b[i] = value;
                return;
            }
            i -= l.b.len();
        }
        debug_assert_eq!(i, 0);
        self.log_scale = value;
    }

    pub fn param_name(&self, idx: usize) -> String {
        let mut i = idx;
        for (l, layer) in self.layers.iter().enumerate() {
            if i < layer.w.len() {
                return format!("layer{l}.w[{i}]");
            }
            i -= layer.w.len();
            if i < layer.b.len() {
                return format!("layer{l}.b[{i}]");
            }
            i -= layer.b.len();
        }
        "log_scale".to_string()
    }

    /// Flat binary checkpoint: magic, version, k0, bands, layer dims,
    /// weights, biases, log-scale. Little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"ARTDNET1");
        out.extend_from_slice(&self.k0.to_le_bytes());
        out.extend_from_slice(&(self.bands as u32).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.w.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.w.ncols() as u32).to_le_bytes());
            for v in l.w.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in l.b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.log_scale.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                return Err(Error::Parse {
                    field: "network checkpoint".into(),
                    message: "truncated".into(),
                });
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        let read_f64 = |cur: &mut usize| -> Result<f64> {
            Ok(f64::from_le_bytes(take(cur, 8)?.try_into().unwrap()))
        };
        let read_u32 = |cur: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(cur, 4)?.try_into().unwrap()))
        };
        if take(&mut cur, 8)? != b"ARTDNET1" {
            return Err(Error::Parse {
                field: "network checkpoint".into(),
                message: "bad magic".into(),
            });
        }
        let k0 = read_f64(&mut cur)?;
        let bands = read_u32(&mut cur)? as usize;
        let n_layers = read_u32(&mut cur)? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let rows = read_u32(&mut cur)? as usize;
            let cols = read_u32(&mut cur)? as usize;
            let mut w = Array2::zeros((rows, cols));
            for v in w.iter_mut() {
                *v = read_f64(&mut cur)?;
            }
            let mut b = Array1::zeros(cols);
            for v in b.iter_mut() {
                *v = read_f64(&mut cur)?;
            }
            layers.push(Layer { w, b });
        }
        let log_scale = read_f64(&mut cur)?;
        Ok(DeformationNetwork {
            layers,
            log_scale,
            k0,
            bands,
        })
    }
}

/// Applies the per-point predicted transform to every source point; order is
/// preserved so index `i` of the output corresponds to source point `i`.
pub fn deform_set(net: &DeformationNetwork, source: &GaussianSet) -> GaussianSet {
    let means: Vec<Vec3> = source.points.iter().map(|p| p.mean).collect();
    let transforms = net.predict_batch(&means);
    let points = source
        .points
        .iter()
        .zip(&transforms)
        .map(|(g, pi)| g.transformed(pi))
        .collect();
    GaussianSet::new(points, format!("{}-deformed", source.frame_id))
}

fn rx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn drx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn ry(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn dry(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn rz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Fixed training data: encoded inputs and the static target-side search
/// structures.
struct TrainingProblem<'a> {
    x: Array2<f64>,
    source_means: Vec<Vec3>,
    source_colors: Vec<Vec3>,
    target_means: Vec<[f64; 3]>,
    target_embed: Vec<[f64; 6]>,
    target_tree3: KdTree<3>,
    target_tree6: KdTree<6>,
    lambda_photo: f64,
    lambda_color: f64,
    _marker: std::marker::PhantomData<&'a ()>,
}

impl TrainingProblem<'_> {
    fn new(
        net: &DeformationNetwork,
        source: &GaussianSet,
        target: &GaussianSet,
        lambda_photo: f64,
        lambda_color: f64,
    ) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::EmptySet("deformation training set"));
        }
        let source_means: Vec<Vec3> = source.points.iter().map(|p| p.mean).collect();
        let source_colors: Vec<Vec3> = source.points.iter().map(|p| p.color).collect();
        let target_means = target.means();
        let target_embed = target.color_embeddings(lambda_color);
        Ok(TrainingProblem {
            x: net.encode(&source_means),
            target_tree3: KdTree::build(&target_means)?,
            target_tree6: KdTree::build(&target_embed)?,
            source_means,
            source_colors,
            target_means,
            target_embed,
            lambda_photo,
            lambda_color,
            _marker: std::marker::PhantomData,
        })
    }

    /// Loss and, when `with_grad`, the gradient `dL/d mu_hat` per point.
    fn loss(
        &self,
        deformed: &[Vec3],
        with_grad: bool,
    ) -> Result<(f64, Vec<Vec3>)> {
        let n = deformed.len();
        let m = self.target_means.len();
        let d3: Vec<[f64; 3]> = deformed.iter().map(|p| [p.x, p.y, p.z]).collect();
        let d6: Vec<[f64; 6]> = deformed
            .iter()
            .zip(&self.source_colors)
            .map(|(p, c)| embed6(p, c, self.lambda_color))
            .collect();
        let tree3 = KdTree::build(&d3)?;
        let tree6 = KdTree::build(&d6)?;
        let asg3 = chamfer_assignments_with(&d3, &self.target_means, &tree3, &self.target_tree3);
        let asg6 = chamfer_assignments_with(&d6, &self.target_embed, &tree6, &self.target_tree6);
        let loss = asg3.value() + self.lambda_photo * asg6.value();
        if !with_grad {
            return Ok((loss, Vec::new()));
        }

        let mut grad = vec![Vec3::zeros(); n];
        let (nf, mf) = (n as f64, m as f64);
        for (i, &(j, _)) in asg3.a_to_b.iter().enumerate() {
            let t = &self.target_means[j];
            grad[i] += (2.0 / nf) * (deformed[i] - Vec3::new(t[0], t[1], t[2]));
        }
        for (j, &(i, _)) in asg3.b_to_a.iter().enumerate() {
            let t = &self.target_means[j];
            grad[i] += (2.0 / mf) * (deformed[i] - Vec3::new(t[0], t[1], t[2]));
        }
        let w = self.lambda_photo;
        for (i, &(j, _)) in asg6.a_to_b.iter().enumerate() {
            let t = &self.target_embed[j];
            grad[i] += w * (2.0 / nf) * (deformed[i] - Vec3::new(t[0], t[1], t[2]));
        }
        for (j, &(i, _)) in asg6.b_to_a.iter().enumerate() {
            let t = &self.target_embed[j];
            grad[i] += w * (2.0 / mf) * (deformed[i] - Vec3::new(t[0], t[1], t[2]));
        }
        Ok((loss, grad))
    }
}

struct Gradients {
    w: Vec<Array2<f64>>,
    b: Vec<Array1<f64>>,
    log_scale: f64,
}

/// Forward + analytic backward through encoding, network, transform head,
/// and the frozen-assignment Chamfer losses.
fn loss_and_gradients(
    net: &DeformationNetwork,
    problem: &TrainingProblem,
) -> Result<(f64, Gradients)> {
    let (acts, head) = net.forward(problem.x.clone());
    let s = net.global_scale();
    let n = problem.source_means.len();

    // Assemble transforms and deformed means.
    let mut per_point: Vec<(Matrix3<f64>, [Matrix3<f64>; 3], [f64; 3])> = Vec::with_capacity(n);
    let mut deformed = Vec::with_capacity(n);
    for i in 0..n {
        let row = head.raw.row(i);
        let (ta, tb, tc) = (row[0].tanh(), row[1].tanh(), row[2].tanh());
        let (a, b, c) = (
            std::f64::consts::PI * ta,
            std::f64::consts::PI * tb,
            std::f64::consts::PI * tc,
        );
        let (mx, my, mz) = (rx(a), ry(b), rz(c));
        let myz = my * mz;
        let r = mx * myz;
        let d0 = drx(a) * myz;
        let d1 = mx * (dry(b) * mz);
        let d2 = (mx * my) * drz(c);
        let t = Vec3::new(row[3], row[4], row[5]);
        let mu = &problem.source_means[i];
        deformed.push(s * (r * mu) + t);
        per_point.push((r, [d0, d1, d2], [ta, tb, tc]));
    }

    let (loss, dmu) = problem.loss(&deformed, true)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }

    // Chain dL/d mu_hat into the raw head outputs and the global log-scale.
    let mut d_raw = Array2::zeros((n, 6));
    let mut d_log_scale = 0.0;
    for i in 0..n {
        let g = dmu[i];
        let mu = &problem.source_means[i];
        let (_, ref dr, ref tanhs) = per_point[i];
        for k in 0..3 {
            let dtheta = g.dot(&(s * (dr[k] * mu)));
            d_raw[(i, k)] = dtheta * std::f64::consts::PI * (1.0 - tanhs[k] * tanhs[k]);
        }
        d_raw[(i, 3)] = g.x;
        d_raw[(i, 4)] = g.y;
        d_raw[(i, 5)] = g.z;
        // d mu_hat / d log s = s R mu = mu_hat - t.
        let r_mu = deformed[i] - Vec3::new(head.raw[(i, 3)], head.raw[(i, 4)], head.raw[(i, 5)]);
        d_log_scale += g.dot(&r_mu);
    }

    // Backprop through the layers.
    let n_layers = net.layers.len();
    let mut gw = Vec::with_capacity(n_layers);
    let mut gb = Vec::with_capacity(n_layers);
    let mut d_out = d_raw;
    for l in (0..n_layers).rev() {
        let input = &acts[l];
        gw.push(input.t().dot(&d_out));
        gb.push(d_out.sum_axis(Axis(0)));
        if l > 0 {
            let mut d_in = d_out.dot(&net.layers[l].w.t());
            ndarray::Zip::from(&mut d_in)
                .and(&acts[l])
                .for_each(|d, &a| *d *= softsign_grad_from_output(a));
            d_out = d_in;
        }
    }
    gw.reverse();
    gb.reverse();

    Ok((
        loss,
        Gradients {
            w: gw,
            b: gb,
            log_scale: d_log_scale,
        },
    ))
}

struct Adam {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    m_ls: f64,
    v_ls: f64,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(net: &DeformationNetwork) -> Self {
        Adam {
            m_w: net.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect(),
            v_w: net.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect(),
            m_b: net.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
            v_b: net.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
            m_ls: 0.0,
            v_ls: 0.0,
            t: 0,
        }
    }

    fn step(&mut self, net: &mut DeformationNetwork, grads: &Gradients, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let shrink = (1.0 - lr * weight_decay).max(0.0);
        for l in 0..net.layers.len() {
            ndarray::Zip::from(&mut self.m_w[l])
                .and(&grads.w[l])
                .for_each(|m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            ndarray::Zip::from(&mut self.v_w[l])
                .and(&grads.w[l])
                .for_each(|v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            ndarray::Zip::from(&mut net.layers[l].w)
                .and(&self.m_w[l])
                .and(&self.v_w[l])
                .for_each(|w, &m, &v| {
                    *w = *w * shrink - lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                });
            ndarray::Zip::from(&mut self.m_b[l])
                .and(&grads.b[l])
                .for_each(|m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            ndarray::Zip::from(&mut self.v_b[l])
                .and(&grads.b[l])
                .for_each(|v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            ndarray::Zip::from(&mut net.layers[l].b)
                .and(&self.m_b[l])
                .and(&self.v_b[l])
                .for_each(|b, &m, &v| {
                    *b -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
                });
        }
        self.m_ls = ADAM_BETA1 * self.m_ls + (1.0 - ADAM_BETA1) * grads.log_scale;
        self.v_ls = ADAM_BETA2 * self.v_ls + (1.0 - ADAM_BETA2) * grads.log_scale * grads.log_scale;
        net.log_scale -= lr * (self.m_ls / bc1) / ((self.v_ls / bc2).sqrt() + ADAM_EPS);
    }
}

/// Adam training of all network parameters. Returns the loss history (one
/// entry per iteration, evaluated before that iteration's update).
pub fn train(
    net: &mut DeformationNetwork,
    source: &GaussianSet,
    target: &GaussianSet,
    cfg: &DeformationConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let problem = TrainingProblem::new(net, source, target, cfg.lambda_photo, cfg.lambda_color)?;
    let mut adam = Adam::new(net);
    let mut history = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let (loss, grads) = loss_and_gradients(net, &problem).map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { iteration: iter },
            other => other,
        })?;
        history.push(loss);
        adam.step(net, &grads, cfg.learning_rate, cfg.weight_decay);
    }
    Ok(history)
}

/// Training loss of the current parameters (forward only).
pub fn training_loss(
    net: &DeformationNetwork,
    source: &GaussianSet,
    target: &GaussianSet,
    lambda_photo: f64,
    lambda_color: f64,
) -> Result<f64> {
    let problem = TrainingProblem::new(net, source, target, lambda_photo, lambda_color)?;
    let means: Vec<Vec3> = source.points.iter().map(|p| p.mean).collect();
    let deformed: Vec<Vec3> = net
        .predict_batch(&means)
        .iter()
        .zip(&means)
        .map(|(pi, mu)| pi.apply_to_point(mu))
        .collect();
    Ok(problem.loss(&deformed, false)?.0)
}

/// Result of the finite-difference gradient audit.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Central finite differences over every parameter of the full training
/// loss, compared against the analytic gradients. Relative error uses
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn finite_difference_check(
    net: &mut DeformationNetwork,
    source: &GaussianSet,
    target: &GaussianSet,
    lambda_photo: f64,
    lambda_color: f64,
    eps: f64,
) -> Result<GradCheckReport> {
    let problem = TrainingProblem::new(net, source, target, lambda_photo, lambda_color)?;
    let (_, grads) = loss_and_gradients(net, &problem)?;

    // Flatten analytic gradients in parameter order.
    let mut analytic = Vec::with_capacity(net.param_count());
    for l in 0..net.layers.len() {
        analytic.extend(grads.w[l].iter().copied());
        analytic.extend(grads.b[l].iter().copied());
    }
    analytic.push(grads.log_scale);
    debug_assert_eq!(analytic.len(), net.param_count());
    debug_assert_eq!(net.param_tensors(), net.layers.len() * 2 + 1);

    let mut max_rel = 0.0;
    let mut worst = String::new();
    let floor = 1e-8;
    for p in 0..net.param_count() {
        let orig = net.get_param(p);
        net.set_param(p, orig + eps);
        let plus = {
            let means: Vec<Vec3> = source.points.iter().map(|g| g.mean).collect();
            let deformed: Vec<Vec3> = net
                .predict_batch(&means)
                .iter()
                .zip(&means)
                .map(|(pi, mu)| pi.apply_to_point(mu))
                .collect();
            problem.loss(&deformed, false)?.0
        };
        net.set_param(p, orig - eps);
        let minus = {
            let means: Vec<Vec3> = source.points.iter().map(|g| g.mean).collect();
            let deformed: Vec<Vec3> = net
                .predict_batch(&means)
                .iter()
                .zip(&means)
                .map(|(pi, mu)| pi.apply_to_point(mu))
                .collect();
            problem.loss(&deformed, false)?.0
        };
        net.set_param(p, orig);
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[p].abs().max(numeric.abs()).max(floor);
        let rel = (analytic[p] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = net.param_name(p);
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param: worst,
        checked: net.param_count(),
    })
}

/// Spread of the predicted per-point rotations: mean squared Frobenius
/// deviation from the mean rotation matrix. Zero for a perfectly rigid
/// (constant) field.
pub fn rotation_variance(net: &DeformationNetwork, means: &[Vec3]) -> f64 {
    let transforms = net.predict_batch(means);
    let mut mean_mat = Matrix3::<f64>::zeros();
    for t in &transforms {
        mean_mat += t.rotation.matrix();
    }
    mean_mat /= transforms.len() as f64;
    transforms
        .iter()
        .map(|t| (t.rotation.matrix() - mean_mat).norm_squared())
        .sum::<f64>()
        / transforms.len() as f64
}
