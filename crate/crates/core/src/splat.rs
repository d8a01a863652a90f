//! Gaussian point sets, exact nearest-neighbor queries, Chamfer distances
//! (geometric and color-augmented), and the loss terms built from them.
//!
//! Chamfer uses squared distances and per-set means (the symmetric mean of
//! squared nearest-neighbor distances); metric values are comparable across
//! runs only under this variant.

use crate::error::{Error, Result};
use crate::geom::{Quat, SimilarityTransform, Vec3};

/// One Gaussian splat `g = (mu, q, s, o, c)` plus a part label and a
/// displacement field used during joint optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPoint {
    pub mean: Vec3,
    /// Unit orientation quaternion, scalar-first `(w, x, y, z)`.
    pub orientation: Quat,
    /// Positive per-axis extents.
    pub scale_vec: Vec3,
    /// In `[0, 1]`.
    pub opacity: f64,
    /// RGB in `[0, 1]`.
    pub color: Vec3,
    /// Part id; the root part is 0.
    pub part_label: u32,
    /// Per-point displacement `delta mu`, zero by default.
    pub displacement: Vec3,
}

impl GaussianPoint {
    pub fn new(mean: Vec3, orientation: Quat, scale_vec: Vec3, opacity: f64, color: Vec3) -> Self {
        GaussianPoint {
            mean,
            orientation,
            scale_vec,
            opacity,
            color,
            part_label: 0,
            displacement: Vec3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.orientation.as_ref().norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Degenerate(format!(
                "orientation quaternion norm {} is not 1",
                self.orientation.as_ref().norm()
            )));
        }
        if self.scale_vec.iter().any(|&s| s <= 0.0) {
            return Err(Error::Degenerate(format!(
                "scale_vec {:?} has a non-positive component",
                self.scale_vec
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Degenerate(format!(
                "opacity {} outside [0, 1]",
                self.opacity
            )));
        }
        if self.color.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::Degenerate(format!(
                "color {:?} outside [0, 1]",
                self.color
            )));
        }
        Ok(())
    }

    /// `pi . g`: transforms the mean by `s R mu + t` and the orientation by
    /// `q ox q(R)`; scale vector, opacity, color, label, and displacement are
    /// copied unchanged.
    pub fn transformed(&self, pi: &SimilarityTransform) -> GaussianPoint {
        let mut out = self.clone();
        out.mean = pi.apply_to_point(&self.mean);
        out.orientation = self.orientation * pi.rotation.quaternion();
        out
    }
}

/// An ordered set of Gaussian points in one coordinate frame. Point order is
/// stable: index identity defines correspondence after deformation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub points: Vec<GaussianPoint>,
    pub frame_id: String,
}

impl GaussianSet {
    pub fn new(points: Vec<GaussianPoint>, frame_id: impl Into<String>) -> Self {
        GaussianSet {
            points,
            frame_id: frame_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn means(&self) -> Vec<[f64; 3]> {
        self.points
            .iter()
            .map(|p| [p.mean.x, p.mean.y, p.mean.z])
            .collect()
    }

    /// Stacked `[mu; lambda_c * c]` coordinates for the color-augmented
    /// Chamfer metric.
    pub fn color_embeddings(&self, lambda_c: f64) -> Vec<[f64; 6]> {
        self.points
            .iter()
            .map(|p| embed6(&p.mean, &p.color, lambda_c))
            .collect()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.points.iter().map(|p| p.part_label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptySet("gaussian set"));
        }
        for p in &self.points {
            p.validate()?;
        }
        Ok(())
    }
}

pub fn embed6(mean: &Vec3, color: &Vec3, lambda_c: f64) -> [f64; 6] {
    [
        mean.x,
        mean.y,
        mean.z,
        lambda_c * color.x,
        lambda_c * color.y,
        lambda_c * color.z,
    ]
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut acc = 0.0;
    for d in 0..D {
        let diff = a[d] - b[d];
        acc += diff * diff;
    }
    acc
}

const NONE: u32 = u32::MAX;

struct KdNode<const D: usize> {
    point: [f64; D],
    index: u32,
    axis: u8,
    left: u32,
    right: u32,
}

/// Exact nearest-neighbor index over fixed points. Queries return the point
/// minimizing squared Euclidean distance, ties broken by lowest original
/// index; results are bit-identical to a linear scan.
pub struct KdTree<const D: usize> {
    nodes: Vec<KdNode<D>>,
    root: u32,
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: &[[f64; D]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySet("kd-tree points"));
        }
        assert!(points.len() < NONE as usize);
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(points, &mut order, 0, &mut nodes);
        Ok(KdTree { nodes, root })
    }

    fn build_rec(
        points: &[[f64; D]],
        order: &mut [u32],
        depth: usize,
        nodes: &mut Vec<KdNode<D>>,
    ) -> u32 {
        if order.is_empty() {
            return NONE;
        }
        let axis = depth % D;
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&i, &j| {
            let (a, b) = (points[i as usize][axis], points[j as usize][axis]);
            a.partial_cmp(&b).unwrap().then(i.cmp(&j))
        });
        let idx = order[mid];
        let slot = nodes.len() as u32;
        nodes.push(KdNode {
            point: points[idx as usize],
            index: idx,
            axis: axis as u8,
            left: NONE,
            right: NONE,
        });
        let (lo, hi) = order.split_at_mut(mid);
        let left = Self::build_rec(points, lo, depth + 1, nodes);
        let right = Self::build_rec(points, &mut hi[1..], depth + 1, nodes);
        let node = &mut nodes[slot as usize];
        node.left = left;
        node.right = right;
        slot
    }

    /// `(original index, squared distance)` of the nearest stored point.
    pub fn nearest(&self, query: &[f64; D]) -> (usize, f64) {
        let mut best = (u32::MAX, f64::INFINITY);
        self.search(self.root, query, &mut best);
        (best.0 as usize, best.1)
    }

    fn search(&self, slot: u32, query: &[f64; D], best: &mut (u32, f64)) {
        if slot == NONE {
            return;
        }
        let node = &self.nodes[slot as usize];
        let d2 = dist2(query, &node.point);
        if d2 < best.1 || (d2 == best.1 && node.index < best.0) {
            *best = (node.index, d2);
        }
        let diff = query[node.axis as usize] - node.point[node.axis as usize];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, query, best);
        // <= keeps equidistant candidates reachable so the index tie-break
        // stays exact.
        if diff * diff <= best.1 {
            self.search(far, query, best);
        }
    }
}

/// Index of the point in `target` whose mean minimizes Euclidean distance to
/// `query`, plus that distance. Exact; ties break to the lowest index.
pub fn nearest_neighbor(query: &Vec3, target: &GaussianSet) -> Result<(usize, f64)> {
    if target.is_empty() {
        return Err(Error::EmptySet("nearest_neighbor target"));
    }
    let pts = target.means();
    let tree = KdTree::build(&pts)?;
    let (idx, d2) = tree.nearest(&[query.x, query.y, query.z]);
    Ok((idx, d2.sqrt()))
}

/// Nearest-neighbor assignments of both Chamfer directions.
pub struct ChamferAssignments {
    /// For each point of `a`: (index into `b`, squared distance).
    pub a_to_b: Vec<(usize, f64)>,
    /// For each point of `b`: (index into `a`, squared distance).
    pub b_to_a: Vec<(usize, f64)>,
}

impl ChamferAssignments {
    /// `(1/|a|) sum d2 + (1/|b|) sum d2`.
    pub fn value(&self) -> f64 {
        let fwd: f64 = self.a_to_b.iter().map(|&(_, d2)| d2).sum();
        let bwd: f64 = self.b_to_a.iter().map(|&(_, d2)| d2).sum();
        fwd / self.a_to_b.len() as f64 + bwd / self.b_to_a.len() as f64
    }
}

/// Both NN directions between two point arrays, reusing prebuilt trees.
pub fn chamfer_assignments_with<const D: usize>(
    a: &[[f64; D]],
    b: &[[f64; D]],
    tree_a: &KdTree<D>,
    tree_b: &KdTree<D>,
) -> ChamferAssignments {
    ChamferAssignments {
        a_to_b: a.iter().map(|p| tree_b.nearest(p)).collect(),
        b_to_a: b.iter().map(|p| tree_a.nearest(p)).collect(),
    }
}

pub fn chamfer_assignments<const D: usize>(
    a: &[[f64; D]],
    b: &[[f64; D]],
) -> Result<ChamferAssignments> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("chamfer operand"));
    }
    let tree_a = KdTree::build(a)?;
    let tree_b = KdTree::build(b)?;
    Ok(chamfer_assignments_with(a, b, &tree_a, &tree_b))
}

/// Symmetric mean of squared nearest-neighbor distances between the means:
/// `(1/|a|) sum_i min_j |mu_a_i - mu_b_j|^2 + (1/|b|) sum_j min_i |...|^2`.
pub fn chamfer(a: &GaussianSet, b: &GaussianSet) -> Result<f64> {
    Ok(chamfer_assignments(&a.means(), &b.means())?.value())
}

/// Chamfer over the 6-vectors `[mu; lambda_c * c]`; reduces to [`chamfer`]
/// when `lambda_c = 0`.
pub fn color_chamfer(a: &GaussianSet, b: &GaussianSet, lambda_c: f64) -> Result<f64> {
    assert!(lambda_c >= 0.0, "lambda_c must be non-negative");
    Ok(chamfer_assignments(&a.color_embeddings(lambda_c), &b.color_embeddings(lambda_c))?.value())
}

/// `L_rigid = sum_i |delta mu_i|_1`.
pub fn rigidity_loss(set: &GaussianSet) -> f64 {
    set.points
        .iter()
        .map(|p| p.displacement.x.abs() + p.displacement.y.abs() + p.displacement.z.abs())
        .sum()
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::Rng;

    pub fn random_point(rng: &mut impl Rng) -> GaussianPoint {
        let axis = nalgebra::Unit::new_normalize(Vec3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5 + 1e-3,
        ));
        GaussianPoint::new(
            Vec3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            ),
            Quat::from_axis_angle(&axis, rng.gen::<f64>() * 3.0),
            Vec3::new(
                0.01 + rng.gen::<f64>() * 0.02,
                0.01 + rng.gen::<f64>() * 0.02,
                0.01 + rng.gen::<f64>() * 0.02,
            ),
            rng.gen::<f64>(),
            Vec3::new(rng.gen(), rng.gen(), rng.gen()),
        )
    }

    pub fn random_set(rng: &mut impl Rng, n: usize, frame: &str) -> GaussianSet {
        GaussianSet::new((0..n).map(|_| random_point(rng)).collect(), frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rotation;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_nn<const D: usize>(q: &[f64; D], pts: &[[f64; D]]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in pts.iter().enumerate() {
            let d2 = dist2(q, p);
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    fn set_from_means(means: &[[f64; 3]]) -> GaussianSet {
        GaussianSet::new(
            means
                .iter()
                .map(|m| {
                    GaussianPoint::new(
                        Vec3::new(m[0], m[1], m[2]),
                        Quat::identity(),
                        Vec3::new(0.01, 0.01, 0.01),
                        1.0,
                        Vec3::new(0.5, 0.5, 0.5),
                    )
                })
                .collect(),
            "test",
        )
    }

    #[test]
    fn nearest_neighbor_exact_hit_and_tie_break() {
        let set = set_from_means(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);
        let (idx, d) = nearest_neighbor(&Vec3::new(0.0, 1.0, 0.0), &set).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(d, 0.0);

        // Query equidistant from points 0 and 1: lower index wins.
        let (idx, _) = nearest_neighbor(&Vec3::new(0.5, 0.5, 0.0), &set).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn nearest_neighbor_empty_target() {
        let empty = GaussianSet::new(vec![], "empty");
        assert!(nearest_neighbor(&Vec3::zeros(), &empty).is_err());
    }

    #[test]
    fn kdtree_matches_linear_scan_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for case in 0..20 {
            let n = 50 + (case * 97) % 951;
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
                .collect();
            let tree = KdTree::build(&pts).unwrap();
            for _ in 0..50 {
                let q = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
                let (ti, td) = tree.nearest(&q);
                let (bi, bd) = brute_nn(&q, &pts);
                assert_eq!(ti, bi);
                assert_eq!(td.to_bits(), bd.to_bits());
            }
        }
    }

    #[test]
    fn kdtree_duplicate_points_tie_break() {
        // Duplicates: the lowest index must win regardless of tree layout.
        let pts = vec![[0.5, 0.5, 0.5]; 17];
        let tree = KdTree::build(&pts).unwrap();
        let (idx, d2) = tree.nearest(&[0.5, 0.5, 0.5]);
        assert_eq!(idx, 0);
        assert_eq!(d2, 0.0);
    }

    #[test]
    fn chamfer_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = test_util::random_set(&mut rng, 40, "a");
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_unit_offset_pair() {
        let a = set_from_means(&[[0.0, 0.0, 0.0]]);
        let b = set_from_means(&[[1.0, 0.0, 0.0]]);
        assert_relative_eq!(chamfer(&a, &b).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn chamfer_matches_brute_force_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = test_util::random_set(&mut rng, 50, "a");
        let b = test_util::random_set(&mut rng, 70, "b");
        let got = chamfer(&a, &b).unwrap();

        let pa = a.means();
        let pb = b.means();
        let fwd: f64 = pa.iter().map(|p| brute_nn(p, &pb).1).sum::<f64>() / pa.len() as f64;
        let bwd: f64 = pb.iter().map(|p| brute_nn(p, &pa).1).sum::<f64>() / pb.len() as f64;
        assert_relative_eq!(got, fwd + bwd, max_relative = 1e-12);

        assert_eq!(got, chamfer(&b, &a).unwrap());
    }

    #[test]
    fn chamfer_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = test_util::random_set(&mut rng, 60, "a");
        let b = test_util::random_set(&mut rng, 45, "b");
        let base = chamfer(&a, &b).unwrap();
        let rigid = SimilarityTransform::rigid(
            Rotation::from_euler_xyz(0.4, -0.9, 1.3),
            Vec3::new(0.2, -0.7, 0.5),
        );
        let ta = GaussianSet::new(
            a.points.iter().map(|p| p.transformed(&rigid)).collect(),
            "a",
        );
        let tb = GaussianSet::new(
            b.points.iter().map(|p| p.transformed(&rigid)).collect(),
            "b",
        );
        assert_relative_eq!(chamfer(&ta, &tb).unwrap(), base, epsilon = 1e-7);
    }

    #[test]
    fn color_chamfer_zero_weight_equals_chamfer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = test_util::random_set(&mut rng, 30, "a");
        let b = test_util::random_set(&mut rng, 25, "b");
        assert_eq!(
            color_chamfer(&a, &b, 0.0).unwrap(),
            chamfer(&a, &b).unwrap()
        );
    }

    #[test]
    fn color_chamfer_color_difference_contribution() {
        // Identical geometry, one color differs by delta on one pair.
        let a_means = [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let mut a = set_from_means(&a_means);
        a.points[1].color = Vec3::new(0.5, 0.5, 0.5);
        let dc = Vec3::new(0.1, -0.2, 0.05);
        let mut b = a.clone();
        b.points[1].color = a.points[1].color + dc;
        let lc = 1.0;
        let expected = 2.0 * lc * lc * dc.norm_squared() / 2.0;
        assert_relative_eq!(
            color_chamfer(&a, &b, lc).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn color_chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = test_util::random_set(&mut rng, 40, "a");
        let b = test_util::random_set(&mut rng, 55, "b");
        let lc = 0.25;
        let got = color_chamfer(&a, &b, lc).unwrap();
        let ea = a.color_embeddings(lc);
        let eb = b.color_embeddings(lc);
        let fwd: f64 = ea.iter().map(|p| brute_nn(p, &eb).1).sum::<f64>() / ea.len() as f64;
        let bwd: f64 = eb.iter().map(|p| brute_nn(p, &ea).1).sum::<f64>() / eb.len() as f64;
        assert_relative_eq!(got, fwd + bwd, max_relative = 1e-12);
    }

    #[test]
    fn rigidity_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut set = test_util::random_set(&mut rng, 10, "a");
        for p in &mut set.points {
            p.displacement = Vec3::zeros();
        }
        assert_eq!(rigidity_loss(&set), 0.0);

        set.points[3].displacement = Vec3::new(0.1, -0.2, 0.0);
        assert_relative_eq!(rigidity_loss(&set), 0.3, epsilon = 1e-15);

        for p in &mut set.points {
            p.displacement = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
        }
        let manual: f64 = set
            .points
            .iter()
            .map(|p| p.displacement.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert_relative_eq!(rigidity_loss(&set), manual, epsilon = 1e-12);
    }

    #[test]
    fn transformed_copies_attributes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = test_util::random_point(&mut rng);
        let pi = SimilarityTransform::rigid(
            Rotation::about_z(std::f64::consts::FRAC_PI_2),
            Vec3::new(0.1, 0.2, 0.3),
        );
        let t = g.transformed(&pi);
        assert_relative_eq!(t.mean, pi.apply_to_point(&g.mean), epsilon = 1e-12);
        assert_eq!(t.color, g.color);
        assert_eq!(t.opacity, g.opacity);
        assert_eq!(t.scale_vec, g.scale_vec);
        assert_eq!(t.part_label, g.part_label);

        // Identity orientation picks up exactly q(R).
        let mut g2 = g.clone();
        g2.orientation = Quat::identity();
        let t2 = g2.transformed(&pi);
        let expect = pi.rotation.quaternion();
        assert_relative_eq!(t2.orientation.as_ref().w, expect.as_ref().w, epsilon = 1e-12);
        assert_relative_eq!(t2.orientation.as_ref().k, expect.as_ref().k, epsilon = 1e-12);
    }

    #[test]
    fn point_validation_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let good = test_util::random_point(&mut rng);
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.opacity = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.scale_vec.y = 0.0;
        assert!(bad.validate().is_err());
    }
}
