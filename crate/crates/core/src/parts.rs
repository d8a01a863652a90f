//! Initial part discovery: correspondences from the trained deformation,
//! robust per-part similarity fits under heavy outliers, and the recursive
//! inlier/outlier part tree.
//!
//! The robust fit is minimal-sample hypothesize-and-verify (3-point Umeyama
//! hypotheses, Umeyama refit on the consensus); its contract is the largest
//! rigid consensus under the residual bound.

use nalgebra::Matrix3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{Rotation, SimilarityTransform, Vec3};
use crate::splat::{GaussianSet, KdTree};

/// One source-to-target correspondence; the source mean comes from the
/// pre-deformation set so fitted transforms map source frame -> target
/// frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrespondencePair {
    pub source_index: usize,
    pub source: Vec3,
    pub target: Vec3,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<CorrespondencePair>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The subset with the given pair indices.
    pub fn subset(&self, indices: &[usize]) -> CorrespondenceSet {
        CorrespondenceSet {
            pairs: indices.iter().map(|&i| self.pairs[i]).collect(),
        }
    }
}

/// For each deformed source point, pairs the original source mean with the
/// nearest target mean, keeping pairs whose NN distance is at most
/// `max_dist`.
pub fn extract_correspondences(
    source: &GaussianSet,
    deformed: &GaussianSet,
    target: &GaussianSet,
    max_dist: f64,
) -> Result<CorrespondenceSet> {
    if source.is_empty() || deformed.is_empty() || target.is_empty() {
        return Err(Error::EmptySet("correspondence extraction"));
    }
    if source.len() != deformed.len() {
        return Err(Error::DimensionMismatch(format!(
            "source has {} points, deformed has {}",
            source.len(),
            deformed.len()
        )));
    }
    assert!(max_dist > 0.0, "max_dist must be positive");
    let target_means = target.means();
    let tree = KdTree::build(&target_means)?;
    let max_d2 = max_dist * max_dist;
    let mut pairs = Vec::new();
    for (i, d) in deformed.points.iter().enumerate() {
        let (j, d2) = tree.nearest(&[d.mean.x, d.mean.y, d.mean.z]);
        if d2 <= max_d2 {
            pairs.push(CorrespondencePair {
                source_index: i,
                source: source.points[i].mean,
                target: target.points[j].mean,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    Ok(CorrespondenceSet { pairs })
}

/// Closed-form least-squares similarity (or rigid, with `with_scale` off)
/// transform minimizing `sum |s R x + t - y|^2`, with the standard sign
/// correction enforcing `det(R) = +1`.
pub fn umeyama(corr: &CorrespondenceSet, with_scale: bool) -> Result<SimilarityTransform> {
    let n = corr.len();
    if n < 3 {
        return Err(Error::Degenerate(format!(
            "umeyama needs at least 3 pairs, got {n}"
        )));
    }
    let nf = n as f64;
    let mut mu_x = Vec3::zeros();
    let mut mu_y = Vec3::zeros();
    for p in &corr.pairs {
        mu_x += p.source;
        mu_y += p.target;
    }
    mu_x /= nf;
    mu_y /= nf;

    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for p in &corr.pairs {
        let dx = p.source - mu_x;
        let dy = p.target - mu_y;
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= nf;
    var_x /= nf;

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let sv = svd.singular_values;
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::Degenerate(
            "correspondences are collinear (rank-deficient covariance)".into(),
        ));
    }

    let mut s_mat = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s_mat[(2, 2)] = -1.0;
    }
    let r = u * s_mat * v_t;
    let scale = if with_scale {
        let trace_ds = sv[0] * s_mat[(0, 0)] + sv[1] * s_mat[(1, 1)] + sv[2] * s_mat[(2, 2)];
        let s = trace_ds / var_x;
        if s <= 0.0 {
            return Err(Error::Degenerate(format!("non-positive fitted scale {s}")));
        }
        s
    } else {
        1.0
    };
    let rotation = Rotation::from_matrix_unchecked(r);
    let translation = mu_y - scale * rotation.apply(&mu_x);
    Ok(SimilarityTransform::new(rotation, translation, scale))
}

fn residual(pi: &SimilarityTransform, p: &CorrespondencePair) -> f64 {
    (pi.apply_to_point(&p.source) - p.target).norm()
}

fn inliers_of(pi: &SimilarityTransform, corr: &CorrespondenceSet, eps: f64) -> Vec<usize> {
    corr.pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| residual(pi, p) <= eps)
        .map(|(i, _)| i)
        .collect()
}

fn mean_residual(pi: &SimilarityTransform, corr: &CorrespondenceSet, indices: &[usize]) -> f64 {
    indices
        .iter()
        .map(|&i| residual(pi, &corr.pairs[i]))
        .sum::<f64>()
        / indices.len().max(1) as f64
}

/// Hypothesize-and-verify: 3-point Umeyama hypotheses over `trials` seeded
/// draws, consensus counted at `inlier_eps`, winner refit by Umeyama on its
/// inliers (iterated; a refit that would shrink the consensus is rolled
/// back). Returns the transform of the largest rigid consensus and the pair
/// indices of that consensus (count ties broken by smaller mean residual,
/// then by trial order).
pub fn robust_fit(
    corr: &CorrespondenceSet,
    inlier_eps: f64,
    trials: usize,
    seed: u64,
) -> Result<(SimilarityTransform, Vec<usize>)> {
    let n = corr.len();
    if n < 3 {
        return Err(Error::NoRigidConsensus { found: n, needed: 3 });
    }
    assert!(trials >= 1, "trials must be >= 1");
    assert!(inlier_eps > 0.0, "inlier_eps must be positive");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(SimilarityTransform, Vec<usize>, f64)> = None;
    for _ in 0..trials {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n);
        while j == i {
            j = rng.gen_range(0..n);
        }
        let mut k = rng.gen_range(0..n);
        while k == i || k == j {
            k = rng.gen_range(0..n);
        }
        let sample = corr.subset(&[i, j, k]);
        let Ok(hypothesis) = umeyama(&sample, true) else {
            continue;
        };
        let inl = inliers_of(&hypothesis, corr, inlier_eps);
        if inl.len() < 3 {
            continue;
        }
        let better = match &best {
            None => true,
            Some((_, best_inl, best_resid)) => {
                inl.len() > best_inl.len()
                    || (inl.len() == best_inl.len()
                        && mean_residual(&hypothesis, corr, &inl) < *best_resid)
            }
        };
        if better {
            let resid = mean_residual(&hypothesis, corr, &inl);
            best = Some((hypothesis, inl, resid));
        }
    }
    let Some((mut pi, mut inliers, _)) = best else {
        return Err(Error::NoRigidConsensus { found: 0, needed: 3 });
    };

    // Umeyama refit on the consensus; never let a refit shrink it.
    for _ in 0..10 {
        let Ok(refit) = umeyama(&corr.subset(&inliers), true) else {
            break;
        };
        let new_inliers = inliers_of(&refit, corr, inlier_eps);
        if new_inliers.len() < inliers.len() {
            break;
        }
        let unchanged = new_inliers == inliers;
        pi = refit;
        inliers = new_inliers;
        if unchanged {
            break;
        }
    }
    if inliers.len() < 3 {
        return Err(Error::NoRigidConsensus {
            found: inliers.len(),
            needed: 3,
        });
    }
    Ok((pi, inliers))
}

/// Settings for recursive part discovery.
#[derive(Debug, Clone, PartialEq)]
pub struct PartTreeConfig {
    pub inlier_eps: f64,
    pub trials: usize,
    pub min_part_size: usize,
    pub max_parts: usize,
    pub seed: u64,
}

impl Default for PartTreeConfig {
    fn default() -> Self {
        PartTreeConfig {
            // 0.01 of the unit-box diagonal.
            inlier_eps: 0.01 * 3f64.sqrt(),
            trials: 2000,
            min_part_size: 30,
            max_parts: 4,
            seed: 0,
        }
    }
}

/// One node of the part decomposition: the dominant rigid component of its
/// correspondence subset plus the recursion over the outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct PartNode {
    pub part_id: u32,
    /// Source point indices belonging to this part.
    pub indices: Vec<usize>,
    /// Source frame -> target frame motion of this part.
    pub transform: SimilarityTransform,
    pub children: Vec<PartNode>,
}

/// Recursive inlier/outlier decomposition; the root (part 0) is the
/// dominant rigid component.
#[derive(Debug, Clone, PartialEq)]
pub struct PartTree {
    pub root: PartNode,
    /// Number of source points the tree labels.
    pub point_count: usize,
}

impl PartTree {
    /// Per-source-point part labels; the node index sets partition the
    /// source indices.
    pub fn labels(&self) -> Vec<u32> {
        let mut labels = vec![u32::MAX; self.point_count];
        for node in self.nodes() {
            for &i in &node.indices {
                debug_assert_eq!(labels[i], u32::MAX, "index {i} doubly labeled");
                labels[i] = node.part_id;
            }
        }
        debug_assert!(labels.iter().all(|&l| l != u32::MAX));
        labels
    }

    /// All nodes, root first.
    pub fn nodes(&self) -> Vec<&PartNode> {
        let mut out = Vec::new();
        let mut stack = vec![&self.root];
        while let Some(n) = stack.pop() {
            out.push(n);
            for c in &n.children {
                stack.push(c);
            }
        }
        out.sort_by_key(|n| n.part_id);
        out
    }

    /// `(node, parent part id)` pairs, root first.
    pub fn flatten(&self) -> Vec<(&PartNode, Option<u32>)> {
        let mut out = Vec::new();
        fn walk<'a>(
            node: &'a PartNode,
            parent: Option<u32>,
            out: &mut Vec<(&'a PartNode, Option<u32>)>,
        ) {
            out.push((node, parent));
            for c in &node.children {
                walk(c, Some(node.part_id), out);
            }
        }
        walk(&self.root, None, &mut out);
        out
    }

    pub fn part_count(&self) -> usize {
        self.nodes().len()
    }

    /// The transform of every part keyed by part id.
    pub fn transforms(&self) -> std::collections::BTreeMap<u32, SimilarityTransform> {
        self.nodes()
            .iter()
            .map(|n| (n.part_id, n.transform))
            .collect()
    }
}

/// Recursive robust decomposition of the correspondences: the largest rigid
/// consensus forms the root, the outliers are refit recursively until a
/// node's correspondence count drops below `min_part_size` or `max_parts`
/// is reached. Source points without a correspondence (and leftover
/// outliers) are attached to the part with the nearest source-side
/// centroid, so every source index ends up labeled.
pub fn build_part_tree(
    source: &GaussianSet,
    corr: &CorrespondenceSet,
    cfg: &PartTreeConfig,
) -> Result<PartTree> {
    if corr.is_empty() {
        return Err(Error::NoCorrespondences);
    }

    // Peel rigid components off the outlier remainder, one per part.
    let mut part_sets: Vec<(SimilarityTransform, Vec<usize>)> = Vec::new();
    let mut active: Vec<usize> = (0..corr.len()).collect();
    for part in 0..cfg.max_parts {
        if active.len() < cfg.min_part_size.max(3) {
            break;
        }
        let sub = corr.subset(&active);
        let fit = robust_fit(&sub, cfg.inlier_eps, cfg.trials, cfg.seed.wrapping_add(part as u64));
        let (pi, inl) = match fit {
            Ok(ok) => ok,
            Err(e) => {
                if part == 0 {
                    return Err(e.in_stage("part tree root fit"));
                }
                break;
            }
        };
        if inl.len() < cfg.min_part_size.max(3) && part > 0 {
            break;
        }
        let inl_global: Vec<usize> = inl.iter().map(|&i| active[i]).collect();
        let inl_set: std::collections::BTreeSet<usize> = inl_global.iter().copied().collect();
        active.retain(|i| !inl_set.contains(i));
        part_sets.push((pi, inl_global));
    }

    // Source indices per part.
    let mut part_indices: Vec<Vec<usize>> = part_sets
        .iter()
        .map(|(_, pairs)| {
            pairs
                .iter()
                .map(|&pi_idx| corr.pairs[pi_idx].source_index)
                .collect::<Vec<usize>>()
        })
        .collect();

    // Attach strays (points without correspondences and leftover outliers)
    // to the part with the nearest source centroid.
    let centroids: Vec<Vec3> = part_indices
        .iter()
        .map(|idx| {
            let mut c = Vec3::zeros();
            for &i in idx {
                c += source.points[i].mean;
            }
            c / idx.len().max(1) as f64
        })
        .collect();
    let mut assigned = vec![false; source.len()];
    for idx in &part_indices {
        for &i in idx {
            assigned[i] = true;
        }
    }
    for i in 0..source.len() {
        if assigned[i] {
            continue;
        }
        let p = source.points[i].mean;
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, c) in centroids.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        part_indices[best].push(i);
    }
    for idx in &mut part_indices {
        idx.sort_unstable();
    }

    // Chain: root holds the dominant component, each further part nests
    // under the previous one's outlier branch.
    let mut node: Option<PartNode> = None;
    for (part_id, ((pi, _), indices)) in part_sets
        .iter()
        .zip(part_indices)
        .enumerate()
        .rev()
    {
        let children = node.take().map(|n| vec![n]).unwrap_or_default();
        node = Some(PartNode {
            part_id: part_id as u32,
            indices,
            transform: *pi,
            children,
        });
    }

    Ok(PartTree {
        root: node.expect("at least the root part exists"),
        point_count: source.len(),
    })
}
