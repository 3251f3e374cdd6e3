//! Point-cloud container, spatial indices, voxel downsampling and the
//! ICP/NDT registration algorithms with a shared fitness definition.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{hat, Pose, Rotation};

#[derive(Debug, Error)]
pub enum PointCloudError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad scan file: {0}")]
    Format(String),
    #[error("registration requires non-empty clouds")]
    EmptyCloud,
    #[error("degenerate NDT target: no voxel has enough points for a covariance")]
    DegenerateTarget,
}

/// Unordered set of 3D points with optional per-point intensity and
/// per-point relative timestamps (used for scan undistortion).
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub intensity: Option<Vec<f32>>,
    pub times: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        PointCloud {
            points,
            intensity: None,
            times: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            intensity: self.intensity.clone(),
            times: self.times.clone(),
        }
    }

    pub fn extend_from(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
        // intensity/times are not meaningful on merged map clouds
        self.intensity = None;
        self.times = None;
    }

    /// Binary scan format: magic "LLPC", u32 LE count, count * 3 f32 LE.
    pub fn write_llpc<W: Write>(&self, mut w: W) -> Result<(), PointCloudError> {
        w.write_all(b"LLPC")?;
        w.write_all(&(self.points.len() as u32).to_le_bytes())?;
        for p in &self.points {
            for c in [p.x, p.y, p.z] {
                w.write_all(&(c as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_llpc<R: Read>(mut r: R) -> Result<PointCloud, PointCloudError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"LLPC" {
            return Err(PointCloudError::Format("missing LLPC magic".into()));
        }
        let mut nb = [0u8; 4];
        r.read_exact(&mut nb)?;
        let n = u32::from_le_bytes(nb) as usize;
        let mut points = Vec::with_capacity(n);
        let mut fb = [0u8; 4];
        for _ in 0..n {
            let mut c = [0.0f64; 3];
            for v in c.iter_mut() {
                r.read_exact(&mut fb)?;
                *v = f32::from_le_bytes(fb) as f64;
            }
            points.push(Vector3::new(c[0], c[1], c[2]));
        }
        Ok(PointCloud::new(points))
    }

    pub fn save(&self, path: &Path) -> Result<(), PointCloudError> {
        let f = std::fs::File::create(path)?;
        self.write_llpc(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<PointCloud, PointCloudError> {
        if path.extension().map(|e| e == "csv").unwrap_or(false) {
            return Self::read_csv(std::fs::File::open(path)?);
        }
        let f = std::fs::File::open(path)?;
        Self::read_llpc(std::io::BufReader::new(f))
    }

    /// CSV fallback: one "x,y,z" line per point.
    pub fn read_csv<R: Read>(r: R) -> Result<PointCloud, PointCloudError> {
        let mut points = Vec::new();
        for (i, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| PointCloudError::Format(format!("line {}: {e}", i + 1)))?;
            if vals.len() < 3 {
                return Err(PointCloudError::Format(format!("line {}: need x,y,z", i + 1)));
            }
            points.push(Vector3::new(vals[0], vals[1], vals[2]));
        }
        Ok(PointCloud::new(points))
    }
}

/// Voxel-grid downsampling: one centroid per occupied voxel.
pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> PointCloud {
    assert!(leaf > 0.0, "leaf size must be positive");
    let mut cells: HashMap<(i64, i64, i64), (Vector3<f64>, usize)> = HashMap::new();
    let mut order: Vec<(i64, i64, i64)> = Vec::new();
    for p in &cloud.points {
        let key = (
            (p.x / leaf).floor() as i64,
            (p.y / leaf).floor() as i64,
            (p.z / leaf).floor() as i64,
        );
        match cells.get_mut(&key) {
            Some((sum, n)) => {
                *sum += p;
                *n += 1;
            }
            None => {
                cells.insert(key, (*p, 1));
                order.push(key);
            }
        }
    }
    // iterate in first-seen order so output is deterministic
    let points = order
        .into_iter()
        .map(|k| {
            let (sum, n) = cells[&k];
            sum / n as f64
        })
        .collect();
    PointCloud::new(points)
}

/// Static balanced kd-tree over 3D points with payload ids.
#[derive(Debug, Clone)]
pub struct KdTree3 {
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

#[derive(Debug, Clone)]
struct KdNode {
    point: Vector3<f64>,
    id: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree3 {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        Self::build_with_ids(points.iter().cloned().enumerate().map(|(i, p)| (i, p)))
    }

    pub fn build_with_ids<I: IntoIterator<Item = (usize, Vector3<f64>)>>(items: I) -> Self {
        let mut entries: Vec<(usize, Vector3<f64>)> = items.into_iter().collect();
        let mut tree = KdTree3 {
            nodes: Vec::with_capacity(entries.len()),
            root: None,
        };
        let n = entries.len();
        if n > 0 {
            tree.root = Some(tree.build_rec(&mut entries, 0, n, 0));
        }
        tree
    }

    fn build_rec(
        &mut self,
        entries: &mut [(usize, Vector3<f64>)],
        lo: usize,
        hi: usize,
        depth: usize,
    ) -> usize {
        let axis = depth % 3;
        let slice = &mut entries[lo..hi];
        let mid = slice.len() / 2;
        // median split via selection: O(n) per level instead of a full sort
        slice.select_nth_unstable_by(mid, |a, b| {
            a.1[axis].partial_cmp(&b.1[axis]).unwrap().then(a.0.cmp(&b.0))
        });
        let (id, point) = slice[mid];
        let node_idx = self.nodes.len();
        self.nodes.push(KdNode {
            point,
            id,
            axis,
            left: None,
            right: None,
        });
        if mid > 0 {
            let l = self.build_rec(entries, lo, lo + mid, depth + 1);
            self.nodes[node_idx].left = Some(l);
        }
        if lo + mid + 1 < hi {
            let r = self.build_rec(entries, lo + mid + 1, hi, depth + 1);
            self.nodes[node_idx].right = Some(r);
        }
        node_idx
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// k nearest neighbors, ascending by distance. Ties broken by id so
    /// results are deterministic.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        assert!(k >= 1, "k must be at least 1");
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if let Some(root) = self.root {
            self.knn_rec(root, query, k, &mut best);
        }
        best.into_iter().map(|(d2, id)| (id, d2.sqrt())).collect()
    }

    fn knn_rec(&self, idx: usize, query: &Vector3<f64>, k: usize, best: &mut Vec<(f64, usize)>) {
        let node = &self.nodes[idx];
        let d2 = (node.point - query).norm_squared();
        let entry = (d2, node.id);
        let pos = best.partition_point(|e| *e < entry);
        best.insert(pos, entry);
        if best.len() > k {
            best.pop();
        }
        let diff = query[node.axis] - node.point[node.axis];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.knn_rec(n, query, k, best);
        }
        if let Some(f) = far {
            if best.len() < k || diff * diff < best.last().unwrap().0 {
                self.knn_rec(f, query, k, best);
            }
        }
    }

    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        self.knn(query, 1).into_iter().next()
    }

    /// All neighbors with distance <= radius, ascending.
    pub fn radius(&self, query: &Vector3<f64>, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if let Some(root) = self.root {
            self.radius_rec(root, query, radius * radius, &mut out);
        }
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        out.into_iter().map(|(id, d2)| (id, d2.sqrt())).collect()
    }

    fn radius_rec(&self, idx: usize, query: &Vector3<f64>, r2: f64, out: &mut Vec<(usize, f64)>) {
        let node = &self.nodes[idx];
        let d2 = (node.point - query).norm_squared();
        if d2 <= r2 {
            out.push((node.id, d2));
        }
        let diff = query[node.axis] - node.point[node.axis];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.radius_rec(n, query, r2, out);
        }
        if let Some(f) = far {
            if diff * diff <= r2 {
                self.radius_rec(f, query, r2, out);
            }
        }
    }
}

/// Dynamic point index: a rebuilt kd-tree over committed points plus a
/// linear-scanned staging buffer, fully rebuilt every `rebuild_every`
/// insertions. Query semantics are pinned to the static tree.
#[derive(Debug, Clone)]
pub struct IncrementalMapIndex {
    points: Vec<Vector3<f64>>,
    tree: KdTree3,
    staged_from: usize,
    inserts_since_rebuild: usize,
    rebuild_every: usize,
    /// When set, at most one point is kept per voxel of this leaf size, so
    /// repeated observations of the same surface cannot grow the index.
    dedup_leaf: Option<f64>,
    occupied: std::collections::HashSet<(i64, i64, i64)>,
}

impl Default for IncrementalMapIndex {
    fn default() -> Self {
        Self::new()
    }
}

impl IncrementalMapIndex {
    pub fn new() -> Self {
        IncrementalMapIndex {
            points: Vec::new(),
            tree: KdTree3::build(&[]),
            staged_from: 0,
            inserts_since_rebuild: 0,
            // Rebuild on every insert: inserts are one keyframe cloud each,
            // and a linear scan of a large staging buffer inside the ICP
            // inner loop costs far more than an O(n log n) rebuild.
            rebuild_every: 1,
            dedup_leaf: None,
            occupied: std::collections::HashSet::new(),
        }
    }

    /// Index that keeps at most one point per `leaf`-sized voxel.
    pub fn with_dedup(leaf: f64) -> Self {
        let mut index = Self::new();
        index.dedup_leaf = Some(leaf);
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: usize) -> &Vector3<f64> {
        &self.points[id]
    }

    pub fn insert_cloud(&mut self, cloud: &PointCloud) {
        match self.dedup_leaf {
            Some(leaf) => {
                for p in &cloud.points {
                    let key = (
                        (p.x / leaf).floor() as i64,
                        (p.y / leaf).floor() as i64,
                        (p.z / leaf).floor() as i64,
                    );
                    if self.occupied.insert(key) {
                        self.points.push(*p);
                    }
                }
            }
            None => self.points.extend_from_slice(&cloud.points),
        }
        self.inserts_since_rebuild += 1;
        if self.inserts_since_rebuild >= self.rebuild_every {
            self.rebuild();
        }
    }

    fn rebuild(&mut self) {
        self.tree = KdTree3::build(&self.points);
        self.staged_from = self.points.len();
        self.inserts_since_rebuild = 0;
    }

    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = if self.tree.is_empty() {
            Vec::new()
        } else {
            self.tree.knn(query, k)
        };
        for (off, p) in self.points[self.staged_from..].iter().enumerate() {
            best.push((self.staged_from + off, (p - query).norm()));
        }
        best.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        best.truncate(k);
        best
    }
}

/// Registration parameters shared by ICP and NDT.
#[derive(Debug, Clone)]
pub struct RegistrationParams {
    pub max_correspondence: f64,
    pub max_iterations: usize,
    pub update_tolerance: f64,
    pub ndt_voxel: f64,
    pub ndt_eig_floor: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        RegistrationParams {
            max_correspondence: 1.0,
            max_iterations: 50,
            update_tolerance: 1e-6,
            ndt_voxel: 1.0,
            ndt_eig_floor: 1e-3,
        }
    }
}

/// Output of a registration run.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: Pose,
    /// Mean squared inlier correspondence distance, m^2. Lower is better.
    pub fitness: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Fitness of `transform` applied to `source` against `target`: mean
/// squared nearest-neighbor distance over correspondences within
/// `max_correspondence`. Returns `f64::INFINITY` when nothing matches.
pub fn fitness_score(
    source: &PointCloud,
    target_tree: &KdTree3,
    transform: &Pose,
    max_correspondence: f64,
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in &source.points {
        let q = transform.transform_point(p);
        if let Some((_, d)) = target_tree.nearest(&q) {
            if d <= max_correspondence {
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// Point-to-point ICP with closed-form SVD alignment per iteration.
pub fn icp(
    source: &PointCloud,
    target: &PointCloud,
    initial: &Pose,
    params: &RegistrationParams,
) -> Result<RegistrationResult, PointCloudError> {
    if source.is_empty() || target.is_empty() {
        return Err(PointCloudError::EmptyCloud);
    }
    let tree = KdTree3::build(&target.points);
    let mut current = *initial;
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..params.max_iterations {
        iterations = it + 1;
        let mut src_pts = Vec::new();
        let mut tgt_pts = Vec::new();
        for p in &source.points {
            let q = current.transform_point(p);
            if let Some((id, d)) = tree.nearest(&q) {
                if d <= params.max_correspondence {
                    src_pts.push(q);
                    tgt_pts.push(target.points[id]);
                }
            }
        }
        if src_pts.len() < 3 {
            return Ok(RegistrationResult {
                transform: *initial,
                fitness: fitness_score(source, &tree, initial, params.max_correspondence),
                converged: false,
                iterations,
            });
        }
        let step = best_rigid_transform(&src_pts, &tgt_pts);
        current = step.compose(&current);
        let (dw, dt) = step_magnitude(&step);
        if dw + dt < params.update_tolerance {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult {
        fitness: fitness_score(source, &tree, &current, params.max_correspondence),
        transform: current,
        converged,
        iterations,
    })
}

fn step_magnitude(step: &Pose) -> (f64, f64) {
    (step.rotation.angle(), step.translation.norm())
}

/// Closed-form least-squares rigid transform mapping `src` onto `tgt`
/// (Umeyama / Kabsch via SVD of the cross-covariance).
pub fn best_rigid_transform(src: &[Vector3<f64>], tgt: &[Vector3<f64>]) -> Pose {
    let n = src.len() as f64;
    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mu_t: Vector3<f64> = tgt.iter().sum::<Vector3<f64>>() / n;
    let mut w = Matrix3::zeros();
    for (s, t) in src.iter().zip(tgt.iter()) {
        w += (t - mu_t) * (s - mu_s).transpose();
    }
    let svd = w.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let rot = Rotation::from_matrix(&r);
    let t = mu_t - rot.rotate(&mu_s);
    Pose::new(rot, t)
}

struct NdtVoxel {
    mean: Vector3<f64>,
    info: Matrix3<f64>,
}

fn build_ndt_voxels(
    target: &PointCloud,
    voxel: f64,
    eig_floor: f64,
) -> Result<HashMap<(i64, i64, i64), NdtVoxel>, PointCloudError> {
    let mut buckets: HashMap<(i64, i64, i64), Vec<Vector3<f64>>> = HashMap::new();
    for p in &target.points {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        buckets.entry(key).or_default().push(*p);
    }
    let mut voxels = HashMap::new();
    for (key, pts) in buckets {
        if pts.len() < 6 {
            continue;
        }
        let n = pts.len() as f64;
        let mean: Vector3<f64> = pts.iter().sum::<Vector3<f64>>() / n;
        let mut cov = Matrix3::zeros();
        for p in &pts {
            let d = p - mean;
            cov += d * d.transpose();
        }
        cov /= n - 1.0;
        // eigenvalue floor keeps near-planar voxels invertible
        let eig = nalgebra::SymmetricEigen::new(cov);
        let lmax = eig.eigenvalues.max();
        if lmax <= 0.0 {
            continue;
        }
        let floor = eig_floor * lmax;
        let mut inv_vals = Vector3::zeros();
        for i in 0..3 {
            inv_vals[i] = 1.0 / eig.eigenvalues[i].max(floor);
        }
        let info = eig.eigenvectors * Matrix3::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
        voxels.insert(key, NdtVoxel { mean, info });
    }
    if voxels.is_empty() {
        return Err(PointCloudError::DegenerateTarget);
    }
    Ok(voxels)
}

/// NDT registration: Gauss-Newton on Mahalanobis residuals of transformed
/// source points against per-voxel Gaussians of the target. Fitness is the
/// same nearest-neighbor metric as ICP for comparability.
pub fn ndt(
    source: &PointCloud,
    target: &PointCloud,
    initial: &Pose,
    params: &RegistrationParams,
) -> Result<RegistrationResult, PointCloudError> {
    if source.is_empty() || target.is_empty() {
        return Err(PointCloudError::EmptyCloud);
    }
    let voxels = build_ndt_voxels(target, params.ndt_voxel, params.ndt_eig_floor)?;
    let voxel = params.ndt_voxel;
    let mut current = *initial;
    let mut converged = false;
    let mut iterations = 0;
    let mut lambda = 1e-6;
    let mut prev_cost = f64::INFINITY;
    for it in 0..params.max_iterations {
        iterations = it + 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let mut cost = 0.0;
        let mut n_used = 0usize;
        let r = current.rotation.matrix();
        for p in &source.points {
            let q = current.transform_point(p);
            // the voxel containing q plus face neighbors, nearest Gaussian wins
            let base = (
                (q.x / voxel).floor() as i64,
                (q.y / voxel).floor() as i64,
                (q.z / voxel).floor() as i64,
            );
            let mut best: Option<(&NdtVoxel, f64)> = None;
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dz in -1..=1i64 {
                        if let Some(v) = voxels.get(&(base.0 + dx, base.1 + dy, base.2 + dz)) {
                            let d = (q - v.mean).norm_squared();
                            if best.map(|(_, bd)| d < bd).unwrap_or(true) {
                                best = Some((v, d));
                            }
                        }
                    }
                }
            }
            let Some((v, _)) = best else { continue };
            let d = q - v.mean;
            let m2 = (d.transpose() * v.info * d)[(0, 0)];
            if m2 > 25.0 {
                continue; // 5-sigma gate
            }
            // residual r = L^T d with info = L L^T; jacobian of q wrt (dw, dt):
            // dq/d(dw) = -R [p]_x (right perturbation), dq/d(dt) = I
            let mut jac = nalgebra::Matrix3x6::<f64>::zeros();
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r * hat(p)));
            jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            h += jac.transpose() * v.info * jac;
            g += jac.transpose() * v.info * d;
            cost += 0.5 * m2;
            n_used += 1;
        }
        if n_used < 6 {
            return Ok(RegistrationResult {
                transform: current,
                fitness: {
                    let tree = KdTree3::build(&target.points);
                    fitness_score(source, &tree, &current, params.max_correspondence)
                },
                converged: false,
                iterations,
            });
        }
        let mut damped = h;
        for i in 0..6 {
            damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
        }
        let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
            lambda *= 10.0;
            continue;
        };
        let dw = Vector3::new(step[0], step[1], step[2]);
        let dt = Vector3::new(step[3], step[4], step[5]);
        current = current.retract(&dw, &dt);
        if cost < prev_cost {
            lambda = (lambda / 10.0).max(1e-9);
        } else {
            lambda = (lambda * 10.0).min(1e6);
        }
        prev_cost = cost;
        if step.norm() < params.update_tolerance {
            converged = true;
            break;
        }
    }
    let tree = KdTree3::build(&target.points);
    Ok(RegistrationResult {
        fitness: fitness_score(source, &tree, &current, params.max_correspondence),
        transform: current,
        converged,
        iterations,
    })
}
