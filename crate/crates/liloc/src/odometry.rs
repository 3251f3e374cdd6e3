//! LiDAR odometry front-end: scan undistortion by motion interpolation,
//! point-to-plane alignment against the incremental map index, keyframe
//! gating and emission of odometry between-factors.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::factorgraph::diag_sqrt_info6;
use crate::geometry::{hat, Pose};
use crate::pointcloud::{IncrementalMapIndex, PointCloud};

/// One selected keyframe: downsampled body-frame cloud plus the current
/// best world-frame pose estimate.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: usize,
    pub cloud: PointCloud,
    pub pose: Pose,
    pub timestamp: f64,
}

/// Relative-pose constraint between consecutive keyframes.
#[derive(Debug, Clone)]
pub struct OdometryFactor {
    pub from: usize,
    pub to: usize,
    pub relative: Pose,
    pub sqrt_info: Matrix6<f64>,
}

/// Piecewise pose trajectory over a scan interval, interpolated for
/// per-point undistortion.
#[derive(Debug, Clone)]
pub struct MotionSegment {
    knots: Vec<(f64, Pose)>,
}

impl MotionSegment {
    pub fn stationary(t0: f64, t1: f64) -> Self {
        MotionSegment {
            knots: vec![(t0, Pose::identity()), (t1, Pose::identity())],
        }
    }

    pub fn from_knots(knots: Vec<(f64, Pose)>) -> Self {
        assert!(knots.len() >= 2);
        MotionSegment { knots }
    }

    /// Integrate body rates into relative poses from the segment start.
    /// `velocity` is the body-frame linear velocity at segment start;
    /// gravity is removed from the measured specific force.
    pub fn from_imu(
        samples: &[crate::imu::ImuSample],
        bias: &crate::imu::ImuBias,
        gravity: &Vector3<f64>,
        velocity: &Vector3<f64>,
    ) -> Self {
        let mut knots = Vec::with_capacity(samples.len().max(2));
        let mut pose = Pose::identity();
        let mut vel = *velocity;
        if samples.is_empty() {
            return MotionSegment::stationary(0.0, 0.1);
        }
        knots.push((samples[0].timestamp, pose));
        for pair in samples.windows(2) {
            let dt = pair[1].timestamp - pair[0].timestamp;
            let w = 0.5 * (pair[0].angular_velocity + pair[1].angular_velocity) - bias.gyro;
            let a = 0.5 * (pair[0].linear_acceleration + pair[1].linear_acceleration) - bias.accel;
            let a_world = pose.rotation.rotate(&a) + gravity;
            pose = Pose::new(
                pose.rotation.compose(&crate::geometry::Rotation::exp(&(w * dt))),
                pose.translation + vel * dt + 0.5 * a_world * dt * dt,
            );
            vel += a_world * dt;
            knots.push((pair[1].timestamp, pose));
        }
        if knots.len() < 2 {
            let t = knots[0].0;
            knots.push((t + 1e-3, knots[0].1));
        }
        MotionSegment { knots }
    }

    pub fn start_time(&self) -> f64 {
        self.knots[0].0
    }

    pub fn end_time(&self) -> f64 {
        self.knots.last().unwrap().0
    }

    /// Pose at time `t`, clamped to the segment, slerp/lerp between knots.
    pub fn pose_at(&self, t: f64) -> Pose {
        if t <= self.knots[0].0 {
            return self.knots[0].1;
        }
        if t >= self.knots.last().unwrap().0 {
            return self.knots.last().unwrap().1;
        }
        let i = self.knots.partition_point(|(kt, _)| *kt <= t) - 1;
        let (t0, p0) = &self.knots[i];
        let (t1, p1) = &self.knots[i + 1];
        let alpha = (t - t0) / (t1 - t0);
        Pose::new(
            p0.rotation.slerp(&p1.rotation, alpha),
            p0.translation * (1.0 - alpha) + p1.translation * alpha,
        )
    }
}

/// Transform every point to the scan-end frame using the pose history of
/// the segment. Points without timestamps pass through and the warning
/// flag is set.
pub fn undistort(scan: &PointCloud, segment: &MotionSegment) -> (PointCloud, bool) {
    let Some(times) = &scan.times else {
        return (scan.clone(), true);
    };
    let end_inv = segment.pose_at(segment.end_time()).inverse();
    let points = scan
        .points
        .iter()
        .zip(times.iter())
        .map(|(p, &t)| {
            let rel = end_inv.compose(&segment.pose_at(t));
            rel.transform_point(p)
        })
        .collect();
    (
        PointCloud {
            points,
            intensity: scan.intensity.clone(),
            times: Some(times.clone()),
        },
        false,
    )
}

#[derive(Debug, Clone)]
pub struct AlignParams {
    pub neighbors: usize,
    /// Points whose neighborhood reaches farther than this are outside the
    /// mapped region and must not vote, or the frontier drags the pose.
    pub max_correspondence: f64,
    pub plane_tolerance: f64,
    pub roughness_sigma: f64,
    pub max_iterations: usize,
    pub update_tolerance: f64,
    pub min_correspondences: usize,
    /// Relative eigenvalue gate for declaring the normal equations
    /// rank-deficient along some direction.
    pub degeneracy_ratio: f64,
}

impl Default for AlignParams {
    fn default() -> Self {
        AlignParams {
            neighbors: 5,
            max_correspondence: 1.0,
            plane_tolerance: 0.01,
            roughness_sigma: 0.02,
            max_iterations: 30,
            update_tolerance: 1e-6,
            min_correspondences: 10,
            degeneracy_ratio: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignResult {
    pub pose: Pose,
    pub valid: bool,
    pub degenerate: bool,
    /// Weighted mean absolute point-to-plane distance at the solution.
    pub mean_residual: f64,
    pub iterations: usize,
}

fn fit_plane(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, f64, f64)> {
    let n = points.len() as f64;
    let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(cov / n);
    let mut min_i = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let normal = eig.eigenvectors.column(min_i).into_owned();
    if normal.norm() < 0.5 {
        return None;
    }
    // near-collinear patches (points along a single scan ring) have no
    // second in-plane extent and an arbitrary normal; require at least
    // ~5 cm of spread in the second principal direction
    let mut mid = f64::INFINITY;
    for i in 0..3 {
        if i != min_i {
            mid = mid.min(eig.eigenvalues[i]);
        }
    }
    if mid < 2.5e-3 {
        return None;
    }
    let d = -normal.dot(&centroid);
    let rms = (eig.eigenvalues[min_i].max(0.0)).sqrt();
    Some((normal, d, rms))
}

/// Weighted point-to-plane alignment of a body-frame scan against the map.
///
/// For each point the `neighbors` nearest map points define a plane patch;
/// patches whose points stray beyond `plane_tolerance` from the fit are
/// rejected, and accepted residuals get roughness weights
/// `exp(-rms / roughness_sigma)`. Solved by damped Gauss-Newton.
pub fn align_scan(
    scan: &PointCloud,
    predicted: &Pose,
    map: &IncrementalMapIndex,
    params: &AlignParams,
) -> AlignResult {
    let mut current = *predicted;
    if map.is_empty() || scan.is_empty() {
        return AlignResult {
            pose: current,
            valid: false,
            degenerate: false,
            mean_residual: f64::INFINITY,
            iterations: 0,
        };
    }
    let mut iterations = 0;
    let mut lambda = 1e-6;
    let mut prev_cost = f64::INFINITY;
    let mut degenerate = false;
    let mut mean_residual = f64::INFINITY;
    let mut n_corr = 0usize;
    for it in 0..params.max_iterations {
        iterations = it + 1;
        let r_mat = current.rotation.matrix();
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let mut cost = 0.0;
        let mut abs_sum = 0.0;
        let mut w_sum = 0.0;
        n_corr = 0;
        for p in &scan.points {
            let q = current.transform_point(p);
            let nn = map.knn(&q, params.neighbors);
            if nn.len() < params.neighbors
                || nn.iter().any(|(_, d)| *d > params.max_correspondence)
            {
                continue;
            }
            let pts: Vec<Vector3<f64>> = nn.iter().map(|(id, _)| *map.point(*id)).collect();
            let Some((normal, d, rms)) = fit_plane(&pts) else {
                continue;
            };
            // patch validity: every member point close to the fitted plane
            if pts.iter().any(|pp| (normal.dot(pp) + d).abs() > params.plane_tolerance) {
                continue;
            }
            let weight = (-rms / params.roughness_sigma).exp();
            let r = normal.dot(&q) + d;
            let mut jac = Vector6::<f64>::zeros();
            let jrot = -(r_mat * hat(p)).transpose() * normal;
            jac.fixed_rows_mut::<3>(0).copy_from(&jrot);
            jac.fixed_rows_mut::<3>(3).copy_from(&normal);
            h += weight * jac * jac.transpose();
            g += weight * jac * r;
            cost += weight * r * r;
            abs_sum += weight * r.abs();
            w_sum += weight;
            n_corr += 1;
        }
        if n_corr < params.min_correspondences {
            return AlignResult {
                pose: *predicted,
                valid: false,
                degenerate: false,
                mean_residual: f64::INFINITY,
                iterations,
            };
        }
        mean_residual = abs_sum / w_sum.max(1e-12);
        let eig = nalgebra::SymmetricEigen::new(h);
        let max_e = eig.eigenvalues.max();
        degenerate = eig.eigenvalues.min() < params.degeneracy_ratio * max_e;
        let mut damped = h;
        for i in 0..6 {
            damped[(i, i)] += lambda * h[(i, i)].max(1e-12) + 1e-9 * max_e;
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
            break;
        }
    }
    AlignResult {
        pose: current,
        valid: n_corr >= params.min_correspondences,
        degenerate,
        mean_residual,
        iterations,
    }
}

/// Keyframe gate: true once translation or rotation since the last
/// keyframe clears its threshold.
pub fn maybe_keyframe(pose: &Pose, last_kf: &Pose, trans_gate: f64, rot_gate: f64) -> bool {
    pose.translation_distance(last_kf) >= trans_gate || pose.rotation_distance(last_kf) >= rot_gate
}

/// Between-factor from consecutive keyframes; noise is the fixed diagonal
/// model inflated by the alignment residual.
pub fn emit_between(
    prev: &Keyframe,
    curr: &Keyframe,
    base_sigma_t: f64,
    base_sigma_r: f64,
    alignment_residual: f64,
) -> OdometryFactor {
    let scale = 1.0 + alignment_residual.max(0.0);
    OdometryFactor {
        from: prev.id,
        to: curr.id,
        relative: prev.pose.relative(&curr.pose),
        sqrt_info: diag_sqrt_info6(base_sigma_r * scale, base_sigma_t * scale),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::pointcloud::voxel_downsample;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn structured_scene(rng: &mut StdRng, n: usize) -> PointCloud {
        // three mutually orthogonal planes so alignment is fully constrained
        let mut pts = Vec::new();
        for _ in 0..n {
            let (x, y, z) = match rng.gen_range(0..3) {
                0 => (rng.gen_range(-8.0..8.0), 8.0, rng.gen_range(0.0..4.0)),
                1 => (8.0, rng.gen_range(-8.0..8.0), rng.gen_range(0.0..4.0)),
                _ => (rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), 0.0),
            };
            pts.push(Vector3::new(x, y, z));
        }
        PointCloud::new(pts)
    }

    #[test]
    fn undistort_zero_motion_is_identity() {
        let mut scan = PointCloud::new(vec![Vector3::new(1.0, 2.0, 0.5)]);
        scan.times = Some(vec![0.05]);
        let seg = MotionSegment::stationary(0.0, 0.1);
        let (out, warned) = undistort(&scan, &seg);
        assert!(!warned);
        assert!((out.points[0] - scan.points[0]).norm() < 1e-12);
    }

    #[test]
    fn undistort_without_times_passes_through() {
        let scan = PointCloud::new(vec![Vector3::new(1.0, 0.0, 0.0)]);
        let seg = MotionSegment::stationary(0.0, 0.1);
        let (out, warned) = undistort(&scan, &seg);
        assert!(warned);
        assert_eq!(out.points[0], scan.points[0]);
    }

    #[test]
    fn undistort_constant_yaw_rate() {
        // 10 deg/s over a 0.1 s scan: a scan-start point must be rotated by
        // about -1 degree into the scan-end frame
        let rate = 10.0_f64.to_radians();
        let seg = MotionSegment::from_knots(vec![
            (0.0, Pose::identity()),
            (0.1, Pose::new(Rotation::yaw(rate * 0.1), Vector3::zeros())),
        ]);
        let mut scan = PointCloud::new(vec![Vector3::new(10.0, 0.0, 0.0)]);
        scan.times = Some(vec![0.0]);
        let (out, _) = undistort(&scan, &seg);
        let expected = Rotation::yaw(-rate * 0.1).rotate(&Vector3::new(10.0, 0.0, 0.0));
        assert!(
            (out.points[0] - expected).norm() < 1e-6,
            "{} vs {}",
            out.points[0],
            expected
        );
    }

    #[test]
    fn align_scan_exact_subset_recovers_truth() {
        let mut rng = StdRng::seed_from_u64(60);
        // three orthogonal planes that do not touch, so no neighborhood
        // patch ever straddles two planes and every accepted residual is
        // exactly zero at the true pose
        let mut pts = Vec::new();
        for _ in 0..4000 {
            let (x, y, z) = match rng.gen_range(0..3) {
                0 => (rng.gen_range(-8.0..5.0), 8.0, rng.gen_range(1.0..4.0)),
                1 => (8.0, rng.gen_range(-8.0..5.0), rng.gen_range(1.0..4.0)),
                _ => (rng.gen_range(-8.0..5.0), rng.gen_range(-8.0..5.0), 0.0),
            };
            pts.push(Vector3::new(x, y, z));
        }
        let scene = PointCloud::new(pts);
        let mut map = IncrementalMapIndex::new();
        map.insert_cloud(&scene);
        let truth = Pose::from_xyz_yaw(0.5, -0.3, 0.2, 0.1);
        // body-frame scan whose points are an exact subset of the map
        let scan_world = PointCloud::new(scene.points.iter().step_by(5).cloned().collect());
        let scan_body = scan_world.transformed(&truth.inverse());
        let r = align_scan(&scan_body, &truth, &map, &AlignParams::default());
        assert!(r.valid);
        assert!(
            (r.pose.translation - truth.translation).norm() < 1e-4,
            "translation error {} (mean residual {}, iters {}, degenerate {})",
            (r.pose.translation - truth.translation).norm(),
            r.mean_residual,
            r.iterations,
            r.degenerate
        );
    }

    #[test]
    fn align_scan_recovers_perturbed_prediction() {
        let mut rng = StdRng::seed_from_u64(61);
        let scene = structured_scene(&mut rng, 5000);
        let mut map = IncrementalMapIndex::new();
        map.insert_cloud(&scene);
        let truth = Pose::from_xyz_yaw(0.3, 0.4, 0.1, 0.2);
        let scan_body = structured_scene(&mut rng, 1000).transformed(&truth.inverse());
        let perturbed = truth.compose(&Pose::from_xyz_yaw(0.2, -0.15, 0.05, 2.0_f64.to_radians()));
        let r = align_scan(&scan_body, &perturbed, &map, &AlignParams::default());
        assert!(r.valid);
        assert!(
            (r.pose.translation - truth.translation).norm() < 0.02,
            "err {}",
            (r.pose.translation - truth.translation).norm()
        );
        assert!(r.pose.rotation.inverse().compose(&truth.rotation).angle() < 0.2_f64.to_radians());
    }

    #[test]
    fn featureless_plane_is_degenerate() {
        let mut rng = StdRng::seed_from_u64(62);
        let mut pts = Vec::new();
        for _ in 0..2000 {
            pts.push(Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                0.0,
            ));
        }
        let scene = PointCloud::new(pts);
        let mut map = IncrementalMapIndex::new();
        map.insert_cloud(&scene);
        let scan = structured_scene(&mut rng, 500)
            .points
            .iter()
            .map(|p| Vector3::new(p.x, p.y, 0.0))
            .collect::<Vec<_>>();
        let r = align_scan(
            &PointCloud::new(scan),
            &Pose::identity(),
            &map,
            &AlignParams::default(),
        );
        assert!(r.degenerate);
    }

    #[test]
    fn too_few_correspondences_invalid() {
        let mut map = IncrementalMapIndex::new();
        map.insert_cloud(&PointCloud::new(vec![Vector3::zeros(); 4]));
        let scan = PointCloud::new(vec![Vector3::new(100.0, 100.0, 100.0)]);
        let r = align_scan(&scan, &Pose::identity(), &map, &AlignParams::default());
        assert!(!r.valid);
        assert_eq!(r.pose.translation, Vector3::zeros());
    }

    #[test]
    fn keyframe_gating() {
        let a = Pose::identity();
        assert!(!maybe_keyframe(&a, &a, 1.0, 0.2));
        assert!(maybe_keyframe(&Pose::from_xyz_yaw(2.0, 0.0, 0.0, 0.0), &a, 1.0, 0.2));
        assert!(maybe_keyframe(&Pose::from_xyz_yaw(0.5, 0.0, 0.0, 0.3), &a, 1.0, 0.2));
    }

    #[test]
    fn emit_between_identity_and_chain() {
        let mk = |id: usize, pose: Pose| Keyframe {
            id,
            cloud: PointCloud::new(vec![Vector3::zeros()]),
            pose,
            timestamp: id as f64,
        };
        let a = mk(0, Pose::from_xyz_yaw(1.0, 1.0, 0.0, 0.5));
        let same = mk(1, a.pose);
        let f = emit_between(&a, &same, 0.02, 0.01, 0.0);
        assert!(f.relative.translation.norm() < 1e-12);

        // chain of betweens composes to the endpoint relative
        let poses = [
            Pose::identity(),
            Pose::from_xyz_yaw(1.0, 0.0, 0.0, 0.1),
            Pose::from_xyz_yaw(2.0, 0.5, 0.0, 0.3),
            Pose::from_xyz_yaw(2.5, 1.5, 0.0, 0.7),
        ];
        let kfs: Vec<Keyframe> = poses.iter().enumerate().map(|(i, p)| mk(i, *p)).collect();
        let mut acc = Pose::identity();
        for w in kfs.windows(2) {
            acc = acc.compose(&emit_between(&w[0], &w[1], 0.02, 0.01, 0.0).relative);
        }
        let direct = poses[0].relative(&poses[3]);
        assert!((acc.to_homogeneous() - direct.to_homogeneous()).norm() < 1e-9);
    }

    #[test]
    fn roughness_weights_bounded() {
        // weights are exp(-rms/sigma), always in (0, 1]
        for rms in [0.0, 0.01, 0.05, 0.3] {
            let w: f64 = (-rms / 0.05_f64).exp();
            assert!(w > 0.0 && w <= 1.0);
        }
    }

    #[test]
    fn downsample_then_align_still_accurate() {
        let mut rng = StdRng::seed_from_u64(63);
        let scene = structured_scene(&mut rng, 6000);
        let mut map = IncrementalMapIndex::new();
        map.insert_cloud(&voxel_downsample(&scene, 0.4));
        let truth = Pose::from_xyz_yaw(0.2, 0.1, 0.0, 0.05);
        let scan_body = structured_scene(&mut rng, 1200).transformed(&truth.inverse());
        let guess = truth.compose(&Pose::from_xyz_yaw(0.1, -0.1, 0.0, 1.0_f64.to_radians()));
        let r = align_scan(&scan_body, &guess, &map, &AlignParams::default());
        assert!(r.valid);
        assert!((r.pose.translation - truth.translation).norm() < 0.05);
    }
}
