//! Polar-segmentation scan descriptor, XOR retrieval and the
//! coarse-to-fine global pose initialization.
//!
//! A scan is binned into rings x sectors over (range, azimuth); each cell
//! keeps the max height, an occupancy bit and (when enough points are
//! present) a PCA normal. Matching is the Hamming distance between the
//! occupancy matrices, minimized over cyclic sector shifts so it is
//! invariant to yaw by whole-sector steps.

use nalgebra::Vector3;
use thiserror::Error;

use crate::config::RunConfig;
use crate::geometry::Pose;
use crate::odometry::Keyframe;
use crate::pointcloud::{self, PointCloud, RegistrationParams};
use crate::session::SessionStore;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("descriptor dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("no prior submap within {radius} m of the coarse pose")]
    NoSubmapInRange { radius: f64 },
    #[error("ICP refinement did not converge (best candidate keyframe {candidate}, descriptor distance {distance})")]
    RefinementFailed { candidate: usize, distance: u32 },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DescriptorCell {
    pub max_z: f64,
    pub occupied: bool,
    pub normal: Option<Vector3<f64>>,
}

/// Rings x sectors polar descriptor of one scan.
#[derive(Debug, Clone)]
pub struct PolarDescriptor {
    pub n_rings: usize,
    pub n_sectors: usize,
    pub l_max: f64,
    cells: Vec<DescriptorCell>,
}

impl PolarDescriptor {
    pub fn cell(&self, ring: usize, sector: usize) -> &DescriptorCell {
        &self.cells[ring * self.n_sectors + sector]
    }

    /// Descriptor with columns cyclically shifted right by `k` sectors.
    pub fn column_shift(&self, k: usize) -> PolarDescriptor {
        let mut out = self.clone();
        for r in 0..self.n_rings {
            for s in 0..self.n_sectors {
                out.cells[r * self.n_sectors + (s + k) % self.n_sectors] =
                    self.cells[r * self.n_sectors + s];
            }
        }
        out
    }

    fn occupancy_row(&self, ring: usize) -> &[DescriptorCell] {
        &self.cells[ring * self.n_sectors..(ring + 1) * self.n_sectors]
    }
}

/// Encode a scan (sensor frame, sensor at the origin) into a descriptor.
///
/// Points at range >= `l_max` are discarded; the occupancy bit is set when
/// a cell's max height clears `height_gate` (relative to the sensor).
pub fn encode(
    cloud: &PointCloud,
    n_rings: usize,
    n_sectors: usize,
    l_max: f64,
    height_gate: f64,
) -> PolarDescriptor {
    assert!(n_rings >= 1 && n_sectors >= 1);
    let mut cells = vec![DescriptorCell::default(); n_rings * n_sectors];
    let mut members: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); n_rings * n_sectors];
    for p in &cloud.points {
        let rho = (p.x * p.x + p.y * p.y).sqrt();
        if rho >= l_max {
            continue;
        }
        let mut theta = p.y.atan2(p.x);
        if theta < 0.0 {
            theta += std::f64::consts::TAU;
        }
        let ring = ((rho / l_max) * n_rings as f64) as usize;
        let sector = (((theta / std::f64::consts::TAU) * n_sectors as f64) as usize).min(n_sectors - 1);
        let idx = ring.min(n_rings - 1) * n_sectors + sector;
        members[idx].push(*p);
    }
    for (idx, pts) in members.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let max_z = pts.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
        let cell = &mut cells[idx];
        cell.max_z = max_z;
        cell.occupied = max_z > height_gate;
        if pts.len() >= 3 {
            cell.normal = pca_normal(pts);
        }
    }
    PolarDescriptor {
        n_rings,
        n_sectors,
        l_max,
        cells,
    }
}

fn pca_normal(pts: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    let n = pts.len() as f64;
    let mean: Vector3<f64> = pts.iter().sum::<Vector3<f64>>() / n;
    let mut cov = nalgebra::Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut min_i = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let v = eig.eigenvectors.column(min_i).into_owned();
    Some(if v.z < 0.0 { -v } else { v })
}

/// Min-over-shifts Hamming distance between occupancy matrices, with the
/// minimizing shift (yaw hypothesis = shift * 2*pi / n_sectors).
pub fn descriptor_distance(
    a: &PolarDescriptor,
    b: &PolarDescriptor,
) -> Result<(u32, usize), DescriptorError> {
    if a.n_rings != b.n_rings || a.n_sectors != b.n_sectors {
        return Err(DescriptorError::DimensionMismatch(
            a.n_rings, a.n_sectors, b.n_rings, b.n_sectors,
        ));
    }
    let ns = a.n_sectors;
    let mut best = (u32::MAX, 0usize);
    for shift in 0..ns {
        let mut ham = 0u32;
        for r in 0..a.n_rings {
            let ra = a.occupancy_row(r);
            let rb = b.occupancy_row(r);
            for s in 0..ns {
                // compare a shifted by `shift` against b
                if ra[s].occupied != rb[(s + shift) % ns].occupied {
                    ham += 1;
                }
            }
        }
        if ham < best.0 {
            best = (ham, shift);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct InitializationResult {
    pub pose: Pose,
    pub best_keyframe: usize,
    pub descriptor_distance: u32,
    pub icp_fitness: f64,
}

/// Coarse-to-fine pose initialization against a prior session.
///
/// Selects the nearest prior submap, scores the query descriptor against
/// every member keyframe, folds the winning sector shift into the
/// candidate's pose as the ICP initial guess, and refines with ICP.
pub fn initialize_pose(
    query: &Keyframe,
    coarse: &Pose,
    session: &SessionStore,
    config: &RunConfig,
) -> Result<InitializationResult, DescriptorError> {
    let submap = session
        .nearest_submap(&coarse.translation, config.submap_search_radius)
        .ok_or(DescriptorError::NoSubmapInRange {
            radius: config.submap_search_radius,
        })?;
    let qd = encode(
        &query.cloud,
        config.descriptor_rings,
        config.descriptor_sectors,
        config.descriptor_max_range,
        config.descriptor_height_gate,
    );
    let mut best: Option<(usize, u32, usize)> = None; // (kf id, distance, shift)
    for &kf_id in &submap.members {
        let kf = session.keyframe(kf_id);
        let kd = encode(
            &kf.cloud,
            config.descriptor_rings,
            config.descriptor_sectors,
            config.descriptor_max_range,
            config.descriptor_height_gate,
        );
        let (dist, shift) = descriptor_distance(&qd, &kd)?;
        if best.map(|(_, bd, _)| dist < bd).unwrap_or(true) {
            best = Some((kf_id, dist, shift));
        }
    }
    let (best_id, dist, shift) = best.expect("submap has at least one member");
    let candidate = session.keyframe(best_id);
    // query rotated by +yaw matches the candidate, so the initial guess is
    // the candidate pose composed with that yaw about the sensor axis
    let yaw = shift as f64 * std::f64::consts::TAU / config.descriptor_sectors as f64;
    let guess = candidate
        .pose
        .compose(&Pose::from_xyz_yaw(0.0, 0.0, 0.0, yaw));
    // refine in the candidate's frame: source = query cloud, target = candidate cloud
    let init_rel = candidate.pose.inverse().compose(&guess);
    let reg = pointcloud::icp(
        &query.cloud,
        &candidate.cloud,
        &init_rel,
        &RegistrationParams::default(),
    )
    .map_err(|_| DescriptorError::RefinementFailed {
        candidate: best_id,
        distance: dist,
    })?;
    if !reg.converged {
        return Err(DescriptorError::RefinementFailed {
            candidate: best_id,
            distance: dist,
        });
    }
    Ok(InitializationResult {
        pose: candidate.pose.compose(&reg.transform),
        best_keyframe: best_id,
        descriptor_distance: dist,
        icp_fitness: reg.fitness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scan(rng: &mut StdRng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-40.0..40.0),
                        rng.gen_range(-40.0..40.0),
                        rng.gen_range(-1.0..3.0),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn default_grid_is_20_by_60() {
        let c = RunConfig::default();
        assert_eq!(c.descriptor_rings, 20);
        assert_eq!(c.descriptor_sectors, 60);
    }

    #[test]
    fn single_point_single_cell() {
        let cloud = PointCloud::new(vec![Vector3::new(1.0, 0.0, 2.0)]);
        let d = encode(&cloud, 20, 60, 50.0, -0.5);
        let mut occupied = 0;
        let mut max_z = 0.0;
        for r in 0..20 {
            for s in 0..60 {
                if d.cell(r, s).occupied {
                    occupied += 1;
                    max_z = d.cell(r, s).max_z;
                }
            }
        }
        assert_eq!(occupied, 1);
        assert_eq!(max_z, 2.0);
    }

    #[test]
    fn yaw_rotation_is_exact_column_shift() {
        let mut rng = StdRng::seed_from_u64(30);
        let cloud = scan(&mut rng, 3000);
        let d0 = encode(&cloud, 20, 60, 50.0, -0.5);
        for k in [1usize, 5, 17] {
            let yaw = k as f64 * std::f64::consts::TAU / 60.0;
            let rotated = cloud.transformed(&Pose::new(Rotation::yaw(yaw), Vector3::zeros()));
            let dk = encode(&rotated, 20, 60, 50.0, -0.5);
            let shifted = d0.column_shift(k);
            for r in 0..20 {
                for s in 0..60 {
                    assert_eq!(
                        dk.cell(r, s).occupied,
                        shifted.cell(r, s).occupied,
                        "ring {r} sector {s} shift {k}"
                    );
                }
            }
        }
    }

    #[test]
    fn distance_zero_on_identical_and_symmetric() {
        let mut rng = StdRng::seed_from_u64(31);
        let a = encode(&scan(&mut rng, 2000), 20, 60, 50.0, -0.5);
        let b = encode(&scan(&mut rng, 2000), 20, 60, 50.0, -0.5);
        assert_eq!(descriptor_distance(&a, &a).unwrap(), (0, 0));
        let (dab, _) = descriptor_distance(&a, &b).unwrap();
        let (dba, _) = descriptor_distance(&b, &a).unwrap();
        assert_eq!(dab, dba);
    }

    #[test]
    fn shifted_descriptor_recovered() {
        let mut rng = StdRng::seed_from_u64(32);
        let d = encode(&scan(&mut rng, 2000), 20, 60, 50.0, -0.5);
        let shifted = d.column_shift(5);
        let (dist, shift) = descriptor_distance(&d, &shifted).unwrap();
        assert_eq!(dist, 0);
        assert_eq!(shift, 5);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let mut rng = StdRng::seed_from_u64(33);
        let a = encode(&scan(&mut rng, 100), 20, 60, 50.0, -0.5);
        let b = encode(&scan(&mut rng, 100), 10, 60, 50.0, -0.5);
        assert!(descriptor_distance(&a, &b).is_err());
    }
}
