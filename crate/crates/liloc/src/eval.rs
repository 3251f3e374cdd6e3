//! Trajectory evaluation: TUM-format IO, timestamp association, absolute
//! trajectory error (separate translation and rotation RMSE columns) with
//! optional rigid alignment, and per-stage timing reports.

use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{quat_xyzw, rotation_from_xyzw, Pose};
use crate::pointcloud::best_rigid_transform;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad trajectory line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no timestamp matches between the trajectories (tolerance {tolerance} s)")]
    NoMatches { tolerance: f64 },
}

/// Timestamped pose sequence.
pub type Trajectory = Vec<Pose>;

/// Parse a TUM trajectory: `timestamp tx ty tz qx qy qz qw`, '#' comments.
pub fn read_tum<R: std::io::Read>(r: R) -> Result<Trajectory, EvalError> {
    let reader = BufReader::new(r);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EvalError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if vals.len() != 8 {
            return Err(EvalError::Parse {
                line: i + 1,
                msg: format!("expected 8 fields, got {}", vals.len()),
            });
        }
        out.push(
            Pose::new(
                rotation_from_xyzw(vals[4], vals[5], vals[6], vals[7]),
                Vector3::new(vals[1], vals[2], vals[3]),
            )
            .with_timestamp(vals[0]),
        );
    }
    Ok(out)
}

pub fn read_tum_file(path: &Path) -> Result<Trajectory, EvalError> {
    read_tum(std::fs::File::open(path)?)
}

pub fn write_tum<W: std::io::Write>(mut w: W, traj: &[Pose]) -> Result<(), EvalError> {
    for p in traj {
        let q = quat_xyzw(&p.rotation);
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            p.timestamp.unwrap_or(0.0),
            p.translation.x,
            p.translation.y,
            p.translation.z,
            q[0],
            q[1],
            q[2],
            q[3]
        )?;
    }
    Ok(())
}

pub fn write_tum_file(path: &Path, traj: &[Pose]) -> Result<(), EvalError> {
    let mut buf = Vec::new();
    write_tum(&mut buf, traj)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Associate each estimate with the nearest ground-truth timestamp within
/// `tolerance` seconds. Both inputs must be time-sorted.
pub fn match_timestamps(est: &[Pose], gt: &[Pose], tolerance: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, e) in est.iter().enumerate() {
        let te = e.timestamp.unwrap_or(0.0);
        while j + 1 < gt.len() && gt[j + 1].timestamp.unwrap_or(0.0) <= te {
            j += 1;
        }
        let mut best = None;
        for cand in [j, j + 1] {
            if let Some(g) = gt.get(cand) {
                let dt = (g.timestamp.unwrap_or(0.0) - te).abs();
                if dt <= tolerance && best.map(|(_, bd)| dt < bd).unwrap_or(true) {
                    best = Some((cand, dt));
                }
            }
        }
        if let Some((k, _)) = best {
            pairs.push((i, k));
        }
    }
    pairs
}

/// Absolute trajectory error over matched timestamps.
#[derive(Debug, Clone)]
pub struct AteReport {
    pub matched: usize,
    /// Translation RMSE, meters.
    pub xyz_rmse: f64,
    /// Rotation RMSE, radians.
    pub rot_rmse: f64,
    /// Max translation error over matches, meters.
    pub xyz_max: f64,
    pub aligned: bool,
}

impl std::fmt::Display for AteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "matched {} poses | xyz RMSE {:.4} m (max {:.4} m) | rot RMSE {:.4} rad | alignment: {}",
            self.matched,
            self.xyz_rmse,
            self.xyz_max,
            self.rot_rmse,
            if self.aligned { "umeyama" } else { "identity" }
        )
    }
}

/// Default association tolerance, seconds.
pub const MATCH_TOLERANCE: f64 = 0.05;

/// Translation and rotation RMSE of `est` against `gt`. With `align` the
/// estimate is first rigidly mapped onto the ground truth (closed-form
/// point-set alignment over the matched positions).
pub fn evaluate(est: &[Pose], gt: &[Pose], align: bool) -> Result<AteReport, EvalError> {
    let pairs = match_timestamps(est, gt, MATCH_TOLERANCE);
    if pairs.is_empty() {
        return Err(EvalError::NoMatches {
            tolerance: MATCH_TOLERANCE,
        });
    }
    let transform = if align {
        let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est[i].translation).collect();
        let tgt: Vec<Vector3<f64>> = pairs.iter().map(|&(_, k)| gt[k].translation).collect();
        best_rigid_transform(&src, &tgt)
    } else {
        Pose::identity()
    };
    let mut sum_t = 0.0;
    let mut sum_r = 0.0;
    let mut max_t = 0.0_f64;
    for &(i, k) in &pairs {
        let mapped = transform.compose(&est[i]);
        let dt = (mapped.translation - gt[k].translation).norm();
        sum_t += dt * dt;
        max_t = max_t.max(dt);
        let dr = mapped.rotation_distance(&gt[k]);
        sum_r += dr * dr;
    }
    let n = pairs.len() as f64;
    Ok(AteReport {
        matched: pairs.len(),
        xyz_rmse: (sum_t / n).sqrt(),
        rot_rmse: (sum_r / n).sqrt(),
        xyz_max: max_t,
        aligned: align,
    })
}

/// Wall-clock stage timings, milliseconds, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct TimingReport {
    entries: Vec<(String, f64)>,
}

impl TimingReport {
    pub fn new() -> Self {
        TimingReport::default()
    }

    pub fn record(&mut self, stage: &str, millis: f64) {
        self.entries.push((stage.to_string(), millis));
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, ms)| ms).sum()
    }

    pub fn mean(&self, stage: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .entries
            .iter()
            .filter(|(s, _)| s == stage)
            .map(|(_, ms)| *ms)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "stage,milliseconds")?;
        for (stage, ms) in &self.entries {
            writeln!(w, "{stage},{ms}")?;
        }
        Ok(())
    }
}

/// Gnuplot-friendly trajectory dump: `# t x y z` columns, est and gt as
/// separate blocks.
pub fn write_trajectory_dat<W: std::io::Write>(
    mut w: W,
    est: &[Pose],
    gt: Option<&[Pose]>,
) -> std::io::Result<()> {
    writeln!(w, "# estimated: t x y z")?;
    for p in est {
        writeln!(
            w,
            "{} {} {} {}",
            p.timestamp.unwrap_or(0.0),
            p.translation.x,
            p.translation.y,
            p.translation.z
        )?;
    }
    if let Some(gt) = gt {
        writeln!(w)?;
        writeln!(w)?;
        writeln!(w, "# ground truth: t x y z")?;
        for p in gt {
            writeln!(
                w,
                "{} {} {} {}",
                p.timestamp.unwrap_or(0.0),
                p.translation.x,
                p.translation.y,
                p.translation.z
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn traj(n: usize) -> Trajectory {
        (0..n)
            .map(|i| {
                Pose::from_xyz_yaw(i as f64, 0.5 * i as f64, 0.0, 0.01 * i as f64)
                    .with_timestamp(i as f64 * 0.1)
            })
            .collect()
    }

    #[test]
    fn tum_round_trip() {
        let t = traj(10);
        let mut buf = Vec::new();
        write_tum(&mut buf, &t).unwrap();
        let back = read_tum(&buf[..]).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in t.iter().zip(back.iter()) {
            assert!((a.translation - b.translation).norm() < 1e-12);
            assert!(a.rotation_distance(b) < 1e-12);
            assert_eq!(a.timestamp, b.timestamp);
        }
    }

    #[test]
    fn tum_comments_and_bad_lines() {
        let text = "# header\n0.0 1 2 3 0 0 0 1\n";
        assert_eq!(read_tum(text.as_bytes()).unwrap().len(), 1);
        assert!(read_tum("1 2 3\n".as_bytes()).is_err());
        assert!(read_tum("a b c d e f g h\n".as_bytes()).is_err());
    }

    #[test]
    fn identical_trajectories_zero_error() {
        let t = traj(50);
        let r = evaluate(&t, &t, false).unwrap();
        assert_eq!(r.matched, 50);
        assert!(r.xyz_rmse < 1e-12);
        assert!(r.rot_rmse < 1e-12);
    }

    #[test]
    fn constant_offset_without_alignment() {
        let gt = traj(50);
        let est: Trajectory = gt
            .iter()
            .map(|p| {
                let mut q = *p;
                q.translation.x += 1.0;
                q
            })
            .collect();
        let r = evaluate(&est, &gt, false).unwrap();
        assert!((r.xyz_rmse - 1.0).abs() < 1e-12);
        // the same offset vanishes under alignment
        let ra = evaluate(&est, &gt, true).unwrap();
        assert!(ra.xyz_rmse < 1e-9);
    }

    #[test]
    fn gaussian_noise_rmse_expectation() {
        // isotropic position noise sigma: xyz RMSE ~ sqrt(3) * sigma
        let mut rng = StdRng::seed_from_u64(11);
        let gt = traj(2000);
        let sigma = 0.1;
        let est: Trajectory = gt
            .iter()
            .map(|p| {
                let mut q = *p;
                for i in 0..3 {
                    let (u1, u2): (f64, f64) =
                        (rng.gen_range(f64::EPSILON..1.0), rng.gen_range(0.0..1.0));
                    q.translation[i] +=
                        sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                }
                q
            })
            .collect();
        let r = evaluate(&est, &gt, false).unwrap();
        let expected = 3.0_f64.sqrt() * sigma;
        assert!(
            (r.xyz_rmse - expected).abs() / expected < 0.2,
            "rmse {} vs {}",
            r.xyz_rmse,
            expected
        );
    }

    #[test]
    fn timestamp_matching_window() {
        let gt = traj(10); // stamps 0.0, 0.1, ...
        let est: Trajectory = vec![
            Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.0).with_timestamp(0.04), // matches 0.0
            Pose::from_xyz_yaw(1.0, 0.0, 0.0, 0.0).with_timestamp(0.26), // outside 0.05 of 0.2/0.3? 0.04 from 0.3 -> matches
            Pose::from_xyz_yaw(2.0, 0.0, 0.0, 0.0).with_timestamp(5.0),  // no match
        ];
        let pairs = match_timestamps(&est, &gt, 0.05);
        assert_eq!(pairs, vec![(0, 0), (1, 3)]);
    }

    #[test]
    fn no_matches_is_an_error() {
        let gt = traj(5);
        let est: Trajectory =
            vec![Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.0).with_timestamp(100.0)];
        assert!(matches!(
            evaluate(&est, &gt, false),
            Err(EvalError::NoMatches { .. })
        ));
    }

    #[test]
    fn rotation_rmse_measures_pure_rotation_error() {
        let gt = traj(20);
        let est: Trajectory = gt
            .iter()
            .map(|p| {
                Pose::new(
                    p.rotation.compose(&Rotation::yaw(0.1)),
                    p.translation,
                )
                .with_timestamp(p.timestamp.unwrap())
            })
            .collect();
        let r = evaluate(&est, &gt, false).unwrap();
        assert!((r.rot_rmse - 0.1).abs() < 1e-9);
        assert!(r.xyz_rmse < 1e-12);
    }

    #[test]
    fn timing_report_csv_shape() {
        let mut t = TimingReport::new();
        t.record("jfgo", 12.5);
        t.record("ndt", 3.0);
        t.record("jfgo", 7.5);
        assert_eq!(t.mean("jfgo"), Some(10.0));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("stage,milliseconds\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
