//! Simulator-backed end-to-end pipelines: build a central session with
//! the odometry front-end, then localize a subsidiary session against it.
//! Shared by the CLI and the integration tests so both run the exact same
//! code path.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::descriptor::{self, InitializationResult};
use crate::eval::{evaluate, AteReport, EvalError, TimingReport};
use crate::factorgraph::SessionTag;
use crate::geometry::Pose;
use crate::imu::{integrate, ImuBias, ImuNoise, ImuSample};
use crate::odometry::{
    align_scan, emit_between, maybe_keyframe, AlignParams, Keyframe, OdometryFactor,
};
use crate::pointcloud::{voxel_downsample, IncrementalMapIndex, PointCloud};
use crate::session::{Localizer, Mode, SessionError, SessionStore, StepInput, StepOutcome};
use crate::simulator::{
    central_trajectory, generate_world, raycast_scan, subsidiary_trajectory, Scenario, SensorRig,
    Trajectory, TrajectorySpec, World,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("session error: {0}")]
    Session(#[from] SessionError),
    #[error("initialization failed: {0}")]
    Initialization(#[from] descriptor::DescriptorError),
    #[error("imu error: {0}")]
    Imu(#[from] crate::imu::ImuError),
    #[error("evaluation error: {0}")]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory produced no keyframes")]
    NoKeyframes,
}

/// Keyframe poses sampled from a trajectory with the configured gates.
fn sample_keyframes(traj: &Trajectory, spec: &TrajectorySpec, config: &RunConfig) -> Vec<Pose> {
    let scan_dt = 0.1;
    let mut out: Vec<Pose> = Vec::new();
    let mut t = spec.start_time();
    while t <= spec.end_time() + 1e-9 {
        let pose = traj.pose_at(t);
        let take = match out.last() {
            None => true,
            Some(last) => maybe_keyframe(
                &pose,
                last,
                config.keyframe_translation,
                config.keyframe_rotation,
            ),
        };
        if take {
            out.push(pose);
        }
        t += scan_dt;
    }
    out
}

fn keyframe_scan(
    world: &World,
    pose: &Pose,
    rig: &SensorRig,
    rng: &mut ChaCha8Rng,
    leaf: f64,
) -> PointCloud {
    voxel_downsample(&raycast_scan(world, pose, rig, rng), leaf)
}

/// Map a prior session with the odometry front-end and seal submaps along
/// the way. Ground truth is returned for evaluation.
pub fn build_central(
    config: &RunConfig,
    scenario: Scenario,
) -> Result<(SessionStore, Vec<Pose>), PipelineError> {
    let world = generate_world(config.seed, scenario);
    let spec = central_trajectory(scenario);
    let traj = spec.compile();
    let rig = SensorRig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gt = sample_keyframes(&traj, &spec, config);
    if gt.is_empty() {
        return Err(PipelineError::NoKeyframes);
    }
    let mut store = SessionStore::new(SessionTag::Central);
    let mut map = IncrementalMapIndex::with_dedup(0.5 * config.map_leaf);
    let align_params = AlignParams::default();
    for (i, gt_pose) in gt.iter().enumerate() {
        let cloud = keyframe_scan(&world, gt_pose, &rig, &mut rng, config.keyframe_leaf);
        let (est, residual) = if i == 0 {
            (*gt_pose, 0.0)
        } else {
            let prev_est = store.keyframe(i - 1).pose;
            let predicted = prev_est.compose(&gt[i - 1].relative(gt_pose));
            let aligned = align_scan(&cloud, &predicted, &map, &align_params);
            let est = if aligned.valid && !aligned.degenerate {
                aligned.pose
            } else {
                predicted
            };
            (est, aligned.mean_residual.min(1.0))
        };
        let timestamp = gt_pose.timestamp.unwrap_or(0.0);
        let kf = Keyframe {
            id: i,
            cloud: cloud.clone(),
            pose: est.with_timestamp(timestamp),
            timestamp,
        };
        if i > 0 {
            let factor = emit_between(
                store.keyframe(i - 1),
                &kf,
                config.scan_match_sigma_t,
                config.scan_match_sigma_r,
                residual,
            );
            store.odometry_factors.push(factor);
        }
        store.add_keyframe(kf)?;
        store.add_to_pending(i);
        store.try_generate_submap(config);
        map.insert_cloud(&voxel_downsample(&cloud.transformed(&est), config.map_leaf));
    }
    store.flush_pending(config);
    Ok((store, gt))
}

/// Constant per-step odometry drift plus seeded jitter.
#[derive(Debug, Clone, Copy)]
pub struct DriftModel {
    /// Along-track translation bias per keyframe step, meters.
    pub translation_per_step: f64,
    /// Yaw bias per keyframe step, radians.
    pub yaw_per_step: f64,
    /// Uniform jitter half-width applied to both, same units.
    pub jitter: f64,
}

impl Default for DriftModel {
    fn default() -> Self {
        DriftModel {
            translation_per_step: 2e-3,
            yaw_per_step: 1e-4,
            jitter: 5e-4,
        }
    }
}

impl DriftModel {
    pub fn none() -> Self {
        DriftModel {
            translation_per_step: 0.0,
            yaw_per_step: 0.0,
            jitter: 0.0,
        }
    }

    fn perturb(&self, relative: &Pose, rng: &mut ChaCha8Rng) -> Pose {
        let dx = self.translation_per_step + rng.gen_range(-self.jitter..=self.jitter);
        let dyaw = self.yaw_per_step + rng.gen_range(-self.jitter..=self.jitter) * 0.1;
        relative.compose(&Pose::from_xyz_yaw(dx, 0.0, 0.0, dyaw))
    }
}

/// Knobs for a subsidiary localization run.
#[derive(Debug, Clone)]
pub struct LocalizeOptions {
    /// Coarse-guess offset (x, y, yaw) applied to the true start pose.
    pub init_offset: (f64, f64, f64),
    pub force_mode: Option<Mode>,
    /// Eq.-style multi-edge propagation vs direct single-edge baseline.
    pub propagation: bool,
    /// Attach preintegrated inertial factors.
    pub with_imu: bool,
    pub drift: DriftModel,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        LocalizeOptions {
            init_offset: (0.3, 0.2, 0.05),
            force_mode: None,
            propagation: true,
            with_imu: true,
            drift: DriftModel::default(),
        }
    }
}

/// Everything a subsidiary run produces.
pub struct RunArtifacts {
    pub est: Vec<Pose>,
    pub gt: Vec<Pose>,
    pub timeline: Vec<StepOutcome>,
    pub factor_counts: BTreeMap<&'static str, usize>,
    pub init: InitializationResult,
    pub ate: AteReport,
    pub timings: TimingReport,
    /// Central store after ILM commits.
    pub central: SessionStore,
}

/// Localize a subsidiary simulator session against a central store:
/// descriptor-based initialization, then the per-keyframe step loop.
pub fn localize_sim(
    config: &RunConfig,
    scenario: Scenario,
    central: SessionStore,
    opts: &LocalizeOptions,
) -> Result<RunArtifacts, PipelineError> {
    let world = generate_world(config.seed, scenario);
    let spec = subsidiary_trajectory(scenario);
    let traj = spec.compile();
    let rig = SensorRig::default();
    let mut scan_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut drift_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let gt = sample_keyframes(&traj, &spec, config);
    if gt.is_empty() {
        return Err(PipelineError::NoKeyframes);
    }
    let mut timings = TimingReport::new();

    // sensor data along the ground-truth trajectory
    let t0 = Instant::now();
    let scans: Vec<PointCloud> = gt
        .iter()
        .map(|p| keyframe_scan(&world, p, &rig, &mut scan_rng, config.keyframe_leaf))
        .collect();
    timings.record("raycast-total", t0.elapsed().as_secs_f64() * 1e3);
    let imu_samples: Vec<ImuSample> = if opts.with_imu {
        let gravity = Vector3::new(0.0, 0.0, -config.gravity);
        crate::simulator::synthesize_imu(&traj, &spec, &rig, &gravity, &mut scan_rng)
    } else {
        Vec::new()
    };

    // coarse-to-fine initialization against the prior session
    let query = Keyframe {
        id: 0,
        cloud: scans[0].clone(),
        pose: Pose::identity(),
        timestamp: gt[0].timestamp.unwrap_or(0.0),
    };
    let (ox, oy, oyaw) = opts.init_offset;
    let coarse = gt[0].compose(&Pose::from_xyz_yaw(ox, oy, 0.0, oyaw));
    let t0 = Instant::now();
    let init = descriptor::initialize_pose(&query, &coarse, &central, config)?;
    timings.record("initialization", t0.elapsed().as_secs_f64() * 1e3);

    let mut loc = Localizer::new(config.clone(), central);
    loc.force_mode = opts.force_mode;
    loc.propagation = opts.propagation;
    let v0 = traj.velocity_at(spec.start_time());
    loc.start(query, init.pose.with_timestamp(gt[0].timestamp.unwrap_or(0.0)), v0)?;

    let imu_noise = ImuNoise {
        gyro_density: config.gyro_noise_density,
        accel_density: config.accel_noise_density,
    };
    for i in 1..gt.len() {
        let t_prev = gt[i - 1].timestamp.unwrap_or(0.0);
        let t_curr = gt[i].timestamp.unwrap_or(0.0);
        let relative = opts.drift.perturb(&gt[i - 1].relative(&gt[i]), &mut drift_rng);
        let odometry = OdometryFactor {
            from: i - 1,
            to: i,
            relative,
            sqrt_info: crate::factorgraph::diag_sqrt_info6(
                config.scan_match_sigma_r,
                config.scan_match_sigma_t,
            ),
        };
        let preintegrated = if opts.with_imu {
            let span: Vec<ImuSample> = imu_samples
                .iter()
                .filter(|s| s.timestamp >= t_prev - 1e-9 && s.timestamp <= t_curr + 1e-9)
                .cloned()
                .collect();
            if span.len() >= 2 {
                Some(integrate(&span, ImuBias::zero(), &imu_noise)?)
            } else {
                None
            }
        } else {
            None
        };
        let keyframe = Keyframe {
            id: i,
            cloud: scans[i].clone(),
            pose: Pose::identity(),
            timestamp: t_curr,
        };
        let t0 = Instant::now();
        loc.step(StepInput {
            keyframe,
            odometry,
            preintegrated,
        })?;
        timings.record("jfgo-step", t0.elapsed().as_secs_f64() * 1e3);
    }
    loc.finish()?;

    let est = loc.trajectory();
    let ate = evaluate(&est, &gt, false)?;
    Ok(RunArtifacts {
        est,
        gt,
        timeline: loc.timeline.clone(),
        factor_counts: loc.factor_counts().clone(),
        init,
        ate,
        timings,
        central: loc.central,
    })
}

/// report.txt body: mode timeline, factor counts, window sizes, RMSEs.
pub fn render_report(artifacts: &RunArtifacts) -> String {
    let mut out = String::new();
    out.push_str("== mode timeline ==\n");
    for s in &artifacts.timeline {
        out.push_str(&format!(
            "k={} t={:.2} mode={} overlap={:.3} scan_match={} window={} solver_ok={}\n",
            s.index, s.timestamp, s.mode, s.overlap, s.scan_match_factors, s.window, s.solver_ok
        ));
    }
    out.push_str("\n== factor counts ==\n");
    for (kind, n) in &artifacts.factor_counts {
        out.push_str(&format!("{kind}: {n}\n"));
    }
    out.push_str("\n== window sizes ==\n");
    let rlm_windows: Vec<usize> = artifacts
        .timeline
        .iter()
        .filter(|s| s.mode == Mode::Rlm)
        .map(|s| s.window)
        .collect();
    let ilm_windows: Vec<usize> = artifacts
        .timeline
        .iter()
        .filter(|s| s.mode == Mode::Ilm)
        .map(|s| s.window)
        .collect();
    out.push_str(&format!(
        "rlm steps: {} (window max {:?})\nilm steps: {} (window max {:?})\n",
        rlm_windows.len(),
        rlm_windows.iter().max(),
        ilm_windows.len(),
        ilm_windows.iter().max()
    ));
    out.push_str("\n== accuracy ==\n");
    out.push_str(&format!("{}\n", artifacts.ate));
    out.push_str(&format!(
        "initialization: keyframe {} descriptor distance {} icp fitness {:.6}\n",
        artifacts.init.best_keyframe, artifacts.init.descriptor_distance, artifacts.init.icp_fitness
    ));
    out.push_str("\n== timing ==\n");
    if let Some(ms) = artifacts.timings.mean("jfgo-step") {
        out.push_str(&format!("jfgo mean per step: {ms:.2} ms\n"));
    }
    out.push_str(&format!("total: {:.1} ms\n", artifacts.timings.total()));
    out
}

/// Write `traj_est.tum`, `report.txt`, `timings.csv`, `trajectory.dat`.
pub fn write_run_outputs(dir: &Path, artifacts: &RunArtifacts) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    crate::eval::write_tum_file(&dir.join("traj_est.tum"), &artifacts.est)?;
    std::fs::write(dir.join("report.txt"), render_report(artifacts))?;
    let mut csv = Vec::new();
    artifacts.timings.write_csv(&mut csv)?;
    std::fs::write(dir.join("timings.csv"), csv)?;
    let mut dat = Vec::new();
    crate::eval::write_trajectory_dat(&mut dat, &artifacts.est, Some(&artifacts.gt))?;
    std::fs::write(dir.join("trajectory.dat"), dat)?;
    Ok(())
}
