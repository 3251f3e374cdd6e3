//! Synthetic ground-truth world and sensor generation: planar-patch
//! environments, C2 spline trajectories, raycast LiDAR scans and analytic
//! IMU synthesis. Fully deterministic under a fixed seed.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{Pose, Rotation};
use crate::imu::ImuSample;
use crate::pointcloud::PointCloud;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("unknown scenario: {0}")]
    UnknownScenario(String),
}

/// Finite rectangular patch: center, two in-plane unit axes and half
/// extents along them.
#[derive(Debug, Clone)]
pub struct Patch {
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Patch {
    pub fn normal(&self) -> Vector3<f64> {
        self.axis_u.cross(&self.axis_v)
    }

    /// Distance along the ray to the hit, if any.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.normal();
        let denom = dir.dot(&n);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.center - origin).dot(&n) / denom;
        if t <= 1e-6 {
            return None;
        }
        let hit = origin + dir * t;
        let local = hit - self.center;
        if local.dot(&self.axis_u).abs() <= self.half_u && local.dot(&self.axis_v).abs() <= self.half_v {
            Some(t)
        } else {
            None
        }
    }
}

/// Deterministic patch world.
#[derive(Debug, Clone)]
pub struct World {
    pub patches: Vec<Patch>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Corridor,
    CampusLoop,
    TwoSessionOverlap,
}

impl std::str::FromStr for Scenario {
    type Err = SimulatorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "corridor" => Ok(Scenario::Corridor),
            "campus-loop" => Ok(Scenario::CampusLoop),
            "two-session-overlap" => Ok(Scenario::TwoSessionOverlap),
            other => Err(SimulatorError::UnknownScenario(other.to_string())),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::Corridor => "corridor",
            Scenario::CampusLoop => "campus-loop",
            Scenario::TwoSessionOverlap => "two-session-overlap",
        };
        write!(f, "{s}")
    }
}

fn wall_x(x0: f64, x1: f64, y: f64, z0: f64, z1: f64) -> Patch {
    // wall parallel to the x axis
    Patch {
        center: Vector3::new(0.5 * (x0 + x1), y, 0.5 * (z0 + z1)),
        axis_u: Vector3::x(),
        axis_v: Vector3::z(),
        half_u: 0.5 * (x1 - x0),
        half_v: 0.5 * (z1 - z0),
    }
}

fn wall_y(y0: f64, y1: f64, x: f64, z0: f64, z1: f64) -> Patch {
    Patch {
        center: Vector3::new(x, 0.5 * (y0 + y1), 0.5 * (z0 + z1)),
        axis_u: Vector3::y(),
        axis_v: Vector3::z(),
        half_u: 0.5 * (y1 - y0),
        half_v: 0.5 * (z1 - z0),
    }
}

fn floor(x0: f64, x1: f64, y0: f64, y1: f64) -> Patch {
    Patch {
        center: Vector3::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.0),
        axis_u: Vector3::x(),
        axis_v: Vector3::y(),
        half_u: 0.5 * (x1 - x0),
        half_v: 0.5 * (y1 - y0),
    }
}

fn box_at(cx: f64, cy: f64, half: f64, height: f64, out: &mut Vec<Patch>) {
    out.push(wall_x(cx - half, cx + half, cy - half, 0.0, height));
    out.push(wall_x(cx - half, cx + half, cy + half, 0.0, height));
    out.push(wall_y(cy - half, cy + half, cx - half, 0.0, height));
    out.push(wall_y(cy - half, cy + half, cx + half, 0.0, height));
}

fn corridor_patches(x0: f64, x1: f64, half_width: f64, out: &mut Vec<Patch>) {
    out.push(wall_x(x0, x1, -half_width, 0.0, 4.0));
    out.push(wall_x(x0, x1, half_width, 0.0, 4.0));
    out.push(floor(x0, x1, -half_width, half_width));
    // pillars alternating along the corridor so x is observable and
    // descriptors vary with position
    let mut x = x0 + 5.0;
    let mut side = 1.0;
    while x < x1 - 2.0 {
        box_at(x, side * (half_width - 1.2), 0.5, 2.5, out);
        side = -side;
        x += 9.0;
    }
}

fn loop_patches(half: f64, out: &mut Vec<Patch>) {
    // square room with outer walls and interior boxes
    out.push(wall_x(-half, half, -half, 0.0, 4.0));
    out.push(wall_x(-half, half, half, 0.0, 4.0));
    out.push(wall_y(-half, half, -half, 0.0, 4.0));
    out.push(wall_y(-half, half, half, 0.0, 4.0));
    out.push(floor(-half, half, -half, half));
    let step = half * 0.66;
    for &cx in &[-step, 0.0, step] {
        for &cy in &[-step, 0.0, step] {
            if cx == 0.0 && cy == 0.0 {
                box_at(0.0, 0.0, 3.0, 3.5, out);
            } else {
                box_at(cx + 0.07 * cy, cy - 0.05 * cx, 1.0, 3.0, out);
            }
        }
    }
}

/// Build the named scenario world. Same seed, same world.
pub fn generate_world(seed: u64, scenario: Scenario) -> World {
    let mut patches = Vec::new();
    match scenario {
        Scenario::Corridor => {
            corridor_patches(-5.0, 215.0, 4.0, &mut patches);
        }
        Scenario::CampusLoop => {
            loop_patches(35.0, &mut patches);
        }
        Scenario::TwoSessionOverlap => {
            // shared region: the loop; subsidiary-only region: a corridor
            // leaving the loop through +x
            loop_patches(35.0, &mut patches);
            corridor_patches(35.0, 100.0, 4.0, &mut patches);
        }
    }
    World { patches, seed }
}

/// Waypoint trajectory with natural-cubic-spline interpolation on
/// position and (unwrapped) yaw; orientation is yaw-only, which keeps the
/// spline C2 and the body rates analytic.
#[derive(Debug, Clone)]
pub struct TrajectorySpec {
    /// (time, position, unwrapped yaw)
    pub waypoints: Vec<(f64, Vector3<f64>, f64)>,
}

impl TrajectorySpec {
    pub fn duration(&self) -> f64 {
        self.waypoints.last().unwrap().0 - self.waypoints[0].0
    }

    pub fn start_time(&self) -> f64 {
        self.waypoints[0].0
    }

    pub fn end_time(&self) -> f64 {
        self.waypoints.last().unwrap().0
    }

    pub fn compile(&self) -> Trajectory {
        let ts: Vec<f64> = self.waypoints.iter().map(|w| w.0).collect();
        let x = CubicSpline::natural(&ts, &self.waypoints.iter().map(|w| w.1.x).collect::<Vec<_>>());
        let y = CubicSpline::natural(&ts, &self.waypoints.iter().map(|w| w.1.y).collect::<Vec<_>>());
        let z = CubicSpline::natural(&ts, &self.waypoints.iter().map(|w| w.1.z).collect::<Vec<_>>());
        let yaw = CubicSpline::natural(&ts, &self.waypoints.iter().map(|w| w.2).collect::<Vec<_>>());
        Trajectory { x, y, z, yaw }
    }
}

/// Natural cubic spline over strictly increasing knots.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    ts: Vec<f64>,
    ys: Vec<f64>,
    /// second derivatives at the knots
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn natural(ts: &[f64], ys: &[f64]) -> Self {
        let n = ts.len();
        assert!(n >= 2, "spline needs at least two knots");
        assert!(ts.windows(2).all(|w| w[1] > w[0]), "knot times must increase");
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal solve (Thomas algorithm) for interior second derivatives
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            let mut c = vec![0.0; n];
            let mut d = vec![0.0; n];
            for i in 1..n - 1 {
                let h0 = ts[i] - ts[i - 1];
                let h1 = ts[i + 1] - ts[i];
                a[i] = h0;
                b[i] = 2.0 * (h0 + h1);
                c[i] = h1;
                d[i] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
            }
            for i in 2..n - 1 {
                let w = a[i] / b[i - 1];
                b[i] -= w * c[i - 1];
                d[i] -= w * d[i - 1];
            }
            m[n - 2] = d[n - 2] / b[n - 2];
            for i in (1..n - 2).rev() {
                m[i] = (d[i] - c[i] * m[i + 1]) / b[i];
            }
        }
        CubicSpline {
            ts: ts.to_vec(),
            ys: ys.to_vec(),
            m,
        }
    }

    fn segment(&self, t: f64) -> usize {
        if t <= self.ts[0] {
            return 0;
        }
        if t >= self.ts[self.ts.len() - 1] {
            return self.ts.len() - 2;
        }
        self.ts.partition_point(|&k| k <= t) - 1
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.ts[i + 1] - self.ts[i];
        let a = (self.ts[i + 1] - t) / h;
        let b = (t - self.ts[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    pub fn deriv1(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.ts[i + 1] - self.ts[i];
        let a = (self.ts[i + 1] - t) / h;
        let b = (t - self.ts[i]) / h;
        (self.ys[i + 1] - self.ys[i]) / h
            + ((3.0 * b * b - 1.0) * self.m[i + 1] - (3.0 * a * a - 1.0) * self.m[i]) * h / 6.0
    }

    pub fn deriv2(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.ts[i + 1] - self.ts[i];
        let a = (self.ts[i + 1] - t) / h;
        let b = (t - self.ts[i]) / h;
        a * self.m[i] + b * self.m[i + 1]
    }
}

/// Compiled C2 trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    x: CubicSpline,
    y: CubicSpline,
    z: CubicSpline,
    yaw: CubicSpline,
}

impl Trajectory {
    pub fn pose_at(&self, t: f64) -> Pose {
        Pose::new(
            Rotation::yaw(self.yaw.eval(t)),
            Vector3::new(self.x.eval(t), self.y.eval(t), self.z.eval(t)),
        )
        .with_timestamp(t)
    }

    pub fn velocity_at(&self, t: f64) -> Vector3<f64> {
        Vector3::new(self.x.deriv1(t), self.y.deriv1(t), self.z.deriv1(t))
    }

    pub fn acceleration_at(&self, t: f64) -> Vector3<f64> {
        Vector3::new(self.x.deriv2(t), self.y.deriv2(t), self.z.deriv2(t))
    }

    /// Analytic body rates: angular velocity and specific force (measured
    /// acceleration, gravity-inclusive) in the body frame.
    pub fn body_rates(&self, t: f64, gravity: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let yaw_rate = self.yaw.deriv1(t);
        let gyro = Vector3::new(0.0, 0.0, yaw_rate); // yaw-only orientation
        let r = Rotation::yaw(self.yaw.eval(t));
        let accel = r.inverse().rotate(&(self.acceleration_at(t) - gravity));
        (gyro, accel)
    }
}

/// LiDAR + IMU rig description.
#[derive(Debug, Clone)]
pub struct SensorRig {
    pub lidar_channels: usize,
    pub lidar_azimuth_steps: usize,
    pub lidar_vertical_fov: f64,
    pub lidar_max_range: f64,
    pub lidar_rate: f64,
    pub lidar_noise_sigma: f64,
    pub imu_rate: f64,
    pub imu_gyro_density: f64,
    pub imu_accel_density: f64,
    pub imu_bias_instability: f64,
    pub extrinsic: Pose,
}

impl Default for SensorRig {
    fn default() -> Self {
        SensorRig {
            lidar_channels: 16,
            lidar_azimuth_steps: 720,
            lidar_vertical_fov: 30.0_f64.to_radians(),
            lidar_max_range: 50.0,
            lidar_rate: 10.0,
            lidar_noise_sigma: 0.0,
            imu_rate: 100.0,
            imu_gyro_density: 0.0,
            imu_accel_density: 0.0,
            imu_bias_instability: 0.0,
            extrinsic: Pose::identity(),
        }
    }
}

/// Raycast one scan from a body pose. Points are returned in the sensor
/// frame with per-point times spread across the sweep (relative to scan
/// start).
pub fn raycast_scan(world: &World, pose: &Pose, rig: &SensorRig, rng: &mut ChaCha8Rng) -> PointCloud {
    let sensor_pose = pose.compose(&rig.extrinsic);
    let origin = sensor_pose.translation;
    let sweep = 1.0 / rig.lidar_rate;
    let mut points = Vec::new();
    let mut times = Vec::new();
    for az_i in 0..rig.lidar_azimuth_steps {
        let az = az_i as f64 / rig.lidar_azimuth_steps as f64 * std::f64::consts::TAU;
        let t_rel = az_i as f64 / rig.lidar_azimuth_steps as f64 * sweep;
        for ch in 0..rig.lidar_channels {
            let el = if rig.lidar_channels > 1 {
                -0.5 * rig.lidar_vertical_fov
                    + ch as f64 / (rig.lidar_channels - 1) as f64 * rig.lidar_vertical_fov
            } else {
                0.0
            };
            let dir_body = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let dir_world = sensor_pose.rotation.rotate(&dir_body);
            let mut best: Option<f64> = None;
            for patch in &world.patches {
                if let Some(t) = patch.raycast(&origin, &dir_world) {
                    if t <= rig.lidar_max_range && best.map(|b| t < b).unwrap_or(true) {
                        best = Some(t);
                    }
                }
            }
            if let Some(mut range) = best {
                if rig.lidar_noise_sigma > 0.0 {
                    range += gaussian(rng) * rig.lidar_noise_sigma;
                }
                points.push(dir_body * range);
                times.push(t_rel);
            }
        }
    }
    PointCloud {
        points,
        intensity: None,
        times: Some(times),
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sample analytic body rates at the IMU rate, adding white noise and a
/// slowly varying random-walk bias when the rig asks for them.
pub fn synthesize_imu(
    traj: &Trajectory,
    spec: &TrajectorySpec,
    rig: &SensorRig,
    gravity: &Vector3<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<ImuSample> {
    let dt = 1.0 / rig.imu_rate;
    let n = (spec.duration() / dt).round() as usize;
    let sqrt_rate = rig.imu_rate.sqrt();
    let mut gyro_bias = Vector3::zeros();
    let mut accel_bias = Vector3::zeros();
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = spec.start_time() + k as f64 * dt;
        let (mut w, mut a) = traj.body_rates(t, gravity);
        if rig.imu_gyro_density > 0.0 {
            for i in 0..3 {
                w[i] += gaussian(rng) * rig.imu_gyro_density * sqrt_rate;
            }
        }
        if rig.imu_accel_density > 0.0 {
            for i in 0..3 {
                a[i] += gaussian(rng) * rig.imu_accel_density * sqrt_rate;
            }
        }
        if rig.imu_bias_instability > 0.0 {
            for i in 0..3 {
                gyro_bias[i] += gaussian(rng) * rig.imu_bias_instability * dt.sqrt();
                accel_bias[i] += gaussian(rng) * rig.imu_bias_instability * 10.0 * dt.sqrt();
            }
            w += gyro_bias;
            a += accel_bias;
        }
        out.push(ImuSample {
            timestamp: t,
            angular_velocity: w,
            linear_acceleration: a,
        });
    }
    out
}

const SENSOR_HEIGHT: f64 = 1.5;

/// Ground-truth trajectory of the central (mapping) session.
pub fn central_trajectory(scenario: Scenario) -> TrajectorySpec {
    match scenario {
        Scenario::Corridor => {
            // ~200 m straight run at ~2 m/s
            let mut waypoints = Vec::new();
            let n = 21;
            for i in 0..n {
                let s = i as f64 / (n - 1) as f64;
                let x = 200.0 * s;
                let wiggle = 0.8 * (s * 12.0).sin();
                waypoints.push((100.0 * s, Vector3::new(x, wiggle, SENSOR_HEIGHT), 0.0));
            }
            TrajectorySpec { waypoints }
        }
        Scenario::CampusLoop | Scenario::TwoSessionOverlap => loop_trajectory(0.0, 1.0),
    }
}

/// Square loop inside the campus room, one full lap (~200 m).
fn loop_trajectory(t0: f64, laps: f64) -> TrajectorySpec {
    let r = 25.0;
    let speed = 2.0;
    let n_per_lap = 40usize;
    let n = (n_per_lap as f64 * laps).round() as usize;
    let circumference = std::f64::consts::TAU * r;
    let mut waypoints = Vec::new();
    for i in 0..=n {
        let frac = i as f64 / n_per_lap as f64;
        let ang = frac * std::f64::consts::TAU;
        let t = t0 + frac * circumference / speed;
        waypoints.push((
            t,
            Vector3::new(r * ang.cos(), r * ang.sin(), SENSOR_HEIGHT),
            ang + std::f64::consts::FRAC_PI_2,
        ));
    }
    TrajectorySpec { waypoints }
}

/// Subsidiary trajectory. For the overlap scenario it starts on the
/// mapped loop, leaves through the corridor (unmapped by the central
/// session) and returns into the loop.
pub fn subsidiary_trajectory(scenario: Scenario) -> TrajectorySpec {
    match scenario {
        Scenario::Corridor => {
            let mut waypoints = Vec::new();
            let n = 21;
            for i in 0..n {
                let s = i as f64 / (n - 1) as f64;
                let x = 200.0 * s;
                let wiggle = -0.5 * (s * 9.0).sin();
                waypoints.push((100.0 * s, Vector3::new(x, wiggle, SENSOR_HEIGHT), 0.0));
            }
            TrajectorySpec { waypoints }
        }
        Scenario::CampusLoop => {
            // second lap, slightly offset radius
            let mut spec = loop_trajectory(0.0, 1.0);
            for (_, p, _) in spec.waypoints.iter_mut() {
                let r = (p.x * p.x + p.y * p.y).sqrt();
                if r > 1.0 {
                    let scale = (r - 0.8) / r;
                    p.x *= scale;
                    p.y *= scale;
                }
            }
            spec
        }
        Scenario::TwoSessionOverlap => {
            let speed = 2.0;
            let mut waypoints: Vec<(f64, Vector3<f64>, f64)> = Vec::new();
            let mut t = 0.0;
            let push = |t: &mut f64, prev: Option<Vector3<f64>>, p: Vector3<f64>, yaw: f64,
                            out: &mut Vec<(f64, Vector3<f64>, f64)>| {
                if let Some(q) = prev {
                    *t += (p - q).norm() / speed;
                }
                out.push((*t, p, yaw));
            };
            // start on the loop heading +x along y=0, through the corridor
            let mut prev = None;
            let leg1 = [
                (Vector3::new(20.0, -15.0, SENSOR_HEIGHT), 0.6),
                (Vector3::new(25.0, -5.0, SENSOR_HEIGHT), 0.9),
                (Vector3::new(25.0, 5.0, SENSOR_HEIGHT), std::f64::consts::FRAC_PI_2),
                (Vector3::new(27.0, 12.0, SENSOR_HEIGHT), 0.4),
            ];
            for (p, yaw) in leg1 {
                push(&mut t, prev, p, yaw, &mut waypoints);
                prev = Some(p);
            }
            // head to the corridor mouth and out to x=90
            let out_xs = [34.0, 45.0, 58.0, 72.0, 88.0];
            for (i, &x) in out_xs.iter().enumerate() {
                let y = if i % 2 == 0 { 0.5 } else { -0.5 };
                let p = Vector3::new(x, y, SENSOR_HEIGHT);
                push(&mut t, prev, p, 0.0, &mut waypoints);
                prev = Some(p);
            }
            // turn around (yaw unwraps upward) and come back into the loop
            let back = [
                (Vector3::new(92.0, 1.5, SENSOR_HEIGHT), std::f64::consts::FRAC_PI_2),
                (Vector3::new(88.0, 0.0, SENSOR_HEIGHT), std::f64::consts::PI),
                (Vector3::new(70.0, -0.5, SENSOR_HEIGHT), std::f64::consts::PI),
                (Vector3::new(52.0, 0.5, SENSOR_HEIGHT), std::f64::consts::PI),
                (Vector3::new(34.0, 0.0, SENSOR_HEIGHT), std::f64::consts::PI),
                (Vector3::new(22.0, 3.0, SENSOR_HEIGHT), std::f64::consts::PI * 1.2),
                (Vector3::new(12.0, -6.0, SENSOR_HEIGHT), std::f64::consts::PI * 1.4),
            ];
            for (p, yaw) in back {
                push(&mut t, prev, p, yaw, &mut waypoints);
                prev = Some(p);
            }
            TrajectorySpec { waypoints }
        }
    }
}
