//! IMU preintegration on manifold: relative rotation/velocity/position
//! deltas between keyframe timestamps, covariance propagation from noise
//! densities, first-order bias correction, and the 9-DoF residual with
//! analytic Jacobians for the factor graph.
//!
//! The delta is expressed in the frame of timestep i and does not bake in
//! gravity; gravity enters the residual.

use std::io::{BufRead, BufReader, Read};

use nalgebra::{Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::geometry::{hat, right_jacobian, right_jacobian_inv, Pose, Rotation};

#[derive(Debug, Error)]
pub enum ImuError {
    #[error("non-monotonic IMU timestamps: {prev} then {next}")]
    NonMonotonic { prev: f64, next: f64 },
    #[error("IMU step dt {dt} exceeds the 0.1 s limit")]
    StepTooLarge { dt: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad IMU csv line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// One IMU measurement in the body frame; acceleration is the specific
/// force as measured (gravity-inclusive).
#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    pub timestamp: f64,
    pub angular_velocity: Vector3<f64>,
    pub linear_acceleration: Vector3<f64>,
}

/// Gyro/accel white-noise densities used for covariance propagation.
#[derive(Debug, Clone, Copy)]
pub struct ImuNoise {
    pub gyro_density: f64,
    pub accel_density: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        ImuNoise {
            gyro_density: 1e-3,
            accel_density: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImuBias {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

impl ImuBias {
    pub fn zero() -> Self {
        ImuBias {
            accel: Vector3::zeros(),
            gyro: Vector3::zeros(),
        }
    }
}

/// Full navigation state of one keyframe.
#[derive(Debug, Clone, Copy)]
pub struct NavState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
}

impl NavState {
    pub fn stationary(pose: Pose) -> Self {
        NavState {
            pose,
            velocity: Vector3::zeros(),
            bias: ImuBias::zero(),
        }
    }
}

/// Accumulated relative motion between two keyframes, with the bias
/// linearization point, first-order bias Jacobians and the 9x9 covariance
/// of (delta-theta, delta-v, delta-p).
#[derive(Debug, Clone)]
pub struct PreintegratedDelta {
    pub delta_rotation: Rotation,
    pub delta_velocity: Vector3<f64>,
    pub delta_position: Vector3<f64>,
    pub dt: f64,
    pub bias: ImuBias,
    pub covariance: SMatrix<f64, 9, 9>,
    pub dr_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
}

impl PreintegratedDelta {
    pub fn identity(bias: ImuBias) -> Self {
        PreintegratedDelta {
            delta_rotation: Rotation::identity(),
            delta_velocity: Vector3::zeros(),
            delta_position: Vector3::zeros(),
            dt: 0.0,
            bias,
            covariance: SMatrix::zeros(),
            dr_dbg: Matrix3::zeros(),
            dv_dba: Matrix3::zeros(),
            dv_dbg: Matrix3::zeros(),
            dp_dba: Matrix3::zeros(),
            dp_dbg: Matrix3::zeros(),
        }
    }

    /// Deltas corrected to first order for a bias estimate that moved away
    /// from the linearization point.
    pub fn corrected(&self, bias: &ImuBias) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let dba = bias.accel - self.bias.accel;
        let dbg = bias.gyro - self.bias.gyro;
        let rot = self
            .delta_rotation
            .compose(&Rotation::exp(&(self.dr_dbg * dbg)));
        let vel = self.delta_velocity + self.dv_dba * dba + self.dv_dbg * dbg;
        let pos = self.delta_position + self.dp_dba * dba + self.dp_dbg * dbg;
        (rot, vel, pos)
    }

    /// Compose with a delta covering the immediately following interval.
    pub fn compose(&self, next: &PreintegratedDelta) -> PreintegratedDelta {
        let r01 = &self.delta_rotation;
        PreintegratedDelta {
            delta_rotation: r01.compose(&next.delta_rotation),
            delta_velocity: self.delta_velocity + r01.rotate(&next.delta_velocity),
            delta_position: self.delta_position
                + self.delta_velocity * next.dt
                + r01.rotate(&next.delta_position),
            dt: self.dt + next.dt,
            bias: self.bias,
            // composed covariance/bias Jacobians are not propagated here;
            // integrate over the full interval when they matter
            covariance: SMatrix::zeros(),
            dr_dbg: Matrix3::zeros(),
            dv_dba: Matrix3::zeros(),
            dv_dbg: Matrix3::zeros(),
            dp_dba: Matrix3::zeros(),
            dp_dbg: Matrix3::zeros(),
        }
    }

    /// Predict state j from state i (used as the odometry prediction).
    pub fn predict(&self, state_i: &NavState, gravity: &Vector3<f64>) -> NavState {
        let (dr, dv, dp) = self.corrected(&state_i.bias);
        let ri = &state_i.pose.rotation;
        let pose = Pose::new(
            ri.compose(&dr),
            state_i.pose.translation
                + state_i.velocity * self.dt
                + 0.5 * gravity * self.dt * self.dt
                + ri.rotate(&dp),
        );
        NavState {
            pose,
            velocity: state_i.velocity + gravity * self.dt + ri.rotate(&dv),
            bias: state_i.bias,
        }
    }
}

/// Midpoint preintegration of a bias-corrected sample stream.
///
/// Integrates between consecutive samples; `samples` must have strictly
/// increasing timestamps and per-step dt at most 0.1 s.
pub fn integrate(
    samples: &[ImuSample],
    bias: ImuBias,
    noise: &ImuNoise,
) -> Result<PreintegratedDelta, ImuError> {
    let mut out = PreintegratedDelta::identity(bias);
    if samples.len() < 2 {
        return Ok(out);
    }
    let mut cov = SMatrix::<f64, 9, 9>::zeros();
    for pair in samples.windows(2) {
        let (s0, s1) = (&pair[0], &pair[1]);
        let dt = s1.timestamp - s0.timestamp;
        if dt <= 0.0 {
            return Err(ImuError::NonMonotonic {
                prev: s0.timestamp,
                next: s1.timestamp,
            });
        }
        if dt > 0.1 {
            return Err(ImuError::StepTooLarge { dt });
        }
        let w = 0.5 * (s0.angular_velocity + s1.angular_velocity) - bias.gyro;
        let a = 0.5 * (s0.linear_acceleration + s1.linear_acceleration) - bias.accel;
        let wdt = w * dt;
        let step = Rotation::exp(&wdt);
        // rotate accelerometer terms by the mid-interval attitude so the
        // velocity/position updates are second-order accurate
        let rk = out
            .delta_rotation
            .compose(&Rotation::exp(&(0.5 * wdt)))
            .matrix();
        let step_t = step.matrix().transpose();
        let jr = right_jacobian(&wdt);
        let ahat = hat(&a);

        // covariance propagation, state order (dtheta, dv, dp)
        let mut a_mat = SMatrix::<f64, 9, 9>::identity();
        a_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_t);
        a_mat.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-rk * ahat * dt));
        a_mat
            .fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-0.5 * rk * ahat * dt * dt));
        a_mat
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt));
        let mut b_mat = SMatrix::<f64, 9, 6>::zeros();
        b_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        b_mat.fixed_view_mut::<3, 3>(3, 3).copy_from(&(rk * dt));
        b_mat
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(0.5 * rk * dt * dt));
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        let sg2 = noise.gyro_density * noise.gyro_density / dt;
        let sa2 = noise.accel_density * noise.accel_density / dt;
        for i in 0..3 {
            q[(i, i)] = sg2;
            q[(i + 3, i + 3)] = sa2;
        }
        cov = a_mat * cov * a_mat.transpose() + b_mat * q * b_mat.transpose();

        // bias Jacobians (first order)
        out.dp_dba += out.dv_dba * dt - 0.5 * rk * dt * dt;
        out.dp_dbg += out.dv_dbg * dt - 0.5 * rk * ahat * out.dr_dbg * dt * dt;
        out.dv_dba -= rk * dt;
        out.dv_dbg -= rk * ahat * out.dr_dbg * dt;
        out.dr_dbg = step_t * out.dr_dbg - jr * dt;

        // state
        out.delta_position += out.delta_velocity * dt + 0.5 * rk * a * dt * dt;
        out.delta_velocity += rk * a * dt;
        out.delta_rotation = out.delta_rotation.compose(&step);
        out.dt += dt;
    }
    out.covariance = cov;
    Ok(out)
}

/// Jacobian blocks of the preintegration residual. Pose local coordinates
/// are (dtheta, dp) with retraction `R exp(dtheta)`, `p + dp`; bias local
/// coordinates are (dba, dbg).
#[derive(Debug, Clone)]
pub struct ResidualJacobians {
    pub d_pose_i: SMatrix<f64, 9, 6>,
    pub d_vel_i: SMatrix<f64, 9, 3>,
    pub d_bias_i: SMatrix<f64, 9, 6>,
    pub d_pose_j: SMatrix<f64, 9, 6>,
    pub d_vel_j: SMatrix<f64, 9, 3>,
}

/// Preintegration residual, stacked (rotation log, position, velocity),
/// with first-order bias correction, plus analytic Jacobians.
pub fn residual(
    delta: &PreintegratedDelta,
    state_i: &NavState,
    state_j: &NavState,
    gravity: &Vector3<f64>,
) -> (SMatrix<f64, 9, 1>, ResidualJacobians) {
    let (dr_corr, dv_corr, dp_corr) = delta.corrected(&state_i.bias);
    let ri = state_i.pose.rotation.matrix();
    let rit = ri.transpose();
    let rj = state_j.pose.rotation.matrix();
    let dt = delta.dt;

    // rotation block
    let err_rot = dr_corr
        .inverse()
        .compose(&state_i.pose.rotation.inverse().compose(&state_j.pose.rotation));
    let r_rot = err_rot
        .log()
        .expect("preintegration rotation residual near pi; states inconsistent with the delta");

    // position block
    let u0 = rit
        * (state_j.pose.translation
            - state_i.pose.translation
            - state_i.velocity * dt
            - 0.5 * gravity * dt * dt);
    let r_pos = u0 - dp_corr;

    // velocity block
    let v0 = rit * (state_j.velocity - state_i.velocity - gravity * dt);
    let r_vel = v0 - dv_corr;

    let mut r = SMatrix::<f64, 9, 1>::zeros();
    r.fixed_view_mut::<3, 1>(0, 0).copy_from(&r_rot);
    r.fixed_view_mut::<3, 1>(3, 0).copy_from(&r_pos);
    r.fixed_view_mut::<3, 1>(6, 0).copy_from(&r_vel);

    let jr_inv = right_jacobian_inv(&r_rot);
    let dbg = state_i.bias.gyro - delta.bias.gyro;

    let mut d_pose_i = SMatrix::<f64, 9, 6>::zeros();
    let mut d_pose_j = SMatrix::<f64, 9, 6>::zeros();
    let mut d_vel_i = SMatrix::<f64, 9, 3>::zeros();
    let mut d_vel_j = SMatrix::<f64, 9, 3>::zeros();
    let mut d_bias_i = SMatrix::<f64, 9, 6>::zeros();

    // rotation rows
    d_pose_i
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jr_inv * (rj.transpose() * ri)));
    d_pose_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
    let exp_r = Rotation::exp(&r_rot).matrix();
    d_bias_i.fixed_view_mut::<3, 3>(0, 3).copy_from(
        &(-jr_inv * exp_r.transpose() * right_jacobian(&(delta.dr_dbg * dbg)) * delta.dr_dbg),
    );

    // position rows
    d_pose_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&hat(&u0));
    d_pose_i.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rit));
    d_pose_j.fixed_view_mut::<3, 3>(3, 3).copy_from(&rit);
    d_vel_i
        .fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-rit * dt));
    d_bias_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-delta.dp_dba));
    d_bias_i.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-delta.dp_dbg));

    // velocity rows
    d_pose_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&hat(&v0));
    d_vel_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-rit));
    d_vel_j.fixed_view_mut::<3, 3>(6, 0).copy_from(&rit);
    d_bias_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-delta.dv_dba));
    d_bias_i.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-delta.dv_dbg));

    (
        r,
        ResidualJacobians {
            d_pose_i,
            d_vel_i,
            d_bias_i,
            d_pose_j,
            d_vel_j,
        },
    )
}

/// Parse the "t,wx,wy,wz,ax,ay,az" CSV stream (SI units).
pub fn read_imu_csv<R: Read>(r: R) -> Result<Vec<ImuSample>, ImuError> {
    let mut out = Vec::new();
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
            .map_err(|e| ImuError::Format {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if vals.len() != 7 {
            return Err(ImuError::Format {
                line: i + 1,
                msg: format!("expected 7 fields, got {}", vals.len()),
            });
        }
        out.push(ImuSample {
            timestamp: vals[0],
            angular_velocity: Vector3::new(vals[1], vals[2], vals[3]),
            linear_acceleration: Vector3::new(vals[4], vals[5], vals[6]),
        });
    }
    Ok(out)
}

pub fn write_imu_csv<W: std::io::Write>(mut w: W, samples: &[ImuSample]) -> std::io::Result<()> {
    writeln!(w, "# t,wx,wy,wz,ax,ay,az")?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.timestamp,
            s.angular_velocity.x,
            s.angular_velocity.y,
            s.angular_velocity.z,
            s.linear_acceleration.x,
            s.linear_acceleration.y,
            s.linear_acceleration.z
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const G: f64 = 9.81;

    fn gravity() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -G)
    }

    #[test]
    fn zero_samples_identity() {
        let d = integrate(&[], ImuBias::zero(), &ImuNoise::default()).unwrap();
        assert_eq!(d.dt, 0.0);
        assert_eq!(d.delta_position, Vector3::zeros());
        assert_eq!(d.delta_velocity, Vector3::zeros());
        assert_eq!(d.delta_rotation.angle(), 0.0);
    }

    fn stationary_stream(duration: f64, hz: f64) -> Vec<ImuSample> {
        let n = (duration * hz) as usize;
        (0..=n)
            .map(|k| ImuSample {
                timestamp: k as f64 / hz,
                angular_velocity: Vector3::zeros(),
                linear_acceleration: Vector3::new(0.0, 0.0, G),
            })
            .collect()
    }

    #[test]
    fn stationary_residual_is_zero() {
        let d = integrate(&stationary_stream(1.0, 100.0), ImuBias::zero(), &ImuNoise::default())
            .unwrap();
        // measured specific force integrates to -g * dt in the delta
        assert!((d.delta_velocity - Vector3::new(0.0, 0.0, G * d.dt)).norm() < 1e-9);
        let si = NavState::stationary(Pose::identity());
        let sj = NavState::stationary(Pose::identity());
        let (r, _) = residual(&d, &si, &sj, &gravity());
        assert!(r.norm() < 1e-8, "residual {}", r.norm());
    }

    #[test]
    fn constant_yaw_rate_matches_closed_form() {
        let hz = 100.0;
        let n = (2.0 * hz) as usize;
        let samples: Vec<ImuSample> = (0..=n)
            .map(|k| ImuSample {
                timestamp: k as f64 / hz,
                angular_velocity: Vector3::new(0.0, 0.0, 0.5),
                linear_acceleration: Vector3::new(0.0, 0.0, G),
            })
            .collect();
        let d = integrate(&samples, ImuBias::zero(), &ImuNoise::default()).unwrap();
        let expected = Rotation::yaw(1.0);
        assert!(d.delta_rotation.inverse().compose(&expected).angle() < 1e-4);
    }

    #[test]
    fn non_monotonic_rejected() {
        let mut s = stationary_stream(0.1, 100.0);
        s[3].timestamp = s[2].timestamp;
        assert!(integrate(&s, ImuBias::zero(), &ImuNoise::default()).is_err());
    }

    /// Dense RK4 oracle on the exact kinematics, for a synthetic motion
    /// with analytic body rates and specific force.
    struct Motion {
        w: Vector3<f64>,
        a_body_amp: Vector3<f64>,
    }

    impl Motion {
        fn omega(&self, _t: f64) -> Vector3<f64> {
            self.w
        }
        fn specific_force(&self, t: f64) -> Vector3<f64> {
            // arbitrary smooth body-frame specific force
            Vector3::new(
                self.a_body_amp.x * (1.3 * t).sin(),
                self.a_body_amp.y * (0.7 * t).cos(),
                G + self.a_body_amp.z * (0.5 * t).sin(),
            )
        }
    }

    fn rk4_oracle(m: &Motion, duration: f64, steps: usize) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        // integrate dR/dt = R hat(w), dv = R f dt, dp = v dt in the i-frame
        let h = duration / steps as f64;
        let mut r = Rotation::identity();
        let mut v = Vector3::zeros();
        let mut p = Vector3::zeros();
        for k in 0..steps {
            let t = k as f64 * h;
            // rotation via exact exponential over the step (w constant here)
            let w = m.omega(t + 0.5 * h);
            // RK4 on v, p with frozen rotation interpolation
            let r_mid = r.compose(&Rotation::exp(&(w * 0.5 * h)));
            let r_end = r.compose(&Rotation::exp(&(w * h)));
            let f1 = r.rotate(&m.specific_force(t));
            let f2 = r_mid.rotate(&m.specific_force(t + 0.5 * h));
            let f3 = r_mid.rotate(&m.specific_force(t + 0.5 * h));
            let f4 = r_end.rotate(&m.specific_force(t + h));
            let dv = (f1 + 2.0 * f2 + 2.0 * f3 + f4) * (h / 6.0);
            let v1 = v;
            let v2 = v + 0.5 * dv;
            let v4 = v + dv;
            let dp = (v1 + 2.0 * v2 + 2.0 * v2 + v4) * (h / 6.0);
            v += dv;
            p += dp;
            r = r_end;
        }
        (r, v, p)
    }

    #[test]
    fn preintegration_matches_rk4_oracle() {
        let m = Motion {
            w: Vector3::new(0.1, -0.2, 0.4),
            a_body_amp: Vector3::new(0.5, 0.3, 0.2),
        };
        let hz = 200.0;
        let duration = 2.0;
        let n = (duration * hz) as usize;
        let samples: Vec<ImuSample> = (0..=n)
            .map(|k| {
                let t = k as f64 / hz;
                ImuSample {
                    timestamp: t,
                    angular_velocity: m.omega(t),
                    linear_acceleration: m.specific_force(t),
                }
            })
            .collect();
        let d = integrate(&samples, ImuBias::zero(), &ImuNoise::default()).unwrap();
        let (r_o, v_o, p_o) = rk4_oracle(&m, duration, 2000);
        assert!(
            d.delta_rotation.inverse().compose(&r_o).angle() < 1e-4,
            "rotation error {}",
            d.delta_rotation.inverse().compose(&r_o).angle()
        );
        assert!((d.delta_velocity - v_o).norm() < 1e-3);
        assert!(
            (d.delta_position - p_o).norm() < 1e-3,
            "position error {}",
            (d.delta_position - p_o).norm()
        );
    }

    #[test]
    fn composition_of_intervals() {
        let m = Motion {
            w: Vector3::new(0.3, 0.1, -0.2),
            a_body_amp: Vector3::new(0.4, 0.2, 0.1),
        };
        let hz = 100.0;
        let make = |t0: f64, t1: f64| -> Vec<ImuSample> {
            let n = ((t1 - t0) * hz).round() as usize;
            (0..=n)
                .map(|k| {
                    let t = t0 + k as f64 / hz;
                    ImuSample {
                        timestamp: t,
                        angular_velocity: m.omega(t),
                        linear_acceleration: m.specific_force(t),
                    }
                })
                .collect()
        };
        let d01 = integrate(&make(0.0, 1.0), ImuBias::zero(), &ImuNoise::default()).unwrap();
        let d12 = integrate(&make(1.0, 2.0), ImuBias::zero(), &ImuNoise::default()).unwrap();
        let d02 = integrate(&make(0.0, 2.0), ImuBias::zero(), &ImuNoise::default()).unwrap();
        let composed = d01.compose(&d12);
        assert!(composed.delta_rotation.inverse().compose(&d02.delta_rotation).angle() < 1e-6);
        assert!((composed.delta_position - d02.delta_position).norm() < 1e-5);
        assert!((composed.delta_velocity - d02.delta_velocity).norm() < 1e-5);
    }

    #[test]
    fn residual_zero_on_consistent_states() {
        let mut rng = StdRng::seed_from_u64(40);
        for _ in 0..10 {
            let m = Motion {
                w: Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
                a_body_amp: Vector3::new(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ),
            };
            let hz = 100.0;
            let n = 100usize;
            let samples: Vec<ImuSample> = (0..=n)
                .map(|k| {
                    let t = k as f64 / hz;
                    ImuSample {
                        timestamp: t,
                        angular_velocity: m.omega(t),
                        linear_acceleration: m.specific_force(t),
                    }
                })
                .collect();
            let d = integrate(&samples, ImuBias::zero(), &ImuNoise::default()).unwrap();
            let si = NavState {
                pose: Pose::from_xyz_yaw(1.0, 2.0, 0.5, 0.3),
                velocity: Vector3::new(0.2, -0.1, 0.05),
                bias: ImuBias::zero(),
            };
            let sj = d.predict(&si, &gravity());
            let (r, _) = residual(&d, &si, &sj, &gravity());
            assert!(r.norm() < 1e-8, "residual {}", r.norm());
        }
    }

    #[test]
    fn position_residual_linear_in_pj() {
        let d = integrate(&stationary_stream(0.5, 100.0), ImuBias::zero(), &ImuNoise::default())
            .unwrap();
        let si = NavState::stationary(Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.8));
        let sj0 = d.predict(&si, &gravity());
        let mut sj1 = sj0;
        sj1.pose.translation += Vector3::new(0.1, 0.0, 0.0);
        let (r0, _) = residual(&d, &si, &sj0, &gravity());
        let (r1, _) = residual(&d, &si, &sj1, &gravity());
        let diff = r1.fixed_view::<3, 1>(3, 0) - r0.fixed_view::<3, 1>(3, 0);
        let expected = si.pose.rotation.matrix().transpose() * Vector3::new(0.1, 0.0, 0.0);
        assert!((diff - expected).norm() < 1e-10);
    }

    fn random_states(rng: &mut StdRng) -> (PreintegratedDelta, NavState, NavState) {
        let m = Motion {
            w: Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            ),
            a_body_amp: Vector3::new(
                rng.gen_range(0.0..1.5),
                rng.gen_range(0.0..1.5),
                rng.gen_range(0.0..1.5),
            ),
        };
        let hz = 100.0;
        let samples: Vec<ImuSample> = (0..=50)
            .map(|k| {
                let t = k as f64 / hz;
                ImuSample {
                    timestamp: t,
                    angular_velocity: m.omega(t),
                    linear_acceleration: m.specific_force(t),
                }
            })
            .collect();
        let bias = ImuBias {
            accel: Vector3::new(
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            ),
            gyro: Vector3::new(
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
            ),
        };
        let d = integrate(&samples, bias, &ImuNoise::default()).unwrap();
        let mut si = NavState {
            pose: Pose::new(
                Rotation::exp(&Vector3::new(
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                )),
                Vector3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                ),
            ),
            velocity: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            bias,
        };
        // move the optimized bias slightly off the linearization point
        si.bias.accel += Vector3::new(0.01, -0.005, 0.003);
        si.bias.gyro += Vector3::new(0.002, 0.001, -0.003);
        let mut sj = d.predict(&si, &gravity());
        // perturb state j so the residual is nonzero
        sj.pose.translation += Vector3::new(
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        );
        sj.pose.rotation = sj.pose.rotation.compose(&Rotation::exp(&Vector3::new(
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
        )));
        sj.velocity += Vector3::new(
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        );
        (d, si, sj)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let g = gravity();
        let eps = 1e-6;
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..50 {
            let (d, si, sj) = random_states(&mut rng);
            let (r0, jac) = residual(&d, &si, &sj, &g);
            let _ = r0;
            let check = |col: usize, analytic: nalgebra::SVectorView<f64, 9>, perturb: &dyn Fn(f64) -> (NavState, NavState)| {
                let (sip, sjp) = perturb(eps);
                let (sim, sjm) = perturb(-eps);
                let (rp, _) = residual(&d, &sip, &sjp, &g);
                let (rm, _) = residual(&d, &sim, &sjm, &g);
                let fd = (rp - rm) / (2.0 * eps);
                let err = (fd - analytic.clone_owned()).norm();
                let scale = analytic.norm().max(fd.norm()).max(1.0);
                assert!(
                    err / scale < 1e-4,
                    "col {col}: fd {fd:?} vs analytic {:?}",
                    analytic
                );
            };
            for k in 0..3 {
                let mut dv = Vector3::zeros();
                dv[k] = 1.0;
                // pose_i rotation
                check(k, jac.d_pose_i.column(k), &|e| {
                    let mut s = si;
                    s.pose = s.pose.retract(&(dv * e), &Vector3::zeros());
                    (s, sj)
                });
                // pose_i translation
                check(k + 3, jac.d_pose_i.column(k + 3), &|e| {
                    let mut s = si;
                    s.pose = s.pose.retract(&Vector3::zeros(), &(dv * e));
                    (s, sj)
                });
                // pose_j rotation / translation
                check(k, jac.d_pose_j.column(k), &|e| {
                    let mut s = sj;
                    s.pose = s.pose.retract(&(dv * e), &Vector3::zeros());
                    (si, s)
                });
                check(k + 3, jac.d_pose_j.column(k + 3), &|e| {
                    let mut s = sj;
                    s.pose = s.pose.retract(&Vector3::zeros(), &(dv * e));
                    (si, s)
                });
                // velocities
                check(k, jac.d_vel_i.column(k), &|e| {
                    let mut s = si;
                    s.velocity += dv * e;
                    (s, sj)
                });
                check(k, jac.d_vel_j.column(k), &|e| {
                    let mut s = sj;
                    s.velocity += dv * e;
                    (si, s)
                });
                // biases (accel then gyro)
                check(k, jac.d_bias_i.column(k), &|e| {
                    let mut s = si;
                    s.bias.accel += dv * e;
                    (s, sj)
                });
                check(k + 3, jac.d_bias_i.column(k + 3), &|e| {
                    let mut s = si;
                    s.bias.gyro += dv * e;
                    (s, sj)
                });
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let samples = stationary_stream(0.05, 100.0);
        let mut buf = Vec::new();
        write_imu_csv(&mut buf, &samples).unwrap();
        let back = read_imu_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), samples.len());
        assert!((back[2].linear_acceleration - samples[2].linear_acceleration).norm() < 1e-12);
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let d = integrate(&stationary_stream(1.0, 100.0), ImuBias::zero(), &ImuNoise::default())
            .unwrap();
        let c = d.covariance;
        assert!((c - c.transpose()).norm() < 1e-15);
        let eig = nalgebra::SymmetricEigen::new(c);
        assert!(eig.eigenvalues.min() > -1e-15);
    }
}
