//! Nonlinear least-squares back-end: variables on manifolds, factor
//! kinds (anchor prior, preintegration, between, scan-match, bias walk,
//! marginal prior), a damped Gauss-Newton solver and Schur-complement
//! marginalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, Vector3};
use thiserror::Error;

use crate::geometry::{hat, right_jacobian_inv, Pose};
use crate::imu::{self, ImuBias, NavState, PreintegratedDelta};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("factor references unknown variable {0}")]
    DanglingVariable(VarId),
    #[error("duplicate variable {0}")]
    DuplicateVariable(VarId),
    #[error("session {0:?} already has an anchor prior")]
    DuplicateAnchor(SessionTag),
    #[error("normal equations not positive definite after damping (lambda {lambda:.3e})")]
    SolverFailure { lambda: f64 },
    #[error("marginalization: factor on {0} spans outside the drop/dependent sets")]
    FactorOutsideBlanket(VarId),
    #[error("rotation log near pi during linearization")]
    NearSingular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SessionTag {
    Central,
    Subsidiary,
}

impl fmt::Display for SessionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionTag::Central => write!(f, "a"),
            SessionTag::Subsidiary => write!(f, "b"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    Pose,
    Velocity,
    Bias,
}

impl VarKind {
    pub fn dim(&self) -> usize {
        match self {
            VarKind::Pose => 6,
            VarKind::Velocity => 3,
            VarKind::Bias => 6,
        }
    }
}

/// Variable identifier: (session tag, kind, index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId {
    pub session: SessionTag,
    pub kind: VarKind,
    pub index: usize,
}

impl VarId {
    pub fn pose(session: SessionTag, index: usize) -> Self {
        VarId { session, kind: VarKind::Pose, index }
    }
    pub fn velocity(session: SessionTag, index: usize) -> Self {
        VarId { session, kind: VarKind::Velocity, index }
    }
    pub fn bias(session: SessionTag, index: usize) -> Self {
        VarId { session, kind: VarKind::Bias, index }
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            VarKind::Pose => "pose",
            VarKind::Velocity => "vel",
            VarKind::Bias => "bias",
        };
        write!(f, "{}:{}:{}", self.session, k, self.index)
    }
}

/// Variable value on its manifold.
#[derive(Debug, Clone, Copy)]
pub enum Value {
    Pose(Pose),
    Velocity(Vector3<f64>),
    Bias(ImuBias),
}

impl Value {
    pub fn kind(&self) -> VarKind {
        match self {
            Value::Pose(_) => VarKind::Pose,
            Value::Velocity(_) => VarKind::Velocity,
            Value::Bias(_) => VarKind::Bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind().dim()
    }

    pub fn as_pose(&self) -> &Pose {
        match self {
            Value::Pose(p) => p,
            _ => panic!("variable is not a pose"),
        }
    }

    pub fn as_velocity(&self) -> &Vector3<f64> {
        match self {
            Value::Velocity(v) => v,
            _ => panic!("variable is not a velocity"),
        }
    }

    pub fn as_bias(&self) -> &ImuBias {
        match self {
            Value::Bias(b) => b,
            _ => panic!("variable is not a bias"),
        }
    }

    /// Retraction by a tangent-space step.
    pub fn retract(&self, delta: &[f64]) -> Value {
        match self {
            Value::Pose(p) => {
                let dw = Vector3::new(delta[0], delta[1], delta[2]);
                let dt = Vector3::new(delta[3], delta[4], delta[5]);
                Value::Pose(p.retract(&dw, &dt))
            }
            Value::Velocity(v) => {
                Value::Velocity(v + Vector3::new(delta[0], delta[1], delta[2]))
            }
            Value::Bias(b) => Value::Bias(ImuBias {
                accel: b.accel + Vector3::new(delta[0], delta[1], delta[2]),
                gyro: b.gyro + Vector3::new(delta[3], delta[4], delta[5]),
            }),
        }
    }

    /// Tangent coordinates of `other` relative to `self` under the same
    /// retraction; errors near the rotation-log singularity.
    pub fn local_coordinates(&self, other: &Value) -> Result<DVector<f64>, GraphError> {
        match (self, other) {
            (Value::Pose(a), Value::Pose(b)) => {
                let (dw, dt) = a.local_coordinates(b).map_err(|_| GraphError::NearSingular)?;
                Ok(DVector::from_iterator(6, dw.iter().chain(dt.iter()).cloned()))
            }
            (Value::Velocity(a), Value::Velocity(b)) => {
                Ok(DVector::from_iterator(3, (b - a).iter().cloned()))
            }
            (Value::Bias(a), Value::Bias(b)) => {
                let da = b.accel - a.accel;
                let dg = b.gyro - a.gyro;
                Ok(DVector::from_iterator(6, da.iter().chain(dg.iter()).cloned()))
            }
            _ => panic!("kind mismatch in local_coordinates"),
        }
    }
}

/// Factor kinds. Each stores a whitening matrix `sqrt_info` such that the
/// factor's cost is 0.5 * || sqrt_info * raw_residual ||^2.
#[derive(Debug, Clone)]
pub enum Factor {
    /// Gauge-fixing / anchor prior on a pose.
    PriorPose {
        var: VarId,
        pose: Pose,
        sqrt_info: Matrix6<f64>,
        anchor: bool,
    },
    /// Relative-pose constraint (odometry or scan-match).
    BetweenPose {
        from: VarId,
        to: VarId,
        relative: Pose,
        sqrt_info: Matrix6<f64>,
        scan_match: bool,
    },
    /// IMU preintegration tying (pose_i, vel_i, bias_i, pose_j, vel_j).
    Preintegration {
        pose_i: VarId,
        vel_i: VarId,
        bias_i: VarId,
        pose_j: VarId,
        vel_j: VarId,
        delta: PreintegratedDelta,
        gravity: Vector3<f64>,
        sqrt_info: SMatrix<f64, 9, 9>,
    },
    /// Random-walk constraint between consecutive bias variables.
    BiasWalk {
        from: VarId,
        to: VarId,
        sqrt_info: Matrix6<f64>,
    },
    /// Dense Gaussian prior left behind by marginalization: cost around
    /// the stored linearization point is 0.5 x^T H x - b^T x in the
    /// stacked tangent coordinates x of `vars`.
    MarginalPrior {
        vars: Vec<VarId>,
        lin_points: Vec<Value>,
        sqrt_info: DMatrix<f64>,
        rhs: DVector<f64>,
    },
}

impl Factor {
    pub fn vars(&self) -> Vec<VarId> {
        match self {
            Factor::PriorPose { var, .. } => vec![*var],
            Factor::BetweenPose { from, to, .. } => vec![*from, *to],
            Factor::Preintegration {
                pose_i, vel_i, bias_i, pose_j, vel_j, ..
            } => vec![*pose_i, *vel_i, *bias_i, *pose_j, *vel_j],
            Factor::BiasWalk { from, to, .. } => vec![*from, *to],
            Factor::MarginalPrior { vars, .. } => vars.clone(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Factor::PriorPose { anchor: true, .. } => "anchor-prior",
            Factor::PriorPose { .. } => "prior",
            Factor::BetweenPose { scan_match: true, .. } => "scan-match",
            Factor::BetweenPose { .. } => "odometry-between",
            Factor::Preintegration { .. } => "preintegration",
            Factor::BiasWalk { .. } => "bias-walk",
            Factor::MarginalPrior { .. } => "marginal-prior",
        }
    }

    pub fn is_scan_match(&self) -> bool {
        matches!(self, Factor::BetweenPose { scan_match: true, .. })
    }

    pub fn dim(&self) -> usize {
        match self {
            Factor::PriorPose { .. } | Factor::BetweenPose { .. } | Factor::BiasWalk { .. } => 6,
            Factor::Preintegration { .. } => 9,
            Factor::MarginalPrior { sqrt_info, .. } => sqrt_info.nrows(),
        }
    }

    /// Whitened residual and per-variable whitened Jacobian blocks at the
    /// given values.
    pub fn linearize(
        &self,
        values: &BTreeMap<VarId, Value>,
    ) -> Result<(DVector<f64>, Vec<(VarId, DMatrix<f64>)>), GraphError> {
        match self {
            Factor::PriorPose { var, pose, sqrt_info, .. } => {
                let current = values
                    .get(var)
                    .ok_or(GraphError::DanglingVariable(*var))?
                    .as_pose();
                let r_rot = pose
                    .rotation
                    .inverse()
                    .compose(&current.rotation)
                    .log()
                    .map_err(|_| GraphError::NearSingular)?;
                let r_pos = current.translation - pose.translation;
                let mut raw = DVector::zeros(6);
                raw.fixed_rows_mut::<3>(0).copy_from(&r_rot);
                raw.fixed_rows_mut::<3>(3).copy_from(&r_pos);
                let mut jac = Matrix6::<f64>::zeros();
                jac.fixed_view_mut::<3, 3>(0, 0)
                    .copy_from(&right_jacobian_inv(&r_rot));
                jac.fixed_view_mut::<3, 3>(3, 3).copy_from(&Matrix3::identity());
                let wj = sqrt_info * jac;
                Ok((
                    DVector::from_iterator(6, (sqrt_info * raw).iter().cloned()),
                    vec![(*var, DMatrix::from_iterator(6, 6, wj.iter().cloned()))],
                ))
            }
            Factor::BetweenPose {
                from, to, relative, sqrt_info, ..
            } => {
                let ti = values
                    .get(from)
                    .ok_or(GraphError::DanglingVariable(*from))?
                    .as_pose();
                let tj = values
                    .get(to)
                    .ok_or(GraphError::DanglingVariable(*to))?
                    .as_pose();
                let ri = ti.rotation.matrix();
                let rit = ri.transpose();
                let rj = tj.rotation.matrix();
                let r_rot = relative
                    .rotation
                    .inverse()
                    .compose(&ti.rotation.inverse().compose(&tj.rotation))
                    .log()
                    .map_err(|_| GraphError::NearSingular)?;
                let dp = rit * (tj.translation - ti.translation);
                let r_pos = dp - relative.translation;
                let mut raw = DVector::zeros(6);
                raw.fixed_rows_mut::<3>(0).copy_from(&r_rot);
                raw.fixed_rows_mut::<3>(3).copy_from(&r_pos);
                let jr_inv = right_jacobian_inv(&r_rot);
                let mut ji = Matrix6::<f64>::zeros();
                ji.fixed_view_mut::<3, 3>(0, 0)
                    .copy_from(&(-jr_inv * (rj.transpose() * ri)));
                ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&hat(&dp));
                ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rit));
                let mut jj = Matrix6::<f64>::zeros();
                jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
                jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&rit);
                let wi = sqrt_info * ji;
                let wjj = sqrt_info * jj;
                Ok((
                    DVector::from_iterator(6, (sqrt_info * raw).iter().cloned()),
                    vec![
                        (*from, DMatrix::from_iterator(6, 6, wi.iter().cloned())),
                        (*to, DMatrix::from_iterator(6, 6, wjj.iter().cloned())),
                    ],
                ))
            }
            Factor::Preintegration {
                pose_i, vel_i, bias_i, pose_j, vel_j, delta, gravity, sqrt_info,
            } => {
                let si = NavState {
                    pose: *values
                        .get(pose_i)
                        .ok_or(GraphError::DanglingVariable(*pose_i))?
                        .as_pose(),
                    velocity: *values
                        .get(vel_i)
                        .ok_or(GraphError::DanglingVariable(*vel_i))?
                        .as_velocity(),
                    bias: *values
                        .get(bias_i)
                        .ok_or(GraphError::DanglingVariable(*bias_i))?
                        .as_bias(),
                };
                let sj = NavState {
                    pose: *values
                        .get(pose_j)
                        .ok_or(GraphError::DanglingVariable(*pose_j))?
                        .as_pose(),
                    velocity: *values
                        .get(vel_j)
                        .ok_or(GraphError::DanglingVariable(*vel_j))?
                        .as_velocity(),
                    bias: si.bias,
                };
                let (raw, jac) = imu::residual(delta, &si, &sj, gravity);
                let wr = sqrt_info * raw;
                let wpi = sqrt_info * jac.d_pose_i;
                let wvi = sqrt_info * jac.d_vel_i;
                let wbi = sqrt_info * jac.d_bias_i;
                let wpj = sqrt_info * jac.d_pose_j;
                let wvj = sqrt_info * jac.d_vel_j;
                Ok((
                    DVector::from_iterator(9, wr.iter().cloned()),
                    vec![
                        (*pose_i, DMatrix::from_iterator(9, 6, wpi.iter().cloned())),
                        (*vel_i, DMatrix::from_iterator(9, 3, wvi.iter().cloned())),
                        (*bias_i, DMatrix::from_iterator(9, 6, wbi.iter().cloned())),
                        (*pose_j, DMatrix::from_iterator(9, 6, wpj.iter().cloned())),
                        (*vel_j, DMatrix::from_iterator(9, 3, wvj.iter().cloned())),
                    ],
                ))
            }
            Factor::BiasWalk { from, to, sqrt_info } => {
                let bi = values
                    .get(from)
                    .ok_or(GraphError::DanglingVariable(*from))?
                    .as_bias();
                let bj = values
                    .get(to)
                    .ok_or(GraphError::DanglingVariable(*to))?
                    .as_bias();
                let mut raw = DVector::zeros(6);
                raw.fixed_rows_mut::<3>(0).copy_from(&(bj.accel - bi.accel));
                raw.fixed_rows_mut::<3>(3).copy_from(&(bj.gyro - bi.gyro));
                let wi = sqrt_info * (-Matrix6::<f64>::identity());
                let wj = *sqrt_info;
                Ok((
                    DVector::from_iterator(6, (sqrt_info * raw).iter().cloned()),
                    vec![
                        (*from, DMatrix::from_iterator(6, 6, wi.iter().cloned())),
                        (*to, DMatrix::from_iterator(6, 6, wj.iter().cloned())),
                    ],
                ))
            }
            Factor::MarginalPrior { vars, lin_points, sqrt_info, rhs } => {
                let mut x = DVector::zeros(sqrt_info.ncols());
                let mut blocks: Vec<(VarId, DMatrix<f64>)> = Vec::new();
                let mut col = 0usize;
                for (var, lin) in vars.iter().zip(lin_points.iter()) {
                    let current = values.get(var).ok_or(GraphError::DanglingVariable(*var))?;
                    let local = lin.local_coordinates(current)?;
                    let d = local.len();
                    x.rows_mut(col, d).copy_from(&local);
                    // Jacobian of local coords wrt retraction of current:
                    // Jr_inv for the rotation block, identity elsewhere
                    let mut jl = DMatrix::identity(d, d);
                    if let (Value::Pose(_), Value::Pose(_)) = (lin, current) {
                        let r_rot = Vector3::new(local[0], local[1], local[2]);
                        let jri = right_jacobian_inv(&r_rot);
                        for a in 0..3 {
                            for b in 0..3 {
                                jl[(a, b)] = jri[(a, b)];
                            }
                        }
                    }
                    blocks.push((*var, sqrt_info.columns(col, d) * jl));
                    col += d;
                }
                let r = sqrt_info * x - rhs;
                Ok((r, blocks))
            }
        }
    }
}

/// Diagonal whitening matrix from per-block sigmas (rotation block first).
pub fn diag_sqrt_info6(sigma_rot: f64, sigma_trans: f64) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = 1.0 / sigma_rot;
        m[(i + 3, i + 3)] = 1.0 / sigma_trans;
    }
    m
}

/// Square root of the information of a 9x9 covariance, with an eigenvalue
/// floor so freshly integrated (near-deterministic) deltas stay usable.
pub fn sqrt_info_from_covariance(cov: &SMatrix<f64, 9, 9>, floor: f64) -> SMatrix<f64, 9, 9> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut d = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..9 {
        d[(i, i)] = 1.0 / eig.eigenvalues[i].max(floor).sqrt();
    }
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

#[derive(Debug, Clone)]
pub struct OptimizeParams {
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        OptimizeParams {
            max_iterations: 20,
            relative_cost_tolerance: 1e-6,
            initial_lambda: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Two coupled per-session graphs over one variable/factor store, each
/// gauge-fixed by its own anchor prior, with a binary weight gating the
/// cross-session scan-match factors.
#[derive(Debug, Clone, Default)]
pub struct JointGraph {
    pub values: BTreeMap<VarId, Value>,
    pub factors: Vec<Factor>,
    anchors: BTreeMap<SessionTag, usize>,
    mode_weight: u8,
}

impl JointGraph {
    pub fn new() -> Self {
        JointGraph {
            values: BTreeMap::new(),
            factors: Vec::new(),
            anchors: BTreeMap::new(),
            mode_weight: 0,
        }
    }

    pub fn add_variable(&mut self, id: VarId, value: Value) -> Result<(), GraphError> {
        if self.values.contains_key(&id) {
            return Err(GraphError::DuplicateVariable(id));
        }
        self.values.insert(id, value);
        Ok(())
    }

    pub fn has_variable(&self, id: &VarId) -> bool {
        self.values.contains_key(id)
    }

    pub fn pose(&self, id: &VarId) -> &Pose {
        self.values[id].as_pose()
    }

    /// The per-session gauge prior. Exactly one per session graph.
    pub fn set_anchor(
        &mut self,
        session: SessionTag,
        var: VarId,
        pose: Pose,
        sigma: f64,
    ) -> Result<(), GraphError> {
        if self.anchors.contains_key(&session) {
            return Err(GraphError::DuplicateAnchor(session));
        }
        if !self.values.contains_key(&var) {
            return Err(GraphError::DanglingVariable(var));
        }
        self.anchors.insert(session, self.factors.len());
        self.factors.push(Factor::PriorPose {
            var,
            pose,
            sqrt_info: diag_sqrt_info6(sigma, sigma),
            anchor: true,
        });
        Ok(())
    }

    pub fn anchor_sigma(&self, session: SessionTag) -> Option<f64> {
        self.anchors.get(&session).map(|&i| match &self.factors[i] {
            Factor::PriorPose { sqrt_info, .. } => 1.0 / sqrt_info[(0, 0)],
            _ => unreachable!(),
        })
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<usize, GraphError> {
        for v in factor.vars() {
            if !self.values.contains_key(&v) {
                return Err(GraphError::DanglingVariable(v));
            }
        }
        self.factors.push(factor);
        Ok(self.factors.len() - 1)
    }

    /// Attach scan-match between-factors (they participate only when the
    /// mode weight is 1).
    pub fn attach_scan_match(&mut self, factors: Vec<Factor>) -> Result<(), GraphError> {
        for f in factors {
            debug_assert!(f.is_scan_match());
            self.add_factor(f)?;
        }
        Ok(())
    }

    pub fn set_mode_weight(&mut self, w: u8) {
        debug_assert!(w <= 1);
        self.mode_weight = w;
    }

    pub fn mode_weight(&self) -> u8 {
        self.mode_weight
    }

    pub fn remove_scan_match_factors(&mut self) {
        self.retain_factors(|f| !f.is_scan_match());
    }

    fn retain_factors<F: FnMut(&Factor) -> bool>(&mut self, mut keep: F) {
        let mut new_factors = Vec::with_capacity(self.factors.len());
        let mut new_anchors = BTreeMap::new();
        for (i, f) in self.factors.iter().enumerate() {
            if keep(f) {
                for (s, &ai) in &self.anchors {
                    if ai == i {
                        new_anchors.insert(*s, new_factors.len());
                    }
                }
                new_factors.push(f.clone());
            }
        }
        self.factors = new_factors;
        self.anchors = new_anchors;
    }

    fn active_factors(&self) -> impl Iterator<Item = &Factor> {
        let w = self.mode_weight;
        self.factors
            .iter()
            .filter(move |f| w == 1 || !f.is_scan_match())
    }

    pub fn cost(&self) -> Result<f64, GraphError> {
        let mut c = 0.0;
        for f in self.active_factors() {
            let (r, _) = f.linearize(&self.values)?;
            c += 0.5 * r.norm_squared();
        }
        Ok(c)
    }

    fn variable_offsets(&self) -> (BTreeMap<VarId, usize>, usize) {
        let mut offsets = BTreeMap::new();
        let mut total = 0usize;
        for (id, v) in &self.values {
            offsets.insert(*id, total);
            total += v.dim();
        }
        (offsets, total)
    }

    /// Damped Gauss-Newton on manifold. Cost never increases across
    /// accepted steps; stops on relative cost decrease below tolerance.
    pub fn optimize(&mut self, params: &OptimizeParams) -> Result<OptimizeReport, GraphError> {
        let (offsets, total) = self.variable_offsets();
        let mut lambda = params.initial_lambda;
        let initial_cost = self.cost()?;
        let mut cost = initial_cost;
        let mut converged = false;
        let mut iterations = 0;
        for it in 0..params.max_iterations {
            iterations = it + 1;
            let mut h = DMatrix::<f64>::zeros(total, total);
            let mut g = DVector::<f64>::zeros(total);
            for f in self.active_factors() {
                let (r, blocks) = f.linearize(&self.values)?;
                for (va, ja) in &blocks {
                    let oa = offsets[va];
                    let da = ja.ncols();
                    g.rows_mut(oa, da).gemv_tr(1.0, ja, &r, 1.0);
                    for (vb, jb) in &blocks {
                        let ob = offsets[vb];
                        let db = jb.ncols();
                        let prod = ja.transpose() * jb;
                        let mut view = h.view_mut((oa, ob), (da, db));
                        view += prod;
                    }
                }
            }
            // damped solve with retry on failure or cost increase
            let mut accepted = false;
            for _ in 0..10 {
                let mut damped = h.clone();
                for i in 0..total {
                    damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda = (lambda * 10.0).max(1e-10);
                    if lambda > 1e12 {
                        return Err(GraphError::SolverFailure { lambda });
                    }
                    continue;
                };
                let step = chol.solve(&(-&g));
                let mut candidate = self.values.clone();
                for (id, v) in candidate.iter_mut() {
                    let o = offsets[id];
                    let d = v.dim();
                    let delta: Vec<f64> = step.rows(o, d).iter().cloned().collect();
                    *v = v.retract(&delta);
                }
                let saved = std::mem::replace(&mut self.values, candidate);
                let new_cost = match self.cost() {
                    Ok(c) => c,
                    Err(e) => {
                        self.values = saved;
                        return Err(e);
                    }
                };
                if new_cost <= cost + 1e-15 {
                    let rel = if cost > 0.0 { (cost - new_cost) / cost } else { 0.0 };
                    cost = new_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if rel < params.relative_cost_tolerance {
                        converged = true;
                    }
                    break;
                }
                self.values = saved;
                lambda *= 10.0;
                if lambda > 1e12 {
                    return Err(GraphError::SolverFailure { lambda });
                }
            }
            if !accepted {
                // no downhill step found; treat current iterate as converged
                converged = true;
            }
            if converged {
                break;
            }
        }
        Ok(OptimizeReport {
            initial_cost,
            final_cost: cost,
            iterations,
            converged,
        })
    }

    /// Schur-complement marginalization of `drop_ids`. Linearizes every
    /// factor touching a dropped variable at the current values, eliminates
    /// the dropped block, removes those factors and variables, and installs
    /// a [`Factor::MarginalPrior`] on the dependent variables.
    pub fn marginalize(&mut self, drop_ids: &BTreeSet<VarId>) -> Result<(), GraphError> {
        if drop_ids.is_empty() {
            return Ok(());
        }
        for id in drop_ids {
            if !self.values.contains_key(id) {
                return Err(GraphError::DanglingVariable(*id));
            }
        }
        let w = self.mode_weight;
        // factors touching the dropped set; inactive scan-match factors on
        // dropped variables are discarded rather than absorbed
        let mut absorbed: Vec<usize> = Vec::new();
        let mut discarded: Vec<usize> = Vec::new();
        for (i, f) in self.factors.iter().enumerate() {
            if f.vars().iter().any(|v| drop_ids.contains(v)) {
                if w == 0 && f.is_scan_match() {
                    discarded.push(i);
                } else {
                    absorbed.push(i);
                }
            }
        }
        // dependent (retained) variables of the absorbed factors
        let mut alpha: BTreeSet<VarId> = BTreeSet::new();
        for &i in &absorbed {
            for v in self.factors[i].vars() {
                if !drop_ids.contains(&v) {
                    alpha.insert(v);
                }
            }
        }
        // ordering: alpha block first, then beta
        let mut offsets: BTreeMap<VarId, usize> = BTreeMap::new();
        let mut dim_a = 0usize;
        for v in &alpha {
            offsets.insert(*v, dim_a);
            dim_a += v.kind.dim();
        }
        let mut dim_b = 0usize;
        for v in drop_ids {
            offsets.insert(*v, dim_a + dim_b);
            dim_b += v.kind.dim();
        }
        let total = dim_a + dim_b;
        let mut h = DMatrix::<f64>::zeros(total, total);
        let mut b = DVector::<f64>::zeros(total);
        for &i in &absorbed {
            let (r, blocks) = self.factors[i].linearize(&self.values)?;
            for (va, ja) in &blocks {
                let oa = *offsets.get(va).ok_or(GraphError::FactorOutsideBlanket(*va))?;
                let da = ja.ncols();
                // b = -J^T r so that the prior's gradient matches H x - b
                b.rows_mut(oa, da).gemv_tr(-1.0, ja, &r, 1.0);
                for (vb, jb) in &blocks {
                    let ob = offsets[vb];
                    let db = jb.ncols();
                    let prod = ja.transpose() * jb;
                    let mut view = h.view_mut((oa, ob), (da, db));
                    view += prod;
                }
            }
        }
        let (h_hat, b_hat) = if dim_a == 0 {
            (DMatrix::zeros(0, 0), DVector::zeros(0))
        } else {
            let haa = h.view((0, 0), (dim_a, dim_a)).clone_owned();
            let hab = h.view((0, dim_a), (dim_a, dim_b)).clone_owned();
            let hba = h.view((dim_a, 0), (dim_b, dim_a)).clone_owned();
            let mut hbb = h.view((dim_a, dim_a), (dim_b, dim_b)).clone_owned();
            let ba = b.rows(0, dim_a).clone_owned();
            let bb = b.rows(dim_a, dim_b).clone_owned();
            let chol = match hbb.clone().cholesky() {
                Some(c) => c,
                None => {
                    // singular beta block: regularize and flag
                    log::warn!("marginalization: H_bb singular, regularizing with 1e-9 I");
                    for i in 0..dim_b {
                        hbb[(i, i)] += 1e-9;
                    }
                    hbb.clone()
                        .cholesky()
                        .ok_or(GraphError::SolverFailure { lambda: 1e-9 })?
                }
            };
            let hbb_inv_hba = chol.solve(&hba);
            let hbb_inv_bb = chol.solve(&bb);
            (&haa - &hab * hbb_inv_hba, ba - hab * hbb_inv_bb)
        };
        // drop absorbed/discarded factors and the beta variables
        let mut remove: BTreeSet<usize> = absorbed.iter().cloned().collect();
        remove.extend(discarded.iter().cloned());
        let remove_set = remove;
        let keep_flags: Vec<bool> = (0..self.factors.len())
            .map(|i| !remove_set.contains(&i))
            .collect();
        let mut idx = 0usize;
        self.retain_factors(|_| {
            let k = keep_flags[idx];
            idx += 1;
            k
        });
        for id in drop_ids {
            self.values.remove(id);
        }
        if dim_a > 0 {
            // symmetric PSD square root of H_hat; rhs solves L^T c = b_hat
            let sym = (&h_hat + h_hat.transpose()) * 0.5;
            let eig = sym.symmetric_eigen();
            let n = dim_a;
            let mut l = DMatrix::<f64>::zeros(n, n);
            let mut c = DVector::<f64>::zeros(n);
            let vt_b = eig.eigenvectors.transpose() * &b_hat;
            for i in 0..n {
                let lam = eig.eigenvalues[i].max(0.0);
                let s = lam.sqrt();
                for j in 0..n {
                    l[(i, j)] = s * eig.eigenvectors[(j, i)];
                }
                c[i] = if s > 1e-12 { vt_b[i] / s } else { 0.0 };
            }
            let vars: Vec<VarId> = alpha.iter().cloned().collect();
            let lin_points: Vec<Value> = vars.iter().map(|v| self.values[v]).collect();
            self.factors.push(Factor::MarginalPrior {
                vars,
                lin_points,
                sqrt_info: l,
                rhs: c,
            });
        }
        Ok(())
    }

    /// Debug dump: "VAR id kind values..." / "FACTOR kind ids... residual_norm".
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (id, v) in &self.values {
            match v {
                Value::Pose(p) => {
                    let q = crate::geometry::quat_xyzw(&p.rotation);
                    out.push_str(&format!(
                        "VAR {id} pose {} {} {} {} {} {} {}\n",
                        p.translation.x, p.translation.y, p.translation.z, q[0], q[1], q[2], q[3]
                    ));
                }
                Value::Velocity(v) => {
                    out.push_str(&format!("VAR {id} velocity {} {} {}\n", v.x, v.y, v.z));
                }
                Value::Bias(b) => {
                    out.push_str(&format!(
                        "VAR {id} bias {} {} {} {} {} {}\n",
                        b.accel.x, b.accel.y, b.accel.z, b.gyro.x, b.gyro.y, b.gyro.z
                    ));
                }
            }
        }
        for f in &self.factors {
            let rn = f
                .linearize(&self.values)
                .map(|(r, _)| r.norm())
                .unwrap_or(f64::NAN);
            let ids: Vec<String> = f.vars().iter().map(|v| v.to_string()).collect();
            out.push_str(&format!(
                "FACTOR {} {} {rn:.6e}\n",
                f.kind_name(),
                ids.join(" ")
            ));
        }
        out
    }
}
