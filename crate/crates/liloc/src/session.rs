//! Session orchestration: per-session stores (pose graph, keyframe
//! database, submaps, kd-tree indices), adaptive submap sealing,
//! fitness-weighted scan-match propagation, overlap-based mode switching,
//! and the per-keyframe localization step loop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::config::RunConfig;
use crate::factorgraph::{
    diag_sqrt_info6, sqrt_info_from_covariance, Factor, JointGraph, OptimizeParams, SessionTag,
    Value, VarId,
};
use crate::geometry::{quat_xyzw, rotation_from_xyzw, Pose};
use crate::imu::PreintegratedDelta;
use crate::odometry::{Keyframe, OdometryFactor};
use crate::pointcloud::{
    fitness_score, ndt, voxel_downsample, KdTree3, PointCloud, RegistrationParams,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("point cloud error: {0}")]
    PointCloud(#[from] crate::pointcloud::PointCloudError),
    #[error("graph error: {0}")]
    Graph(#[from] crate::factorgraph::GraphError),
    #[error("bad session file {file} line {line}")]
    Parse { file: String, line: usize },
    #[error("keyframe ids must be dense and increasing: expected {expected}, got {got}")]
    NonSequentialKeyframe { expected: usize, got: usize },
    #[error("step requires a started localizer")]
    NotStarted,
}

/// Axis-aligned rectangle in the world xy plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XyBounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl XyBounds {
    pub fn empty() -> Self {
        XyBounds {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        }
    }

    pub fn expand(&mut self, x: f64, y: f64) {
        self.min_x = self.min_x.min(x);
        self.min_y = self.min_y.min(y);
        self.max_x = self.max_x.max(x);
        self.max_y = self.max_y.max(y);
    }

    pub fn area(&self) -> f64 {
        (self.max_x - self.min_x).max(0.0) * (self.max_y - self.min_y).max(0.0)
    }

    pub fn intersection_area(&self, other: &XyBounds) -> f64 {
        let w = self.max_x.min(other.max_x) - self.min_x.max(other.min_x);
        let h = self.max_y.min(other.max_y) - self.min_y.max(other.min_y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }
}

/// Group of keyframes merged into one world-frame cloud with a centroid
/// and an xy footprint.
#[derive(Debug, Clone)]
pub struct Submap {
    pub id: usize,
    pub members: Vec<usize>,
    pub cloud: PointCloud,
    pub centroid: Vector3<f64>,
    pub bounds: XyBounds,
}

/// One session: keyframe database, pose-graph edges, sealed submaps and
/// the two kd-tree indices (poses and submap centroids).
#[derive(Debug, Clone)]
pub struct SessionStore {
    tag: SessionTag,
    keyframes: Vec<Keyframe>,
    pub odometry_factors: Vec<OdometryFactor>,
    submaps: Vec<Submap>,
    /// Keyframe ids accumulated since the last seal.
    pending: Vec<usize>,
    tree_p: KdTree3,
    tree_m: KdTree3,
}

impl SessionStore {
    pub fn new(tag: SessionTag) -> Self {
        SessionStore {
            tag,
            keyframes: Vec::new(),
            odometry_factors: Vec::new(),
            submaps: Vec::new(),
            pending: Vec::new(),
            tree_p: KdTree3::build(&[]),
            tree_m: KdTree3::build(&[]),
        }
    }

    pub fn tag(&self) -> SessionTag {
        self.tag
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn next_id(&self) -> usize {
        self.keyframes.len()
    }

    pub fn keyframe(&self, id: usize) -> &Keyframe {
        &self.keyframes[id]
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn submaps(&self) -> &[Submap] {
        &self.submaps
    }

    pub fn submap(&self, id: usize) -> &Submap {
        &self.submaps[id]
    }

    pub fn pending(&self) -> &[usize] {
        &self.pending
    }

    pub fn add_keyframe(&mut self, kf: Keyframe) -> Result<(), SessionError> {
        if kf.id != self.keyframes.len() {
            return Err(SessionError::NonSequentialKeyframe {
                expected: self.keyframes.len(),
                got: kf.id,
            });
        }
        self.keyframes.push(kf);
        self.rebuild_tree_p();
        Ok(())
    }

    pub fn set_pose(&mut self, id: usize, pose: Pose) {
        self.keyframes[id].pose = pose;
        self.rebuild_tree_p();
    }

    /// Update several poses with a single index rebuild.
    pub fn set_poses<I: IntoIterator<Item = (usize, Pose)>>(&mut self, updates: I) {
        for (id, pose) in updates {
            self.keyframes[id].pose = pose;
        }
        self.rebuild_tree_p();
    }

    pub fn add_to_pending(&mut self, id: usize) {
        self.pending.push(id);
    }

    fn rebuild_tree_p(&mut self) {
        self.tree_p =
            KdTree3::build_with_ids(self.keyframes.iter().map(|k| (k.id, k.pose.translation)));
    }

    fn rebuild_tree_m(&mut self) {
        self.tree_m = KdTree3::build_with_ids(self.submaps.iter().map(|s| (s.id, s.centroid)));
    }

    fn build_submap(&self, id: usize, members: Vec<usize>, map_leaf: f64) -> Submap {
        let mut cloud = PointCloud::new(Vec::new());
        let mut centroid = Vector3::zeros();
        let mut bounds = XyBounds::empty();
        for &m in &members {
            let kf = &self.keyframes[m];
            let world = kf.cloud.transformed(&kf.pose);
            for p in &world.points {
                bounds.expand(p.x, p.y);
            }
            cloud.extend_from(&world);
            centroid += kf.pose.translation;
        }
        centroid /= members.len() as f64;
        Submap {
            id,
            members,
            cloud: voxel_downsample(&cloud, map_leaf),
            centroid,
            bounds,
        }
    }

    /// Seal the pending group into a submap once it holds enough
    /// keyframes or spans enough travel.
    pub fn try_generate_submap(&mut self, config: &RunConfig) -> Option<usize> {
        if self.pending.is_empty() {
            return None;
        }
        let travel: f64 = self
            .pending
            .windows(2)
            .map(|w| {
                (self.keyframes[w[1]].pose.translation - self.keyframes[w[0]].pose.translation)
                    .norm()
            })
            .sum();
        if self.pending.len() >= config.submap_max_keyframes
            || travel >= config.submap_translation_gate
        {
            Some(self.seal_pending(config))
        } else {
            None
        }
    }

    /// Unconditionally seal whatever is pending (end of run).
    pub fn flush_pending(&mut self, config: &RunConfig) -> Option<usize> {
        if self.pending.is_empty() {
            None
        } else {
            Some(self.seal_pending(config))
        }
    }

    fn seal_pending(&mut self, config: &RunConfig) -> usize {
        let id = self.submaps.len();
        let members = std::mem::take(&mut self.pending);
        let submap = self.build_submap(id, members, config.map_leaf);
        self.submaps.push(submap);
        self.rebuild_tree_m();
        id
    }

    /// Adopt a submap built elsewhere: its member keyframes are copied in
    /// under fresh ids and the submap is re-keyed to them.
    pub fn adopt_submap(
        &mut self,
        submap: &Submap,
        source: &SessionStore,
    ) -> Result<usize, SessionError> {
        let mut members = Vec::with_capacity(submap.members.len());
        for &m in &submap.members {
            let mut kf = source.keyframe(m).clone();
            kf.id = self.keyframes.len();
            members.push(kf.id);
            self.keyframes.push(kf);
        }
        self.rebuild_tree_p();
        let id = self.submaps.len();
        let mut adopted = submap.clone();
        adopted.id = id;
        adopted.members = members;
        self.submaps.push(adopted);
        self.rebuild_tree_m();
        Ok(id)
    }

    /// Nearest submap by centroid within `radius` meters.
    pub fn nearest_submap(&self, position: &Vector3<f64>, radius: f64) -> Option<&Submap> {
        self.tree_m
            .nearest(position)
            .filter(|(_, d)| *d <= radius)
            .map(|(id, _)| &self.submaps[id])
    }

    /// Nearest submap plus the `propagation_neighbors` closest prior
    /// poses, for scan-match propagation. Empty when nothing is in range.
    pub fn select_prior_submap(
        &self,
        pose: &Pose,
        config: &RunConfig,
    ) -> Option<(usize, Vec<usize>)> {
        let submap = self.nearest_submap(&pose.translation, config.submap_search_radius)?;
        let neighbors: Vec<usize> = self
            .tree_p
            .knn(&pose.translation, config.propagation_neighbors)
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        if neighbors.is_empty() {
            None
        } else {
            Some((submap.id, neighbors))
        }
    }

    /// Persist the session: `poses.tum`, `keyframes/<id>.llpc`,
    /// `submaps.idx` and `graph.txt`.
    pub fn save(&self, dir: &Path) -> Result<(), SessionError> {
        std::fs::create_dir_all(dir.join("keyframes"))?;
        let mut tum = String::new();
        for kf in &self.keyframes {
            let q = quat_xyzw(&kf.pose.rotation);
            tum.push_str(&format!(
                "{} {} {} {} {} {} {} {}\n",
                kf.timestamp,
                kf.pose.translation.x,
                kf.pose.translation.y,
                kf.pose.translation.z,
                q[0],
                q[1],
                q[2],
                q[3]
            ));
            kf.cloud.save(&dir.join(format!("keyframes/{}.llpc", kf.id)))?;
        }
        std::fs::write(dir.join("poses.tum"), tum)?;
        let mut idx = String::new();
        for s in &self.submaps {
            idx.push_str(&format!("{} {}", s.id, s.members.len()));
            for m in &s.members {
                idx.push_str(&format!(" {m}"));
            }
            idx.push_str(&format!(
                " {} {} {} {} {} {} {}\n",
                s.centroid.x, s.centroid.y, s.centroid.z, s.bounds.min_x, s.bounds.min_y,
                s.bounds.max_x, s.bounds.max_y
            ));
        }
        std::fs::write(dir.join("submaps.idx"), idx)?;
        let mut graph = String::new();
        for f in &self.odometry_factors {
            let q = quat_xyzw(&f.relative.rotation);
            graph.push_str(&format!(
                "BETWEEN {} {} {} {} {} {} {} {} {} {} {}\n",
                f.from,
                f.to,
                f.relative.translation.x,
                f.relative.translation.y,
                f.relative.translation.z,
                q[0],
                q[1],
                q[2],
                q[3],
                f.sqrt_info[(0, 0)],
                f.sqrt_info[(3, 3)]
            ));
        }
        std::fs::write(dir.join("graph.txt"), graph)?;
        Ok(())
    }

    /// Load a session saved by [`SessionStore::save`]. Submap clouds are
    /// rebuilt from the member keyframes.
    pub fn load(dir: &Path, tag: SessionTag, config: &RunConfig) -> Result<Self, SessionError> {
        let mut store = SessionStore::new(tag);
        let pose_file = dir.join("poses.tum");
        let reader = BufReader::new(std::fs::File::open(&pose_file)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| SessionError::Parse {
                    file: pose_file.display().to_string(),
                    line: i + 1,
                })?;
            if vals.len() != 8 {
                return Err(SessionError::Parse {
                    file: pose_file.display().to_string(),
                    line: i + 1,
                });
            }
            let pose = Pose::new(
                rotation_from_xyzw(vals[4], vals[5], vals[6], vals[7]),
                Vector3::new(vals[1], vals[2], vals[3]),
            )
            .with_timestamp(vals[0]);
            let cloud = PointCloud::load(&dir.join(format!("keyframes/{i}.llpc")))?;
            store.keyframes.push(Keyframe {
                id: i,
                cloud,
                pose,
                timestamp: vals[0],
            });
        }
        store.rebuild_tree_p();
        let idx_file = dir.join("submaps.idx");
        if idx_file.exists() {
            let reader = BufReader::new(std::fs::File::open(&idx_file)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let toks: Vec<&str> = line.split_whitespace().collect();
                let parse_err = || SessionError::Parse {
                    file: idx_file.display().to_string(),
                    line: i + 1,
                };
                if toks.len() < 2 {
                    return Err(parse_err());
                }
                let id: usize = toks[0].parse().map_err(|_| parse_err())?;
                let n: usize = toks[1].parse().map_err(|_| parse_err())?;
                if toks.len() != 2 + n + 7 {
                    return Err(parse_err());
                }
                let members: Vec<usize> = toks[2..2 + n]
                    .iter()
                    .map(|t| t.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| parse_err())?;
                // centroid/bounds are recomputed with the cloud; the stored
                // values only serve external readers
                let submap = store.build_submap(id, members, config.map_leaf);
                store.submaps.push(submap);
            }
            store.rebuild_tree_m();
        }
        let graph_file = dir.join("graph.txt");
        if graph_file.exists() {
            let reader = BufReader::new(std::fs::File::open(&graph_file)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.is_empty() {
                    continue;
                }
                let parse_err = || SessionError::Parse {
                    file: graph_file.display().to_string(),
                    line: i + 1,
                };
                if toks[0] != "BETWEEN" || toks.len() != 12 {
                    return Err(parse_err());
                }
                let vals: Vec<f64> = toks[3..]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| parse_err())?;
                let from: usize = toks[1].parse().map_err(|_| parse_err())?;
                let to: usize = toks[2].parse().map_err(|_| parse_err())?;
                store.odometry_factors.push(OdometryFactor {
                    from,
                    to,
                    relative: Pose::new(
                        rotation_from_xyzw(vals[3], vals[4], vals[5], vals[6]),
                        Vector3::new(vals[0], vals[1], vals[2]),
                    ),
                    sqrt_info: diag_sqrt_info6(1.0 / vals[7], 1.0 / vals[8]),
                });
            }
        }
        Ok(store)
    }
}

/// Localization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Relocalization: constrained to the prior map via scan-match factors.
    Rlm,
    /// Incremental localization: odometry-only, prior map extended.
    Ilm,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Rlm => write!(f, "RLM"),
            Mode::Ilm => write!(f, "ILM"),
        }
    }
}

/// Mode plus the evidence that selected it.
#[derive(Debug, Clone, Copy)]
pub struct ModeState {
    pub mode: Mode,
    pub last_overlap: f64,
    pub active_submap: Option<usize>,
}

impl ModeState {
    pub fn new() -> Self {
        ModeState {
            mode: Mode::Ilm,
            last_overlap: 0.0,
            active_submap: None,
        }
    }
}

impl Default for ModeState {
    fn default() -> Self {
        Self::new()
    }
}

/// Ratio of the square footprint `[x ± l] x [y ± l]` covered by the
/// submap's xy boundary.
pub fn compute_overlap(pose: &Pose, submap: &Submap, l: f64) -> f64 {
    let square = XyBounds {
        min_x: pose.translation.x - l,
        min_y: pose.translation.y - l,
        max_x: pose.translation.x + l,
        max_y: pose.translation.y + l,
    };
    square.intersection_area(&submap.bounds) / (4.0 * l * l)
}

/// One scan-match between-factor produced by propagation.
#[derive(Debug, Clone)]
pub struct PropagatedFactor {
    pub prior_id: usize,
    pub relative: Pose,
    pub fitness: f64,
    pub sqrt_info: nalgebra::Matrix6<f64>,
}

/// Output of one propagation: the refined pose in the prior frame plus
/// one factor per neighbor prior node.
#[derive(Debug, Clone)]
pub struct PropagatedFactors {
    pub refined: Pose,
    pub registration_fitness: f64,
    pub factors: Vec<PropagatedFactor>,
}

/// Register the scan to the submap (NDT), then distribute the refined
/// pose across the neighbor prior nodes as between-factors whose noise is
/// the base noise scaled by each neighbor's registration fitness: larger
/// fitness, weaker information. Returns `None` when NDT does not
/// converge.
pub fn propagate_scan_match(
    scan: &Keyframe,
    submap: &Submap,
    neighbors: &[&Keyframe],
    current_estimate: &Pose,
    config: &RunConfig,
) -> Option<PropagatedFactors> {
    if neighbors.is_empty() || submap.cloud.is_empty() || scan.cloud.is_empty() {
        return None;
    }
    let params = RegistrationParams::default();
    let reg = match ndt(&scan.cloud, &submap.cloud, current_estimate, &params) {
        Ok(r) if r.converged => r,
        Ok(_) | Err(_) => {
            log::warn!("scan-match propagation: registration failed, no factors this step");
            return None;
        }
    };
    let refined = reg.transform;
    let mut factors = Vec::with_capacity(neighbors.len());
    for kf in neighbors {
        let tree = KdTree3::build(&kf.cloud.transformed(&kf.pose).points);
        let fit = fitness_score(&scan.cloud, &tree, &refined, params.max_correspondence);
        if !fit.is_finite() {
            continue;
        }
        let fit = fit.max(config.fitness_floor);
        // covariance scales with fitness, so sigmas scale with sqrt(fitness)
        let s = fit.sqrt();
        factors.push(PropagatedFactor {
            prior_id: kf.id,
            relative: kf.pose.relative(&refined),
            fitness: fit,
            sqrt_info: diag_sqrt_info6(config.scan_match_sigma_r * s, config.scan_match_sigma_t * s),
        });
    }
    if factors.is_empty() {
        return None;
    }
    Some(PropagatedFactors {
        refined,
        registration_fitness: reg.fitness,
        factors,
    })
}

/// Isotropic Gaussian prior on one variable, expressed as a marginal
/// prior factor at the current value.
fn gaussian_prior(var: VarId, value: Value, sigma: f64) -> Factor {
    let d = value.dim();
    Factor::MarginalPrior {
        vars: vec![var],
        lin_points: vec![value],
        sqrt_info: DMatrix::identity(d, d) / sigma,
        rhs: DVector::zeros(d),
    }
}

/// Per-keyframe inputs to [`Localizer::step`].
#[derive(Debug, Clone)]
pub struct StepInput {
    /// Body-frame scan; `pose` is ignored (prediction comes from the
    /// previous estimate and the odometry factor).
    pub keyframe: Keyframe,
    /// Relative odometry from the previous keyframe.
    pub odometry: OdometryFactor,
    /// Preintegrated inertial measurement spanning the keyframe gap.
    pub preintegrated: Option<PreintegratedDelta>,
}

/// What one step decided and produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub index: usize,
    pub timestamp: f64,
    pub mode: Mode,
    pub overlap: f64,
    pub scan_match_factors: usize,
    pub window: usize,
    pub solver_ok: bool,
    pub pose: Pose,
}

/// The subsidiary-session engine: drives the joint graph one keyframe at
/// a time, switching between relocalization against the prior session and
/// incremental extension of it.
pub struct Localizer {
    pub config: RunConfig,
    pub central: SessionStore,
    pub active: SessionStore,
    pub graph: JointGraph,
    pub mode: ModeState,
    pub timeline: Vec<StepOutcome>,
    /// Pin the mode instead of switching on overlap.
    pub force_mode: Option<Mode>,
    /// With propagation off, RLM emits one unweighted edge to the single
    /// nearest prior node instead of the fitness-weighted neighbor set.
    pub propagation: bool,
    /// Submaps sealed during ILM, awaiting commit into the central store.
    staged: Vec<Submap>,
    window: VecDeque<usize>,
    prior_nodes: BTreeSet<usize>,
    started: bool,
    gravity: Vector3<f64>,
    factor_counts: BTreeMap<&'static str, usize>,
}

impl Localizer {
    pub fn new(config: RunConfig, central: SessionStore) -> Self {
        let gravity = Vector3::new(0.0, 0.0, -config.gravity);
        Localizer {
            config,
            central,
            active: SessionStore::new(SessionTag::Subsidiary),
            graph: JointGraph::new(),
            mode: ModeState::new(),
            timeline: Vec::new(),
            force_mode: None,
            propagation: true,
            staged: Vec::new(),
            window: VecDeque::new(),
            prior_nodes: BTreeSet::new(),
            started: false,
            gravity,
        factor_counts: BTreeMap::new(),
        }
    }

    /// Register the first keyframe at its initialized pose and anchor the
    /// active session there.
    pub fn start(
        &mut self,
        mut keyframe: Keyframe,
        pose: Pose,
        velocity: Vector3<f64>,
    ) -> Result<(), SessionError> {
        assert!(!self.started, "localizer already started");
        keyframe.pose = pose;
        let id = keyframe.id;
        let tag = SessionTag::Subsidiary;
        self.graph.add_variable(VarId::pose(tag, id), Value::Pose(pose))?;
        self.graph
            .set_anchor(tag, VarId::pose(tag, id), pose, self.config.anchor_sigma_subsidiary)?;
        self.count_factor("anchor-prior");
        self.graph
            .add_variable(VarId::velocity(tag, id), Value::Velocity(velocity))?;
        self.graph
            .add_variable(VarId::bias(tag, id), Value::Bias(crate::imu::ImuBias::zero()))?;
        self.graph.add_factor(gaussian_prior(
            VarId::velocity(tag, id),
            Value::Velocity(velocity),
            0.5,
        ))?;
        self.graph.add_factor(gaussian_prior(
            VarId::bias(tag, id),
            Value::Bias(crate::imu::ImuBias::zero()),
            1e-2,
        ))?;
        self.active.add_keyframe(keyframe)?;
        self.window.push_back(id);
        self.started = true;
        Ok(())
    }

    fn count_factor(&mut self, kind: &'static str) {
        *self.factor_counts.entry(kind).or_insert(0) += 1;
    }

    pub fn factor_counts(&self) -> &BTreeMap<&'static str, usize> {
        &self.factor_counts
    }

    /// Highest overlap over prior submaps near the position, with the
    /// submap that produced it.
    fn best_overlap(&self, pose: &Pose) -> (f64, Option<usize>) {
        let mut best = (0.0, None);
        for s in self.central.submaps() {
            if (s.centroid - pose.translation).norm() > self.config.submap_search_radius {
                continue;
            }
            let o = compute_overlap(pose, s, self.config.overlap_half_side);
            if o > best.0 {
                best = (o, Some(s.id));
            }
        }
        best
    }

    /// Make a prior-session pose a graph variable held near its stored
    /// value. The first one carries the central anchor.
    fn ensure_prior_node(&mut self, id: usize) -> Result<(), SessionError> {
        if self.prior_nodes.contains(&id) {
            return Ok(());
        }
        let tag = SessionTag::Central;
        let pose = self.central.keyframe(id).pose;
        self.graph.add_variable(VarId::pose(tag, id), Value::Pose(pose))?;
        if self.graph.anchor_sigma(tag).is_none() {
            self.graph
                .set_anchor(tag, VarId::pose(tag, id), pose, self.config.anchor_sigma_central)?;
            self.count_factor("anchor-prior");
        } else {
            let sigma = self.config.anchor_sigma_central;
            self.graph.add_factor(Factor::PriorPose {
                var: VarId::pose(tag, id),
                pose,
                sqrt_info: diag_sqrt_info6(sigma, sigma),
                anchor: false,
            })?;
            self.count_factor("prior");
        }
        self.prior_nodes.insert(id);
        Ok(())
    }

    /// One Algorithm-style iteration: extend the graph, pick the mode,
    /// optionally attach propagated scan-match factors, optimize, and
    /// marginalize down to the mode's window size.
    pub fn step(&mut self, input: StepInput) -> Result<StepOutcome, SessionError> {
        if !self.started {
            return Err(SessionError::NotStarted);
        }
        let tag = SessionTag::Subsidiary;
        let k = input.keyframe.id;
        let prev = *self.window.back().expect("window non-empty");
        let prev_pose = *self.graph.pose(&VarId::pose(tag, prev));
        let predicted = prev_pose.compose(&input.odometry.relative);

        self.graph
            .add_variable(VarId::pose(tag, k), Value::Pose(predicted))?;
        self.graph.add_factor(Factor::BetweenPose {
            from: VarId::pose(tag, prev),
            to: VarId::pose(tag, k),
            relative: input.odometry.relative,
            sqrt_info: input.odometry.sqrt_info,
            scan_match: false,
        })?;
        self.count_factor("odometry-between");
        if let Some(delta) = input
            .preintegrated
            .as_ref()
            // inertial chaining needs the previous velocity/bias states
            .filter(|_| self.graph.has_variable(&VarId::velocity(tag, prev)))
        {
            let prev_vel = *self.graph.values[&VarId::velocity(tag, prev)].as_velocity();
            let prev_bias = *self.graph.values[&VarId::bias(tag, prev)].as_bias();
            self.graph
                .add_variable(VarId::velocity(tag, k), Value::Velocity(prev_vel))?;
            self.graph
                .add_variable(VarId::bias(tag, k), Value::Bias(prev_bias))?;
            self.graph.add_factor(Factor::Preintegration {
                pose_i: VarId::pose(tag, prev),
                vel_i: VarId::velocity(tag, prev),
                bias_i: VarId::bias(tag, prev),
                pose_j: VarId::pose(tag, k),
                vel_j: VarId::velocity(tag, k),
                delta: delta.clone(),
                gravity: self.gravity,
                sqrt_info: sqrt_info_from_covariance(&delta.covariance, 1e-8),
            })?;
            self.count_factor("preintegration");
            self.graph.add_factor(Factor::BiasWalk {
                from: VarId::bias(tag, prev),
                to: VarId::bias(tag, k),
                sqrt_info: diag_sqrt_info6(1e-3, 1e-3),
            })?;
            self.count_factor("bias-walk");
        }

        // mode decision from prior-map overlap at the predicted pose
        let (overlap, _) = self.best_overlap(&predicted);
        let selection = match self.force_mode {
            Some(Mode::Ilm) => None,
            Some(Mode::Rlm) => self.central.select_prior_submap(&predicted, &self.config),
            None if overlap >= self.config.overlap_threshold => {
                self.central.select_prior_submap(&predicted, &self.config)
            }
            None => None,
        };
        let mut scan_match_factors = 0usize;
        match selection {
            Some((submap_id, neighbor_ids)) => {
                self.mode.mode = Mode::Rlm;
                self.mode.active_submap = Some(submap_id);
                self.graph.set_mode_weight(1);
                let take = if self.propagation { neighbor_ids.len() } else { 1 };
                let neighbors: Vec<&Keyframe> = neighbor_ids
                    .iter()
                    .take(take)
                    .map(|&i| self.central.keyframe(i))
                    .collect();
                let prop = propagate_scan_match(
                    &input.keyframe,
                    self.central.submap(submap_id),
                    &neighbors,
                    &predicted,
                    &self.config,
                );
                if let Some(prop) = prop {
                    for f in &prop.factors {
                        self.ensure_prior_node(f.prior_id)?;
                    }
                    let base_sqrt_info = diag_sqrt_info6(
                        self.config.scan_match_sigma_r,
                        self.config.scan_match_sigma_t,
                    );
                    let factors: Vec<Factor> = prop
                        .factors
                        .iter()
                        .map(|f| Factor::BetweenPose {
                            from: VarId::pose(SessionTag::Central, f.prior_id),
                            to: VarId::pose(tag, k),
                            relative: f.relative,
                            // the single-edge baseline skips fitness weighting
                            sqrt_info: if self.propagation { f.sqrt_info } else { base_sqrt_info },
                            scan_match: true,
                        })
                        .collect();
                    scan_match_factors = factors.len();
                    self.graph.attach_scan_match(factors)?;
                    for _ in 0..scan_match_factors {
                        self.count_factor("scan-match");
                    }
                }
            }
            None => {
                self.mode.mode = Mode::Ilm;
                self.mode.active_submap = None;
                self.graph.set_mode_weight(0);
                self.graph.remove_scan_match_factors();
            }
        }
        self.mode.last_overlap = overlap;

        let mut kf = input.keyframe;
        kf.pose = predicted;
        let timestamp = kf.timestamp;
        self.active.add_keyframe(kf)?;
        self.active.odometry_factors.push(input.odometry);
        self.window.push_back(k);

        let solver_ok = match self.graph.optimize(&OptimizeParams::default()) {
            Ok(report) => report.converged || report.final_cost <= report.initial_cost,
            Err(e) => {
                log::warn!("step {k}: solver failed ({e}), keeping odometry pose");
                false
            }
        };

        // pull optimized window poses back into the store
        let updates: Vec<(usize, Pose)> = self
            .window
            .iter()
            .map(|&i| {
                (
                    i,
                    self.graph
                        .pose(&VarId::pose(tag, i))
                        .with_timestamp(self.active.keyframe(i).timestamp),
                )
            })
            .collect();
        self.active.set_poses(updates);

        // ILM extends the prior map with newly sealed submaps
        if self.mode.mode == Mode::Ilm {
            self.active.add_to_pending(k);
            if let Some(sealed) = self.active.try_generate_submap(&self.config) {
                let submap = self.active.submap(sealed).clone();
                self.stage_submap(submap)?;
            }
        }

        // marginalize down to the mode window
        let target = match self.mode.mode {
            Mode::Rlm => self.config.window_rlm,
            Mode::Ilm => self.config.window_ilm,
        };
        while self.window.len() > target {
            let old = self.window.pop_front().expect("window non-empty");
            let mut drop: BTreeSet<VarId> = BTreeSet::new();
            drop.insert(VarId::pose(tag, old));
            for extra in [VarId::velocity(tag, old), VarId::bias(tag, old)] {
                if self.graph.has_variable(&extra) {
                    drop.insert(extra);
                }
            }
            self.graph.marginalize(&drop)?;
        }

        let pose = self.active.keyframe(k).pose;
        let outcome = StepOutcome {
            index: k,
            timestamp,
            mode: self.mode.mode,
            overlap,
            scan_match_factors,
            window: self.window.len(),
            solver_ok,
            pose,
        };
        self.timeline.push(outcome.clone());
        Ok(outcome)
    }

    fn stage_submap(&mut self, submap: Submap) -> Result<(), SessionError> {
        if self.config.immediate_update {
            let active = self.active.clone();
            self.central.adopt_submap(&submap, &active)?;
        } else {
            self.staged.push(submap);
        }
        Ok(())
    }

    pub fn staged_submaps(&self) -> &[Submap] {
        &self.staged
    }

    /// End of run: seal the open pending group and commit staged submaps
    /// into the central store.
    pub fn finish(&mut self) -> Result<(), SessionError> {
        if let Some(id) = self.active.flush_pending(&self.config) {
            let submap = self.active.submap(id).clone();
            self.stage_submap(submap)?;
        }
        let staged = std::mem::take(&mut self.staged);
        let active = self.active.clone();
        for s in &staged {
            self.central.adopt_submap(s, &active)?;
        }
        Ok(())
    }

    /// Final estimated trajectory, one pose per keyframe.
    pub fn trajectory(&self) -> Vec<Pose> {
        self.active.keyframes().iter().map(|k| k.pose).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn room_cloud(rng: &mut StdRng, n: usize) -> PointCloud {
        // box walls + floor around the origin, 30 m across
        let mut pts = Vec::new();
        for _ in 0..n {
            let (x, y, z) = match rng.gen_range(0..5) {
                0 => (rng.gen_range(-15.0..15.0), -15.0, rng.gen_range(0.0..4.0)),
                1 => (rng.gen_range(-15.0..15.0), 15.0, rng.gen_range(0.0..4.0)),
                2 => (-15.0, rng.gen_range(-15.0..15.0), rng.gen_range(0.0..4.0)),
                3 => (15.0, rng.gen_range(-15.0..15.0), rng.gen_range(0.0..4.0)),
                _ => (rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), 0.0),
            };
            pts.push(nalgebra::Vector3::new(x, y, z));
        }
        PointCloud::new(pts)
    }

    fn keyframe_at(id: usize, x: f64, cloud: PointCloud) -> Keyframe {
        Keyframe {
            id,
            cloud,
            pose: Pose::from_xyz_yaw(x, 0.0, 0.0, 0.0).with_timestamp(id as f64),
            timestamp: id as f64,
        }
    }

    fn simple_cloud() -> PointCloud {
        PointCloud::new(vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(-1.0, -1.0, 0.5),
        ])
    }

    #[test]
    fn submap_seals_at_keyframe_count() {
        let cfg = RunConfig::default();
        let mut store = SessionStore::new(SessionTag::Central);
        for i in 0..19 {
            // 19 keyframes spaced 0.25 m: below both gates
            let mut kf = keyframe_at(i, i as f64 * 0.25, simple_cloud());
            kf.pose.translation.x = i as f64 * 0.25;
            store.add_keyframe(kf).unwrap();
            store.add_to_pending(i);
            assert!(store.try_generate_submap(&cfg).is_none(), "sealed early at {i}");
        }
        store.add_keyframe(keyframe_at(19, 4.75, simple_cloud())).unwrap();
        store.add_to_pending(19);
        let id = store.try_generate_submap(&cfg).expect("20th keyframe seals");
        assert_eq!(store.submap(id).members.len(), 20);
        assert!(store.pending().is_empty());
    }

    #[test]
    fn submap_seals_at_travel_distance() {
        let cfg = RunConfig::default();
        let mut store = SessionStore::new(SessionTag::Central);
        // 8 keyframes spaced 3 m: 21 m traveled at the 8th
        for i in 0..8 {
            store.add_keyframe(keyframe_at(i, i as f64 * 3.0, simple_cloud())).unwrap();
            store.add_to_pending(i);
        }
        let id = store.try_generate_submap(&cfg).expect("travel gate seals");
        assert_eq!(store.submap(id).members.len(), 8);
    }

    #[test]
    fn submap_invariants() {
        let cfg = RunConfig::default();
        let mut store = SessionStore::new(SessionTag::Central);
        let mut rng = StdRng::seed_from_u64(1);
        for i in 0..5 {
            store
                .add_keyframe(keyframe_at(i, i as f64 * 6.0, room_cloud(&mut rng, 300)))
                .unwrap();
            store.add_to_pending(i);
        }
        let id = store.flush_pending(&cfg).unwrap();
        let s = store.submap(id);
        // centroid = mean of member keyframe positions
        let mean_x: f64 = (0..5).map(|i| i as f64 * 6.0).sum::<f64>() / 5.0;
        assert!((s.centroid.x - mean_x).abs() < 1e-12);
        // boundary contains all member world points
        for &m in &s.members {
            let kf = store.keyframe(m);
            for p in &kf.cloud.transformed(&kf.pose).points {
                assert!(s.bounds.contains(p.x, p.y));
            }
        }
    }

    #[test]
    fn overlap_containment_outside_and_half() {
        let submap = Submap {
            id: 0,
            members: vec![0],
            cloud: simple_cloud(),
            centroid: Vector3::zeros(),
            bounds: XyBounds {
                min_x: -100.0,
                min_y: -100.0,
                max_x: 100.0,
                max_y: 100.0,
            },
        };
        let l = 10.0;
        let deep = Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.0);
        assert!((compute_overlap(&deep, &submap, l) - 1.0).abs() < 1e-12);
        let outside = Pose::from_xyz_yaw(500.0, 0.0, 0.0, 0.0);
        assert_eq!(compute_overlap(&outside, &submap, l), 0.0);
        // square centered on the +x edge: exactly half inside
        let edge = Pose::from_xyz_yaw(100.0, 0.0, 0.0, 0.0);
        assert!((compute_overlap(&edge, &submap, l) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn select_prior_submap_radius_and_neighbors() {
        let cfg = RunConfig::default();
        let mut store = SessionStore::new(SessionTag::Central);
        for i in 0..6 {
            store.add_keyframe(keyframe_at(i, i as f64 * 4.0, simple_cloud())).unwrap();
            store.add_to_pending(i);
        }
        store.flush_pending(&cfg).unwrap();
        let at_centroid = Pose::from_xyz_yaw(10.0, 0.0, 0.0, 0.0);
        let (submap_id, neighbors) = store.select_prior_submap(&at_centroid, &cfg).unwrap();
        assert_eq!(submap_id, 0);
        assert_eq!(neighbors.len(), cfg.propagation_neighbors);
        // the three nearest of 0,4,8,12,16,20 to x=10 are 8, 12, then 4 or 16
        assert!(neighbors.contains(&2) && neighbors.contains(&3));
        let far = Pose::from_xyz_yaw(500.0, 0.0, 0.0, 0.0);
        assert!(store.select_prior_submap(&far, &cfg).is_none());
    }

    #[test]
    fn propagation_identity_and_information_ordering() {
        let cfg = RunConfig::default();
        let mut rng = StdRng::seed_from_u64(7);
        let world = room_cloud(&mut rng, 4000);
        let mut store = SessionStore::new(SessionTag::Central);
        // prior keyframes observe the same world from different poses
        for i in 0..3 {
            let pose = Pose::from_xyz_yaw(i as f64 * 2.0 - 2.0, 0.0, 0.0, 0.1 * i as f64);
            let body = world.transformed(&pose.inverse());
            store
                .add_keyframe(Keyframe {
                    id: i,
                    cloud: body,
                    pose,
                    timestamp: i as f64,
                })
                .unwrap();
            store.add_to_pending(i);
        }
        store.flush_pending(&cfg).unwrap();
        let query_pose = Pose::from_xyz_yaw(0.5, 0.3, 0.0, 0.05);
        let scan = Keyframe {
            id: 0,
            cloud: world.transformed(&query_pose.inverse()),
            pose: Pose::identity(),
            timestamp: 0.0,
        };
        let neighbors: Vec<&Keyframe> = (0..3).map(|i| store.keyframe(i)).collect();
        let guess = Pose::from_xyz_yaw(0.45, 0.25, 0.0, 0.03);
        let prop =
            propagate_scan_match(&scan, store.submap(0), &neighbors, &guess, &cfg).unwrap();
        assert_eq!(prop.factors.len(), 3);
        // refined pose recovers the query pose
        assert!((prop.refined.translation - query_pose.translation).norm() < 0.1);
        // each factor's relative pose maps its prior node to the refined pose
        for f in &prop.factors {
            let reassembled = store.keyframe(f.prior_id).pose.compose(&f.relative);
            assert!((reassembled.translation - prop.refined.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn fitness_scaling_rule() {
        // information must scale as 1/fitness: 0.01/0.05/0.20 m^2 gives
        // information ratios 20:4:1
        let cfg = RunConfig::default();
        let infos: Vec<f64> = [0.01_f64, 0.05, 0.20]
            .iter()
            .map(|&f| {
                let s = diag_sqrt_info6(
                    cfg.scan_match_sigma_r * f.sqrt(),
                    cfg.scan_match_sigma_t * f.sqrt(),
                );
                s[(3, 3)] * s[(3, 3)]
            })
            .collect();
        assert!((infos[0] / infos[2] - 20.0).abs() < 1e-9);
        assert!((infos[1] / infos[2] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn store_save_load_round_trip() {
        let cfg = RunConfig::default();
        let mut rng = StdRng::seed_from_u64(3);
        let mut store = SessionStore::new(SessionTag::Central);
        for i in 0..6 {
            store
                .add_keyframe(keyframe_at(i, i as f64 * 4.0, room_cloud(&mut rng, 200)))
                .unwrap();
            store.add_to_pending(i);
        }
        store.flush_pending(&cfg).unwrap();
        store.odometry_factors.push(OdometryFactor {
            from: 0,
            to: 1,
            relative: Pose::from_xyz_yaw(4.0, 0.0, 0.0, 0.0),
            sqrt_info: diag_sqrt_info6(0.05, 0.1),
        });
        let dir = std::env::temp_dir().join(format!("liloc-session-{}", std::process::id()));
        store.save(&dir).unwrap();
        let loaded = SessionStore::load(&dir, SessionTag::Central, &cfg).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        assert_eq!(loaded.len(), store.len());
        for i in 0..store.len() {
            let (a, b) = (store.keyframe(i), loaded.keyframe(i));
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-6);
            assert_eq!(a.cloud.len(), b.cloud.len());
        }
        assert_eq!(loaded.submaps().len(), 1);
        assert_eq!(loaded.submap(0).members, store.submap(0).members);
        assert_eq!(loaded.odometry_factors.len(), 1);
        assert!(
            (loaded.odometry_factors[0].relative.translation.x - 4.0).abs() < 1e-9
        );
    }

    fn odometry_step(
        prev: &Pose,
        curr: &Pose,
        id_from: usize,
    ) -> OdometryFactor {
        OdometryFactor {
            from: id_from,
            to: id_from + 1,
            relative: prev.relative(curr),
            sqrt_info: diag_sqrt_info6(0.05, 0.1),
        }
    }

    #[test]
    fn ilm_only_run_matches_odometry_chain() {
        // no prior submaps anywhere near: every step is ILM and the
        // optimized trajectory equals the dead-reckoned odometry chain
        let cfg = RunConfig::default();
        let central = SessionStore::new(SessionTag::Central);
        let mut loc = Localizer::new(cfg, central);
        let mut truth = vec![Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.0)];
        for i in 1..15 {
            truth.push(Pose::from_xyz_yaw(i as f64 * 1.5, 0.2 * i as f64, 0.0, 0.05 * i as f64));
        }
        loc.start(keyframe_at(0, 0.0, simple_cloud()), truth[0], Vector3::zeros())
            .unwrap();
        for i in 1..15 {
            let out = loc
                .step(StepInput {
                    keyframe: keyframe_at(i, 0.0, simple_cloud()),
                    odometry: odometry_step(&truth[i - 1], &truth[i], i - 1),
                    preintegrated: None,
                })
                .unwrap();
            assert_eq!(out.mode, Mode::Ilm);
            assert_eq!(out.scan_match_factors, 0);
            assert!(out.window <= loc.config.window_ilm);
        }
        for (est, gt) in loc.trajectory().iter().zip(truth.iter()) {
            assert!((est.translation - gt.translation).norm() < 1e-9);
            assert!(est.rotation_distance(gt) < 1e-9);
        }
        // window is exactly the ILM size once enough keyframes exist
        assert_eq!(loc.timeline.last().unwrap().window, loc.config.window_ilm);
    }

    #[test]
    fn ilm_run_stages_submaps_and_commits_on_finish() {
        let cfg = RunConfig::default();
        let central = SessionStore::new(SessionTag::Central);
        let mut loc = Localizer::new(cfg, central);
        let mut rng = StdRng::seed_from_u64(9);
        let poses: Vec<Pose> = (0..30)
            .map(|i| Pose::from_xyz_yaw(i as f64 * 1.0, 0.0, 0.0, 0.0))
            .collect();
        loc.start(keyframe_at(0, 0.0, room_cloud(&mut rng, 100)), poses[0], Vector3::zeros())
            .unwrap();
        for i in 1..30 {
            loc.step(StepInput {
                keyframe: keyframe_at(i, 0.0, room_cloud(&mut rng, 100)),
                odometry: odometry_step(&poses[i - 1], &poses[i], i - 1),
                preintegrated: None,
            })
            .unwrap();
        }
        // staged, not yet visible to the central store
        assert!(!loc.staged_submaps().is_empty());
        assert!(loc.central.submaps().is_empty());
        loc.finish().unwrap();
        assert!(loc.staged_submaps().is_empty());
        assert!(!loc.central.submaps().is_empty());
        // committed submaps reference keyframes that exist in the central store
        for s in loc.central.submaps() {
            for &m in &s.members {
                assert!(m < loc.central.len());
            }
        }
    }
}
