//! Run configuration: every named threshold of the pipeline with its
//! default value, serialized as a flat key-value text file.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("config value for {key} must be positive, got {value}")]
    NonPositive { key: String, value: f64 },
}

/// All tunables of the pipeline. Defaults follow the method's published
/// constants where those exist; everything else is a declared default.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Max keyframes per submap (N_s).
    pub submap_max_keyframes: usize,
    /// Translation threshold for sealing a submap, meters (h_p).
    pub submap_translation_gate: f64,
    /// Descriptor sectors (N_a).
    pub descriptor_sectors: usize,
    /// Descriptor rings (N_r).
    pub descriptor_rings: usize,
    /// Max LiDAR range used by the descriptor, meters (L_max).
    pub descriptor_max_range: f64,
    /// Occupancy height threshold relative to the sensor, meters.
    pub descriptor_height_gate: f64,
    /// Neighbor prior nodes per scan-match propagation (N_d).
    pub propagation_neighbors: usize,
    /// Sliding-window keyframes retained in RLM (N_m^r).
    pub window_rlm: usize,
    /// Sliding-window keyframes retained in ILM (N_m^l).
    pub window_ilm: usize,
    /// Overlap threshold for RLM (h_o).
    pub overlap_threshold: f64,
    /// Half-side of the overlap square, meters (l).
    pub overlap_half_side: f64,
    /// Search radius for prior submap centroids, meters.
    pub submap_search_radius: f64,
    /// Keyframe gating: translation, meters.
    pub keyframe_translation: f64,
    /// Keyframe gating: rotation, radians.
    pub keyframe_rotation: f64,
    /// Voxel leaf for keyframe downsampling, meters.
    pub keyframe_leaf: f64,
    /// Voxel leaf for map insertion, meters.
    pub map_leaf: f64,
    /// Scan-match base noise: translation sigma, meters.
    pub scan_match_sigma_t: f64,
    /// Scan-match base noise: rotation sigma, radians.
    pub scan_match_sigma_r: f64,
    /// Floor applied to registration fitness before noise scaling, m^2.
    pub fitness_floor: f64,
    /// Central-session anchor sigma (translation m / rotation rad).
    pub anchor_sigma_central: f64,
    /// Subsidiary-session anchor sigma.
    pub anchor_sigma_subsidiary: f64,
    /// Gravity magnitude, m/s^2 (world gravity is (0,0,-g)).
    pub gravity: f64,
    /// Gyro noise density, rad/s/sqrt(Hz).
    pub gyro_noise_density: f64,
    /// Accel noise density, m/s^2/sqrt(Hz).
    pub accel_noise_density: f64,
    /// Commit ILM submap updates immediately instead of staging.
    pub immediate_update: bool,
    /// RNG seed for simulator-backed commands.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            submap_max_keyframes: 20,
            submap_translation_gate: 20.0,
            descriptor_sectors: 60,
            descriptor_rings: 20,
            descriptor_max_range: 50.0,
            descriptor_height_gate: -0.5,
            propagation_neighbors: 3,
            window_rlm: 5,
            window_ilm: 10,
            overlap_threshold: 0.7,
            overlap_half_side: 10.0,
            submap_search_radius: 50.0,
            keyframe_translation: 1.0,
            keyframe_rotation: 0.2,
            keyframe_leaf: 0.2,
            map_leaf: 0.4,
            scan_match_sigma_t: 0.1,
            scan_match_sigma_r: 0.05,
            fitness_floor: 1e-4,
            anchor_sigma_central: 1e-3,
            anchor_sigma_subsidiary: 1.0,
            gravity: 9.81,
            gyro_noise_density: 1e-3,
            accel_noise_density: 1e-2,
            immediate_update: false,
            seed: 0,
        }
    }
}

macro_rules! config_fields {
    ($($key:literal => $field:ident : $kind:ident),* $(,)?) => {
        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $($key => {
                        self.$field = parse_value!(self, $field, $kind, key, value)?;
                        Ok(())
                    })*
                    _ => Err(ConfigError::UnknownKey(key.to_string())),
                }
            }

            pub fn entries(&self) -> BTreeMap<String, String> {
                let mut m = BTreeMap::new();
                $(m.insert($key.to_string(), format_value!(self.$field, $kind));)*
                m
            }
        }
    };
}

macro_rules! parse_value {
    ($self:ident, $field:ident, f64, $key:ident, $value:ident) => {{
        let v: f64 = $value
            .parse()
            .map_err(|e| ConfigError::Parse { line: 0, msg: format!("{}: {e}", $key) })?;
        if v <= 0.0 && !matches!($key, "descriptor_height_gate") {
            return Err(ConfigError::NonPositive { key: $key.to_string(), value: v });
        }
        Ok::<f64, ConfigError>(v)
    }};
    ($self:ident, $field:ident, usize, $key:ident, $value:ident) => {{
        let v: usize = $value
            .parse()
            .map_err(|e| ConfigError::Parse { line: 0, msg: format!("{}: {e}", $key) })?;
        if v == 0 {
            return Err(ConfigError::NonPositive { key: $key.to_string(), value: 0.0 });
        }
        Ok::<usize, ConfigError>(v)
    }};
    ($self:ident, $field:ident, u64, $key:ident, $value:ident) => {{
        $value
            .parse::<u64>()
            .map_err(|e| ConfigError::Parse { line: 0, msg: format!("{}: {e}", $key) })
    }};
    ($self:ident, $field:ident, bool, $key:ident, $value:ident) => {{
        $value
            .parse::<bool>()
            .map_err(|e| ConfigError::Parse { line: 0, msg: format!("{}: {e}", $key) })
    }};
    ($self:ident, $field:ident, f64_any, $key:ident, $value:ident) => {{
        $value
            .parse::<f64>()
            .map_err(|e| ConfigError::Parse { line: 0, msg: format!("{}: {e}", $key) })
    }};
}

macro_rules! format_value {
    ($v:expr, f64) => {
        format!("{}", $v)
    };
    ($v:expr, f64_any) => {
        format!("{}", $v)
    };
    ($v:expr, usize) => {
        format!("{}", $v)
    };
    ($v:expr, u64) => {
        format!("{}", $v)
    };
    ($v:expr, bool) => {
        format!("{}", $v)
    };
}

config_fields! {
    "submap_max_keyframes" => submap_max_keyframes: usize,
    "submap_translation_gate" => submap_translation_gate: f64,
    "descriptor_sectors" => descriptor_sectors: usize,
    "descriptor_rings" => descriptor_rings: usize,
    "descriptor_max_range" => descriptor_max_range: f64,
    "descriptor_height_gate" => descriptor_height_gate: f64_any,
    "propagation_neighbors" => propagation_neighbors: usize,
    "window_rlm" => window_rlm: usize,
    "window_ilm" => window_ilm: usize,
    "overlap_threshold" => overlap_threshold: f64,
    "overlap_half_side" => overlap_half_side: f64,
    "submap_search_radius" => submap_search_radius: f64,
    "keyframe_translation" => keyframe_translation: f64,
    "keyframe_rotation" => keyframe_rotation: f64,
    "keyframe_leaf" => keyframe_leaf: f64,
    "map_leaf" => map_leaf: f64,
    "scan_match_sigma_t" => scan_match_sigma_t: f64,
    "scan_match_sigma_r" => scan_match_sigma_r: f64,
    "fitness_floor" => fitness_floor: f64,
    "anchor_sigma_central" => anchor_sigma_central: f64,
    "anchor_sigma_subsidiary" => anchor_sigma_subsidiary: f64,
    "gravity" => gravity: f64,
    "gyro_noise_density" => gyro_noise_density: f64,
    "accel_noise_density" => accel_noise_density: f64,
    "immediate_update" => immediate_update: bool,
    "seed" => seed: u64,
}

impl RunConfig {
    /// Parse a "key = value" (or "key value") flat text file.
    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = if let Some((k, v)) = line.split_once('=') {
                (k.trim(), v.trim())
            } else if let Some((k, v)) = line.split_once(char::is_whitespace) {
                (k.trim(), v.trim())
            } else {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    msg: "expected key = value".into(),
                });
            };
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}
