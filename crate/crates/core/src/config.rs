//! Experiment configuration, read from TOML with one section per module.
//! Every field has a default, so an empty file is a valid configuration.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::array::{layouts, ArrayTopology, TopologyDescriptor, TopologyKind, Window, DEFAULT_CARRIER_HZ};
use crate::calib::LmSettings;
use crate::channel::{Rect, Scatterer, Scene, DEFAULT_BANDWIDTH_HZ, DEFAULT_SUBCARRIERS};
use crate::error::{Error, Result};
use crate::fingerprint::{MetricScheme, SearchSpace};
use crate::sage::{SageConfig, LOS_WINDOW_DB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub array: ArrayConfig,
    pub channel: ChannelConfig,
    pub impairments: ImpairmentConfig,
    pub calibration: CalibrationConfig,
    pub sage: SageConfig,
    pub fingerprint: FingerprintConfig,
    pub geo: GeoConfig,
    pub ingest: IngestConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            array: ArrayConfig::default(),
            channel: ChannelConfig::default(),
            impairments: ImpairmentConfig::default(),
            calibration: CalibrationConfig::default(),
            sage: SageConfig::default(),
            fingerprint: FingerprintConfig::default(),
            geo: GeoConfig::default(),
            ingest: IngestConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyChoice {
    Ula,
    Ura,
    Dis,
}

impl std::str::FromStr for TopologyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ula" => Ok(Self::Ula),
            "ura" => Ok(Self::Ura),
            "dis" => Ok(Self::Dis),
            other => Err(Error::Config(format!("unknown topology `{other}`"))),
        }
    }
}

/// Random as-built deviation of each panel from its nominal pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MountingError {
    pub position_std_m: f64,
    pub orientation_std_deg: f64,
}

impl Default for MountingError {
    fn default() -> Self {
        Self {
            position_std_m: 0.02,
            orientation_std_deg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    pub topology: TopologyChoice,
    /// JSON topology descriptor overriding the built-in layouts.
    pub topology_file: Option<PathBuf>,
    /// Side of the square target area, meters.
    pub side_m: f64,
    /// Distance from the area edge to the arrays, meters.
    pub standoff_m: f64,
    pub height_m: f64,
    pub carrier_hz: f64,
    /// Keep only the first `antennas` elements (square corners for URA).
    pub antennas: Option<usize>,
    /// Sub-array window `[rows, cols]`; defaults to a whole DIS panel,
    /// `1 x 8` on the ULA and `6 x 6` on the URA.
    pub window: Option<[usize; 2]>,
    pub stride: Option<[usize; 2]>,
    pub mounting: MountingError,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            topology: TopologyChoice::Dis,
            topology_file: None,
            side_m: 3.0,
            standoff_m: 1.0,
            height_m: 1.0,
            carrier_hz: DEFAULT_CARRIER_HZ,
            antennas: None,
            window: None,
            stride: None,
            mounting: MountingError::default(),
        }
    }
}

impl ArrayConfig {
    /// Nominal topology, before antenna-count reduction.
    pub fn full_topology(&self) -> Result<ArrayTopology> {
        if let Some(path) = &self.topology_file {
            let text = std::fs::read_to_string(path)?;
            return TopologyDescriptor::from_json(&text);
        }
        let (s, d, h, f) = (self.side_m, self.standoff_m, self.height_m, self.carrier_hz);
        if !(s > 0.0 && d >= 0.0 && f > 0.0) {
            return Err(Error::Config("array geometry must be positive".into()));
        }
        Ok(match self.topology {
            TopologyChoice::Ula => layouts::ula(s, d, h, f),
            TopologyChoice::Ura => layouts::ura(s, d, h, f),
            TopologyChoice::Dis => layouts::dis(s, d, h, f),
        })
    }

    pub fn topology(&self) -> Result<ArrayTopology> {
        let full = self.full_topology()?;
        match self.antennas {
            None => Ok(full),
            Some(n) if full.kind == TopologyKind::Ura => {
                let side = (n as f64).sqrt().round() as usize;
                if side * side != n {
                    return Err(Error::Config(format!("URA antenna count {n} is not a square")));
                }
                full.square_corner(side)
            }
            Some(n) => full.truncated(n),
        }
    }

    pub fn window_for(&self, topo: &ArrayTopology) -> (Window, Window) {
        let p = &topo.panels[0];
        let default = match topo.kind {
            TopologyKind::Dis => (p.rows, p.cols),
            TopologyKind::Ula => (1, 8.min(p.cols)),
            TopologyKind::Ura => (6.min(p.rows), 6.min(p.cols)),
        };
        let w = self.window.map(|w| (w[0], w[1])).unwrap_or(default);
        let s = self.stride.map(|s| (s[0], s[1])).unwrap_or(match topo.kind {
            TopologyKind::Dis => w,
            _ => (1, 1),
        });
        (w, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub bandwidth_hz: f64,
    pub subcarriers: usize,
    /// Per-entry SNR at the region center; `inf` for a noiseless run.
    pub snr_db: f64,
    pub ue_height_m: f64,
    /// UE region `[x0, y0, x1, y1]`, meters; training grids span it.
    pub region: [f64; 4],
    pub scatterers: Vec<Scatterer>,
    /// Floor reflection coefficient; zero disables the floor bounce.
    pub floor_reflection: f64,
    /// Number of random test positions inside the region.
    pub test_points: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        let s = |x: f64, y: f64, z: f64, c: f64| Scatterer {
            position: [x, y, z],
            coefficient: c,
        };
        Self {
            bandwidth_hz: DEFAULT_BANDWIDTH_HZ,
            subcarriers: DEFAULT_SUBCARRIERS,
            snr_db: 20.0,
            ue_height_m: 0.4,
            region: [0.875, 0.875, 2.125, 2.125],
            scatterers: vec![
                s(-1.6, 1.1, 1.4, 0.6),
                s(4.4, 2.2, 0.7, 0.6),
                s(1.9, 4.5, 1.9, 0.5),
                s(0.4, -1.7, 0.2, 0.5),
            ],
            floor_reflection: 0.5,
            test_points: 400,
        }
    }
}

impl ChannelConfig {
    pub fn region(&self) -> Rect {
        let r = self.region;
        Rect::new(r[0], r[1], r[2], r[3])
    }

    pub fn scene(&self, side: f64) -> Scene {
        Scene {
            area: Rect::new(0.0, 0.0, side, side),
            ue_height: self.ue_height_m,
            scatterers: self.scatterers.clone(),
            floor_reflection: self.floor_reflection,
        }
    }
}

/// Synthetic phase impairments. Per-antenna offsets are drawn uniformly
/// from `(-antenna_offset_range, antenna_offset_range]` unless listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpairmentConfig {
    pub enabled: bool,
    pub sfo_slope: f64,
    pub sto_samples: i64,
    pub iq_gain: f64,
    pub iq_time: f64,
    pub iq_phase: f64,
    pub cpo: f64,
    pub antenna_offset_range: f64,
    pub antenna_offsets: Option<Vec<f64>>,
}

impl Default for ImpairmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            sfo_slope: 0.05,
            sto_samples: 3,
            iq_gain: 0.1,
            iq_time: 0.02,
            iq_phase: 0.3,
            cpo: 1.0,
            antenna_offset_range: std::f64::consts::PI,
            antenna_offsets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub enabled: bool,
    /// The reference set is a `grid x grid` survey of the UE region.
    pub reference_grid: usize,
    pub lm: LmSettings,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            reference_grid: 8,
            lm: LmSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingerprintConfig {
    pub schemes: Vec<MetricScheme>,
    /// Training grid side `N` (N x N points over the region).
    pub grid: usize,
    pub los_window_db: f64,
    pub search: SearchSpace,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        Self {
            schemes: MetricScheme::all_schemes().to_vec(),
            grid: 11,
            los_window_db: LOS_WINDOW_DB,
            search: SearchSpace::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoConfig {
    pub enabled: bool,
    pub path_loss_exponent: f64,
}

impl Default for GeoConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            path_loss_exponent: 2.0,
        }
    }
}

/// Recorded data in the binary dataset format. When `dataset` is set no
/// synthetic data is generated: samples on the training grid train, the
/// rest test, and the training samples double as calibration references.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub dataset: Option<PathBuf>,
    /// Rescales CSI so that `|H|^2` reads as SNR.
    pub noise_variance: Option<f64>,
    /// Distance within which a sample counts as a grid point, meters.
    pub grid_tolerance_m: f64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.array.topology_file, &mut cfg.ingest.dataset].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.channel;
        if c.subcarriers < 2 || !(c.bandwidth_hz > 0.0) {
            return Err(Error::Config("need at least two subcarriers and a positive bandwidth".into()));
        }
        if c.snr_db.is_nan() {
            return Err(Error::Config("snr_db must be a number or inf".into()));
        }
        let r = c.region();
        if !(r.x1 > r.x0 && r.y1 > r.y0) {
            return Err(Error::Config("region must be a nonempty rectangle".into()));
        }
        if !(2..=101).contains(&self.fingerprint.grid) {
            return Err(Error::Config("training grid must be between 2 and 101".into()));
        }
        if self.fingerprint.schemes.is_empty() {
            return Err(Error::Config("at least one metric scheme is required".into()));
        }
        if self.calibration.enabled && self.calibration.reference_grid.pow(2) < crate::calib::MIN_REFERENCE_SAMPLES {
            return Err(Error::Config(format!(
                "calibration reference grid must hold at least {} points",
                crate::calib::MIN_REFERENCE_SAMPLES
            )));
        }
        if !(self.geo.path_loss_exponent > 0.0) {
            return Err(Error::Config("path-loss exponent must be positive".into()));
        }
        self.sage.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.fingerprint.search.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}
