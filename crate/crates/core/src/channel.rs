//! Synthetic CSI: plane-wave multipath synthesis, the hardware phase-error
//! model, and labelled grid datasets with spherical-wavefront propagation.

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::array::{self, ArrayTopology, Direction, SubArray, Vec3, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::sage::MultipathComponent;

pub const DEFAULT_BANDWIDTH_HZ: f64 = 20e6;
pub const DEFAULT_SUBCARRIERS: usize = 100;

/// `n` evenly spaced subcarriers of spacing `bandwidth / n` centered on `center`.
pub fn subcarrier_grid(center: f64, bandwidth: f64, n: usize) -> Vec<f64> {
    let df = bandwidth / n as f64;
    let mid = (n as f64 - 1.0) / 2.0;
    (0..n).map(|k| center + (k as f64 - mid) * df).collect()
}

/// Complex channel response, antennas x subcarriers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiMatrix {
    pub values: Array2<Complex64>,
    pub frequencies: Vec<f64>,
}

impl CsiMatrix {
    pub fn new(values: Array2<Complex64>, frequencies: Vec<f64>) -> Result<Self> {
        if values.ncols() != frequencies.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} subcarrier frequencies", values.ncols()),
                got: format!("{}", frequencies.len()),
            });
        }
        check_frequencies(&frequencies)?;
        Ok(Self {
            values,
            frequencies,
        })
    }

    pub fn antennas(&self) -> usize {
        self.values.nrows()
    }

    pub fn subcarriers(&self) -> usize {
        self.values.ncols()
    }

    pub fn center_frequency(&self) -> f64 {
        let n = self.frequencies.len();
        (self.frequencies[0] + self.frequencies[n - 1]) / 2.0
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        let n = self.frequencies.len();
        if n < 2 {
            return 0.0;
        }
        (self.frequencies[n - 1] - self.frequencies[0]) / (n - 1) as f64
    }

    /// Rows belonging to `sub`, in sub-array element order.
    pub fn select(&self, sub: &SubArray) -> Result<Array2<Complex64>> {
        let k = self.subcarriers();
        let mut out = Array2::zeros((sub.len(), k));
        for (row, &idx) in sub.element_indices.iter().enumerate() {
            if idx >= self.antennas() {
                return Err(Error::invalid(format!(
                    "antenna index {idx} outside a {}-antenna CSI",
                    self.antennas()
                )));
            }
            out.row_mut(row).assign(&self.values.row(idx));
        }
        Ok(out)
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|z| z.norm_sqr()).sum()
    }
}

fn check_frequencies(f: &[f64]) -> Result<()> {
    if f.is_empty() {
        return Err(Error::invalid("empty subcarrier grid"));
    }
    if f.len() >= 2 {
        let step = (f[f.len() - 1] - f[0]) / (f.len() - 1) as f64;
        for w in f.windows(2) {
            let d = w[1] - w[0];
            if !(d > 0.0) || (d - step).abs() > 1e-6 * step {
                return Err(Error::invalid("subcarrier frequencies must be increasing and evenly spaced"));
            }
        }
    }
    Ok(())
}

/// Specular paths of a plane-wave scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub paths: Vec<MultipathComponent>,
}

impl PathSet {
    pub fn new(paths: Vec<MultipathComponent>) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::invalid("a path set needs at least one path"));
        }
        for p in &paths {
            if !(p.delay >= 0.0) {
                return Err(Error::invalid("path delays must be non-negative"));
            }
            if !(p.amplitude.norm() > 0.0) {
                return Err(Error::invalid("path amplitudes must be nonzero"));
            }
        }
        Ok(Self { paths })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

/// Single-path contribution `alpha * c(Omega) * exp(-j 2 pi f tau)` over one
/// sub-array.
pub fn path_response(sub: &SubArray, path: &MultipathComponent, freqs: &[f64]) -> Array2<Complex64> {
    let steer = array::steering_unchecked(sub, path.direction());
    let delay: Vec<Complex64> = freqs
        .iter()
        .map(|f| Complex64::from_polar(1.0, -2.0 * PI * f * path.delay))
        .collect();
    Array2::from_shape_fn((sub.len(), freqs.len()), |(m, k)| path.amplitude * steer[m] * delay[k])
}

/// Plane-wave synthesis over a single sub-array.
pub fn synthesize_subarray(sub: &SubArray, paths: &PathSet, freqs: &[f64]) -> Result<CsiMatrix> {
    check_frequencies(freqs)?;
    let mut out = Array2::zeros((sub.len(), freqs.len()));
    for p in &paths.paths {
        out += &path_response(sub, p, freqs);
    }
    CsiMatrix::new(out, freqs.to_vec())
}

/// Plane-wave synthesis over a whole topology. Path directions are taken in
/// each panel's local frame with the phase reference at the panel's first
/// element; the transmitter is a single isotropic dipole.
pub fn synthesize_csi(topo: &ArrayTopology, paths: &PathSet, freqs: &[f64]) -> Result<CsiMatrix> {
    check_frequencies(freqs)?;
    let mut out = Array2::zeros((topo.len(), freqs.len()));
    for sub in array::whole_panels(topo) {
        let part = synthesize_subarray(&sub, paths, freqs)?;
        for (row, &idx) in sub.element_indices.iter().enumerate() {
            out.row_mut(idx).assign(&part.values.row(row));
        }
    }
    CsiMatrix::new(out, freqs.to_vec())
}

/// Hardware and synchronization phase errors plus additive noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentParams {
    /// SFO phase slope, radians per subcarrier index.
    pub sfo_slope: f64,
    /// Symbol timing offset in samples; contributes `2 pi n K / N` at index `n`.
    pub sto_samples: i64,
    /// IQ gain mismatch.
    pub iq_gain: f64,
    /// IQ time offset, radians per subcarrier index.
    pub iq_time: f64,
    /// IQ phase mismatch, radians.
    pub iq_phase: f64,
    /// Carrier phase offset shared by all antennas, radians.
    pub cpo: f64,
    /// Per-antenna phase offsets, radians in `(-pi, pi]`.
    pub antenna_offsets: Vec<f64>,
    /// Standard deviation of the complex noise (total over I and Q).
    pub noise_std: f64,
}

impl ImpairmentParams {
    pub fn none(antennas: usize) -> Self {
        Self {
            sfo_slope: 0.0,
            sto_samples: 0,
            iq_gain: 0.0,
            iq_time: 0.0,
            iq_phase: 0.0,
            cpo: 0.0,
            antenna_offsets: vec![0.0; antennas],
            noise_std: 0.0,
        }
    }

    /// Phase error (radians) at 1-based subcarrier index `n` out of
    /// `subcarriers`, excluding the antenna and carrier terms.
    pub fn frequency_phase(&self, n: usize, subcarriers: usize) -> f64 {
        let n = n as f64;
        self.sfo_slope * n
            + 2.0 * PI * n * self.sto_samples as f64 / subcarriers as f64
            + iq_phase(n, self.iq_gain, self.iq_time, self.iq_phase)
    }

    pub fn total_phase(&self, antenna: usize, n: usize, subcarriers: usize) -> f64 {
        self.frequency_phase(n, subcarriers) + self.cpo + self.antenna_offsets[antenna]
    }
}

/// Nonlinear IQ-imbalance phase `atan(g sin(n t + p) / cos(n t))`.
pub fn iq_phase(n: f64, gain: f64, time: f64, phase: f64) -> f64 {
    if gain == 0.0 {
        return 0.0;
    }
    (gain * (n * time + phase).sin() / (n * time).cos()).atan()
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// SplitMix64 finalizer used to derive per-sample seeds: the seed of item
/// `index` in stream `stream` is `splitmix(splitmix(seed ^ stream) + index)`.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(seed ^ stream).wrapping_add(index))
}

/// Applies the phase-error model and adds circular complex Gaussian noise.
/// Deterministic for a given `seed`; no random numbers are drawn when
/// `noise_std` is zero.
pub fn apply_impairments(clean: &CsiMatrix, imp: &ImpairmentParams, seed: u64) -> Result<CsiMatrix> {
    let (nr, nk) = clean.values.dim();
    if imp.antenna_offsets.len() != nr {
        return Err(Error::DimensionMismatch {
            expected: format!("{nr} antenna offsets"),
            got: format!("{}", imp.antenna_offsets.len()),
        });
    }
    if !(imp.noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be non-negative"));
    }
    let freq_phase: Vec<f64> = (1..=nk).map(|n| imp.frequency_phase(n, nk)).collect();
    let mut values = clean.values.clone();
    for ((r, k), z) in values.indexed_iter_mut() {
        let phi = freq_phase[k] + imp.cpo + imp.antenna_offsets[r];
        if phi != 0.0 {
            *z *= Complex64::from_polar(1.0, -phi);
        }
    }
    if imp.noise_std > 0.0 {
        add_noise(&mut values, imp.noise_std, seed);
    }
    CsiMatrix::new(values, clean.frequencies.clone())
}

pub(crate) fn add_noise(values: &mut Array2<Complex64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = std / 2f64.sqrt();
    for z in values.iter_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *z += Complex64::new(re * s, im * s);
    }
}

/// Point scatterer producing a single-bounce path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Vec3,
    /// Linear amplitude reflection coefficient.
    pub coefficient: f64,
}

/// Axis-aligned rectangle in the floor plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 - 1e-12
            && other.y0 >= self.y0 - 1e-12
            && other.x1 <= self.x1 + 1e-12
            && other.y1 <= self.y1 + 1e-12
    }

    pub fn contains_point(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    /// `n x n` grid including the corners, row-major in y then x.
    pub fn grid(&self, n: usize) -> Vec<[f64; 2]> {
        let step = |a: f64, b: f64, i: usize| a + (b - a) * i as f64 / (n - 1) as f64;
        let mut out = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                out.push([step(self.x0, self.x1, i), step(self.y0, self.y1, j)]);
            }
        }
        out
    }
}

/// Propagation environment of a synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Target area the arrays are deployed around.
    pub area: Rect,
    pub ue_height: f64,
    #[serde(default)]
    pub scatterers: Vec<Scatterer>,
    /// Amplitude reflection coefficient of the floor (`z = 0`); zero for
    /// no floor bounce.
    #[serde(default)]
    pub floor_reflection: f64,
}

impl Scene {
    /// Clean response for a UE at `ue`: LoS, scatterer bounces and the
    /// floor bounce, modelled as a path from the UE's mirror image.
    pub fn csi(&self, topo: &ArrayTopology, ue: Vec3, freqs: &[f64]) -> Result<CsiMatrix> {
        let mut h = spherical_csi(topo, ue, &self.scatterers, freqs)?;
        if self.floor_reflection != 0.0 {
            let image = spherical_csi(topo, [ue[0], ue[1], -ue[2]], &[], freqs)?;
            h.values.scaled_add(Complex64::new(self.floor_reflection, 0.0), &image.values);
        }
        Ok(h)
    }
}

/// Exact spherical-wavefront response for a UE at `ue`: free-space LoS plus
/// one bounce per scatterer. Amplitudes follow `lambda / (4 pi r)` over the
/// full path length.
pub fn spherical_csi(topo: &ArrayTopology, ue: Vec3, scatterers: &[Scatterer], freqs: &[f64]) -> Result<CsiMatrix> {
    check_frequencies(freqs)?;
    let positions = topo.element_positions();
    let lambda = topo.wavelength;
    let mut values = Array2::zeros((positions.len(), freqs.len()));
    for (e, q) in positions.iter().enumerate() {
        let mut add_path = |len: f64, gain: f64| {
            let amp = gain * lambda / (4.0 * PI * len);
            let tau = len / SPEED_OF_LIGHT;
            for (k, f) in freqs.iter().enumerate() {
                values[(e, k)] += Complex64::from_polar(amp, -2.0 * PI * f * tau);
            }
        };
        add_path(array::norm(array::sub(ue, *q)), 1.0);
        for s in scatterers {
            let len = array::norm(array::sub(ue, s.position)) + array::norm(array::sub(s.position, *q));
            add_path(len, s.coefficient);
        }
    }
    CsiMatrix::new(values, freqs.to_vec())
}

/// LoS-only model used as the calibration reference.
pub fn los_csi(topo: &ArrayTopology, ue: Vec3, freqs: &[f64]) -> Result<CsiMatrix> {
    spherical_csi(topo, ue, &[], freqs)
}

/// One labelled CSI snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub csi: CsiMatrix,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub topology: ArrayTopology,
    pub frequencies: Vec<f64>,
    pub ue_height: f64,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.samples.iter().map(|s| s.position).collect()
    }
}

/// Noise standard deviation giving `snr_db` relative to the mean per-entry
/// power of the clean response at the region center.
pub fn noise_std_for_snr(topo: &ArrayTopology, scene: &Scene, region: &Rect, freqs: &[f64], snr_db: f64) -> Result<f64> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(0.0);
    }
    let c = region.center();
    let reference = scene.csi(topo, [c[0], c[1], scene.ue_height], freqs)?;
    let power = reference.energy() / reference.values.len() as f64;
    Ok((power / 10f64.powf(snr_db / 10.0)).sqrt())
}

/// Synthesizes impaired CSI at each position. Sample `i` draws its noise from
/// `mix_seed(seed, 0, i)`. `truth` is the as-built array used for propagation
/// and may differ from the nominal `topo` recorded in the dataset.
pub fn generate_at_points(
    topo: &ArrayTopology,
    truth: &ArrayTopology,
    scene: &Scene,
    points: &[[f64; 2]],
    freqs: &[f64],
    imp: &ImpairmentParams,
    seed: u64,
) -> Result<LabeledDataset> {
    if truth.len() != topo.len() {
        return Err(Error::invalid("as-built topology must match the nominal element count"));
    }
    let samples = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let clean = scene.csi(truth, [p[0], p[1], scene.ue_height], freqs)?;
            let csi = apply_impairments(&clean, imp, mix_seed(seed, 0, i as u64))?;
            Ok(Sample { csi, position: *p })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        topology: topo.clone(),
        frequencies: freqs.to_vec(),
        ue_height: scene.ue_height,
        samples,
    })
}

/// `n x n` grid of labelled samples over `region`, which must lie inside the
/// scene's target area. The noise level is set from `snr_db` (see
/// [`noise_std_for_snr`]) and overrides `imp.noise_std`.
pub fn generate_grid_dataset(
    region: &Rect,
    n: usize,
    topo: &ArrayTopology,
    imp: &ImpairmentParams,
    snr_db: f64,
    scene: &Scene,
    freqs: &[f64],
    seed: u64,
) -> Result<LabeledDataset> {
    if n < 2 {
        return Err(Error::invalid("grid needs at least 2 points per side"));
    }
    if !scene.area.contains(region) || region.x1 <= region.x0 || region.y1 <= region.y0 {
        return Err(Error::invalid("grid region must be a nonempty rectangle inside the target area"));
    }
    let mut imp = imp.clone();
    imp.noise_std = noise_std_for_snr(topo, scene, region, freqs, snr_db)?;
    generate_at_points(topo, topo, scene, &region.grid(n), freqs, &imp, seed)
}

/// Random plane-wave direction helper used by tests and the demo.
pub fn direction_deg(azimuth_deg: f64, elevation_deg: f64) -> Direction {
    Direction::new(azimuth_deg.to_radians(), elevation_deg.to_radians())
}
