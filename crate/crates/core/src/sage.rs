//! Frequency-domain SAGE extraction of specular multipath components.
//!
//! Each path is modelled as `alpha * c(Omega) * exp(-j 2 pi f_k tau)` on one
//! sub-array. Paths are added one at a time from a correlation-based
//! initializer and refined by alternating E-steps (subtract every other
//! path) and coordinate-wise M-steps (delay, then direction, then the
//! closed-form amplitude). Extraction stops once a new path would sit more
//! than `stop_dynamic_range_db` below the strongest one.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use crate::array::{Direction, SubArray};
use crate::channel::path_response;
use crate::error::{Error, Result};

/// One specular path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultipathComponent {
    pub amplitude: Complex64,
    /// Radians from boresight. For a horizontal line array this is the cone
    /// angle `asin(u . axis_u)`.
    pub azimuth: f64,
    /// `None` when the sub-array has no vertical extent.
    pub elevation: Option<f64>,
    /// Seconds.
    pub delay: f64,
    /// dB relative to the strongest path of the same extraction.
    pub power_db: f64,
}

impl MultipathComponent {
    pub fn new(amplitude: Complex64, azimuth: f64, elevation: Option<f64>, delay: f64) -> Self {
        Self {
            amplitude,
            azimuth,
            elevation,
            delay,
            power_db: 0.0,
        }
    }

    pub fn direction(&self) -> Direction {
        Direction::new(self.azimuth, self.elevation.unwrap_or(0.0))
    }

    pub fn power(&self) -> f64 {
        self.amplitude.norm_sqr()
    }

    /// Amplitude in dB, `20 log10 |alpha|`.
    pub fn amplitude_db(&self) -> f64 {
        10.0 * self.power().log10()
    }

    /// A component whose residual carried no energy.
    pub fn is_dead(&self) -> bool {
        self.amplitude.norm() == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SageConfig {
    pub max_paths: usize,
    pub stop_dynamic_range_db: f64,
    /// Coarse delay step; `None` means a quarter of the inverse bandwidth.
    pub delay_step: Option<f64>,
    /// Largest delay searched; `None` means the unambiguous range `1 / df`.
    pub delay_span: Option<f64>,
    /// Coarse angle step, radians.
    pub angle_step: f64,
    /// Fine angle step, radians.
    pub fine_angle_step: f64,
    /// Number of x4 delay refinements after the coarse search.
    pub refinement_levels: usize,
    pub em_cycles: usize,
}

impl Default for SageConfig {
    fn default() -> Self {
        Self {
            max_paths: 5,
            stop_dynamic_range_db: 30.0,
            delay_step: None,
            delay_span: None,
            angle_step: 1f64.to_radians(),
            fine_angle_step: 0.1f64.to_radians(),
            refinement_levels: 2,
            em_cycles: 10,
        }
    }
}

impl SageConfig {
    /// Single-path configuration used for fingerprint features.
    pub fn single_path() -> Self {
        Self {
            max_paths: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stop_dynamic_range_db > 0.0) {
            return Err(Error::invalid("stop dynamic range must be positive"));
        }
        if !(self.angle_step > 0.0 && self.fine_angle_step > 0.0) {
            return Err(Error::invalid("angle grid steps must be positive"));
        }
        if matches!(self.delay_step, Some(s) if !(s > 0.0)) || matches!(self.delay_span, Some(s) if !(s > 0.0)) {
            return Err(Error::invalid("delay grid must be nonempty"));
        }
        if self.max_paths == 0 {
            return Err(Error::invalid("max_paths must be at least 1"));
        }
        Ok(())
    }
}

/// Search context for one sub-array and subcarrier grid.
struct Searcher<'a> {
    sub: &'a SubArray,
    freqs: &'a [f64],
    df: f64,
    fft: Arc<dyn Fft<f64>>,
    fft_len: usize,
    coarse_delay: f64,
    span: f64,
    cfg: &'a SageConfig,
}

impl<'a> Searcher<'a> {
    fn new(sub: &'a SubArray, freqs: &'a [f64], cfg: &'a SageConfig) -> Result<Self> {
        cfg.validate()?;
        if sub.is_empty() {
            return Err(Error::invalid("empty sub-array"));
        }
        let k = freqs.len();
        let df = if k > 1 {
            (freqs[k - 1] - freqs[0]) / (k - 1) as f64
        } else {
            return Err(Error::invalid("need at least two subcarriers to resolve delay"));
        };
        let bandwidth = df * k as f64;
        let step = cfg.delay_step.unwrap_or(1.0 / (4.0 * bandwidth));
        let fft_len = ((1.0 / (df * step)).ceil() as usize).max(k);
        let span = cfg.delay_span.unwrap_or(1.0 / df).min(1.0 / df);
        Ok(Self {
            sub,
            freqs,
            df,
            fft: FftPlanner::new().plan_fft_inverse(fft_len),
            fft_len,
            coarse_delay: 1.0 / (df * fft_len as f64),
            span,
            cfg,
        })
    }

    fn steering(&self, dir: Direction) -> Vec<Complex64> {
        crate::array::steering_unchecked(self.sub, dir)
    }

    /// `y_k = c^H x_k`, the beamformed response per subcarrier.
    fn beamform(&self, x: ArrayView2<Complex64>, dir: Direction) -> Vec<Complex64> {
        let c = self.steering(dir);
        let mut y = vec![Complex64::new(0.0, 0.0); x.ncols()];
        for (m, row) in x.rows().into_iter().enumerate() {
            let w = c[m].conj();
            for (yk, v) in y.iter_mut().zip(row.iter()) {
                *yk += w * v;
            }
        }
        y
    }

    /// `z_m = sum_k x_mk exp(+j 2 pi f_k tau)`, the delay-matched response per element.
    fn delay_match(&self, x: ArrayView2<Complex64>, tau: f64) -> Vec<Complex64> {
        let w: Vec<Complex64> = self
            .freqs
            .iter()
            .map(|f| Complex64::from_polar(1.0, 2.0 * PI * f * tau))
            .collect();
        x.rows()
            .into_iter()
            .map(|row| row.iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn delay_power(&self, y: &[Complex64], tau: f64) -> f64 {
        let step = Complex64::from_polar(1.0, 2.0 * PI * self.df * tau);
        let mut ph = Complex64::new(1.0, 0.0);
        let mut acc = Complex64::new(0.0, 0.0);
        for v in y {
            acc += v * ph;
            ph *= step;
        }
        acc.norm_sqr()
    }

    fn angle_power(&self, z: &[Complex64], dir: Direction) -> f64 {
        self.steering(dir)
            .iter()
            .zip(z)
            .map(|(c, v)| c.conj() * v)
            .sum::<Complex64>()
            .norm_sqr()
    }

    fn coarse_bins(&self) -> usize {
        ((self.span / self.coarse_delay).ceil() as usize).clamp(1, self.fft_len)
    }

    /// Zero-padded IDFT power of `y`, one value per coarse delay bin.
    fn delay_profile(&self, y: &[Complex64]) -> Vec<f64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        buf[..y.len()].copy_from_slice(y);
        self.fft.process(&mut buf);
        buf.iter().take(self.coarse_bins()).map(|v| v.norm_sqr()).collect()
    }

    fn refine_delay(&self, f: &dyn Fn(f64) -> f64, mut tau: f64, mut best: f64) -> (f64, f64) {
        let mut step = self.coarse_delay;
        for _ in 0..self.cfg.refinement_levels {
            step /= 4.0;
            let centre = tau;
            for j in -4i32..=4 {
                let t = centre + j as f64 * step;
                if !(0.0..self.span).contains(&t) {
                    continue;
                }
                let v = f(t);
                if v > best {
                    best = v;
                    tau = t;
                }
            }
        }
        parabolic(f, tau, step, best, |t| (0.0..self.span).contains(&t))
    }

    /// Global delay search on `y` (already beamformed).
    fn search_delay(&self, y: &[Complex64]) -> (f64, f64) {
        let profile = self.delay_profile(y);
        let (bin, _) = argmax(&profile);
        let tau = bin as f64 * self.coarse_delay;
        let f = |t: f64| self.delay_power(y, t);
        self.refine_delay(&f, tau, f(tau))
    }

    fn azimuth_grid(&self, step: f64, centre: f64, half: f64) -> Vec<f64> {
        if !self.sub.has_azimuth() {
            return vec![0.0];
        }
        grid(centre, half, step, -PI / 2.0, PI / 2.0)
    }

    fn elevation_grid(&self, step: f64, centre: f64, half: f64) -> Vec<f64> {
        if !self.sub.has_elevation() {
            return vec![0.0];
        }
        grid(centre, half, step, -PI / 2.0, PI / 2.0)
    }

    fn best_on(&self, z: &[Complex64], az: &[f64], el: &[f64]) -> (Direction, f64) {
        let mut best = (Direction::new(az[0], el[0]), f64::NEG_INFINITY);
        for &e in el {
            for &a in az {
                let d = Direction::new(a, e);
                let v = self.angle_power(z, d);
                if v > best.1 {
                    best = (d, v);
                }
            }
        }
        best
    }

    /// Global direction search on `z` (already delay-matched): coarse grid,
    /// then the fine grid within one coarse step, then a parabolic touch-up.
    fn search_direction(&self, z: &[Complex64]) -> (Direction, f64) {
        let coarse = self.cfg.angle_step;
        let fine = self.cfg.fine_angle_step;
        let mut best = if self.sub.is_planar() {
            let c3 = 3.0 * coarse;
            let (d, _) = self.best_on(z, &self.azimuth_grid(c3, 0.0, PI), &self.elevation_grid(c3, 0.0, PI));
            self.best_on(
                z,
                &self.azimuth_grid(coarse, d.azimuth, c3),
                &self.elevation_grid(coarse, d.elevation, c3),
            )
        } else {
            self.best_on(z, &self.azimuth_grid(coarse, 0.0, PI), &self.elevation_grid(coarse, 0.0, PI))
        };
        let d = best.0;
        best = self.best_on(
            z,
            &self.azimuth_grid(fine, d.azimuth, coarse),
            &self.elevation_grid(fine, d.elevation, coarse),
        );
        self.polish_direction(z, best, fine)
    }

    fn polish_direction(&self, z: &[Complex64], best: (Direction, f64), step: f64) -> (Direction, f64) {
        let (mut d, mut v) = best;
        let in_range = |a: f64| (-PI / 2.0..=PI / 2.0).contains(&a);
        if self.sub.has_azimuth() {
            let el = d.elevation;
            let f = |a: f64| self.angle_power(z, Direction::new(a, el));
            let (a, nv) = parabolic(&f, d.azimuth, step, v, in_range);
            d.azimuth = a;
            v = nv;
        }
        if self.sub.has_elevation() {
            let az = d.azimuth;
            let f = |e: f64| self.angle_power(z, Direction::new(az, e));
            let (e, nv) = parabolic(&f, d.elevation, step, v, in_range);
            d.elevation = e;
            v = nv;
        }
        (d, v)
    }

    fn amplitude(&self, x: ArrayView2<Complex64>, tau: f64, dir: Direction) -> Complex64 {
        let z = self.delay_match(x, tau);
        let c = self.steering(dir);
        let corr: Complex64 = c.iter().zip(&z).map(|(c, v)| c.conj() * v).sum();
        corr / (x.nrows() * x.ncols()) as f64
    }

    fn component(&self, x: ArrayView2<Complex64>, tau: f64, dir: Direction) -> MultipathComponent {
        let elevation = self.sub.has_elevation().then_some(dir.elevation);
        let azimuth = if self.sub.has_azimuth() { dir.azimuth } else { 0.0 };
        MultipathComponent::new(self.amplitude(x, tau, dir), azimuth, elevation, tau)
    }

    fn objective(&self, x: ArrayView2<Complex64>, tau: f64, dir: Direction) -> f64 {
        self.angle_power(&self.delay_match(x, tau), dir)
    }

    fn initialize(&self, x: ArrayView2<Complex64>) -> Result<MultipathComponent> {
        if x.iter().all(|v| v.norm_sqr() == 0.0) {
            return Err(Error::NoPath);
        }
        // noncoherent delay profile summed over elements
        let mut profile = vec![0.0; self.coarse_bins()];
        for row in x.rows() {
            let y: Vec<Complex64> = row.to_vec();
            for (acc, p) in profile.iter_mut().zip(self.delay_profile(&y)) {
                *acc += p;
            }
        }
        let (bin, _) = argmax(&profile);
        let tau0 = bin as f64 * self.coarse_delay;
        let noncoherent = |t: f64| {
            x.rows()
                .into_iter()
                .map(|row| self.delay_power(row.as_slice().unwrap_or(&row.to_vec()), t))
                .sum::<f64>()
        };
        let (tau, _) = self.refine_delay(&noncoherent, tau0, noncoherent(tau0));
        let (dir, _) = self.search_direction(&self.delay_match(x, tau));
        Ok(self.component(x, tau, dir))
    }

    fn maximize(&self, x: ArrayView2<Complex64>, current: &MultipathComponent) -> MultipathComponent {
        if x.iter().all(|v| v.norm_sqr() == 0.0) {
            return MultipathComponent {
                amplitude: Complex64::new(0.0, 0.0),
                ..*current
            };
        }
        let mut dir = current.direction();
        let mut tau = current.delay;
        let mut best = self.objective(x, tau, dir);

        let (t, v) = self.search_delay(&self.beamform(x, dir));
        if v >= best {
            tau = t;
            best = v;
        }
        let (d, v) = self.search_direction(&self.delay_match(x, tau));
        if v >= best {
            dir = d;
        }
        self.component(x, tau, dir)
    }
}

fn grid(centre: f64, half: f64, step: f64, lo: f64, hi: f64) -> Vec<f64> {
    let n = (half / step).round() as i64;
    let mut out: Vec<f64> = (-n..=n)
        .map(|j| centre + j as f64 * step)
        .filter(|a| *a >= lo - 1e-12 && *a <= hi + 1e-12)
        .map(|a| a.clamp(lo, hi))
        .collect();
    if out.is_empty() {
        out.push(centre.clamp(lo, hi));
    }
    out
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Vertex of the parabola through `x - h, x, x + h`, kept only when it
/// improves on `fx`.
fn parabolic(f: &dyn Fn(f64) -> f64, x: f64, h: f64, fx: f64, valid: impl Fn(f64) -> bool) -> (f64, f64) {
    if !(valid(x - h) && valid(x + h)) {
        return (x, fx);
    }
    let (a, b) = (f(x - h), f(x + h));
    let denom = a - 2.0 * fx + b;
    if !(denom < 0.0) {
        return (x, fx);
    }
    let offset = (0.5 * h * (a - b) / denom).clamp(-h, h);
    let cand = x + offset;
    let v = f(cand);
    if v >= fx {
        (cand, v)
    } else {
        (x, fx)
    }
}

fn check_dims(x: &Array2<Complex64>, sub: &SubArray, freqs: &[f64]) -> Result<()> {
    if x.dim() != (sub.len(), freqs.len()) {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", sub.len(), freqs.len()),
            got: format!("{:?}", x.dim()),
        });
    }
    if x.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(Error::invalid("CSI contains non-finite entries"));
    }
    Ok(())
}

/// Initial estimate of the dominant path in `residual`.
pub fn initialize_mpc(
    residual: &Array2<Complex64>,
    sub: &SubArray,
    freqs: &[f64],
    cfg: &SageConfig,
) -> Result<MultipathComponent> {
    check_dims(residual, sub, freqs)?;
    Searcher::new(sub, freqs, cfg)?.initialize(residual.view())
}

/// `csi` minus the contribution of every component except `l`.
pub fn expectation_step(
    csi: &Array2<Complex64>,
    components: &[MultipathComponent],
    l: usize,
    sub: &SubArray,
    freqs: &[f64],
) -> Result<Array2<Complex64>> {
    check_dims(csi, sub, freqs)?;
    if l >= components.len() {
        return Err(Error::invalid(format!("path index {l} out of {}", components.len())));
    }
    let mut out = csi.clone();
    for (i, c) in components.iter().enumerate() {
        if i != l && !c.is_dead() {
            out -= &path_response(sub, c, freqs);
        }
    }
    Ok(out)
}

/// One coordinate-wise refresh of `current` against `residual`. A zero
/// residual yields a dead component (zero amplitude).
pub fn maximization_step(
    residual: &Array2<Complex64>,
    sub: &SubArray,
    freqs: &[f64],
    current: &MultipathComponent,
    cfg: &SageConfig,
) -> Result<MultipathComponent> {
    check_dims(residual, sub, freqs)?;
    Ok(Searcher::new(sub, freqs, cfg)?.maximize(residual.view(), current))
}

fn moved(a: &MultipathComponent, b: &MultipathComponent, angle_tol: f64, delay_tol: f64) -> bool {
    (a.azimuth - b.azimuth).abs() > angle_tol
        || (a.elevation.unwrap_or(0.0) - b.elevation.unwrap_or(0.0)).abs() > angle_tol
        || (a.delay - b.delay).abs() > delay_tol
}

/// Successive extraction with SAGE sweeps. Output is sorted by descending
/// power with `power_db` relative to the strongest path.
pub fn sage_extract(
    csi: &Array2<Complex64>,
    sub: &SubArray,
    freqs: &[f64],
    cfg: &SageConfig,
) -> Result<Vec<MultipathComponent>> {
    check_dims(csi, sub, freqs)?;
    let s = Searcher::new(sub, freqs, cfg)?;
    let fine_delay = s.coarse_delay / 4f64.powi(cfg.refinement_levels as i32);
    let threshold = 10f64.powf(-cfg.stop_dynamic_range_db / 10.0);
    let mut comps: Vec<MultipathComponent> = Vec::new();
    let mut residual = csi.clone();
    while comps.len() < cfg.max_paths {
        let init = match s.initialize(residual.view()) {
            Ok(c) => c,
            Err(Error::NoPath) => break,
            Err(e) => return Err(e),
        };
        let strongest = comps.iter().map(|c| c.power()).fold(0.0, f64::max);
        if init.power() == 0.0 || (strongest > 0.0 && init.power() <= strongest * threshold) {
            break;
        }
        comps.push(init);
        for _ in 0..cfg.em_cycles {
            let mut any = false;
            for l in 0..comps.len() {
                let r = expectation_step(csi, &comps, l, sub, freqs)?;
                let next = s.maximize(r.view(), &comps[l]);
                any |= moved(&next, &comps[l], cfg.fine_angle_step, fine_delay);
                comps[l] = next;
            }
            if !any {
                break;
            }
        }
        comps.retain(|c| !c.is_dead());
        residual = csi.clone();
        for c in &comps {
            residual -= &path_response(sub, c, freqs);
        }
        if comps.is_empty() {
            break;
        }
    }
    comps.sort_by(|a, b| b.power().total_cmp(&a.power()));
    if let Some(top) = comps.first().map(|c| c.power()) {
        for c in &mut comps {
            c.power_db = 10.0 * (c.power() / top).log10();
        }
    }
    Ok(comps)
}

/// Default LoS power window, dB.
pub const LOS_WINDOW_DB: f64 = 6.0;

/// Earliest component within `window_db` of the strongest.
pub fn select_los(components: &[MultipathComponent], window_db: f64) -> Result<MultipathComponent> {
    let top = components
        .iter()
        .map(|c| c.power())
        .fold(f64::NEG_INFINITY, f64::max);
    if components.is_empty() || !(top > 0.0) {
        return Err(Error::NoLos);
    }
    let floor = top * 10f64.powf(-window_db / 10.0);
    components
        .iter()
        .filter(|c| c.power() >= floor)
        .min_by(|a, b| a.delay.total_cmp(&b.delay))
        .copied()
        .ok_or(Error::NoLos)
}

/// One row of the MPC export.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcRecord {
    pub sample_id: usize,
    pub subarray_id: usize,
    pub path_index: usize,
    pub component: MultipathComponent,
}

pub const MPC_CSV_HEADER: &str = "sample_id,subarray_id,path_index,power_db,azimuth_deg,elevation_deg,tof_ns,amplitude_db";

pub fn write_mpc_csv<W: Write>(mut w: W, records: &[MpcRecord]) -> Result<()> {
    writeln!(w, "{MPC_CSV_HEADER}")?;
    for r in records {
        let c = &r.component;
        let el = c.elevation.map(|e| format!("{}", e.to_degrees())).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.sample_id,
            r.subarray_id,
            r.path_index,
            c.power_db,
            c.azimuth.to_degrees(),
            el,
            c.delay * 1e9,
            c.amplitude_db()
        )?;
    }
    Ok(())
}
