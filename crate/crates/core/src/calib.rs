//! Two-stage CSI phase calibration.
//!
//! Stage one fits the frequency-domain phase error (IQ imbalance, a linear
//! SFO/STO slope and the carrier phase) to the LoS-removed residual with
//! Levenberg-Marquardt. Stage two estimates the per-antenna offsets as the
//! circular mean of what is left. Both stages need reference points with
//! known positions; the resulting [`CalibrationSolution`] is then applied to
//! new CSI directly.
//!
//! Sign convention: measured CSI is `clean * exp(-j phi)`. The LoS residual
//! `arg(measured * conj(model))` is therefore `-phi`; the fits work on the
//! phase error `phi` itself.

use nalgebra::{Matrix5, Vector5};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::array::{ArrayTopology, Vec3};
use crate::channel::{self, iq_phase, wrap_phase, CsiMatrix, ImpairmentParams};
use crate::error::{Error, Result};

/// Minimum number of reference CSI samples for the antenna stage.
pub const MIN_REFERENCE_SAMPLES: usize = 64;

/// Resultant length below which an antenna's offset is considered unreliable.
pub const MIN_RESULTANT: f64 = 0.05;

/// Frequency-domain error parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Upsilon {
    pub iq_gain: f64,
    pub iq_time: f64,
    pub iq_phase: f64,
    /// Combined SFO/STO slope, radians per subcarrier index.
    pub slope: f64,
    pub cpo: f64,
}

impl Upsilon {
    fn to_vec(self) -> Vector5<f64> {
        Vector5::new(self.iq_gain, self.iq_time, self.iq_phase, self.slope, self.cpo)
    }

    fn from_vec(v: &Vector5<f64>) -> Self {
        Self {
            iq_gain: v[0],
            iq_time: v[1],
            iq_phase: v[2],
            slope: v[3],
            cpo: v[4],
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.iq_gain, self.iq_time, self.iq_phase, self.slope, self.cpo]
    }

    /// Frequency-dependent part of the model at 1-based index `n`.
    pub fn frequency_phase(&self, n: usize) -> f64 {
        let n = n as f64;
        iq_phase(n, self.iq_gain, self.iq_time, self.iq_phase) + n * self.slope
    }

    pub fn model(&self, n: usize) -> f64 {
        self.frequency_phase(n) + self.cpo
    }

    /// Picks the representative with `gain >= 0`, `time` in `[0, pi/2]`-ish
    /// (modulo pi, sign folded into the phase) and wrapped angles. The IQ
    /// term is invariant under `(g, t, p) -> (-g, -t, -p)`, `p -> p + pi`
    /// with `g -> -g`, and `t -> t + pi`.
    fn canonical(mut self) -> Self {
        if self.iq_gain < 0.0 {
            self.iq_gain = -self.iq_gain;
            self.iq_phase += PI;
        }
        self.iq_time = self.iq_time.rem_euclid(PI);
        if self.iq_time > PI / 2.0 {
            // t -> t - pi leaves the term unchanged; then fold the sign
            self.iq_time -= PI;
        }
        if self.iq_time < 0.0 {
            self.iq_time = -self.iq_time;
            self.iq_phase = -self.iq_phase + PI;
        }
        self.iq_phase = wrap_phase(self.iq_phase);
        self.cpo = wrap_phase(self.cpo);
        self
    }
}

/// Fitted calibration: frequency-domain parameters plus antenna offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSolution {
    pub upsilon: Upsilon,
    pub antenna_offsets: Vec<f64>,
    pub fit_residual_rms: f64,
    /// Set when the IQ gain is ~0 so the IQ time and phase are unidentifiable.
    #[serde(default)]
    pub flat_direction: bool,
}

impl CalibrationSolution {
    pub fn zero(antennas: usize) -> Self {
        Self {
            upsilon: Upsilon::default(),
            antenna_offsets: vec![0.0; antennas],
            fit_residual_rms: 0.0,
            flat_direction: false,
        }
    }

    /// The solution that exactly inverts `imp`, with the STO folded into the slope.
    pub fn from_impairments(imp: &ImpairmentParams, subcarriers: usize) -> Self {
        Self {
            upsilon: Upsilon {
                iq_gain: imp.iq_gain,
                iq_time: imp.iq_time,
                iq_phase: imp.iq_phase,
                slope: imp.sfo_slope + 2.0 * PI * imp.sto_samples as f64 / subcarriers as f64,
                cpo: imp.cpo,
            },
            antenna_offsets: imp.antenna_offsets.clone(),
            fit_residual_rms: 0.0,
            flat_direction: false,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// LoS-removed residual phases of a set of reference samples.
#[derive(Debug, Clone)]
pub struct ResidualPhase {
    /// Circular mean over samples and antennas, per subcarrier.
    pub mean: Vec<f64>,
    /// Circular mean over samples, antennas x subcarriers.
    pub per_antenna: Array2<f64>,
    /// Raw residual, samples x antennas x subcarriers; NaN where excluded.
    pub samples: Array3<f64>,
    /// Entries skipped because the measured or model value was zero.
    pub excluded: usize,
}

/// Residual phase `arg(H_measured * conj(H_los))` wrapped to `(-pi, pi]`.
/// `positions` are the 3-D UE positions of each sample.
pub fn residual_phase_after_los_removal(
    csis: &[CsiMatrix],
    positions: &[Vec3],
    topo: &ArrayTopology,
) -> Result<ResidualPhase> {
    if csis.is_empty() || csis.len() != positions.len() {
        return Err(Error::invalid("need one position per reference CSI"));
    }
    let (nr, nk) = csis[0].values.dim();
    if nr != topo.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} antennas", topo.len()),
            got: format!("{nr}"),
        });
    }
    let mut samples = Array3::from_elem((csis.len(), nr, nk), f64::NAN);
    let mut acc_ant = Array2::<Complex64>::zeros((nr, nk));
    let mut excluded = 0;
    for (s, (csi, pos)) in csis.iter().zip(positions).enumerate() {
        if csi.values.dim() != (nr, nk) {
            return Err(Error::DimensionMismatch {
                expected: format!("{nr}x{nk}"),
                got: format!("{:?}", csi.values.dim()),
            });
        }
        let model = channel::los_csi(topo, *pos, &csi.frequencies)?;
        for ((r, k), z) in csi.values.indexed_iter() {
            let prod = z * model.values[(r, k)].conj();
            if prod.norm() == 0.0 || !prod.norm().is_finite() {
                excluded += 1;
                continue;
            }
            let ph = prod.arg();
            samples[(s, r, k)] = ph;
            acc_ant[(r, k)] += Complex64::from_polar(1.0, ph);
        }
    }
    let per_antenna = acc_ant.mapv(|z| if z.norm() > 0.0 { z.arg() } else { 0.0 });
    let mean = (0..nk)
        .map(|k| {
            let z: Complex64 = acc_ant.column(k).iter().sum();
            if z.norm() > 0.0 {
                z.arg()
            } else {
                0.0
            }
        })
        .collect();
    Ok(ResidualPhase {
        mean,
        per_antenna,
        samples,
        excluded,
    })
}

/// Most frequent far-end PDP peak over every row of every packet. The PDP
/// of a row is `|IDFT_N(H)|^2`; bin 0 (the LoS bin) is skipped and ties go
/// to the smaller bin, both within a row and in the mode.
pub fn estimate_sto_peak(batch: &[CsiMatrix]) -> Result<usize> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty CSI batch"))?;
    let n = first.subcarriers();
    if n < 2 {
        return Err(Error::invalid("need at least two subcarriers"));
    }
    let fft = FftPlanner::new().plan_fft_inverse(n);
    let mut counts = vec![0usize; n];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for csi in batch {
        if csi.subcarriers() != n {
            return Err(Error::invalid("all packets must share the subcarrier grid"));
        }
        for row in csi.values.rows() {
            buf.iter_mut().zip(row.iter()).for_each(|(b, z)| *b = *z);
            fft.process(&mut buf);
            let mut best = 1;
            for (m, z) in buf.iter().enumerate().skip(1) {
                if z.norm_sqr() > buf[best].norm_sqr() {
                    best = m;
                }
            }
            counts[best] += 1;
        }
    }
    let mut mode = 1;
    for (m, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[mode] {
            mode = m;
        }
    }
    Ok(mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSettings {
    pub initial_damping: f64,
    pub damping_factor: f64,
    pub min_step: f64,
    /// Converged once an accepted step lowers the cost by less than this
    /// fraction.
    pub relative_decrease: f64,
    pub max_iterations: usize,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            damping_factor: 10.0,
            min_step: 1e-10,
            relative_decrease: 1e-10,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrequencyFit {
    pub upsilon: Upsilon,
    pub residual_rms: f64,
    pub iterations: usize,
    pub flat_direction: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub objective_trace: Vec<f64>,
}

fn residuals(data: &[f64], u: &Upsilon, out: &mut [f64]) -> f64 {
    let mut cost = 0.0;
    for (i, (d, r)) in data.iter().zip(out.iter_mut()).enumerate() {
        *r = wrap_phase(d - u.model(i + 1));
        cost += *r * *r;
    }
    cost
}

/// Gradient of the model (not the residual) at 1-based index `n`, written
/// without the `1 / cos` factors so it stays finite across the jumps.
fn model_gradient(u: &Upsilon, n: usize) -> Vector5<f64> {
    let nf = n as f64;
    let a = nf * u.iq_time;
    let c = a.cos();
    let s_ap = (a + u.iq_phase).sin();
    let c_ap = (a + u.iq_phase).cos();
    let g = u.iq_gain;
    let denom = c * c + g * g * s_ap * s_ap;
    if denom <= f64::MIN_POSITIVE {
        return Vector5::new(0.0, 0.0, 0.0, nf, 1.0);
    }
    Vector5::new(
        s_ap * c / denom,
        g * nf * u.iq_phase.cos() / denom,
        g * c_ap * c / denom,
        nf,
        1.0,
    )
}

struct LmRun {
    upsilon: Upsilon,
    cost: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn levenberg_marquardt(data: &[f64], start: Upsilon, cfg: &LmSettings, free: [bool; 5]) -> LmRun {
    let m = data.len();
    let mut res = vec![0.0; m];
    let mut trial_res = vec![0.0; m];
    let mut u = start;
    let mut cost = residuals(data, &u, &mut res);
    let mut lambda = cfg.initial_damping;
    let mut trace = vec![cost];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        if cost < 1e-30 {
            converged = true;
            break;
        }
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        for (i, r) in res.iter().enumerate() {
            let mut g = model_gradient(&u, i + 1);
            for (d, on) in free.iter().enumerate() {
                if !on {
                    g[d] = 0.0;
                }
            }
            jtj += g * g.transpose();
            jtr += g * *r;
        }
        let floor = 1e-12 * jtj.trace().max(1e-300);
        let mut a = jtj;
        for d in 0..5 {
            let diag = jtj[(d, d)];
            a[(d, d)] += lambda * diag.max(floor) + if diag < floor { floor } else { 0.0 };
        }
        let step = match a.cholesky() {
            Some(ch) => ch.solve(&jtr),
            None => {
                lambda *= cfg.damping_factor;
                continue;
            }
        };
        if step.norm() < cfg.min_step * (1.0 + u.to_vec().norm()) {
            converged = true;
            break;
        }
        let trial = Upsilon::from_vec(&(u.to_vec() + step));
        let trial_cost = residuals(data, &trial, &mut trial_res);
        if trial_cost < cost {
            let small = cost - trial_cost <= cfg.relative_decrease * cost;
            u = trial;
            cost = trial_cost;
            std::mem::swap(&mut res, &mut trial_res);
            lambda = (lambda / cfg.damping_factor).max(1e-15);
            trace.push(cost);
            if small {
                converged = true;
                break;
            }
        } else {
            lambda *= cfg.damping_factor;
            if lambda > 1e20 {
                converged = true;
                break;
            }
        }
    }
    LmRun {
        upsilon: u,
        cost,
        iterations,
        converged,
        trace,
    }
}

/// Least-squares line through the unwrapped phase: `(slope, intercept)` with
/// 1-based abscissae.
fn line_fit(phase: &[f64]) -> (f64, f64) {
    let mut unwrapped = Vec::with_capacity(phase.len());
    let mut prev = 0.0;
    for (i, &p) in phase.iter().enumerate() {
        let v = if i == 0 { p } else { prev + wrap_phase(p - prev) };
        unwrapped.push(v);
        prev = v;
    }
    let n = phase.len() as f64;
    let mx = (n + 1.0) / 2.0;
    let my = unwrapped.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, y) in unwrapped.iter().enumerate() {
        let dx = (i + 1) as f64 - mx;
        sxx += dx * dx;
        sxy += dx * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

const ALL: [bool; 5] = [true; 5];
const LINEAR_ONLY: [bool; 5] = [false, false, false, true, true];

/// Iteration cap for screening the global starts.
const SCREEN_ITERATIONS: usize = 25;
/// Screened starts carried on to a full run.
const SCREEN_KEEP: usize = 5;

fn default_start(phase: &[f64]) -> Upsilon {
    let (slope, intercept) = line_fit(phase);
    Upsilon {
        iq_gain: 0.1,
        iq_time: PI / phase.len() as f64,
        iq_phase: 0.0,
        slope,
        cpo: intercept,
    }
}

/// Starts that place the first `cos(n t) = 0` jump of the IQ term on every
/// half subcarrier, for four IQ phases each.
fn global_starts(base: Upsilon, nk: usize) -> Vec<Upsilon> {
    let mut starts = Vec::with_capacity(8 * nk);
    for half_index in 1..=2 * nk {
        let t = PI / half_index as f64;
        for p in [0.0, PI / 2.0, -PI / 2.0, PI] {
            starts.push(Upsilon {
                iq_time: t,
                iq_phase: p,
                ..base
            });
        }
    }
    starts
}

/// Fits the frequency-domain error model to the phase error `phase[n-1]`
/// observed at subcarrier index `n`.
///
/// The IQ term jumps by `pi` wherever `cos(n t)` changes sign, and the
/// objective only has a narrow basin around the right jump position. The
/// default start is therefore complemented by starts covering every jump
/// position on the subcarrier axis; all are screened with a few iterations
/// and the best few are run to convergence.
pub fn fit_frequency_calibration(phase: &[f64], cfg: &LmSettings) -> Result<FrequencyFit> {
    check_phase(phase)?;
    let base = default_start(phase);
    let screen = LmSettings {
        max_iterations: cfg.max_iterations.min(SCREEN_ITERATIONS),
        ..*cfg
    };
    let mut screened: Vec<LmRun> = global_starts(base, phase.len())
        .into_iter()
        .map(|s| levenberg_marquardt(phase, s, &screen, ALL))
        .collect();
    screened.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    let mut candidates = vec![base];
    candidates.extend(screened.iter().take(SCREEN_KEEP).map(|r| r.upsilon));
    finish_fit(phase, cfg, &candidates)
}

/// Like [`fit_frequency_calibration`], but only refines `warm` (with its
/// carrier phase re-centred on `phase`) and the default start. Used for the
/// remaining antennas once one antenna has been fitted globally.
pub fn fit_frequency_calibration_from(phase: &[f64], cfg: &LmSettings, warm: &Upsilon) -> Result<FrequencyFit> {
    check_phase(phase)?;
    let shift: Complex64 = phase
        .iter()
        .enumerate()
        .map(|(i, d)| Complex64::from_polar(1.0, d - warm.model(i + 1)))
        .sum();
    let recentred = Upsilon {
        cpo: warm.cpo + shift.arg(),
        ..*warm
    };
    finish_fit(phase, cfg, &[recentred, default_start(phase)])
}

fn check_phase(phase: &[f64]) -> Result<()> {
    if phase.len() < 5 {
        return Err(Error::invalid("need at least 5 subcarriers to fit 5 parameters"));
    }
    if phase.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("phase residual contains non-finite values"));
    }
    Ok(())
}

/// Runs every candidate to convergence and keeps the lowest cost. A
/// linear-only fit replaces the result when it explains the data as well;
/// the IQ parameters are then reported as zero with `flat_direction` set.
fn finish_fit(phase: &[f64], cfg: &LmSettings, candidates: &[Upsilon]) -> Result<FrequencyFit> {
    let nk = phase.len();
    let mut best: Option<LmRun> = None;
    for c in candidates {
        let run = levenberg_marquardt(phase, *c, cfg, ALL);
        if best.as_ref().is_none_or(|b| run.cost < b.cost) {
            best = Some(run);
        }
    }
    let mut best = best.ok_or_else(|| Error::invalid("no start values"))?;
    let linear_start = Upsilon {
        iq_gain: 0.0,
        iq_time: 0.0,
        iq_phase: 0.0,
        ..default_start(phase)
    };
    let linear = levenberg_marquardt(phase, linear_start, cfg, LINEAR_ONLY);
    let flat = linear.converged && linear.cost <= best.cost * (1.0 + 1e-6) + 1e-20;
    if flat {
        log::warn!("IQ gain fitted as zero; IQ time and phase are unidentifiable");
        best = linear;
    }
    let rms = (best.cost / nk as f64).sqrt();
    let upsilon = if flat { best.upsilon } else { best.upsilon.canonical() };
    let upsilon = Upsilon {
        cpo: wrap_phase(upsilon.cpo),
        ..upsilon
    };
    if !best.converged {
        return Err(Error::NotConverged {
            iterations: best.iterations,
            best: upsilon.as_array(),
            best_rms: rms,
        });
    }
    Ok(FrequencyFit {
        flat_direction: flat,
        upsilon,
        residual_rms: rms,
        iterations: best.iterations,
        objective_trace: best.trace,
    })
}

/// Per-antenna offset as the circular mean of `psi` (rows: antennas, columns:
/// any number of residual samples). NaN entries are ignored.
pub fn estimate_antenna_offsets(psi: &Array2<f64>, min_samples: usize) -> Result<Vec<f64>> {
    psi.rows()
        .into_iter()
        .enumerate()
        .map(|(antenna, row)| {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut count = 0usize;
            for &p in row.iter().filter(|p| p.is_finite()) {
                acc += Complex64::from_polar(1.0, p);
                count += 1;
            }
            if count < min_samples {
                return Err(Error::invalid(format!(
                    "antenna {antenna}: {count} residual samples, need at least {min_samples}"
                )));
            }
            let resultant = acc.norm() / count as f64;
            if resultant < MIN_RESULTANT {
                return Err(Error::LowConfidence { antenna, resultant });
            }
            Ok(wrap_phase(acc.arg()))
        })
        .collect()
}

/// Phase error averaged over antennas. Each antenna's curve is first
/// centred on its own circular mean so that the average stays well defined
/// whatever the antenna offsets; the circular mean of those centres is added
/// back as a common constant.
pub fn pooled_phase_error(per_antenna: &Array2<f64>) -> Vec<f64> {
    let (nr, nk) = per_antenna.dim();
    let centres: Vec<f64> = per_antenna
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|e| Complex64::from_polar(1.0, *e)).sum::<Complex64>().arg())
        .collect();
    let common = centres.iter().map(|c| Complex64::from_polar(1.0, *c)).sum::<Complex64>().arg();
    (0..nk)
        .map(|k| {
            let acc: Complex64 = (0..nr)
                .map(|r| Complex64::from_polar(1.0, per_antenna[(r, k)] - centres[r]))
                .sum();
            wrap_phase(acc.arg() + common)
        })
        .collect()
}

/// Full two-stage fit from reference samples with known 3-D UE positions.
///
/// The sample-averaged phase error of every antenna is pooled into one
/// curve, which is fitted once; whatever constant is left per antenna
/// becomes its offset. Offsets are therefore defined up to the carrier phase
/// and come out with zero circular mean when the true offsets have one.
pub fn calibrate(
    csis: &[CsiMatrix],
    positions: &[Vec3],
    topo: &ArrayTopology,
    cfg: &LmSettings,
) -> Result<CalibrationSolution> {
    if csis.len() < MIN_REFERENCE_SAMPLES {
        return Err(Error::invalid(format!(
            "calibration needs at least {MIN_REFERENCE_SAMPLES} reference samples, got {}",
            csis.len()
        )));
    }
    let residual = residual_phase_after_los_removal(csis, positions, topo)?;
    let (nr, nk) = residual.per_antenna.dim();
    let errors = residual.per_antenna.mapv(|p| wrap_phase(-p));
    let upsilon = fit_frequency_calibration(&pooled_phase_error(&errors), cfg)?.upsilon;
    let freq_phase: Vec<f64> = (1..=nk).map(|n| upsilon.model(n)).collect();
    let ns = csis.len();
    let mut psi = Array2::from_elem((nr, ns * nk), f64::NAN);
    for s in 0..ns {
        for r in 0..nr {
            for k in 0..nk {
                let res = residual.samples[(s, r, k)];
                if res.is_finite() {
                    psi[(r, s * nk + k)] = wrap_phase(-res - freq_phase[k]);
                }
            }
        }
    }
    let antenna_offsets = estimate_antenna_offsets(&psi, MIN_REFERENCE_SAMPLES)?;
    let mut sq = 0.0;
    let mut cnt = 0usize;
    for ((r, _), p) in psi.indexed_iter() {
        if p.is_finite() {
            let d = wrap_phase(p - antenna_offsets[r]);
            sq += d * d;
            cnt += 1;
        }
    }
    Ok(CalibrationSolution {
        flat_direction: upsilon.iq_gain.abs() < 1e-6,
        upsilon,
        antenna_offsets,
        fit_residual_rms: if cnt > 0 { (sq / cnt as f64).sqrt() } else { 0.0 },
    })
}

/// Removes the modelled phase error from `raw`. Magnitudes are untouched.
pub fn apply_calibration(raw: &CsiMatrix, sol: &CalibrationSolution) -> Result<CsiMatrix> {
    let (nr, nk) = raw.values.dim();
    if sol.antenna_offsets.len() != nr {
        return Err(Error::DimensionMismatch {
            expected: format!("{nr} antenna offsets"),
            got: format!("{}", sol.antenna_offsets.len()),
        });
    }
    let freq: Vec<f64> = (1..=nk).map(|n| sol.upsilon.model(n)).collect();
    let mut values = raw.values.clone();
    for ((r, k), z) in values.indexed_iter_mut() {
        let phi = freq[k] + sol.antenna_offsets[r];
        if phi != 0.0 {
            *z *= Complex64::from_polar(1.0, phi);
        }
    }
    CsiMatrix::new(values, raw.frequencies.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{layouts, DEFAULT_CARRIER_HZ};
    use crate::channel::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn forward(u: &Upsilon, nk: usize) -> Vec<f64> {
        // direct transcription of the model, independent of Upsilon::model
        (1..=nk)
            .map(|n| {
                let n = n as f64;
                let iq = (u.iq_gain * (n * u.iq_time + u.iq_phase).sin() / (n * u.iq_time).cos()).atan();
                wrap_phase(iq + n * u.slope + u.cpo)
            })
            .collect()
    }

    fn reference() -> Upsilon {
        Upsilon {
            iq_gain: 0.1,
            iq_time: 0.02,
            iq_phase: 0.3,
            slope: 0.05,
            cpo: 1.0,
        }
    }

    #[test]
    fn recovers_known_upsilon() {
        let truth = reference();
        let fit = fit_frequency_calibration(&forward(&truth, 100), &LmSettings::default()).unwrap();
        let got = fit.upsilon.as_array();
        for (g, t) in got.iter().zip(truth.as_array()) {
            assert!((g - t).abs() < 1e-4, "{got:?}");
        }
        assert!(fit.residual_rms < 1e-8);
    }

    #[test]
    fn zero_phase_fits_to_zero() {
        let fit = fit_frequency_calibration(&[0.0; 100], &LmSettings::default()).unwrap();
        assert!(fit.residual_rms < 1e-9);
        assert!(fit.upsilon.slope.abs() < 1e-9);
        assert!(fit.upsilon.cpo.abs() < 1e-9);
        assert!(fit.upsilon.iq_gain.abs() < 1e-6);
        assert!(fit.flat_direction);
    }

    #[test]
    fn purely_linear_phase() {
        let s = 0.037;
        let data: Vec<f64> = (1..=100).map(|n| wrap_phase(s * n as f64 - 0.4)).collect();
        let fit = fit_frequency_calibration(&data, &LmSettings::default()).unwrap();
        assert!((fit.upsilon.slope - s).abs() < 1e-6);
        let iq_rms = ((1..=100)
            .map(|n| {
                let u = fit.upsilon;
                iq_phase(n as f64, u.iq_gain, u.iq_time, u.iq_phase).powi(2)
            })
            .sum::<f64>()
            / 100.0)
            .sqrt();
        assert!(iq_rms <= 1e-6, "{iq_rms}");
    }

    #[test]
    fn objective_never_increases() {
        let data = forward(&reference(), 100);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy: Vec<f64> = data.iter().map(|d| wrap_phase(d + rng.random_range(-0.05..0.05))).collect();
        let fit = fit_frequency_calibration(&noisy, &LmSettings::default()).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn too_short_input_rejected() {
        assert!(fit_frequency_calibration(&[0.0; 4], &LmSettings::default()).is_err());
    }

    #[test]
    fn nonconvergence_carries_best() {
        let cfg = LmSettings {
            max_iterations: 1,
            ..LmSettings::default()
        };
        match fit_frequency_calibration(&forward(&reference(), 100), &cfg) {
            Err(Error::NotConverged { best_rms, .. }) => assert!(best_rms.is_finite()),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn circular_mean_cases() {
        let constant = Array2::from_elem((1, 100), 0.7);
        assert!((estimate_antenna_offsets(&constant, 64).unwrap()[0] - 0.7).abs() < 1e-12);

        let mut sym = Array2::zeros((1, 100));
        for (i, v) in sym.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 1.2 + 0.4 } else { 1.2 - 0.4 };
        }
        assert!((estimate_antenna_offsets(&sym, 64).unwrap()[0] - 1.2).abs() < 1e-12);

        // around 3.1 rad with wrap past pi: the arithmetic mean is far off
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut wrapped = Array2::zeros((1, 400));
        for v in wrapped.iter_mut() {
            *v = wrap_phase(3.1 + rng.random_range(-0.3..0.3));
        }
        let naive = wrapped.iter().sum::<f64>() / 400.0;
        let mut oracle = Complex64::new(0.0, 0.0);
        for v in wrapped.iter() {
            oracle += Complex64::from_polar(1.0, *v);
        }
        let got = estimate_antenna_offsets(&wrapped, 64).unwrap()[0];
        assert!((got - oracle.arg()).abs() < 1e-12);
        assert!((got - 3.1).abs() < 0.05);
        assert!((naive - 3.1).abs() > 1.0);
    }

    #[test]
    fn offsets_need_samples_and_coherence() {
        assert!(estimate_antenna_offsets(&Array2::zeros((1, 10)), 64).is_err());
        let mut spread = Array2::zeros((1, 100));
        for (i, v) in spread.iter_mut().enumerate() {
            *v = wrap_phase(2.0 * PI * i as f64 / 100.0);
        }
        assert!(matches!(
            estimate_antenna_offsets(&spread, 64),
            Err(Error::LowConfidence { antenna: 0, .. })
        ));
    }

    #[test]
    fn sto_peak_recovery_and_ties() {
        let topo = layouts::dis(3.0, 0.5, 1.0, DEFAULT_CARRIER_HZ);
        let f = subcarrier_grid(DEFAULT_CARRIER_HZ, 20e6, 100);
        let mut imp = ImpairmentParams::none(64);
        imp.sto_samples = 25;
        let batch: Vec<_> = [[1.0, 1.0], [2.0, 1.5], [0.5, 2.5]]
            .iter()
            .map(|p| {
                let clean = los_csi(&topo, [p[0], p[1], 0.4], &f).unwrap();
                apply_impairments(&clean, &imp, 0).unwrap()
            })
            .collect();
        assert_eq!(estimate_sto_peak(&batch).unwrap(), 25);
        assert!(estimate_sto_peak(&[]).is_err());

        // every row peaks at bin 7
        let row: Vec<Complex64> = (0..16)
            .map(|n| Complex64::from_polar(1.0, -2.0 * PI * 7.0 * n as f64 / 16.0))
            .collect();
        let v = Array2::from_shape_fn((3, 16), |(_, k)| row[k]);
        let csi = CsiMatrix::new(v, subcarrier_grid(1e9, 1.6e6, 16)).unwrap();
        assert_eq!(estimate_sto_peak(&[csi]).unwrap(), 7);

        // two rows, bins 3 and 9: tie in the mode goes to 3
        let a: Vec<Complex64> = (0..16).map(|n| Complex64::from_polar(1.0, -2.0 * PI * 9.0 * n as f64 / 16.0)).collect();
        let b: Vec<Complex64> = (0..16).map(|n| Complex64::from_polar(1.0, -2.0 * PI * 3.0 * n as f64 / 16.0)).collect();
        let v = Array2::from_shape_fn((2, 16), |(r, k)| if r == 0 { a[k] } else { b[k] });
        let csi = CsiMatrix::new(v, subcarrier_grid(1e9, 1.6e6, 16)).unwrap();
        assert_eq!(estimate_sto_peak(&[csi]).unwrap(), 3);
    }

    fn ula_reference_set(imp: &ImpairmentParams, n: usize) -> (ArrayTopology, Vec<CsiMatrix>, Vec<Vec3>) {
        let topo = layouts::ula(3.0, 0.5, 1.0, DEFAULT_CARRIER_HZ);
        let f = subcarrier_grid(DEFAULT_CARRIER_HZ, 20e6, 100);
        let pts = Rect::new(0.5, 0.5, 2.5, 2.5).grid(n);
        let pos: Vec<Vec3> = pts.iter().map(|p| [p[0], p[1], 0.4]).collect();
        let csis = pos
            .iter()
            .enumerate()
            .map(|(i, p)| apply_impairments(&los_csi(&topo, *p, &f).unwrap(), imp, i as u64).unwrap())
            .collect();
        (topo, csis, pos)
    }

    #[test]
    fn residual_of_exact_model_is_zero_and_offsets_pass_through() {
        let topo = layouts::dis(3.0, 0.5, 1.0, DEFAULT_CARRIER_HZ);
        let f = subcarrier_grid(DEFAULT_CARRIER_HZ, 20e6, 100);
        let p = [1.0, 2.0, 0.4];
        let model = los_csi(&topo, p, &f).unwrap();
        let r = residual_phase_after_los_removal(std::slice::from_ref(&model), &[p], &topo).unwrap();
        assert!(r.samples.iter().all(|x| x.abs() < 1e-9));
        let shifted = CsiMatrix::new(model.values.mapv(|z| z * Complex64::from_polar(1.0, -0.8)), f.clone()).unwrap();
        let r = residual_phase_after_los_removal(&[shifted], &[p], &topo).unwrap();
        assert!(r.samples.iter().all(|x| (x + 0.8).abs() < 1e-9));
        let mut zeroed = model.clone();
        zeroed.values[(0, 0)] = Complex64::new(0.0, 0.0);
        let r = residual_phase_after_los_removal(&[zeroed], &[p], &topo).unwrap();
        assert_eq!(r.excluded, 1);
        assert!(r.samples[(0, 0, 0)].is_nan());
    }

    #[test]
    fn residual_matches_forward_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut imp = ImpairmentParams::none(64);
        imp.sfo_slope = 0.03;
        imp.sto_samples = 4;
        imp.iq_gain = 0.08;
        imp.iq_time = 0.015;
        imp.iq_phase = -0.2;
        imp.cpo = 2.0;
        imp.antenna_offsets = (0..64).map(|_| rng.random_range(-PI..PI)).collect();
        let (topo, csis, pos) = ula_reference_set(&imp, 2);
        let r = residual_phase_after_los_removal(&csis, &pos, &topo).unwrap();
        for ((s, a, k), v) in r.samples.indexed_iter() {
            let _ = s;
            let expect = wrap_phase(-imp.total_phase(a, k + 1, 100));
            assert!(wrap_phase(v - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn injected_solution_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut imp = ImpairmentParams::none(64);
        imp.sfo_slope = 0.05;
        imp.iq_gain = 0.1;
        imp.iq_time = 0.02;
        imp.iq_phase = 0.3;
        imp.cpo = 1.0;
        imp.sto_samples = 3;
        imp.antenna_offsets = (0..64).map(|_| rng.random_range(-PI..PI)).collect();
        let topo = layouts::ula(3.0, 0.5, 1.0, DEFAULT_CARRIER_HZ);
        let f = subcarrier_grid(DEFAULT_CARRIER_HZ, 20e6, 100);
        let clean = los_csi(&topo, [1.2, 1.7, 0.4], &f).unwrap();
        let raw = apply_impairments(&clean, &imp, 0).unwrap();
        let back = apply_calibration(&raw, &CalibrationSolution::from_impairments(&imp, 100)).unwrap();
        for (a, b) in clean.values.iter().zip(back.values.iter()) {
            assert!((a - b).norm() <= 1e-9 * a.norm());
        }
        let same = apply_calibration(&raw, &CalibrationSolution::zero(64)).unwrap();
        assert_eq!(same, raw);
        assert!(apply_calibration(&raw, &CalibrationSolution::zero(8)).is_err());
    }

    #[test]
    fn held_out_generalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut imp = ImpairmentParams::none(64);
        imp.sfo_slope = 0.05;
        imp.iq_gain = 0.1;
        imp.iq_time = 0.02;
        imp.iq_phase = 0.3;
        imp.cpo = 1.0;
        imp.antenna_offsets = (0..64).map(|_| rng.random_range(-PI..PI)).collect();
        let (topo, csis, pos) = ula_reference_set(&imp, 8);
        let sol = calibrate(&csis, &pos, &topo, &LmSettings::default()).unwrap();
        let f = subcarrier_grid(DEFAULT_CARRIER_HZ, 20e6, 100);
        let mut sq = 0.0;
        let mut n = 0.0;
        for p in [[0.7, 2.2, 0.4], [2.3, 0.9, 0.4], [1.55, 1.45, 0.4]] {
            let clean = los_csi(&topo, p, &f).unwrap();
            let cal = apply_calibration(&apply_impairments(&clean, &imp, 0).unwrap(), &sol).unwrap();
            for (a, b) in clean.values.iter().zip(cal.values.iter()) {
                sq += (b * a.conj()).arg().powi(2);
                n += 1.0;
            }
        }
        let rms = (sq / n).sqrt();
        assert!(rms < 0.1, "{rms}");
        assert!(rms < 1e-6, "noiseless calibration should be exact, got {rms}");
    }

    #[test]
    fn calibration_needs_reference_points() {
        let (topo, csis, pos) = ula_reference_set(&ImpairmentParams::none(64), 4);
        assert!(calibrate(&csis, &pos, &topo, &LmSettings::default()).is_err());
    }

    #[test]
    fn solution_json_round_trip() {
        let mut sol = CalibrationSolution::zero(64);
        sol.upsilon.slope = 0.05;
        sol.antenna_offsets[3] = -1.25;
        let back = CalibrationSolution::from_json(&sol.to_json().unwrap()).unwrap();
        assert_eq!(back, sol);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn calibration_preserves_magnitude(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = Array2::from_shape_fn((8, 20), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let raw = CsiMatrix::new(values, subcarrier_grid(2.61e9, 4e6, 20)).unwrap();
            let sol = CalibrationSolution {
                upsilon: Upsilon { iq_gain: rng.random_range(0.0..0.3), iq_time: rng.random_range(0.0..0.05), iq_phase: rng.random_range(-1.0..1.0), slope: rng.random_range(-0.2..0.2), cpo: rng.random_range(-PI..PI) },
                antenna_offsets: (0..8).map(|_| rng.random_range(-PI..PI)).collect(),
                fit_residual_rms: 0.0,
                flat_direction: false,
            };
            let cal = apply_calibration(&raw, &sol).unwrap();
            for (a, b) in raw.values.iter().zip(cal.values.iter()) {
                prop_assert!((a.norm() - b.norm()).abs() <= 1e-12);
            }
        }

        #[test]
        fn offsets_invariant_to_order_and_2pi(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<f64> = (0..80).map(|_| wrap_phase(0.4 + rng.random_range(-1.0..1.0))).collect();
            let a = Array2::from_shape_vec((1, 80), base.clone()).unwrap();
            let mut shuffled = base.clone();
            shuffled.reverse();
            shuffled.rotate_left(17);
            let shifted: Vec<f64> = shuffled.iter().enumerate().map(|(i, v)| if i % 3 == 0 { v + 2.0 * PI } else { *v }).collect();
            let b = Array2::from_shape_vec((1, 80), shifted).unwrap();
            let x = estimate_antenna_offsets(&a, 64).unwrap()[0];
            let y = estimate_antenna_offsets(&b, 64).unwrap()[0];
            prop_assert!(wrap_phase(x - y).abs() < 1e-9);
        }
    }
}
