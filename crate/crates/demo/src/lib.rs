//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported function has a plain Rust counterpart returning
//! [`mimoloc::Result`], which is what the tests exercise; the
//! `wasm_bindgen` wrappers only convert errors for JavaScript.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

use mimoloc::array::{steering_vector, whole_panels, wavelength, ArrayTopology, Direction, SubArray, DEFAULT_CARRIER_HZ, DEFAULT_SPACING};
use mimoloc::channel::{iq_phase, subcarrier_grid, synthesize_subarray, wrap_phase, PathSet, DEFAULT_BANDWIDTH_HZ, DEFAULT_SUBCARRIERS};
use mimoloc::sage::{sage_extract, select_los, MultipathComponent, SageConfig, LOS_WINDOW_DB};
use mimoloc::{Error, Result};

/// Azimuths of the spectrum returned by [`beam_spectrum_db`], degrees.
pub const SPECTRUM_DEGREES: std::ops::RangeInclusive<i32> = -90..=90;

fn ula8() -> Result<SubArray> {
    let topo = ArrayTopology::ula(8, DEFAULT_SPACING, wavelength(DEFAULT_CARRIER_HZ))?;
    Ok(whole_panels(&topo).remove(0))
}

/// Noisy single-path CSI of an 8-element ULA; `snr_db` is per entry.
fn single_path_csi(sub: &SubArray, azimuth_deg: f64, delay_ns: f64, snr_db: f64, seed: u64) -> Result<ndarray::Array2<Complex64>> {
    if !(-90.0..=90.0).contains(&azimuth_deg) {
        return Err(Error::InvalidInput(format!("azimuth {azimuth_deg} outside [-90, 90] degrees")));
    }
    if !(delay_ns >= 0.0) {
        return Err(Error::InvalidInput("delay must be non-negative".into()));
    }
    let freqs = subcarrier_grid(DEFAULT_CARRIER_HZ, DEFAULT_BANDWIDTH_HZ, DEFAULT_SUBCARRIERS);
    let path = MultipathComponent::new(Complex64::new(1.0, 0.0), azimuth_deg.to_radians(), None, delay_ns * 1e-9);
    let mut h = synthesize_subarray(sub, &PathSet::new(vec![path])?, &freqs)?.values;
    if snr_db.is_finite() {
        let std = 10f64.powf(-snr_db / 20.0) / 2f64.sqrt();
        let n = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        h.mapv_inplace(|z| z + Complex64::new(n.sample(&mut rng), n.sample(&mut rng)));
    }
    Ok(h)
}

/// Bartlett spectrum (dB, peak at 0) of a single plane wave from
/// `azimuth_deg`, over [`SPECTRUM_DEGREES`].
pub fn beam_spectrum_db(azimuth_deg: f64, snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    let sub = ula8()?;
    let h = single_path_csi(&sub, azimuth_deg, 20.0, snr_db, seed)?;
    let mut power = Vec::new();
    for deg in SPECTRUM_DEGREES {
        let a = steering_vector(&sub, Direction::azimuth((deg as f64).to_radians()))?;
        let p: f64 = h
            .columns()
            .into_iter()
            .map(|col| col.iter().zip(&a).map(|(x, s)| x * s.conj()).sum::<Complex64>().norm_sqr())
            .sum();
        power.push(p);
    }
    let peak = power.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    Ok(power.iter().map(|p| 10.0 * (p / peak).max(1e-12).log10()).collect())
}

/// SAGE estimate `[azimuth_deg, delay_ns, amplitude_db]` of the LoS path.
pub fn extract_los(azimuth_deg: f64, delay_ns: f64, snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    let sub = ula8()?;
    let h = single_path_csi(&sub, azimuth_deg, delay_ns, snr_db, seed)?;
    let freqs = subcarrier_grid(DEFAULT_CARRIER_HZ, DEFAULT_BANDWIDTH_HZ, DEFAULT_SUBCARRIERS);
    let comps = sage_extract(&h, &sub, &freqs, &SageConfig::default())?;
    let los = select_los(&comps, LOS_WINDOW_DB)?;
    Ok(vec![los.azimuth.to_degrees(), los.delay * 1e9, los.amplitude_db()])
}

/// Modelled phase error (radians, wrapped) on each of the 100 subcarriers.
pub fn phase_error_curve(iq_gain: f64, iq_time: f64, iq_phase_rad: f64, slope: f64, cpo: f64) -> Vec<f64> {
    (1..=DEFAULT_SUBCARRIERS)
        .map(|n| {
            let n = n as f64;
            wrap_phase(iq_phase(n, iq_gain, iq_time, iq_phase_rad) + slope * n + cpo)
        })
        .collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = beamSpectrum)]
pub fn beam_spectrum(azimuth_deg: f64, snr_db: f64, seed: u64) -> std::result::Result<Vec<f64>, JsError> {
    beam_spectrum_db(azimuth_deg, snr_db, seed).map_err(js)
}

#[wasm_bindgen(js_name = extractLos)]
pub fn extract_los_js(azimuth_deg: f64, delay_ns: f64, snr_db: f64, seed: u64) -> std::result::Result<Vec<f64>, JsError> {
    extract_los(azimuth_deg, delay_ns, snr_db, seed).map_err(js)
}

#[wasm_bindgen(js_name = phaseErrorCurve)]
pub fn phase_error_curve_js(iq_gain: f64, iq_time: f64, iq_phase_rad: f64, slope: f64, cpo: f64) -> Vec<f64> {
    phase_error_curve(iq_gain, iq_time, iq_phase_rad, slope, cpo)
}
