//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p mimoloc --test acceptance`. Pass criterion
//! numbers as arguments to run a subset.

use std::f64::consts::PI;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mimoloc::array::{layouts, rayleigh_distance, whole_panels, ArrayTopology, DEFAULT_CARRIER_HZ, DEFAULT_SPACING};
use mimoloc::calib::{apply_calibration, calibrate, CalibrationSolution, LmSettings, Upsilon};
use mimoloc::channel::{
    apply_impairments, los_csi, noise_std_for_snr, subcarrier_grid, synthesize_subarray, wrap_phase, CsiMatrix,
    ImpairmentParams, PathSet, Rect, Scene,
};
use mimoloc::config::ExperimentConfig;
use mimoloc::fingerprint::{MetricScheme, TrainingContext};
use mimoloc::geo;
use mimoloc::link::{effective_snr, q_function, q_inverse};
use mimoloc::pipeline::{self, ReportBundle, METHOD_AMP, METHOD_FINGERPRINT, METHOD_TOF, METHOD_TRIANGULATION};
use mimoloc::sage::{sage_extract, select_los, MultipathComponent, SageConfig, LOS_WINDOW_DB};
use mimoloc::svr::{dual_objective, kernel_matrix, solve_dual, SvrParams};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn dis() -> ArrayTopology {
    layouts::dis(3.0, 1.0, 1.0, DEFAULT_CARRIER_HZ)
}

fn freqs() -> Vec<f64> {
    subcarrier_grid(DEFAULT_CARRIER_HZ, 20e6, 100)
}

fn los_scene() -> Scene {
    Scene {
        area: Rect::new(0.0, 0.0, 3.0, 3.0),
        ue_height: 0.4,
        scatterers: vec![],
        floor_reflection: 0.0,
    }
}

fn c1_calibration() -> Verdict {
    let start = Instant::now();
    let topo = dis();
    let f = freqs();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut imp = ImpairmentParams::none(topo.len());
    imp.iq_gain = 0.1;
    imp.iq_time = 0.02;
    imp.iq_phase = 0.3;
    imp.sfo_slope = 0.05;
    imp.cpo = 1.0;
    let raw: Vec<f64> = (0..topo.len()).map(|_| rng.random_range(-PI..PI)).collect();
    let centre = raw.iter().map(|x| Complex64::from_polar(1.0, *x)).sum::<Complex64>().arg();
    imp.antenna_offsets = raw.iter().map(|x| wrap_phase(x - centre)).collect();
    let truth = CalibrationSolution::from_impairments(&imp, f.len());

    let region = Rect::new(0.875, 0.875, 2.125, 2.125);
    let points: Vec<[f64; 3]> = region.grid(8).iter().map(|p| [p[0], p[1], 0.4]).collect();
    let clean: Vec<CsiMatrix> = points.iter().map(|p| los_csi(&topo, *p, &f).unwrap()).collect();
    let noise_20db = noise_std_for_snr(&topo, &los_scene(), &region, &f, 20.0).unwrap();

    let mut lines = Vec::new();
    let mut pass = true;
    for (label, noise, tol) in [("noiseless", 0.0, 1e-3), ("20 dB", noise_20db, 5e-2)] {
        imp.noise_std = noise;
        let csis: Vec<CsiMatrix> = clean
            .iter()
            .enumerate()
            .map(|(i, c)| apply_impairments(c, &imp, 7_000 + i as u64).unwrap())
            .collect();
        let sol = match calibrate(&csis, &points, &topo, &LmSettings::default()) {
            Ok(s) => s,
            Err(e) => return verdict(false, format!("{label}: {e}")),
        };
        let u_err = upsilon_error(&sol.upsilon, &truth.upsilon);
        let xi_err = sol
            .antenna_offsets
            .iter()
            .zip(&truth.antenna_offsets)
            .map(|(a, b)| wrap_phase(a - b).abs())
            .fold(0.0, f64::max);
        pass &= u_err <= tol && xi_err <= tol;
        lines.push(format!("{label}: max |dU| {u_err:.2e}, max |dxi| {xi_err:.2e} (tol {tol:.0e})"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(10);
    verdict(pass, format!("{}; {:.2} s", lines.join("; "), elapsed.as_secs_f64()))
}

fn upsilon_error(a: &Upsilon, b: &Upsilon) -> f64 {
    let (x, y) = (a.as_array(), b.as_array());
    (0..5)
        .map(|i| if i == 4 { wrap_phase(x[i] - y[i]).abs() } else { (x[i] - y[i]).abs() })
        .fold(0.0, f64::max)
}

fn c2_magnitude() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let nr = rng.random_range(1..=64);
        let nk = rng.random_range(5..=100);
        let values = Array2::from_shape_fn((nr, nk), |_| Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)));
        let raw = CsiMatrix::new(values, subcarrier_grid(DEFAULT_CARRIER_HZ, 20e6, nk)).unwrap();
        let sol = CalibrationSolution {
            upsilon: Upsilon {
                iq_gain: rng.random_range(0.0..0.5),
                iq_time: rng.random_range(0.0..0.1),
                iq_phase: rng.random_range(-PI..PI),
                slope: rng.random_range(-1.0..1.0),
                cpo: rng.random_range(-PI..PI),
            },
            antenna_offsets: (0..nr).map(|_| rng.random_range(-PI..PI)).collect(),
            fit_residual_rms: 0.0,
            flat_direction: false,
        };
        let cal = apply_calibration(&raw, &sol).unwrap();
        for (a, b) in raw.values.iter().zip(cal.values.iter()) {
            worst = worst.max((a.norm() - b.norm()).abs());
        }
    }
    verdict(worst <= 1e-12, format!("max ||cal| - |raw|| = {worst:.2e} over 1000 matrices"))
}

fn ula8() -> mimoloc::array::SubArray {
    let topo = ArrayTopology::ula(8, DEFAULT_SPACING, mimoloc::array::wavelength(DEFAULT_CARRIER_HZ)).unwrap();
    whole_panels(&topo).remove(0)
}

fn random_path(rng: &mut ChaCha8Rng, power_db: f64) -> MultipathComponent {
    let amp = 10f64.powf(power_db / 20.0);
    MultipathComponent::new(
        Complex64::from_polar(amp, rng.random_range(-PI..PI)),
        rng.random_range(-35f64..35.0).to_radians(),
        None,
        rng.random_range(10e-9..300e-9),
    )
}

fn add_noise(x: &mut Array2<Complex64>, std: f64, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, std / 2f64.sqrt()).unwrap();
    x.mapv_inplace(|z| z + Complex64::new(n.sample(rng), n.sample(rng)));
}

fn c3_sage_single_path() -> Verdict {
    let start = Instant::now();
    let sub = ula8();
    let f = freqs();
    let cfg = SageConfig::default();
    let fine_delay = 1.0 / (4.0 * 20e6) / 4f64.powi(cfg.refinement_levels as i32);
    let fine_angle = cfg.fine_angle_step;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_az, mut worst_tau) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let p = random_path(&mut rng, 0.0);
        let h = synthesize_subarray(&sub, &PathSet::new(vec![p]).unwrap(), &f).unwrap();
        let comps = sage_extract(&h.values, &sub, &f, &cfg).unwrap();
        let los = select_los(&comps, LOS_WINDOW_DB).unwrap();
        worst_az = worst_az.max((los.azimuth - p.azimuth).abs());
        worst_tau = worst_tau.max((los.delay - p.delay).abs());
    }
    let mut abs_err = 0.0;
    let trials = 200;
    for _ in 0..trials {
        let p = random_path(&mut rng, 0.0);
        let mut h = synthesize_subarray(&sub, &PathSet::new(vec![p]).unwrap(), &f).unwrap().values;
        add_noise(&mut h, 0.1, &mut rng);
        let comps = sage_extract(&h, &sub, &f, &cfg).unwrap();
        let los = select_los(&comps, LOS_WINDOW_DB).unwrap();
        abs_err += (los.azimuth - p.azimuth).abs().to_degrees();
    }
    let mae = abs_err / trials as f64;
    let elapsed = start.elapsed();
    let pass = worst_az <= fine_angle + 1e-12
        && worst_tau <= fine_delay + 1e-15
        && mae <= 2.0
        && elapsed < Duration::from_secs(60);
    verdict(
        pass,
        format!(
            "noiseless max AoA err {:.4} deg (step {:.1}), max ToF err {:.3} ns (step {:.3}); 20 dB AoA MAE {:.3} deg over {trials}; {:.1} s",
            worst_az.to_degrees(),
            fine_angle.to_degrees(),
            worst_tau * 1e9,
            fine_delay * 1e9,
            mae,
            elapsed.as_secs_f64()
        ),
    )
}

fn c4_stop_rule() -> Verdict {
    let sub = ula8();
    let f = freqs();
    let cfg = SageConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut single = 0;
    for _ in 0..100 {
        let a = random_path(&mut rng, 0.0);
        let b = random_path(&mut rng, -35.0);
        let h = synthesize_subarray(&sub, &PathSet::new(vec![a, b]).unwrap(), &f).unwrap();
        if sage_extract(&h.values, &sub, &f, &cfg).unwrap().len() == 1 {
            single += 1;
        }
    }
    verdict(single == 100, format!("{single}/100 trials extracted exactly one path"))
}

fn c5_rayleigh() -> Verdict {
    let lam = mimoloc::array::wavelength(DEFAULT_CARRIER_HZ);
    let d = rayleigh_distance(dis().aperture(), lam).unwrap();
    let u = rayleigh_distance(layouts::ula(3.0, 1.0, 1.0, DEFAULT_CARRIER_HZ).aperture(), lam).unwrap();
    let r = rayleigh_distance(layouts::ura(3.0, 1.0, 1.0, DEFAULT_CARRIER_HZ).aperture(), lam).unwrap();
    let (ed, eu) = ((d - 5.46).abs() / 5.46, (u - 349.35).abs() / 349.35);
    verdict(
        ed < 0.01 && eu < 0.01,
        format!(
            "DIS {d:.3} m ({:.2}% off 5.46), ULA {u:.2} m ({:.2}% off 349.35), URA {r:.2} m (not asserted)",
            ed * 100.0,
            eu * 100.0
        ),
    )
}

fn c6_link() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let f = freqs();
    let mut worst_rel = 0.0f64;
    for g in [1e-3f64, 1e-2, 0.1, 0.5, 1.0, 2.0, 5.0] {
        let v = Array2::from_shape_fn((64, f.len()), |_| Complex64::from_polar(g.sqrt(), rng.random_range(-PI..PI)));
        let e = effective_snr(&CsiMatrix::new(v, f.clone()).unwrap()).unwrap();
        worst_rel = worst_rel.max((e.gamma_eff - 64.0 * g).abs() / (64.0 * g));
    }
    let mut worst_x = 0.0f64;
    let mut worst_at = 0.0;
    let mut worst_p = 0.0f64;
    for i in 0..=12_000 {
        let x = -6.0 + i as f64 * 1e-3;
        let p = q_function(x);
        let back = q_inverse(p).unwrap();
        if (back - x).abs() > worst_x {
            worst_x = (back - x).abs();
            worst_at = x;
        }
        worst_p = worst_p.max((q_function(back) - p).abs() / p);
    }
    let pass = worst_rel <= 1e-9 && worst_x <= 1e-9 && worst_p <= 1e-9;
    verdict(
        pass,
        format!(
            "flat gamma_eff rel err {worst_rel:.2e}; max |Qinv(Q(x)) - x| {worst_x:.2e} at x = {worst_at:.3}; max rel |Q(Qinv(p)) - p| {worst_p:.2e}"
        ),
    )
}

fn mae(b: &ReportBundle, method: &str, scheme: &str) -> f64 {
    b.result(method, scheme).map(|r| r.report.mae).unwrap_or(f64::NAN)
}

fn c7_metric_ordering(b: &ReportBundle, elapsed: Duration) -> Verdict {
    let m = |s: &str| mae(b, METHOD_FINGERPRINT, s);
    let (amp, aoa, tof, hybrid) = (m("AMP"), m("AOA"), m("TOF"), m("AMP+TOF"));
    let pass = aoa < tof && aoa < amp && hybrid < amp && hybrid < tof && elapsed < Duration::from_secs(600);
    verdict(
        pass,
        format!(
            "MAE cm: AOA {:.2}, TOF {:.2}, AMP {:.2}, AMP+TOF {:.2}; run {:.0} s",
            aoa * 100.0,
            tof * 100.0,
            amp * 100.0,
            hybrid * 100.0,
            elapsed.as_secs_f64()
        ),
    )
}

fn c9_baselines(b: &ReportBundle) -> Verdict {
    let fp = mae(b, METHOD_FINGERPRINT, &MetricScheme::ALL.to_string());
    let tri = mae(b, METHOD_TRIANGULATION, "AOA");
    let tof = mae(b, METHOD_TOF, "TOF");
    let amp = mae(b, METHOD_AMP, "AMP");
    let ordered = fp < tri && tri < tof && tof < amp;

    let topo = dis();
    let subs = whole_panels(&topo);
    let h = 0.4;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let t = [rng.random_range(0.875..2.125), rng.random_range(0.875..2.125)];
        let los: Vec<Option<MultipathComponent>> = subs
            .iter()
            .map(|s| {
                let dir = s.observable_direction([t[0], t[1], h]);
                Some(MultipathComponent::new(
                    Complex64::new(1.0, 0.0),
                    dir.azimuth,
                    None,
                    pipeline::true_delay(s, t, h),
                ))
            })
            .collect();
        let a = geo::triangulate_aoa(&pipeline::bearing_observations(&los, &subs), h).unwrap();
        let r = geo::trilaterate(&pipeline::range_observations(&los, &subs, None), h).unwrap();
        for fix in [a, r] {
            worst = worst.max((fix.x - t[0]).abs().max((fix.y - t[1]).abs()));
        }
    }
    verdict(
        ordered && worst <= 1e-9,
        format!(
            "MAE cm: fingerprint {:.2} < triangulation {:.2} < ToF trilateration {:.2} < AMP trilateration {:.2}: {ordered}; noiseless max error {worst:.2e} m",
            fp * 100.0,
            tri * 100.0,
            tof * 100.0,
            amp * 100.0
        ),
    )
}

fn c8_grid_monotonicity(dir: &Path) -> Verdict {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.fingerprint.grid = 51;
    let mut ds = pipeline::generate(&cfg).unwrap();
    let sol = pipeline::calibrate_stage(&cfg, &ds).unwrap().unwrap();
    pipeline::apply_calibration_to(&mut ds.train, &sol).unwrap();
    pipeline::apply_calibration_to(&mut ds.test, &sol).unwrap();
    let subs = pipeline::partition(&cfg, &ds.train.topology).unwrap();
    let train = pipeline::extract_stage(&ds.train, &subs, &cfg.sage, cfg.fingerprint.los_window_db).unwrap();
    let test = pipeline::extract_stage(&ds.test, &subs, &cfg.sage, cfg.fingerprint.los_window_db).unwrap();
    let all_pos = ds.train.positions();
    let test_pos = ds.test.positions();
    let mut search = cfg.fingerprint.search.clone();
    search.seed = mimoloc::channel::mix_seed(cfg.seed, pipeline::streams::SEARCH, search.seed);
    let mut maes = Vec::new();
    let mut results = Vec::new();
    for n in [6, 11, 26, 51] {
        let idx = pipeline::nested_grid_indices(51, n).unwrap();
        let sub_train = train.subset(&idx);
        let pos: Vec<[f64; 2]> = idx.iter().map(|&i| all_pos[i]).collect();
        let ctx = TrainingContext {
            grid_size: Some(n),
            topology: None,
        };
        let (_, r) = pipeline::fingerprint_stage(
            MetricScheme::ALL,
            &sub_train,
            &pos,
            &test,
            &test_pos,
            &subs,
            &search,
            &ctx,
            &mut Vec::new(),
        )
        .unwrap();
        maes.push((n, r.report.mae));
        results.push(r);
    }
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("errors.csv"), pipeline::errors_csv(&results)).unwrap();
    let pass = maes.windows(2).all(|w| w[1].1 <= w[0].1);
    let text: Vec<String> = maes.iter().map(|(n, m)| format!("{n}x{n} {:.2}", m * 100.0)).collect();
    verdict(
        pass,
        format!("{} MAE cm: {}; {:.0} s", MetricScheme::ALL, text.join(", "), start.elapsed().as_secs_f64()),
    )
}

/// Primal-dual interior-point solve of the dual QP, followed by an exact
/// solve on the active set it identifies.
fn qp_oracle(k: &Array2<f64>, y: &[f64], c: f64, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let m = 2 * n;
    let mut q = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        for j in 0..n {
            q[(i, j)] = k[(i, j)];
            q[(i + n, j + n)] = k[(i, j)];
            q[(i, j + n)] = -k[(i, j)];
            q[(i + n, j)] = -k[(i, j)];
        }
    }
    let lin = DVector::from_fn(m, |i, _| if i < n { eps - y[i] } else { eps + y[i - n] });
    let a = DVector::from_fn(m, |i, _| if i < n { 1.0 } else { -1.0 });
    let mut z = DVector::from_element(m, c / 2.0);
    let mut s = DVector::from_element(m, 1.0);
    let mut t = DVector::from_element(m, 1.0);
    let mut lam = 0.0;
    for _ in 0..200 {
        let gap = (s.dot(&z) + t.dot(&z.map(|v| c - v))) / (2 * m) as f64;
        if gap < 1e-15 {
            break;
        }
        let mu = 0.1 * gap;
        let rd = &q * &z + &lin - &a * lam - &s + &t;
        let rp = a.dot(&z);
        let mut h = DMatrix::<f64>::zeros(m + 1, m + 1);
        let mut rhs = DVector::<f64>::zeros(m + 1);
        for i in 0..m {
            let u = c - z[i];
            for j in 0..m {
                h[(i, j)] = q[(i, j)];
            }
            h[(i, i)] += s[i] / z[i] + t[i] / u;
            h[(i, m)] = -a[i];
            h[(m, i)] = -a[i];
            rhs[i] = -rd[i] + (mu / z[i] - s[i]) - (mu / u - t[i]);
        }
        rhs[m] = rp;
        let d = h.lu().solve(&rhs).expect("interior-point system is singular");
        let dz = d.rows(0, m).into_owned();
        let dl = d[m];
        let ds = DVector::from_fn(m, |i, _| (mu - s[i] * z[i] - s[i] * dz[i]) / z[i]);
        let dt = DVector::from_fn(m, |i, _| (mu - t[i] * (c - z[i]) + t[i] * dz[i]) / (c - z[i]));
        let mut step = 1.0f64;
        for i in 0..m {
            if dz[i] < 0.0 {
                step = step.min(-0.99 * z[i] / dz[i]);
            }
            if dz[i] > 0.0 {
                step = step.min(0.99 * (c - z[i]) / dz[i]);
            }
            if ds[i] < 0.0 {
                step = step.min(-0.99 * s[i] / ds[i]);
            }
            if dt[i] < 0.0 {
                step = step.min(-0.99 * t[i] / dt[i]);
            }
        }
        z += &dz * step;
        s += &ds * step;
        t += &dt * step;
        lam += dl * step;
    }
    let mut alpha: Vec<f64> = (0..n).map(|i| z[i]).collect();
    let mut alpha_star: Vec<f64> = (0..n).map(|i| z[i + n]).collect();
    if let Some((a2, s2)) = polish(k, y, c, eps, &alpha, &alpha_star) {
        if dual_objective(k, y, eps, &a2, &s2) <= dual_objective(k, y, eps, &alpha, &alpha_star) {
            alpha = a2;
            alpha_star = s2;
        }
    }
    (alpha, alpha_star)
}

/// Exact optimum for the active set of an approximate solution: bounded and
/// zero coefficients stay fixed, free ones sit on the tube edge.
fn polish(k: &Array2<f64>, y: &[f64], c: f64, eps: f64, alpha: &[f64], alpha_star: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = y.len();
    let tol = 1e-7 * c.max(1.0);
    let beta: Vec<f64> = alpha.iter().zip(alpha_star).map(|(a, b)| a - b).collect();
    let free: Vec<usize> = (0..n).filter(|&i| beta[i].abs() > tol && beta[i].abs() < c - tol).collect();
    let fixed: Vec<f64> = beta
        .iter()
        .map(|b| if b.abs() <= tol { 0.0 } else if b.abs() >= c - tol { c * b.signum() } else { 0.0 })
        .collect();
    let f = free.len();
    let mut h = DMatrix::<f64>::zeros(f + 1, f + 1);
    let mut rhs = DVector::<f64>::zeros(f + 1);
    for (r, &i) in free.iter().enumerate() {
        for (cidx, &j) in free.iter().enumerate() {
            h[(r, cidx)] = k[(i, j)];
        }
        h[(r, f)] = 1.0;
        let known: f64 = (0..n).map(|j| k[(i, j)] * fixed[j]).sum();
        rhs[r] = y[i] - eps * beta[i].signum() - known;
    }
    for cidx in 0..f {
        h[(f, cidx)] = 1.0;
    }
    rhs[f] = -fixed.iter().sum::<f64>();
    let sol = h.lu().solve(&rhs)?;
    let mut b = fixed;
    for (r, &i) in free.iter().enumerate() {
        if sol[r].signum() != beta[i].signum() || sol[r].abs() > c {
            return None;
        }
        b[i] = sol[r];
    }
    Some((b.iter().map(|v| v.max(0.0)).collect(), b.iter().map(|v| (-v).max(0.0)).collect()))
}

fn c10_svr_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst_obj = 0.0f64;
    let mut tube_violations = 0;
    let instances = 30;
    for inst in 0..instances {
        let n = 20;
        let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(0.0f64..1.0));
        let y: Vec<f64> = (0..n)
            .map(|i| (3.0 * x[(i, 0)]).sin() + x[(i, 1)] * x[(i, 2)] + rng.random_range(-0.2..0.2))
            .collect();
        let params = SvrParams {
            c: [0.1, 1.0, 10.0][inst % 3],
            epsilon: [0.01, 0.05, 0.1][(inst / 3) % 3],
            kernel_scale: [0.3, 0.7, 1.5][(inst / 9) % 3],
            tolerance: 1e-10,
            max_iterations: 10_000_000,
        };
        let k = kernel_matrix(x.view(), params.kernel_scale);
        let sol = solve_dual(&k, &y, &params).unwrap();
        let (oa, os) = qp_oracle(&k, &y, params.c, params.epsilon);
        let ours = dual_objective(&k, &y, params.epsilon, &sol.alpha, &sol.alpha_star);
        let oracle = dual_objective(&k, &y, params.epsilon, &oa, &os);
        worst_obj = worst_obj.max((ours - oracle).abs() / oracle.abs().max(1e-300));

        let beta = sol.coefficients();
        let f = k.dot(&Array1::from(beta.clone())) + sol.bias;
        let delta = 1e-6;
        for i in 0..n {
            let r = y[i] - f[i];
            let at_bound = (beta[i].abs() - params.c).abs() <= delta * params.c;
            if r.abs() > params.epsilon + delta && !at_bound {
                tube_violations += 1;
            }
            if r.abs() < params.epsilon - delta && beta[i].abs() > delta * params.c {
                tube_violations += 1;
            }
        }
    }
    verdict(
        worst_obj <= 1e-6 && tube_violations == 0,
        format!("{instances} instances: max relative objective gap {worst_obj:.2e}; epsilon-tube violations {tube_violations}"),
    )
}

fn c11_determinism(dir: &Path) -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.channel.test_points = 60;
    cfg.fingerprint.schemes = vec![MetricScheme::AOA, "AMP+TOF".parse().unwrap()];
    let (a, b) = (dir.join("a"), dir.join("b"));
    if let Err(e) = pipeline::run_pipeline(&cfg, &a).and_then(|_| pipeline::run_pipeline(&cfg, &b)) {
        return verdict(false, e.to_string());
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") || n == "manifest.json")
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok())
        .collect();
    verdict(
        differing.is_empty() && names.len() > 5,
        format!("{} files compared, differing: {:?}", names.len(), differing),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let tmp = tempfile::tempdir().unwrap();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, v: Verdict| {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} [{tag}] {name}: {}", v.detail);
        if !v.pass {
            failed += 1;
        }
    };
    if run(1) {
        report(1, "calibration round trip", c1_calibration());
    }
    if run(2) {
        report(2, "magnitude preservation", c2_magnitude());
    }
    if run(3) {
        report(3, "SAGE single-path recovery", c3_sage_single_path());
    }
    if run(4) {
        report(4, "30 dB stopping rule", c4_stop_rule());
    }
    if run(5) {
        report(5, "Rayleigh distances", c5_rayleigh());
    }
    if run(6) {
        report(6, "effective SNR and Q round trip", c6_link());
    }
    if run(7) || run(9) {
        let start = Instant::now();
        match pipeline::run_pipeline(&ExperimentConfig::default(), &tmp.path().join("default")) {
            Ok(bundle) => {
                let elapsed = start.elapsed();
                if run(7) {
                    report(7, "metric ordering", c7_metric_ordering(&bundle, elapsed));
                }
                if run(9) {
                    report(9, "baseline ordering", c9_baselines(&bundle));
                }
            }
            Err(e) => {
                for n in [7, 9] {
                    if run(n) {
                        report(n, "pipeline", verdict(false, e.to_string()));
                    }
                }
            }
        }
    }
    if run(8) {
        report(8, "grid-size monotonicity", c8_grid_monotonicity(&tmp.path().join("grids")));
    }
    if run(10) {
        report(10, "epsilon-SVR KKT oracle", c10_svr_oracle());
    }
    if run(11) {
        report(11, "determinism", c11_determinism(&tmp.path().join("determinism")));
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
