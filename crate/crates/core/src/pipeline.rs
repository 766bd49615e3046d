//! Experiment runner: generate or ingest, calibrate, partition, extract,
//! assemble features, train, evaluate, and write reports.
//!
//! All random streams derive from the config seed through
//! [`mix_seed`](crate::channel::mix_seed), and samples are processed in a
//! fixed order, so identical configs give byte-identical outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::array::{partition_sliding, ArrayTopology, Panel, SubArray, SPEED_OF_LIGHT};
use crate::calib::{self, CalibrationSolution};
use crate::channel::{
    generate_at_points, mix_seed, noise_std_for_snr, subcarrier_grid, wrap_phase, ImpairmentParams, LabeledDataset,
    Rect,
};
use crate::config::{ExperimentConfig, MountingError, TopologyChoice};
use crate::dataset;
use crate::error::{Error, Result};
use crate::fingerprint::{self, ErrorReport, FeatureVector, FingerprintModel, MetricScheme, TrainingContext};
use crate::geo::{self, AnchorObservation, AoaKind, PathLossModel};
use crate::link;
use crate::sage::{self, MpcRecord, MultipathComponent, SageConfig};

/// Seed streams, recorded in the manifest.
pub mod streams {
    pub const MOUNTING: u64 = 1;
    pub const TRAIN_NOISE: u64 = 2;
    pub const TEST_NOISE: u64 = 3;
    pub const REFERENCE_NOISE: u64 = 4;
    pub const TEST_POINTS: u64 = 5;
    pub const ANTENNA_OFFSETS: u64 = 6;
    pub const SEARCH: u64 = 8;
}

pub const METHOD_FINGERPRINT: &str = "fingerprint";
pub const METHOD_TRIANGULATION: &str = "triangulation-aoa";
pub const METHOD_TOF: &str = "trilateration-tof";
pub const METHOD_AMP: &str = "trilateration-amp";

pub fn frequencies(cfg: &ExperimentConfig) -> Vec<f64> {
    subcarrier_grid(cfg.array.carrier_hz, cfg.channel.bandwidth_hz, cfg.channel.subcarriers)
}

/// Impairments from the config, without noise.
pub fn impairment_params(cfg: &ExperimentConfig, antennas: usize) -> Result<ImpairmentParams> {
    let ic = &cfg.impairments;
    if !ic.enabled {
        return Ok(ImpairmentParams::none(antennas));
    }
    let antenna_offsets = match &ic.antenna_offsets {
        Some(v) if v.len() == antennas => v.iter().map(|x| wrap_phase(*x)).collect(),
        Some(v) => {
            return Err(Error::Config(format!("{} antenna offsets for {antennas} antennas", v.len())));
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, streams::ANTENNA_OFFSETS, 0));
            let r = ic.antenna_offset_range.abs();
            (0..antennas)
                .map(|_| if r > 0.0 { wrap_phase(rng.random_range(-r..=r)) } else { 0.0 })
                .collect()
        }
    };
    Ok(ImpairmentParams {
        sfo_slope: ic.sfo_slope,
        sto_samples: ic.sto_samples,
        iq_gain: ic.iq_gain,
        iq_time: ic.iq_time,
        iq_phase: ic.iq_phase,
        cpo: ic.cpo,
        antenna_offsets,
        noise_std: 0.0,
    })
}

/// Perturbs every panel pose with Gaussian position and orientation errors.
pub fn as_built(topo: &ArrayTopology, err: &MountingError, seed: u64) -> Result<ArrayTopology> {
    if err.position_std_m == 0.0 && err.orientation_std_deg == 0.0 {
        return Ok(topo.clone());
    }
    let pos = Normal::new(0.0, err.position_std_m.abs()).map_err(|e| Error::Config(e.to_string()))?;
    let rot = Normal::new(0.0, err.orientation_std_deg.abs().to_radians()).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let panels = topo
        .panels
        .iter()
        .map(|p| {
            let o = [
                p.origin[0] + pos.sample(&mut rng),
                p.origin[1] + pos.sample(&mut rng),
                p.origin[2] + pos.sample(&mut rng),
            ];
            Panel::vertical(o, p.orientation() + rot.sample(&mut rng), p.rows, p.cols)
        })
        .collect();
    ArrayTopology::new(topo.kind, panels, topo.spacing, topo.wavelength)
}

/// Uniform random positions inside `region`.
pub fn test_positions(region: &Rect, n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.random_range(region.x0..=region.x1), rng.random_range(region.y0..=region.y1)])
        .collect()
}

/// Indices of an `n x n` grid inside a row-major `big x big` grid over the
/// same region, when the smaller grid is nested in the larger one.
pub fn nested_grid_indices(big: usize, n: usize) -> Option<Vec<usize>> {
    if n < 2 || big < n || !(big - 1).is_multiple_of(n - 1) {
        return None;
    }
    let step = (big - 1) / (n - 1);
    Some((0..n).flat_map(|j| (0..n).map(move |i| j * step * big + i * step)).collect())
}

/// Train, test and calibration-reference data of one run.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub reference: Option<LabeledDataset>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Noise standard deviation of the synthetic data; `None` for recorded
    /// data, which is assumed noise-normalized at ingestion.
    pub noise_std: Option<f64>,
    pub impairments: Option<ImpairmentParams>,
}

impl Datasets {
    /// Gain that normalizes CSI to unit noise variance, if known.
    pub fn noise_gain(&self) -> Option<f64> {
        match self.noise_std {
            None => Some(1.0),
            Some(s) if s > 0.0 => Some(1.0 / s),
            Some(_) => None,
        }
    }
}

/// Synthetic datasets per the config, at the precision they are stored with.
pub fn generate(cfg: &ExperimentConfig) -> Result<Datasets> {
    let topo = cfg.array.topology()?;
    let truth = as_built(&topo, &cfg.array.mounting, mix_seed(cfg.seed, streams::MOUNTING, 0))?;
    let freqs = frequencies(cfg);
    let scene = cfg.channel.scene(cfg.array.side_m);
    let region = cfg.channel.region();
    if !scene.area.contains(&region) {
        return Err(Error::Config("UE region must lie inside the target area".into()));
    }
    let mut imp = impairment_params(cfg, topo.len())?;
    imp.noise_std = noise_std_for_snr(&truth, &scene, &region, &freqs, cfg.channel.snr_db)?;
    let gen = |points: &[[f64; 2]], stream: u64| {
        let mut ds = generate_at_points(&topo, &truth, &scene, points, &freqs, &imp, mix_seed(cfg.seed, stream, 0))?;
        dataset::quantize(&mut ds);
        Ok::<_, Error>(ds)
    };
    let train = gen(&region.grid(cfg.fingerprint.grid), streams::TRAIN_NOISE)?;
    let test_pts = test_positions(&region, cfg.channel.test_points, mix_seed(cfg.seed, streams::TEST_POINTS, 0));
    let test = gen(&test_pts, streams::TEST_NOISE)?;
    let reference = if cfg.calibration.enabled {
        Some(gen(&region.grid(cfg.calibration.reference_grid), streams::REFERENCE_NOISE)?)
    } else {
        None
    };
    Ok(Datasets {
        reference,
        train,
        test,
        noise_std: Some(imp.noise_std),
        impairments: Some(imp),
    })
}

/// Splits a recorded dataset: samples on the training grid train, the rest test.
pub fn split_recorded(cfg: &ExperimentConfig, ds: LabeledDataset) -> Result<Datasets> {
    let grid = cfg.channel.region().grid(cfg.fingerprint.grid);
    let tol = if cfg.ingest.grid_tolerance_m > 0.0 { cfg.ingest.grid_tolerance_m } else { 1e-3 };
    let on_grid = |p: [f64; 2]| grid.iter().any(|g| (g[0] - p[0]).hypot(g[1] - p[1]) <= tol);
    let (train, test): (Vec<_>, Vec<_>) = ds.samples.into_iter().partition(|s| on_grid(s.position));
    if train.len() < 2 || test.is_empty() {
        return Err(Error::invalid(format!(
            "recorded dataset splits into {} grid and {} remaining samples",
            train.len(),
            test.len()
        )));
    }
    let wrap = |samples| LabeledDataset {
        topology: ds.topology.clone(),
        frequencies: ds.frequencies.clone(),
        ue_height: ds.ue_height,
        samples,
    };
    Ok(Datasets {
        reference: None,
        train: wrap(train),
        test: wrap(test),
        noise_std: None,
        impairments: None,
    })
}

pub fn ingest(cfg: &ExperimentConfig) -> Result<Datasets> {
    let path = cfg
        .ingest
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("ingest.dataset is not set".into()))?;
    split_recorded(cfg, dataset::load(path, cfg.ingest.noise_variance)?)
}

/// Fits the calibration on the reference set (or the training set when
/// there is none).
pub fn calibrate_stage(cfg: &ExperimentConfig, ds: &Datasets) -> Result<Option<CalibrationSolution>> {
    if !cfg.calibration.enabled {
        return Ok(None);
    }
    let reference = ds.reference.as_ref().unwrap_or(&ds.train);
    let csis: Vec<_> = reference.samples.iter().map(|s| s.csi.clone()).collect();
    let positions: Vec<_> = reference
        .samples
        .iter()
        .map(|s| [s.position[0], s.position[1], reference.ue_height])
        .collect();
    calib::calibrate(&csis, &positions, &reference.topology, &cfg.calibration.lm).map(Some)
}

pub fn apply_calibration_to(ds: &mut LabeledDataset, sol: &CalibrationSolution) -> Result<()> {
    for (i, s) in ds.samples.iter_mut().enumerate() {
        s.csi = calib::apply_calibration(&s.csi, sol).map_err(|e| e.at_stage("calibrate", Some(i)))?;
    }
    Ok(())
}

/// LoS per sample and sub-array, plus every extracted component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub los: Vec<Vec<Option<MultipathComponent>>>,
    #[serde(skip)]
    pub records: Vec<MpcRecord>,
}

impl Extraction {
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            los: indices.iter().map(|&i| self.los[i].clone()).collect(),
            records: Vec::new(),
        }
    }
}

/// Runs SAGE on every sub-array of every sample, in parallel over samples.
pub fn extract_stage(ds: &LabeledDataset, subs: &[SubArray], cfg: &SageConfig, los_window_db: f64) -> Result<Extraction> {
    let per_sample: Vec<(Vec<Option<MultipathComponent>>, Vec<MpcRecord>)> = ds
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut los = Vec::with_capacity(subs.len());
            let mut records = Vec::new();
            for (j, sub) in subs.iter().enumerate() {
                let x = s.csi.select(sub).map_err(|e| e.at_stage("extract", Some(i)))?;
                let comps = sage::sage_extract(&x, sub, &ds.frequencies, cfg).map_err(|e| e.at_stage("extract", Some(i)))?;
                for (k, c) in comps.iter().enumerate() {
                    records.push(MpcRecord {
                        sample_id: i,
                        subarray_id: j,
                        path_index: k,
                        component: *c,
                    });
                }
                los.push(sage::select_los(&comps, los_window_db).ok());
            }
            Ok((los, records))
        })
        .collect::<Result<_>>()?;
    let mut out = Extraction {
        los: Vec::with_capacity(per_sample.len()),
        records: Vec::new(),
    };
    for (l, r) in per_sample {
        out.los.push(l);
        out.records.extend(r);
    }
    Ok(out)
}

/// A sample left out of one method's evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedSample {
    pub split: String,
    pub method: String,
    pub sample: usize,
    pub reason: String,
}

/// Feature vectors of the samples that have a LoS on every sub-array.
pub fn assemble_features(
    ext: &Extraction,
    subs: &[SubArray],
    scheme: MetricScheme,
    split: &str,
    dropped: &mut Vec<DroppedSample>,
) -> (Vec<FeatureVector>, Vec<usize>) {
    let mut feats = Vec::new();
    let mut kept = Vec::new();
    for (i, los) in ext.los.iter().enumerate() {
        match fingerprint::build_features(los, subs, scheme) {
            Ok(f) => {
                feats.push(f);
                kept.push(i);
            }
            Err(e) => {
                log::warn!("{split} sample {i} dropped for {scheme}: {e}");
                dropped.push(DroppedSample {
                    split: split.into(),
                    method: format!("{METHOD_FINGERPRINT}/{scheme}"),
                    sample: i,
                    reason: e.to_string(),
                });
            }
        }
    }
    (feats, kept)
}

fn boresight_angle(sub: &SubArray) -> f64 {
    sub.frame.boresight[1].atan2(sub.frame.boresight[0])
}

/// One bearing per sub-array with a LoS, anchored at its phase center.
pub fn bearing_observations(los: &[Option<MultipathComponent>], subs: &[SubArray]) -> Vec<AnchorObservation> {
    los.iter()
        .zip(subs)
        .filter_map(|(c, s)| {
            let c = c.as_ref()?;
            let kind = if s.is_planar() { AoaKind::Horizontal } else { AoaKind::Cone };
            Some(AnchorObservation::new(s.phase_center, boresight_angle(s)).with_aoa(c.azimuth, kind))
        })
        .collect()
}

/// One range per sub-array with a LoS, anchored at its reference element.
/// With `models` the range comes from the LoS amplitude, otherwise from
/// its delay.
pub fn range_observations(
    los: &[Option<MultipathComponent>],
    subs: &[SubArray],
    models: Option<&[PathLossModel]>,
) -> Vec<AnchorObservation> {
    los.iter()
        .zip(subs)
        .enumerate()
        .filter_map(|(j, (c, s))| {
            let c = c.as_ref()?;
            let r = match models {
                Some(m) => geo::amp_to_range(c.amplitude_db(), &m[j]),
                None => geo::tof_to_range(c.delay),
            };
            (r > 0.0 && r.is_finite()).then(|| {
                AnchorObservation::new(s.reference_element(), boresight_angle(s))
                    .with_range(r)
                    .with_amp_db(c.amplitude_db())
            })
        })
        .collect()
}

/// Per-sub-array path-loss reference fitted on the training LoS amplitudes.
pub fn fit_path_loss(
    ext: &Extraction,
    positions: &[[f64; 2]],
    ue_height: f64,
    subs: &[SubArray],
    exponent: f64,
) -> Result<Vec<PathLossModel>> {
    subs.iter()
        .enumerate()
        .map(|(j, s)| {
            let anchor = s.reference_element();
            let (amps, ranges): (Vec<f64>, Vec<f64>) = ext
                .los
                .iter()
                .zip(positions)
                .filter_map(|(l, p)| {
                    let c = l[j].as_ref()?;
                    let d = [p[0] - anchor[0], p[1] - anchor[1], ue_height - anchor[2]];
                    Some((c.amplitude_db(), (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()))
                })
                .unzip();
            PathLossModel::fit(&amps, &ranges, exponent)
        })
        .collect()
}

/// Effective SNR of one sample over the whole array and over each sub-array.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSnr {
    pub full_db: f64,
    pub subarray_db: Vec<f64>,
}

pub fn sample_snr(csi: &crate::channel::CsiMatrix, subs: &[SubArray], gain: Option<f64>) -> Result<SampleSnr> {
    let Some(g) = gain else {
        return Ok(SampleSnr {
            full_db: f64::INFINITY,
            subarray_db: vec![f64::INFINITY; subs.len()],
        });
    };
    let scaled = csi.values.mapv(|z| z * g);
    let full_db = link::effective_snr_rows(scaled.view())?.gamma_eff_db();
    let subarray_db = subs
        .iter()
        .map(|s| {
            let rows = scaled.select(ndarray::Axis(0), &s.element_indices);
            Ok(link::effective_snr_rows(rows.view())?.gamma_eff_db())
        })
        .collect::<Result<_>>()?;
    Ok(SampleSnr { full_db, subarray_db })
}

/// Predictions of one method on the test set.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: String,
    /// Metric scheme for fingerprinting, the measured quantity otherwise.
    pub scheme: String,
    pub grid: usize,
    pub sample_ids: Vec<usize>,
    pub predictions: Vec<[f64; 2]>,
    pub report: ErrorReport,
}

impl MethodResult {
    pub fn label(&self) -> String {
        format!("{}_{}", self.method, self.scheme.to_ascii_lowercase().replace('+', "_"))
    }
}

/// File name of the fingerprint model trained with `scheme`.
pub fn model_file(scheme: MetricScheme) -> String {
    format!("model_{METHOD_FINGERPRINT}_{}.svr", scheme.to_string().to_ascii_lowercase().replace('+', "_"))
}

fn method_result(
    method: &str,
    scheme: String,
    grid: usize,
    ids: Vec<usize>,
    predictions: Vec<[f64; 2]>,
    truth: &[[f64; 2]],
) -> Result<MethodResult> {
    let t: Vec<[f64; 2]> = ids.iter().map(|&i| truth[i]).collect();
    Ok(MethodResult {
        method: method.into(),
        scheme,
        grid,
        report: ErrorReport::from_predictions(&predictions, &t)?,
        sample_ids: ids,
        predictions,
    })
}

/// Trains one scheme on `train` and evaluates it on `test`.
#[allow(clippy::too_many_arguments)]
pub fn fingerprint_stage(
    scheme: MetricScheme,
    train: &Extraction,
    train_pos: &[[f64; 2]],
    test: &Extraction,
    test_pos: &[[f64; 2]],
    subs: &[SubArray],
    search: &fingerprint::SearchSpace,
    context: &TrainingContext,
    dropped: &mut Vec<DroppedSample>,
) -> Result<(FingerprintModel, MethodResult)> {
    let (tf, tk) = assemble_features(train, subs, scheme, "train", dropped);
    let targets: Vec<[f64; 2]> = tk.iter().map(|&i| train_pos[i]).collect();
    let model = fingerprint::train_svr(&tf, &targets, search, context).map_err(|e| e.at_stage("train", None))?;
    let (ef, ek) = assemble_features(test, subs, scheme, "test", dropped);
    let predictions = ef
        .iter()
        .zip(&ek)
        .map(|(f, &i)| fingerprint::predict(&model, f).map_err(|e| e.at_stage("evaluate", Some(i))))
        .collect::<Result<Vec<_>>>()?;
    let result = method_result(METHOD_FINGERPRINT, scheme.to_string(), context.grid_size.unwrap_or(0), ek, predictions, test_pos)
        .map_err(|e| e.at_stage("evaluate", None))?;
    Ok((model, result))
}

/// Triangulation and both trilaterations on the test set.
pub fn geo_stage(
    train: &Extraction,
    train_pos: &[[f64; 2]],
    test: &Extraction,
    test_pos: &[[f64; 2]],
    ue_height: f64,
    subs: &[SubArray],
    exponent: f64,
    grid: usize,
    dropped: &mut Vec<DroppedSample>,
) -> Result<Vec<MethodResult>> {
    let models = fit_path_loss(train, train_pos, ue_height, subs, exponent).map_err(|e| e.at_stage("geo", None))?;
    let mut out = Vec::new();
    type Solver<'a> = Box<dyn Fn(&[Option<MultipathComponent>]) -> Result<geo::Fix> + 'a>;
    let solvers: [(&str, &str, Solver); 3] = [
        (
            METHOD_TRIANGULATION,
            "AOA",
            Box::new(|l| geo::triangulate_aoa(&bearing_observations(l, subs), ue_height)),
        ),
        (
            METHOD_TOF,
            "TOF",
            Box::new(|l| geo::trilaterate(&range_observations(l, subs, None), ue_height)),
        ),
        (
            METHOD_AMP,
            "AMP",
            Box::new(|l| geo::trilaterate(&range_observations(l, subs, Some(&models)), ue_height)),
        ),
    ];
    for (method, scheme, solve) in solvers {
        let mut ids = Vec::new();
        let mut preds = Vec::new();
        for (i, l) in test.los.iter().enumerate() {
            match solve(l) {
                Ok(f) if f.x.is_finite() && f.y.is_finite() => {
                    ids.push(i);
                    preds.push(f.position());
                }
                Ok(_) => dropped.push(DroppedSample {
                    split: "test".into(),
                    method: method.into(),
                    sample: i,
                    reason: "non-finite estimate".into(),
                }),
                Err(e) => dropped.push(DroppedSample {
                    split: "test".into(),
                    method: method.into(),
                    sample: i,
                    reason: e.to_string(),
                }),
            }
        }
        if ids.is_empty() {
            log::warn!("{method}: no test sample could be solved");
            continue;
        }
        out.push(method_result(method, scheme.into(), grid, ids, preds, test_pos).map_err(|e| e.at_stage("geo", None))?);
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub sample: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Derived seeds by stream name.
    pub seeds: Vec<(String, u64)>,
    pub stages_completed: Vec<String>,
    pub failure: Option<StageFailure>,
    pub dropped: Vec<DroppedSample>,
    pub warnings: Vec<String>,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_FORMAT: &str = "mimoloc-manifest/1";

/// Writes output files and keeps their hashes for the manifest.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes)?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry {
            path: name.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(path)
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub out_dir: PathBuf,
    pub calibration: Option<CalibrationSolution>,
    pub results: Vec<MethodResult>,
    pub manifest: Manifest,
}

impl ReportBundle {
    pub fn result(&self, method: &str, scheme: &str) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method && r.scheme == scheme)
    }
}

pub const ERRORS_CSV_HEADER: &str = "method,scheme,grid,count,mae_cm,median_cm,p90_cm,p95_cm";

pub fn errors_csv(results: &[MethodResult]) -> String {
    let mut s = format!("{ERRORS_CSV_HEADER}\n");
    for r in results {
        let p = &r.report;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.scheme,
            r.grid,
            p.count,
            p.mae * 100.0,
            p.median * 100.0,
            p.p90 * 100.0,
            p.p95 * 100.0
        );
    }
    s
}

pub fn predictions_csv(results: &[MethodResult], truth: &[[f64; 2]], snr: &[SampleSnr]) -> String {
    let mut s = String::from("sample_id,method,scheme,x_true_m,y_true_m,x_pred_m,y_pred_m,error_m,gamma_eff_db\n");
    for r in results {
        for (&i, p) in r.sample_ids.iter().zip(&r.predictions) {
            let t = truth[i];
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{},{},{},{}",
                r.method,
                r.scheme,
                t[0],
                t[1],
                p[0],
                p[1],
                (p[0] - t[0]).hypot(p[1] - t[1]),
                snr[i].full_db
            );
        }
    }
    s
}

pub fn snr_csv(snr: &[SampleSnr], truth: &[[f64; 2]]) -> String {
    let mut s = String::from("sample_id,x_m,y_m,variant,gamma_eff_db\n");
    for (i, (v, t)) in snr.iter().zip(truth).enumerate() {
        let _ = writeln!(s, "{i},{},{},full,{}", t[0], t[1], v.full_db);
        for (j, g) in v.subarray_db.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},subarray_{j},{g}", t[0], t[1]);
        }
    }
    s
}

fn mpc_csv(records: &[MpcRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    sage::write_mpc_csv(&mut buf, records)?;
    Ok(buf)
}

fn cdf_csv(report: &ErrorReport) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    report.write_cdf_csv(&mut buf)?;
    Ok(buf)
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(sha256_hex(cfg.to_toml()?.as_bytes()))
}

fn seed_list(seed: u64) -> Vec<(String, u64)> {
    [
        ("mounting", streams::MOUNTING),
        ("train_noise", streams::TRAIN_NOISE),
        ("test_noise", streams::TEST_NOISE),
        ("reference_noise", streams::REFERENCE_NOISE),
        ("test_points", streams::TEST_POINTS),
        ("antenna_offsets", streams::ANTENNA_OFFSETS),
    ]
    .iter()
    .map(|(n, s)| (n.to_string(), mix_seed(seed, *s, 0)))
    .chain(std::iter::once(("search".to_string(), mix_seed(seed, streams::SEARCH, 0))))
    .collect()
}

/// Sub-arrays of the config's partition on `topo`.
pub fn partition(cfg: &ExperimentConfig, topo: &ArrayTopology) -> Result<Vec<SubArray>> {
    let (w, s) = cfg.array.window_for(topo);
    partition_sliding(topo, w, s)
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: OutputDir,
    manifest: Manifest,
}

impl Run<'_> {
    fn done(&mut self, stage: &str) {
        self.manifest.stages_completed.push(stage.into());
    }

    fn finish(&mut self) -> Result<()> {
        self.manifest.files = self.out.files().to_vec();
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        let path = self.out.root().join("manifest.json");
        std::fs::write(path, json)?;
        Ok(())
    }

    fn body(&mut self, data: Option<Datasets>) -> Result<(Option<CalibrationSolution>, Vec<MethodResult>)> {
        let cfg = self.cfg;
        self.out.write("config.toml", cfg.to_toml()?.as_bytes())?;
        let mut ds = match data {
            Some(d) => d,
            None if cfg.ingest.dataset.is_some() => ingest(cfg).map_err(|e| e.at_stage("ingest", None))?,
            None => generate(cfg).map_err(|e| e.at_stage("generate", None))?,
        };
        self.done(if cfg.ingest.dataset.is_some() { "ingest" } else { "generate" });

        let sol = calibrate_stage(cfg, &ds).map_err(|e| e.at_stage("calibrate", None))?;
        if let Some(sol) = &sol {
            apply_calibration_to(&mut ds.train, sol)?;
            apply_calibration_to(&mut ds.test, sol)?;
            self.out.write("calibration.json", sol.to_json()?.as_bytes())?;
            if sol.flat_direction {
                self.manifest
                    .warnings
                    .push("calibration: IQ gain ~ 0, IQ time and phase unidentifiable".into());
            }
        }
        self.done("calibrate");

        let subs = partition(cfg, &ds.train.topology).map_err(|e| e.at_stage("partition", None))?;
        self.done("partition");

        let train = extract_stage(&ds.train, &subs, &cfg.sage, cfg.fingerprint.los_window_db)?;
        self.out.write("mpc_train.csv", &mpc_csv(&train.records)?)?;
        let test = extract_stage(&ds.test, &subs, &cfg.sage, cfg.fingerprint.los_window_db)?;
        self.out.write("mpc_test.csv", &mpc_csv(&test.records)?)?;
        self.done("extract");

        let train_pos = ds.train.positions();
        let test_pos = ds.test.positions();
        let context = TrainingContext {
            grid_size: Some(cfg.fingerprint.grid),
            topology: Some(crate::array::TopologyDescriptor::from_topology(&ds.train.topology)),
        };
        let mut search = cfg.fingerprint.search.clone();
        search.seed = mix_seed(cfg.seed, streams::SEARCH, search.seed);
        let mut results = Vec::new();
        for scheme in &cfg.fingerprint.schemes {
            let (model, result) = fingerprint_stage(
                *scheme,
                &train,
                &train_pos,
                &test,
                &test_pos,
                &subs,
                &search,
                &context,
                &mut self.manifest.dropped,
            )?;
            let mut buf = Vec::new();
            fingerprint::write_model(&mut buf, &model)?;
            self.out.write(&model_file(*scheme), &buf)?;
            results.push(result);
        }
        self.done("train");

        if cfg.geo.enabled {
            results.extend(geo_stage(
                &train,
                &train_pos,
                &test,
                &test_pos,
                ds.train.ue_height,
                &subs,
                cfg.geo.path_loss_exponent,
                cfg.fingerprint.grid,
                &mut self.manifest.dropped,
            )?);
            self.done("geo");
        }

        let gain = ds.noise_gain();
        let snr = ds
            .test
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| sample_snr(&s.csi, &subs, gain).map_err(|e| e.at_stage("link", Some(i))))
            .collect::<Result<Vec<_>>>()?;
        self.out.write("snr.csv", snr_csv(&snr, &test_pos).as_bytes())?;

        self.out.write("errors.csv", errors_csv(&results).as_bytes())?;
        for r in &results {
            self.out.write(&format!("cdf_{}.csv", r.label()), &cdf_csv(&r.report)?)?;
        }
        self.out.write("predictions.csv", predictions_csv(&results, &test_pos, &snr).as_bytes())?;
        self.done("evaluate");
        Ok((sol, results))
    }
}

/// Runs every stage and writes reports into `out`. On failure the outputs
/// written so far stay in place and the manifest records the failing stage.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<ReportBundle> {
    run_pipeline_with(cfg, out, None)
}

/// [`run_pipeline`] on datasets that are already in memory.
pub fn run_pipeline_with(cfg: &ExperimentConfig, out: &Path, data: Option<Datasets>) -> Result<ReportBundle> {
    cfg.validate()?;
    let mut run = Run {
        cfg,
        out: OutputDir::create(out)?,
        manifest: Manifest {
            format: MANIFEST_FORMAT.into(),
            config_sha256: config_hash(cfg)?,
            seed: cfg.seed,
            seeds: seed_list(cfg.seed),
            stages_completed: Vec::new(),
            failure: None,
            dropped: Vec::new(),
            warnings: Vec::new(),
            files: Vec::new(),
        },
    };
    match run.body(data) {
        Ok((calibration, results)) => {
            run.finish()?;
            Ok(ReportBundle {
                out_dir: out.to_path_buf(),
                calibration,
                results,
                manifest: run.manifest,
            })
        }
        Err(e) => {
            let (stage, sample) = match &e {
                Error::Stage { stage, sample, .. } => (stage.to_string(), *sample),
                _ => ("pipeline".to_string(), None),
            };
            run.manifest.failure = Some(StageFailure {
                stage,
                sample,
                message: e.to_string(),
            });
            run.finish()?;
            Err(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Antennas,
    GridSize,
    Snr,
    Scheme,
    Topology,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "antennas" => Ok(Self::Antennas),
            "grid_size" | "grid" => Ok(Self::GridSize),
            "snr" => Ok(Self::Snr),
            "scheme" => Ok(Self::Scheme),
            "topology" => Ok(Self::Topology),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

impl SweepAxis {
    fn name(&self) -> &'static str {
        match self {
            Self::Antennas => "antennas",
            Self::GridSize => "grid_size",
            Self::Snr => "snr",
            Self::Scheme => "scheme",
            Self::Topology => "topology",
        }
    }

    /// Config for one axis value.
    pub fn apply(&self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{} value `{value}`: {e}", self.name()));
        match self {
            Self::Antennas => {
                let n: usize = value.parse().map_err(|e| bad(&e))?;
                cfg.array.antennas = Some(n);
                let topo = cfg.array.topology().map_err(|e| bad(&e))?;
                partition(&cfg, &topo).map_err(|e| bad(&e))?;
            }
            Self::GridSize => cfg.fingerprint.grid = value.parse().map_err(|e| bad(&e))?,
            Self::Snr => cfg.channel.snr_db = value.parse().map_err(|e| bad(&e))?,
            Self::Scheme => cfg.fingerprint.schemes = vec![value.parse().map_err(|e| bad(&e))?],
            Self::Topology => {
                cfg.array.topology = value.parse::<TopologyChoice>().map_err(|e| bad(&e))?;
                cfg.array.window = None;
                cfg.array.stride = None;
            }
        }
        cfg.validate().map_err(|e| bad(&e))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub bundles: Vec<(String, ReportBundle)>,
    pub skipped: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

pub const SUMMARY_CSV_HEADER: &str = "axis,value,method,scheme,grid,count,mae_cm,median_cm,p90_cm,p95_cm";

/// Runs the pipeline once per axis value into `out/<axis>_<value>` and
/// writes `summary.csv` and `sweep_manifest.json` into `out`.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String], out: &Path) -> Result<SweepReport> {
    let mut dir = OutputDir::create(out)?;
    let mut report = SweepReport {
        axis,
        bundles: Vec::new(),
        skipped: Vec::new(),
        warnings: Vec::new(),
    };
    for v in values {
        let cfg = match axis.apply(base, v) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("sweep: skipping {}: {e}", v);
                report.skipped.push((v.clone(), e.to_string()));
                continue;
            }
        };
        let safe: String = v.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
        let bundle = run_pipeline(&cfg, &out.join(format!("{}_{safe}", axis.name())))?;
        report.bundles.push((v.clone(), bundle));
    }
    if axis == SweepAxis::Antennas {
        let mut keys: Vec<(String, String)> = Vec::new();
        for (_, b) in &report.bundles {
            for r in &b.results {
                let k = (r.method.clone(), r.scheme.clone());
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
        }
        for (m, s) in keys {
            let maes: Vec<(String, f64)> = report
                .bundles
                .iter()
                .filter_map(|(v, b)| b.result(&m, &s).map(|r| (v.clone(), r.report.mae)))
                .collect();
            for w in maes.windows(2) {
                if w[1].1 > w[0].1 {
                    report.warnings.push(format!(
                        "{m} {s}: MAE rises from {:.2} cm at {} antennas to {:.2} cm at {}",
                        w[0].1 * 100.0,
                        w[0].0,
                        w[1].1 * 100.0,
                        w[1].0
                    ));
                }
            }
        }
    }
    let mut csv = format!("{SUMMARY_CSV_HEADER}\n");
    for (v, b) in &report.bundles {
        for line in errors_csv(&b.results).lines().skip(1) {
            let _ = writeln!(csv, "{},{v},{line}", axis.name());
        }
    }
    dir.write("summary.csv", csv.as_bytes())?;
    let manifest = serde_json::json!({
        "format": MANIFEST_FORMAT,
        "axis": axis.name(),
        "config_sha256": config_hash(base)?,
        "seed": base.seed,
        "values": report.bundles.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>(),
        "skipped": report.skipped,
        "warnings": report.warnings,
        "files": dir.files(),
    });
    let mut f = std::fs::File::create(out.join("sweep_manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(report)
}

/// Writes the datasets of a run (`reference.csi`, `train.csi`, `test.csi`)
/// and a small JSON note with the noise level.
pub fn save_datasets(out: &mut OutputDir, ds: &Datasets) -> Result<()> {
    let mut put = |name: &str, d: &LabeledDataset| -> Result<()> {
        let mut buf = Vec::new();
        dataset::write_dataset(&mut buf, d)?;
        out.write(name, &buf)?;
        Ok(())
    };
    if let Some(r) = &ds.reference {
        put("reference.csi", r)?;
    }
    put("train.csi", &ds.train)?;
    put("test.csi", &ds.test)?;
    let note = serde_json::json!({ "noise_std": ds.noise_std });
    out.write("datasets.json", serde_json::to_string_pretty(&note)?.as_bytes())?;
    Ok(())
}

pub fn load_datasets(dir: &Path) -> Result<Datasets> {
    let note: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("datasets.json"))?)?;
    let reference_path = dir.join("reference.csi");
    Ok(Datasets {
        reference: if reference_path.exists() {
            Some(dataset::load(&reference_path, None)?)
        } else {
            None
        },
        train: dataset::load(&dir.join("train.csi"), None)?,
        test: dataset::load(&dir.join("test.csi"), None)?,
        noise_std: note["noise_std"].as_f64(),
        impairments: None,
    })
}

/// Range to the reference element of `sub` for a UE at `p`.
pub fn true_range(sub: &SubArray, p: [f64; 2], ue_height: f64) -> f64 {
    let a = sub.reference_element();
    ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2) + (ue_height - a[2]).powi(2)).sqrt()
}

/// Delay of the LoS at the reference element of `sub`.
pub fn true_delay(sub: &SubArray, p: [f64; 2], ue_height: f64) -> f64 {
    true_range(sub, p, ue_height) / SPEED_OF_LIGHT
}
