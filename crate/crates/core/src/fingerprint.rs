//! Fingerprint positioning: LoS metrics per sub-array in, `(x, y)` out.
//!
//! Two ε-SVR regressors (one per coordinate) share a z-score feature
//! normalization. Hyperparameters are picked per coordinate by seeded
//! log-uniform random search scored with k-fold cross-validation.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use crate::array::{SubArray, TopologyDescriptor};
use crate::error::{Error, Result};
use crate::sage::MultipathComponent;
use crate::svr::{self, SvrModel, SvrParams};

/// Non-empty subset of {AMP, AOA, TOF}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MetricScheme {
    amp: bool,
    aoa: bool,
    tof: bool,
}

impl MetricScheme {
    pub const AMP: Self = Self { amp: true, aoa: false, tof: false };
    pub const AOA: Self = Self { amp: false, aoa: true, tof: false };
    pub const TOF: Self = Self { amp: false, aoa: false, tof: true };
    pub const ALL: Self = Self { amp: true, aoa: true, tof: true };

    pub fn new(amp: bool, aoa: bool, tof: bool) -> Result<Self> {
        if !(amp || aoa || tof) {
            return Err(Error::invalid("metric scheme must select at least one metric"));
        }
        Ok(Self { amp, aoa, tof })
    }

    /// The seven non-empty schemes, singles first.
    pub fn all_schemes() -> [Self; 7] {
        let s = |a, b, c| Self { amp: a, aoa: b, tof: c };
        [
            Self::AMP,
            Self::AOA,
            Self::TOF,
            s(true, true, false),
            s(true, false, true),
            s(false, true, true),
            Self::ALL,
        ]
    }

    pub fn amp(&self) -> bool {
        self.amp
    }

    pub fn aoa(&self) -> bool {
        self.aoa
    }

    pub fn tof(&self) -> bool {
        self.tof
    }
}

impl fmt::Display for MetricScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.amp, "AMP"), (self.aoa, "AOA"), (self.tof, "TOF")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for MetricScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::ALL);
        }
        let (mut amp, mut aoa, mut tof) = (false, false, false);
        for part in s.split(['+', ',']) {
            match part.trim().to_ascii_lowercase().as_str() {
                "amp" => amp = true,
                "aoa" => aoa = true,
                "tof" => tof = true,
                other => return Err(Error::invalid(format!("unknown metric `{other}`"))),
            }
        }
        Self::new(amp, aoa, tof)
    }
}

impl TryFrom<String> for MetricScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MetricScheme> for String {
    fn from(s: MetricScheme) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    AmpDb,
    Azimuth,
    Elevation,
    TofNs,
}

/// Ordered `(sub-array, feature)` index map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub entries: Vec<(usize, FeatureKind)>,
}

impl FeatureLayout {
    pub fn new(subarrays: &[SubArray], scheme: MetricScheme) -> Self {
        let mut entries = Vec::new();
        for (i, s) in subarrays.iter().enumerate() {
            if scheme.amp {
                entries.push((i, FeatureKind::AmpDb));
            }
            if scheme.aoa {
                if s.has_azimuth() || !s.has_elevation() {
                    entries.push((i, FeatureKind::Azimuth));
                }
                if s.has_elevation() {
                    entries.push((i, FeatureKind::Elevation));
                }
            }
            if scheme.tof {
                entries.push((i, FeatureKind::TofNs));
            }
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: FeatureLayout,
}

/// Assembles the feature vector from one LoS component per sub-array, in
/// partition order.
pub fn build_features(
    los: &[Option<MultipathComponent>],
    subarrays: &[SubArray],
    scheme: MetricScheme,
) -> Result<FeatureVector> {
    if los.len() != subarrays.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} sub-arrays", subarrays.len()),
            got: format!("{}", los.len()),
        });
    }
    let layout = FeatureLayout::new(subarrays, scheme);
    let mut values = Vec::with_capacity(layout.len());
    for &(i, kind) in &layout.entries {
        let c = los[i]
            .as_ref()
            .ok_or_else(|| Error::IncompleteSample(format!("no LoS component on sub-array {i}")))?;
        let v = match kind {
            FeatureKind::AmpDb => c.amplitude_db(),
            FeatureKind::Azimuth => c.azimuth,
            FeatureKind::Elevation => c
                .elevation
                .ok_or_else(|| Error::IncompleteSample(format!("no elevation on sub-array {i}")))?,
            FeatureKind::TofNs => c.delay * 1e9,
        };
        if !v.is_finite() {
            return Err(Error::IncompleteSample(format!("non-finite {kind:?} on sub-array {i}")));
        }
        values.push(v);
    }
    Ok(FeatureVector { values, layout })
}

/// Per-dimension z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let s = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Array1<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Random-search budget and ranges. `kernel_scale` is multiplied by
/// `sqrt(feature count)` and `epsilon` by the target standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub trials: usize,
    pub folds: usize,
    pub c: (f64, f64),
    pub kernel_scale: (f64, f64),
    pub epsilon: (f64, f64),
    /// Cross-validation runs on a random subset of at most this many samples.
    pub max_search_samples: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            trials: 60,
            folds: 5,
            c: (1e-1, 1e3),
            kernel_scale: (1e-2, 1e2),
            epsilon: (1e-3, 1e-1),
            max_search_samples: 500,
            tolerance: 1e-3,
            max_iterations: 10_000_000,
            seed: 0,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: (f64, f64)| r.0 > 0.0 && r.1 >= r.0 && r.1.is_finite();
        if self.trials == 0 || self.folds < 2 || self.max_search_samples < self.folds {
            return Err(Error::invalid("search needs trials >= 1, folds >= 2, and enough samples per fold"));
        }
        if !(ok(self.c) && ok(self.kernel_scale) && ok(self.epsilon)) {
            return Err(Error::invalid("search ranges must be positive and ordered"));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng, dims: usize, spread: f64) -> SvrParams {
        let mut log_uniform = |r: (f64, f64)| (rng.random_range(0.0..=1.0) * (r.1 / r.0).ln()).exp() * r.0;
        let c = log_uniform(self.c);
        let scale = log_uniform(self.kernel_scale);
        let eps = log_uniform(self.epsilon);
        SvrParams {
            c,
            epsilon: eps * spread,
            kernel_scale: scale * (dims as f64).sqrt(),
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub grid_size: Option<usize>,
    pub scheme: MetricScheme,
    pub topology: Option<TopologyDescriptor>,
    pub training_samples: usize,
    /// Cross-validated MAE of the chosen hyperparameters, per coordinate.
    pub cv_mae: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintModel {
    pub layout: FeatureLayout,
    pub normalization: Normalization,
    pub x: SvrModel,
    pub y: SvrModel,
    pub metadata: TrainingMetadata,
    /// Euclidean errors on the training set.
    pub training_report: ErrorReport,
}

/// Context that [`train_svr`] records in the model.
#[derive(Debug, Clone, Default)]
pub struct TrainingContext {
    pub grid_size: Option<usize>,
    pub topology: Option<TopologyDescriptor>,
}

fn check_layout(features: &[FeatureVector]) -> Result<&FeatureLayout> {
    let layout = &features
        .first()
        .ok_or_else(|| Error::invalid("no training samples"))?
        .layout;
    if layout.is_empty() {
        return Err(Error::invalid("empty feature layout"));
    }
    for f in features {
        if &f.layout != layout || f.values.len() != layout.len() {
            return Err(Error::invalid("training features use different layouts"));
        }
    }
    Ok(layout)
}

fn scheme_of(layout: &FeatureLayout) -> Result<MetricScheme> {
    let has = |k: &[FeatureKind]| layout.entries.iter().any(|(_, e)| k.contains(e));
    MetricScheme::new(
        has(&[FeatureKind::AmpDb]),
        has(&[FeatureKind::Azimuth, FeatureKind::Elevation]),
        has(&[FeatureKind::TofNs]),
    )
}

fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Mean absolute k-fold error of one hyperparameter setting.
fn cross_validate(x: &Array2<f64>, y: &[f64], folds: &[usize], k: usize, params: &SvrParams) -> f64 {
    let mut total = 0.0;
    for fold in 0..k {
        let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != fold).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == fold).collect();
        let xt = x.select(ndarray::Axis(0), &train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let model = match svr::fit(xt.view(), &yt, params) {
            Ok(m) => m,
            Err(_) => return f64::INFINITY,
        };
        total += test.iter().map(|&i| (model.predict(x.row(i)) - y[i]).abs()).sum::<f64>();
    }
    total / y.len() as f64
}

fn train_coordinate(x: &Array2<f64>, y: &[f64], search: &SearchSpace, stream: u64) -> Result<(SvrModel, f64)> {
    let dims = x.ncols();
    let spread = std_dev(y);
    if spread == 0.0 {
        log::warn!("degenerate targets (all {}); using a constant predictor", y[0]);
        return Ok((SvrModel::constant(y[0], dims, SvrParams::default()), 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::channel::mix_seed(search.seed, 7, stream));
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(search.max_search_samples);
    let xs = x.select(ndarray::Axis(0), &order);
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let k = search.folds.min(ys.len());
    let folds: Vec<usize> = (0..ys.len()).map(|i| i % k).collect();
    let trials: Vec<SvrParams> = (0..search.trials).map(|_| search.draw(&mut rng, dims, spread)).collect();
    let scores: Vec<f64> = trials
        .par_iter()
        .map(|p| cross_validate(&xs, &ys, &folds, k, p))
        .collect();
    let (best, score) = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, s)| (i, *s))
        .ok_or(Error::SolverDiverged(search.max_iterations))?;
    log::debug!("coordinate {stream}: best trial {best} {:?} cv mae {score:.4}", trials[best]);
    Ok((svr::fit(x.view(), y, &trials[best])?, score))
}

/// Trains the two coordinate regressors.
pub fn train_svr(
    features: &[FeatureVector],
    positions: &[[f64; 2]],
    search: &SearchSpace,
    context: &TrainingContext,
) -> Result<FingerprintModel> {
    search.validate()?;
    if features.len() != positions.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} positions", features.len()),
            got: format!("{}", positions.len()),
        });
    }
    let layout = check_layout(features)?.clone();
    let distinct = features
        .iter()
        .zip(positions)
        .any(|(f, p)| f.values != features[0].values || *p != positions[0]);
    if !distinct {
        return Err(Error::invalid("need at least two distinct training samples"));
    }
    let rows: Vec<&[f64]> = features.iter().map(|f| f.values.as_slice()).collect();
    let normalization = Normalization::fit(&rows);
    let mut x = Array2::zeros((rows.len(), layout.len()));
    for (i, r) in rows.iter().enumerate() {
        x.row_mut(i).assign(&normalization.apply(r));
    }
    let tx: Vec<f64> = positions.iter().map(|p| p[0]).collect();
    let ty: Vec<f64> = positions.iter().map(|p| p[1]).collect();
    let (mx, cvx) = train_coordinate(&x, &tx, search, 0)?;
    let (my, cvy) = train_coordinate(&x, &ty, search, 1)?;
    let mut model = FingerprintModel {
        metadata: TrainingMetadata {
            grid_size: context.grid_size,
            scheme: scheme_of(&layout)?,
            topology: context.topology.clone(),
            training_samples: features.len(),
            cv_mae: [cvx, cvy],
        },
        layout,
        normalization,
        x: mx,
        y: my,
        training_report: ErrorReport::from_errors(vec![0.0])?,
    };
    model.training_report = evaluate(&model, features, positions)?;
    Ok(model)
}

impl FingerprintModel {
    fn predict_normalized(&self, z: ArrayView1<f64>) -> [f64; 2] {
        [self.x.predict(z), self.y.predict(z)]
    }
}

/// Kernel expansion output for each coordinate.
pub fn predict(model: &FingerprintModel, feature: &FeatureVector) -> Result<[f64; 2]> {
    if feature.layout != model.layout || feature.values.len() != model.layout.len() {
        return Err(Error::invalid("feature layout does not match the model"));
    }
    Ok(model.predict_normalized(model.normalization.apply(&feature.values).view()))
}

/// Euclidean error statistics, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub count: usize,
    pub mae: f64,
    pub median: f64,
    pub p90: f64,
    pub p95: f64,
    pub max: f64,
    /// Sorted `(error, cumulative fraction)` pairs.
    pub cdf: Vec<(f64, f64)>,
}

/// Linearly interpolated order statistic of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl ErrorReport {
    pub fn from_errors(mut errors: Vec<f64>) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::invalid("no errors to aggregate"));
        }
        if errors.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid("non-finite position error"));
        }
        errors.sort_by(f64::total_cmp);
        let n = errors.len();
        Ok(Self {
            count: n,
            mae: errors.iter().sum::<f64>() / n as f64,
            median: percentile(&errors, 0.5),
            p90: percentile(&errors, 0.9),
            p95: percentile(&errors, 0.95),
            max: errors[n - 1],
            cdf: errors
                .iter()
                .enumerate()
                .map(|(i, e)| (*e, (i + 1) as f64 / n as f64))
                .collect(),
        })
    }

    pub fn from_predictions(predicted: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{}", truth.len()),
                got: format!("{}", predicted.len()),
            });
        }
        Self::from_errors(
            predicted
                .iter()
                .zip(truth)
                .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
                .collect(),
        )
    }

    pub fn write_cdf_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "error_m,cumulative_fraction")?;
        for (e, p) in &self.cdf {
            writeln!(w, "{e},{p}")?;
        }
        Ok(())
    }
}

pub fn evaluate(model: &FingerprintModel, features: &[FeatureVector], truth: &[[f64; 2]]) -> Result<ErrorReport> {
    let predicted = features
        .iter()
        .map(|f| predict(model, f))
        .collect::<Result<Vec<_>>>()?;
    ErrorReport::from_predictions(&predicted, truth)
}

pub const MODEL_FORMAT: &str = "mimoloc-svr/1";

#[derive(Serialize, Deserialize)]
struct RegressorHeader {
    params: SvrParams,
    bias: f64,
    support_count: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    dims: usize,
    layout: FeatureLayout,
    normalization: Normalization,
    metadata: TrainingMetadata,
    training_report: ErrorReport,
    x: RegressorHeader,
    y: RegressorHeader,
}

/// One JSON header line, then per regressor the coefficients followed by
/// the row-major support vectors, all little-endian `f64`.
pub fn write_model<W: Write>(mut w: W, model: &FingerprintModel) -> Result<()> {
    let reg = |m: &SvrModel| RegressorHeader {
        params: m.params,
        bias: m.bias,
        support_count: m.support_count(),
    };
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        dims: model.layout.len(),
        layout: model.layout.clone(),
        normalization: model.normalization.clone(),
        metadata: model.metadata.clone(),
        training_report: model.training_report.clone(),
        x: reg(&model.x),
        y: reg(&model.y),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for m in [&model.x, &model.y] {
        for v in m.coefficients.iter().chain(m.support_vectors.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<FingerprintModel> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.pop() != Some(b'\n') {
        return Err(Error::Format("missing model header".into()));
    }
    let header: ModelHeader = serde_json::from_slice(&line)?;
    if header.format != MODEL_FORMAT {
        return Err(Error::Format(format!("unsupported model format `{}`", header.format)));
    }
    if header.layout.len() != header.dims || header.normalization.mean.len() != header.dims {
        return Err(Error::Format("inconsistent feature dimensions".into()));
    }
    let d = header.dims;
    let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("support-vector block: {e}")))?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let mut regs = Vec::new();
    for h in [&header.x, &header.y] {
        let coefficients = read_f64s(h.support_count)?;
        let sv = read_f64s(h.support_count * d)?;
        regs.push(SvrModel {
            support_vectors: Array2::from_shape_vec((h.support_count, d), sv)
                .map_err(|e| Error::Format(e.to_string()))?,
            coefficients,
            bias: h.bias,
            params: h.params,
        });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after support vectors".into()));
    }
    let y = regs.pop().unwrap();
    let x = regs.pop().unwrap();
    Ok(FingerprintModel {
        layout: header.layout,
        normalization: header.normalization,
        x,
        y,
        metadata: header.metadata,
        training_report: header.training_report,
    })
}

pub fn save_model(path: &std::path::Path, model: &FingerprintModel) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<FingerprintModel> {
    read_model(std::fs::File::open(path)?)
}
