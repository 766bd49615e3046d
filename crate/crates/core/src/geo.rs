//! Geometric positioning baselines: AoA triangulation and range
//! trilateration, with ranges from ToF or from a log-distance path-loss
//! model on the LoS amplitude.
//!
//! Anchors sit at known 3-D positions and the target moves in a horizontal
//! plane of known height, so both solvers return `(x, y)` only.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::array::{Vec3, SPEED_OF_LIGHT};
use crate::error::{Error, Result};

/// How an observed angle relates to the horizontal bearing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AoaKind {
    /// Horizontal azimuth from boresight (planar arrays).
    Horizontal,
    /// Cone angle `asin(u . s)` of a horizontal line array; it shrinks with
    /// the height difference between anchor and target.
    Cone,
}

/// One anchor and what it measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorObservation {
    pub position: Vec3,
    /// Global angle of the boresight in the floor plane, radians.
    pub boresight: f64,
    /// Arrival angle, positive counter-clockwise from boresight.
    pub aoa: Option<f64>,
    pub aoa_kind: AoaKind,
    /// 3-D range, meters.
    pub range: Option<f64>,
    pub amp_db: Option<f64>,
}

impl AnchorObservation {
    pub fn new(position: Vec3, boresight: f64) -> Self {
        Self {
            position,
            boresight,
            aoa: None,
            aoa_kind: AoaKind::Horizontal,
            range: None,
            amp_db: None,
        }
    }

    pub fn with_aoa(mut self, aoa: f64, kind: AoaKind) -> Self {
        self.aoa = Some(aoa);
        self.aoa_kind = kind;
        self
    }

    pub fn with_range(mut self, range: f64) -> Self {
        self.range = Some(range);
        self
    }

    pub fn with_amp_db(mut self, amp_db: f64) -> Self {
        self.amp_db = Some(amp_db);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.aoa.is_none() && self.range.is_none() && self.amp_db.is_none() {
            return Err(Error::invalid("anchor observation carries no measurement"));
        }
        if matches!(self.range, Some(r) if !(r > 0.0)) {
            return Err(Error::invalid("ranges must be positive"));
        }
        Ok(())
    }
}

/// Position estimate with the RMS misfit of the observations, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fix {
    pub x: f64,
    pub y: f64,
    pub residual: f64,
}

impl Fix {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Largest acceptable condition number of the 2x2 normal matrix.
pub const MAX_CONDITION: f64 = 1e8;

fn solve_normal(a: Matrix2<f64>, b: Vector2<f64>, what: &str) -> Result<Vector2<f64>> {
    let eig = a.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::DegenerateGeometry(format!("{what}: condition number {:.3e}", hi / lo)));
    }
    a.lu()
        .solve(&b)
        .ok_or_else(|| Error::DegenerateGeometry(format!("{what}: singular system")))
}

fn horizontal_bearing(o: &AnchorObservation, aoa: f64, target: Option<[f64; 2]>, target_height: f64) -> f64 {
    let psi = match (o.aoa_kind, target) {
        (AoaKind::Cone, Some(t)) => {
            let dx = t[0] - o.position[0];
            let dy = t[1] - o.position[1];
            let dz = target_height - o.position[2];
            let rh = (dx * dx + dy * dy).sqrt();
            if rh > 0.0 {
                (aoa.sin() * (rh * rh + dz * dz).sqrt() / rh).clamp(-1.0, 1.0).asin()
            } else {
                aoa
            }
        }
        _ => aoa,
    };
    o.boresight + psi
}

fn intersect(obs: &[(&AnchorObservation, f64)]) -> Result<(Vector2<f64>, f64)> {
    let mut a = Matrix2::zeros();
    let mut b = Vector2::zeros();
    let mut lines = Vec::with_capacity(obs.len());
    for (o, beta) in obs {
        let n = Vector2::new(-beta.sin(), beta.cos());
        let c = n.dot(&Vector2::new(o.position[0], o.position[1]));
        a += n * n.transpose();
        b += n * c;
        lines.push((n, c));
    }
    let p = solve_normal(a, b, "bearings")?;
    let rms = (lines.iter().map(|(n, c)| (n.dot(&p) - c).powi(2)).sum::<f64>() / lines.len() as f64).sqrt();
    Ok((p, rms))
}

/// Least-squares intersection of bearing lines. Cone angles are converted
/// to horizontal bearings using the current estimate and `target_height`,
/// repeating until the estimate settles.
pub fn triangulate_aoa(observations: &[AnchorObservation], target_height: f64) -> Result<Fix> {
    let obs: Vec<&AnchorObservation> = observations.iter().filter(|o| o.aoa.is_some()).collect();
    if obs.len() < 2 {
        return Err(Error::invalid("triangulation needs at least two bearings"));
    }
    for o in &obs {
        o.validate()?;
    }
    let mut estimate: Option<[f64; 2]> = None;
    let mut result = (Vector2::zeros(), 0.0);
    let cone = obs.iter().any(|o| o.aoa_kind == AoaKind::Cone);
    for _ in 0..if cone { 50 } else { 1 } {
        let bearings: Vec<(&AnchorObservation, f64)> = obs
            .iter()
            .map(|o| (*o, horizontal_bearing(o, o.aoa.unwrap(), estimate, target_height)))
            .collect();
        result = intersect(&bearings)?;
        let p = [result.0[0], result.0[1]];
        let moved = estimate.map_or(f64::INFINITY, |e| ((e[0] - p[0]).powi(2) + (e[1] - p[1]).powi(2)).sqrt());
        estimate = Some(p);
        if moved < 1e-13 {
            break;
        }
    }
    Ok(Fix {
        x: result.0[0],
        y: result.0[1],
        residual: result.1,
    })
}

fn horizontal_range(o: &AnchorObservation, range: f64, target_height: f64) -> f64 {
    let dz = o.position[2] - target_height;
    (range * range - dz * dz).max(0.0).sqrt()
}

/// Range trilateration: difference-of-squares least squares followed by one
/// Gauss-Newton pass on the range misfit. Ranges are 3-D and reduced to the
/// target plane at `target_height`.
pub fn trilaterate(observations: &[AnchorObservation], target_height: f64) -> Result<Fix> {
    let obs: Vec<(Vector2<f64>, f64)> = observations
        .iter()
        .filter_map(|o| {
            o.range
                .map(|r| (Vector2::new(o.position[0], o.position[1]), horizontal_range(o, r, target_height)))
        })
        .collect();
    if obs.len() < 3 {
        return Err(Error::invalid("trilateration needs at least three ranges"));
    }
    for o in observations {
        o.validate()?;
    }
    let (a0, r0) = obs[0];
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for (ai, ri) in &obs[1..] {
        let row = 2.0 * (ai - a0);
        let rhs = r0 * r0 - ri * ri + ai.norm_squared() - a0.norm_squared();
        ata += row * row.transpose();
        atb += row * rhs;
    }
    let mut p = solve_normal(ata, atb, "anchors")?;

    let mut jtj = Matrix2::zeros();
    let mut jtr = Vector2::zeros();
    for (a, r) in &obs {
        let d = p - a;
        let dist = d.norm();
        if dist > 0.0 {
            let g = d / dist;
            jtj += g * g.transpose();
            jtr += g * (r - dist);
        }
    }
    if let Some(step) = jtj.lu().solve(&jtr) {
        if step.iter().all(|v| v.is_finite()) {
            p += step;
        }
    }
    let rms = (obs.iter().map(|(a, r)| ((p - a).norm() - r).powi(2)).sum::<f64>() / obs.len() as f64).sqrt();
    Ok(Fix {
        x: p[0],
        y: p[1],
        residual: rms,
    })
}

/// Range from a time of flight.
pub fn tof_to_range(tof: f64) -> f64 {
    SPEED_OF_LIGHT * tof
}

/// Log-distance path loss `amp_db = p_ref_db - 10 n log10(r / 1 m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLossModel {
    pub p_ref_db: f64,
    pub exponent: f64,
}

impl PathLossModel {
    /// Least-squares `p_ref_db` for a fixed exponent.
    pub fn fit(amps_db: &[f64], ranges: &[f64], exponent: f64) -> Result<Self> {
        if amps_db.is_empty() || amps_db.len() != ranges.len() {
            return Err(Error::invalid("need matching, nonempty amplitude and range lists"));
        }
        if ranges.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid("ranges must be positive"));
        }
        let p_ref_db = amps_db
            .iter()
            .zip(ranges)
            .map(|(a, r)| a + 10.0 * exponent * r.log10())
            .sum::<f64>()
            / amps_db.len() as f64;
        Ok(Self { p_ref_db, exponent })
    }
}

/// Inverts the path-loss model. Amplitudes above the reference would put
/// the target inside the 1 m reference distance and are clamped to it.
pub fn amp_to_range(amp_db: f64, model: &PathLossModel) -> f64 {
    if amp_db > model.p_ref_db {
        log::warn!(
            "amplitude {amp_db:.2} dB above the {:.2} dB reference; clamping to 1 m",
            model.p_ref_db
        );
        return 1.0;
    }
    10f64.powf((model.p_ref_db - amp_db) / (10.0 * model.exponent))
}
