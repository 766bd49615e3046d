//! Antenna array geometry: topologies, directions, steering vectors, far-field
//! bounds and sliding-window sub-array partitions.
//!
//! Every topology is a set of rigid planar panels. A panel carries a local
//! frame `(axis_u, axis_v, boresight)`: elements advance along `axis_u` with
//! the column index and along `axis_v` with the row index. Angles are measured
//! in that frame, azimuth from boresight towards `axis_u`, elevation from the
//! `(axis_u, boresight)` plane towards `axis_v`. For a horizontal linear panel
//! the element-`m` steering phase reduces to `-2*pi*d/lambda*(m-1)*sin(azimuth)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default element spacing of the testbed panels in meters.
pub const DEFAULT_SPACING: f64 = 0.07;

/// Default carrier frequency in Hz.
pub const DEFAULT_CARRIER_HZ: f64 = 2.61e9;

pub type Vec3 = [f64; 3];

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn wavelength(carrier_hz: f64) -> f64 {
    SPEED_OF_LIGHT / carrier_hz
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TopologyKind {
    Ula,
    Dis,
    Ura,
}

/// Arrival direction in a panel's local frame.
///
/// The angles parameterize the steering phase `-k (u w_u + v w_v)` with
/// `w` = [`Direction::unit_vector`], so `w` follows the travel direction of
/// the incoming wave across the aperture: a source displaced towards
/// `-axis_u` has positive azimuth, and one below the panel's horizontal
/// plane has positive elevation. [`Direction::towards_source`] does the
/// conversion from geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    /// Radians from boresight, in `[-pi/2, pi/2]`.
    pub azimuth: f64,
    /// Radians from the horizontal plane of the panel.
    pub elevation: f64,
}

impl Direction {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }

    pub fn azimuth(azimuth: f64) -> Self {
        Self::new(azimuth, 0.0)
    }

    /// Unit vector in local `(u, v, boresight)` coordinates.
    pub fn unit_vector(&self) -> Vec3 {
        let (st, ct) = self.elevation.sin_cos();
        let (sp, cp) = self.azimuth.sin_cos();
        [ct * sp, st, ct * cp]
    }

    /// Arrival direction of a wave from a source at local offset `v`.
    pub fn towards_source(v: Vec3) -> Self {
        Self::from_local_vector([-v[0], -v[1], v[2]])
    }

    /// Inverse of [`Direction::unit_vector`]; `v` need not be normalized.
    pub fn from_local_vector(v: Vec3) -> Self {
        let n = norm(v);
        let elevation = (v[1] / n).clamp(-1.0, 1.0).asin();
        let azimuth = v[0].atan2(v[2]);
        Self { azimuth, elevation }
    }
}

/// A rigid planar panel of `rows x cols` elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    /// Position of element (row 0, col 0).
    pub origin: Vec3,
    pub axis_u: Vec3,
    pub axis_v: Vec3,
    pub boresight: Vec3,
    pub rows: usize,
    pub cols: usize,
}

impl Panel {
    /// Vertical panel rotated by `orientation` radians about the z axis.
    /// Orientation 0 puts `axis_u` on +x and the boresight on +y.
    pub fn vertical(origin: Vec3, orientation: f64, rows: usize, cols: usize) -> Self {
        let (s, c) = orientation.sin_cos();
        Self {
            origin,
            axis_u: [c, s, 0.0],
            axis_v: [0.0, 0.0, 1.0],
            boresight: [-s, c, 0.0],
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_local(&self, global: Vec3) -> Vec3 {
        [
            dot(global, self.axis_u),
            dot(global, self.axis_v),
            dot(global, self.boresight),
        ]
    }

    pub fn element_position(&self, row: usize, col: usize, spacing: f64) -> Vec3 {
        add(
            self.origin,
            add(
                scale(self.axis_u, col as f64 * spacing),
                scale(self.axis_v, row as f64 * spacing),
            ),
        )
    }

    /// Orientation angle about z recovered from `axis_u`.
    pub fn orientation(&self) -> f64 {
        self.axis_u[1].atan2(self.axis_u[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayTopology {
    pub kind: TopologyKind,
    pub panels: Vec<Panel>,
    pub spacing: f64,
    pub wavelength: f64,
}

impl ArrayTopology {
    pub fn new(kind: TopologyKind, panels: Vec<Panel>, spacing: f64, wavelength: f64) -> Result<Self> {
        if !(wavelength > 0.0) {
            return Err(Error::invalid("wavelength must be positive"));
        }
        if !(spacing > 0.0) {
            return Err(Error::invalid("element spacing must be positive"));
        }
        if panels.is_empty() || panels.iter().any(Panel::is_empty) {
            return Err(Error::invalid("topology needs at least one nonempty panel"));
        }
        for p in &panels {
            let ortho = dot(p.axis_u, p.axis_v).abs()
                + dot(p.axis_u, p.boresight).abs()
                + dot(p.axis_v, p.boresight).abs();
            let unit = (norm(p.axis_u) - 1.0).abs()
                + (norm(p.axis_v) - 1.0).abs()
                + (norm(p.boresight) - 1.0).abs();
            if ortho > 1e-9 || unit > 1e-9 {
                return Err(Error::invalid("panel axes must be orthonormal"));
            }
        }
        Ok(Self {
            kind,
            panels,
            spacing,
            wavelength,
        })
    }

    /// Horizontal `1 x n` array with its first element at `origin`.
    pub fn ula(n: usize, spacing: f64, wavelength: f64) -> Result<Self> {
        Self::new(
            TopologyKind::Ula,
            vec![Panel::vertical([0.0; 3], 0.0, 1, n)],
            spacing,
            wavelength,
        )
    }

    pub fn ura(rows: usize, cols: usize, spacing: f64, wavelength: f64) -> Result<Self> {
        Self::new(
            TopologyKind::Ura,
            vec![Panel::vertical([0.0; 3], 0.0, rows, cols)],
            spacing,
            wavelength,
        )
    }

    pub fn len(&self) -> usize {
        self.panels.iter().map(Panel::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global element positions in CSI antenna order: panel-major, then
    /// row-major inside a panel.
    pub fn element_positions(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.len());
        for p in &self.panels {
            for r in 0..p.rows {
                for c in 0..p.cols {
                    out.push(p.element_position(r, c, self.spacing));
                }
            }
        }
        out
    }

    /// Index of the first element of each panel.
    pub fn panel_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.panels
            .iter()
            .map(|p| {
                let o = acc;
                acc += p.len();
                o
            })
            .collect()
    }

    /// Panel that owns each element.
    pub fn element_panels(&self) -> Vec<usize> {
        self.panels
            .iter()
            .enumerate()
            .flat_map(|(i, p)| std::iter::repeat_n(i, p.len()))
            .collect()
    }

    /// Largest dimension of one panel, counted as elements times spacing.
    pub fn aperture(&self) -> f64 {
        self.panels
            .iter()
            .map(|p| p.rows.max(p.cols) as f64 * self.spacing)
            .fold(0.0, f64::max)
    }

    /// Keeps the first `count` elements in antenna order. Panels are cut
    /// row by row; a partially filled row is not allowed.
    pub fn truncated(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.len() {
            return Err(Error::invalid(format!(
                "cannot keep {count} of {} elements",
                self.len()
            )));
        }
        let mut left = count;
        let mut panels = Vec::new();
        for p in &self.panels {
            if left == 0 {
                break;
            }
            if left >= p.len() {
                panels.push(p.clone());
                left -= p.len();
            } else if left.is_multiple_of(p.cols) {
                let mut q = p.clone();
                q.rows = left / p.cols;
                panels.push(q);
                left = 0;
            } else if p.rows == 1 {
                let mut q = p.clone();
                q.cols = left;
                panels.push(q);
                left = 0;
            } else {
                return Err(Error::invalid(format!(
                    "{count} elements do not end on a row boundary"
                )));
            }
        }
        Self::new(self.kind, panels, self.spacing, self.wavelength)
    }

    /// Square sub-panel of the first `side x side` elements of a URA.
    pub fn square_corner(&self, side: usize) -> Result<Self> {
        let p = &self.panels[0];
        if self.kind != TopologyKind::Ura || side == 0 || side > p.rows || side > p.cols {
            return Err(Error::invalid(format!("cannot take a {side}x{side} corner")));
        }
        let mut q = p.clone();
        q.rows = side;
        q.cols = side;
        Self::new(self.kind, vec![q], self.spacing, self.wavelength)
    }
}

/// A contiguous window of one panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubArray {
    pub panel: usize,
    pub row_start: usize,
    pub col_start: usize,
    pub rows: usize,
    pub cols: usize,
    /// Indices into the parent topology's antenna order.
    pub element_indices: Vec<usize>,
    /// `(u, v)` offsets of each element from the first one, meters.
    pub local_offsets: Vec<[f64; 2]>,
    pub frame: Panel,
    pub phase_center: Vec3,
    pub spacing: f64,
    pub wavelength: f64,
    pub aperture: f64,
}

impl SubArray {
    pub fn len(&self) -> usize {
        self.element_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.element_indices.is_empty()
    }

    pub fn has_azimuth(&self) -> bool {
        self.cols > 1
    }

    pub fn has_elevation(&self) -> bool {
        self.rows > 1
    }

    pub fn is_planar(&self) -> bool {
        self.has_azimuth() && self.has_elevation()
    }

    /// Position of the first element, the phase reference of the steering
    /// vector and therefore of extracted delays.
    pub fn reference_element(&self) -> Vec3 {
        self.frame.element_position(self.row_start, self.col_start, self.spacing)
    }

    /// Exact arrival direction at the phase center for a point source.
    pub fn direction_to(&self, source: Vec3) -> Direction {
        Direction::towards_source(self.frame.to_local(sub(source, self.phase_center)))
    }

    /// Angle(s) a plane-wave model of this window can resolve for a point
    /// source: for a horizontal line only `asin(u . axis_u)` is observable.
    pub fn observable_direction(&self, source: Vec3) -> Direction {
        let local = self.frame.to_local(sub(source, self.phase_center));
        let n = norm(local);
        match (self.has_azimuth(), self.has_elevation()) {
            (true, true) => Direction::towards_source(local),
            (true, false) => Direction::azimuth((-local[0] / n).clamp(-1.0, 1.0).asin()),
            (false, true) => Direction::new(0.0, (-local[1] / n).clamp(-1.0, 1.0).asin()),
            (false, false) => Direction::new(0.0, 0.0),
        }
    }
}

/// Per-element plane-wave response of `sub` for a wave arriving from `dir`.
pub fn steering_vector(sub: &SubArray, dir: Direction) -> Result<Vec<Complex64>> {
    if sub.is_empty() {
        return Err(Error::invalid("empty sub-array"));
    }
    if !(sub.wavelength > 0.0) {
        return Err(Error::invalid("wavelength must be positive"));
    }
    Ok(steering_unchecked(sub, dir))
}

pub(crate) fn steering_unchecked(sub: &SubArray, dir: Direction) -> Vec<Complex64> {
    let k = 2.0 * PI / sub.wavelength;
    let w = dir.unit_vector();
    sub.local_offsets
        .iter()
        .map(|o| Complex64::from_polar(1.0, -k * (o[0] * w[0] + o[1] * w[1])))
        .collect()
}

/// Far-field boundary `2 D^2 / lambda`.
pub fn rayleigh_distance(aperture: f64, wavelength: f64) -> Result<f64> {
    if !(wavelength > 0.0) {
        return Err(Error::invalid("wavelength must be positive"));
    }
    if !(aperture >= 0.0) {
        return Err(Error::invalid("aperture must be non-negative"));
    }
    Ok(2.0 * aperture * aperture / wavelength)
}

/// Window shape `(rows, cols)`.
pub type Window = (usize, usize);

/// Slides a `window` over every panel with the given `(row, col)` stride.
/// Sub-arrays are ordered by panel, then by window start (row-major).
pub fn partition_sliding(topo: &ArrayTopology, window: Window, stride: Window) -> Result<Vec<SubArray>> {
    let (wr, wc) = window;
    let (sr, sc) = stride;
    if wr == 0 || wc == 0 {
        return Err(Error::invalid("window must be nonempty"));
    }
    if sr == 0 || sc == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let offsets = topo.panel_offsets();
    let mut out = Vec::new();
    for (pi, p) in topo.panels.iter().enumerate() {
        if wr > p.rows || wc > p.cols {
            return Err(Error::invalid(format!(
                "window {wr}x{wc} larger than panel {pi} ({}x{})",
                p.rows, p.cols
            )));
        }
        for r0 in (0..=p.rows - wr).step_by(sr) {
            for c0 in (0..=p.cols - wc).step_by(sc) {
                out.push(make_subarray(topo, pi, offsets[pi], r0, c0, wr, wc));
            }
        }
    }
    Ok(out)
}

/// One sub-array per panel covering the whole panel.
pub fn whole_panels(topo: &ArrayTopology) -> Vec<SubArray> {
    let offsets = topo.panel_offsets();
    topo.panels
        .iter()
        .enumerate()
        .map(|(pi, p)| make_subarray(topo, pi, offsets[pi], 0, 0, p.rows, p.cols))
        .collect()
}

fn make_subarray(
    topo: &ArrayTopology,
    panel: usize,
    offset: usize,
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
) -> SubArray {
    let p = &topo.panels[panel];
    let d = topo.spacing;
    let mut element_indices = Vec::with_capacity(rows * cols);
    let mut local_offsets = Vec::with_capacity(rows * cols);
    let mut center = [0.0; 3];
    for r in r0..r0 + rows {
        for c in c0..c0 + cols {
            element_indices.push(offset + r * p.cols + c);
            local_offsets.push([(c - c0) as f64 * d, (r - r0) as f64 * d]);
            center = add(center, p.element_position(r, c, d));
        }
    }
    let n = (rows * cols) as f64;
    SubArray {
        panel,
        row_start: r0,
        col_start: c0,
        rows,
        cols,
        element_indices,
        local_offsets,
        frame: p.clone(),
        phase_center: scale(center, 1.0 / n),
        spacing: d,
        wavelength: topo.wavelength,
        aperture: rows.max(cols) as f64 * d,
    }
}

/// JSON topology descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyDescriptor {
    pub kind: TopologyKind,
    /// Rows per panel.
    #[serde(default = "one")]
    pub rows: usize,
    /// Columns per panel.
    pub cols: usize,
    pub spacing_m: f64,
    pub carrier_hz: f64,
    pub panels: Vec<PanelPose>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelPose {
    pub origin: Vec3,
    /// Rotation about z in degrees; 0 puts the boresight on +y.
    pub orientation_deg: f64,
}

impl TopologyDescriptor {
    pub fn build(&self) -> Result<ArrayTopology> {
        if !(self.carrier_hz > 0.0) {
            return Err(Error::invalid("carrier frequency must be positive"));
        }
        let panels = self
            .panels
            .iter()
            .map(|p| Panel::vertical(p.origin, p.orientation_deg.to_radians(), self.rows, self.cols))
            .collect();
        ArrayTopology::new(self.kind, panels, self.spacing_m, wavelength(self.carrier_hz))
    }

    pub fn from_topology(topo: &ArrayTopology) -> Self {
        let p0 = &topo.panels[0];
        Self {
            kind: topo.kind,
            rows: p0.rows,
            cols: p0.cols,
            spacing_m: topo.spacing,
            carrier_hz: SPEED_OF_LIGHT / topo.wavelength,
            panels: topo
                .panels
                .iter()
                .map(|p| PanelPose {
                    origin: p.origin,
                    orientation_deg: p.orientation().to_degrees(),
                })
                .collect(),
        }
    }

    pub fn from_json(s: &str) -> Result<ArrayTopology> {
        let d: Self = serde_json::from_str(s)?;
        d.build()
    }
}

/// Layouts of the three testbed topologies around a square target area
/// `[0, side] x [0, side]`.
pub mod layouts {
    use super::*;

    /// `1 x 64` line on the y = -`standoff` side, centered on the area.
    pub fn ula(side: f64, standoff: f64, height: f64, carrier_hz: f64) -> ArrayTopology {
        let n = 64;
        let d = DEFAULT_SPACING;
        let len = (n - 1) as f64 * d;
        let origin = [side / 2.0 - len / 2.0, -standoff, height];
        ArrayTopology::new(
            TopologyKind::Ula,
            vec![Panel::vertical(origin, 0.0, 1, n)],
            d,
            wavelength(carrier_hz),
        )
        .expect("static layout")
    }

    /// `8 x 8` grid on the y = -`standoff` side, lowest row at `height`.
    pub fn ura(side: f64, standoff: f64, height: f64, carrier_hz: f64) -> ArrayTopology {
        let d = DEFAULT_SPACING;
        let len = 7.0 * d;
        let origin = [side / 2.0 - len / 2.0, -standoff, height];
        ArrayTopology::new(
            TopologyKind::Ura,
            vec![Panel::vertical(origin, 0.0, 8, 8)],
            d,
            wavelength(carrier_hz),
        )
        .expect("static layout")
    }

    /// Eight `1 x 8` panels, two per side, all facing the area. Panels are
    /// numbered counter-clockwise starting on the y = -`standoff` side.
    pub fn dis(side: f64, standoff: f64, height: f64, carrier_hz: f64) -> ArrayTopology {
        let d = DEFAULT_SPACING;
        let half = 3.5 * d;
        let mut panels = Vec::with_capacity(8);
        // (center of the side line, orientation)
        let sides: [(Vec3, Vec3, f64); 4] = [
            ([0.0, -standoff, height], [1.0, 0.0, 0.0], 0.0),
            ([side + standoff, 0.0, height], [0.0, 1.0, 0.0], PI / 2.0),
            ([side, side + standoff, height], [-1.0, 0.0, 0.0], PI),
            ([-standoff, side, height], [0.0, -1.0, 0.0], -PI / 2.0),
        ];
        for (start, dir, orient) in sides {
            for frac in [0.25, 0.75] {
                let center = add(start, scale(dir, frac * side));
                let origin = sub(center, scale(dir, half));
                panels.push(Panel::vertical(origin, orient, 1, 8));
            }
        }
        ArrayTopology::new(TopologyKind::Dis, panels, d, wavelength(carrier_hz)).expect("static layout")
    }
}
