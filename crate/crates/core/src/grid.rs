//! Grids, fields and the derivative/integration operators on the two
//! supported total spaces: the circle bundle over a flat torus and the
//! circle bundle over a round sphere (two stereographic charts).

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::{Add, Mul, Neg, Sub};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stencil::{fd_weights, lagrange_weights, PeriodicFft};
use crate::torus::TorusOps;

pub const MIN_RESOLUTION: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseKind {
    FlatTorus { tau: Complex64, area: f64 },
    RoundSphere { scale: f64 },
}

/// Kähler base surface together with the level `k_l` of its integral class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseManifold {
    #[serde(flatten)]
    pub kind: BaseKind,
    pub k_l: u32,
}

impl BaseManifold {
    /// Flat torus whose area makes the Boothby–Wang class integral at level `k_l`.
    pub fn flat_torus(tau: Complex64, k_l: u32) -> Self {
        Self {
            kind: BaseKind::FlatTorus {
                tau,
                area: PI * k_l as f64,
            },
            k_l,
        }
    }

    /// Round sphere of radius `√k_l / 2`; `k_l = 1` gives the Hopf fibration.
    pub fn round_sphere(k_l: u32) -> Self {
        Self {
            kind: BaseKind::RoundSphere {
                scale: 0.5 * (k_l as f64).sqrt(),
            },
            k_l,
        }
    }

    pub fn hopf() -> Self {
        Self::round_sphere(1)
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.kind, BaseKind::FlatTorus { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_l < 1 {
            return Err(Error::InvalidBase("k_l must be at least 1".into()));
        }
        match self.kind {
            BaseKind::FlatTorus { tau, area } => {
                if !(tau.im > 0.0) || !tau.re.is_finite() {
                    return Err(Error::InvalidBase(format!("Im(tau) must be positive, got {tau}")));
                }
                if !(area > 0.0) || !area.is_finite() {
                    return Err(Error::InvalidBase(format!("area must be positive, got {area}")));
                }
            }
            BaseKind::RoundSphere { scale } => {
                if !(scale > 0.0) || !scale.is_finite() {
                    return Err(Error::InvalidBase(format!("scale must be positive, got {scale}")));
                }
            }
        }
        Ok(())
    }

    /// Riemannian area of the base.
    pub fn area(&self) -> f64 {
        match self.kind {
            BaseKind::FlatTorus { area, .. } => area,
            BaseKind::RoundSphere { scale } => 4.0 * PI * scale * scale,
        }
    }

    /// Checks that `dω = 2ω_M` with fiber length 2π defines a circle bundle,
    /// i.e. `∫_M dω = 2π k_l`.
    pub fn check_integral(&self) -> Result<()> {
        let total = 2.0 * self.area();
        let target = 2.0 * PI * self.k_l as f64;
        if (total - target).abs() > 1e-9 * target {
            return Err(Error::NonIntegralClass(format!(
                "∫dω = {total} over the base, expected 2π·k_l = {target}; use area = π·k_l"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartAtlas {
    SinglePeriodicChart,
    TwoChartStereographic,
}

fn default_fd_order() -> usize {
    6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub ntheta: usize,
    pub atlas: ChartAtlas,
    pub overlap_band: f64,
    /// Order of the centered differences used on twisted and chart directions.
    #[serde(default = "default_fd_order")]
    pub fd_order: usize,
}

impl GridSpec {
    pub fn torus(nx: usize, ny: usize, ntheta: usize) -> Self {
        Self {
            nx,
            ny,
            ntheta,
            atlas: ChartAtlas::SinglePeriodicChart,
            overlap_band: 0.25,
            fd_order: default_fd_order(),
        }
    }

    pub fn sphere(nx: usize, ny: usize, ntheta: usize) -> Self {
        Self {
            nx,
            ny,
            ntheta,
            atlas: ChartAtlas::TwoChartStereographic,
            overlap_band: 0.35,
            fd_order: default_fd_order(),
        }
    }

    pub fn with_fd_order(mut self, order: usize) -> Self {
        self.fd_order = order;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("nx", self.nx), ("ny", self.ny), ("ntheta", self.ntheta)] {
            if n < MIN_RESOLUTION {
                return Err(Error::InvalidGrid(format!(
                    "{name} = {n} is below the minimum resolution {MIN_RESOLUTION}"
                )));
            }
        }
        if !(self.overlap_band > 0.0 && self.overlap_band < 0.5) {
            return Err(Error::InvalidGrid(format!(
                "overlap_band {} must lie in (0, 0.5)",
                self.overlap_band
            )));
        }
        if ![4, 6, 8].contains(&self.fd_order) {
            return Err(Error::InvalidGrid(format!("fd_order {} not in {{4,6,8}}", self.fd_order)));
        }
        Ok(())
    }
}

/// Interpolation stencil carrying a value from one chart into the overlap
/// region of the other chart.
#[derive(Clone, Debug)]
pub struct OverlapStencil {
    pub target_chart: usize,
    pub target: (usize, usize),
    pub source_chart: usize,
    pub weights: Vec<(usize, usize, f64)>,
}

#[derive(Debug)]
pub struct Grid {
    pub base: BaseManifold,
    pub spec: GridSpec,
    pub n_charts: usize,
    /// Half-width of the stereographic chart squares (sphere only).
    pub chart_half_width: f64,
    torus: Option<TorusOps>,
    fft_theta: PeriodicFft,
    /// Partition of unity per (chart, ix, iy).
    partition: Vec<f64>,
    /// Area element of the base per (chart, ix, iy), partition included.
    base_weights: Vec<f64>,
    overlap: Vec<OverlapStencil>,
}

pub type GridHandle = Arc<Grid>;

/// Builds a grid handle with cached coordinates, quadrature weights and
/// overlap stencils.
pub fn make_grid(base: BaseManifold, spec: GridSpec) -> Result<GridHandle> {
    base.validate()?;
    spec.validate()?;
    match (&base.kind, spec.atlas) {
        (BaseKind::FlatTorus { .. }, ChartAtlas::SinglePeriodicChart) => {}
        (BaseKind::RoundSphere { .. }, ChartAtlas::TwoChartStereographic) => {}
        (BaseKind::FlatTorus { .. }, _) => {
            return Err(Error::InvalidGrid("torus base requires the single periodic chart".into()))
        }
        (BaseKind::RoundSphere { .. }, _) => {
            return Err(Error::InvalidGrid("sphere base requires the two-chart stereographic atlas".into()))
        }
    }
    let fft_theta = PeriodicFft::new(spec.ntheta);
    let (nx, ny) = (spec.nx, spec.ny);
    let grid = match base.kind {
        BaseKind::FlatTorus { tau, area } => {
            let torus = TorusOps::new(nx, ny, tau, area, spec.fd_order);
            let w = area / (nx * ny) as f64;
            Grid {
                n_charts: 1,
                chart_half_width: 0.0,
                torus: Some(torus),
                fft_theta,
                partition: vec![1.0; nx * ny],
                base_weights: vec![w; nx * ny],
                overlap: Vec::new(),
                base,
                spec,
            }
        }
        BaseKind::RoundSphere { scale } => {
            let band = spec.overlap_band;
            let half = band.exp() * 1.1;
            let h = 2.0 * half / nx as f64;
            let hy = 2.0 * half / ny as f64;
            // metric on the base in a chart: 4 scale² |dw|² / (1+|w|²)²
            let mut partition = Vec::with_capacity(2 * nx * ny);
            let mut base_weights = Vec::with_capacity(2 * nx * ny);
            for _chart in 0..2 {
                for ix in 0..nx {
                    for iy in 0..ny {
                        let u = -half + (ix as f64 + 0.5) * h;
                        let v = -half + (iy as f64 + 0.5) * hy;
                        let r2 = u * u + v * v;
                        let chi = chart_partition(r2.sqrt(), band);
                        let density = 4.0 * scale * scale / ((1.0 + r2) * (1.0 + r2));
                        partition.push(chi);
                        base_weights.push(chi * density * h * hy);
                    }
                }
            }
            let mut g = Grid {
                n_charts: 2,
                chart_half_width: half,
                torus: None,
                fft_theta,
                partition,
                base_weights,
                overlap: Vec::new(),
                base,
                spec,
            };
            g.overlap = g.build_overlap();
            g
        }
    };
    Ok(Arc::new(grid))
}

/// Partition function of a stereographic chart at coordinate radius `r`.
/// The two charts' functions satisfy `χ(r) + χ(1/r) = 1`; the erfc profile
/// keeps the quadrature exponentially convergent and is below 1e-16 at the
/// chart square's edge.
pub fn chart_partition(r: f64, band: f64) -> f64 {
    if r <= 0.0 {
        return 1.0;
    }
    0.5 * libm::erfc(r.ln() / (band / 5.0))
}

impl Grid {
    pub fn nx(&self) -> usize {
        self.spec.nx
    }
    pub fn ny(&self) -> usize {
        self.spec.ny
    }
    pub fn ntheta(&self) -> usize {
        self.spec.ntheta
    }

    pub fn len(&self) -> usize {
        self.n_charts * self.spec.nx * self.spec.ny * self.spec.ntheta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.n_charts * self.spec.nx * self.spec.ny
    }

    #[inline]
    pub fn index(&self, chart: usize, ix: usize, iy: usize, it: usize) -> usize {
        ((chart * self.spec.nx + ix) * self.spec.ny + iy) * self.spec.ntheta + it
    }

    #[inline]
    pub fn slice_index(&self, chart: usize, ix: usize, iy: usize) -> usize {
        (chart * self.spec.nx + ix) * self.spec.ny + iy
    }

    /// Base coordinate of grid column `ix` (torus: lattice fraction, sphere: chart u).
    pub fn x(&self, ix: usize) -> f64 {
        match self.torus {
            Some(ref t) => t.x(ix),
            None => -self.chart_half_width + (ix as f64 + 0.5) * self.hx(),
        }
    }

    pub fn y(&self, iy: usize) -> f64 {
        match self.torus {
            Some(ref t) => t.y(iy),
            None => -self.chart_half_width + (iy as f64 + 0.5) * self.hy(),
        }
    }

    pub fn theta(&self, it: usize) -> f64 {
        2.0 * PI * it as f64 / self.spec.ntheta as f64
    }

    /// Grid spacing in x (lattice or chart units).
    pub fn hx(&self) -> f64 {
        match self.torus {
            Some(_) => 1.0 / self.spec.nx as f64,
            None => 2.0 * self.chart_half_width / self.spec.nx as f64,
        }
    }

    pub fn hy(&self) -> f64 {
        match self.torus {
            Some(_) => 1.0 / self.spec.ny as f64,
            None => 2.0 * self.chart_half_width / self.spec.ny as f64,
        }
    }

    pub fn torus(&self) -> Option<&TorusOps> {
        self.torus.as_ref()
    }

    pub fn require_torus(&self, what: &str) -> Result<&TorusOps> {
        self.torus
            .as_ref()
            .ok_or_else(|| Error::Unsupported(format!("{what} is implemented on the torus base only")))
    }

    pub fn fft_theta(&self) -> &PeriodicFft {
        &self.fft_theta
    }

    pub fn partition(&self, chart: usize, ix: usize, iy: usize) -> f64 {
        self.partition[self.slice_index(chart, ix, iy)]
    }

    /// Quadrature weight of a point of the total space for the Riemannian volume.
    pub fn weight(&self, chart: usize, ix: usize, iy: usize) -> f64 {
        self.base_weights[self.slice_index(chart, ix, iy)] * 2.0 * PI / self.spec.ntheta as f64
    }

    pub fn base_weight(&self, chart: usize, ix: usize, iy: usize) -> f64 {
        self.base_weights[self.slice_index(chart, ix, iy)]
    }

    pub fn total_weight(&self) -> f64 {
        self.base_weights.iter().sum::<f64>() * 2.0 * PI
    }

    pub fn overlap_stencils(&self) -> &[OverlapStencil] {
        &self.overlap
    }

    /// Iterates over all points as `(flat index, Point)`.
    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        let (nx, ny, nt) = (self.spec.nx, self.spec.ny, self.spec.ntheta);
        (0..self.n_charts).flat_map(move |c| {
            (0..nx).flat_map(move |ix| {
                (0..ny).flat_map(move |iy| {
                    (0..nt).map(move |it| Point {
                        chart: c,
                        ix,
                        iy,
                        it,
                        x: self.x(ix),
                        y: self.y(iy),
                        theta: self.theta(it),
                    })
                })
            })
        })
    }

    /// Stereographic coordinate of a point of one chart as seen from the other.
    pub fn other_chart_coordinate(u: f64, v: f64) -> (f64, f64) {
        let r2 = u * u + v * v;
        (u / r2, -v / r2)
    }

    fn build_overlap(&self) -> Vec<OverlapStencil> {
        let (nx, ny) = (self.spec.nx, self.spec.ny);
        let half = self.chart_half_width;
        let (hx, hy) = (self.hx(), self.hy());
        let mut out = Vec::new();
        for c in 0..2 {
            for ix in 0..nx {
                for iy in 0..ny {
                    let chi = self.partition(c, ix, iy);
                    if chi <= 1e-12 || chi >= 1.0 - 1e-12 {
                        continue;
                    }
                    let (u2, v2) = Self::other_chart_coordinate(self.x(ix), self.y(iy));
                    let sx = (u2 + half) / hx - 0.5;
                    let sy = (v2 + half) / hy - 0.5;
                    let i0 = sx.floor() as i64 - 1;
                    let j0 = sy.floor() as i64 - 1;
                    if i0 < 0 || j0 < 0 || i0 + 3 >= nx as i64 || j0 + 3 >= ny as i64 {
                        continue;
                    }
                    let xs: Vec<f64> = (0..4).map(|k| (i0 + k) as f64).collect();
                    let ys: Vec<f64> = (0..4).map(|k| (j0 + k) as f64).collect();
                    let wx = lagrange_weights(sx, &xs);
                    let wy = lagrange_weights(sy, &ys);
                    let mut weights = Vec::with_capacity(16);
                    for a in 0..4 {
                        for b in 0..4 {
                            weights.push(((i0 + a as i64) as usize, (j0 + b as i64) as usize, wx[a] * wy[b]));
                        }
                    }
                    out.push(OverlapStencil {
                        target_chart: c,
                        target: (ix, iy),
                        source_chart: 1 - c,
                        weights,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Point {
    pub chart: usize,
    pub ix: usize,
    pub iy: usize,
    pub it: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    X,
    Y,
    Theta,
}

/// Complex scalar field on the total space.
///
/// `twist` is the degree of the factor of automorphy in the x direction
/// (torus only); `xi_invariant` marks fields constant along the fiber.
#[derive(Clone, Debug)]
pub struct Field {
    pub grid: GridHandle,
    pub values: Vec<Complex64>,
    pub twist: i64,
    pub xi_invariant: bool,
}

impl Field {
    pub fn zeros(grid: &GridHandle, twist: i64) -> Self {
        Self {
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
            grid: grid.clone(),
            twist,
            xi_invariant: true,
        }
    }

    pub fn constant(grid: &GridHandle, c: Complex64) -> Self {
        Self {
            values: vec![c; grid.len()],
            grid: grid.clone(),
            twist: 0,
            xi_invariant: true,
        }
    }

    pub fn from_fn(grid: &GridHandle, twist: i64, f: impl Fn(&Point) -> Complex64) -> Self {
        let values = grid.points().map(|p| f(&p)).collect();
        let mut out = Self {
            grid: grid.clone(),
            values,
            twist,
            xi_invariant: false,
        };
        out.xi_invariant = out.fiber_variation() < 1e-12 * (1.0 + out.max_norm());
        out
    }

    /// Lifts base-slice data (one value per (chart, ix, iy)) to a ξ-invariant field.
    pub fn from_slice(grid: &GridHandle, twist: i64, slice: &[Complex64]) -> Self {
        assert_eq!(slice.len(), grid.slice_len());
        let nt = grid.ntheta();
        let mut values = Vec::with_capacity(grid.len());
        for &v in slice {
            values.extend(std::iter::repeat_n(v, nt));
        }
        Self {
            grid: grid.clone(),
            values,
            twist,
            xi_invariant: true,
        }
    }

    /// Fiber average, one value per (chart, ix, iy).
    pub fn slice(&self) -> Vec<Complex64> {
        let nt = self.grid.ntheta();
        self.values
            .chunks(nt)
            .map(|c| c.iter().sum::<Complex64>() / nt as f64)
            .collect()
    }

    pub fn same_grid(&self, other: &Field) -> Result<()> {
        if !Arc::ptr_eq(&self.grid, &other.grid) && self.grid.spec != other.grid.spec {
            return Err(Error::GridMismatch("fields live on different grids".into()));
        }
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest deviation from the fiber average.
    pub fn fiber_variation(&self) -> f64 {
        let nt = self.grid.ntheta();
        self.values
            .chunks(nt)
            .map(|c| {
                let m = c.iter().sum::<Complex64>() / nt as f64;
                c.iter().map(|v| (v - m).norm()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            twist: self.twist,
            xi_invariant: self.xi_invariant,
        }
    }

    pub fn scale(&self, c: Complex64) -> Field {
        self.map(|v| v * c)
    }

    pub fn conj(&self) -> Field {
        let mut out = self.map(|v| v.conj());
        out.twist = -self.twist;
        out
    }

    /// Pointwise product; twists add.
    pub fn mul(&self, other: &Field) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect(),
            twist: self.twist + other.twist,
            xi_invariant: self.xi_invariant && other.xi_invariant,
        }
    }

    /// Coordinate derivative. All torus directions and the fiber are
    /// spectral (twisted x-lines are gauged to periodic ones first); sphere
    /// chart directions use differences of order `spec.fd_order`.
    pub fn differentiate(&self, dir: Direction) -> Result<Field> {
        self.check_finite("differentiate input")?;
        let g = &self.grid;
        let (nx, ny, nt) = (g.nx(), g.ny(), g.ntheta());
        let mut out = self.clone();
        match dir {
            Direction::Theta => {
                if self.xi_invariant {
                    out.values.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                } else {
                    for line in out.values.chunks_mut(nt) {
                        g.fft_theta.differentiate(line, 2.0 * PI);
                    }
                }
                out.xi_invariant = true;
                out.xi_invariant = out.fiber_variation() < 1e-14 || self.xi_invariant;
            }
            Direction::Y | Direction::X => match g.torus() {
                Some(t) => {
                    let k_l = g.base.k_l as i64;
                    self.per_mode(|slice, n| match dir {
                        Direction::X => t.dx(slice, self.twist + n * k_l),
                        _ => t.dy(slice),
                    })
                    .into_iter()
                    .zip(out.values.iter_mut())
                    .for_each(|(v, o)| *o = v);
                }
                None => {
                    if self.twist != 0 {
                        return Err(Error::Unsupported("twisted fields on the sphere charts".into()));
                    }
                    let order = g.spec.fd_order;
                    let (h, n_along) = match dir {
                        Direction::X => (g.hx(), nx),
                        _ => (g.hy(), ny),
                    };
                    let stencils = chart_stencils(n_along, order);
                    for c in 0..g.n_charts {
                        for a in 0..nx {
                            for b in 0..ny {
                                for it in 0..nt {
                                    let (i_along, (lo, ref w)) = match dir {
                                        Direction::X => (a, &stencils[a]),
                                        _ => (b, &stencils[b]),
                                    };
                                    let _ = i_along;
                                    let mut acc = Complex64::new(0.0, 0.0);
                                    for (k, &wk) in w.iter().enumerate() {
                                        let j = lo + k;
                                        let idx = match dir {
                                            Direction::X => g.index(c, j, b, it),
                                            _ => g.index(c, a, j, it),
                                        };
                                        acc += wk * self.values[idx];
                                    }
                                    out.values[g.index(c, a, b, it)] = acc / h;
                                }
                            }
                        }
                    }
                }
            },
        }
        Ok(out)
    }

    /// Applies a slice operator to each Fourier mode along the fiber. The
    /// closure receives the slice of mode `n` and the signed mode number.
    pub(crate) fn per_mode(&self, op: impl Fn(&[Complex64], i64) -> Vec<Complex64>) -> Vec<Complex64> {
        let g = &self.grid;
        let nt = g.ntheta();
        let ns = g.slice_len();
        if self.xi_invariant {
            let s = op(&self.slice(), 0);
            let mut out = Vec::with_capacity(g.len());
            for v in s {
                out.extend(std::iter::repeat_n(v, nt));
            }
            return out;
        }
        let mut spec = self.values.clone();
        for line in spec.chunks_mut(nt) {
            g.fft_theta.forward(line);
        }
        let mut result = vec![Complex64::new(0.0, 0.0); g.len()];
        let mut slice = vec![Complex64::new(0.0, 0.0); ns];
        for k in 0..nt {
            let n = g.fft_theta.wavenumber(k);
            for (s, v) in slice.iter_mut().enumerate() {
                *v = spec[s * nt + k];
            }
            if slice.iter().all(|v| v.norm() == 0.0) {
                continue;
            }
            let d = op(&slice, n);
            for (s, v) in d.into_iter().enumerate() {
                result[s * nt + k] = v;
            }
        }
        for line in result.chunks_mut(nt) {
            g.fft_theta.inverse(line);
        }
        result
    }

    /// Integral against the Riemannian volume with the chart partition of unity.
    pub fn integrate_density(&self) -> Complex64 {
        let g = &self.grid;
        let nt = g.ntheta();
        let mut acc = Complex64::new(0.0, 0.0);
        for (s, chunk) in self.values.chunks(nt).enumerate() {
            let w = g.base_weights[s];
            if w == 0.0 {
                continue;
            }
            acc += chunk.iter().sum::<Complex64>() * w;
        }
        acc * (2.0 * PI / nt as f64)
    }

    /// Writes `<stem>.bin` (little-endian re/im doubles) and `<stem>.json`.
    pub fn dump(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let mut w = BufWriter::new(File::create(&bin)?);
        for v in &self.values {
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
        w.flush()?;
        let meta = serde_json::json!({
            "shape": [self.grid.n_charts, self.grid.nx(), self.grid.ny(), self.grid.ntheta()],
            "layout": "chart, ix, iy, itheta; interleaved re/im f64 little-endian",
            "chart_atlas": self.grid.spec.atlas,
            "twist": self.twist,
            "xi_invariant": self.xi_invariant,
        });
        std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }
}

/// Per-index (first node, weights) for first derivatives on a non-periodic
/// line, centered in the interior and one-sided near the ends.
fn chart_stencils(n: usize, order: usize) -> Vec<(usize, Vec<f64>)> {
    let width = order + 1;
    let p = order / 2;
    (0..n)
        .map(|i| {
            let lo = if i < p {
                0
            } else if i + p >= n {
                n - width
            } else {
                i - p
            };
            let nodes: Vec<f64> = (lo..lo + width).map(|j| j as f64).collect();
            (lo, fd_weights(i as f64, &nodes))
        })
        .collect()
}

impl Add for &Field {
    type Output = Field;
    fn add(self, rhs: &Field) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&rhs.values).map(|(a, b)| a + b).collect(),
            twist: self.twist,
            xi_invariant: self.xi_invariant && rhs.xi_invariant,
        }
    }
}

impl Sub for &Field {
    type Output = Field;
    fn sub(self, rhs: &Field) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&rhs.values).map(|(a, b)| a - b).collect(),
            twist: self.twist,
            xi_invariant: self.xi_invariant && rhs.xi_invariant,
        }
    }
}

impl Neg for &Field {
    type Output = Field;
    fn neg(self) -> Field {
        self.map(|v| -v)
    }
}

impl Mul<Complex64> for &Field {
    type Output = Field;
    fn mul(self, rhs: Complex64) -> Field {
        self.scale(rhs)
    }
}

impl Mul<f64> for &Field {
    type Output = Field;
    fn mul(self, rhs: f64) -> Field {
        self.scale(Complex64::new(rhs, 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn torus_grid(n: usize, nt: usize) -> GridHandle {
        make_grid(BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1), GridSpec::torus(n, n, nt)).unwrap()
    }

    #[test]
    fn total_weight_is_area_times_fiber_length() {
        let g = torus_grid(32, 16);
        assert!((g.total_weight() - PI * 2.0 * PI).abs() < 1e-12);
        let g8 = torus_grid(8, 8);
        assert_eq!(g8.len(), 512);
    }

    #[test]
    fn rejects_bad_grids() {
        let t = BaseManifold::flat_torus(Complex64::new(0.0, 1.0), 1);
        assert!(make_grid(t.clone(), GridSpec::torus(4, 8, 8)).is_err());
        let mut s = GridSpec::torus(8, 8, 8);
        s.atlas = ChartAtlas::TwoChartStereographic;
        assert!(make_grid(t, s).is_err());
        assert!(make_grid(BaseManifold::hopf(), GridSpec::torus(16, 16, 8)).is_err());
    }

    #[test]
    fn overlap_rows_sum_to_one() {
        let g = make_grid(BaseManifold::hopf(), GridSpec::sphere(64, 64, 16)).unwrap();
        assert!(!g.overlap_stencils().is_empty());
        for st in g.overlap_stencils() {
            let s: f64 = st.weights.iter().map(|w| w.2).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_sums_to_one_across_charts() {
        for r in [0.5, 0.8, 1.0, 1.2, 1.4] {
            let s = chart_partition(r, 0.35) + chart_partition(1.0 / r, 0.35);
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn spectral_x_derivative() {
        let g = torus_grid(32, 8);
        let f = Field::from_fn(&g, 0, |p| Complex64::new((2.0 * PI * p.x).sin(), 0.0));
        let d = f.differentiate(Direction::X).unwrap();
        let err = g
            .points()
            .map(|p| (d.values[g.index(0, p.ix, p.iy, p.it)].re - 2.0 * PI * (2.0 * PI * p.x).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
        let c = Field::constant(&g, Complex64::new(3.0, 1.0));
        for dir in [Direction::X, Direction::Y, Direction::Theta] {
            assert!(c.differentiate(dir).unwrap().max_norm() < 1e-12);
        }
    }

    #[test]
    fn sphere_area_and_chart_independence() {
        let g = make_grid(BaseManifold::hopf(), GridSpec::sphere(64, 64, 8)).unwrap();
        let one = Field::constant(&g, Complex64::new(1.0, 0.0));
        // S³ of radius 1 has volume 2π².
        let vol = one.integrate_density().re;
        assert!((vol - 2.0 * PI * PI).abs() < 1e-10 * vol, "{vol}");
        let mut spec = GridSpec::sphere(64, 64, 8);
        spec.overlap_band = 0.3;
        let g2 = make_grid(BaseManifold::hopf(), spec).unwrap();
        let vol2 = Field::constant(&g2, Complex64::new(1.0, 0.0)).integrate_density().re;
        assert!((vol - vol2).abs() < 1e-8 * vol);
    }

    #[test]
    fn odd_function_integrates_to_zero() {
        let g = torus_grid(32, 8);
        let f = Field::from_fn(&g, 0, |p| Complex64::new((2.0 * PI * (p.x - 0.5)).sin(), 0.0));
        assert!(f.integrate_density().norm() < 1e-12);
    }
}
