//! Eigenbasis of the horizontal Laplacian on the torus and the Dirichlet
//! rectangle, spectral projections, fractional powers and Sobolev norms.
//!
//! Torus modes are real sin/cos Fourier pairs with zero mean; rectangle modes
//! are products of sines vanishing on the side walls. All eigenvalues are
//! strictly positive and modes are orthonormal in `L2`, so coefficient
//! vectors carry the full Hilbert-space structure (Parseval, duality,
//! diagonal fractional powers).

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{QgError, Result};

/// Which horizontal domain the basis lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    /// Periodic box with zero-mean lateral condition.
    Torus,
    /// Rectangle with homogeneous Dirichlet side walls.
    Rectangle,
}

/// Horizontal domain plus Galerkin cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub lx: f64,
    pub ly: f64,
    /// Number of basis functions kept (each sin and cos counts separately).
    pub mode_cutoff: usize,
}

impl DomainSpec {
    pub fn torus(lx: f64, ly: f64, n: usize) -> Self {
        DomainSpec { kind: DomainKind::Torus, lx, ly, mode_cutoff: n }
    }

    pub fn rectangle(lx: f64, ly: f64, n: usize) -> Self {
        DomainSpec { kind: DomainKind::Rectangle, lx, ly, mode_cutoff: n }
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    fn validate(&self) -> Result<()> {
        if !(self.lx > 0.0 && self.ly > 0.0) {
            return Err(QgError::Config("domain side lengths must be positive".into()));
        }
        if self.mode_cutoff == 0 {
            return Err(QgError::Config("mode cutoff must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sin comes before cos inside a wavevector block on the torus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Parity {
    Sin,
    Cos,
}

/// One eigenfunction of the (negative) horizontal Laplacian.
#[derive(Debug, Clone, Copy)]
pub struct Mode {
    pub eigenvalue: f64,
    /// Integer wavevector: Fourier indices on the torus, sine indices (>= 1)
    /// on the rectangle.
    pub mx: i64,
    pub my: i64,
    pub parity: Parity,
    omega_x: f64,
    omega_y: f64,
    norm: f64,
    kind: DomainKind,
}

impl Mode {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            DomainKind::Torus => {
                let phase = self.omega_x * x + self.omega_y * y;
                match self.parity {
                    Parity::Sin => self.norm * phase.sin(),
                    Parity::Cos => self.norm * phase.cos(),
                }
            }
            DomainKind::Rectangle => {
                self.norm * (self.omega_x * x).sin() * (self.omega_y * y).sin()
            }
        }
    }

    /// Analytic gradient (d/dx1, d/dx2).
    pub fn grad(&self, x: f64, y: f64) -> (f64, f64) {
        match self.kind {
            DomainKind::Torus => {
                let phase = self.omega_x * x + self.omega_y * y;
                let d = match self.parity {
                    Parity::Sin => self.norm * phase.cos(),
                    Parity::Cos => -self.norm * phase.sin(),
                };
                (d * self.omega_x, d * self.omega_y)
            }
            DomainKind::Rectangle => {
                let sx = (self.omega_x * x).sin();
                let cx = (self.omega_x * x).cos();
                let sy = (self.omega_y * y).sin();
                let cy = (self.omega_y * y).cos();
                (self.norm * self.omega_x * cx * sy, self.norm * self.omega_y * sx * cy)
            }
        }
    }
}

/// Uniform midpoint collocation grid over the domain.
///
/// Midpoints make the rectangle-rule quadrature exact for trigonometric
/// polynomials resolved by the grid, on both domains, and avoid the Dirichlet
/// boundary where every rectangle mode vanishes.
#[derive(Debug, Clone)]
pub struct CollocationGrid {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl CollocationGrid {
    pub fn new(lx: f64, ly: f64, nx: usize, ny: usize) -> Self {
        let hx = lx / nx as f64;
        let hy = ly / ny as f64;
        let xs = (0..nx).map(|i| (i as f64 + 0.5) * hx).collect();
        let ys = (0..ny).map(|j| (j as f64 + 0.5) * hy).collect();
        CollocationGrid { nx, ny, hx, hy, xs, ys }
    }

    pub fn cell_weight(&self) -> f64 {
        self.hx * self.hy
    }
}

/// Mode values (and gradients) tabulated on a collocation grid, for repeated
/// transforms.
#[derive(Debug, Clone)]
pub struct ModeTable {
    pub grid: CollocationGrid,
    /// values[i] is mode i on the grid, indexed [ix, iy].
    pub values: Vec<Array2<f64>>,
    pub grad_x: Vec<Array2<f64>>,
    pub grad_y: Vec<Array2<f64>>,
}

/// The first `n` eigenpairs of the horizontal Laplacian, sorted by
/// eigenvalue with lexicographic (mx, my, parity) tie-break.
#[derive(Debug, Clone)]
pub struct Basis {
    pub domain: DomainSpec,
    pub modes: Vec<Mode>,
}

impl Basis {
    pub fn new(domain: DomainSpec) -> Result<Arc<Basis>> {
        domain.validate()?;
        let n = domain.mode_cutoff;
        let mut modes = Vec::new();
        match domain.kind {
            DomainKind::Torus => {
                let norm = (2.0 / domain.area()).sqrt();
                // Grow the index box until the n-th smallest eigenvalue is
                // certainly inside it.
                let mut bound = 4i64;
                loop {
                    modes.clear();
                    for mx in 0..=bound {
                        let my_range: Vec<i64> = if mx == 0 {
                            (1..=bound).collect()
                        } else {
                            (-bound..=bound).collect()
                        };
                        for my in my_range {
                            let wx = 2.0 * PI * mx as f64 / domain.lx;
                            let wy = 2.0 * PI * my as f64 / domain.ly;
                            let k = wx * wx + wy * wy;
                            for parity in [Parity::Sin, Parity::Cos] {
                                modes.push(Mode {
                                    eigenvalue: k,
                                    mx,
                                    my,
                                    parity,
                                    omega_x: wx,
                                    omega_y: wy,
                                    norm,
                                    kind: DomainKind::Torus,
                                });
                            }
                        }
                    }
                    sort_modes(&mut modes);
                    let edge = 2.0 * PI * bound as f64 / domain.lx.max(domain.ly);
                    if modes.len() >= n && modes[n - 1].eigenvalue < edge * edge {
                        break;
                    }
                    bound *= 2;
                }
            }
            DomainKind::Rectangle => {
                let norm = (4.0 / domain.area()).sqrt();
                let mut bound = 4i64;
                loop {
                    modes.clear();
                    for mx in 1..=bound {
                        for my in 1..=bound {
                            let wx = PI * mx as f64 / domain.lx;
                            let wy = PI * my as f64 / domain.ly;
                            modes.push(Mode {
                                eigenvalue: wx * wx + wy * wy,
                                mx,
                                my,
                                parity: Parity::Sin,
                                omega_x: wx,
                                omega_y: wy,
                                norm,
                                kind: DomainKind::Rectangle,
                            });
                        }
                    }
                    sort_modes(&mut modes);
                    let edge = PI * bound as f64 / domain.lx.max(domain.ly);
                    if modes.len() >= n && modes[n - 1].eigenvalue < edge * edge {
                        break;
                    }
                    bound *= 2;
                }
            }
        }
        modes.truncate(n);
        Ok(Arc::new(Basis { domain, modes }))
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn eigenvalues(&self) -> impl Iterator<Item = f64> + '_ {
        self.modes.iter().map(|m| m.eigenvalue)
    }

    /// Largest integer wavevector component present.
    pub fn max_index(&self) -> i64 {
        self.modes.iter().map(|m| m.mx.abs().max(m.my.abs())).max().unwrap_or(1)
    }

    /// Collocation grid sized so products of up to three basis functions are
    /// integrated exactly by the midpoint rule (covers dealiased projection
    /// of quadratic nonlinearities).
    pub fn collocation_grid(&self) -> CollocationGrid {
        let m = self.max_index() as usize;
        let nx = (3 * m + 4).max(16);
        CollocationGrid::new(self.domain.lx, self.domain.ly, nx, nx)
    }

    pub fn tabulate(&self, grid: &CollocationGrid) -> ModeTable {
        let mut values = Vec::with_capacity(self.len());
        let mut grad_x = Vec::with_capacity(self.len());
        let mut grad_y = Vec::with_capacity(self.len());
        for mode in &self.modes {
            let mut v = Array2::zeros((grid.nx, grid.ny));
            let mut gx = Array2::zeros((grid.nx, grid.ny));
            let mut gy = Array2::zeros((grid.nx, grid.ny));
            for (ix, &x) in grid.xs.iter().enumerate() {
                for (iy, &y) in grid.ys.iter().enumerate() {
                    v[[ix, iy]] = mode.eval(x, y);
                    let (dx, dy) = mode.grad(x, y);
                    gx[[ix, iy]] = dx;
                    gy[[ix, iy]] = dy;
                }
            }
            values.push(v);
            grad_x.push(gx);
            grad_y.push(gy);
        }
        ModeTable { grid: grid.clone(), values, grad_x, grad_y }
    }
}

fn sort_modes(modes: &mut [Mode]) {
    modes.sort_by(|a, b| {
        a.eigenvalue
            .partial_cmp(&b.eigenvalue)
            .unwrap()
            .then(a.mx.cmp(&b.mx))
            .then(a.my.cmp(&b.my))
            .then(a.parity.cmp(&b.parity))
    });
}

/// Fractional exponent for powers of the square-root Laplacian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FracExponent(f64);

impl FracExponent {
    /// Admissible range is generous around the [-2, 2] band the dynamics
    /// actually uses.
    pub const RANGE: f64 = 6.0;

    pub fn new(s: f64) -> Result<Self> {
        if !s.is_finite() || s.abs() > Self::RANGE {
            return Err(QgError::Config(format!("fractional exponent {s} out of range")));
        }
        Ok(FracExponent(s))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Coefficients of a scalar against the first n eigenfunctions.
#[derive(Debug, Clone)]
pub struct SpectralField {
    pub basis: Arc<Basis>,
    pub coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn zeros(basis: &Arc<Basis>) -> Self {
        SpectralField { basis: Arc::clone(basis), coeffs: vec![0.0; basis.len()] }
    }

    pub fn from_coeffs(basis: &Arc<Basis>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return Err(QgError::Data(format!(
                "coefficient vector of length {} for a basis of {} modes",
                coeffs.len(),
                basis.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(QgError::Data("non-finite coefficient".into()));
        }
        Ok(SpectralField { basis: Arc::clone(basis), coeffs })
    }

    /// Unit coefficient on mode i (zero-based).
    pub fn unit(basis: &Arc<Basis>, i: usize) -> Self {
        let mut f = Self::zeros(basis);
        f.coeffs[i] = 1.0;
        f
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.basis
            .modes
            .iter()
            .zip(&self.coeffs)
            .map(|(m, c)| c * m.eval(x, y))
            .sum()
    }

    pub fn eval_grid(&self, table: &ModeTable) -> Array2<f64> {
        let mut out = Array2::zeros((table.grid.nx, table.grid.ny));
        for (v, &c) in table.values.iter().zip(&self.coeffs) {
            if c != 0.0 {
                out.scaled_add(c, v);
            }
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        SpectralField {
            basis: Arc::clone(&self.basis),
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn add(&self, other: &SpectralField) -> Self {
        SpectralField {
            basis: Arc::clone(&self.basis),
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &SpectralField) -> Self {
        SpectralField {
            basis: Arc::clone(&self.basis),
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Project gridded samples onto the first n modes by midpoint quadrature.
pub fn project(basis: &Arc<Basis>, samples: &Array2<f64>, table: &ModeTable) -> Result<SpectralField> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(QgError::Data("non-finite sample in projection input".into()));
    }
    if table.values.len() != basis.len() {
        return Err(QgError::Data("mode table does not match basis".into()));
    }
    let w = table.grid.cell_weight();
    let coeffs = table
        .values
        .iter()
        .map(|ev| w * samples.iter().zip(ev.iter()).map(|(f, e)| f * e).sum::<f64>())
        .collect();
    Ok(SpectralField { basis: Arc::clone(basis), coeffs })
}

/// Apply the fractional Laplacian power: coefficient i is scaled by
/// `k_i^(s/2)`.
pub fn frac_laplacian(f: &SpectralField, s: FracExponent) -> SpectralField {
    let coeffs = f
        .basis
        .modes
        .iter()
        .zip(&f.coeffs)
        .map(|(m, c)| c * m.eigenvalue.powf(s.value() / 2.0))
        .collect();
    SpectralField { basis: Arc::clone(&f.basis), coeffs }
}

/// Homogeneous Sobolev norm `(sum k_i^s f_i^2)^(1/2)`.
pub fn sobolev_norm(f: &SpectralField, s: f64) -> f64 {
    f.basis
        .modes
        .iter()
        .zip(&f.coeffs)
        .map(|(m, c)| m.eigenvalue.powf(s) * c * c)
        .sum::<f64>()
        .sqrt()
}

/// Perpendicular gradient (-d/dx2, d/dx1) evaluated on the collocation grid
/// from analytic mode derivatives. Divergence-free by construction.
pub fn perp_gradient(f: &SpectralField, table: &ModeTable) -> (Array2<f64>, Array2<f64>) {
    let mut u = Array2::zeros((table.grid.nx, table.grid.ny));
    let mut v = Array2::zeros((table.grid.nx, table.grid.ny));
    for ((gx, gy), &c) in table.grad_x.iter().zip(table.grad_y.iter()).zip(&f.coeffs) {
        if c != 0.0 {
            u.scaled_add(-c, gy);
            v.scaled_add(c, gx);
        }
    }
    (u, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_max_err(basis: &Arc<Basis>) -> (f64, f64) {
        let grid = basis.collocation_grid();
        let table = basis.tabulate(&grid);
        let w = grid.cell_weight();
        let n = basis.len();
        let mut off = 0.0f64;
        let mut diag = 0.0f64;
        for i in 0..n {
            for j in i..n {
                let g: f64 = table.values[i]
                    .iter()
                    .zip(table.values[j].iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * w;
                if i == j {
                    diag = diag.max((g - 1.0).abs());
                } else {
                    off = off.max(g.abs());
                }
            }
        }
        (diag, off)
    }

    #[test]
    fn torus_orthonormal() {
        let basis = Basis::new(DomainSpec::torus(2.0 * PI, 2.0 * PI, 24)).unwrap();
        let (diag, off) = gram_max_err(&basis);
        assert!(diag < 1e-12, "diag err {diag}");
        assert!(off < 1e-12, "off-diag err {off}");
    }

    #[test]
    fn rectangle_orthonormal() {
        let basis = Basis::new(DomainSpec::rectangle(1.0, 1.7, 20)).unwrap();
        let (diag, off) = gram_max_err(&basis);
        assert!(diag < 1e-12, "diag err {diag}");
        assert!(off < 1e-12, "off-diag err {off}");
    }

    #[test]
    fn torus_ordering_and_eigenvalues() {
        let basis = Basis::new(DomainSpec::torus(2.0 * PI, 2.0 * PI, 12)).unwrap();
        // Lowest eigenvalue 1 is fourfold: wavevectors (0,1) then (1,0),
        // sin before cos within each.
        let m0 = &basis.modes[0];
        assert_eq!((m0.mx, m0.my, m0.parity), (0, 1, Parity::Sin));
        let m1 = &basis.modes[1];
        assert_eq!((m1.mx, m1.my, m1.parity), (0, 1, Parity::Cos));
        let m2 = &basis.modes[2];
        assert_eq!((m2.mx, m2.my, m2.parity), (1, 0, Parity::Sin));
        for w in basis.modes.windows(2) {
            assert!(w[0].eigenvalue <= w[1].eigenvalue + 1e-14);
        }
        assert!((basis.modes[0].eigenvalue - 1.0).abs() < 1e-14);
        assert!((basis.modes[4].eigenvalue - 2.0).abs() < 1e-14);
    }

    #[test]
    fn rectangle_lowest_mode() {
        let basis = Basis::new(DomainSpec::rectangle(PI, PI, 8)).unwrap();
        let m0 = &basis.modes[0];
        assert_eq!((m0.mx, m0.my), (1, 1));
        assert!((m0.eigenvalue - 2.0).abs() < 1e-14);
        // Vanishes on the walls.
        assert!(m0.eval(0.0, 1.0).abs() < 1e-14);
        assert!(m0.eval(PI, 1.0).abs() < 1e-14);
        assert!(m0.eval(1.0, 0.0).abs() < 1e-14);
    }

    #[test]
    fn projection_round_trip_parseval() {
        let basis = Basis::new(DomainSpec::torus(2.0 * PI, 2.0 * PI, 18)).unwrap();
        let grid = basis.collocation_grid();
        let table = basis.tabulate(&grid);
        let coeffs: Vec<f64> = (0..18).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let f = SpectralField::from_coeffs(&basis, coeffs.clone()).unwrap();
        let samples = f.eval_grid(&table);
        let g = project(&basis, &samples, &table).unwrap();
        for (a, b) in f.coeffs.iter().zip(&g.coeffs) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // Parseval: grid L2 of samples equals coefficient norm.
        let grid_l2 = (samples.iter().map(|v| v * v).sum::<f64>() * grid.cell_weight()).sqrt();
        assert!((grid_l2 - f.l2_norm()).abs() < 1e-12);
    }

    #[test]
    fn frac_laplacian_composes_and_inverts() {
        let basis = Basis::new(DomainSpec::torus(2.0 * PI, 2.0 * PI, 16)).unwrap();
        let f = SpectralField::from_coeffs(&basis, (0..16).map(|i| 1.0 / (i + 1) as f64).collect())
            .unwrap();
        let s = FracExponent::new(0.7).unwrap();
        let ms = FracExponent::new(-0.7).unwrap();
        let back = frac_laplacian(&frac_laplacian(&f, s), ms);
        for (a, b) in f.coeffs.iter().zip(&back.coeffs) {
            assert!((a - b).abs() < 1e-14);
        }
        // Lambda^1 then Lambda^1 equals multiplication by the eigenvalue.
        let one = FracExponent::new(1.0).unwrap();
        let twice = frac_laplacian(&frac_laplacian(&f, one), one);
        for ((m, a), b) in basis.modes.iter().zip(&f.coeffs).zip(&twice.coeffs) {
            assert!((m.eigenvalue * a - b).abs() < 1e-13);
        }
        assert!(FracExponent::new(f64::NAN).is_err());
        assert!(FracExponent::new(7.0).is_err());
    }

    #[test]
    fn sobolev_norm_matches_l2_at_zero() {
        let basis = Basis::new(DomainSpec::torus(2.0 * PI, 2.0 * PI, 16)).unwrap();
        let f = SpectralField::from_coeffs(&basis, (0..16).map(|i| (i as f64).sin()).collect())
            .unwrap();
        assert!((sobolev_norm(&f, 0.0) - f.l2_norm()).abs() < 1e-13);
        // Norm with s=2 equals L2 of the Laplacian image.
        let lap = frac_laplacian(&f, FracExponent::new(2.0).unwrap());
        assert!((sobolev_norm(&f, 2.0) - lap.l2_norm()).abs() < 1e-12);
    }

    #[test]
    fn perp_gradient_divergence_free_and_orthogonal() {
        let basis = Basis::new(DomainSpec::torus(2.0 * PI, 2.0 * PI, 14)).unwrap();
        let grid = basis.collocation_grid();
        let table = basis.tabulate(&grid);
        let f = SpectralField::from_coeffs(&basis, (0..14).map(|i| 1.0 / (1 + i * i) as f64).collect())
            .unwrap();
        let (u, v) = perp_gradient(&f, &table);
        // u . grad f integrates to zero against f (transport term kills the
        // L2 norm for divergence-free velocities).
        let w = grid.cell_weight();
        let mut gfx = Array2::zeros((grid.nx, grid.ny));
        let mut gfy = Array2::zeros((grid.nx, grid.ny));
        for ((gx, gy), &c) in table.grad_x.iter().zip(table.grad_y.iter()).zip(&f.coeffs) {
            gfx.scaled_add(c, gx);
            gfy.scaled_add(c, gy);
        }
        let ip: f64 = u
            .iter()
            .zip(v.iter())
            .zip(gfx.iter().zip(gfy.iter()))
            .map(|((uu, vv), (fx, fy))| uu * fx + vv * fy)
            .sum::<f64>()
            * w;
        assert!(ip.abs() < 1e-12, "advection inner product {ip}");
        // Pointwise u = (-df/dy, df/dx).
        assert!(u
            .iter()
            .zip(gfy.iter())
            .all(|(a, b)| (a + b).abs() < 1e-12));
        assert!(v
            .iter()
            .zip(gfx.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Basis::new(DomainSpec::torus(0.0, 1.0, 4)).is_err());
        assert!(Basis::new(DomainSpec::torus(1.0, 1.0, 0)).is_err());
        let basis = Basis::new(DomainSpec::torus(2.0 * PI, 2.0 * PI, 4)).unwrap();
        assert!(SpectralField::from_coeffs(&basis, vec![1.0; 3]).is_err());
        assert!(SpectralField::from_coeffs(&basis, vec![f64::NAN; 4]).is_err());
    }
}
