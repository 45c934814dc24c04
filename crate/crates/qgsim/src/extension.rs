//! Harmonic extensions into the weighted half-space and the
//! Dirichlet-to-Neumann map realizing the fractional Laplacian.
//!
//! Each horizontal mode `e_i` extends vertically by the rescaled universal
//! profile, `Z_i(z) = W(c_i z^(1-a))` with
//! `c_i = (k_i / (1-a)^2)^((1-a)/(2-a))`; this choice makes
//! `d/dz(z^a Z_i') = k_i Z_i` exact, so `e_i Z_i` is harmonic for the
//! weighted operator. The wall flux of `Z_i` is `-(1-a) c_i kappa`, giving
//! the Neumann symbol
//!
//! ```text
//!     sigma_i = kappa_ext k_i^b,   b = (1-a)/(2-a),
//!     kappa_ext = kappa (1-a)^(a/(2-a)),
//! ```
//!
//! which reduces to the classical half-Laplacian `sqrt(k)` at `a = 0`.
//! The normalized eigenfields `psi_i = k_i^(-b/2) e_i Z_i` all carry energy
//! `kappa_ext` in the weighted semi-inner product.

use std::sync::Arc;

use ndarray::Array2;

use crate::basis::{Basis, SpectralField};
use crate::error::{QgError, Result};
use crate::profile::WProfile;
use crate::zgrid::ZGrid;

/// Order of the fractional Laplacian realized on the boundary:
/// `(1-a)/(2-a)`.
pub fn trace_exponent(a: f64) -> f64 {
    (1.0 - a) / (2.0 - a)
}

/// Dissipation order of the boundary evolution: `1/(2-a)`.
pub fn alpha_exponent(a: f64) -> f64 {
    1.0 / (2.0 - a)
}

/// Energy constant of the normalized harmonic eigenfields.
pub fn kappa_ext(profile: &WProfile) -> f64 {
    let a = profile.a;
    profile.kappa * (1.0 - a).powf(a / (2.0 - a))
}

/// Scalar field on the product of the vertical grid and the horizontal
/// domain, stored per-mode: `u(z_j, x) = sum_i data[j, i] e_i(x)`.
#[derive(Debug, Clone)]
pub struct LayeredField {
    pub zgrid: Arc<ZGrid>,
    pub basis: Arc<Basis>,
    /// Indexed `[vertical node, mode]`.
    pub data: Array2<f64>,
}

impl LayeredField {
    pub fn zeros(zgrid: &Arc<ZGrid>, basis: &Arc<Basis>) -> Self {
        LayeredField {
            zgrid: Arc::clone(zgrid),
            basis: Arc::clone(basis),
            data: Array2::zeros((zgrid.nodes.len(), basis.len())),
        }
    }

    pub fn layer(&self, j: usize) -> SpectralField {
        SpectralField {
            basis: Arc::clone(&self.basis),
            coeffs: self.data.row(j).to_vec(),
        }
    }

    pub fn mode_column(&self, i: usize) -> Vec<f64> {
        self.data.column(i).to_vec()
    }

    /// `L2` norm over the half-space: vertical quadrature of the layer
    /// Parseval sums.
    pub fn l2_norm(&self) -> f64 {
        let per_node: Vec<f64> = self
            .data
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        self.zgrid.integrate_dz(&per_node).sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        LayeredField {
            zgrid: Arc::clone(&self.zgrid),
            basis: Arc::clone(&self.basis),
            data: &self.data * s,
        }
    }

    pub fn add(&self, other: &LayeredField) -> Self {
        LayeredField {
            zgrid: Arc::clone(&self.zgrid),
            basis: Arc::clone(&self.basis),
            data: &self.data + &other.data,
        }
    }

    pub fn sub(&self, other: &LayeredField) -> Self {
        LayeredField {
            zgrid: Arc::clone(&self.zgrid),
            basis: Arc::clone(&self.basis),
            data: &self.data - &other.data,
        }
    }
}

/// Weighted semi-inner product
/// `int int lambda du/dz dv/dz + grad_x u . grad_x v dz dx`,
/// in the flux-consistent discrete form (per-cell flux products in zeta plus
/// control-volume mass terms), which is exactly the bilinear form of the
/// elliptic solver.
pub fn semi_inner(u: &LayeredField, v: &LayeredField) -> f64 {
    let g = &u.zgrid;
    let one_minus_a = 1.0 - g.a;
    let mut total = 0.0;
    for (i, mode) in u.basis.modes.iter().enumerate() {
        let mut s = 0.0;
        for j in 0..g.cells() {
            let dzeta = g.zeta[j + 1] - g.zeta[j];
            let du = u.data[[j + 1, i]] - u.data[[j, i]];
            let dv = v.data[[j + 1, i]] - v.data[[j, i]];
            s += one_minus_a * du * dv / dzeta;
        }
        for j in 0..g.nodes.len() {
            s += mode.eigenvalue * u.data[[j, i]] * v.data[[j, i]] * g.dz_weights[j];
        }
        total += s;
    }
    total
}

pub fn semi_norm(u: &LayeredField) -> f64 {
    semi_inner(u, u).sqrt()
}

/// Vertical profiles of the harmonic extension per horizontal mode.
#[derive(Debug, Clone)]
pub struct ExtensionBasis {
    pub zgrid: Arc<ZGrid>,
    pub basis: Arc<Basis>,
    pub profile: Arc<WProfile>,
    /// Per-mode zeta scaling `c_i`.
    pub scale: Vec<f64>,
    /// `Z_i(z_j)`, indexed `[node, mode]`.
    pub z_values: Array2<f64>,
    /// Analytic Neumann symbols `kappa_ext k_i^b`.
    pub sigma: Vec<f64>,
    pub kappa_ext: f64,
}

/// Truncation height such that the slowest mode's profile has decayed to
/// `level` at the top.
pub fn suggest_z_max(profile: &WProfile, k_min: f64, level: f64) -> f64 {
    let a = profile.a;
    let c1 = (k_min / ((1.0 - a) * (1.0 - a))).powf(trace_exponent(a));
    let w_star = profile
        .nodes
        .iter()
        .zip(&profile.values)
        .find(|(_, v)| **v <= level)
        .map(|(w, _)| *w)
        .unwrap_or_else(|| *profile.nodes.last().unwrap());
    (w_star / c1).powf(1.0 / (1.0 - a))
}

pub fn build_extension_basis(
    zgrid: &Arc<ZGrid>,
    basis: &Arc<Basis>,
    profile: &Arc<WProfile>,
) -> Result<ExtensionBasis> {
    if profile.a != zgrid.a {
        return Err(QgError::Config(format!(
            "profile exponent {} does not match grid exponent {}",
            profile.a, zgrid.a
        )));
    }
    let a = zgrid.a;
    let b = trace_exponent(a);
    let ke = kappa_ext(profile);
    let n = basis.len();
    let scale: Vec<f64> = basis
        .modes
        .iter()
        .map(|m| (m.eigenvalue / ((1.0 - a) * (1.0 - a))).powf(b))
        .collect();
    let mut z_values = Array2::zeros((zgrid.nodes.len(), n));
    for (i, c) in scale.iter().enumerate() {
        for (j, zeta) in zgrid.zeta.iter().enumerate() {
            z_values[[j, i]] = profile.eval(c * zeta);
        }
    }
    let sigma = basis
        .modes
        .iter()
        .map(|m| ke * m.eigenvalue.powf(b))
        .collect();
    Ok(ExtensionBasis {
        zgrid: Arc::clone(zgrid),
        basis: Arc::clone(basis),
        profile: Arc::clone(profile),
        scale,
        z_values,
        sigma,
        kappa_ext: ke,
    })
}

impl ExtensionBasis {
    fn check_field(&self, h: &SpectralField) -> Result<()> {
        if h.coeffs.len() != self.basis.len() {
            return Err(QgError::Data(
                "boundary data does not match the extension basis".into(),
            ));
        }
        Ok(())
    }

    /// `E2`: harmonic lift of Dirichlet data, `u_i(z) = h_i Z_i(z)`.
    pub fn dirichlet_extend(&self, h: &SpectralField) -> Result<LayeredField> {
        self.check_field(h)?;
        let mut out = LayeredField::zeros(&self.zgrid, &self.basis);
        for j in 0..self.zgrid.nodes.len() {
            for (i, c) in h.coeffs.iter().enumerate() {
                out.data[[j, i]] = c * self.z_values[[j, i]];
            }
        }
        Ok(out)
    }

    /// `E1`: harmonic lift with prescribed Neumann trace, by diagonal
    /// inversion of the analytic symbols.
    pub fn neumann_extend(&self, theta: &SpectralField) -> Result<LayeredField> {
        self.check_field(theta)?;
        let h = SpectralField {
            basis: Arc::clone(&self.basis),
            coeffs: theta
                .coeffs
                .iter()
                .zip(&self.sigma)
                .map(|(t, s)| t / s)
                .collect(),
        };
        self.dirichlet_extend(&h)
    }

    /// Measured Dirichlet-to-Neumann map: extend, then extrapolate the wall
    /// flux. Diagonal by construction.
    pub fn dtn_map(&self, h: &SpectralField) -> Result<SpectralField> {
        let u = self.dirichlet_extend(h)?;
        Ok(trace_neumann(&u))
    }

    /// Boundary value at `z = 0` of the Dirichlet data the extension would
    /// need for `E1` round trips; exposed for diagnostics.
    pub fn symbols(&self) -> &[f64] {
        &self.sigma
    }

    /// Max over modes and interior nodes of the discrete harmonic residual
    /// `|flux difference - k Z dV|` relative to `k max|Z| dV`.
    pub fn harmonic_residual(&self) -> f64 {
        let g = &self.zgrid;
        let mut worst = 0.0f64;
        for (i, mode) in self.basis.modes.iter().enumerate() {
            let col = self.z_values.column(i);
            let z: Vec<f64> = col.to_vec();
            for j in 1..g.cells() {
                let div = g.flux(&z, j) - g.flux(&z, j - 1);
                let dv = 0.5 * (g.nodes[j + 1] - g.nodes[j - 1]);
                let res = div - mode.eigenvalue * z[j] * dv;
                worst = worst.max(res.abs() / (mode.eigenvalue * dv));
            }
        }
        worst
    }
}

/// `gamma_0`: boundary layer of the field.
pub fn trace_dirichlet(u: &LayeredField) -> SpectralField {
    u.layer(0)
}

/// `gamma_lambda = -lim z^a du/dz`, extrapolated per mode in zeta.
pub fn trace_neumann(u: &LayeredField) -> SpectralField {
    let coeffs = (0..u.basis.len())
        .map(|i| {
            let col = u.mode_column(i);
            -u.zgrid.wall_flux(&col)
        })
        .collect();
    SpectralField {
        basis: Arc::clone(&u.basis),
        coeffs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{sobolev_norm, DomainSpec};
    use crate::profile::solve_profile_default;
    use std::f64::consts::PI;

    fn setup(a: f64, n: usize, m: usize) -> ExtensionBasis {
        let profile = solve_profile_default(a).unwrap();
        let basis = Basis::new(DomainSpec::torus(2.0 * PI, 2.0 * PI, n)).unwrap();
        let k_min = basis.modes[0].eigenvalue;
        let z_max = suggest_z_max(&profile, k_min, 1e-8);
        let zgrid = Arc::new(ZGrid::new(a, m, z_max).unwrap());
        build_extension_basis(&zgrid, &basis, &profile).unwrap()
    }

    #[test]
    fn unit_mode_exponential_at_a_zero() {
        let eb = setup(0.0, 4, 256);
        // k = 1 for the first mode on the 2 pi torus: Z(z) = exp(-z).
        assert!((eb.basis.modes[0].eigenvalue - 1.0).abs() < 1e-14);
        for (j, z) in eb.zgrid.nodes.iter().enumerate() {
            assert!(
                (eb.z_values[[j, 0]] - (-z).exp()).abs() < 1e-7,
                "z = {z}"
            );
        }
        assert!((eb.z_values[[0, 0]] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eigenfield_energies_and_orthogonality() {
        for a in [0.0, 0.5] {
            let eb = setup(a, 8, 512);
            let b = trace_exponent(a);
            let fields: Vec<LayeredField> = (0..8)
                .map(|i| {
                    let k = eb.basis.modes[i].eigenvalue;
                    let h = SpectralField::unit(&eb.basis, i).scale(k.powf(-b / 2.0));
                    eb.dirichlet_extend(&h).unwrap()
                })
                .collect();
            for i in 0..8 {
                for j in 0..8 {
                    let ip = semi_inner(&fields[i], &fields[j]);
                    if i == j {
                        let rel = (ip - eb.kappa_ext).abs() / eb.kappa_ext;
                        assert!(rel < 0.01, "a={a} diag {i}: {ip} vs {}", eb.kappa_ext);
                    } else {
                        assert!(ip.abs() < 1e-8, "a={a} off-diag ({i},{j}): {ip}");
                    }
                }
            }
        }
    }

    #[test]
    fn half_laplacian_symbols() {
        let eb = setup(0.0, 16, 1024);
        for i in 0..16 {
            let k = eb.basis.modes[i].eigenvalue;
            let out = eb.dtn_map(&SpectralField::unit(&eb.basis, i)).unwrap();
            for (j, c) in out.coeffs.iter().enumerate() {
                if j == i {
                    let rel = (c - k.sqrt()).abs() / k.sqrt();
                    assert!(rel < 0.005, "mode {i}: {c} vs sqrt {}", k.sqrt());
                } else {
                    assert_eq!(*c, 0.0, "cross-mode leakage");
                }
            }
        }
    }

    #[test]
    fn extension_round_trips() {
        let eb = setup(0.5, 12, 512);
        let h = SpectralField::from_coeffs(
            &eb.basis,
            (0..12).map(|i| ((i as f64) * 0.7).sin()).collect(),
        )
        .unwrap();
        // gamma_0 E2 = identity exactly.
        let u = eb.dirichlet_extend(&h).unwrap();
        for (x, y) in trace_dirichlet(&u).coeffs.iter().zip(&h.coeffs) {
            assert_eq!(x, y);
        }
        // gamma_lambda E1 = identity within 1%.
        let v = eb.neumann_extend(&h).unwrap();
        let tr = trace_neumann(&v);
        for (x, y) in tr.coeffs.iter().zip(&h.coeffs) {
            assert!((x - y).abs() <= 0.01 * y.abs().max(1e-30), "{x} vs {y}");
        }
        // dtn o gamma_0 o E1 recovers the Neumann data within 1%.
        let rt = eb.dtn_map(&trace_dirichlet(&v)).unwrap();
        for (x, y) in rt.coeffs.iter().zip(&h.coeffs) {
            assert!((x - y).abs() <= 0.01 * y.abs().max(1e-30));
        }
        // Linearity of the DtN map, up to rounding in the scaled inputs.
        let d1 = eb.dtn_map(&h).unwrap();
        let d3 = eb.dtn_map(&h.scale(3.0)).unwrap();
        for (x, y) in d1.coeffs.iter().zip(&d3.coeffs) {
            assert!((3.0 * x - y).abs() <= 1e-13 * y.abs());
        }
    }

    #[test]
    fn dirichlet_energy_identity() {
        let eb = setup(0.5, 10, 512);
        let b = trace_exponent(0.5);
        let h = SpectralField::from_coeffs(
            &eb.basis,
            (0..10).map(|i| 1.0 / (1.0 + i as f64)).collect(),
        )
        .unwrap();
        let u = eb.dirichlet_extend(&h).unwrap();
        let energy = semi_inner(&u, &u);
        let target = eb.kappa_ext * sobolev_norm(&h, b).powi(2);
        assert!(
            (energy - target).abs() < 0.01 * target,
            "{energy} vs {target}"
        );
    }

    #[test]
    fn trace_inequality_at_a_zero() {
        // kappa = 1 at a = 0 makes the Dirichlet extension the equality case
        // of the trace inequality; any admissible field sits above it.
        let eb = setup(0.0, 10, 512);
        let b = trace_exponent(0.0);
        let h = SpectralField::from_coeffs(
            &eb.basis,
            (0..10).map(|i| ((3 * i + 1) as f64).cos()).collect(),
        )
        .unwrap();
        let u = eb.dirichlet_extend(&h).unwrap();
        let lhs = sobolev_norm(&trace_dirichlet(&u), b);
        let rhs = semi_norm(&u);
        assert!(lhs <= 1.01 * rhs, "{lhs} vs {rhs}");
    }

    #[test]
    fn discrete_harmonicity() {
        for a in [0.0, 0.5] {
            let eb = setup(a, 8, 512);
            let res = eb.harmonic_residual();
            assert!(res < 5e-3, "a={a}: residual {res}");
        }
    }

    #[test]
    fn rejects_mismatched_exponent() {
        let profile = solve_profile_default(0.3).unwrap();
        let basis = Basis::new(DomainSpec::torus(2.0 * PI, 2.0 * PI, 4)).unwrap();
        let zgrid = Arc::new(ZGrid::new(0.5, 32, 5.0).unwrap());
        assert!(build_extension_basis(&zgrid, &basis, &profile).is_err());
    }
}
