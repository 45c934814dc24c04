//! Orchestration of the coupled regularized system: reconstruct the interior
//! stream function from the potential vorticity, lift the boundary scalar,
//! mollify the velocity, advance both unknowns, and maintain the a-priori
//! bound diagnostics.
//!
//! One step runs the pipeline
//!
//! 1. `Psi_2 = solve_neumann(F)` (vorticity part, zero Neumann trace),
//! 2. `Psi_1 = E_1(theta)` (boundary part, harmonic),
//! 3. `V = mollify(perp_grad(Psi_1 + Psi_2))`,
//! 4. `F <- advect(F, V, dt)`,
//! 5. `theta <- step_theta` with the Ekman source and transport trace of
//!    `Psi_2`,
//!
//! optionally wrapped in a Picard sub-iteration with a contraction-ratio
//! monitor; a diverging step is rejected and retried at half the step size.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{
    perp_gradient, project, Basis, DomainKind, DomainSpec, ModeTable,
    SpectralField,
};
use crate::boundary::{BoundaryForcing, BoundarySolver, BoundaryState};
use crate::elliptic::solve_neumann;
use crate::error::{QgError, Result};
use crate::extension::{
    build_extension_basis, kappa_ext, semi_norm, suggest_z_max, trace_dirichlet, trace_exponent,
    trace_neumann, ExtensionBasis, LayeredField,
};
use crate::profile::solve_profile_default;
use crate::transport::{
    advect, mollify_layers, mollify_velocity, transport_norms, GriddedLayers, Mollifier,
    NormWeight, Provenance, VelocityField,
};
use crate::zgrid::ZGrid;

const SNAPSHOT_MAGIC: &[u8; 4] = b"QGSN";
const SNAPSHOT_VERSION: u32 = 1;

/// CSV column order, fixed; one row per output interval.
pub const DIAGNOSTIC_COLUMNS: &[&str] = &[
    "t",
    "f_l2",
    "f_linf",
    "grad_energy",
    "theta_l2",
    "theta_h_alpha",
    "ledger_residual",
    "layer_mean_drift",
    "trace_margin",
    "neumann_residual",
    "harmonic_residual",
];

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainConfig {
    pub kind: DomainKind,
    pub lx: f64,
    pub ly: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FieldInit {
    Zero,
    /// Sum of basis modes; `decay` sets the vertical factor `exp(-decay z)`
    /// for the interior field and is ignored for boundary data.
    Modes { terms: Vec<ModeTerm> },
    /// Restart from a snapshot written by this driver.
    File { path: PathBuf },
}

impl Default for FieldInit {
    fn default() -> Self {
        FieldInit::Zero
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeTerm {
    pub mode: usize,
    pub amplitude: f64,
    #[serde(default)]
    pub decay: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InitialData {
    #[serde(default)]
    pub f0: FieldInit,
    #[serde(default)]
    pub theta0: FieldInit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PicardConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_picard_iters")]
    pub max_iters: usize,
    #[serde(default = "default_picard_tol")]
    pub tol: f64,
}

fn default_picard_iters() -> usize {
    8
}

fn default_picard_tol() -> f64 {
    1e-10
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig { enabled: false, max_iters: 8, tol: 1e-10 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OutputConfig {
    pub csv: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    /// Snapshot file prefix; `<prefix>_NNNNNN.bin` at each output row.
    pub snapshot_prefix: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// Vertical weight exponent, `a < 1`.
    pub a: f64,
    pub domain: DomainConfig,
    /// Galerkin cutoff: number of retained horizontal eigenfunctions. Also
    /// the mollifier index unless overridden.
    pub n: usize,
    /// Override for the mollifier index (defaults to `n`).
    #[serde(default)]
    pub mollifier_n: Option<f64>,
    /// Number of vertical cells.
    pub m_vertical: usize,
    /// Truncation height; omitted means chosen from the slowest mode's
    /// profile decay.
    #[serde(default)]
    pub z_max: Option<f64>,
    /// Time step; omitted means the CFL/dissipation-scale default.
    #[serde(default)]
    pub dt: Option<f64>,
    pub t_final: f64,
    /// Accepted steps between diagnostics rows.
    #[serde(default = "default_output_interval")]
    pub output_interval: usize,
    #[serde(default)]
    pub initial: InitialData,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_output_interval() -> usize {
    1
}

impl SimConfig {
    pub fn from_path(path: &Path) -> Result<SimConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SimConfig = toml::from_str(&text)
            .map_err(|e| QgError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || self.a >= 1.0 {
            return Err(QgError::Config(format!("a = {} must be < 1", self.a)));
        }
        if self.n == 0 {
            return Err(QgError::Config("n must be positive".into()));
        }
        if self.m_vertical < 4 {
            return Err(QgError::Config("m_vertical must be at least 4".into()));
        }
        if !(self.t_final > 0.0) {
            return Err(QgError::Config("t_final must be positive".into()));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) || dt > self.t_final {
                return Err(QgError::Config(format!(
                    "dt = {dt} must lie in (0, t_final]"
                )));
            }
        }
        if self.output_interval == 0 {
            return Err(QgError::Config("output_interval must be positive".into()));
        }
        Ok(())
    }

    fn domain_spec(&self) -> DomainSpec {
        DomainSpec {
            kind: self.domain.kind,
            lx: self.domain.lx,
            ly: self.domain.ly,
            mode_cutoff: self.n,
        }
    }
}

// ---------------------------------------------------------------------------
// Simulation

/// Immutable per-run machinery: grids, profile, extension basis, transforms.
pub struct Simulation {
    pub cfg: SimConfig,
    pub basis: Arc<Basis>,
    pub table: ModeTable,
    pub zgrid: Arc<ZGrid>,
    pub ext: ExtensionBasis,
    pub bsolver: BoundarySolver,
    pub mollifier: Mollifier,
    pub alpha: f64,
    pub trace_b: f64,
    pub kappa_ext: f64,
}

/// State of the coupled system with the elliptic reconstructions cached
/// consistently with `(F, theta)` at time `t`.
#[derive(Debug, Clone)]
pub struct CoupledState {
    pub t: f64,
    pub f: GriddedLayers,
    pub f_hat: LayeredField,
    pub theta: BoundaryState,
    pub psi1: LayeredField,
    pub psi2: LayeredField,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepReport {
    pub picard_iters: usize,
    pub contraction_ratio: Option<f64>,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Simulation> {
        cfg.validate()?;
        let basis = Basis::new(cfg.domain_spec())?;
        let table = basis.tabulate(&basis.collocation_grid());
        let profile = solve_profile_default(cfg.a)?;
        let k_min = basis.modes[0].eigenvalue;
        let z_max = match cfg.z_max {
            Some(z) if z > 0.0 => z,
            Some(z) => return Err(QgError::Config(format!("z_max = {z} must be positive"))),
            None => suggest_z_max(&profile, k_min, 1e-12),
        };
        let zgrid = Arc::new(ZGrid::new(cfg.a, cfg.m_vertical, z_max)?);
        let ext = build_extension_basis(&zgrid, &basis, &profile)?;
        let bsolver = BoundarySolver::new(&basis, cfg.a)?;
        let mollifier = Mollifier::new(cfg.mollifier_n.unwrap_or(cfg.n as f64))?;
        let ke = kappa_ext(&profile);
        Ok(Simulation {
            alpha: bsolver.alpha,
            trace_b: trace_exponent(cfg.a),
            kappa_ext: ke,
            cfg,
            basis,
            table,
            zgrid,
            ext,
            bsolver,
            mollifier,
        })
    }

    fn build_interior(&self, init: &FieldInit) -> Result<GriddedLayers> {
        let domain = self.basis.domain.clone();
        let mut f = GriddedLayers::zeros(&domain, &self.table.grid, &self.zgrid);
        match init {
            FieldInit::Zero => {}
            FieldInit::Modes { terms } => {
                for term in terms {
                    if term.mode >= self.basis.len() {
                        return Err(QgError::Config(format!(
                            "mode index {} out of range",
                            term.mode
                        )));
                    }
                    let shape = &self.table.values[term.mode];
                    for (layer, &z) in f.layers.iter_mut().zip(&self.zgrid.nodes) {
                        layer.scaled_add(term.amplitude * (-term.decay * z).exp(), shape);
                    }
                }
            }
            FieldInit::File { path } => {
                let snap = read_snapshot(path)?;
                self.check_snapshot(&snap)?;
                f.layers = snap.layers;
            }
        }
        if f.layers.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
            return Err(QgError::Data("non-finite initial vorticity".into()));
        }
        Ok(f)
    }

    fn build_theta(&self, init: &FieldInit) -> Result<SpectralField> {
        match init {
            FieldInit::Zero => Ok(SpectralField::zeros(&self.basis)),
            FieldInit::Modes { terms } => {
                let mut th = SpectralField::zeros(&self.basis);
                for term in terms {
                    if term.mode >= self.basis.len() {
                        return Err(QgError::Config(format!(
                            "mode index {} out of range",
                            term.mode
                        )));
                    }
                    th.coeffs[term.mode] += term.amplitude;
                }
                Ok(th)
            }
            FieldInit::File { path } => {
                let snap = read_snapshot(path)?;
                self.check_snapshot(&snap)?;
                SpectralField::from_coeffs(&self.basis, snap.theta)
            }
        }
    }

    fn check_snapshot(&self, snap: &Snapshot) -> Result<()> {
        let g = &self.table.grid;
        if snap.a != self.cfg.a
            || snap.n as usize != self.basis.len()
            || snap.m as usize != self.zgrid.cells()
            || snap.nx as usize != g.nx
            || snap.ny as usize != g.ny
        {
            return Err(QgError::Config(
                "snapshot geometry does not match the configuration".into(),
            ));
        }
        Ok(())
    }

    /// Max over layers of the absolute layer mean (torus zero-mean monitor).
    pub fn layer_mean_drift(&self, f: &GriddedLayers) -> f64 {
        let area = self.basis.domain.area();
        let cell = f.grid.cell_weight();
        f.layers
            .iter()
            .map(|l| (cell * l.sum() / area).abs())
            .fold(0.0, f64::max)
    }

    /// Mollify initial vorticity, project initial boundary data, cache the
    /// elliptic reconstructions.
    pub fn initialize(&self) -> Result<CoupledState> {
        let f_raw = self.build_interior(&self.cfg.initial.f0)?;
        if self.basis.domain.kind == DomainKind::Torus {
            let drift = self.layer_mean_drift(&f_raw);
            let scale = f_raw.max_abs().max(1.0);
            if drift > 1e-10 * scale {
                return Err(QgError::Config(format!(
                    "torus initial vorticity has nonzero layer mean ({drift:.3e})"
                )));
            }
        }
        let f0 = mollify_layers(&f_raw, &self.mollifier);
        let theta0 = self.build_theta(&self.cfg.initial.theta0)?;
        self.refresh(0.0, f0, self.bsolver.state(theta0, 0.0))
    }

    /// Project the gridded vorticity layer-wise onto the retained modes.
    pub fn project_layers(&self, f: &GriddedLayers) -> Result<LayeredField> {
        let cols: Vec<Vec<f64>> = f
            .layers
            .par_iter()
            .map(|l| project(&self.basis, l, &self.table).map(|s| s.coeffs))
            .collect::<Result<_>>()?;
        let mut out = LayeredField::zeros(&self.zgrid, &self.basis);
        for (j, row) in cols.iter().enumerate() {
            for (i, c) in row.iter().enumerate() {
                out.data[[j, i]] = *c;
            }
        }
        Ok(out)
    }

    /// Rebuild the cached elliptic data for new `(F, theta)`.
    fn refresh(&self, t: f64, f: GriddedLayers, theta: BoundaryState) -> Result<CoupledState> {
        let f_hat = self.project_layers(&f)?;
        let psi2 = solve_neumann(&f_hat)?;
        let psi1 = self.ext.neumann_extend(&theta.theta)?;
        Ok(CoupledState { t, f, f_hat, theta, psi1, psi2 })
    }

    /// Mollified transporting velocity and boundary forcing from the cached
    /// stream functions.
    fn stage_velocity(
        &self,
        psi1: &LayeredField,
        psi2: &LayeredField,
    ) -> Result<(VelocityField, BoundaryForcing)> {
        let psi = psi1.add(psi2);
        let nodes = self.zgrid.nodes.len();
        let uv: Vec<(Array2<f64>, Array2<f64>)> = (0..nodes)
            .into_par_iter()
            .map(|j| perp_gradient(&psi.layer(j), &self.table))
            .collect();
        let (u, v): (Vec<_>, Vec<_>) = uv.into_iter().unzip();
        let raw = VelocityField {
            domain: self.basis.domain.clone(),
            grid: self.table.grid.clone(),
            zgrid: Arc::clone(&self.zgrid),
            u,
            v,
            provenance: Provenance::Raw,
        };
        let vel = mollify_velocity(&raw, &self.mollifier);

        // Ekman source, spectral: trace of lap Psi_2 is -k_i psi_{2,i}(0).
        let f = SpectralField::from_coeffs(
            &self.basis,
            self.basis
                .modes
                .iter()
                .enumerate()
                .map(|(i, m)| -m.eigenvalue * psi2.data[[0, i]])
                .collect(),
        )?;
        let (vu, vv) = perp_gradient(&psi2.layer(0), &self.table);
        Ok((vel, BoundaryForcing { vu, vv, f }))
    }

    fn advance(
        &self,
        state: &CoupledState,
        vel: &VelocityField,
        forcing: &BoundaryForcing,
        dt: f64,
    ) -> Result<(GriddedLayers, BoundaryState)> {
        let mut f_new = advect(&state.f, vel, dt, true)?;
        if self.basis.domain.kind == DomainKind::Torus {
            // Layer means are conserved by the continuous transport but not
            // by the interpolation; project the drift out without leaving
            // the pre-step range (which carries the max principle).
            let count = (f_new.grid.nx * f_new.grid.ny) as f64;
            for (layer, old) in f_new.layers.iter_mut().zip(&state.f.layers) {
                let lo = old.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = old.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for _ in 0..3 {
                    let c = layer.sum() / count;
                    if c == 0.0 {
                        break;
                    }
                    layer.mapv_inplace(|v| (v - c).clamp(lo, hi));
                }
            }
        }
        let th_new = self.bsolver.step_theta(&state.theta, forcing, dt)?;
        Ok((f_new, th_new))
    }

    fn state_distance(&self, fa: &GriddedLayers, fb: &GriddedLayers, ta: &BoundaryState, tb: &BoundaryState) -> f64 {
        let mut diff = fa.clone();
        for (l, o) in diff.layers.iter_mut().zip(&fb.layers) {
            *l -= o;
        }
        transport_norms(&diff, Some(2.0), NormWeight::None)
            + ta.theta.sub(&tb.theta).l2_norm()
    }

    /// One coupled step. With Picard enabled, the pipeline is re-evaluated
    /// at the midpoint average of the previous iterate until the update is
    /// below tolerance; a non-contracting iteration rejects the step.
    pub fn step(&self, state: &CoupledState, dt: f64) -> Result<(CoupledState, StepReport)> {
        let (vel, forcing) = self.stage_velocity(&state.psi1, &state.psi2)?;
        let (f1, th1) = self.advance(state, &vel, &forcing, dt)?;
        let mut cand = self.refresh(state.t + dt, f1, th1)?;
        let mut report = StepReport::default();
        if !self.cfg.picard.enabled {
            return Ok((cand, report));
        }

        let scale = transport_norms(&state.f, Some(2.0), NormWeight::None)
            + state.theta.theta.l2_norm()
            + 1.0;
        let mut prev_diff = f64::INFINITY;
        let mut contracted = false;
        for iter in 1..=self.cfg.picard.max_iters {
            // The stream functions are linear in (F, theta), so the midpoint
            // average of the iterates is the average of the cached fields.
            let psi1_mid = state.psi1.add(&cand.psi1).scale(0.5);
            let psi2_mid = state.psi2.add(&cand.psi2).scale(0.5);
            let (vel_m, forcing_m) = self.stage_velocity(&psi1_mid, &psi2_mid)?;
            let (f_next, th_next) = self.advance(state, &vel_m, &forcing_m, dt)?;
            let diff = self.state_distance(&f_next, &cand.f, &th_next, &cand.theta);
            let ratio = diff / prev_diff;
            if prev_diff.is_finite() {
                report.contraction_ratio = Some(ratio);
                if ratio < 1.0 {
                    contracted = true;
                }
            }
            prev_diff = diff;
            cand = self.refresh(state.t + dt, f_next, th_next)?;
            report.picard_iters = iter;
            if diff <= self.cfg.picard.tol * scale {
                return Ok((cand, report));
            }
        }
        if contracted {
            Ok((cand, report))
        } else {
            Err(QgError::StepSize(format!(
                "picard iteration failed to contract at dt = {dt}"
            )))
        }
    }

    /// Default step from the CFL of the current velocity and the fastest
    /// boundary dissipation scale.
    pub fn default_dt(&self, state: &CoupledState) -> Result<f64> {
        let (vel, _) = self.stage_velocity(&state.psi1, &state.psi2)?;
        let vmax = vel
            .u
            .iter()
            .chain(&vel.v)
            .flat_map(|l| l.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let cell = self.table.grid.hx.min(self.table.grid.hy);
        let k_max = self.basis.modes.last().unwrap().eigenvalue;
        let mut dt = 0.1 * k_max.powf(-self.alpha);
        if vmax > 0.0 {
            dt = dt.min(0.5 * cell / vmax);
        }
        Ok(dt.min(self.cfg.t_final))
    }

    /// One diagnostics row from a consistent state.
    pub fn diagnostics(&self, state: &CoupledState, ledger_residual: f64) -> DiagnosticsRow {
        let psi = state.psi1.add(&state.psi2);
        let grad = semi_norm(&psi);
        let h = trace_dirichlet(&psi);
        let trace_margin =
            grad / self.kappa_ext.sqrt() - crate::basis::sobolev_norm(&h, self.trace_b);
        let neumann_residual =
            crate::basis::sobolev_norm(&trace_neumann(&state.psi2), -self.trace_b);
        DiagnosticsRow {
            t: state.t,
            f_l2: transport_norms(&state.f, Some(2.0), NormWeight::None),
            f_linf: state.f.max_abs(),
            grad_energy: grad,
            theta_l2: state.theta.theta.l2_norm(),
            theta_h_alpha: crate::basis::sobolev_norm(&state.theta.theta, self.alpha),
            ledger_residual,
            layer_mean_drift: self.layer_mean_drift(&state.f),
            trace_margin,
            neumann_residual,
            harmonic_residual: self.harmonic_l2(&state.psi1),
        }
    }

    /// `L^2` norm of the discrete weighted Laplacian of the boundary lift
    /// over interior nodes (a decoupling-consistency monitor).
    pub fn harmonic_l2(&self, psi1: &LayeredField) -> f64 {
        let g = &self.zgrid;
        let mut total = 0.0;
        for (i, mode) in self.basis.modes.iter().enumerate() {
            let col = psi1.mode_column(i);
            for j in 1..g.cells() {
                let dv = 0.5 * (g.nodes[j + 1] - g.nodes[j - 1]);
                let r = (g.flux(&col, j) - g.flux(&col, j - 1)) / dv - mode.eigenvalue * col[j];
                total += dv * r * r;
            }
        }
        total.sqrt()
    }

    /// Ekman source of the current state, for the energy ledger.
    fn forcing_norm_sq(&self, state: &CoupledState) -> f64 {
        self.basis
            .modes
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let f = -m.eigenvalue * state.psi2.data[[0, i]];
                m.eigenvalue.powf(-self.alpha) * f * f
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Run artifacts

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub f_l2: f64,
    pub f_linf: f64,
    pub grad_energy: f64,
    pub theta_l2: f64,
    pub theta_h_alpha: f64,
    pub ledger_residual: f64,
    pub layer_mean_drift: f64,
    pub trace_margin: f64,
    pub neumann_residual: f64,
    pub harmonic_residual: f64,
}

impl DiagnosticsRow {
    fn csv_line(&self) -> String {
        format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.t,
            self.f_l2,
            self.f_linf,
            self.grad_energy,
            self.theta_l2,
            self.theta_h_alpha,
            self.ledger_residual,
            self.layer_mean_drift,
            self.trace_margin,
            self.neumann_residual,
            self.harmonic_residual,
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: SimConfig,
    pub steps: usize,
    pub dt_final: f64,
    pub final_t: f64,
    pub final_f_l2: f64,
    pub final_f_linf: f64,
    pub final_grad_energy: f64,
    pub final_theta_l2: f64,
    /// Worst growth of the interior sup norm over the initial one.
    pub max_linf_violation: f64,
    /// Worst relative growth of the stream-function energy per unit time.
    pub max_grad_growth: f64,
    pub max_layer_mean: f64,
    pub min_ledger_residual: f64,
    pub min_trace_margin: f64,
    pub max_neumann_residual: f64,
    pub max_harmonic_residual: f64,
    pub last_contraction_ratio: Option<f64>,
    pub wall_time_s: f64,
}

pub struct RunResult {
    pub summary: RunSummary,
    pub state: CoupledState,
    pub rows: Vec<DiagnosticsRow>,
}

struct CsvSink {
    writer: Option<BufWriter<File>>,
}

impl CsvSink {
    fn new(path: &Option<PathBuf>) -> Result<CsvSink> {
        let writer = match path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{}", DIAGNOSTIC_COLUMNS.join(","))?;
                Some(w)
            }
            None => None,
        };
        Ok(CsvSink { writer })
    }

    fn row(&mut self, row: &DiagnosticsRow) -> Result<()> {
        if let Some(w) = &mut self.writer {
            writeln!(w, "{}", row.csv_line())?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Advance a configured run to `t_final`, producing diagnostics and
/// artifacts. The CSV is flushed row-by-row so partial output survives an
/// aborted run.
pub fn run(cfg: SimConfig) -> Result<RunResult> {
    let start = Instant::now();
    let sim = Simulation::new(cfg)?;
    let mut state = sim.initialize()?;
    let mut dt = match sim.cfg.dt {
        Some(dt) => dt,
        None => sim.default_dt(&state)?,
    };

    let mut csv = CsvSink::new(&sim.cfg.output.csv)?;
    let mut rows = Vec::new();
    let mut snapshots = 0usize;

    // Running energy-ledger integrals (trapezoid in the accepted steps).
    let theta0_sq = state.theta.theta.l2_norm().powi(2);
    let mut int_diss = 0.0;
    let mut int_input = 0.0;
    let mut prev_diss = crate::basis::sobolev_norm(&state.theta.theta, sim.alpha).powi(2);
    let mut prev_input = sim.forcing_norm_sq(&state);
    let mut ledger_min = f64::INFINITY;

    let f_linf0 = state.f.max_abs();
    let grad0 = semi_norm(&state.psi1.add(&state.psi2));
    let mut max_linf_violation = 0.0f64;
    let mut max_grad_growth = 0.0f64;
    let mut max_layer_mean = 0.0f64;
    let mut min_trace_margin = f64::INFINITY;
    let mut max_neumann = 0.0f64;
    let mut max_harmonic = 0.0f64;
    let mut last_ratio = None;
    let mut prev_grad = grad0;

    let emit = |sim: &Simulation,
                    state: &CoupledState,
                    ledger: f64,
                    csv: &mut CsvSink,
                    rows: &mut Vec<DiagnosticsRow>,
                    snapshots: &mut usize|
     -> Result<DiagnosticsRow> {
        let row = sim.diagnostics(state, ledger);
        csv.row(&row)?;
        if let Some(prefix) = &sim.cfg.output.snapshot_prefix {
            let path = PathBuf::from(format!("{}_{:06}.bin", prefix.display(), snapshots));
            write_snapshot(&path, sim, state)?;
            *snapshots += 1;
        }
        rows.push(row.clone());
        Ok(row)
    };

    let first = emit(&sim, &state, 0.0, &mut csv, &mut rows, &mut snapshots)?;
    min_trace_margin = min_trace_margin.min(first.trace_margin);
    max_neumann = max_neumann.max(first.neumann_residual);
    max_harmonic = max_harmonic.max(first.harmonic_residual);

    let mut steps = 0usize;
    let mut since_output = 0usize;
    while state.t < sim.cfg.t_final - 1e-12 {
        let dt_step = dt.min(sim.cfg.t_final - state.t);
        let mut halvings = 0;
        let (next, report) = loop {
            match sim.step(&state, dt_step / 2f64.powi(halvings)) {
                Ok(out) => break out,
                Err(QgError::StepSize(msg)) => {
                    halvings += 1;
                    if halvings > 20 {
                        return Err(QgError::StepSize(format!(
                            "step at t = {} failed after repeated halving: {msg}",
                            state.t
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        };
        if halvings > 0 {
            // Keep the reduced step for the rest of the run.
            dt = dt_step / 2f64.powi(halvings);
        }
        let dt_used = next.t - state.t;
        steps += 1;
        since_output += 1;
        if let Some(r) = report.contraction_ratio {
            last_ratio = Some(r);
        }

        let diss = crate::basis::sobolev_norm(&next.theta.theta, sim.alpha).powi(2);
        let input = sim.forcing_norm_sq(&next);
        int_diss += 0.5 * dt_used * (prev_diss + diss);
        int_input += 0.5 * dt_used * (prev_input + input);
        prev_diss = diss;
        prev_input = input;
        let slack = theta0_sq + int_input - next.theta.theta.l2_norm().powi(2) - int_diss;
        ledger_min = ledger_min.min(slack);

        max_linf_violation = max_linf_violation.max(next.f.max_abs() - f_linf0);
        let grad = semi_norm(&next.psi1.add(&next.psi2));
        if dt_used > 0.0 {
            max_grad_growth =
                max_grad_growth.max((grad - prev_grad) / grad0.max(1e-300) / dt_used);
        }
        prev_grad = grad;
        max_layer_mean = max_layer_mean.max(sim.layer_mean_drift(&next.f));

        state = next;
        if since_output >= sim.cfg.output_interval || state.t >= sim.cfg.t_final - 1e-12 {
            since_output = 0;
            let row = emit(&sim, &state, ledger_min, &mut csv, &mut rows, &mut snapshots)?;
            min_trace_margin = min_trace_margin.min(row.trace_margin);
            max_neumann = max_neumann.max(row.neumann_residual);
            max_harmonic = max_harmonic.max(row.harmonic_residual);
        }
    }

    let final_row = sim.diagnostics(&state, ledger_min);
    let summary = RunSummary {
        config: sim.cfg.clone(),
        steps,
        dt_final: dt,
        final_t: state.t,
        final_f_l2: final_row.f_l2,
        final_f_linf: final_row.f_linf,
        final_grad_energy: final_row.grad_energy,
        final_theta_l2: final_row.theta_l2,
        max_linf_violation,
        max_grad_growth,
        max_layer_mean,
        min_ledger_residual: if ledger_min.is_finite() { ledger_min } else { 0.0 },
        min_trace_margin,
        max_neumann_residual: max_neumann,
        max_harmonic_residual: max_harmonic,
        last_contraction_ratio: last_ratio,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if let Some(path) = &sim.cfg.output.summary {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &summary)
            .map_err(|e| QgError::Data(format!("summary serialization: {e}")))?;
        w.flush()?;
    }
    Ok(RunResult { summary, state, rows })
}

// ---------------------------------------------------------------------------
// Snapshots

/// Layered-field snapshot: fixed little-endian layout,
/// header = magic "QGSN", version u32, a f64, n u32, m u32, nx u32, ny u32,
/// lx f64, ly f64, z_max f64, t f64; payload = (m+1) x nx x ny vorticity
/// values (node-major, then row-major), then n boundary coefficients.
pub struct Snapshot {
    pub a: f64,
    pub n: u32,
    pub m: u32,
    pub nx: u32,
    pub ny: u32,
    pub lx: f64,
    pub ly: f64,
    pub z_max: f64,
    pub t: f64,
    pub layers: Vec<Array2<f64>>,
    pub theta: Vec<f64>,
}

pub fn write_snapshot(path: &Path, sim: &Simulation, state: &CoupledState) -> Result<()> {
    let g = &sim.table.grid;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
    w.write_f64::<LittleEndian>(sim.cfg.a)?;
    w.write_u32::<LittleEndian>(sim.basis.len() as u32)?;
    w.write_u32::<LittleEndian>(sim.zgrid.cells() as u32)?;
    w.write_u32::<LittleEndian>(g.nx as u32)?;
    w.write_u32::<LittleEndian>(g.ny as u32)?;
    w.write_f64::<LittleEndian>(sim.basis.domain.lx)?;
    w.write_f64::<LittleEndian>(sim.basis.domain.ly)?;
    w.write_f64::<LittleEndian>(sim.zgrid.z_max())?;
    w.write_f64::<LittleEndian>(state.t)?;
    for layer in &state.f.layers {
        for v in layer.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    for c in &state.theta.theta.coeffs {
        w.write_f64::<LittleEndian>(*c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(QgError::Data(format!(
            "{}: not a snapshot file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != SNAPSHOT_VERSION {
        return Err(QgError::Data(format!("unsupported snapshot version {version}")));
    }
    let a = r.read_f64::<LittleEndian>()?;
    let n = r.read_u32::<LittleEndian>()?;
    let m = r.read_u32::<LittleEndian>()?;
    let nx = r.read_u32::<LittleEndian>()?;
    let ny = r.read_u32::<LittleEndian>()?;
    let lx = r.read_f64::<LittleEndian>()?;
    let ly = r.read_f64::<LittleEndian>()?;
    let z_max = r.read_f64::<LittleEndian>()?;
    let t = r.read_f64::<LittleEndian>()?;
    let mut layers = Vec::with_capacity(m as usize + 1);
    for _ in 0..=m {
        let mut layer = Array2::zeros((nx as usize, ny as usize));
        for v in layer.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        layers.push(layer);
    }
    let mut theta = vec![0.0; n as usize];
    for c in theta.iter_mut() {
        *c = r.read_f64::<LittleEndian>()?;
    }
    Ok(Snapshot { a, n, m, nx, ny, lx, ly, z_max, t, layers, theta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn base_config() -> SimConfig {
        SimConfig {
            a: 0.5,
            domain: DomainConfig { kind: DomainKind::Torus, lx: 2.0 * PI, ly: 2.0 * PI },
            n: 8,
            mollifier_n: None,
            m_vertical: 32,
            z_max: None,
            dt: Some(0.05),
            t_final: 0.2,
            output_interval: 1,
            initial: InitialData::default(),
            picard: PicardConfig::default(),
            output: OutputConfig::default(),
        }
    }

    #[test]
    fn zero_data_stays_zero() {
        let sim = Simulation::new(base_config()).unwrap();
        let mut state = sim.initialize().unwrap();
        for _ in 0..4 {
            state = sim.step(&state, 0.05).unwrap().0;
        }
        assert_eq!(state.f.max_abs(), 0.0);
        assert!(state.theta.theta.coeffs.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn boundary_only_run_decays_single_mode() {
        let mut cfg = base_config();
        cfg.initial.theta0 = FieldInit::Modes {
            terms: vec![ModeTerm { mode: 3, amplitude: 1.0, decay: 0.0 }],
        };
        let sim = Simulation::new(cfg).unwrap();
        let mut state = sim.initialize().unwrap();
        let k = sim.basis.modes[3].eigenvalue;
        let dt = 0.05;
        for _ in 0..4 {
            state = sim.step(&state, dt).unwrap().0;
        }
        // Velocity transports nothing, so F stays zero and theta follows the
        // single-mode decay law exactly.
        assert_eq!(state.f.max_abs(), 0.0);
        let exact = (-k.powf(sim.alpha) * 0.2).exp();
        assert!((state.theta.theta.coeffs[3] - exact).abs() < 1e-12);
    }

    #[test]
    fn nonzero_layer_mean_rejected_on_torus() {
        let mut cfg = base_config();
        cfg.initial.f0 = FieldInit::Modes {
            terms: vec![ModeTerm { mode: 0, amplitude: 1.0, decay: 1.0 }],
        };
        let sim = Simulation::new(cfg).unwrap();
        // Bias a layer by hand through a custom interior builder: emulate by
        // constructing the gridded field and checking the guard directly.
        let mut f = sim.build_interior(&sim.cfg.initial.f0).unwrap();
        f.layers[0] += 0.5;
        assert!(sim.layer_mean_drift(&f) > 0.4);
        // The official path with mode data passes the guard.
        assert!(sim.initialize().is_ok());
    }

    #[test]
    fn mollified_initial_data_converges_under_n_refinement() {
        let mut errs = Vec::new();
        for n in [8.0, 16.0, 32.0] {
            let mut cfg = base_config();
            cfg.initial.f0 = FieldInit::Modes {
                terms: vec![ModeTerm { mode: 2, amplitude: 1.0, decay: 1.0 }],
            };
            cfg.mollifier_n = Some(n);
            let sim = Simulation::new(cfg).unwrap();
            let raw = sim.build_interior(&sim.cfg.initial.f0).unwrap();
            let smooth = mollify_layers(&raw, &sim.mollifier);
            let mut diff = raw.clone();
            for (l, o) in diff.layers.iter_mut().zip(&smooth.layers) {
                *l -= o;
            }
            errs.push(transport_norms(&diff, Some(2.0), NormWeight::None));
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config();
        cfg.initial.f0 = FieldInit::Modes {
            terms: vec![ModeTerm { mode: 1, amplitude: 0.3, decay: 2.0 }],
        };
        cfg.initial.theta0 = FieldInit::Modes {
            terms: vec![ModeTerm { mode: 2, amplitude: 0.7, decay: 0.0 }],
        };
        let sim = Simulation::new(cfg).unwrap();
        let state = sim.initialize().unwrap();
        let path = dir.path().join("state.bin");
        write_snapshot(&path, &sim, &state).unwrap();
        let snap = read_snapshot(&path).unwrap();
        assert_eq!(snap.n as usize, sim.basis.len());
        for (a, b) in snap.layers.iter().zip(&state.f.layers) {
            assert_eq!(a, b);
        }
        assert_eq!(snap.theta, state.theta.theta.coeffs);

        // Restarting from the snapshot reproduces the state bit-for-bit.
        let mut cfg2 = base_config();
        cfg2.initial.f0 = FieldInit::File { path: path.clone() };
        cfg2.initial.theta0 = FieldInit::File { path: path.clone() };
        let sim2 = Simulation::new(cfg2).unwrap();
        let f2 = sim2.build_interior(&sim2.cfg.initial.f0).unwrap();
        for (a, b) in f2.layers.iter().zip(&state.f.layers) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn config_parses_from_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
a = 0.5
n = 8
m_vertical = 32
t_final = 0.2
dt = 0.05

[domain]
kind = "torus"
lx = 6.283185307179586
ly = 6.283185307179586

[initial.theta0]
kind = "modes"
terms = [{ mode = 1, amplitude = 0.5 }]

[picard]
enabled = true
max_iters = 6
tol = 1e-9
"#,
        )
        .unwrap();
        let cfg = SimConfig::from_path(&path).unwrap();
        assert_eq!(cfg.n, 8);
        assert!(cfg.picard.enabled);
        assert_eq!(cfg.picard.max_iters, 6);
        match &cfg.initial.theta0 {
            FieldInit::Modes { terms } => assert_eq!(terms.len(), 1),
            other => panic!("unexpected init {other:?}"),
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let run_once = || {
            let mut cfg = base_config();
            cfg.initial.f0 = FieldInit::Modes {
                terms: vec![ModeTerm { mode: 4, amplitude: 0.5, decay: 1.0 }],
            };
            cfg.initial.theta0 = FieldInit::Modes {
                terms: vec![ModeTerm { mode: 1, amplitude: 0.3, decay: 0.0 }],
            };
            run(cfg).unwrap()
        };
        let r1 = run_once();
        let r2 = run_once();
        for (a, b) in r1.rows.iter().zip(&r2.rows) {
            assert_eq!(a.csv_line(), b.csv_line());
        }
    }

    #[test]
    fn picard_contracts_on_small_run() {
        let mut cfg = base_config();
        cfg.picard.enabled = true;
        // Tight tolerance, O(1) data, and crossing wavevectors (so the
        // advection is active) force several sub-iterations and an actual
        // recorded ratio.
        cfg.picard.tol = 1e-14;
        cfg.initial.f0 = FieldInit::Modes {
            terms: vec![ModeTerm { mode: 2, amplitude: 2.0, decay: 1.0 }],
        };
        cfg.initial.theta0 = FieldInit::Modes {
            terms: vec![ModeTerm { mode: 0, amplitude: 1.0, decay: 0.0 }],
        };
        let sim = Simulation::new(cfg).unwrap();
        let state = sim.initialize().unwrap();
        let (_, report) = sim.step(&state, 0.02).unwrap();
        let ratio = report.contraction_ratio.expect("ratio recorded");
        assert!(ratio < 1.0, "contraction ratio {ratio}");
    }

    #[test]
    fn coupled_run_preserves_a_priori_bounds() {
        let mut cfg = base_config();
        cfg.t_final = 0.25;
        cfg.initial.f0 = FieldInit::Modes {
            terms: vec![
                ModeTerm { mode: 2, amplitude: 0.4, decay: 1.0 },
                ModeTerm { mode: 5, amplitude: 0.2, decay: 2.0 },
            ],
        };
        cfg.initial.theta0 = FieldInit::Modes {
            terms: vec![ModeTerm { mode: 1, amplitude: 0.2, decay: 0.0 }],
        };
        let result = run(cfg).unwrap();
        assert!(result.summary.max_linf_violation <= 1e-12);
        assert!(result.summary.max_layer_mean <= 1e-10);
        assert!(result.summary.min_ledger_residual >= -1e-6);
        assert!((result.summary.final_t - 0.25).abs() < 1e-12);
    }
}
