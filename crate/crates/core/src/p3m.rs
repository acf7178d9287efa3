//! Particle-particle particle-mesh long-range solver: B-spline charge
//! assignment, influence-function convolution by FFT, and forces from the
//! analytic gradient of the assignment weights.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ewald::{reciprocal_bound, self_energy, short_range, EnergyBreakdown, EwaldParams, NEUTRALITY_TOLERANCE};
use crate::geometry::{dot, inverse, vec_mat, AtomSystem, Mat3, Vec3};
use crate::mesh::{generate_mesh, Mesh};
use crate::spectral::{signed_frequency, transform_in_place, SpectralBackend, SpectralGrid};

/// Cardinal B-spline charge assignment of order 1 (nearest grid point),
/// 2 (cloud in cell) or 3 (triangular shaped cloud).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargeAssignment {
    order: usize,
}

impl ChargeAssignment {
    pub const NEAREST: ChargeAssignment = ChargeAssignment { order: 1 };
    pub const CLOUD_IN_CELL: ChargeAssignment = ChargeAssignment { order: 2 };
    pub const TRIANGULAR: ChargeAssignment = ChargeAssignment { order: 3 };

    pub fn new(order: usize) -> Result<Self> {
        if !(1..=3).contains(&order) {
            return Err(Error::Config(format!("assignment order must be 1, 2 or 3, got {order}")));
        }
        Ok(ChargeAssignment { order })
    }

    pub fn order(self) -> usize {
        self.order
    }

    /// First grid index, weights and their derivatives along one axis for a
    /// particle at continuous grid coordinate `u` (mesh node n sits at u = n).
    fn axis_weights(self, u: f64) -> (i64, [f64; 3], [f64; 3]) {
        match self.order {
            1 => (u.round() as i64, [1.0, 0.0, 0.0], [0.0; 3]),
            2 => {
                let base = u.floor();
                let t = u - base;
                (base as i64, [1.0 - t, t, 0.0], [-1.0, 1.0, 0.0])
            }
            _ => {
                let c = u.round();
                let t = u - c;
                (
                    c as i64 - 1,
                    [0.5 * (0.5 - t).powi(2), 0.75 - t * t, 0.5 * (0.5 + t).powi(2)],
                    [-(0.5 - t), -2.0 * t, 0.5 + t],
                )
            }
        }
    }
}

/// Real scalar field on a mesh, row-major with k fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub counts: [usize; 3],
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(counts: [usize; 3]) -> Self {
        GridField {
            counts,
            values: vec![0.0; counts.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Assignment stencil of one particle: `order³` flat mesh indices with their
/// weights and weight gradients (Å⁻¹).
struct Stencil {
    index: Vec<usize>,
    weight: Vec<f64>,
    grad: Vec<Vec3>,
}

fn stencil(x: Vec3, inv: &Mat3, counts: [usize; 3], assignment: ChargeAssignment) -> Stencil {
    let s = vec_mat(x, inv);
    let p = assignment.order();
    let mut base = [0i64; 3];
    let mut w = [[0.0; 3]; 3];
    let mut dw = [[0.0; 3]; 3];
    for a in 0..3 {
        let u = s[a] * counts[a] as f64 - 0.5;
        let (b, wa, da) = assignment.axis_weights(u);
        base[a] = b;
        w[a] = wa;
        // chain rule through u_a = N_a s_a - ½
        dw[a] = da.map(|d| d * counts[a] as f64);
    }
    let n = p * p * p;
    let mut st = Stencil {
        index: Vec::with_capacity(n),
        weight: Vec::with_capacity(n),
        grad: Vec::with_capacity(n),
    };
    for ix in 0..p {
        let i = (base[0] + ix as i64).rem_euclid(counts[0] as i64) as usize;
        for iy in 0..p {
            let j = (base[1] + iy as i64).rem_euclid(counts[1] as i64) as usize;
            for iz in 0..p {
                let k = (base[2] + iz as i64).rem_euclid(counts[2] as i64) as usize;
                st.index.push((i * counts[1] + j) * counts[2] + k);
                st.weight.push(w[0][ix] * w[1][iy] * w[2][iz]);
                // derivative w.r.t. grid coordinates, then to Cartesian via cell⁻¹
                let du = [dw[0][ix] * w[1][iy] * w[2][iz], w[0][ix] * dw[1][iy] * w[2][iz], w[0][ix] * w[1][iy] * dw[2][iz]];
                st.grad.push([
                    du[0] * inv[0][0] + du[1] * inv[0][1] + du[2] * inv[0][2],
                    du[0] * inv[1][0] + du[1] * inv[1][1] + du[2] * inv[1][2],
                    du[0] * inv[2][0] + du[1] * inv[2][1] + du[2] * inv[2][2],
                ]);
            }
        }
    }
    st
}

fn periodic_cell(system: &AtomSystem) -> Result<Mat3> {
    system
        .cell
        .filter(|_| system.is_fully_periodic())
        .ok_or_else(|| Error::InvalidSystem("particle-mesh solvers need a fully periodic system".into()))
}

fn stencils(system: &AtomSystem, mesh: &Mesh, assignment: ChargeAssignment) -> Result<Vec<Stencil>> {
    let inv = inverse(&mesh.cell)?;
    Ok(system
        .positions
        .iter()
        .map(|&x| stencil(x, &inv, mesh.counts, assignment))
        .collect())
}

/// Mesh charge density ρ(r_p) = (1/V_grid) Σ_i q_i W(r_p − r_i), wrapping
/// the assignment support periodically.
pub fn assign_charges(system: &AtomSystem, mesh: &Mesh, assignment: ChargeAssignment) -> Result<GridField> {
    system.validate()?;
    periodic_cell(system)?;
    let q = system.charges()?;
    let mut rho = GridField::zeros(mesh.counts);
    for (st, &qi) in stencils(system, mesh, assignment)?.iter().zip(q) {
        for (&p, &w) in st.index.iter().zip(&st.weight) {
            rho.values[p] += qi * w / mesh.grid_volume;
        }
    }
    Ok(rho)
}

/// Angular reciprocal vector for (signed) mesh frequency `k`.
fn reciprocal_vector(k: [i64; 3], inv: &Mat3) -> Vec3 {
    let mut m = [0.0; 3];
    for (r, row) in inv.iter().enumerate() {
        for a in 0..3 {
            m[r] += 2.0 * PI * row[a] * k[a] as f64;
        }
    }
    m
}

fn green(m2: f64, beta: f64) -> f64 {
    4.0 * PI / m2 * (-m2 / (4.0 * beta * beta)).exp()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.sin() / x
    }
}

fn influence(mesh: &Mesh, beta: f64, deconvolve_order: Option<usize>) -> Result<SpectralGrid> {
    let inv = inverse(&mesh.cell)?;
    let [nx, ny, nz] = mesh.counts;
    let mut values = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let f = [signed_frequency(i, nx), signed_frequency(j, ny), signed_frequency(k, nz)];
                if f == [0, 0, 0] {
                    values.push(Complex64::new(0.0, 0.0));
                    continue;
                }
                let m = reciprocal_vector(f, &inv);
                let mut g = green(dot(m, m), beta);
                if let Some(order) = deconvolve_order {
                    let w: f64 = (0..3)
                        .map(|a| sinc(PI * f[a] as f64 / mesh.counts[a] as f64))
                        .product::<f64>()
                        .powi(order as i32);
                    g /= w * w;
                }
                values.push(Complex64::new(g, 0.0));
            }
        }
    }
    Ok(SpectralGrid::new(mesh.counts, values))
}

/// G̃(m) = g̃(m) γ̃(m) = 4π/|m|² · exp(−|m|²/4β²) on the mesh frequencies,
/// zero at m = 0.
pub fn influence_function(mesh: &Mesh, beta: f64) -> Result<SpectralGrid> {
    influence(mesh, beta, None)
}

/// G̃ divided by the squared transform of the assignment function, which
/// undoes the smoothing applied by assignment and back-interpolation.
pub fn deconvolved_influence_function(mesh: &Mesh, beta: f64, assignment: ChargeAssignment) -> Result<SpectralGrid> {
    influence(mesh, beta, Some(assignment.order()))
}

/// How the mesh energy is corrected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct P3mOptions {
    /// Divide the influence function by the squared assignment transform.
    pub deconvolve: bool,
    /// Replace each particle's mesh self-interaction (which depends on its
    /// position relative to the nodes) with the exact constant.
    pub self_correction: bool,
    /// Remove the spurious net force of the gradient-of-W scheme, sharing it
    /// out in proportion to q². Forces are then no longer the exact gradient
    /// of the mesh energy.
    pub remove_net_force: bool,
    #[serde(skip)]
    pub backend: SpectralBackend,
}

impl Default for P3mOptions {
    fn default() -> Self {
        P3mOptions {
            deconvolve: true,
            self_correction: true,
            remove_net_force: true,
            backend: SpectralBackend::Fast,
        }
    }
}

impl P3mOptions {
    /// Default corrections, but forces are the exact mesh-energy gradient.
    pub fn exact_gradient() -> Self {
        P3mOptions {
            remove_net_force: false,
            ..Self::default()
        }
    }

    /// Bare ½ V_grid Σ ρ (G⋆ρ) with the plain influence function.
    pub fn plain() -> Self {
        P3mOptions {
            deconvolve: false,
            self_correction: false,
            remove_net_force: false,
            backend: SpectralBackend::Fast,
        }
    }
}

/// φ = F⁻¹[G̃ · F[ρ]] (normalized inverse).
pub fn convolve(field: &GridField, influence: &SpectralGrid, backend: SpectralBackend) -> GridField {
    assert_eq!(field.counts, influence.counts);
    let mut buf: Vec<Complex64> = field.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_in_place(&mut buf, field.counts, true, backend);
    for (z, g) in buf.iter_mut().zip(&influence.values) {
        *z *= g;
    }
    transform_in_place(&mut buf, field.counts, false, backend);
    let inv = 1.0 / field.len() as f64;
    GridField {
        counts: field.counts,
        values: buf.iter().map(|z| z.re * inv).collect(),
    }
}

/// Σ_{m≠0} G̃(m) over the full reciprocal lattice (converged to double
/// precision); q²/2V times this is the exact self-interaction contained in
/// the reciprocal-space sum.
fn lattice_green_sum(system: &AtomSystem, cell: &Mat3, beta: f64) -> Result<f64> {
    let kmax = reciprocal_bound(system, beta, 1e-17)? as i64;
    let inv = inverse(cell)?;
    let mut total = 0.0;
    for i in -kmax..=kmax {
        for j in -kmax..=kmax {
            for k in -kmax..=kmax {
                if (i, j, k) == (0, 0, 0) {
                    continue;
                }
                let m = reciprocal_vector([i, j, k], &inv);
                total += green(dot(m, m), beta);
            }
        }
    }
    Ok(total)
}

/// Long-range energy and forces on `mesh` with the default corrections.
pub fn p3m_long_range(
    system: &AtomSystem,
    mesh: &Mesh,
    assignment: ChargeAssignment,
    beta: f64,
) -> Result<(f64, Vec<Vec3>)> {
    p3m_long_range_with(system, mesh, assignment, beta, &P3mOptions::default())
}

pub fn p3m_long_range_with(
    system: &AtomSystem,
    mesh: &Mesh,
    assignment: ChargeAssignment,
    beta: f64,
    options: &P3mOptions,
) -> Result<(f64, Vec<Vec3>)> {
    system.validate()?;
    let cell = periodic_cell(system)?;
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let q = system.charges()?;
    let g = if options.deconvolve {
        deconvolved_influence_function(mesh, beta, assignment)?
    } else {
        influence_function(mesh, beta)?
    };
    let sts = stencils(system, mesh, assignment)?;
    let vg = mesh.grid_volume;
    let mut rho = GridField::zeros(mesh.counts);
    for (st, &qi) in sts.iter().zip(q) {
        for (&p, &w) in st.index.iter().zip(&st.weight) {
            rho.values[p] += qi * w / vg;
        }
    }
    let phi = convolve(&rho, &g, options.backend);
    let mut energy = 0.5 * vg * rho.values.iter().zip(&phi.values).map(|(r, f)| r * f).sum::<f64>();
    // dE/dr_i = q_i Σ_p ∇W_p φ_p
    let mut forces: Vec<Vec3> = sts
        .iter()
        .zip(q)
        .map(|(st, &qi)| {
            let mut f = [0.0; 3];
            for (&p, gw) in st.index.iter().zip(&st.grad) {
                for a in 0..3 {
                    f[a] -= qi * gw[a] * phi.values[p];
                }
            }
            f
        })
        .collect();

    if options.self_correction {
        // real-space kernel K = F⁻¹[G̃]; K is even, so K(p − p') = K(p' − p)
        let mut kernel = g.values.clone();
        transform_in_place(&mut kernel, mesh.counts, false, options.backend);
        let m_total = mesh.len() as f64;
        let kern: Vec<f64> = kernel.iter().map(|z| z.re / m_total).collect();
        let [nx, ny, nz] = mesh.counts;
        let split = |p: usize| (p / (ny * nz), (p / nz) % ny, p % nz);
        let diff = |a: usize, b: usize| {
            let (ai, aj, ak) = split(a);
            let (bi, bj, bk) = split(b);
            (((ai + nx - bi) % nx) * ny + (aj + ny - bj) % ny) * nz + (ak + nz - bk) % nz
        };
        let mut mesh_self = 0.0;
        for (i, (st, &qi)) in sts.iter().zip(q).enumerate() {
            let c = qi * qi / vg;
            let mut e = 0.0;
            let mut grad = [0.0; 3];
            for (a, &pa) in st.index.iter().enumerate() {
                let mut kw = 0.0;
                for (&pb, &wb) in st.index.iter().zip(&st.weight) {
                    kw += kern[diff(pa, pb)] * wb;
                }
                e += st.weight[a] * kw;
                for d in 0..3 {
                    grad[d] += st.grad[a][d] * kw;
                }
            }
            mesh_self += 0.5 * c * e;
            for d in 0..3 {
                forces[i][d] += c * grad[d];
            }
        }
        let volume = crate::geometry::det(&cell).abs();
        let q2: f64 = q.iter().map(|x| x * x).sum();
        energy += q2 / (2.0 * volume) * lattice_green_sum(system, &cell, beta)? - mesh_self;
    }
    if options.remove_net_force {
        let q2: f64 = q.iter().map(|x| x * x).sum();
        if q2 > 0.0 {
            let net = forces.iter().fold([0.0; 3], |acc, f| crate::geometry::add(acc, *f));
            for (f, &qi) in forces.iter_mut().zip(q) {
                for d in 0..3 {
                    f[d] -= qi * qi / q2 * net[d];
                }
            }
        }
    }
    Ok((energy, forces))
}

/// Mesh resolution and assignment used by [`p3m_total`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct P3mSettings {
    pub counts: [usize; 3],
    pub assignment: ChargeAssignment,
    pub options: P3mOptions,
}

impl P3mSettings {
    pub fn new(counts: [usize; 3], assignment: ChargeAssignment) -> Self {
        P3mSettings {
            counts,
            assignment,
            options: P3mOptions::default(),
        }
    }
}

/// Real-space and self terms as in the Ewald sum, long-range term from the mesh.
pub fn p3m_total(system: &AtomSystem, params: &EwaldParams, settings: &P3mSettings) -> Result<EnergyBreakdown> {
    system.validate()?;
    params.validate()?;
    let cell = periodic_cell(system)?;
    let q = system.charges()?;
    let net: f64 = q.iter().sum();
    if net.abs() > NEUTRALITY_TOLERANCE {
        return Err(Error::NetCharge(net));
    }
    let mesh = generate_mesh(&cell, settings.counts)?;
    let (e_short, f_short) = short_range(system, params)?;
    let (e_long, f_long) = p3m_long_range_with(system, &mesh, settings.assignment, params.beta, &settings.options)?;
    let s = params.unit_scale;
    let forces = f_short
        .iter()
        .zip(&f_long)
        .map(|(a, b)| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]])
        .collect();
    Ok(EnergyBreakdown::assemble(e_short, s * e_long, self_energy(q, params), forces))
}

/// ½ V_grid Σ_p Σ_p' ρ(p) K(p − p') ρ(p') with the real-space kernel
/// K(d) = (1/M) Σ_k G̃(k) exp(2πi k·d/N) evaluated mode by mode. Quadratic in
/// the mesh size; the reference for the FFT convolution.
pub fn dense_mesh_energy(rho: &GridField, influence: &SpectralGrid, grid_volume: f64) -> f64 {
    assert_eq!(rho.counts, influence.counts);
    let [nx, ny, nz] = rho.counts;
    let m = rho.len();
    let coords = |p: usize| [p / (ny * nz), (p / nz) % ny, p % nz];
    let mut kernel = vec![0.0; m];
    for (d, kd) in kernel.iter_mut().enumerate() {
        let dc = coords(d);
        let mut acc = 0.0;
        for (k, g) in influence.values.iter().enumerate() {
            let kc = coords(k);
            // reduce the phase index modulo N before converting to an angle
            let phase = (kc[0] * dc[0] % nx) as f64 / nx as f64
                + (kc[1] * dc[1] % ny) as f64 / ny as f64
                + (kc[2] * dc[2] % nz) as f64 / nz as f64;
            let theta = 2.0 * PI * phase;
            acc += g.re * theta.cos() - g.im * theta.sin();
        }
        *kd = acc / m as f64;
    }
    let mut energy = 0.0;
    for p in 0..m {
        if rho.values[p] == 0.0 {
            continue;
        }
        let pc = coords(p);
        for q in 0..m {
            let qc = coords(q);
            let d = (((pc[0] + nx - qc[0]) % nx) * ny + (pc[1] + ny - qc[1]) % ny) * nz + (pc[2] + nz - qc[2]) % nz;
            energy += rho.values[p] * kernel[d] * rho.values[q];
        }
    }
    0.5 * grid_volume * energy
}
