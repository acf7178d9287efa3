//! Reference electrostatics: direct pair sums and the Ewald decomposition into
//! real-space, reciprocal-space and self terms, with analytic forces.
//!
//! Units: Å, e, and a Coulomb constant of `unit_scale` (1 by default), so
//! energies come out in e²/Å.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::geometry::{build_radius_graph, cell_heights, dot, inverse, norm, sub, AtomSystem, Vec3};

/// Net charge below which a cell counts as neutral.
pub const NEUTRALITY_TOLERANCE: f64 = 1e-10;

const TWO_OVER_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwaldParams {
    /// Splitting parameter β (Å⁻¹).
    pub beta: f64,
    /// Real-space cutoff (Å).
    pub r_cut: f64,
    /// Reciprocal lattice index bound per axis, ‖k‖∞ ≤ m_max.
    pub m_max: usize,
    /// Coulomb constant multiplying every energy and force.
    pub unit_scale: f64,
}

impl EwaldParams {
    pub fn new(beta: f64, r_cut: f64, m_max: usize) -> Result<Self> {
        let p = EwaldParams {
            beta,
            r_cut,
            m_max,
            unit_scale: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.r_cut > 0.0) || self.m_max == 0 || !(self.unit_scale.is_finite()) {
            return Err(Error::Config(format!("invalid Ewald parameters {self:?}")));
        }
        Ok(())
    }
}

/// Energy terms and forces of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e_short: f64,
    pub e_long: f64,
    pub e_self: f64,
    pub total: f64,
    pub forces: Vec<Vec3>,
}

impl EnergyBreakdown {
    pub(crate) fn assemble(e_short: f64, e_long: f64, e_self: f64, forces: Vec<Vec3>) -> Self {
        EnergyBreakdown {
            e_short,
            e_long,
            e_self,
            total: e_short + e_long + e_self,
            forces,
        }
    }
}

/// Open-boundary Coulomb energy Σ_{i<j} q_i q_j / r_ij and its forces.
pub fn direct_coulomb(system: &AtomSystem) -> Result<(f64, Vec<Vec3>)> {
    system.validate()?;
    if system.is_periodic() {
        return Err(Error::InvalidSystem("direct_coulomb needs an open-boundary system".into()));
    }
    let q = system.charges()?;
    let x = &system.positions;
    let n = x.len();
    let mut energy = 0.0;
    let mut forces = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sub(x[i], x[j]);
            let r = norm(d);
            if r == 0.0 {
                if q[i] != 0.0 && q[j] != 0.0 {
                    return Err(Error::SingularPair(i, j));
                }
                continue;
            }
            let qq = q[i] * q[j];
            energy += qq / r;
            // F_i = q_i q_j d / r³
            let f = qq / (r * r * r);
            for a in 0..3 {
                forces[i][a] += f * d[a];
                forces[j][a] -= f * d[a];
            }
        }
    }
    Ok((energy, forces))
}

/// Image sum ½ Σ_n Σ_i Σ'_j q_i q_j / |r_i - r_j + n·cell| over ‖n‖∞ ≤ `n_shells`,
/// excluding i = j only in the home cell. Positions are used as given
/// (no wrapping), which fixes the summation shape.
pub fn direct_periodic(system: &AtomSystem, n_shells: usize) -> Result<f64> {
    system.validate()?;
    let cell = system
        .cell
        .filter(|_| system.is_fully_periodic())
        .ok_or_else(|| Error::InvalidSystem("direct_periodic needs a fully periodic system".into()))?;
    let q = system.charges()?;
    let net: f64 = q.iter().sum();
    if net.abs() > NEUTRALITY_TOLERANCE {
        log::warn!("direct_periodic on a cell with net charge {net}: the image sum diverges");
    }
    let x = &system.positions;
    let n = x.len();
    let s = n_shells as i32;
    let mut energy = 0.0;
    for nx in -s..=s {
        for ny in -s..=s {
            for nz in -s..=s {
                let t = crate::geometry::shift_vector([nx, ny, nz], &cell);
                let home = nx == 0 && ny == 0 && nz == 0;
                let mut shell = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        if home && i == j {
                            continue;
                        }
                        let r = norm([x[i][0] - x[j][0] + t[0], x[i][1] - x[j][1] + t[1], x[i][2] - x[j][2] + t[2]]);
                        shell += q[i] * q[j] / r;
                    }
                }
                energy += 0.5 * shell;
            }
        }
    }
    Ok(energy)
}

/// Conditionally convergent lattice energy obtained from cube-shell image
/// sums: the surface (dipole) term 2π|D|²/3V of a cubic summation is removed
/// and the shells are Richardson-extrapolated assuming E(n) = E∞ + a/n² + b/n³.
///
/// Matches the Ewald sum (tin-foil boundary) for cubic cells.
pub fn extrapolated_lattice_energy(system: &AtomSystem, shells: [usize; 3]) -> Result<f64> {
    let volume = system
        .volume()
        .ok_or_else(|| Error::InvalidSystem("lattice sums need a cell".into()))?;
    let q = system.charges()?;
    let mut dipole = [0.0; 3];
    for (x, &qi) in system.positions.iter().zip(q) {
        for a in 0..3 {
            dipole[a] += qi * x[a];
        }
    }
    let surface = 2.0 * PI * dot(dipole, dipole) / (3.0 * volume);
    let mut rows = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for (r, &n) in shells.iter().enumerate() {
        let nf = n as f64;
        rows[r] = [1.0, nf.powi(-2), nf.powi(-3)];
        rhs[r] = direct_periodic(system, n)? - surface;
    }
    let inv = inverse(&rows).map_err(|_| Error::Config(format!("shell set {shells:?} is degenerate")))?;
    // first component of rows⁻¹ · rhs
    Ok(inv[0][0] * rhs[0] + inv[0][1] * rhs[1] + inv[0][2] * rhs[2])
}

fn check_neutral(q: &[f64]) -> Result<()> {
    let net: f64 = q.iter().sum();
    if net.abs() > NEUTRALITY_TOLERANCE {
        return Err(Error::NetCharge(net));
    }
    Ok(())
}

/// Real-space term ½ Σ_{(i,j)∈E} q_i q_j erfc(β r)/r over the r_cut radius
/// graph, with forces. Shared with the P3M solver.
pub fn short_range(system: &AtomSystem, params: &EwaldParams) -> Result<(f64, Vec<Vec3>)> {
    let q = system.charges()?;
    let cell = system.cell.ok_or_else(|| Error::InvalidSystem("Ewald sums need a cell".into()))?;
    let graph = build_radius_graph(system, params.r_cut)?;
    let beta = params.beta;
    let mut energy = 0.0;
    let mut forces = vec![[0.0; 3]; system.len()];
    for e in &graph.edges {
        let d = crate::geometry::add(
            sub(system.positions[e.src], system.positions[e.dst]),
            crate::geometry::shift_vector(e.shift, &cell),
        );
        let r = e.distance;
        let qq = q[e.src] * q[e.dst];
        let ec = erfc(beta * r);
        energy += 0.5 * qq * ec / r;
        // du/dr for u = qq erfc(βr)/r
        let du = -qq * (ec / (r * r) + beta * TWO_OVER_SQRT_PI * (-(beta * r).powi(2)).exp() / r);
        let g = 0.5 * du / r;
        for a in 0..3 {
            forces[e.src][a] -= g * d[a];
            forces[e.dst][a] += g * d[a];
        }
    }
    let s = params.unit_scale;
    forces.iter_mut().flatten().for_each(|f| *f *= s);
    Ok((s * energy, forces))
}

/// Self-energy −(β/√π) Σ q_i².
pub fn self_energy(charges: &[f64], params: &EwaldParams) -> f64 {
    let q2: f64 = charges.iter().map(|q| q * q).sum();
    -params.unit_scale * params.beta / PI.sqrt() * q2
}

/// Reciprocal-space term (1/2V) Σ_{m≠0} g̃(m) γ̃(m) |ρ̃(m)|² over ‖k‖∞ ≤ m_max,
/// with forces.
pub fn long_range(system: &AtomSystem, params: &EwaldParams) -> Result<(f64, Vec<Vec3>)> {
    let q = system.charges()?;
    let cell = system.cell.ok_or_else(|| Error::InvalidSystem("Ewald sums need a cell".into()))?;
    let inv = inverse(&cell)?;
    let volume = crate::geometry::det(&cell).abs();
    let n = system.len();
    let kmax = params.m_max as i64;
    let width = (2 * kmax + 1) as usize;
    // fractional coordinates and per-axis phase tables exp(-2πi k s)
    let frac: Vec<Vec3> = system.positions.iter().map(|&x| crate::geometry::vec_mat(x, &inv)).collect();
    let mut phase = vec![[(0.0f64, 0.0f64); 3]; n * width];
    for (j, s) in frac.iter().enumerate() {
        for k in -kmax..=kmax {
            for a in 0..3 {
                let theta = -2.0 * PI * k as f64 * s[a];
                phase[j * width + (k + kmax) as usize][a] = (theta.cos(), theta.sin());
            }
        }
    }
    // reciprocal basis vectors b_a = columns of cell⁻¹
    let b = [
        [inv[0][0], inv[1][0], inv[2][0]],
        [inv[0][1], inv[1][1], inv[2][1]],
        [inv[0][2], inv[1][2], inv[2][2]],
    ];
    let four_beta2 = 4.0 * params.beta * params.beta;
    let mut energy = 0.0;
    let mut forces = vec![[0.0; 3]; n];
    let mut sf = vec![(0.0, 0.0); n];
    for kx in -kmax..=kmax {
        for ky in -kmax..=kmax {
            for kz in -kmax..=kmax {
                // half space: m and -m contribute equally
                if (kx, ky, kz) <= (0, 0, 0) {
                    continue;
                }
                let m = [
                    2.0 * PI * (kx as f64 * b[0][0] + ky as f64 * b[1][0] + kz as f64 * b[2][0]),
                    2.0 * PI * (kx as f64 * b[0][1] + ky as f64 * b[1][1] + kz as f64 * b[2][1]),
                    2.0 * PI * (kx as f64 * b[0][2] + ky as f64 * b[1][2] + kz as f64 * b[2][2]),
                ];
                let m2 = dot(m, m);
                let green = 4.0 * PI / m2 * (-m2 / four_beta2).exp();
                let (mut re, mut im) = (0.0, 0.0);
                for j in 0..n {
                    let base = j * width;
                    let (xr, xi) = phase[base + (kx + kmax) as usize][0];
                    let (yr, yi) = phase[base + (ky + kmax) as usize][1];
                    let (zr, zi) = phase[base + (kz + kmax) as usize][2];
                    let (ar, ai) = (xr * yr - xi * yi, xr * yi + xi * yr);
                    let (cr, ci) = (ar * zr - ai * zi, ar * zi + ai * zr);
                    sf[j] = (cr, ci);
                    re += q[j] * cr;
                    im += q[j] * ci;
                }
                // two half-space copies times 1/2V
                energy += green * (re * re + im * im) / volume;
                for j in 0..n {
                    // Im(conj(ρ̃) S_j)
                    let (cr, ci) = sf[j];
                    let imag = re * ci - im * cr;
                    let g = 2.0 * green * q[j] * imag / volume;
                    for a in 0..3 {
                        forces[j][a] -= g * m[a];
                    }
                }
            }
        }
    }
    let s = params.unit_scale;
    forces.iter_mut().flatten().for_each(|f| *f *= s);
    Ok((s * energy, forces))
}

/// Full Ewald evaluation of a neutral, fully periodic point-charge system.
pub fn ewald_components(system: &AtomSystem, params: &EwaldParams) -> Result<EnergyBreakdown> {
    system.validate()?;
    params.validate()?;
    if !system.is_fully_periodic() {
        return Err(Error::InvalidSystem("Ewald summation needs full periodicity".into()));
    }
    let q = system.charges()?;
    check_neutral(q)?;
    let (e_short, f_short) = short_range(system, params)?;
    let (e_long, f_long) = long_range(system, params)?;
    let e_self = self_energy(q, params);
    let forces = f_short
        .iter()
        .zip(&f_long)
        .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
        .collect();
    Ok(EnergyBreakdown::assemble(e_short, e_long, e_self, forces))
}

/// Smallest p with erfc(p) ≤ tolerance (bisection).
pub fn erfc_inverse_bound(tolerance: f64) -> f64 {
    assert!(tolerance > 0.0 && tolerance < 1.0);
    let (mut lo, mut hi) = (0.0f64, 30.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if erfc(mid) > tolerance {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Reciprocal index bound making γ̃ ≤ `tolerance` along every reciprocal axis.
pub fn reciprocal_bound(system: &AtomSystem, beta: f64, tolerance: f64) -> Result<usize> {
    let cell = system.cell.ok_or_else(|| Error::InvalidSystem("Ewald sums need a cell".into()))?;
    let inv = inverse(&cell)?;
    let m_needed = 2.0 * beta * (-tolerance.ln()).sqrt();
    let mut m_max = 1usize;
    for a in 0..3 {
        let b_len = norm([inv[0][a], inv[1][a], inv[2][a]]);
        let k = (m_needed / (2.0 * PI * b_len)).ceil() as usize;
        m_max = m_max.max(k);
    }
    Ok(m_max)
}

/// Ewald parameters for a target truncation tolerance: r_cut = min(half the
/// smallest cell height, 9 Å), β = p / r_cut with erfc(p) = tolerance, and
/// m_max from the Gaussian factor.
pub fn tune_params(system: &AtomSystem, tolerance: f64) -> Result<EwaldParams> {
    system.validate()?;
    let cell = system.cell.ok_or_else(|| Error::InvalidSystem("Ewald sums need a cell".into()))?;
    check_neutral(system.charges()?)?;
    let h = cell_heights(&cell);
    let r_cut = (0.5 * h[0].min(h[1]).min(h[2])).min(9.0);
    let beta = erfc_inverse_bound(tolerance) / r_cut;
    let m_max = reciprocal_bound(system, beta, tolerance)?;
    EwaldParams::new(beta, r_cut, m_max)
}

/// Parameters for a prescribed β: largest admissible r_cut and the m_max
/// reaching `tolerance` in reciprocal space.
pub fn params_for_beta(system: &AtomSystem, beta: f64, tolerance: f64) -> Result<EwaldParams> {
    let cell = system.cell.ok_or_else(|| Error::InvalidSystem("Ewald sums need a cell".into()))?;
    let h = cell_heights(&cell);
    let r_cut = 0.5 * h[0].min(h[1]).min(h[2]);
    let m_max = reciprocal_bound(system, beta, tolerance)?;
    EwaldParams::new(beta, r_cut, m_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::diagonal_cell;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cell_system(seed: u64, n: usize, a: f64) -> AtomSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..n)
            .map(|_| [rng.random_range(0.0..a), rng.random_range(0.0..a), rng.random_range(0.0..a)])
            .collect();
        let q = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        AtomSystem::periodic(pos, vec![1; n], Some(q), diagonal_cell(a, a, a)).unwrap()
    }

    #[test]
    fn ion_pair_energy_and_force() {
        let sys = AtomSystem::molecule(vec![[0.0; 3], [2.0, 0.0, 0.0]], vec![11, 17], Some(vec![1.0, -1.0])).unwrap();
        let (e, f) = direct_coulomb(&sys).unwrap();
        assert!((e + 0.5).abs() < 1e-15);
        // atom 0 pulled towards +x
        assert!((f[0][0] - 0.25).abs() < 1e-15);
        assert!((f[1][0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn coincident_charges_are_singular() {
        let sys = AtomSystem::molecule(vec![[1.0; 3], [1.0; 3]], vec![1, 1], Some(vec![1.0, 1.0])).unwrap();
        assert!(matches!(direct_coulomb(&sys), Err(Error::SingularPair(0, 1))));
    }

    #[test]
    fn single_charge_self_energy() {
        let p = EwaldParams::new(1.0, 1.0, 1).unwrap();
        assert!((self_energy(&[1.0], &p) + 0.5641895835477563).abs() < 1e-12);
    }

    #[test]
    fn zero_shells_is_the_in_cell_pair_sum() {
        let sys = random_cell_system(5, 6, 7.0);
        let open = AtomSystem::molecule(sys.positions.clone(), sys.species.clone(), sys.charges.clone()).unwrap();
        let (e_open, _) = direct_coulomb(&open).unwrap();
        let e0 = direct_periodic(&sys, 0).unwrap();
        assert!((e_open - e0).abs() < 1e-12);
    }

    #[test]
    fn net_charge_is_rejected() {
        let sys = AtomSystem::periodic(vec![[0.0; 3]], vec![1], Some(vec![1.0]), diagonal_cell(5.0, 5.0, 5.0)).unwrap();
        let p = EwaldParams::new(1.0, 2.0, 3).unwrap();
        assert!(matches!(ewald_components(&sys, &p), Err(Error::NetCharge(_))));
    }

    #[test]
    fn tuned_parameters_for_cubic_cell() {
        let sys = random_cell_system(1, 4, 10.0);
        let p = tune_params(&sys, 1e-6).unwrap();
        assert!((p.r_cut - 5.0).abs() < 1e-12);
        assert!((p.beta - 0.6916).abs() < 2e-4, "beta {}", p.beta);
        assert!((erfc(p.beta * p.r_cut) - 1e-6).abs() < 1e-9);
        let loose = tune_params(&sys, 1e-3).unwrap();
        assert!(loose.m_max <= p.m_max);
    }

    #[test]
    fn tolerance_levels_agree() {
        let sys = random_cell_system(2, 8, 9.0);
        let a = ewald_components(&sys, &tune_params(&sys, 1e-4).unwrap()).unwrap();
        let b = ewald_components(&sys, &tune_params(&sys, 1e-8).unwrap()).unwrap();
        assert!((a.total - b.total).abs() < 1e-4 * b.total.abs());
    }

    #[test]
    fn forces_match_finite_differences() {
        let sys = random_cell_system(9, 8, 8.0);
        let p = tune_params(&sys, 1e-10).unwrap();
        let res = ewald_components(&sys, &p).unwrap();
        let h = 1e-4;
        for i in 0..sys.len() {
            for a in 0..3 {
                let mut plus = sys.clone();
                plus.positions[i][a] += h;
                let mut minus = sys.clone();
                minus.positions[i][a] -= h;
                let ep = ewald_components(&plus, &p).unwrap().total;
                let em = ewald_components(&minus, &p).unwrap().total;
                let fd = -(ep - em) / (2.0 * h);
                let an = res.forces[i][a];
                assert!(
                    (fd - an).abs() <= 1e-5 * an.abs().max(1e-2),
                    "atom {i} axis {a}: fd {fd} analytic {an}"
                );
            }
        }
        let net: Vec3 = res.forces.iter().fold([0.0; 3], |acc, f| crate::geometry::add(acc, *f));
        assert!(norm(net) < 1e-8);
    }

    #[test]
    fn doubling_charges_quadruples_energy() {
        let sys = random_cell_system(4, 6, 8.0);
        let mut doubled = sys.clone();
        doubled.charges = Some(sys.charges.as_ref().unwrap().iter().map(|q| 2.0 * q).collect());
        let p = tune_params(&sys, 1e-8).unwrap();
        let a = ewald_components(&sys, &p).unwrap();
        let b = ewald_components(&doubled, &p).unwrap();
        assert!((b.total - 4.0 * a.total).abs() < 1e-12 * a.total.abs().max(1.0));
        assert_eq!(a.total, a.e_short + a.e_long + a.e_self);
    }
}
