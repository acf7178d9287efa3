//! Canonical-frame cell construction for open-boundary molecules and mesh
//! point generation.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{cell_lengths, det, diagonal_cell, dot, sub, vec_mat, AtomSystem, Mat3, Vec3};

/// Default padding added on both sides of a molecule's bounding box (Å).
pub const DEFAULT_PADDING: f64 = 0.5;

/// Rotation (rows are principal axes, descending eigenvalue) and centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalFrame {
    pub rotation: Mat3,
    pub centroid: Vec3,
    /// Set when two covariance eigenvalues are too close for the axes to be
    /// uniquely defined; rotation invariance is not guaranteed then.
    pub degenerate: bool,
}

impl CanonicalFrame {
    /// Canonical coordinates `(x - μ) Uᵀ`.
    pub fn apply(&self, x: Vec3) -> Vec3 {
        let d = sub(x, self.centroid);
        let u = &self.rotation;
        [dot(d, u[0]), dot(d, u[1]), dot(d, u[2])]
    }
}

fn identity() -> Mat3 {
    diagonal_cell(1.0, 1.0, 1.0)
}

/// Principal-axis frame of a point cloud, with eigenvector signs fixed by the
/// weighted third moment along each axis (weights are atomic numbers).
pub fn canonical_frame(positions: &[Vec3], weights: &[f64]) -> CanonicalFrame {
    assert!(!positions.is_empty(), "canonical_frame needs at least one point");
    assert_eq!(positions.len(), weights.len());
    let n = positions.len() as f64;
    let mut mu = [0.0; 3];
    for p in positions {
        for a in 0..3 {
            mu[a] += p[a];
        }
    }
    for m in &mut mu {
        *m /= n;
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in positions {
        let d = sub(*p, mu);
        for a in 0..3 {
            for b in 0..3 {
                cov[(a, b)] += d[a] * d[b];
            }
        }
    }
    let trace = cov.trace();
    if !(trace > 1e-20) {
        return CanonicalFrame {
            rotation: identity(),
            centroid: mu,
            degenerate: positions.len() > 1,
        };
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let degenerate = (vals[0] - vals[1]).abs() < 1e-6 * trace || (vals[1] - vals[2]).abs() < 1e-6 * trace;

    let mut rotation = [[0.0; 3]; 3];
    for (row, &k) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        let mut u = [col[0], col[1], col[2]];
        let skew: f64 = positions
            .iter()
            .zip(weights)
            .map(|(p, w)| w * dot(sub(*p, mu), u).powi(3))
            .sum();
        let flip = if skew.abs() > 1e-9 {
            skew < 0.0
        } else {
            let big = (0..3)
                .max_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs()))
                .expect("three components");
            u[big] < 0.0
        };
        if flip {
            u = [-u[0], -u[1], -u[2]];
        }
        rotation[row] = u;
    }
    if det(&rotation) < 0.0 {
        rotation[2] = [-rotation[2][0], -rotation[2][1], -rotation[2][2]];
    }
    CanonicalFrame {
        rotation,
        centroid: mu,
        degenerate,
    }
}

/// Cell built around an open-boundary molecule.
#[derive(Clone, Debug)]
pub struct CellConstruction {
    pub cell: Mat3,
    /// The molecule in canonical in-cell coordinates, carrying `cell` with
    /// `pbc` left false.
    pub system: AtomSystem,
    pub frame: CanonicalFrame,
    /// Subtracted from canonical coordinates to land inside the cell.
    pub origin: Vec3,
}

impl CellConstruction {
    /// In-cell coordinates of an arbitrary point given in the original frame.
    pub fn to_cell(&self, x: Vec3) -> Vec3 {
        sub(self.frame.apply(x), self.origin)
    }
}

/// Axis-aligned cell around the canonicalized molecule: per-axis span plus
/// `padding` on both sides, with the molecule shifted so its lower bound
/// sits at `padding`.
pub fn construct_cell(system: &AtomSystem, padding: f64) -> Result<CellConstruction> {
    system.validate()?;
    if system.is_periodic() {
        return Err(Error::InvalidSystem(
            "cell construction applies to non-periodic systems only".into(),
        ));
    }
    if !(padding > 0.0) {
        return Err(Error::InvalidSystem(format!("padding must be positive, got {padding}")));
    }
    let weights: Vec<f64> = system.species.iter().map(|&z| z as f64).collect();
    let frame = canonical_frame(&system.positions, &weights);
    let canon: Vec<Vec3> = system.positions.iter().map(|&x| frame.apply(x)).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &canon {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let origin = [lo[0] - padding, lo[1] - padding, lo[2] - padding];
    let cell = diagonal_cell(
        hi[0] - lo[0] + 2.0 * padding,
        hi[1] - lo[1] + 2.0 * padding,
        hi[2] - lo[2] + 2.0 * padding,
    );
    let positions = canon.iter().map(|&c| sub(c, origin)).collect();
    let moved = AtomSystem::new(
        positions,
        system.species.clone(),
        system.charges.clone(),
        Some(cell),
        [false; 3],
    )?;
    Ok(CellConstruction {
        cell,
        system: moved,
        frame,
        origin,
    })
}

/// Regular grid of cell-centred mesh points.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub counts: [usize; 3],
    /// Row-major over (i, j, k) with k fastest.
    pub points: Vec<Vec3>,
    pub cell: Mat3,
    pub grid_volume: f64,
}

impl Mesh {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn volume(&self) -> f64 {
        det(&self.cell).abs()
    }

    /// Flat index of grid point (i, j, k).
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.counts[1] + j) * self.counts[2] + k
    }
}

pub fn generate_mesh(cell: &Mat3, counts: [usize; 3]) -> Result<Mesh> {
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::InvalidSystem(format!("mesh counts must be positive, got {counts:?}")));
    }
    let volume = det(cell).abs();
    if !(volume > 0.0) {
        return Err(Error::DegenerateCell(det(cell)));
    }
    let total = counts[0] * counts[1] * counts[2];
    let mut points = Vec::with_capacity(total);
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                let frac = [
                    (i as f64 + 0.5) / counts[0] as f64,
                    (j as f64 + 0.5) / counts[1] as f64,
                    (k as f64 + 0.5) / counts[2] as f64,
                ];
                points.push(vec_mat(frac, cell));
            }
        }
    }
    Ok(Mesh {
        counts,
        points,
        cell: *cell,
        grid_volume: volume / total as f64,
    })
}

/// Per-axis mesh counts so that count × cutoff roughly matches the cell length.
pub fn choose_mesh_counts(cell: &Mat3, r_assign: f64) -> [usize; 3] {
    assert!(r_assign > 0.0, "r_assign must be positive");
    let l = cell_lengths(cell);
    l.map(|len| ((len / r_assign).round() as usize).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_mesh_point_of_unit_cube() {
        let m = generate_mesh(&diagonal_cell(1.0, 1.0, 1.0), [2, 2, 2]).unwrap();
        assert_eq!(m.points[0], [0.25, 0.25, 0.25]);
        assert_eq!(m.len(), 8);
    }

    #[test]
    fn single_mesh_point_sits_at_centre() {
        let m = generate_mesh(&diagonal_cell(3.0, 5.0, 7.0), [1, 1, 1]).unwrap();
        assert_eq!(m.points, vec![[1.5, 2.5, 3.5]]);
    }

    #[test]
    fn orthorhombic_mesh_x_coordinates() {
        let m = generate_mesh(&diagonal_cell(12.0, 8.0, 8.0), [3, 2, 2]).unwrap();
        assert_eq!(m.len(), 12);
        let mut xs: Vec<f64> = m.points.iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        assert_eq!(xs, vec![2.0, 6.0, 10.0]);
        assert!((m.grid_volume * 12.0 - 768.0).abs() < 1e-9);
        // k fastest
        assert_eq!(m.points[1], [2.0, 2.0, 6.0]);
    }

    #[test]
    fn mesh_count_heuristic() {
        assert_eq!(choose_mesh_counts(&diagonal_cell(12.0, 12.0, 8.0), 4.0), [3, 3, 2]);
        assert_eq!(choose_mesh_counts(&diagonal_cell(4.0, 4.0, 4.0), 4.0), [1, 1, 1]);
        assert_eq!(choose_mesh_counts(&diagonal_cell(21.0, 17.0, 13.0), 5.0), [4, 3, 3]);
        assert_eq!(choose_mesh_counts(&diagonal_cell(1.0, 1.0, 1.0), 4.0), [1, 1, 1]);
    }

    #[test]
    fn axis_aligned_cloud_has_identity_frame() {
        // spread x > y > z with positive skew on every axis
        let pts = vec![
            [4.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [-2.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -0.5],
            [0.0, 0.0, -0.5],
        ];
        let w = vec![1.0; pts.len()];
        let f = canonical_frame(&pts, &w);
        assert!(!f.degenerate);
        for a in 0..3 {
            for b in 0..3 {
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((f.rotation[a][b] - expected).abs() < 1e-10, "{:?}", f.rotation);
            }
        }
    }

    #[test]
    fn single_atom_frame_is_identity() {
        let f = canonical_frame(&[[1.0, 2.0, 3.0]], &[1.0]);
        assert_eq!(f.rotation, identity());
        assert_eq!(f.centroid, [1.0, 2.0, 3.0]);
        let sys = AtomSystem::molecule(vec![[1.0, 2.0, 3.0]], vec![8], None).unwrap();
        let c = construct_cell(&sys, 0.5).unwrap();
        assert_eq!(c.cell, diagonal_cell(1.0, 1.0, 1.0));
        assert_eq!(c.system.positions[0], [0.5, 0.5, 0.5]);
    }

    #[test]
    fn two_atom_cell_length_is_span_plus_padding() {
        let sys = AtomSystem::molecule(vec![[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]], vec![1, 6], None).unwrap();
        let c = construct_cell(&sys, 0.5).unwrap();
        assert!((c.cell[0][0] - 5.0).abs() < 1e-12);
        assert!((c.cell[1][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn periodic_systems_are_rejected() {
        let sys = AtomSystem::periodic(vec![[0.0; 3]], vec![1], None, diagonal_cell(3.0, 3.0, 3.0)).unwrap();
        assert!(construct_cell(&sys, 0.5).is_err());
    }

    #[test]
    fn construction_is_idempotent() {
        let sys = AtomSystem::molecule(
            vec![[0.1, 0.3, -0.2], [1.4, 0.2, 0.1], [2.0, 1.5, 0.4], [0.3, 2.2, 1.3], [-0.9, 0.4, 0.8]],
            vec![6, 1, 8, 1, 7],
            None,
        )
        .unwrap();
        let first = construct_cell(&sys, 0.5).unwrap();
        let again = construct_cell(
            &AtomSystem::molecule(first.system.positions.clone(), sys.species.clone(), None).unwrap(),
            0.5,
        )
        .unwrap();
        for a in 0..3 {
            assert!((first.cell[a][a] - again.cell[a][a]).abs() < 1e-9);
        }
        for (p, q) in first.system.positions.iter().zip(&again.system.positions) {
            for a in 0..3 {
                assert!((p[a] - q[a]).abs() < 1e-9);
            }
        }
    }
}
