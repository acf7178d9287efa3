//! Atom systems, periodic displacement arithmetic and the two radius graphs
//! consumed by the model (atom-atom and mesh-atom).
//!
//! Cells are stored as three row vectors `[c_x, c_y, c_z]`, so a fractional
//! coordinate `s` maps to Cartesian `r = s · cell`. Image shifts are integer
//! triples `n` and contribute `n · cell` to a displacement.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Systems above this size use cell-list binning for neighbor search.
pub const CELL_LIST_THRESHOLD: usize = 256;

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Inverse of a 3×3 matrix, or `DegenerateCell` when it is (numerically) singular.
pub fn inverse(m: &Mat3) -> Result<Mat3> {
    let d = det(m);
    let scale_ref = norm(m[0]) * norm(m[1]) * norm(m[2]);
    if !(d.abs() > 1e-12 * scale_ref.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateCell(d));
    }
    let c0 = cross(m[1], m[2]);
    let c1 = cross(m[2], m[0]);
    let c2 = cross(m[0], m[1]);
    // columns of the inverse are the cross products divided by det
    Ok([
        [c0[0] / d, c1[0] / d, c2[0] / d],
        [c0[1] / d, c1[1] / d, c2[1] / d],
        [c0[2] / d, c1[2] / d, c2[2] / d],
    ])
}

/// Row vector times matrix: `v · m`.
#[inline]
pub fn vec_mat(v: Vec3, m: &Mat3) -> Vec3 {
    [
        v[0] * m[0][0] + v[1] * m[1][0] + v[2] * m[2][0],
        v[0] * m[0][1] + v[1] * m[1][1] + v[2] * m[2][1],
        v[0] * m[0][2] + v[1] * m[1][2] + v[2] * m[2][2],
    ]
}

#[inline]
pub fn shift_vector(shift: [i32; 3], cell: &Mat3) -> Vec3 {
    vec_mat([shift[0] as f64, shift[1] as f64, shift[2] as f64], cell)
}

/// Distances between opposite faces of the cell.
pub fn cell_heights(cell: &Mat3) -> Vec3 {
    let v = det(cell).abs();
    [
        v / norm(cross(cell[1], cell[2])),
        v / norm(cross(cell[2], cell[0])),
        v / norm(cross(cell[0], cell[1])),
    ]
}

pub fn cell_lengths(cell: &Mat3) -> Vec3 {
    [norm(cell[0]), norm(cell[1]), norm(cell[2])]
}

pub fn diagonal_cell(a: f64, b: f64, c: f64) -> Mat3 {
    [[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]]
}

/// Atom coordinates (Å), atomic numbers, optional point charges (e) and an
/// optional periodic cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomSystem {
    pub positions: Vec<Vec3>,
    pub species: Vec<u32>,
    pub charges: Option<Vec<f64>>,
    pub cell: Option<Mat3>,
    pub pbc: [bool; 3],
}

impl AtomSystem {
    pub fn new(
        positions: Vec<Vec3>,
        species: Vec<u32>,
        charges: Option<Vec<f64>>,
        cell: Option<Mat3>,
        pbc: [bool; 3],
    ) -> Result<Self> {
        let system = AtomSystem {
            positions,
            species,
            charges,
            cell,
            pbc,
        };
        system.validate()?;
        Ok(system)
    }

    /// Open-boundary molecule without a cell.
    pub fn molecule(positions: Vec<Vec3>, species: Vec<u32>, charges: Option<Vec<f64>>) -> Result<Self> {
        Self::new(positions, species, charges, None, [false; 3])
    }

    /// Fully periodic system.
    pub fn periodic(
        positions: Vec<Vec3>,
        species: Vec<u32>,
        charges: Option<Vec<f64>>,
        cell: Mat3,
    ) -> Result<Self> {
        Self::new(positions, species, charges, Some(cell), [true; 3])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::InvalidSystem("system has no atoms".into()));
        }
        if self.species.len() != n {
            return Err(Error::InvalidSystem(format!(
                "{} species for {} atoms",
                self.species.len(),
                n
            )));
        }
        if let Some(&z) = self.species.iter().find(|&&z| z == 0) {
            return Err(Error::UnknownSpecies(z));
        }
        if let Some(q) = &self.charges {
            if q.len() != n {
                return Err(Error::InvalidSystem(format!(
                    "{} charges for {} atoms",
                    q.len(),
                    n
                )));
            }
        }
        if self.positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidSystem("non-finite coordinate".into()));
        }
        if self.pbc.iter().any(|&p| p) {
            let cell = self
                .cell
                .ok_or_else(|| Error::InvalidSystem("periodic axes without a cell".into()))?;
            let d = det(&cell);
            if !(d > 0.0) {
                return Err(Error::DegenerateCell(d));
            }
            inverse(&cell)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_periodic(&self) -> bool {
        self.pbc.iter().any(|&p| p)
    }

    pub fn is_fully_periodic(&self) -> bool {
        self.pbc.iter().all(|&p| p)
    }

    pub fn charges(&self) -> Result<&[f64]> {
        self.charges.as_deref().ok_or(Error::MissingCharges)
    }

    pub fn volume(&self) -> Option<f64> {
        self.cell.map(|c| det(&c).abs())
    }
}

/// Minimum-image displacement `r_i - r_j + shift · cell`, minimizing the norm
/// over integer shifts on the periodic axes.
pub fn minimum_image_displacement(
    r_i: Vec3,
    r_j: Vec3,
    cell: Option<&Mat3>,
    pbc: [bool; 3],
) -> Result<(Vec3, [i32; 3])> {
    let d = sub(r_i, r_j);
    if !pbc.iter().any(|&p| p) {
        return Ok((d, [0; 3]));
    }
    let cell = cell.ok_or_else(|| Error::InvalidSystem("periodic axes without a cell".into()))?;
    let inv = inverse(cell)?;
    let frac = vec_mat(d, &inv);
    let mut base = [0i32; 3];
    for a in 0..3 {
        if pbc[a] {
            base[a] = -(frac[a].round() as i32);
        }
    }
    // rounding in fractional space is exact only for orthogonal cells, so
    // look at the neighbouring shifts as well
    let range = |a: usize| if pbc[a] { -1..=1 } else { 0..=0 };
    let mut best = (f64::INFINITY, d, base);
    for dx in range(0) {
        for dy in range(1) {
            for dz in range(2) {
                let shift = [base[0] + dx, base[1] + dy, base[2] + dz];
                let v = add(d, shift_vector(shift, cell));
                let n2 = dot(v, v);
                if n2 < best.0 - 1e-12 * (1.0 + n2) {
                    best = (n2, v, shift);
                }
            }
        }
    }
    Ok((best.1, best.2))
}

/// Directed atom-atom edge. Its displacement is
/// `x[src] - x[dst] + shift · cell`; messages flow from `src` to `dst`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub shift: [i32; 3],
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadiusGraph {
    pub cutoff: f64,
    pub edges: Vec<Edge>,
}

impl RadiusGraph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.src).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.dst).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NeighborMethod {
    /// Cell lists above [`CELL_LIST_THRESHOLD`] atoms, pair scan otherwise.
    #[default]
    Auto,
    BruteForce,
    CellList,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NeighborOptions {
    /// Allow cutoffs beyond half the smallest cell height; several images of
    /// the same pair may then be connected.
    pub multi_image: bool,
    pub method: NeighborMethod,
}

/// Atom-atom radius graph with the default options (minimum-image bound enforced).
pub fn build_radius_graph(system: &AtomSystem, r_short: f64) -> Result<RadiusGraph> {
    build_radius_graph_with(system, r_short, NeighborOptions::default())
}

pub fn build_radius_graph_with(
    system: &AtomSystem,
    cutoff: f64,
    options: NeighborOptions,
) -> Result<RadiusGraph> {
    system.validate()?;
    if !(cutoff > 0.0) {
        return Err(Error::InvalidSystem(format!("cutoff must be positive, got {cutoff}")));
    }
    let frame = PeriodicFrame::new(system, cutoff, options.multi_image)?;
    let use_cells = match options.method {
        NeighborMethod::Auto => system.len() > CELL_LIST_THRESHOLD,
        NeighborMethod::BruteForce => false,
        NeighborMethod::CellList => true,
    };
    let mut edges = if use_cells {
        cell_list_pairs(system, cutoff, &frame)
    } else {
        brute_force_pairs(system, cutoff, &frame)
    };
    edges.sort_by(|a, b| (a.dst, a.src, a.shift).cmp(&(b.dst, b.src, b.shift)));
    Ok(RadiusGraph { cutoff, edges })
}

/// Image-enumeration data shared by the pair searches.
struct PeriodicFrame {
    cell: Mat3,
    inv: Mat3,
    /// Per-axis number of extra images to scan on each side.
    reach: [i32; 3],
}

impl PeriodicFrame {
    fn new(system: &AtomSystem, cutoff: f64, multi_image: bool) -> Result<Self> {
        if !system.is_periodic() {
            return Ok(PeriodicFrame {
                cell: diagonal_cell(1.0, 1.0, 1.0),
                inv: diagonal_cell(1.0, 1.0, 1.0),
                reach: [0; 3],
            });
        }
        let cell = system.cell.expect("validated");
        let heights = cell_heights(&cell);
        let mut bound = f64::INFINITY;
        let mut reach = [0; 3];
        for a in 0..3 {
            if system.pbc[a] {
                bound = bound.min(0.5 * heights[a]);
                reach[a] = (cutoff / heights[a]).ceil() as i32;
            }
        }
        if !multi_image && cutoff > bound * (1.0 + 1e-12) {
            return Err(Error::CutoffTooLarge { cutoff, bound });
        }
        Ok(PeriodicFrame {
            cell,
            inv: inverse(&cell)?,
            reach,
        })
    }

    fn periodic(&self) -> bool {
        self.reach.iter().any(|&r| r > 0)
    }

    /// Integer translation bringing `r` into the home cell: `r + t · cell` has
    /// fractional coordinates in [0, 1) on periodic axes.
    fn wrap_shift(&self, r: Vec3, pbc: [bool; 3]) -> [i32; 3] {
        if !self.periodic() {
            return [0; 3];
        }
        let f = vec_mat(r, &self.inv);
        let mut t = [0; 3];
        for a in 0..3 {
            if pbc[a] {
                t[a] = -(f[a].floor() as i32);
            }
        }
        t
    }
}

fn brute_force_pairs(system: &AtomSystem, cutoff: f64, frame: &PeriodicFrame) -> Vec<Edge> {
    let n = system.len();
    let wraps: Vec<[i32; 3]> = system
        .positions
        .iter()
        .map(|&r| frame.wrap_shift(r, system.pbc))
        .collect();
    let reach = frame.reach;
    let mut edges = Vec::new();
    for src in 0..n {
        for dst in 0..n {
            let d0 = sub(system.positions[src], system.positions[dst]);
            // after wrapping both atoms, the relevant shifts sit within `reach + 1`
            let base = [
                wraps[src][0] - wraps[dst][0],
                wraps[src][1] - wraps[dst][1],
                wraps[src][2] - wraps[dst][2],
            ];
            let r = |a: usize| if reach[a] > 0 { -(reach[a] + 1)..=(reach[a] + 1) } else { 0..=0 };
            for sx in r(0) {
                for sy in r(1) {
                    for sz in r(2) {
                        let shift = [base[0] + sx, base[1] + sy, base[2] + sz];
                        if src == dst && shift == [0, 0, 0] {
                            continue;
                        }
                        let v = if frame.periodic() {
                            add(d0, shift_vector(shift, &frame.cell))
                        } else {
                            d0
                        };
                        let dist = norm(v);
                        if dist <= cutoff {
                            edges.push(Edge {
                                src,
                                dst,
                                shift,
                                distance: dist,
                            });
                        }
                    }
                }
            }
        }
    }
    edges
}

fn cell_list_pairs(system: &AtomSystem, cutoff: f64, frame: &PeriodicFrame) -> Vec<Edge> {
    let n = system.len();
    let wraps: Vec<[i32; 3]> = system
        .positions
        .iter()
        .map(|&r| frame.wrap_shift(r, system.pbc))
        .collect();
    let wrapped: Vec<Vec3> = system
        .positions
        .iter()
        .zip(&wraps)
        .map(|(&r, &t)| {
            if frame.periodic() {
                add(r, shift_vector(t, &frame.cell))
            } else {
                r
            }
        })
        .collect();

    // image points P(j, s) = w_j - s · cell, so that w_src - P = w_src - w_j + s · cell
    let reach = frame.reach;
    let r = |a: usize| if reach[a] > 0 { -(reach[a] + 1)..=(reach[a] + 1) } else { 0..=0 };
    let mut images: Vec<(usize, [i32; 3], Vec3)> = Vec::new();
    for j in 0..n {
        for sx in r(0) {
            for sy in r(1) {
                for sz in r(2) {
                    let s = [sx, sy, sz];
                    let p = if frame.periodic() {
                        sub(wrapped[j], shift_vector(s, &frame.cell))
                    } else {
                        wrapped[j]
                    };
                    images.push((j, s, p));
                }
            }
        }
    }
    let bin_of = |p: Vec3| -> (i64, i64, i64) {
        (
            (p[0] / cutoff).floor() as i64,
            (p[1] / cutoff).floor() as i64,
            (p[2] / cutoff).floor() as i64,
        )
    };
    let mut bins: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (k, img) in images.iter().enumerate() {
        bins.entry(bin_of(img.2)).or_default().push(k);
    }
    let mut edges = Vec::new();
    for src in 0..n {
        let b = bin_of(wrapped[src]);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(list) = bins.get(&(b.0 + dx, b.1 + dy, b.2 + dz)) else {
                        continue;
                    };
                    for &k in list {
                        let (dst, s, p) = images[k];
                        let shift = [
                            s[0] + wraps[src][0] - wraps[dst][0],
                            s[1] + wraps[src][1] - wraps[dst][1],
                            s[2] + wraps[src][2] - wraps[dst][2],
                        ];
                        if src == dst && shift == [0, 0, 0] {
                            continue;
                        }
                        let dist = norm(sub(wrapped[src], p));
                        if dist <= cutoff {
                            // recompute from raw positions so both searches agree bitwise
                            let v0 = sub(system.positions[src], system.positions[dst]);
                            let v = if frame.periodic() {
                                add(v0, shift_vector(shift, &frame.cell))
                            } else {
                                v0
                            };
                            let distance = norm(v);
                            if distance <= cutoff {
                                edges.push(Edge {
                                    src,
                                    dst,
                                    shift,
                                    distance,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    edges
}

/// Mesh-atom edge. Its displacement is `x^m[mesh] - x^a[atom] + shift · cell`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshEdge {
    pub mesh: usize,
    pub atom: usize,
    pub shift: [i32; 3],
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BipartiteGraph {
    pub cutoff: f64,
    pub edges: Vec<MeshEdge>,
    /// Atoms with no mesh point within the cutoff.
    pub uncovered_atoms: Vec<usize>,
}

impl BipartiteGraph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Mesh-atom bipartite radius graph. For periodic systems every image of an
/// atom within the cutoff is connected, which reduces to the minimum image
/// whenever the cutoff is below half the smallest cell height.
pub fn build_assignment_graph(system: &AtomSystem, mesh: &Mesh, r_assign: f64) -> Result<BipartiteGraph> {
    system.validate()?;
    if !(r_assign > 0.0) {
        return Err(Error::InvalidSystem(format!(
            "assignment cutoff must be positive, got {r_assign}"
        )));
    }
    let frame = PeriodicFrame::new(system, r_assign, true)?;
    let reach = frame.reach;
    let wraps: Vec<[i32; 3]> = system
        .positions
        .iter()
        .map(|&r| frame.wrap_shift(r, system.pbc))
        .collect();
    let r = |a: usize| if reach[a] > 0 { -(reach[a] + 1)..=(reach[a] + 1) } else { 0..=0 };
    let mut edges = Vec::new();
    let mut covered = vec![false; system.len()];
    for (p, &xm) in mesh.points.iter().enumerate() {
        for (j, &xa) in system.positions.iter().enumerate() {
            let d0 = sub(xm, xa);
            for sx in r(0) {
                for sy in r(1) {
                    for sz in r(2) {
                        // mesh points live in the home cell, so offset by the atom's wrap
                        let shift = [sx - wraps[j][0], sy - wraps[j][1], sz - wraps[j][2]];
                        let v = if frame.periodic() {
                            add(d0, shift_vector(shift, &frame.cell))
                        } else {
                            d0
                        };
                        let dist = norm(v);
                        if dist <= r_assign {
                            covered[j] = true;
                            edges.push(MeshEdge {
                                mesh: p,
                                atom: j,
                                shift,
                                distance: dist,
                            });
                        }
                    }
                }
            }
        }
    }
    edges.sort_by(|a, b| (a.mesh, a.atom, a.shift).cmp(&(b.mesh, b.atom, b.shift)));
    edges.dedup_by(|a, b| a.mesh == b.mesh && a.atom == b.atom && a.shift == b.shift);
    let uncovered_atoms: Vec<usize> = covered
        .iter()
        .enumerate()
        .filter(|(_, &c)| !c)
        .map(|(i, _)| i)
        .collect();
    if !uncovered_atoms.is_empty() {
        log::warn!(
            "{} atom(s) have no mesh point within r_assign = {r_assign}: {:?}",
            uncovered_atoms.len(),
            uncovered_atoms
        );
    }
    Ok(BipartiteGraph {
        cutoff: r_assign,
        edges,
        uncovered_atoms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate_mesh;

    fn cubic(a: f64) -> Mat3 {
        diagonal_cell(a, a, a)
    }

    #[test]
    fn open_boundary_displacement_is_plain_difference() {
        let (d, s) = minimum_image_displacement([0.0; 3], [3.0, 0.0, 0.0], None, [false; 3]).unwrap();
        assert_eq!(d, [-3.0, 0.0, 0.0]);
        assert_eq!(s, [0, 0, 0]);
    }

    #[test]
    fn minimum_image_wraps_across_the_boundary() {
        let cell = cubic(10.0);
        let (d, s) =
            minimum_image_displacement([0.5, 5.0, 5.0], [9.5, 5.0, 5.0], Some(&cell), [true; 3]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
        assert_eq!(s, [1, 0, 0]);
    }

    #[test]
    fn coincident_points_have_zero_displacement() {
        let cell = [[4.0, 0.0, 0.0], [1.0, 5.0, 0.0], [0.5, 0.3, 6.0]];
        let (d, s) = minimum_image_displacement([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], Some(&cell), [true; 3]).unwrap();
        assert_eq!(d, [0.0; 3]);
        assert_eq!(s, [0; 3]);
    }

    #[test]
    fn singular_cell_is_rejected() {
        let cell = [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let err = minimum_image_displacement([0.0; 3], [0.5; 3], Some(&cell), [true; 3]).unwrap_err();
        assert!(matches!(err, Error::DegenerateCell(_)));
        assert!(minimum_image_displacement([0.0; 3], [0.5; 3], None, [true, false, false]).is_err());
    }

    #[test]
    fn two_atom_graphs() {
        let near = AtomSystem::molecule(vec![[0.0; 3], [3.0, 0.0, 0.0]], vec![1, 1], None).unwrap();
        assert_eq!(build_radius_graph(&near, 4.0).unwrap().len(), 2);
        let far = AtomSystem::molecule(vec![[0.0; 3], [5.0, 0.0, 0.0]], vec![1, 1], None).unwrap();
        assert_eq!(build_radius_graph(&far, 4.0).unwrap().len(), 0);
    }

    fn rock_salt(a: f64) -> AtomSystem {
        let h = a / 2.0;
        let pos = vec![
            [0.0, 0.0, 0.0],
            [0.0, h, h],
            [h, 0.0, h],
            [h, h, 0.0],
            [h, 0.0, 0.0],
            [0.0, h, 0.0],
            [0.0, 0.0, h],
            [h, h, h],
        ];
        AtomSystem::periodic(pos, vec![11, 11, 11, 11, 17, 17, 17, 17], None, cubic(a)).unwrap()
    }

    #[test]
    fn rock_salt_has_six_neighbours_per_atom() {
        let sys = rock_salt(2.0);
        assert!(matches!(
            build_radius_graph(&sys, 1.1),
            Err(Error::CutoffTooLarge { .. })
        ));
        let opts = NeighborOptions {
            multi_image: true,
            ..Default::default()
        };
        let g = build_radius_graph_with(&sys, 1.1, opts).unwrap();
        assert_eq!(g.len(), 48);
        for i in 0..8 {
            assert_eq!(g.edges.iter().filter(|e| e.dst == i).count(), 6);
        }
        // brute-force oracle over 3³ shifts
        let mut count = 0;
        for i in 0..8 {
            for j in 0..8 {
                for sx in -1..=1 {
                    for sy in -1..=1 {
                        for sz in -1..=1 {
                            if i == j && (sx, sy, sz) == (0, 0, 0) {
                                continue;
                            }
                            let v = add(
                                sub(sys.positions[i], sys.positions[j]),
                                shift_vector([sx, sy, sz], &cubic(2.0)),
                            );
                            if norm(v) <= 1.1 {
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(count, 48);
    }

    #[test]
    fn edges_are_sorted_and_symmetric() {
        let sys = AtomSystem::periodic(
            vec![[0.1, 0.2, 0.3], [2.9, 0.1, 0.2], [1.5, 1.5, 1.5], [0.2, 2.8, 2.7]],
            vec![1; 4],
            None,
            cubic(3.2),
        )
        .unwrap();
        let g = build_radius_graph(&sys, 1.6).unwrap();
        for w in g.edges.windows(2) {
            assert!((w[0].dst, w[0].src, w[0].shift) < (w[1].dst, w[1].src, w[1].shift));
        }
        for e in &g.edges {
            let rev = [-e.shift[0], -e.shift[1], -e.shift[2]];
            assert!(g.edges.iter().any(|f| f.src == e.dst && f.dst == e.src && f.shift == rev));
        }
    }

    #[test]
    fn atom_on_mesh_point_has_zero_distance_edge() {
        let cell = cubic(4.0);
        let mesh = generate_mesh(&cell, [1, 1, 1]).unwrap();
        let sys = AtomSystem::new(vec![[2.0, 2.0, 2.0]], vec![1], None, Some(cell), [false; 3]).unwrap();
        let g = build_assignment_graph(&sys, &mesh, 4.0).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.edges[0].distance, 0.0);
    }

    #[test]
    fn uncovered_atom_is_reported() {
        let cell = cubic(10.0);
        let mesh = generate_mesh(&cell, [1, 1, 1]).unwrap();
        let sys = AtomSystem::new(
            vec![[5.0, 5.0, 5.0], [0.0, 0.0, 0.0]],
            vec![1, 1],
            None,
            Some(cell),
            [false; 3],
        )
        .unwrap();
        let g = build_assignment_graph(&sys, &mesh, 2.0).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.uncovered_atoms, vec![1]);
    }

    #[test]
    fn cube_center_reaches_all_eight_mesh_points() {
        let cell = cubic(1.0);
        let mesh = generate_mesh(&cell, [2, 2, 2]).unwrap();
        let sys = AtomSystem::periodic(vec![[0.5; 3]], vec![1], None, cell).unwrap();
        let g = build_assignment_graph(&sys, &mesh, 0.5).unwrap();
        assert_eq!(g.len(), 8);
        let expected = 3f64.sqrt() / 4.0;
        for e in &g.edges {
            assert!((e.distance - expected).abs() < 1e-12);
        }
    }
}
