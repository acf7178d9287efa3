//! Mesh-augmented message-passing potential.
//!
//! Atoms carry features `h` and exchange continuous-filter messages within
//! `r_short`; a regular mesh carries features `m` mixed globally by a
//! per-mode spectral convolution; atoms and mesh points exchange messages
//! within `r_assign`. Energy is a sum of per-atom and per-mesh-point terms,
//! forces are its negative position gradient.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{build_assignment_graph, build_radius_graph, shift_vector, AtomSystem, Mat3, Vec3};
use crate::mesh::{choose_mesh_counts, construct_cell, generate_mesh};
use crate::spectral::SpectralBackend;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_rbf: usize,
    pub r_short: f64,
    pub r_assign: f64,
    /// Fixed mesh resolution; `None` picks it from the cell with the
    /// length / r_assign heuristic.
    pub mesh_counts: Option<[usize; 3]>,
    pub padding: f64,
    pub lambda_e: f64,
    pub lambda_f: f64,
    pub seed: u64,
    /// Largest atomic number in the embedding table.
    pub max_z: u32,
    /// False drops the whole mesh branch (short-range-only model).
    pub use_mesh: bool,
    /// Initial mesh features as an envelope-weighted rather than plain mean
    /// of neighbouring atom embeddings.
    pub smooth_mesh_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 16,
            num_layers: 1,
            num_rbf: 16,
            r_short: 4.0,
            r_assign: 4.0,
            mesh_counts: None,
            padding: crate::mesh::DEFAULT_PADDING,
            lambda_e: 1.0,
            lambda_f: 0.0,
            seed: 0,
            max_z: 20,
            use_mesh: true,
            smooth_mesh_init: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.r_short > 0.0 && self.r_assign > 0.0 && self.padding > 0.0;
        if self.hidden_dim == 0 || self.num_layers == 0 || self.num_rbf < 2 || !positive || self.max_z == 0 {
            return Err(Error::Config(format!("invalid model configuration {self:?}")));
        }
        if self.lambda_e < 0.0 || self.lambda_f < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if matches!(self.mesh_counts, Some(c) if c.contains(&0)) {
            return Err(Error::Config("mesh counts must be positive".into()));
        }
        Ok(())
    }

    /// Mesh counts for a cell under this configuration.
    pub fn counts_for(&self, cell: &Mat3) -> [usize; 3] {
        self.mesh_counts.unwrap_or_else(|| choose_mesh_counts(cell, self.r_assign))
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Checkpoint("parameter names and tensors differ in number".into()));
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect::<HashMap<_, _>>();
        if index.len() != names.len() {
            return Err(Error::Checkpoint("duplicate parameter name".into()));
        }
        Ok(ParamStore { names, tensors, index })
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.position(name)?;
        Ok(&mut self.tensors[i])
    }

    fn position(&self, name: &str) -> Result<usize> {
        if self.index.len() != self.names.len() {
            // deserialized store: rebuild lazily is not possible through &self
            return self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")));
        }
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Label standardization: the model predicts (E − mean)/std.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub energy_mean: f64,
    pub energy_std: f64,
}

impl Default for Standardization {
    fn default() -> Self {
        Standardization {
            energy_mean: 0.0,
            energy_std: 1.0,
        }
    }
}

/// Everything about a structure that does not change under small atom
/// displacements: graphs, mesh, and the frame mapping input coordinates to
/// model coordinates. Built once per structure and reused.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub n_atoms: usize,
    pub species_rows: Vec<usize>,
    /// For open-boundary input: rows of the canonical rotation (as a
    /// transposed 3×3 for right-multiplication) and the in-cell origin.
    pub frame: Option<([f64; 9], Vec3)>,
    pub cell: Mat3,
    pub counts: [usize; 3],
    pub short_src: Vec<usize>,
    pub short_dst: Vec<usize>,
    /// shift · cell per short edge, `[E, 3]`.
    pub short_offset: Vec<f64>,
    pub assign_mesh: Vec<usize>,
    pub assign_atom: Vec<usize>,
    /// mesh point + shift · cell per assignment edge, `[E, 3]`.
    pub assign_anchor: Vec<f64>,
    /// 1 / (number of neighbouring atoms) per mesh point, 0 when isolated.
    pub mesh_inv_degree: Vec<f64>,
    pub uncovered_atoms: usize,
}

impl Geometry {
    pub fn num_mesh(&self) -> usize {
        self.counts.iter().product()
    }
}

/// Build graphs, mesh and frame for `system`.
pub fn prepare(system: &AtomSystem, config: &ModelConfig) -> Result<Geometry> {
    system.validate()?;
    let species_rows = system
        .species
        .iter()
        .map(|&z| {
            if z == 0 || z > config.max_z {
                Err(Error::UnknownSpecies(z))
            } else {
                Ok(z as usize - 1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (local, frame) = if system.is_periodic() {
        (system.clone(), None)
    } else {
        let cc = construct_cell(system, config.padding)?;
        let u = cc.frame.rotation;
        // y = (x − μ) Uᵀ − origin, so the right factor is Uᵀ
        let ut = [u[0][0], u[1][0], u[2][0], u[0][1], u[1][1], u[2][1], u[0][2], u[1][2], u[2][2]];
        (cc.system, Some((ut, cc.origin)))
    };
    let cell = local.cell.ok_or_else(|| Error::InvalidSystem("periodic system without a cell".into()))?;
    let counts = config.counts_for(&cell);
    let short = build_radius_graph(&local, config.r_short)?;
    let mut short_offset = Vec::with_capacity(3 * short.len());
    for e in &short.edges {
        short_offset.extend(shift_vector(e.shift, &cell));
    }
    let (mut assign_mesh, mut assign_atom, mut assign_anchor) = (vec![], vec![], vec![]);
    let mut mesh_inv_degree = vec![0.0; counts.iter().product()];
    let mut uncovered_atoms = 0;
    if config.use_mesh {
        let mesh = generate_mesh(&cell, counts)?;
        let bip = build_assignment_graph(&local, &mesh, config.r_assign)?;
        for e in &bip.edges {
            assign_mesh.push(e.mesh);
            assign_atom.push(e.atom);
            let s = shift_vector(e.shift, &cell);
            let p = mesh.points[e.mesh];
            assign_anchor.extend([p[0] + s[0], p[1] + s[1], p[2] + s[2]]);
            mesh_inv_degree[e.mesh] += 1.0;
        }
        mesh_inv_degree.iter_mut().filter(|d| **d > 0.0).for_each(|d| *d = 1.0 / *d);
        uncovered_atoms = bip.uncovered_atoms.len();
    }
    Ok(Geometry {
        n_atoms: system.len(),
        species_rows,
        frame,
        cell,
        counts,
        short_src: short.sources(),
        short_dst: short.targets(),
        short_offset,
        assign_mesh,
        assign_atom,
        assign_anchor,
        mesh_inv_degree,
        uncovered_atoms,
    })
}

/// Parameter handles on a tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.store.position(name)?])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Tape values produced by one forward pass.
pub struct Forward<'a> {
    pub positions: Var,
    pub params: Bound<'a>,
    pub e_short: Var,
    pub e_long: Option<Var>,
    pub energy: Var,
}

/// Per-structure prediction in label units.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub energy: f64,
    pub e_short: f64,
    pub e_long: f64,
    pub forces: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    /// Mesh resolution the spectral weights were built for.
    pub counts: [usize; 3],
    pub params: ParamStore,
    pub standardization: Standardization,
    #[serde(skip)]
    pub backend: SpectralBackend,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    }
}

fn constant(shape: &[usize], v: f64) -> Tensor {
    Tensor {
        shape: shape.to_vec(),
        data: vec![v; shape.iter().product()],
    }
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = uniform(&mut self.rng, &[fan_in, fan_out], bound);
        self.store.push(format!("{name}.w"), w);
        if bias {
            let b = uniform(&mut self.rng, &[fan_out], bound);
            self.store.push(format!("{name}.b"), b);
        }
    }

    fn layer_norm(&mut self, name: &str, width: usize) {
        self.store.push(format!("{name}.gamma"), constant(&[width], 1.0));
        self.store.push(format!("{name}.beta"), constant(&[width], 0.0));
    }

    fn mlp(&mut self, name: &str, width: usize, out: usize, zero_last: bool) {
        self.linear(&format!("{name}.0"), width, width, true);
        if zero_last {
            self.store.push(format!("{name}.1.w"), constant(&[width, out], 0.0));
            self.store.push(format!("{name}.1.b"), constant(&[out], 0.0));
        } else {
            self.linear(&format!("{name}.1"), width, out, true);
        }
    }
}

impl Model {
    /// Fresh model with seeded initialization for a mesh of `counts`.
    pub fn new(config: ModelConfig, counts: [usize; 3]) -> Result<Self> {
        config.validate()?;
        let c = config.hidden_dim;
        let k = config.num_rbf;
        let m: usize = counts.iter().product();
        let mut b = Builder {
            store: ParamStore::new(vec![], vec![])?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let table = uniform(&mut b.rng, &[config.max_z as usize, c], 3f64.sqrt());
        b.store.push("embed.table".into(), table);
        let spectral = Normal::new(0.0, 1.0 / c as f64).expect("finite std");
        for l in 0..config.num_layers {
            let p = format!("blocks.{l}");
            b.layer_norm(&format!("{p}.a2a.ln"), c);
            b.linear(&format!("{p}.a2a.lin"), c, c, true);
            b.linear(&format!("{p}.a2a.filter"), k, c, false);
            b.mlp(&format!("{p}.a2a.mlp"), c, c, false);
            if config.use_mesh {
                b.layer_norm(&format!("{p}.m2m.ln"), c);
                b.linear(&format!("{p}.m2m.local"), c, c, false);
                for part in ["re", "im"] {
                    let data = (0..m * c * c).map(|_| spectral.sample(&mut b.rng)).collect();
                    b.store.push(format!("{p}.m2m.spectral.{part}"), Tensor::new(vec![m, c, c], data)?);
                }
                b.linear(&format!("{p}.a2m.filter"), k, c, false);
                b.mlp(&format!("{p}.a2m.mlp"), c, c, false);
                b.linear(&format!("{p}.m2a.filter"), k, c, false);
                b.mlp(&format!("{p}.m2a.mlp"), c, c, false);
                b.layer_norm(&format!("{p}.update.atom_ln"), c);
                b.layer_norm(&format!("{p}.update.mesh_ln"), c);
            }
        }
        b.layer_norm("decoder.atom.ln", c);
        b.mlp("decoder.atom.mlp", c, 1, true);
        if config.use_mesh {
            b.layer_norm("decoder.mesh.ln", c);
            b.mlp("decoder.mesh.mlp", c, 1, true);
        }
        Ok(Model {
            config,
            counts,
            params: b.store,
            standardization: Standardization::default(),
            backend: SpectralBackend::Fast,
        })
    }

    /// Model sized for the cell of `system`.
    pub fn for_system(config: ModelConfig, system: &AtomSystem) -> Result<Self> {
        let g = prepare(system, &config)?;
        Self::new(config, g.counts)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn geometry(&self, system: &AtomSystem) -> Result<Geometry> {
        let g = prepare(system, &self.config)?;
        self.check_counts(&g)?;
        Ok(g)
    }

    fn check_counts(&self, g: &Geometry) -> Result<()> {
        if self.config.use_mesh && g.counts != self.counts {
            return Err(Error::Config(format!(
                "mesh counts {:?} do not match the model's {:?}",
                g.counts, self.counts
            )));
        }
        Ok(())
    }

    pub fn bind<'a>(&'a self, tape: &Tape, trainable: bool) -> Bound<'a> {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.data.clone(), &t.shape, trainable).expect("consistent tensor"))
            .collect();
        Bound {
            store: &self.params,
            vars,
        }
    }

    /// Record the full model on `tape` for raw input `positions` (the same
    /// coordinates `geometry` was prepared from). Output energy is in
    /// standardized units.
    pub fn forward<'a>(
        &'a self,
        tape: &Tape,
        geometry: &Geometry,
        positions: &[Vec3],
        trainable: bool,
        position_grad: bool,
    ) -> Result<Forward<'a>> {
        self.check_counts(geometry)?;
        if positions.len() != geometry.n_atoms {
            return Err(Error::shape("forward", "positions do not match the prepared geometry"));
        }
        let params = self.bind(tape, trainable);
        let flat: Vec<f64> = positions.iter().flatten().copied().collect();
        let x = tape.leaf(flat, &[geometry.n_atoms, 3], position_grad)?;
        let y = match &geometry.frame {
            None => x,
            Some((ut, origin)) => {
                let mu = tape.mean_axis(x, 0)?;
                let centred = tape.sub(x, mu)?;
                let u = tape.constant(ut.to_vec(), &[3, 3])?;
                let o = tape.constant(origin.to_vec(), &[3])?;
                tape.sub(tape.matmul(centred, u)?, o)?
            }
        };
        let f_short = {
            let off = tape.constant(geometry.short_offset.clone(), &[geometry.short_src.len(), 3])?;
            let d = tape.add(tape.sub(tape.gather_rows(y, &geometry.short_src)?, tape.gather_rows(y, &geometry.short_dst)?)?, off)?;
            self.edge_features(tape, tape.l2norm(d)?, self.config.r_short)?
        };
        let (h0, m0, f_assign) = self.embed(tape, &params, geometry, y)?;
        let mut h = h0;
        let mut m = m0;
        for l in 0..self.config.num_layers {
            let p = format!("blocks.{l}");
            let h_tilde = self.short_range_block(tape, &params, &p, geometry, h, f_short)?;
            if let (Some(mv), Some(fa)) = (m, f_assign) {
                let m_tilde = self.long_range_block(tape, &params, &p, geometry, mv)?;
                let to_mesh = self.atom_to_mesh(tape, &params, &p, geometry, h_tilde, fa)?;
                let to_atom = self.mesh_to_atom(tape, &params, &p, geometry, m_tilde, fa)?;
                let (hn, mn) = self.block_update(tape, &params, &p, [h, h_tilde, to_atom], [mv, m_tilde, to_mesh])?;
                h = hn;
                m = Some(mn);
            } else {
                h = tape.add(h, h_tilde)?;
            }
        }
        let (e_short, e_long, energy) = self.decode(tape, &params, h, m)?;
        Ok(Forward {
            positions: x,
            params,
            e_short,
            e_long,
            energy,
        })
    }

    /// Gaussian radial basis with centres on [0, cutoff] and width equal to
    /// their spacing, times the cosine envelope. `d` is `[E]`.
    pub fn edge_features(&self, tape: &Tape, d: Var, cutoff: f64) -> Result<Var> {
        let k = self.config.num_rbf;
        let e = tape.shape(d)[0];
        let spacing = cutoff / (k - 1) as f64;
        let centres = tape.constant((0..k).map(|i| i as f64 * spacing).collect(), &[k])?;
        let d = tape.reshape(d, &[e, 1])?;
        let z = tape.square(tape.sub(d, centres)?);
        let rbf = tape.exp(tape.scale(z, -0.5 / (spacing * spacing)));
        let env = tape.scale(tape.add_scalar(tape.cos(tape.scale(d, PI / cutoff)), 1.0), 0.5);
        tape.mul(rbf, env)
    }

    /// Initial atom features from the species table, initial mesh features
    /// as the mean over neighbouring atoms, and assignment-edge features.
    pub fn embed(
        &self,
        tape: &Tape,
        params: &Bound,
        g: &Geometry,
        y: Var,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        let h0 = tape.gather_rows(params.var("embed.table")?, &g.species_rows)?;
        if !self.config.use_mesh {
            return Ok((h0, None, None));
        }
        let m = g.num_mesh();
        let e = g.assign_atom.len();
        let anchor = tape.constant(g.assign_anchor.clone(), &[e, 3])?;
        let d = tape.l2norm(tape.sub(anchor, tape.gather_rows(y, &g.assign_atom)?)?)?;
        let neighbours = tape.gather_rows(h0, &g.assign_atom)?;
        let m0 = if self.config.smooth_mesh_init {
            // envelope-weighted mean: continuous as atoms enter or leave r_assign
            let w = tape.reshape(tape.scale(tape.add_scalar(tape.cos(tape.scale(d, PI / self.config.r_assign)), 1.0), 0.5), &[e, 1])?;
            let num = tape.scatter_add_rows(tape.mul(neighbours, w)?, &g.assign_mesh, m)?;
            let den = tape.scatter_add_rows(w, &g.assign_mesh, m)?;
            let guard: Vec<f64> = tape.value(den).iter().map(|v| if *v > 0.0 { 0.0 } else { 1.0 }).collect();
            let den = tape.add(den, tape.constant(guard, &[m, 1])?)?;
            tape.div(num, den)?
        } else {
            let summed = tape.scatter_add_rows(neighbours, &g.assign_mesh, m)?;
            tape.mul(summed, tape.constant(g.mesh_inv_degree.clone(), &[m, 1])?)?
        };
        let f = self.edge_features(tape, d, self.config.r_assign)?;
        Ok((h0, Some(m0), Some(f)))
    }

    fn linear(&self, tape: &Tape, params: &Bound, name: &str, x: Var, bias: bool) -> Result<Var> {
        let y = tape.matmul(x, params.var(&format!("{name}.w"))?)?;
        if bias {
            tape.add(y, params.var(&format!("{name}.b"))?)
        } else {
            Ok(y)
        }
    }

    fn mlp(&self, tape: &Tape, params: &Bound, name: &str, x: Var) -> Result<Var> {
        let hidden = tape.silu(self.linear(tape, params, &format!("{name}.0"), x, true)?);
        self.linear(tape, params, &format!("{name}.1"), hidden, true)
    }

    fn layer_norm(&self, tape: &Tape, params: &Bound, name: &str, x: Var) -> Result<Var> {
        tape.layer_norm(x, params.var(&format!("{name}.gamma"))?, params.var(&format!("{name}.beta"))?)
    }

    /// Continuous-filter convolution over the short-range graph, followed by
    /// an atomwise MLP.
    pub fn short_range_block(&self, tape: &Tape, params: &Bound, p: &str, g: &Geometry, h: Var, f: Var) -> Result<Var> {
        let x = self.layer_norm(tape, params, &format!("{p}.a2a.ln"), h)?;
        let x = self.linear(tape, params, &format!("{p}.a2a.lin"), x, true)?;
        let filter = self.linear(tape, params, &format!("{p}.a2a.filter"), f, false)?;
        let msg = tape.mul(tape.gather_rows(x, &g.short_src)?, filter)?;
        let agg = tape.scatter_add_rows(msg, &g.short_dst, g.n_atoms)?;
        self.mlp(tape, params, &format!("{p}.a2a.mlp"), agg)
    }

    /// Pointwise linear path plus per-mode complex channel mixing in
    /// Fourier space, then silu.
    pub fn long_range_block(&self, tape: &Tape, params: &Bound, p: &str, g: &Geometry, m: Var) -> Result<Var> {
        let c = self.config.hidden_dim;
        let mm = g.num_mesh();
        let x = self.layer_norm(tape, params, &format!("{p}.m2m.ln"), m)?;
        let local = self.linear(tape, params, &format!("{p}.m2m.local"), x, false)?;
        let s = tape.fft3(x, g.counts)?;
        let sr = tape.reshape(tape.select0(s, 0)?, &[mm, 1, c])?;
        let si = tape.reshape(tape.select0(s, 1)?, &[mm, 1, c])?;
        let wr = params.var(&format!("{p}.m2m.spectral.re"))?;
        let wi = params.var(&format!("{p}.m2m.spectral.im"))?;
        if tape.shape(wr)[0] != mm {
            return Err(Error::Config(format!("spectral weights hold {} modes, mesh has {mm}", tape.shape(wr)[0])));
        }
        let or = tape.sub(tape.batch_matmul(sr, wr)?, tape.batch_matmul(si, wi)?)?;
        let oi = tape.add(tape.batch_matmul(sr, wi)?, tape.batch_matmul(si, wr)?)?;
        let mixed = tape.stack0(&[tape.reshape(or, &[mm, c])?, tape.reshape(oi, &[mm, c])?])?;
        let global = tape.ifft3_real(mixed, g.counts)?;
        Ok(tape.silu(tape.add(local, global)?))
    }

    /// Messages from atoms to mesh points over the assignment graph.
    pub fn atom_to_mesh(&self, tape: &Tape, params: &Bound, p: &str, g: &Geometry, h: Var, f: Var) -> Result<Var> {
        let filter = self.linear(tape, params, &format!("{p}.a2m.filter"), f, false)?;
        let msg = tape.mul(tape.gather_rows(h, &g.assign_atom)?, filter)?;
        let agg = tape.scatter_add_rows(msg, &g.assign_mesh, g.num_mesh())?;
        self.mlp(tape, params, &format!("{p}.a2m.mlp"), agg)
    }

    /// Messages from mesh points back to atoms over the same graph.
    pub fn mesh_to_atom(&self, tape: &Tape, params: &Bound, p: &str, g: &Geometry, m: Var, f: Var) -> Result<Var> {
        let filter = self.linear(tape, params, &format!("{p}.m2a.filter"), f, false)?;
        let msg = tape.mul(tape.gather_rows(m, &g.assign_mesh)?, filter)?;
        let agg = tape.scatter_add_rows(msg, &g.assign_atom, g.n_atoms)?;
        self.mlp(tape, params, &format!("{p}.m2a.mlp"), agg)
    }

    /// Residual update: h + h̃ + LN(a←m), m + m̃ + LN(m←a).
    pub fn block_update(&self, tape: &Tape, params: &Bound, p: &str, atom: [Var; 3], mesh: [Var; 3]) -> Result<(Var, Var)> {
        let a = self.layer_norm(tape, params, &format!("{p}.update.atom_ln"), atom[2])?;
        let h = tape.add(tape.add(atom[0], atom[1])?, a)?;
        let b = self.layer_norm(tape, params, &format!("{p}.update.mesh_ln"), mesh[2])?;
        let m = tape.add(tape.add(mesh[0], mesh[1])?, b)?;
        Ok((h, m))
    }

    /// Sum of atomwise and meshwise energies.
    pub fn decode(&self, tape: &Tape, params: &Bound, h: Var, m: Option<Var>) -> Result<(Var, Option<Var>, Var)> {
        let ha = self.layer_norm(tape, params, "decoder.atom.ln", h)?;
        let e_short = tape.sum_all(self.mlp(tape, params, "decoder.atom.mlp", ha)?);
        match m {
            None => Ok((e_short, None, e_short)),
            Some(m) => {
                let hm = self.layer_norm(tape, params, "decoder.mesh.ln", m)?;
                let e_long = tape.sum_all(self.mlp(tape, params, "decoder.mesh.mlp", hm)?);
                Ok((e_short, Some(e_long), tape.add(e_short, e_long)?))
            }
        }
    }

    /// Standardized energy and its position gradient for a prepared structure.
    pub fn energy_and_gradient(&self, geometry: &Geometry, positions: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        let tape = Tape::with_backend(self.backend);
        let fw = self.forward(&tape, geometry, positions, false, true)?;
        let e = tape.item(fw.energy);
        let grads = tape.backward(fw.energy)?;
        Ok((e, rows3(&grads, fw.positions, geometry.n_atoms)))
    }

    /// Energy (label units) and forces for `system`.
    pub fn predict(&self, system: &AtomSystem) -> Result<Prediction> {
        let g = self.geometry(system)?;
        self.predict_prepared(&g, &system.positions)
    }

    pub fn predict_prepared(&self, g: &Geometry, positions: &[Vec3]) -> Result<Prediction> {
        let tape = Tape::with_backend(self.backend);
        let fw = self.forward(&tape, g, positions, false, true)?;
        let s = self.standardization;
        let e_short = tape.item(fw.e_short);
        let e_long = fw.e_long.map(|v| tape.item(v)).unwrap_or(0.0);
        let energy = tape.item(fw.energy);
        let grads = tape.backward(fw.energy)?;
        let forces = rows3(&grads, fw.positions, g.n_atoms)
            .into_iter()
            .map(|r| r.map(|v| -v * s.energy_std))
            .collect();
        Ok(Prediction {
            energy: s.energy_mean + s.energy_std * energy,
            e_short: s.energy_std * e_short,
            e_long: s.energy_std * e_long,
            forces,
        })
    }

    /// Short-range-only configuration whose parameter count is closest to
    /// this model's, found by scanning the hidden width.
    pub fn matched_baseline_config(&self) -> Result<ModelConfig> {
        let target = self.num_parameters() as i64;
        let mut best: Option<(i64, ModelConfig)> = None;
        for width in 1..=4096 {
            let cfg = ModelConfig {
                hidden_dim: width,
                use_mesh: false,
                ..self.config.clone()
            };
            let n = baseline_param_count(&cfg) as i64;
            let gap = (n - target).abs();
            if best.as_ref().is_none_or(|(b, _)| gap < *b) {
                best = Some((gap, cfg));
            }
            if n > target {
                break;
            }
        }
        Ok(best.expect("at least one width tried").1)
    }
}

fn baseline_param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.hidden_dim;
    let k = cfg.num_rbf;
    let mlp = |out: usize| c * c + c + c * out + out;
    let block = 2 * c + c * c + c + k * c + mlp(c);
    cfg.max_z as usize * c + cfg.num_layers * block + 2 * c + mlp(1)
}

fn rows3(grads: &Gradients, v: Var, n: usize) -> Vec<Vec3> {
    let g = grads.get_or_zeros(v, 3 * n);
    g.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// λ_E (E − Ê)² + λ_F / (3N) Σ_i ‖F_i + ∇_i Ê‖².
pub fn loss(energy: f64, forces: &[Vec3], e_hat: f64, grad_e_hat: &[Vec3], lambda_e: f64, lambda_f: f64) -> f64 {
    let de = energy - e_hat;
    let mut fl = 0.0;
    if lambda_f != 0.0 && !forces.is_empty() {
        for (f, g) in forces.iter().zip(grad_e_hat) {
            for a in 0..3 {
                fl += (f[a] + g[a]).powi(2);
            }
        }
        fl *= lambda_f / (3.0 * forces.len() as f64);
    }
    lambda_e * de * de + fl
}
