use np3m_core::autodiff::Tape;
use np3m_core::data::{generate_synthetic, split, BoundaryMode};
use np3m_core::ewald::{ewald_components, params_for_beta};
use np3m_core::geometry::{build_radius_graph_with, diagonal_cell, NeighborMethod, NeighborOptions};
use np3m_core::mesh::generate_mesh;
use np3m_core::p3m::assign_charges;
use np3m_core::spectral::{fft3, ifft3};
use np3m_core::xyz::{parse_structure, write_structure};
use np3m_core::{AtomSystem, ChargeAssignment, Model, ModelConfig, SpectralGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

fn periodic(seed: u64, atoms: usize, a: f64) -> AtomSystem {
    generate_synthetic(1, atoms, a, BoundaryMode::Periodic, seed).unwrap()[0].system().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ewald_total_does_not_depend_on_beta(seed in 0u64..1000, beta in 0.7f64..1.3) {
        let sys = periodic(seed, 6, 12.0);
        let a = ewald_components(&sys, &params_for_beta(&sys, 1.0, 1e-14).unwrap()).unwrap().total;
        let b = ewald_components(&sys, &params_for_beta(&sys, beta, 1e-14).unwrap()).unwrap().total;
        prop_assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn ewald_is_periodic_and_conserves_momentum(seed in 0u64..1000, atom in 0usize..6, axis in 0usize..3, k in -2i32..3) {
        let sys = periodic(seed, 6, 9.0);
        let p = params_for_beta(&sys, 0.8, 1e-12).unwrap();
        let base = ewald_components(&sys, &p).unwrap();
        let mut moved = sys.clone();
        moved.positions[atom][axis] += k as f64 * 9.0;
        let e = ewald_components(&moved, &p).unwrap();
        prop_assert!((e.total - base.total).abs() < 1e-10 * base.total.abs().max(1.0));
        for a in 0..3 {
            let net: f64 = base.forces.iter().map(|f| f[a]).sum();
            prop_assert!(net.abs() < 1e-8);
        }
    }

    #[test]
    fn charge_assignment_conserves_charge(
        seed in 0u64..1000,
        order in 1usize..=3,
        nx in 2usize..8, ny in 2usize..8, nz in 2usize..8,
    ) {
        let mut sys = periodic(seed, 6, 7.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sys.charges = Some((0..6).map(|_| rng.random_range(-2.0..2.0)).collect());
        let total: f64 = sys.charges.as_ref().unwrap().iter().sum();
        let mesh = generate_mesh(&sys.cell.unwrap(), [nx, ny, nz]).unwrap();
        let rho = assign_charges(&sys, &mesh, ChargeAssignment::new(order).unwrap()).unwrap();
        let assigned: f64 = rho.values.iter().sum::<f64>() * mesh.grid_volume;
        prop_assert!((assigned - total).abs() < 1e-12);
    }

    #[test]
    fn spectral_roundtrip_and_parseval(nx in 1usize..7, ny in 1usize..7, nz in 1usize..7, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = nx * ny * nz;
        let values: Vec<Complex64> = (0..m).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let x = SpectralGrid::new([nx, ny, nz], values.clone());
        let spectrum = fft3(&x);
        let back = ifft3(&spectrum);
        for (a, b) in back.values.iter().zip(&values) {
            prop_assert!((a - b).norm() < 1e-12);
        }
        let lhs: f64 = values.iter().map(|v| v.norm_sqr()).sum();
        let rhs: f64 = spectrum.values.iter().map(|v| v.norm_sqr()).sum::<f64>() / m as f64;
        prop_assert!((lhs - rhs).abs() < 1e-12 * lhs.max(1.0));
    }

    #[test]
    fn cell_lists_match_pair_scan(seed in 0u64..1000, cutoff in 1.0f64..4.5) {
        let sys = periodic(seed, 40, 9.0);
        let opts = |method| NeighborOptions { multi_image: false, method };
        let a = build_radius_graph_with(&sys, cutoff, opts(NeighborMethod::BruteForce)).unwrap();
        let b = build_radius_graph_with(&sys, cutoff, opts(NeighborMethod::CellList)).unwrap();
        prop_assert_eq!(a.edges.len(), b.edges.len());
        for (x, y) in a.edges.iter().zip(&b.edges) {
            prop_assert_eq!((x.src, x.dst, x.shift), (y.src, y.dst, y.shift));
            prop_assert!((x.distance - y.distance).abs() < 1e-12);
        }
    }

    #[test]
    fn xyz_roundtrip_is_bit_exact(
        coords in prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), 1..12),
        periodic_cell in any::<bool>(),
        charged in any::<bool>(),
    ) {
        let n = coords.len();
        let species = (0..n).map(|i| 1 + (i as u32 * 7) % 36).collect();
        let charges = charged.then(|| (0..n).map(|i| i as f64 / 3.0 - 1.1).collect());
        let sys = if periodic_cell {
            AtomSystem::periodic(coords, species, charges, diagonal_cell(3000.1, 3000.2, 2999.9)).unwrap()
        } else {
            AtomSystem::molecule(coords, species, charges).unwrap()
        };
        let mut buf = vec![];
        write_structure(&mut buf, &sys).unwrap();
        prop_assert_eq!(parse_structure(buf.as_slice()).unwrap(), sys);
    }

    #[test]
    fn splits_partition_the_dataset(n in 0usize..300, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
        let (f0, f1) = (a * 0.9, (1.0 - a * 0.9) * b);
        let (tr, va, te) = split(n, [f0, f1, 1.0 - f0 - f1], seed).unwrap();
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split(n, [f0, f1, 1.0 - f0 - f1], seed).unwrap(), (tr, va, te));
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..5),
    ) {
        let tape = Tape::new();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = tape.constant(flat, &[rows.len(), 6]).unwrap();
        let y = tape.layer_norm(x, tape.constant(vec![1.0; 6], &[6]).unwrap(), tape.constant(vec![0.0; 6], &[6]).unwrap()).unwrap();
        let v = tape.value(y);
        for (r, row) in v.chunks(6).zip(&rows) {
            let var_in = {
                let m = row.iter().sum::<f64>() / 6.0;
                row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 6.0
            };
            let mean = r.iter().sum::<f64>() / 6.0;
            let var = r.iter().map(|x| x * x).sum::<f64>() / 6.0;
            prop_assert!(mean.abs() < 1e-10);
            // ε in the denominator keeps the variance just below one
            prop_assert!((var - var_in / (var_in + 1e-5)).abs() < 1e-9 || row.iter().all(|x| *x == 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_is_permutation_invariant(seed in 0u64..1000, perm_seed in any::<u64>()) {
        let sys = periodic(seed, 8, 9.0);
        let cfg = ModelConfig { hidden_dim: 4, num_rbf: 4, r_short: 3.0, r_assign: 3.0, seed, ..Default::default() };
        let mut model = Model::for_system(cfg, &sys).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for t in model.params.tensors.iter_mut() {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let mut order: Vec<usize> = (0..8).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let mut permuted = sys.clone();
        permuted.positions = order.iter().map(|&i| sys.positions[i]).collect();
        permuted.species = order.iter().map(|&i| sys.species[i]).collect();
        let a = model.predict(&sys).unwrap();
        let b = model.predict(&permuted).unwrap();
        prop_assert!((a.energy - b.energy).abs() < 1e-10 * a.energy.abs().max(1.0));
        for (k, &i) in order.iter().enumerate() {
            for d in 0..3 {
                prop_assert!((b.forces[k][d] - a.forces[i][d]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn open_model_is_translation_invariant(seed in 0u64..1000, shift in prop::array::uniform3(-50.0f64..50.0)) {
        let rec = generate_synthetic(1, 6, 6.0, BoundaryMode::Open, seed).unwrap().remove(0);
        let sys = rec.system().unwrap();
        let cfg = ModelConfig { hidden_dim: 4, num_rbf: 4, seed, ..Default::default() };
        let mut model = Model::for_system(cfg, &sys).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        for t in model.params.tensors.iter_mut() {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let mut moved = sys.clone();
        for p in moved.positions.iter_mut() {
            for d in 0..3 {
                p[d] += shift[d];
            }
        }
        let a = model.predict(&sys).unwrap();
        let b = model.predict(&moved).unwrap();
        prop_assert!((a.energy - b.energy).abs() < 1e-8 * a.energy.abs().max(1.0));
        let net: f64 = (0..3).map(|d| a.forces.iter().map(|f| f[d]).sum::<f64>().abs()).sum();
        prop_assert!(net < 1e-6);
    }
}
