use ddnfl::cert::{data_residual_value, loop_residual_value, substitute_model_quantities, RoaEllipsoid};
use ddnfl::io::{read_matrix_csv, write_matrix_csv};
use ddnfl::linalg::{Mat, Vector};
use ddnfl::nn::NnController;
use ddnfl::plant::{collect, min_experiment_length, Excitation, PlantModel, StateBox};
use ddnfl::sector::{
    loop_transform, preactivation_bounds, stacked_sector_qc, tanh_sector, SectorContext, TransformLinearization,
    TransformedN,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn architecture() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=4, prop::collection::vec(1usize..=5, 1..=3), 1usize..=2).prop_map(|(n_x, hidden, n_u)| {
        let mut s = vec![n_x];
        s.extend(hidden);
        s.push(n_u);
        s
    })
}

fn controller() -> impl Strategy<Value = NnController> {
    (architecture(), any::<u64>(), 0.2f64..3.0).prop_map(|(sizes, seed, scale)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NnController::init_with(&sizes, &mut rng, scale).unwrap()
    })
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn block_matrix_round_trip(nn in controller()) {
        let n = nn.assemble_n();
        let back = NnController::from_block_matrix(&n, nn.layer_sizes()).unwrap();
        prop_assert_eq!(back, nn);
    }

    #[test]
    fn ibp_bounds_contain_preactivations(nn in controller(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let radii: Vec<f64> = (0..nn.n_x()).map(|_| rng.random_range(0.1..4.0)).collect();
        let bx = StateBox::symmetric(&radii).unwrap();
        let (lo, hi) = preactivation_bounds(&nn, &bx).unwrap();
        for _ in 0..50 {
            let f = nn.forward(&bx.sample(&mut rng)).unwrap();
            for j in 0..nn.n_phi() {
                prop_assert!(lo[j] - 1e-12 <= f.nu[j] && f.nu[j] <= hi[j] + 1e-12);
            }
        }
    }

    #[test]
    fn tanh_sector_holds_on_its_interval(lo in -6.0f64..0.0, hi in 0.0f64..6.0, t in 0.0f64..1.0) {
        let (a, b) = tanh_sector(lo, hi).unwrap();
        prop_assert!(0.0 < a && a <= b);
        let v = lo + t * (hi - lo);
        let w = v.tanh();
        prop_assert!(a * v * v <= w * v + 1e-12 && w * v <= b * v * v + 1e-12);
    }

    #[test]
    fn sector_qc_is_nonnegative_on_the_graph(nn in controller(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = StateBox::symmetric(&vec![1.5; nn.n_x()]).unwrap();
        let ctx = SectorContext::for_controller(&nn, &bx).unwrap();
        let k = nn.n_phi();
        let lam = Vector::from_fn(k, |_, _| rng.random_range(0.0..2.0));
        let m = stacked_sector_qc(&ctx, &lam).unwrap();
        let f = nn.forward(&bx.sample(&mut rng)).unwrap();
        let mut v = Vector::zeros(2 * k);
        v.rows_mut(0, k).copy_from(&f.nu);
        v.rows_mut(k, k).copy_from(&f.omega);
        prop_assert!((v.transpose() * m * &v)[(0, 0)] >= -1e-10);
    }

    #[test]
    fn normalized_outputs_stay_in_unit_sector(nn in controller(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = StateBox::symmetric(&vec![1.0; nn.n_x()]).unwrap();
        let ctx = SectorContext::for_controller(&nn, &bx).unwrap();
        let f = nn.forward(&bx.sample(&mut rng)).unwrap();
        let z = ctx.normalized_output(&f.nu, &f.omega);
        for j in 0..z.len() {
            prop_assert!(z[j].abs() <= f.nu[j].abs() * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn linearization_adjoint_identity(nn in controller(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = StateBox::symmetric(&vec![1.0; nn.n_x()]).unwrap();
        let ctx = SectorContext::for_controller(&nn, &bx).unwrap();
        let n = nn.assemble_n();
        let lin = TransformLinearization::new(&n, &ctx).unwrap();
        let dn = nn.with_weights(
            nn.weights().iter().map(|w| random_mat(&mut rng, w.nrows(), w.ncols())).collect(),
        ).unwrap().assemble_n();
        let (n_u, n_x, k) = (nn.n_u(), nn.n_x(), nn.n_phi());
        let g = TransformedN::from_dense(&random_mat(&mut rng, n_u + k, n_x + k), n_u, n_x).unwrap();
        let lhs = lin.tangent(&dn).to_dense().dot(&g.to_dense());
        let rhs = dn.to_dense().dot(&lin.adjoint(&g).to_dense());
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        prop_assert_eq!(lin.base, loop_transform(&n, &ctx).unwrap());
    }

    #[test]
    fn substituted_model_quantities_satisfy_the_equalities(
        n_x in 1usize..=3, n_u in 1usize..=2, k in 1usize..=3, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plant = PlantModel::new(random_mat(&mut rng, n_x, n_x), random_mat(&mut rng, n_x, n_u), 1.0).unwrap();
        let bx = StateBox::symmetric(&vec![1.0; n_x]).unwrap();
        let data = collect(&plant, min_experiment_length(n_x, n_u) + 2, Excitation::default(), &bx, seed).unwrap();
        prop_assume!(data.pe_ok);
        let nt = TransformedN::from_dense(&random_mat(&mut rng, n_u + k, n_x + k), n_u, n_x).unwrap();
        let m = random_mat(&mut rng, n_x, n_x);
        let p = &m * m.transpose() + Mat::identity(n_x, n_x);
        let lam = Vector::from_fn(k, |_, _| rng.random_range(0.1..2.0));
        let v = substitute_model_quantities(&nt, &data, &p, &lam).unwrap();
        let scale = 1.0 + data.stacked().norm();
        prop_assert!(loop_residual_value(&nt, &data, &v).norm() <= 1e-9 * scale);
        prop_assert!(data_residual_value(&data, &v).norm() <= 1e-9 * scale);
        prop_assert!((&v.q1 * &p - Mat::identity(n_x, n_x)).norm() <= 1e-9 * p.norm());
    }

    #[test]
    fn ellipsoid_slices_lie_on_the_unit_level(n in 2usize..=4, seed in any::<u64>(), i in 0usize..4, j in 0usize..4) {
        prop_assume!(i < n && j < n && i != j);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mat(&mut rng, n, n);
        let roa = RoaEllipsoid { p: &m * m.transpose() + Mat::identity(n, n) * 0.05, log_det_q1: 0.0 };
        for pt in roa.slice_boundary(i, j, 12).unwrap() {
            let mut x = Vector::zeros(n);
            x[i] = pt[0];
            x[j] = pt[1];
            prop_assert!((roa.level(&x) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn matrix_csv_round_trip(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mat::from_fn(rows, cols, |_, _| rng.random_range(-1e6..1e6) * 10f64.powi(rng.random_range(-8..8)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_matrix_csv(&path, "M", &m).unwrap();
        prop_assert_eq!(read_matrix_csv(&path).unwrap(), m);
    }
}
