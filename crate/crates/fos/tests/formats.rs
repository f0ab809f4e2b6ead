use fos::io;
use fos_core::kernels::GaussianKernel;
use fos_core::lddmm::InitialMomenta;
use fos_core::mesh::{TriangleMesh, Vec3};
use fos_core::shapes;
use fos_core::sparse::TripletMatrix;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn jittered(seed_values: &[f64]) -> TriangleMesh {
    let base = shapes::ellipsoid_cap(2, Vec3::new(3.0, 2.0, 1.0), 1.0);
    let v = base.vertices().iter().enumerate().map(|(i, p)| p + Vec3::repeat(seed_values[i % seed_values.len()])).collect();
    base.with_vertices(v).unwrap()
}

fn any_f64() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1e-6..1e-6f64, Just(0.0), Just(-0.0), Just(1.0 / 3.0), Just(f64::MIN_POSITIVE)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn meshes_round_trip_bit_exactly(offsets in prop::collection::vec(-1e-3..1e-3f64, 1..8)) {
        let mesh = jittered(&offsets);
        let dir = tempfile::tempdir().unwrap();
        for name in ["m.off", "m.ply"] {
            let p = dir.path().join(name);
            io::write_mesh(&p, &mesh).unwrap();
            let back = io::read_mesh(&p).unwrap();
            prop_assert_eq!(back.faces(), mesh.faces());
            for (a, b) in back.vertices().iter().zip(mesh.vertices()) {
                for d in 0..3 {
                    prop_assert_eq!(a[d].to_bits(), b[d].to_bits());
                }
            }
        }
    }

    #[test]
    fn fields_scores_and_momenta_round_trip(values in prop::collection::vec(any_f64(), 1..40), sigma in 0.1..100.0f64) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        io::write_field(&p, &values).unwrap();
        let back = io::read_field(&p).unwrap();
        prop_assert!(back.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));

        let k = values.len().div_ceil(3).max(1);
        let s = DMatrix::from_fn(k, 3, |i, j| values[(3 * i + j) % values.len()]);
        let q = dir.path().join("s.csv");
        io::write_scores(&q, &s).unwrap();
        prop_assert_eq!(io::read_scores(&q).unwrap(), s);

        let points: Vec<Vec3> = (0..k).map(|i| Vec3::new(i as f64, values[i % values.len()], 0.5)).collect();
        let momenta: Vec<Vec3> = (0..k).map(|i| Vec3::new(values[i % values.len()], -1.0, 1e-300)).collect();
        let m = InitialMomenta::new(points, momenta, GaussianKernel::new(sigma).unwrap()).unwrap();
        let r = dir.path().join("m.csv");
        io::write_momenta(&r, &m).unwrap();
        let back = io::read_momenta(&r).unwrap();
        prop_assert_eq!(back.control_points, m.control_points);
        prop_assert_eq!(back.momenta, m.momenta);
        prop_assert_eq!(back.kernel, m.kernel);
    }
}

#[test]
fn field_rows_may_come_in_any_order_but_must_be_complete() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    std::fs::write(&p, "vertex_id,value\n2,3.5\n0,1\n1,-2e-3\n").unwrap();
    assert_eq!(io::read_field(&p).unwrap(), vec![1.0, -2e-3, 3.5]);
    std::fs::write(&p, "vertex_id,value\n0,1\n2,3\n").unwrap();
    assert!(matches!(io::read_field(&p), Err(fos::CliError::Validation(_))));
    std::fs::write(&p, "vertex_id,value\n0,1\n0,3\n").unwrap();
    assert!(matches!(io::read_field(&p), Err(fos::CliError::Parse { line: 3, .. })));
    std::fs::write(&p, "id,value\n0,1\n").unwrap();
    assert!(io::read_field(&p).is_err());
}

#[test]
fn momenta_need_their_kernel_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    std::fs::write(&p, "k,cx,cy,cz,ax,ay,az\n0,0,0,0,1,0,0\n").unwrap();
    assert!(matches!(io::read_momenta(&p), Err(fos::CliError::Io { .. })));
    std::fs::write(io::kernel_sidecar(&p), r#"{"sigma": 2.0}"#).unwrap();
    let m = io::read_momenta(&p).unwrap();
    assert_eq!(m.kernel.sigma, 2.0);
    assert_eq!(m.momenta[0], Vec3::new(1.0, 0.0, 0.0));
}

#[test]
fn triplet_dump_lists_every_entry() {
    let mut m = TripletMatrix::new(3);
    m.add(0, 0, 2.0);
    m.add(2, 1, -0.5);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.txt");
    io::write_triplets(&p, &m).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let rows: Vec<(usize, usize, f64)> = text
        .lines()
        .map(|l| {
            let w: Vec<&str> = l.split(' ').collect();
            (w[0].parse().unwrap(), w[1].parse().unwrap(), w[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows, vec![(0, 0, 2.0), (2, 1, -0.5)]);
}
