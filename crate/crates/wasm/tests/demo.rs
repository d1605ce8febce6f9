use flashhead_wasm::Demo;

#[test]
fn balanced_ring_has_equal_arcs() {
    let demo = Demo::new(48, 8, true, 1).unwrap();
    assert_eq!(
        (demo.tokens(), demo.clusters(), demo.cluster_size()),
        (48, 8, 6)
    );
    assert_eq!(demo.sizes(), vec![6; 8]);
    assert_eq!(demo.points().len(), 96);
    assert_eq!(demo.centroids().len(), 16);
    let mut counts = [0; 8];
    for k in demo.assignment() {
        counts[k as usize] += 1;
    }
    assert_eq!(counts, [6; 8]);
}

#[test]
fn unbalanced_sizes_cover_the_ring() {
    let demo = Demo::new(50, 7, false, 2).unwrap();
    assert_eq!(demo.sizes().iter().sum::<u32>(), 50);
    assert_eq!(
        demo.cluster_size() as u32,
        *demo.sizes().iter().max().unwrap()
    );
}

#[test]
fn rejects_bad_shapes() {
    assert!(Demo::new(0, 1, true, 0).is_err());
    assert!(Demo::new(10, 3, true, 0).is_err());
}

#[test]
fn full_probe_decode_is_dense() {
    let demo = Demo::new(40, 5, true, 3).unwrap();
    for i in 0..24 {
        let out = demo.decode(i as f32 * 0.26, 3.0, 5, 0.0, 0).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out.len(), 2 + 5);
    }
    let one = demo.decode(1.0, 3.0, 1, 0.0, 0).unwrap();
    assert_eq!(one.len(), 3);
    assert!(demo.decode(1.0, 3.0, 6, 0.0, 0).is_err());
}

#[test]
fn marginal_matches_exact_on_small_ring() {
    let demo = Demo::new(24, 6, true, 4).unwrap();
    let out = demo.marginal(0.5, 2.0, 2, 1.0, 50_000, 7).unwrap();
    assert_eq!(out.len(), 24 * 2 + 1);
    let (mc, exact) = out[..48].split_at(24);
    assert!((mc.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((exact.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(out[48] < 0.02, "{}", out[48]);
}
