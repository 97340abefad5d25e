use diffcore::{Tape, Tensor};
use mechnet::architectures::{compute_payments, ArchConfig, ArchKind, Mechanism, MechanismNetwork, PeMode};
use mechnet::data::{sample_profiles, seeded_stream, SettingSpec};
use mechnet::Error;

fn net(kind: ArchKind, label: &str, n: usize, m: usize, seed: u64) -> MechanismNetwork<f64> {
    MechanismNetwork::new(ArchConfig::preset(kind, label, n, m, false), seed).unwrap()
}

fn profiles(n: usize, m: usize, count: usize, seed: u64) -> Tensor<f64> {
    sample_profiles(&SettingSpec::uniform(n, m), count, &mut seeded_stream(seed))
}

#[test]
fn regretnet_parameter_counts() {
    let cases = [("1x2", 1, 2, 21_305), ("2x2", 2, 2, 22_008), ("2x3", 2, 3, 22_711), ("2x5", 2, 5, 84_717), ("3x10", 3, 10, 91_343)];
    for (label, n, m, expected) in cases {
        assert_eq!(net(ArchKind::RegretNet, label, n, m, 0).parameter_count(), expected, "{label}");
    }
}

#[test]
fn equivariantnet_parameter_counts() {
    let cases = [("1x2", 4_546), ("2x3", 12_802), ("2x5", 16_930)];
    for (label, expected) in cases {
        assert_eq!(net(ArchKind::EquivariantNet, label, 0, 0, 0).parameter_count(), expected, "{label}");
    }
}

#[test]
fn regretformer_parameter_count_per_block() {
    // Four bias-free d x d projections and a layer norm per attention layer,
    // plus the 2d -> d combine layer, plus the 1 -> d embedding.
    for (label, d, blocks) in [("1x2", 32usize, 1usize), ("2x5", 128, 2)] {
        let count = net(ArchKind::RegretFormer, label, 0, 0, 0).parameter_count();
        let per_block = 2 * (4 * d * d + 2 * d) + (2 * d * d + d);
        assert_eq!(count, 5 * d + blocks * per_block, "{label}");
    }
}

#[test]
fn allocations_are_distributions_and_ir_holds() {
    for kind in [ArchKind::RegretNet, ArchKind::EquivariantNet, ArchKind::RegretFormer] {
        let mech = net(kind, "2x3", 2, 3, 7);
        let v = profiles(2, 3, 256, 1);
        let out = mech.outcome(&v).unwrap();
        assert_eq!(out.allocation.shape(), &[256, 3, 3]);
        for l in 0..256 {
            for j in 0..3 {
                let col: f64 = (0..3).map(|i| out.allocation.at(&[l, i, j])).sum();
                assert!((col - 1.0).abs() < 1e-6);
            }
            for i in 0..2 {
                let frac = out.payment_fraction.at(&[l, i]);
                assert!((0.0..=1.0).contains(&frac));
                let value: f64 = (0..3).map(|j| out.allocation.at(&[l, i, j]) * v.at(&[l, i, j])).sum();
                assert!(value - out.payment.at(&[l, i]) >= -1e-9, "{kind} IR");
            }
        }
    }
}

#[test]
fn regretnet_rejects_other_shapes() {
    let mech = net(ArchKind::RegretNet, "2x2", 2, 2, 0);
    let err = mech.outcome(&profiles(2, 3, 4, 0)).unwrap_err();
    assert!(matches!(err, Error::FixedShape { expected_n: 2, expected_m: 2, n: 2, m: 3, .. }));
}

#[test]
fn equivariant_models_accept_any_shape() {
    for kind in [ArchKind::EquivariantNet, ArchKind::RegretFormer] {
        let mech = net(kind, "2x2", 0, 0, 3);
        for (n, m) in [(1, 1), (2, 5), (3, 7)] {
            let out = mech.outcome(&profiles(n, m, 3, 2)).unwrap();
            assert_eq!(out.allocation.shape(), &[3, n + 1, m]);
            assert_eq!(out.payment.shape(), &[3, n]);
        }
    }
}

#[test]
fn padded_regretnet_keeps_columns_normalized() {
    let mut cfg = ArchConfig::preset(ArchKind::RegretNet, "multi", 3, 7, true);
    cfg.padding = true;
    let mech = MechanismNetwork::<f64>::new(cfg, 5).unwrap();
    let v = profiles(2, 3, 16, 9);
    let out = mech.outcome(&v).unwrap();
    assert_eq!(out.allocation.shape(), &[16, 3, 3]);
    for l in 0..16 {
        for j in 0..3 {
            let col: f64 = (0..3).map(|i| out.allocation.at(&[l, i, j])).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }
    assert!(mech.outcome(&profiles(3, 8, 1, 0)).is_err());
}

#[test]
fn former_dummy_logit_is_negated_sum() {
    let mech = net(ArchKind::RegretFormer, "2x2", 0, 0, 11);
    let mut tape = Tape::new();
    let p = mech.bind(&mut tape, false);
    let bids = tape.constant(profiles(3, 4, 5, 0));
    let out = mech.forward(&mut tape, &p, bids).unwrap();
    let logits = tape.value(out.logits.unwrap());
    for l in 0..5 {
        for j in 0..4 {
            let s: f64 = (0..3).map(|i| logits.at(&[l, i, j])).sum();
            assert!((logits.at(&[l, 3, j]) + s).abs() < 1e-12);
        }
    }
}

#[test]
fn compute_payments_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let frac = tape.constant(Tensor::new([1, 1], vec![0.5]).unwrap());
    let bids = tape.constant(Tensor::new([1, 1, 2], vec![0.8, 0.3]).unwrap());
    let p = compute_payments(&mut tape, z, frac, bids).unwrap();
    assert!((tape.value(p).item() - 0.4).abs() < 1e-15);

    let zero = tape.constant(Tensor::zeros([1, 1]));
    let p = compute_payments(&mut tape, z, zero, bids).unwrap();
    assert_eq!(tape.value(p).item(), 0.0);

    // Uniform allocation over n + 1 = 3 rows with full fraction.
    let z = tape.constant(Tensor::full([1, 3, 2], 1.0 / 3.0));
    let one = tape.constant(Tensor::ones([1, 2]));
    let bids = tape.constant(Tensor::new([1, 2, 2], vec![0.3, 0.6, 0.9, 0.0]).unwrap());
    let p = compute_payments(&mut tape, z, one, bids).unwrap();
    let got = tape.value(p).data().to_vec();
    assert!((got[0] - 0.3).abs() < 1e-15 && (got[1] - 0.3).abs() < 1e-15);
}

#[test]
fn construction_is_deterministic() {
    let a = net(ArchKind::RegretFormer, "1x2", 0, 0, 42);
    let b = net(ArchKind::RegretFormer, "1x2", 0, 0, 42);
    let c = net(ArchKind::RegretFormer, "1x2", 0, 0, 43);
    assert_eq!(a.params().to_bytes(), b.params().to_bytes());
    assert_ne!(a.params().to_bytes(), c.params().to_bytes());
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = ArchConfig::preset(ArchKind::RegretFormer, "1x2", 0, 0, false);
    cfg.heads = 3;
    assert!(MechanismNetwork::<f64>::new(cfg, 0).is_err());
    let mut cfg = ArchConfig::preset(ArchKind::RegretFormer, "1x2", 0, 0, false);
    cfg.use_pe = true;
    cfg.pe_mode = PeMode::Input;
    assert!(MechanismNetwork::<f64>::new(cfg, 0).is_ok());
}
