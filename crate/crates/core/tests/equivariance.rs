use diffcore::Tensor;
use mechnet::architectures::{ArchConfig, ArchKind, Mechanism, MechanismNetwork, Outcome, PeMode};
use mechnet::data::{sample_profiles, seeded_stream, SettingSpec};

const ROWS: [usize; 3] = [2, 0, 1];
const COLS: [usize; 4] = [3, 1, 0, 2];

/// Reorders axes 1 and 2 of a `[B, r, c]` tensor; rows beyond `rows.len()`
/// (the dummy participant) stay in place.
fn reorder(t: &Tensor<f64>, rows: &[usize], cols: &[usize]) -> Tensor<f64> {
    let s = t.shape().to_vec();
    Tensor::from_fn(s.clone(), |f| {
        let (c, r, b) = (f % s[2], (f / s[2]) % s[1], f / (s[1] * s[2]));
        let r = if r < rows.len() { rows[r] } else { r };
        t.at(&[b, r, cols[c]])
    })
}

fn reorder_rows(t: &Tensor<f64>, rows: &[usize]) -> Tensor<f64> {
    let s = t.shape().to_vec();
    Tensor::from_fn(s.clone(), |f| t.at(&[f / s[1], rows[f % s[1]]]))
}

/// Largest deviation between `f(P v)` and `P f(v)`.
fn equivariance_gap(mech: &dyn Mechanism<f64>, v: &Tensor<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    let direct: Outcome<f64> = mech.outcome(v).unwrap();
    let permuted = mech.outcome(&reorder(v, rows, cols)).unwrap();
    let a = reorder(&direct.allocation, rows, cols).max_abs_diff(&permuted.allocation);
    let p = reorder_rows(&direct.payment, rows).max_abs_diff(&permuted.payment);
    let q = reorder_rows(&direct.payment_fraction, rows).max_abs_diff(&permuted.payment_fraction);
    a.max(p).max(q)
}

fn profiles() -> Tensor<f64> {
    sample_profiles(&SettingSpec::uniform(3, 4), 32, &mut seeded_stream(17))
}

fn identity(k: usize) -> Vec<usize> {
    (0..k).collect()
}

#[test]
fn equivariantnet_commutes_with_permutations() {
    let mut cfg = ArchConfig::preset(ArchKind::EquivariantNet, "2x3", 0, 0, false);
    for separate in [false, true] {
        cfg.separate_stacks = separate;
        let mech = MechanismNetwork::<f64>::new(cfg.clone(), 4).unwrap();
        let v = profiles();
        assert!(equivariance_gap(&mech, &v, &ROWS, &COLS) <= 1e-10);
        assert!(equivariance_gap(&mech, &v, &ROWS, &identity(4)) <= 1e-10);
        assert!(equivariance_gap(&mech, &v, &identity(3), &COLS) <= 1e-10);
    }
}

#[test]
fn regretformer_without_pe_commutes_with_permutations() {
    for label in ["1x2", "2x5"] {
        let mech = MechanismNetwork::<f64>::new(ArchConfig::preset(ArchKind::RegretFormer, label, 0, 0, false), 8).unwrap();
        let v = profiles();
        assert!(equivariance_gap(&mech, &v, &ROWS, &COLS) <= 1e-10, "{label}");
    }
}

#[test]
fn regretnet_is_not_equivariant() {
    let mech = MechanismNetwork::<f64>::new(ArchConfig::preset(ArchKind::RegretNet, "3x10", 3, 4, false), 2).unwrap();
    assert!(equivariance_gap(&mech, &profiles(), &ROWS, &COLS) > 1e-6);
}

#[test]
fn positional_encoding_breaks_item_symmetry() {
    for mode in [PeMode::Features, PeMode::Input] {
        let mut cfg = ArchConfig::preset(ArchKind::RegretFormer, "1x2", 0, 0, false);
        cfg.use_pe = true;
        cfg.pe_mode = mode;
        let mech = MechanismNetwork::<f64>::new(cfg, 8).unwrap();
        let v = profiles();
        assert!(equivariance_gap(&mech, &v, &identity(3), &COLS) > 1e-6, "{mode:?}");
        // Bidders remain exchangeable.
        assert!(equivariance_gap(&mech, &v, &ROWS, &identity(4)) <= 1e-10, "{mode:?}");
    }
}
