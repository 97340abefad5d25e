use diffcore::{Tape, Tensor, Var};
use mechnet::architectures::{ArchConfig, ArchKind, ForwardOutput, Mechanism, MechanismNetwork};
use mechnet::auction::{
    exact_regret_oracle, monte_carlo_revenue, myerson_bundled_run, myerson_itemwise_run, revenue, utility, vcg_run,
    BaselineKind, BaselineMechanism, IrwinHallTable, MechanismOutcome, ValuationProfile,
};
use mechnet::params::Bound;
use mechnet::data::{sample_profiles, seeded_stream, SettingSpec};
use mechnet::Error;

fn profile(n: usize, m: usize, values: &[f64]) -> ValuationProfile {
    ValuationProfile::new(n, m, values.to_vec()).unwrap()
}

fn outcome(n: usize, m: usize, allocation: &[f64], payments: &[f64]) -> MechanismOutcome {
    MechanismOutcome { n, m, allocation: allocation.to_vec(), payments: payments.to_vec() }
}

#[test]
fn utility_examples() {
    let v = profile(1, 2, &[0.8, 0.3]);
    assert!((utility(0, &v, &outcome(1, 2, &[1.0, 0.0], &[0.4])) - 0.4).abs() < 1e-15);
    assert_eq!(utility(0, &v, &outcome(1, 2, &[0.0, 0.0], &[0.0])), 0.0);
    assert!(utility(0, &v, &outcome(1, 2, &[1.0, 1.0], &[1.1])).abs() < 1e-15);
}

#[test]
fn revenue_examples() {
    assert!((revenue(&outcome(2, 1, &[1.0, 0.0], &[0.2, 0.3])) - 0.5).abs() < 1e-15);
    assert_eq!(revenue(&outcome(2, 1, &[0.0, 0.0], &[0.0, 0.0])), 0.0);
    assert_eq!(revenue(&outcome(1, 1, &[1.0], &[0.7])), 0.7);
}

#[test]
fn profiles_reject_bad_values() {
    assert!(ValuationProfile::new(1, 2, vec![0.5]).is_err());
    assert!(ValuationProfile::new(1, 2, vec![0.5, -0.1]).is_err());
    assert!(ValuationProfile::new(1, 2, vec![0.5, f64::NAN]).is_err());
}

#[test]
fn vcg_is_second_price() {
    let one = vcg_run(&profile(1, 2, &[0.9, 0.2]));
    assert_eq!(one.payments, vec![0.0]);
    assert_eq!(one.allocation, vec![1.0, 1.0]);
    let two = vcg_run(&profile(2, 1, &[0.7, 0.4]));
    assert_eq!(two.allocation, vec![1.0, 0.0]);
    assert_eq!(two.payments, vec![0.4, 0.0]);
}

#[test]
fn myerson_itemwise_applies_reserve() {
    let below = myerson_itemwise_run(&profile(2, 1, &[0.4, 0.3]));
    assert_eq!(below.allocation, vec![0.0, 0.0]);
    assert_eq!(below.payments, vec![0.0, 0.0]);
    let above = myerson_itemwise_run(&profile(2, 1, &[0.9, 0.3]));
    assert_eq!(above.allocation, vec![1.0, 0.0]);
    assert_eq!(above.payments, vec![0.5, 0.0]);
    let contested = myerson_itemwise_run(&profile(2, 1, &[0.6, 0.8]));
    assert_eq!(contested.payments, vec![0.0, 0.6]);
}

#[test]
fn bundled_single_bidder_posts_the_optimal_price() {
    let table = IrwinHallTable::new(2).unwrap();
    let r = (2.0f64 / 3.0).sqrt();
    assert!((table.reserve() - r).abs() < 1e-3, "reserve {}", table.reserve());
    let sells = myerson_bundled_run(&profile(1, 2, &[0.5, 0.4]), &table).unwrap();
    assert_eq!(sells.allocation, vec![1.0, 1.0]);
    assert!((sells.payments[0] - r).abs() < 1e-3);
    let keeps = myerson_bundled_run(&profile(1, 2, &[0.4, 0.3]), &table).unwrap();
    assert_eq!(keeps.payments, vec![0.0]);
}

#[test]
fn bundled_winner_has_highest_virtual_value() {
    let table = IrwinHallTable::new(2).unwrap();
    let out = myerson_bundled_run(&profile(2, 2, &[1.0, 0.9, 0.05, 0.05]), &table).unwrap();
    let phi_high = table.virtual_value(1.9).unwrap();
    let phi_low = table.virtual_value(0.1).unwrap();
    assert!(phi_high > phi_low.max(0.0));
    assert_eq!(out.allocation, vec![1.0, 1.0, 0.0, 0.0]);
    // the rival's virtual value is negative, so the price is the reserve
    assert!((out.payments[0] - table.reserve()).abs() < 1e-9);
    assert!(table.virtual_value(3.5).is_err());
}

#[test]
fn monte_carlo_matches_order_statistics() {
    // per item E[second highest of n uniforms] = (n - 1) / (n + 1)
    let mech = BaselineMechanism::new(BaselineKind::Vcg, SettingSpec::uniform(2, 3)).unwrap();
    let est = monte_carlo_revenue(&mech, 200_000, 1).unwrap();
    assert!((est.mean - 1.0).abs() < 4.0 * est.std_err + 1e-3, "{est:?}");
    // single item, reserve 1/2: 5/12 from the reserve region plus the VCG term
    let mech = BaselineMechanism::new(BaselineKind::MyersonItemwise, SettingSpec::uniform(2, 1)).unwrap();
    let est = monte_carlo_revenue(&mech, 200_000, 2).unwrap();
    assert!((est.mean - 5.0 / 12.0).abs() < 4.0 * est.std_err, "{est:?}");
}

#[test]
fn bundled_requires_unit_uniform_values() {
    assert!(BaselineMechanism::new(BaselineKind::MyersonBundled, SettingSpec::asymmetric_1x2()).is_err());
    assert!(BaselineMechanism::new(BaselineKind::Vcg, SettingSpec::asymmetric_1x2()).is_ok());
}

fn baselines(n: usize, m: usize) -> Vec<BaselineMechanism> {
    [BaselineKind::Vcg, BaselineKind::MyersonItemwise, BaselineKind::MyersonBundled]
        .into_iter()
        .map(|k| BaselineMechanism::new(k, SettingSpec::uniform(n, m)).unwrap())
        .collect()
}

#[test]
fn baselines_are_individually_rational() {
    let mut rng = seeded_stream(5);
    let profiles = sample_profiles::<f64>(&SettingSpec::uniform(3, 2), 2000, &mut rng);
    for mech in baselines(3, 2) {
        for s in 0..2000 {
            let v = ValuationProfile::from_tensor(&profiles, s).unwrap();
            let out = mech.run(&v).unwrap();
            for i in 0..3 {
                assert!(utility(i, &v, &out) >= 0.0, "{}: bidder {i} at {v:?}", mech.kind);
            }
            for j in 0..2 {
                let col: f64 = (0..3).map(|i| out.z(i, j)).sum();
                assert!(col <= 1.0 + 1e-12);
            }
        }
    }
}

#[test]
fn raising_a_bid_never_lowers_allocation() {
    let mut rng = seeded_stream(6);
    let profiles = sample_profiles::<f64>(&SettingSpec::uniform(2, 2), 500, &mut rng);
    for mech in baselines(2, 2) {
        for s in 0..500 {
            let v = ValuationProfile::from_tensor(&profiles, s).unwrap();
            let base = mech.run(&v).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let mut report = v.bidder(i).to_vec();
                    report[j] = (report[j] + 0.2).min(1.0);
                    let raised = mech.run(&v.with_report(i, &report)).unwrap();
                    assert!(raised.z(i, j) >= base.z(i, j), "{}: bidder {i} item {j} at {v:?}", mech.kind);
                }
            }
        }
    }
}

#[test]
fn baselines_have_no_regret_beyond_grid_error() {
    let setting = SettingSpec::uniform(2, 2);
    let support = setting.support();
    let mut rng = seeded_stream(7);
    let profiles = sample_profiles::<f64>(&setting, 20, &mut rng);
    let resolution = 41;
    let step = 1.0 / (resolution - 1) as f64;
    for mech in baselines(2, 2) {
        for s in 0..20 {
            let v = ValuationProfile::from_tensor(&profiles, s).unwrap();
            for i in 0..2 {
                let r = exact_regret_oracle::<f64, _>(&mech, &v, i, resolution, &support).unwrap();
                assert!((0.0..=2.0 * step).contains(&r), "{}: regret {r} at {v:?}", mech.kind);
            }
        }
    }
}

#[test]
fn oracle_edge_cases() {
    let setting = SettingSpec::uniform(1, 2);
    let net = MechanismNetwork::<f64>::new(ArchConfig::preset(ArchKind::RegretNet, "1x2", 1, 2, true), 0).unwrap();
    let v = profile(1, 2, &[0.3, 0.8]);
    assert_eq!(exact_regret_oracle::<f64, _>(&net, &v, 0, 0, &setting.support()).unwrap(), 0.0);
    let r = exact_regret_oracle::<f64, _>(&net, &v, 0, 11, &setting.support()).unwrap();
    assert!(r >= 0.0);
    let wide = SettingSpec::uniform(1, 3);
    let v3 = profile(1, 3, &[0.1, 0.2, 0.3]);
    let net3 = MechanismNetwork::<f64>::new(ArchConfig::preset(ArchKind::RegretFormer, "1x2", 1, 3, true), 0).unwrap();
    match exact_regret_oracle::<f64, _>(&net3, &v3, 0, 200, &wide.support()) {
        Err(Error::GridTooLarge { .. }) => {}
        other => panic!("expected grid guard, got {other:?}"),
    }
    assert!(exact_regret_oracle::<f64, _>(&net3, &v3, 1, 5, &wide.support()).is_err());
}

/// Fixed lottery and fixed price, whatever the bids.
struct Constant;

impl Mechanism<f64> for Constant {
    fn name(&self) -> String {
        "constant".into()
    }

    fn check_shape(&self, _n: usize, _m: usize) -> mechnet::Result<()> {
        Ok(())
    }

    fn bind(&self, _tape: &mut Tape<f64>, _requires_grad: bool) -> Bound {
        Bound::empty()
    }

    fn forward(&self, tape: &mut Tape<f64>, _params: &Bound, bids: Var) -> mechnet::Result<ForwardOutput> {
        let shape = tape.shape(bids).to_vec();
        let (b, n, m) = (shape[0], shape[1], shape[2]);
        let allocation = tape.constant(Tensor::full([b, n + 1, m], 1.0 / (n + 1) as f64));
        let payment_fraction = tape.constant(Tensor::full([b, n], 0.5));
        let payment = tape.constant(Tensor::full([b, n], 0.1));
        Ok(ForwardOutput { allocation, payment_fraction, payment, logits: None })
    }
}

#[test]
fn constant_mechanism_has_zero_oracle_regret() {
    let v = profile(2, 2, &[0.6, 0.2, 0.9, 0.4]);
    let support = SettingSpec::uniform(2, 2).support();
    for i in 0..2 {
        let r = exact_regret_oracle::<f64, _>(&Constant, &v, i, 21, &support).unwrap();
        assert_eq!(r, 0.0);
    }
}
