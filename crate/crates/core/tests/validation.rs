use mechnet::architectures::{ArchConfig, ArchKind, MechanismNetwork};
use mechnet::auction::{BaselineKind, BaselineMechanism};
use mechnet::data::{sample_profiles, seeded_stream, SettingSource, SettingSpec};
use mechnet::validation::{
    bernoulli_kl, budget_ratio, categorical_kl, cross_misreport_regret, distill, distillation_kl, evaluate_mechanism,
    DistillConfig, EvalConfig, EvaluationReport,
};
use mechnet::Error;

fn eval(steps: usize) -> EvalConfig {
    EvalConfig { inner_steps: steps, ..EvalConfig::default() }
}

fn net(kind: ArchKind, n: usize, m: usize, seed: u64) -> MechanismNetwork<f64> {
    MechanismNetwork::new(ArchConfig::preset(kind, "2x2", n, m, true), seed).unwrap()
}

fn report(payments: Vec<f64>, regrets: Vec<f64>) -> EvaluationReport {
    EvaluationReport {
        setting: "test".into(),
        n: payments.len(),
        m: 1,
        revenue: payments.iter().sum(),
        regret_mean: regrets.iter().sum::<f64>() / regrets.len() as f64,
        ratio: f64::NAN,
        payments,
        regrets,
        samples: 1,
        inner_steps: 0,
    }
}

#[test]
fn vcg_evaluates_to_its_known_revenue() {
    let setting = SettingSpec::uniform(2, 2);
    let vcg = BaselineMechanism::new(BaselineKind::Vcg, setting.clone()).unwrap();
    let v = sample_profiles::<f64>(&setting, 20_000, &mut seeded_stream(1));
    let r = evaluate_mechanism(&vcg, &setting, &v, &eval(50), Some(1e-3)).unwrap();
    assert!((r.revenue - 2.0 / 3.0).abs() < 0.01, "revenue {}", r.revenue);
    assert!(r.regret_mean <= 2e-3);
    assert_eq!(r.samples, 20_000);
}

#[test]
fn random_network_reports_are_well_formed() {
    let setting = SettingSpec::uniform(2, 2);
    let v = sample_profiles::<f64>(&setting, 64, &mut seeded_stream(2));
    for kind in [ArchKind::RegretNet, ArchKind::EquivariantNet, ArchKind::RegretFormer] {
        let mech = net(kind, 2, 2, 3);
        let short = evaluate_mechanism(&mech, &setting, &v, &eval(50), Some(1e-3)).unwrap();
        let long = evaluate_mechanism(&mech, &setting, &v, &eval(300), Some(1e-3)).unwrap();
        assert!(short.ratio.is_finite() && short.regret_mean >= 0.0);
        assert!(long.regret_mean >= short.regret_mean, "{kind}");
        for (a, b) in short.regrets.iter().zip(&long.regrets) {
            assert!(b >= a);
        }
    }
}

#[test]
fn fixed_size_networks_refuse_other_settings() {
    let mech = net(ArchKind::RegretNet, 2, 2, 0);
    let other = SettingSpec::uniform(2, 3);
    let v = sample_profiles::<f64>(&other, 4, &mut seeded_stream(0));
    assert!(matches!(evaluate_mechanism(&mech, &other, &v, &eval(5), None), Err(Error::FixedShape { .. })));
    let former = net(ArchKind::RegretFormer, 2, 2, 0);
    assert!(evaluate_mechanism(&former, &other, &v, &eval(5), None).is_ok());
    // profiles must match the declared setting
    assert!(evaluate_mechanism(&former, &SettingSpec::uniform(2, 2), &v, &eval(5), None).is_err());
}

#[test]
fn budget_ratio_examples() {
    assert!((budget_ratio(&report(vec![0.6, 0.4], vec![0.0005, 0.0005]), 1e-3) - 1.0).abs() < 1e-12);
    assert!((budget_ratio(&report(vec![1.0], vec![0.002]), 1e-3) - 2.0).abs() < 1e-12);
    assert_eq!(budget_ratio(&report(vec![0.5], vec![0.0]), 1e-3), 0.0);
    assert!(budget_ratio(&report(vec![0.0], vec![0.1]), 1e-3).is_nan());
    let a = budget_ratio(&report(vec![0.3], vec![0.003]), 1e-2);
    let b = budget_ratio(&report(vec![0.6], vec![0.006]), 1e-2);
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn cross_regret_against_itself_is_the_standard_estimate() {
    let setting = SettingSpec::uniform(2, 2);
    let v = sample_profiles::<f64>(&setting, 48, &mut seeded_stream(4));
    let mech = net(ArchKind::EquivariantNet, 2, 2, 5);
    let own = evaluate_mechanism(&mech, &setting, &v, &eval(40), None).unwrap();
    let cross = cross_misreport_regret(&mech, &mech, &setting, &v, &eval(40)).unwrap();
    let bits = |r: &EvaluationReport| r.regrets.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&own), bits(&cross));
    assert_eq!(own.regret_mean.to_bits(), cross.regret_mean.to_bits());
}

#[test]
fn cross_regret_with_a_truthful_prober_is_zero() {
    let setting = SettingSpec::uniform(2, 2);
    let v = sample_profiles::<f64>(&setting, 16, &mut seeded_stream(6));
    let mech = net(ArchKind::RegretFormer, 2, 2, 7);
    let prober = BaselineMechanism::new(BaselineKind::Vcg, setting.clone()).unwrap();
    let cross = cross_misreport_regret(&mech, &prober, &setting, &v, &eval(30)).unwrap();
    assert!(cross.regrets.iter().all(|&r| r == 0.0));
}

#[test]
fn cross_regret_between_different_networks_is_nonnegative() {
    let setting = SettingSpec::uniform(1, 2);
    let v = sample_profiles::<f64>(&setting, 64, &mut seeded_stream(13));
    let a = net(ArchKind::RegretNet, 1, 2, 14);
    let b = net(ArchKind::RegretFormer, 1, 2, 15);
    for (target, prober) in [(&a, &b), (&b, &a)] {
        let cross = cross_misreport_regret(target, prober, &setting, &v, &eval(30)).unwrap();
        assert!(cross.regrets.iter().all(|&r| r >= 0.0 && r.is_finite()), "{:?}", cross.regrets);
    }
}

#[test]
fn kl_examples() {
    let p = [0.2, 0.5, 0.3];
    assert_eq!(categorical_kl(&p, &p), 0.0);
    assert_eq!(bernoulli_kl(0.37, 0.37), 0.0);
    let expected = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    assert!((categorical_kl(&[0.5, 0.5], &[0.25, 0.75]) - expected).abs() < 1e-12);
    assert!((bernoulli_kl(0.5, 0.25) - expected).abs() < 1e-12);
    assert!(categorical_kl(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    assert!(bernoulli_kl(0.9, 0.1) > 0.0 && bernoulli_kl(0.1, 0.9) > 0.0);
}

#[test]
fn self_distillation_from_a_copy_is_a_no_op() {
    let teacher = net(ArchKind::RegretFormer, 1, 2, 8);
    let student = teacher.clone();
    let source = SettingSource::preset("1x2").unwrap();
    let v = sample_profiles::<f64>(&SettingSpec::uniform(1, 2), 256, &mut seeded_stream(9));
    assert!(distillation_kl(&teacher, &student, &v).unwrap() <= 1e-10);
    let cfg = DistillConfig { iterations: 3, batch_size: 16, inner_steps: 5, eval_samples: 64, eval: eval(10), ..DistillConfig::default() };
    let (trained, report) = distill(&teacher, student, &source, &cfg).unwrap();
    assert_eq!(trained.params().to_bytes(), teacher.params().to_bytes());
    assert_eq!(report.teacher_revenue, report.student_revenue);
    assert_eq!(report.iterations, 3);
    assert!(report.final_loss <= 1e-10);
}

#[test]
fn distillation_pulls_a_student_towards_its_teacher() {
    let teacher = net(ArchKind::EquivariantNet, 1, 2, 10);
    let mut arch = ArchConfig::preset(ArchKind::RegretNet, "1x2", 1, 2, true);
    arch.hidden = 16;
    let student = MechanismNetwork::new(arch, 11).unwrap();
    let v = sample_profiles::<f64>(&SettingSpec::uniform(1, 2), 256, &mut seeded_stream(12));
    let before = distillation_kl(&teacher, &student, &v).unwrap();
    let source = SettingSource::preset("1x2").unwrap();
    let cfg = DistillConfig {
        iterations: 150,
        batch_size: 32,
        lr: 3e-3,
        inner_steps: 5,
        eval_samples: 64,
        eval: eval(10),
        ..DistillConfig::default()
    };
    let (student, report) = distill(&teacher, student, &source, &cfg).unwrap();
    let after = distillation_kl(&teacher, &student, &v).unwrap();
    assert!(after < 0.5 * before, "KL {before} -> {after}");
    assert!(report.regret.iter().flatten().all(|r| r.is_finite()));
    assert!(report.diverged_at.is_none());
}
