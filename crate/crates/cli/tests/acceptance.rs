//! End-to-end acceptance checks.
//!
//! Runs every criterion in turn and prints one `PASS`/`FAIL` line for each.
//! Numeric arguments select a subset: `cargo test -p mechnet-cli --test
//! acceptance -- 1 6 9`. The full run trains three desk-scale networks and
//! takes about an hour and a half on one core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use diffcore::{finite_difference_check_many, DiffError, Tensor};
use mechnet::architectures::{ArchConfig, ArchKind, Mechanism, MechanismNetwork, Outcome, PeMode};
use mechnet::auction::{exact_regret_oracle, monte_carlo_revenue, BaselineKind, BaselineMechanism, ValuationProfile};
use mechnet::data::{sample_profiles, seeded_stream, SettingSource, SettingSpec};
use mechnet::layers::{Activation, Dense, Exchangeable, MultiHeadAttention};
use mechnet::losses::{dual_update, outer_loss_budget, outer_loss_lagrangian, DualState, LagrangianState};
use mechnet::params::{Bound, ParamSet};
use mechnet::training::{optimize_misreports, Objective, TrainConfig, Trainer};
use mechnet::validation::{
    cross_misreport_regret, distill, distillation_kl, evaluate_mechanism, DistillConfig, EvalConfig, EvaluationReport,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

/// Trained networks shared between criteria, built on first use.
#[derive(Default)]
struct Shared {
    former: Option<Trained>,
    loose: Option<Trained>,
    tight: Option<Trained>,
}

struct Trained {
    net: MechanismNetwork<f64>,
    revenue: f64,
    regret: f64,
    training_ratio: f64,
}

fn train_1x2(arch: ArchConfig, seed: u64, r_max_end: f64, tag: &str) -> Trained {
    let mut cfg = TrainConfig::desk(seed);
    cfg.objective = Objective::budget(r_max_end, 100);
    cfg.validation_interval = cfg.outer_iterations;
    let net = MechanismNetwork::new(arch, seed).unwrap();
    let mut trainer = Trainer::new(net, SettingSource::preset("1x2").unwrap(), cfg).unwrap();
    let start = Instant::now();
    trainer
        .run_with(|t| {
            if t.iteration % 500 == 0 {
                let last = t.train_log.last().unwrap();
                eprintln!(
                    "  [{tag}] iteration {:>5}: batch revenue {:.4} regret {:.2e} gamma {:.1} ({:.0}s)",
                    t.iteration,
                    last.revenue,
                    last.regret_mean,
                    last.gamma,
                    start.elapsed().as_secs_f64()
                );
            }
            Ok(())
        })
        .unwrap();
    let row = trainer.history.last().unwrap().clone();
    let training_ratio = trainer.recent_training_ratio(500);
    Trained { net: trainer.net, revenue: row.revenue, regret: row.regret_mean, training_ratio }
}

impl Shared {
    fn former(&mut self) -> &Trained {
        self.former.get_or_insert_with(|| {
            let arch = ArchConfig::preset(ArchKind::RegretFormer, "1x2", 1, 2, false);
            train_1x2(arch, 1, 1e-3, "regretformer")
        })
    }

    fn regretnet(seed: u64, r_max_end: f64, tag: &str) -> Trained {
        train_1x2(ArchConfig::preset(ArchKind::RegretNet, "1x2", 1, 2, true), seed, r_max_end, tag)
    }

    fn loose(&mut self) -> &Trained {
        self.loose.get_or_insert_with(|| Self::regretnet(2, 1e-2, "regretnet 1e-2"))
    }

    fn tight(&mut self) -> &Trained {
        self.tight.get_or_insert_with(|| Self::regretnet(2, 1e-3, "regretnet 1e-3"))
    }
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn baselines_match_known_revenues(_: &mut Shared) -> Verdict {
    let labels = [(1, 2), (2, 2), (2, 3), (2, 5), (3, 10)];
    let known = [
        (BaselineKind::Vcg, [0.0, 0.667, 1.0, 1.667, 5.0]),
        (BaselineKind::MyersonItemwise, [0.5, 0.833, 1.25, 2.083, 5.312]),
        (BaselineKind::MyersonBundled, [0.544, 0.839, 1.278, 2.188, 5.003]),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (kind, values) in known {
        for (&(n, m), &target) in labels.iter().zip(&values) {
            let tol = match (kind, n, m) {
                (BaselineKind::MyersonBundled, 1, 2) => 0.005,
                (BaselineKind::MyersonBundled, 2, 2) => 0.01,
                (BaselineKind::MyersonBundled, 3, 10) => 0.05,
                (BaselineKind::MyersonBundled, _, _) => f64::INFINITY,
                _ => 0.01,
            };
            let mech = BaselineMechanism::new(kind, SettingSpec::uniform(n, m)).map_err(|e| e.to_string())?;
            let est = monte_carlo_revenue(&mech, 1_000_000, 0).map_err(|e| e.to_string())?;
            let good = (est.mean - target).abs() <= tol;
            ok &= good;
            if !good || tol.is_infinite() {
                detail.push(format!("{kind:?} {n}x{m}: {:.4} vs {target}", est.mean));
            }
        }
    }
    let summary = if detail.is_empty() { "all 13 checked values within tolerance".into() } else { detail.join("; ") };
    check(ok, format!("{summary} (bundled 2x3/2x5 informational)"))
}

fn to_diff(e: mechnet::Error) -> DiffError {
    match e {
        mechnet::Error::Tensor(inner) => inner,
        other => DiffError::InvalidArgument { op: "mechanism", reason: other.to_string() },
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn gradients_match_finite_differences(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let (mut layers, mut losses) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let dense = Dense::new(&mut params, &mut r, "d", 3, 4, Activation::Tanh);
        let exch = Exchangeable::new(&mut params, &mut r, "e", 4, 4, Activation::Tanh);
        let attn = MultiHeadAttention::new(&mut params, &mut r, "a", 4, 2).unwrap();
        for name in ["d.bias", "e.bias", "a.ln.gain", "a.ln.bias"] {
            let shape = params.by_name(name).unwrap().shape().to_vec();
            params.replace(name, random(&shape, &mut r)).unwrap();
        }
        let x = random(&[1, 3, 4, 3], &mut r);
        let mix = random(&[1, 3, 4, 4], &mut r);
        let mut inputs = vec![x];
        inputs.extend(params.tensors().iter().cloned());
        let err = finite_difference_check_many(
            |tape, vars| {
                let (x, rest) = vars.split_first().unwrap();
                let p = Bound::from_vars(rest.to_vec());
                let h = dense.forward(tape, &p, *x).map_err(to_diff)?;
                let h = exch.forward(tape, &p, h).map_err(to_diff)?;
                let seq = tape.reshape(h, &[3, 4, 4])?;
                let h = attn.forward(tape, &p, seq).map_err(to_diff)?;
                let h = tape.reshape(h, &[1, 3, 4, 4])?;
                let w = tape.constant(mix.clone());
                let h = tape.mul(h, w)?;
                tape.sum_all(h)
            },
            &inputs,
            1e-3,
        )
        .map_err(|e| e.to_string())?;
        layers = layers.max(err);

        let n = r.gen_range(1..5);
        let p = Tensor::from_fn([n], |_| r.gen::<f64>());
        let regrets = Tensor::from_fn([n], |_| r.gen::<f64>() * 0.1);
        let gamma = r.gen::<f64>() * 10.0;
        let state = LagrangianState {
            lambdas: (0..n).map(|_| r.gen::<f64>()).collect(),
            rho: r.gen::<f64>() * 5.0,
            rho_lr: 0.25,
            update_period: 1,
        };
        let inputs = [p, regrets];
        let budget = finite_difference_check_many(
            |t, v| outer_loss_budget(t, v[0], v[1], gamma).map_err(to_diff),
            &inputs,
            1e-3,
        )
        .map_err(|e| e.to_string())?;
        let lagrangian = finite_difference_check_many(
            |t, v| outer_loss_lagrangian(t, v[0], v[1], &state).map_err(to_diff),
            &inputs,
            1e-3,
        )
        .map_err(|e| e.to_string())?;
        losses = losses.max(budget).max(lagrangian);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        layers <= 1e-4 && losses <= 1e-4 && secs < 60.0,
        format!("worst relative error: layers {layers:.2e}, outer losses {losses:.2e}; {secs:.1}s"),
    )
}

/// Reorders axes 1 and 2 of a `[B, r, c]` tensor; rows past `rows.len()`
/// stay in place.
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

fn equivariance_gap(mech: &dyn Mechanism<f64>, v: &Tensor<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    let direct: Outcome<f64> = mech.outcome(v).unwrap();
    let permuted = mech.outcome(&reorder(v, rows, cols)).unwrap();
    let a = reorder(&direct.allocation, rows, cols).max_abs_diff(&permuted.allocation);
    let p = reorder_rows(&direct.payment, rows).max_abs_diff(&permuted.payment);
    let q = reorder_rows(&direct.payment_fraction, rows).max_abs_diff(&permuted.payment_fraction);
    a.max(p).max(q)
}

fn equivariance_suite(_: &mut Shared) -> Verdict {
    const ROWS: [usize; 3] = [2, 0, 1];
    const COLS: [usize; 4] = [3, 1, 0, 2];
    let identity: Vec<usize> = (0..3).collect();
    let v = sample_profiles(&SettingSpec::uniform(3, 4), 64, &mut seeded_stream(17));
    let net = |cfg: ArchConfig| MechanismNetwork::<f64>::new(cfg, 8).unwrap();

    let equi = net(ArchConfig::preset(ArchKind::EquivariantNet, "2x3", 0, 0, false));
    let former = net(ArchConfig::preset(ArchKind::RegretFormer, "2x5", 0, 0, false));
    let regretnet = net(ArchConfig::preset(ArchKind::RegretNet, "3x10", 3, 4, false));
    let mut pe_cfg = ArchConfig::preset(ArchKind::RegretFormer, "2x5", 0, 0, false);
    pe_cfg.use_pe = true;
    pe_cfg.pe_mode = PeMode::Features;
    let with_pe = net(pe_cfg);

    let g_equi = equivariance_gap(&equi, &v, &ROWS, &COLS);
    let g_former = equivariance_gap(&former, &v, &ROWS, &COLS);
    let g_regretnet = equivariance_gap(&regretnet, &v, &ROWS, &COLS);
    let g_pe = equivariance_gap(&with_pe, &v, &identity, &COLS);
    check(
        g_equi <= 1e-10 && g_former <= 1e-10 && g_regretnet > 1e-6 && g_pe > 1e-6,
        format!(
            "EquivariantNet {g_equi:.1e}, RegretFormer {g_former:.1e}; witnesses RegretNet {g_regretnet:.2e}, \
             RegretFormer+PE item swap {g_pe:.2e}"
        ),
    )
}

fn desk_regretformer_1x2(shared: &mut Shared) -> Verdict {
    let t = shared.former();
    let (rev, reg, ratio) = (t.revenue, t.regret, t.training_ratio);
    check(
        (0.50..=0.62).contains(&rev) && reg <= 5e-3 && (0.5..=2.5).contains(&ratio),
        format!(
            "revenue {rev:.4} (band 0.50-0.62), regret {reg:.2e} (<= 5e-3), training ratio {ratio:.2} (0.5-2.5); \
             5000 iterations, batch 128, 25 inner steps"
        ),
    )
}

fn budget_monotonicity(shared: &mut Shared) -> Verdict {
    let (lr, lg) = {
        let l = shared.loose();
        (l.revenue, l.regret)
    };
    let t = shared.tight();
    check(
        lg > t.regret && lr >= t.revenue - 0.01,
        format!("R_max 1e-2: revenue {lr:.4} regret {lg:.2e}; R_max 1e-3: revenue {:.4} regret {:.2e}", t.revenue, t.regret),
    )
}

fn dual_fixed_point(_: &mut Shared) -> Verdict {
    let state = |gamma, r_max| DualState { gamma, gamma_lr: 0.5, r_max, r_max_end: 1e-3, r_max_mult: 1.0 };
    let mut worst_fixed = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (gamma, r_max, sum_p) = (rng.gen_range(0.0..10.0), rng.gen_range(1e-4..1e-1), rng.gen_range(0.1..5.0));
        let next = dual_update(&state(gamma, r_max), r_max * sum_p, sum_p);
        worst_fixed = worst_fixed.max((next.gamma - gamma).abs() / gamma.max(1.0));
    }
    let worked = dual_update(&state(1.0, 1e-3), 1e-2, 1.0).gamma;
    let err = (worked - (1.0 + 0.5 * 10f64.ln())).abs();
    check(
        worst_fixed <= 4.0 * f64::EPSILON && err <= 1e-12,
        format!("fixed point drift {worst_fixed:.1e}; worked example gamma {worked:.15} (error {err:.1e})"),
    )
}

fn bits(r: &EvaluationReport) -> Vec<u64> {
    r.regrets.iter().map(|x| x.to_bits()).collect()
}

fn cross_misreport_identity(shared: &mut Shared) -> Verdict {
    let setting = SettingSpec::uniform(1, 2);
    let v = sample_profiles::<f64>(&setting, 512, &mut seeded_stream(21));
    let eval = EvalConfig { inner_steps: 1000, ..EvalConfig::default() };
    let rn = shared.tight().net.clone();
    let own = evaluate_mechanism(&rn, &setting, &v, &eval, None).map_err(|e| e.to_string())?;
    let same = cross_misreport_regret(&rn, &rn, &setting, &v, &eval).map_err(|e| e.to_string())?;
    let identical = bits(&own) == bits(&same) && own.revenue.to_bits() == same.revenue.to_bits();

    let rf = &shared.former().net;
    let a = cross_misreport_regret(rf, &rn, &setting, &v, &eval).map_err(|e| e.to_string())?;
    let b = cross_misreport_regret(&rn, rf, &setting, &v, &eval).map_err(|e| e.to_string())?;
    let nonneg = a.regrets.iter().chain(&b.regrets).all(|&r| r >= 0.0 && r.is_finite());
    check(
        identical && nonneg,
        format!(
            "self-cross bitwise identical: {identical}; RegretFormer probed by RegretNet {:.2e}, \
             RegretNet probed by RegretFormer {:.2e}",
            a.regret_mean, b.regret_mean
        ),
    )
}

/// Largest gap between the gradient estimate and the grid oracle, and how
/// many of the found misreports lie strictly inside the value box.
fn oracle_gap(mech: &MechanismNetwork<f64>) -> Result<(f64, usize), String> {
    let setting = SettingSpec::uniform(1, 2);
    let v = sample_profiles::<f64>(&setting, 100, &mut seeded_stream(8));
    let est = optimize_misreports(mech, &v, &setting.support(), 1000, 0.1, None).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for s in 0..100 {
        let p = ValuationProfile::from_tensor(&v, s).map_err(|e| e.to_string())?;
        let exact = exact_regret_oracle::<f64, _>(mech, &p, 0, 51, &setting.support()).map_err(|e| e.to_string())?;
        worst = worst.max((exact - est.regret.data()[s]).abs());
    }
    let interior = est.misreports.data().chunks(2).filter(|b| b.iter().any(|&x| x > 1e-9 && x < 1.0 - 1e-9)).count();
    Ok((worst, interior))
}

fn oracle_agreement(_: &mut Shared) -> Verdict {
    let mut arch = ArchConfig::preset(ArchKind::RegretNet, "1x2", 1, 2, true);
    arch.hidden = 16;
    arch.layers = 2;
    let mech = MechanismNetwork::<f64>::new(arch, 7).unwrap();
    let (random, random_inside) = oracle_gap(&mech)?;
    // A random network's best lie is usually a corner of the box; a briefly
    // trained one has interior optima, which is the harder case.
    let mut cfg = TrainConfig::desk(7);
    cfg.outer_iterations = 400;
    cfg.batch_size = 64;
    cfg.inner_steps_train = 10;
    cfg.inner_steps_valid = 50;
    cfg.validation_interval = 400;
    cfg.validation_size = 64;
    let mut trainer = Trainer::new(mech, SettingSource::preset("1x2").unwrap(), cfg).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;
    let (trained, trained_inside) = oracle_gap(&trainer.net)?;
    check(
        random <= 5e-3 && trained <= 5e-3,
        format!(
            "largest disagreement over 100 profiles: random {random:.2e} ({random_inside} interior optima), \
             after 400 iterations {trained:.2e} ({trained_inside} interior)"
        ),
    )
}

fn ir_and_normalization(_: &mut Shared) -> Verdict {
    let (mut min_utility, mut max_col_err) = (f64::INFINITY, 0.0f64);
    for (n, m, label) in [(1, 2, "1x2"), (2, 3, "2x3"), (3, 10, "3x10")] {
        let setting = SettingSpec::uniform(n, m);
        let v = sample_profiles::<f64>(&setting, 10_000, &mut seeded_stream(40 + n as u64));
        for kind in [ArchKind::RegretNet, ArchKind::EquivariantNet, ArchKind::RegretFormer] {
            let mech = MechanismNetwork::<f64>::new(ArchConfig::preset(kind, label, n, m, true), 5).unwrap();
            for chunk in v.data().chunks(500 * n * m) {
                let v = Tensor::new([chunk.len() / (n * m), n, m], chunk.to_vec()).unwrap();
                let out = mech.outcome(&v).map_err(|e| e.to_string())?;
                let rows = out.allocation.shape()[1];
                for b in 0..v.shape()[0] {
                    for i in 0..n {
                        let value: f64 = (0..m).map(|j| out.allocation.at(&[b, i, j]) * v.at(&[b, i, j])).sum();
                        min_utility = min_utility.min(value - out.payment.at(&[b, i]));
                    }
                    for j in 0..m {
                        let col: f64 = (0..rows).map(|i| out.allocation.at(&[b, i, j])).sum();
                        max_col_err = max_col_err.max((col - 1.0).abs());
                    }
                }
            }
        }
    }
    check(
        min_utility >= -1e-9 && max_col_err <= 1e-6,
        format!("smallest truthful utility {min_utility:.2e}; largest column-sum error {max_col_err:.1e} (3 settings x 3 architectures)"),
    )
}

fn distillation_sanity(shared: &mut Shared) -> Verdict {
    let setting = SettingSpec::uniform(1, 2);
    let source = SettingSource::preset("1x2").unwrap();
    let copy_of = MechanismNetwork::<f64>::new(ArchConfig::preset(ArchKind::RegretFormer, "1x2", 1, 2, true), 8).unwrap();
    let v = sample_profiles::<f64>(&setting, 1024, &mut seeded_stream(9));
    let kl = distillation_kl(&copy_of, &copy_of.clone(), &v).map_err(|e| e.to_string())?;

    let teacher = &shared.former().net;
    let student = MechanismNetwork::new(ArchConfig::preset(ArchKind::RegretNet, "1x2", 1, 2, true), 3).unwrap();
    let cfg = DistillConfig { eval_samples: 4096, ..DistillConfig::default() };
    let (_, report) = distill(teacher, student, &source, &cfg).map_err(|e| e.to_string())?;
    let gap = (report.student_revenue - report.teacher_revenue).abs();
    check(
        kl <= 1e-10 && gap <= 0.02,
        format!(
            "self-distillation KL {kl:.1e}; RegretFormer -> RegretNet revenue {:.4} -> {:.4} (gap {gap:.4}), \
             student regret {:.2e}",
            report.teacher_revenue, report.student_revenue, report.regret[1][1]
        ),
    )
}

fn cli_runs_are_deterministic(_: &mut Shared) -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[run]\nseed = 5\nworkers = 1\nrecord_wall_time = false\n\n[setting]\npreset = \"1x2\"\n\n\
         [architecture]\nkind = \"regretnet\"\nhidden = 16\n\n[training]\nouter_iterations = 300\nbatch_size = 64\n\
         inner_steps_train = 10\ninner_steps_valid = 100\nvalidation_interval = 100\nvalidation_size = 256\n",
    )
    .map_err(|e| e.to_string())?;
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let argv = ["mechnet", "train", "--config", config.to_str().unwrap(), "--output-dir", out.to_str().unwrap()];
        let (mut stdout, mut stderr) = (Vec::new(), Vec::new());
        let code = mechnet_cli::run_with_output(argv, &mut stdout, &mut stderr);
        if code != 0 {
            return Err(format!("train exited {code}: {}", String::from_utf8_lossy(&stderr)));
        }
        csvs.push(std::fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?);
    }
    let rows = String::from_utf8_lossy(&csvs[0]).lines().count() - 1;
    check(csvs[0] == csvs[1] && rows == 3, format!("two 300-iteration runs: {rows} rows, byte-identical: {}", csvs[0] == csvs[1]))
}

type Criterion = (usize, &'static str, fn(&mut Shared) -> Verdict);

const CRITERIA: [Criterion; 11] = [
    (1, "analytic baselines", baselines_match_known_revenues),
    (2, "gradient correctness", gradients_match_finite_differences),
    (3, "equivariance", equivariance_suite),
    (4, "desk 1x2 RegretFormer", desk_regretformer_1x2),
    (5, "budget monotonicity", budget_monotonicity),
    (6, "dual fixed point", dual_fixed_point),
    (7, "cross-misreport identity", cross_misreport_identity),
    (8, "oracle agreement", oracle_agreement),
    (9, "IR and normalization", ir_and_normalization),
    (10, "distillation sanity", distillation_sanity),
    (11, "determinism", cli_runs_are_deterministic),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let (mut passed, mut total) = (0, 0);
    for (id, name, criterion) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        total += 1;
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(|| criterion(&mut shared)))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Ok(d) => {
                passed += 1;
                ("PASS", d)
            }
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} [{tag}] {name}: {detail} ({secs:.1}s)");
    }
    println!("acceptance: {passed}/{total} criteria passed");
    if passed != total {
        std::process::exit(1);
    }
}
