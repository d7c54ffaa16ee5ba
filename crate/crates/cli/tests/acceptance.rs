//! End-to-end acceptance run: one line per criterion, then a single
//! assertion that all of them held.

use std::path::Path;
use std::process::Command as Process;
use std::time::Instant;

use hot_cli::config::{AblateConfig, BenchConfig, BenchSeries, GradcheckConfig, TrainCommandConfig};
use hot_cli::{reproducible_outputs, run, Command, Report, RunConfig};
use hot_model::layer::AttentionVariant;

struct Outcome {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn all_pass(report: &Report, prefix: &str) -> bool {
    let matching: Vec<_> = report.assertions.iter().filter(|a| a.name.starts_with(prefix)).collect();
    !matching.is_empty() && matching.iter().all(|a| a.pass)
}

fn value(report: &Report, name: &str) -> f64 {
    report.assertion(name).map_or(f64::NAN, |a| a.value)
}

fn timed(cfg: &RunConfig) -> (Report, f64) {
    let t = Instant::now();
    let report = run(cfg).expect("run");
    (report, t.elapsed().as_secs_f64())
}

fn run_binary(cfg: &RunConfig, dir: &Path) {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string(cfg).unwrap()).unwrap();
    let out = dir.join("out");
    let status = Process::new(env!("CARGO_BIN_EXE_hot"))
        .arg(cfg.command.name())
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .output()
        .expect("spawn hot");
    assert!(
        status.status.code() == Some(0) || status.status.code() == Some(1),
        "{}: {}",
        cfg.command.name(),
        String::from_utf8_lossy(&status.stderr)
    );
}

/// Small configurations for the rerun comparison.
fn rerun_configs() -> Vec<RunConfig> {
    let mut out = Vec::new();
    for c in [Command::Equiv, Command::Kronrank] {
        out.push(RunConfig::new(c));
    }
    let mut g = RunConfig::new(Command::Gradcheck);
    g.gradcheck = Some(GradcheckConfig {
        seeds: 1,
        ..GradcheckConfig::default()
    });
    out.push(g);
    let mut b = RunConfig::new(Command::Bench);
    b.bench = Some(BenchConfig {
        series: vec![BenchSeries {
            variant: AttentionVariant::FactoredLinear,
            shapes: vec![vec![8, 8], vec![12, 12], vec![16, 16]],
            slope: None,
            memory_linear: true,
        }],
        ..BenchConfig::default()
    });
    out.push(b);
    let mut a = RunConfig::new(Command::Ablate);
    a.ablate = Some(AblateConfig {
        steps: 10,
        seeds: 2,
        ..AblateConfig::default()
    });
    out.push(a);
    let mut t = RunConfig::new(Command::Train);
    let mut tc = TrainCommandConfig::default();
    tc.train.steps = 10;
    tc.train.eval_every = 5;
    tc.min_decrease = 0.0;
    t.train = Some(tc);
    out.push(t);
    out
}

fn main() {
    let mut outcomes = Vec::new();

    let (equiv, equiv_secs) = timed(&RunConfig::new(Command::Equiv));
    outcomes.push(Outcome {
        id: 1,
        title: "factorized softmax equals materialized Kronecker",
        pass: all_pass(&equiv, "oracle-equivalence") && equiv_secs < 60.0,
        detail: format!("max |Δ| {:e}, suite {equiv_secs:.1} s", value(&equiv, "oracle-equivalence")),
    });
    outcomes.push(Outcome {
        id: 2,
        title: "matricization identity on order-4 tensors",
        pass: all_pass(&equiv, "matricization-identity"),
        detail: format!("max |Δ| {:e}", value(&equiv, "matricization-identity")),
    });

    let (kron, _) = timed(&RunConfig::new(Command::Kronrank));
    outcomes.push(Outcome {
        id: 3,
        title: "universality of Kronecker sums",
        pass: all_pass(&kron, "exact-at-bound/random/3x3")
            && all_pass(&kron, "monotone/")
            && all_pass(&kron, "planted-rank-one/"),
        detail: format!(
            "R=9 error {:e}, planted R=1 error {:e}",
            value(&kron, "exact-at-bound/random/3x3"),
            value(&kron, "planted-rank-one/3x3")
        ),
    });

    outcomes.push(Outcome {
        id: 4,
        title: "unit row sums",
        pass: all_pass(&equiv, "row-sum/"),
        detail: format!(
            "softmax {:e}, kernel {:e}",
            value(&equiv, "row-sum/softmax"),
            value(&equiv, "row-sum/kernel")
        ),
    });
    outcomes.push(Outcome {
        id: 5,
        title: "random-feature kernel fidelity",
        pass: all_pass(&equiv, "kernel-estimate") && all_pass(&equiv, "kernel-fidelity"),
        detail: format!(
            "estimate rel. error {:.4}, output rel. Frobenius {:.4}",
            value(&equiv, "kernel-estimate"),
            value(&equiv, "kernel-fidelity")
        ),
    });

    let (grad, grad_secs) = timed(&RunConfig::new(Command::Gradcheck));
    let worst_grad = grad
        .assertions
        .iter()
        .filter(|a| a.name.starts_with("gradient/"))
        .map(|a| a.value)
        .fold(0.0, f64::max);
    outcomes.push(Outcome {
        id: 6,
        title: "analytic gradients match finite differences",
        pass: all_pass(&grad, "gradient/") && grad_secs < 300.0,
        detail: format!("worst rel. error {worst_grad:e}, suite {grad_secs:.1} s"),
    });

    let (bench, _) = timed(&RunConfig::new(Command::Bench));
    outcomes.push(Outcome {
        id: 7,
        title: "complexity slopes",
        pass: all_pass(&bench, "time-slope/factored-linear")
            && all_pass(&bench, "time-slope/full-softmax")
            && all_pass(&bench, "memory-linear/factored-linear"),
        detail: format!(
            "factored-linear {:.3}, full-softmax {:.3}, memory ratio {:.3}",
            value(&bench, "time-slope/factored-linear"),
            value(&bench, "time-slope/full-softmax"),
            value(&bench, "memory-linear/factored-linear")
        ),
    });

    let (ablate, ablate_secs) = timed(&RunConfig::new(Command::Ablate));
    let cells = ablate.table("ablate_cells").expect("cell table");
    let loss_col = cells.column("mean_train_loss").unwrap();
    let means: Vec<String> = cells
        .rows
        .iter()
        .map(|r| format!("{}={}", r[2].render(), r[loss_col].render()))
        .collect();
    outcomes.push(Outcome {
        id: 8,
        title: "ablation ordering",
        pass: all_pass(&ablate, "ordering/") && all_pass(&ablate, "params-equal/") && ablate_secs < 900.0,
        detail: format!("{}, run {ablate_secs:.0} s", means.join(" ")),
    });

    outcomes.push(Outcome {
        id: 9,
        title: "single-mode variants reduce to standard attention",
        pass: all_pass(&equiv, "reduction/"),
        detail: AttentionVariant::ALL
            .iter()
            .map(|v| format!("{} {:e}", v.name(), value(&equiv, &format!("reduction/{}", v.name()))))
            .collect::<Vec<_>>()
            .join(", "),
    });

    let tmp = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    for cfg in rerun_configs() {
        let name = cfg.command.name();
        let dirs: Vec<_> = (0..2).map(|i| tmp.path().join(format!("{name}-{i}"))).collect();
        for d in &dirs {
            std::fs::create_dir_all(d).unwrap();
            run_binary(&cfg, d);
        }
        let a = reproducible_outputs(&dirs[0].join("out")).unwrap();
        let b = reproducible_outputs(&dirs[1].join("out")).unwrap();
        if a.is_empty() || a != b {
            mismatched.push(name);
        }
    }
    outcomes.push(Outcome {
        id: 10,
        title: "reruns are byte-identical",
        pass: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            "all six commands".into()
        } else {
            format!("differs: {mismatched:?}")
        },
    });

    for o in &outcomes {
        println!(
            "criterion {:>2} {}: {} ({})",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.title,
            o.detail
        );
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", outcomes.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
