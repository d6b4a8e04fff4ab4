//! One line per acceptance criterion; exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ctnet::block::{build_preset, Preset};
use ctnet::cost::count_cost;
use ctnet::net::NetSpec;
use ctnet::report::Report;
use ctnet::rf::{default_probe_input, probe_rf};
use ctnet::synthetic::Task;
use ctnet::tables::run_table;
use ctnet::train::{toy_spec, train_toy, TrainConfig};
use ctnet::verify::{plain_module, run_suite, Suite, SuiteReport};
use ctnet::Result;

const SEED: u64 = 42;

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: impl Into<String>) -> Line {
    Line {
        pass,
        detail: detail.into(),
    }
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

fn cost_tables() -> Result<Line> {
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for id in ["3a", "3b", "3d", "3e", "3f", "3g"] {
        let t0 = Instant::now();
        let r = run_table(id)?;
        if !r.pass() || t0.elapsed() > Duration::from_secs(1) {
            failed.push(id);
        }
        worst = r.rows.iter().map(|x| x.rel_error.abs()).fold(worst, f64::max);
    }
    Ok(line(failed.is_empty(), format!("worst rel err {:.2}%, failing tables {failed:?}", 100.0 * worst)))
}

fn param_counts() -> Result<Line> {
    let r = run_table("params")?;
    let d: Vec<String> = r.rows.iter().map(|x| format!("{} {:.2}M (ref {})", x.label, x.computed, x.published)).collect();
    Ok(line(r.pass(), d.join(", ")))
}

fn suite_line(r: &SuiteReport, extra: (bool, String)) -> Line {
    line(
        r.pass() && extra.0,
        format!("{}/{} cases, max err {:.2e}, {}", r.passed(), r.cases.len(), r.max_error(), extra.1),
    )
}

fn equivalence() -> Result<Line> {
    let t = Instant::now();
    let r = run_suite(Suite::Equivalence, SEED, 100)?;
    let ok = r.cases.len() >= 100 && r.cases.iter().all(|c| c.tolerance <= 1e-10);
    let w = within(t, Duration::from_secs(60));
    Ok(suite_line(&r, (ok && w.0, w.1)))
}

fn degenerate() -> Result<Line> {
    let r = run_suite(Suite::Degenerate, SEED, 1)?;
    let names = ["c3d", "csn", "r21d"];
    let covered = names.iter().all(|n| r.cases.iter().any(|c| c.name.starts_with(n)));
    let tight = r.cases.iter().all(|c| c.tolerance <= 1e-10);
    Ok(suite_line(&r, (covered && tight, "c3d, csn, r21d covered".into())))
}

fn gradients() -> Result<Line> {
    let t = Instant::now();
    let r = run_suite(Suite::Gradients, SEED, 50)?;
    let net = r.cases.iter().find(|c| c.name.starts_with("network"));
    let tol_ok = r
        .cases
        .iter()
        .all(|c| c.tolerance <= if c.name.starts_with("network") { 1e-4 } else { 1e-5 });
    let w = within(t, Duration::from_secs(120));
    Ok(suite_line(&r, (net.is_some_and(|c| c.pass) && tol_ok && w.0, w.1)))
}

fn interaction() -> Result<Line> {
    let r = run_suite(Suite::Interaction, SEED, 1)?;
    // channel counts whose all-sub-op ("complete") matrix was checked
    let mut cs: Vec<usize> = r
        .cases
        .iter()
        .filter(|c| c.name.ends_with("complete"))
        .filter_map(|c| {
            let list = c.name.strip_prefix("f=[")?.split(']').next()?;
            list.split(", ").map(|x| x.parse::<usize>().ok()).product()
        })
        .collect();
    cs.sort();
    cs.dedup();
    let covered = [12, 36, 64].iter().all(|c| cs.contains(c));
    Ok(suite_line(&r, (covered, format!("channel counts {cs:?}"))))
}

fn receptive_field() -> Result<Line> {
    let one = probe_rf(&plain_module(&[64])?, [7, 7, 7])?;
    let two = probe_rf(&plain_module(&[8, 8])?, [9, 9, 9])?;
    let mut all_agree = one.agrees() && two.agrees();
    let mut tried = 2;
    for f in [vec![12], vec![4, 3], vec![2, 3, 4], vec![2, 2, 2, 2]] {
        let m = plain_module(&f)?;
        all_agree &= probe_rf(&m, default_probe_input(&m))?.agrees();
        tried += 1;
    }
    for cfg in [build_preset(Preset::R21d), build_preset(Preset::Csn), build_preset(Preset::C3d)] {
        if let ctnet::block::Middle::Ct(m) = cfg.resolve(16)? {
            all_agree &= probe_rf(&m, default_probe_input(&m))?.agrees();
            tried += 1;
        }
    }
    let pass = one.extents == [3, 3, 3] && two.extents == [5, 5, 5] && all_agree;
    Ok(line(
        pass,
        format!("K=1 {:?}, K=2 {:?}, predictor agrees on {tried} configs: {all_agree}", one.extents, two.extents),
    ))
}

fn toy_training() -> Result<Line> {
    let t = Instant::now();
    let cfg = TrainConfig::default();
    let ct = train_toy::<f32>(Task::Direction4, &toy_spec(Task::Direction4, Preset::Ctnet), &cfg)?.final_val_acc();
    let tsn = train_toy::<f32>(Task::Direction4, &toy_spec(Task::Direction4, Preset::Tsn), &cfg)?.final_val_acc();
    let w = within(t, Duration::from_secs(15 * 60));
    Ok(line(
        ct >= 0.90 && tsn <= 0.35 && w.0,
        format!("seed {} ct val acc {ct:.4} (>= 0.90), tsn val acc {tsn:.4} (<= 0.35), {}", cfg.seed, w.1),
    ))
}

fn outputs() -> Result<Vec<Vec<u8>>> {
    let dir = std::env::temp_dir().join(format!("ctnet-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        train_size: 32,
        val_size: 16,
        ..TrainConfig::default()
    };
    let csv = dir.join("m.csv");
    train_toy::<f32>(Task::Direction4, &toy_spec(Task::Direction4, Preset::Ctnet), &cfg)?.write_csv(&csv)?;
    let spec = NetSpec::resnet50(build_preset(Preset::Ctnet).with_pw(true).with_te(true));
    let m = plain_module(&[8, 8])?;
    let out = vec![
        std::fs::read(&csv)?,
        Report::Cost(count_cost(&spec, 8, 256)?).to_json().into_bytes(),
        Report::Tables(vec![run_table("3a")?]).to_json().into_bytes(),
        Report::Verify(run_suite(Suite::Equivalence, SEED, 10)?).to_json().into_bytes(),
        Report::Verify(run_suite(Suite::Gradients, SEED, 2)?).to_json().into_bytes(),
        Report::Rf(probe_rf(&m, default_probe_input(&m))?).to_json().into_bytes(),
    ];
    std::fs::remove_dir_all(&dir)?;
    Ok(out)
}

fn determinism() -> Result<Line> {
    let (a, b) = (outputs()?, outputs()?);
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    Ok(line(same == a.len(), format!("{same}/{} outputs byte-identical across runs", a.len())))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Line>); 9] = [
        ("cost tables", cost_tables),
        ("parameter counts", param_counts),
        ("tsconv oracle equivalence", equivalence),
        ("degenerate presets", degenerate),
        ("gradient checks", gradients),
        ("channel interaction", interaction),
        ("receptive field", receptive_field),
        ("toy training gap", toy_training),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let l = run().unwrap_or_else(|e| line(false, format!("error: {e}")));
        failures += usize::from(!l.pass);
        println!("criterion {} {:<26} {}  {}", i + 1, name, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
