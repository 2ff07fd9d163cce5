use mvexec::cli::{self, Command, Common, InferArgs};
use mvexec::config::RunConfig;
use mvexec::market::Noise;
use mvexec::solver::{self, derive_seed, TrainRun};
use std::fs;
use std::path::{Path, PathBuf};

const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");

fn bundled(name: &str) -> RunConfig {
    RunConfig::load(&Path::new(CONFIGS).join(name)).unwrap()
}

/// Two agents, one asset, small enough to train in a second or two.
fn tiny() -> RunConfig {
    let mut c = bundled("exp1_table4.json");
    c.solver.steps = 4;
    c.solver.paths = 48;
    c.solver.train_paths = 16;
    c.solver.max_epochs = 3;
    c.solver.psi_max_iter = 1;
    c.solver.ensemble = 2;
    c.solver.net.levels = 2;
    c.evaluation.paths = 200;
    c
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn common(config: &Path, out: &Path) -> Common {
    Common { config: config.to_path_buf(), out: Some(out.to_path_buf()), seed: None, ensemble: None, verbose: false }
}

#[test]
fn every_bundled_config_validates() {
    let mut n = 0;
    for entry in fs::read_dir(CONFIGS).unwrap() {
        let p = entry.unwrap().path();
        let cfg = RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(!cfg.description.is_empty(), "{}", p.display());
        n += 1;
    }
    assert!(n >= 6);
}

#[test]
fn simulate_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.solver.paths = 6;
    let config = write_config(tmp.path(), &cfg);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cli::run(&Command::Simulate(common(&config, &a))).unwrap();
    cli::run(&Command::Simulate(common(&config, &b))).unwrap();
    for f in ["paths.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("paths.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with(",manifest"));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"experiment": "x"}"#).unwrap();
    let out = tmp.path().join("out");
    let run = |args: &[&str]| cli::main_with(std::iter::once("mvexec").chain(args.iter().copied()));
    assert_eq!(run(&["simulate", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]), 2);
    let missing = tmp.path().join("missing.json");
    assert_eq!(run(&["simulate", "--config", missing.to_str().unwrap()]), 4);
    assert_eq!(run(&["simulate", "--bogus"]), 2);
    let no_ckpt = write_config(tmp.path(), &tiny());
    assert_eq!(
        run(&["infer", "--config", no_ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(), "--checkpoints", tmp.path().join("none").to_str().unwrap()]),
        4
    );
}

#[test]
fn oracle_subcommand_reports_agreement() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = bundled("oracle_tiny.json");
    let check = cli::oracle(&cfg, tmp.path()).unwrap();
    assert!(check.agrees(1e-8), "{}", check.summary());
    let csv = fs::read_to_string(tmp.path().join("oracle.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn checkpoints_round_trip_and_inference_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("run");
    let (trained, _) = cli::train(&cfg, &out).unwrap();
    let in_memory = cli::run_inference(&cfg, &trained.checkpoints()).unwrap();
    let loaded = cli::load_checkpoints(&out.join("checkpoints"), cfg.market.k()).unwrap();
    assert_eq!(loaded.len(), cfg.solver.ensemble);
    let from_disk = cli::run_inference(&cfg, &loaded).unwrap();
    assert_eq!(in_memory.policy, from_disk.policy);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&in_memory.value), bits(&from_disk.value));
    assert_eq!(bits(&in_memory.holdings), bits(&from_disk.holdings));

    let infer = |name: &str| {
        let dir = tmp.path().join(name);
        let args = InferArgs { common: common(&config, &dir), checkpoints: Some(out.join("checkpoints")) };
        cli::run(&Command::Infer(args)).unwrap();
        dir
    };
    let (a, b) = (infer("a"), infer("b"));
    for f in ["controls.csv", "values.csv", "alpha.svg", "controls.svg", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn training_twice_gives_identical_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.solver.ensemble = 1;
    cli::train(&cfg, &tmp.path().join("a")).unwrap();
    cli::train(&cfg, &tmp.path().join("b")).unwrap();
    for f in ["losses.csv", "checkpoints/member00_agent00.ckpt", "checkpoints/member00_agent01.ckpt"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_and_ensemble_flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny());
    let mut c = common(&config, tmp.path());
    c.seed = Some(99);
    c.ensemble = Some(4);
    let cfg = c.load().unwrap();
    assert_eq!((cfg.seed, cfg.solver.ensemble), (99, 4));
    c.ensemble = Some(0);
    assert!(c.load().is_err());
}

#[test]
fn a_converged_policy_is_reproduced_when_resolved_from_a_later_step() {
    let cfg = tiny();
    let grids = cfg.grids().unwrap();
    let run = TrainRun::new(cfg.market.clone(), grids.clone(), cfg.solver_config()).unwrap();
    let member = run.train_member(run.member_seed(0)).unwrap();
    let n = cfg.solver.steps;
    let noise = Noise::generate(&cfg.market, n, cfg.solver.paths, derive_seed(7, 2)).unwrap();
    let agent = 0;
    let mut policy = member.policy.clone();
    let mut converged = false;
    for _ in 0..20 {
        let tail = solver::resweep_tail(&cfg.market, &grids, &member.checkpoints, &policy, member.psi[agent], agent, &noise, 0).unwrap();
        let mut next = policy.clone();
        for (step, row) in tail.iter().enumerate() {
            for (i, &c) in row.iter().enumerate() {
                next.set(step, agent, i, c);
            }
        }
        if next == policy {
            converged = true;
            break;
        }
        policy = next;
    }
    assert!(converged, "backward sweeps did not settle");
    for start in 1..n {
        let tail = solver::resweep_tail(&cfg.market, &grids, &member.checkpoints, &policy, member.psi[agent], agent, &noise, start).unwrap();
        for (j, row) in tail.iter().enumerate() {
            for (i, &c) in row.iter().enumerate() {
                assert_eq!(c, policy.get(start + j, agent, i), "step {} re-solved from {start}", start + j);
            }
        }
    }
}

#[test]
fn every_csv_carries_the_manifest_column() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let v = cli::validate(&cfg, tmp.path()).unwrap();
    assert!(v.value.is_finite());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    let run_id = manifest["run_id"].as_str().unwrap().to_string();
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        let f = o["file"].as_str().unwrap();
        if f.ends_with(".csv") {
            let text = fs::read_to_string(tmp.path().join(f)).unwrap();
            let mut lines = text.lines();
            assert!(lines.next().unwrap().ends_with(",manifest"), "{f}");
            assert!(lines.all(|l| l.ends_with(&run_id)), "{f}");
        }
    }
}
