use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use proptest::prelude::*;
use trajdiff::cli::commands::{
    cmd_eval, cmd_eval_baseline, cmd_gen_data, cmd_render, cmd_train, BEST_CKPT, LAST_CKPT, LOG_FILE, TEST_FILE,
    TRAIN_FILE, VAL_FILE,
};
use trajdiff::cli::RunConfig;
use trajdiff::train::{log_header, Placement};

fn scratch_dir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("trajdiff-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn tiny(root: &Path) -> RunConfig {
    RunConfig {
        seed: 7,
        dataset: root.join("data"),
        episodes: 40,
        batch: 8,
        epochs: 2,
        candidates: 5,
        out_dir: root.join("run"),
        ..RunConfig::default()
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_deterministic_and_splits_are_disjoint() {
    let root = scratch_dir("gen");
    let cfg = tiny(&root);
    let s = cmd_gen_data(&cfg).unwrap();
    assert_eq!(s.train.len() + s.val.len() + s.test.len(), 40);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (32, 4, 4));
    let first: Vec<Vec<u8>> = [TRAIN_FILE, VAL_FILE, TEST_FILE].iter().map(|f| read(&cfg.dataset.join(f))).collect();
    cmd_gen_data(&cfg).unwrap();
    for (f, bytes) in [TRAIN_FILE, VAL_FILE, TEST_FILE].iter().zip(&first) {
        assert_eq!(&read(&cfg.dataset.join(f)), bytes, "{f}");
    }
    let train_seeds: HashSet<u64> = s.train.iter().map(|r| r.scene.seed).collect();
    for r in s.test.iter().chain(&s.val) {
        assert!(!train_seeds.contains(&r.scene.seed));
    }
    std::fs::remove_dir_all(&root).unwrap();
}

#[test]
fn train_resume_and_eval_are_reproducible() {
    let root = scratch_dir("train");
    let cfg = tiny(&root);
    cmd_gen_data(&cfg).unwrap();

    let logs = cmd_train(&cfg, false, None).unwrap();
    assert_eq!(logs.len(), 2);
    let log = String::from_utf8(read(&cfg.out_dir.join(LOG_FILE))).unwrap();
    assert_eq!(log.lines().next().unwrap(), log_header());
    assert_eq!(log.lines().count(), 3);
    for l in &logs {
        assert!(l.l_diff.is_finite() && l.l_rep.is_finite() && l.val_l_diff.is_finite());
    }

    // the same run split in two
    let split = RunConfig {
        out_dir: root.join("split"),
        ..cfg.clone()
    };
    assert_eq!(cmd_train(&split, false, Some(1)).unwrap().len(), 1);
    let rest = cmd_train(&split, true, None).unwrap();
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0].csv_row(), logs[1].csv_row());
    for f in [LOG_FILE, BEST_CKPT, LAST_CKPT] {
        assert_eq!(read(&split.out_dir.join(f)), read(&cfg.out_dir.join(f)), "{f}");
    }

    let ckpt = cfg.out_dir.join(BEST_CKPT);
    let a = cmd_eval(&cfg, &ckpt, false).unwrap();
    let first = read(&a.csv_path);
    let b = cmd_eval(&cfg, &ckpt, false).unwrap();
    assert_eq!(read(&b.csv_path), first);
    assert_eq!(a.rows.len(), 4);

    let single = RunConfig {
        candidates: 1,
        ..cfg.clone()
    };
    for r in cmd_eval(&single, &ckpt, false).unwrap().rows {
        assert_eq!(r.diversity, 0.0);
        assert_eq!(r.n_surviving, 1);
    }

    let cv = cmd_eval_baseline(&cfg).unwrap();
    assert!(cv.csv_path.ends_with("metrics_cv.csv"));
    assert!(cv.rows.iter().all(|r| r.diversity == 0.0));

    let svg_path = root.join("r.svg");
    let n30 = RunConfig {
        candidates: 30,
        ..cfg.clone()
    };
    let svg = cmd_render(&n30, Some(&ckpt), 0, &svg_path).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 30);
    assert_eq!(svg.matches(r#"class="selected""#).count(), 1);
    let again = cmd_render(&n30, Some(&ckpt), 0, &svg_path).unwrap();
    assert_eq!(svg, again);
    assert_eq!(cmd_render(&cfg, None, 1, &svg_path).unwrap().matches("<polyline").count(), 1);
    std::fs::remove_dir_all(&root).unwrap();
}

#[test]
fn zero_beta_still_logs_the_penalty() {
    let root = scratch_dir("beta0");
    let cfg = RunConfig {
        beta: 0.0,
        epochs: 1,
        ..tiny(&root)
    };
    cmd_gen_data(&cfg).unwrap();
    let logs = cmd_train(&cfg, false, None).unwrap();
    assert!(logs[0].l_rep > 0.0);
    let off = RunConfig {
        placement: Placement::Off,
        out_dir: root.join("off"),
        ..cfg.clone()
    };
    assert!(cmd_train(&off, false, None).unwrap()[0].l_rep > 0.0);
    std::fs::remove_dir_all(&root).unwrap();
}

fn run_bin(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_trajdiff")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn binary_reports_error_classes_through_exit_codes() {
    let root = scratch_dir("bin");
    let (code, _) = run_bin(&["gen-data", "--episodes", "5", "--dataset", root.to_str().unwrap()]);
    assert_eq!(code, 2);
    let missing = root.join("nowhere");
    let (code, err) = run_bin(&["eval", "--baseline", "cv", "--dataset", missing.to_str().unwrap()]);
    assert_eq!(code, 3);
    assert!(err.contains("nowhere"));
    let cfg_file = root.join("bad.toml");
    std::fs::write(&cfg_file, "stepz = 3\n").unwrap();
    let (code, _) = run_bin(&["gen-data", "-c", cfg_file.to_str().unwrap()]);
    assert_eq!(code, 2);
    let data = root.join("d");
    let (code, _) = run_bin(&["gen-data", "--episodes", "20", "--dataset", data.to_str().unwrap()]);
    assert_eq!(code, 0);
    std::fs::write(data.join(TEST_FILE), "{not json\n").unwrap();
    let (code, _) = run_bin(&["eval", "--baseline", "cv", "--dataset", data.to_str().unwrap(), "-o", root.to_str().unwrap()]);
    assert_eq!(code, 4);
    std::fs::remove_dir_all(&root).unwrap();
}

fn any_config() -> impl Strategy<Value = RunConfig> {
    (
        0..=i64::MAX as u64,
        "[a-z]{1,8}(/[a-z0-9_]{1,8}){0,2}",
        20usize..100_000,
        1usize..=1000,
        2usize..512,
        (0.0f64..1.0, 1usize..200, 1usize..500, 1e-6f64..1e-1),
        prop_oneof![Just(Placement::Outer), Just(Placement::Inner), Just(Placement::Off)],
    )
        .prop_map(|(seed, dir, episodes, steps, batch, (beta, candidates, epochs, max_lr), placement)| RunConfig {
            seed,
            dataset: PathBuf::from(&dir),
            episodes,
            steps,
            batch,
            beta,
            candidates,
            epochs,
            max_lr,
            placement,
            out_dir: PathBuf::from(dir).join("out"),
        })
}

#[test]
fn seeds_beyond_toml_integers_are_rejected() {
    let cfg = RunConfig { seed: u64::MAX, ..RunConfig::default() };
    assert!(cfg.validate().is_err());
}

proptest! {
    #[test]
    fn config_round_trips(cfg in any_config()) {
        prop_assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }
}
