use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command as Process;
use std::time::Instant;

use aftk::cli::{self, cmd_gradcheck, main_with_args, Profile, RunConfig, Split, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_OK};
use aftk::gradsuite::{broken_case, registry};
use aftk::propagation::{LabelKind, Mode};
use aftk::synthetic::SceneSpec;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("aftk").chain(args.iter().copied()))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.display().to_string()
}

#[test]
fn default_profile_sizes_the_corpus() {
    let cfg = RunConfig::resolve(None, None, None, None).unwrap();
    assert_eq!(cfg.profile, Profile::Full);
    assert_eq!(cfg.corpus.train_videos, 64);
    assert_eq!(cfg.corpus.eval_videos, 16);
    let smoke = RunConfig::resolve(None, Some(Profile::Smoke), None, None).unwrap();
    assert_eq!(smoke.corpus.train_videos, 4);
    assert_eq!((smoke.train.warmup_epochs, smoke.train.joint_epochs), (1, 1));
}

#[test]
fn flags_override_file_and_file_overrides_profile() {
    let text = "seed = 5\n[train]\nwarmup_epochs = 3\n[propagate.config]\nmode = \"track\"\n";
    let cfg = RunConfig::resolve(Some(text), Some(Profile::Smoke), None, None).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.train.warmup_epochs, 3);
    assert_eq!(cfg.train.joint_epochs, 1);
    assert_eq!(cfg.propagate.config.mode, Mode::Track);
    let cfg = RunConfig::resolve(Some(text), Some(Profile::Smoke), Some(9), Some(Mode::Global)).unwrap();
    assert_eq!((cfg.seed, cfg.train.seed), (9, 9));
    assert_eq!(cfg.propagate.config.mode, Mode::Global);
}

#[test]
fn effective_config_round_trips() {
    let cfg = RunConfig::resolve(None, Some(Profile::Smoke), Some(3), Some(Mode::Track)).unwrap();
    let again = RunConfig::resolve(Some(&cfg.to_toml()), None, None, None).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn unknown_keys_and_bad_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[corpus.scene]\nwidth = 100\n").unwrap();
    assert_eq!(run(&["gen", "--config", bad.to_str().unwrap(), "--out", &out]), EXIT_CONFIG);
    fs::write(&bad, "[train]\nbogus = 1\n").unwrap();
    assert_eq!(run(&["gen", "--config", bad.to_str().unwrap(), "--out", &out]), EXIT_CONFIG);
    assert_eq!(run(&["gen", "--profile", "huge", "--out", &out]), EXIT_CONFIG);
    assert_eq!(run(&["nonsense"]), EXIT_CONFIG);
    let missing = dir.path().join("absent.toml");
    assert_eq!(run(&["gen", "--config", missing.to_str().unwrap(), "--out", &out]), EXIT_CONFIG);
}

#[test]
fn gen_is_byte_identical_on_rerun_and_from_its_echo() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["gen", "--profile", "smoke", "--seed", "4", "--out", a.to_str().unwrap()]), EXIT_OK);
    let first = snapshot(&a);
    assert_eq!(run(&["gen", "--profile", "smoke", "--seed", "4", "--out", a.to_str().unwrap()]), EXIT_OK);
    assert_eq!(snapshot(&a), first);
    let echo = a.join("gen.config.toml");
    assert_eq!(run(&["gen", "--config", echo.to_str().unwrap(), "--out", b.to_str().unwrap()]), EXIT_OK);
    assert_eq!(snapshot(&b), first);
    let train = first.keys().filter(|k| k.starts_with("corpus/train/") && k.ends_with("manifest.json")).count();
    assert_eq!(train, 4);
}

#[test]
fn missing_prerequisites_exit_with_dependency_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(run(&["pretrain-color", "--profile", "smoke", "--out", &out]), EXIT_MISSING);
    assert_eq!(run(&["gen", "--profile", "smoke", "--out", &out]), EXIT_OK);
    assert_eq!(run(&["train", "--profile", "smoke", "--out", &out]), EXIT_MISSING);
    assert_eq!(run(&["evaluate", "--profile", "smoke", "--out", &out]), EXIT_MISSING);
    assert_eq!(run(&["propagate", "--profile", "smoke", "--out", &out]), EXIT_MISSING);
}

#[test]
fn oracle_propagation_on_translation_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::for_profile(Profile::Smoke);
    cfg.corpus.scene = SceneSpec::translation_oracle();
    cfg.propagate.oracle = true;
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(run(&["gen", "--config", &config, "--out", out]), EXIT_OK);
    for mode in ["global", "track"] {
        cfg.propagate.config.mode = if mode == "track" { Mode::Track } else { Mode::Global };
        let videos = cli::load_split(Path::new(out), Split::Eval).unwrap();
        let summary = cli::propagate_split(&cfg, &videos, None, None).unwrap();
        assert!((summary.j_mean.unwrap() - 1.0).abs() < 1e-6, "{mode}: {:?}", summary.j_mean);
        assert_eq!(run(&["propagate", "--config", &config, "--mode", mode, "--out", out]), EXIT_OK);
        let written = Path::new(out).join(format!("propagate/eval-{mode}-oracle"));
        assert!(written.join("summary.json").is_file());
        assert!(written.join("000/015.png").is_file());
    }
    cfg.propagate.kind = LabelKind::KeypointHeatmap;
    let videos = cli::load_split(Path::new(out), Split::Eval).unwrap();
    let pck = cli::propagate_split(&cfg, &videos, None, None).unwrap().pck_mean.unwrap();
    assert_eq!(pck, [1.0, 1.0]);
}

#[test]
fn texture_maps_propagate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::for_profile(Profile::Smoke);
    cfg.corpus.scene = SceneSpec::translation_oracle();
    cfg.propagate.oracle = true;
    cfg.propagate.kind = LabelKind::Texture;
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    assert_eq!(run(&["gen", "--config", &config, "--out", out.to_str().unwrap()]), EXIT_OK);
    assert_eq!(run(&["propagate", "--config", &config, "--out", out.to_str().unwrap()]), EXIT_OK);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("propagate/eval-global-oracle/summary.json")).unwrap()).unwrap();
    let frames = summary["videos"][0]["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 16);
    for f in frames {
        // Exact transport of cell colors keeps each cell within a few Lab units.
        assert!(f["lab_error"].as_f64().unwrap() < 5.0, "{f}");
    }
    assert!(out.join("propagate/eval-global-oracle/000/015.png").is_file());
}

#[test]
fn gradcheck_report_names_failing_operations() {
    let (code, reports) = cmd_gradcheck(&[broken_case()], 3, 0, None).unwrap();
    assert_eq!(code, EXIT_NUMERIC);
    assert_eq!(reports[0].name, "broken_square");
    assert!(!reports[0].passed);
    let cases: Vec<_> = registry().into_iter().take(3).collect();
    let (code, reports) = cmd_gradcheck(&cases, 5, 0, None).unwrap();
    assert_eq!(code, EXIT_OK);
    assert!(reports.iter().all(|r| r.passed && r.max_rel_error < 1e-4));
}

#[test]
fn smoke_pipeline_runs_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let start = Instant::now();
    for cmd in ["gen", "pretrain-color", "train", "propagate", "evaluate"] {
        assert_eq!(run(&[cmd, "--profile", "smoke", "--seed", "1", "--out", &out]), EXIT_OK, "{cmd}");
        assert!(dir.path().join(format!("{cmd}.config.toml")).is_file());
    }
    assert!(start.elapsed().as_secs() < 300, "smoke pipeline took {:?}", start.elapsed());
    let eval: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("evaluation.json")).unwrap()).unwrap();
    for key in ["trained_j", "untrained_j", "static_j", "same_color_global_j", "same_color_track_j"] {
        let v = eval[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert_eq!(run(&["train", "--profile", "smoke", "--seed", "1", "--resume", "--out", &out]), EXIT_OK);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_aftk");
    let dir = tempfile::tempdir().unwrap();
    let status = Process::new(bin).args(["train", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_MISSING));
    assert!(String::from_utf8_lossy(&status.stderr).contains("pretrain-color"));
    let status = Process::new(bin).arg("--bogus").output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_CONFIG));
    let status = Process::new(bin).arg("--help").output().unwrap();
    assert_eq!(status.status.code(), Some(EXIT_OK));
}
