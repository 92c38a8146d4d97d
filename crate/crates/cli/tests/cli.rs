use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use siv_core::config::{documented_keys, RunConfig};
use siv_core::data::save_image;
use siv_core::Tensor;

fn siv(args: &[&str]) -> Output {
    siv_env(args, &[])
}

fn siv_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_siv"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("siv runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}: {}",
        o.status.code(),
        stderr(o)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Gradient background with a bright square whose position depends on `shift`.
fn write_image(path: &Path, h: usize, w: usize, shift: usize) {
    let img = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        if (10..30).contains(&y) && (20 + shift..40 + shift).contains(&x) {
            0.9 - 0.4 * c as f32
        } else {
            (x as f32 / w as f32) - 0.5 + 0.2 * c as f32 - (y as f32 / h as f32) * 0.3
        }
    });
    save_image(&img, 0, path).unwrap();
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::smoke();
    cfg.training.iterations = 4;
    cfg.training.checkpoint_every = 2;
    let p = dir.join("tiny.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn files_in(dir: &Path) -> BTreeSet<String> {
    std::fs::read_dir(dir).map_or_else(
        |_| BTreeSet::new(),
        |rd| {
            rd.map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect()
        },
    )
}

fn metrics(dir: &Path) -> serde_json::Map<String, serde_json::Value> {
    let text = std::fs::read_to_string(dir.join("metrics.json")).unwrap();
    serde_json::from_str::<serde_json::Value>(&text)
        .unwrap()
        .as_object()
        .unwrap()
        .clone()
}

#[test]
fn help_lists_every_config_key_with_its_origin() {
    let o = siv(&["--help"]);
    assert_ok(&o);
    let help = String::from_utf8(o.stdout).unwrap();
    for k in documented_keys() {
        let line = help
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("{} ", k.key)));
        let line = line.unwrap_or_else(|| panic!("{} missing from help", k.key));
        assert!(
            line.contains(&k.default) && line.contains(k.origin.label()),
            "{line}"
        );
    }
    assert!(help.contains("SIV_NUM_WORKERS"));
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[training]\nlearning_rate = 0.1\n").unwrap();
    let img = dir.path().join("src.png");
    write_image(&img, 64, 96, 0);
    let o = siv(&[
        "train",
        "--config",
        s(&cfg),
        "--source",
        s(&img),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_or_corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = siv(&[
        "generate",
        s(&dir.path().join("nope.siv")),
        "--n",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let bad = dir.path().join("bad.siv");
    std::fs::write(&bad, b"SIVCKPT1 definitely not a checkpoint").unwrap();
    let o = siv(&["generate", s(&bad), "--n", "2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_plugin_weights_exit_4_with_instructions() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("src.png");
    write_image(&img, 64, 96, 0);
    let gen = dir.path().join("gen");
    write_image(&gen.join("a.png"), 64, 96, 0);
    write_image(&gen.join("b.png"), 64, 96, 3);
    let missing = format!("files:{}", s(&dir.path().join("weights.bin")));
    let o = siv(&[
        "evaluate",
        s(&gen),
        "--source",
        s(&img),
        "--plugins",
        &missing,
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("toy"), "{}", stderr(&o));
}

#[test]
fn training_image_against_itself_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("src.png");
    write_image(&img, 64, 96, 0);
    let gen = dir.path().join("gen");
    std::fs::create_dir_all(&gen).unwrap();
    for name in ["a.png", "b.png"] {
        std::fs::copy(&img, gen.join(name)).unwrap();
    }
    let out = dir.path().join("m");
    assert_ok(&siv(&[
        "evaluate",
        s(&gen),
        "--source",
        s(&img),
        "--plugins",
        "toy",
        "--out",
        s(&out),
    ]));
    let m = metrics(&out);
    let keys: BTreeSet<&str> = m.keys().map(String::as_str).collect();
    let want = [
        "sifid.quarter",
        "sifid.eighth",
        "sifid.sixteenth",
        "sifid.global",
        "diversity_lpips",
        "dist_to_train",
        "pixel_diversity",
        "n_generated",
    ];
    assert_eq!(keys, want.into_iter().collect());
    for k in [
        "sifid.quarter",
        "sifid.eighth",
        "sifid.sixteenth",
        "sifid.global",
        "diversity_lpips",
        "pixel_diversity",
    ] {
        assert!(m[k].as_f64().unwrap().abs() < 1e-9, "{k} = {}", m[k]);
    }
    assert_eq!(m["n_generated"].as_f64(), Some(2.0));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().count() >= 2 && csv.contains("dist_to_train"));
}

#[test]
fn frame_directory_is_a_video_source_for_any_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    for i in 0..4 {
        write_image(&frames.join(format!("{i:03}.png")), 64, 96, 2 * i);
    }
    let gen = dir.path().join("gen");
    write_image(&gen.join("a.png"), 64, 96, 1);
    write_image(&gen.join("b.png"), 64, 96, 5);
    let mut reports = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("m{workers}"));
        let o = siv_env(
            &[
                "evaluate",
                s(&gen),
                "--source",
                s(&frames),
                "--out",
                s(&out),
            ],
            &[("SIV_NUM_WORKERS", workers)],
        );
        assert_ok(&o);
        reports.push(std::fs::read_to_string(out.join("metrics.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);

    // An explicit image kind on a directory is a data error.
    let cfg = dir.path().join("image.toml");
    std::fs::write(&cfg, "[source]\nkind = \"single_image\"\n").unwrap();
    let o = siv(&[
        "evaluate",
        s(&gen),
        "--source",
        s(&frames),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_generate_evaluate_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("src.png");
    write_image(&img, 64, 96, 0);
    let cfg = tiny_config(dir.path());
    let (run_a, run_b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&run_a, &run_b] {
        assert_ok(&siv(&[
            "train",
            "--config",
            s(&cfg),
            "--source",
            s(&img),
            "--out",
            s(run),
            "--seed",
            "3",
        ]));
    }
    for f in [
        "checkpoint.siv",
        "loss.csv",
        "config.toml",
        "checkpoints/iter_000002.siv",
        "samples/grid_000002.png",
        "samples/grid_000004.png",
    ] {
        assert!(run_a.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run_a.join("loss.csv")).unwrap();
    assert_eq!(
        log.lines().next(),
        Some("iter,d_total,g_total,d_low,d_content,d_layout,dr")
    );
    assert_eq!(log.lines().count(), 5);
    assert_eq!(
        log,
        std::fs::read_to_string(run_b.join("loss.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(run_a.join("checkpoint.siv")).unwrap(),
        std::fs::read(run_b.join("checkpoint.siv")).unwrap()
    );
    let echoed = RunConfig::load(&run_a.join("config.toml")).unwrap();
    assert_eq!(echoed.training.seed, 3);

    // Resuming from the midpoint reproduces the uninterrupted run.
    let run_c = dir.path().join("c");
    std::fs::create_dir_all(&run_c).unwrap();
    std::fs::write(
        run_c.join("loss.csv"),
        log.lines().take(3).collect::<Vec<_>>().join("\n") + "\n",
    )
    .unwrap();
    let mid = run_a.join("checkpoints/iter_000002.siv");
    assert_ok(&siv(&[
        "train",
        "--config",
        s(&cfg),
        "--source",
        s(&img),
        "--out",
        s(&run_c),
        "--resume",
        s(&mid),
    ]));
    assert_eq!(
        std::fs::read_to_string(run_c.join("loss.csv")).unwrap(),
        log
    );
    assert_eq!(
        std::fs::read(run_c.join("checkpoint.siv")).unwrap(),
        std::fs::read(run_a.join("checkpoint.siv")).unwrap()
    );

    let ckpt = run_a.join("checkpoint.siv");
    let (g1, g2, g0) = (
        dir.path().join("g1"),
        dir.path().join("g2"),
        dir.path().join("g0"),
    );
    for g in [&g1, &g2] {
        assert_ok(&siv(&[
            "generate",
            s(&ckpt),
            "--n",
            "3",
            "--seed",
            "0",
            "--out",
            s(g),
        ]));
    }
    let names = files_in(&g1);
    assert_eq!(
        names,
        ["sample_00000.png", "sample_00001.png", "sample_00002.png"]
            .map(String::from)
            .into_iter()
            .collect()
    );
    for n in &names {
        assert_eq!(
            std::fs::read(g1.join(n)).unwrap(),
            std::fs::read(g2.join(n)).unwrap(),
            "{n}"
        );
    }
    let first = siv_core::data::load_image(&g1.join("sample_00000.png")).unwrap();
    assert_eq!((first.height(), first.width()), (64, 96));
    assert_ok(&siv(&["generate", s(&ckpt), "--n", "0", "--out", s(&g0)]));
    assert!(files_in(&g0).is_empty());

    let m_dir = dir.path().join("metrics");
    assert_ok(&siv(&[
        "evaluate",
        s(&ckpt),
        "--source",
        s(&img),
        "--plugins",
        "toy",
        "--n",
        "4",
        "--out",
        s(&m_dir),
    ]));
    let m = metrics(&m_dir);
    assert_eq!(m.len(), 8);
    assert!(m.values().all(|v| v.as_f64().unwrap() >= 0.0), "{m:?}");
    assert_eq!(m["n_generated"].as_f64(), Some(4.0));

    let o = siv(&["inspect", s(&ckpt)]);
    assert_ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(
        text.contains("iteration 4") && text.contains("output size 64x96"),
        "{text}"
    );
}

#[test]
fn inspect_echoes_configs_canonically() {
    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    assert_eq!(RunConfig::load(&smoke).unwrap(), RunConfig::smoke());
    let o = siv(&["inspect", s(&smoke)]);
    assert_ok(&o);
    let echoed = String::from_utf8(o.stdout).unwrap();
    assert_eq!(echoed, RunConfig::smoke().to_toml());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("echo.toml");
    std::fs::write(&p, &echoed).unwrap();
    assert_eq!(
        String::from_utf8(siv(&["inspect", s(&p)]).stdout).unwrap(),
        echoed
    );

    let o = siv(&["inspect"]);
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        RunConfig::default().to_toml()
    );
}
