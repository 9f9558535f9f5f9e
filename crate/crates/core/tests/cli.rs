use std::fs;
use std::path::Path;
use std::process::Command;

use angular_embed::cli::{self, grad_check, CliError, Flags, RunConfig, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC};
use angular_embed::loss_heads::HeadKind;
use angular_embed::metrics;
use angular_embed::trainer::Checkpoint;
use angular_embed::Matrix;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_angular-embed"))
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    (header, rows)
}

fn blobs_flags(out: &Path) -> Flags {
    Flags {
        dataset: Some(cli::DatasetKind::Blobs),
        out: Some(out.to_path_buf()),
        ..Flags::default()
    }
}

#[test]
fn curves_files_hold_the_expected_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::resolve(&Flags {
        out: Some(dir.path().to_path_buf()),
        ..Flags::default()
    })
    .unwrap();
    cfg.theta_points = 3;
    cfg.s = 1.0;
    cli::cmd_curves(&cfg).unwrap();

    let (header, rows) = read_csv(&dir.path().join("gradient_curves.csv"));
    assert_eq!(header, ["theta", "head", "dzdtheta"]);
    let mid = rows
        .iter()
        .find(|r| r[1] == "soft" && (r[0].parse::<f64>().unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12)
        .unwrap();
    assert_eq!(mid[2].parse::<f64>().unwrap(), -1.0);

    for s in [1.0, 7.0, 20.0] {
        cfg.s = s;
        cfg.theta_points = 200;
        cli::cmd_curves(&cfg).unwrap();
        let (_, rows) = read_csv(&dir.path().join("gradient_curves.csv"));
        let angular: Vec<f64> = rows
            .iter()
            .filter(|r| r[1] == "angular")
            .map(|r| r[2].parse().unwrap())
            .collect();
        assert_eq!(angular.len(), 200);
        assert!(angular.iter().all(|&v| v == -s));
    }

    let (header, rows) = read_csv(&dir.path().join("log_ratio_vs_s.csv"));
    assert_eq!(header, ["s", "log_ratio"]);
    assert_eq!(rows.len(), 100);
    let mut cfg3 = cfg.clone();
    cfg3.s_min = 3.0;
    cfg3.s_max = 3.0;
    cfg3.s_points = 1;
    cli::cmd_curves(&cfg3).unwrap();
    let (_, rows) = read_csv(&dir.path().join("log_ratio_vs_s.csv"));
    assert!((rows[0][1].parse::<f64>().unwrap() - 4.7124).abs() < 1e-4);
    assert!((rows[0][1].parse::<f64>().unwrap() - 1.5 * std::f64::consts::PI).abs() < 1e-9);
    let (header, _) = read_csv(&dir.path().join("loss_grad_vs_s.csv"));
    assert_eq!(header, ["s", "g_target", "g_other"]);
}

#[test]
fn grad_check_passes_and_is_reproducible() {
    let report = grad_check(3, 20, 1e-4, None);
    assert!(report.passed(), "{}", report.render());
    assert_eq!(report.heads.len(), 5);
    assert_eq!(grad_check(3, 20, 1e-4, None).render(), report.render());
}

#[test]
fn sign_flip_in_angular_gradient_is_caught() {
    let flip = |kind: HeadKind, g: &mut angular_embed::HeadGrads| {
        if kind == HeadKind::Angular {
            g.dx = g.dx.map(|v| -v);
        }
    };
    let report = grad_check(0, 5, 1e-4, Some(&flip));
    assert!(!report.passed());
    let failed: Vec<HeadKind> = report.heads.iter().filter(|h| !h.passed).map(|h| h.head).collect();
    assert_eq!(failed, vec![HeadKind::Angular]);
    assert!(report.render().contains("angular"));
}

#[test]
fn grad_check_binary_exit_status() {
    let out = bin().args(["grad-check", "--seed", "5", "--instances", "4"]).output().unwrap();
    assert!(out.status.success());
    let again = bin().args(["grad-check", "--seed", "5", "--instances", "4"]).output().unwrap();
    assert_eq!(out.stdout, again.stdout);
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["soft", "norm", "arcface", "angular", "center"] {
        assert!(text.contains(name));
    }
    // an impossible tolerance turns every head into a failure
    let strict = bin()
        .args(["grad-check", "--instances", "2", "--tolerance", "0"])
        .output()
        .unwrap();
    assert_eq!(strict.status.code(), Some(EXIT_NUMERIC as i32));
}

fn strip_wall(summary: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(summary).unwrap();
    v.as_object_mut().unwrap().remove("wall_seconds");
    v
}

#[test]
fn train_on_blobs_is_accurate_and_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let cfg = RunConfig::resolve(&blobs_flags(dir.path())).unwrap();
        cli::cmd_train(&cfg).unwrap();
    }
    let summary = fs::read_to_string(a.path().join("summary.json")).unwrap();
    let v = strip_wall(&summary);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["head"], "angular");
    assert!(v["test_error_rate"].as_f64().unwrap() < 0.05);
    for key in ["w_inter", "c_inter", "wc_intra"] {
        assert!(v["angle_stats"][key].is_f64());
    }
    assert_eq!(
        fs::read(a.path().join("metrics.csv")).unwrap(),
        fs::read(b.path().join("metrics.csv")).unwrap()
    );
    assert_eq!(v, strip_wall(&fs::read_to_string(b.path().join("summary.json")).unwrap()));
    assert!(a.path().join("checkpoint.json").is_file());
    let (header, rows) = read_csv(&a.path().join("metrics.csv"));
    assert_eq!(
        header,
        ["iteration", "epoch", "lr", "train_loss", "wc_intra", "w_inter", "c_inter", "train_acc"]
    );
    assert!(!rows.is_empty());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    fs::write(
        &path,
        "# comment\nhead = arcface\ns=12\nlr_max=0.003\nepochs = 4\n\nhidden=32,16\n",
    )
    .unwrap();
    let cfg = RunConfig::resolve(&Flags {
        config: Some(path.clone()),
        s: Some(5.0),
        ..Flags::default()
    })
    .unwrap();
    assert_eq!(cfg.head, HeadKind::ArcFace);
    assert_eq!(cfg.s, 5.0);
    assert_eq!(cfg.lr(), 0.003);
    assert_eq!(cfg.epochs, 4);
    assert_eq!(cfg.hidden, vec![32, 16]);
    assert_eq!(cfg.batch_size, 256);

    fs::write(&path, "head=nonsense\n").unwrap();
    let err = RunConfig::resolve(&Flags {
        config: Some(path.clone()),
        ..Flags::default()
    })
    .unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    fs::write(&path, "no equals sign\n").unwrap();
    assert!(matches!(
        RunConfig::resolve(&Flags {
            config: Some(path),
            ..Flags::default()
        }),
        Err(CliError::Config(_))
    ));
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--dataset", "fashion", "--out"])
        .arg(dir.path())
        .env_remove("ANGULAR_EMBED_DATA")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG as i32));

    let empty = tempfile::tempdir().unwrap();
    fs::write(empty.path().join("train-images-idx3-ubyte"), [0u8, 0, 8, 1, 0, 0, 0, 0]).unwrap();
    let out = bin()
        .args(["train", "--dataset", "fashion", "--out"])
        .arg(dir.path())
        .env("ANGULAR_EMBED_DATA", empty.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_DATA as i32));

    let out = bin().args(["train", "--epochs", "many"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG as i32));
}

#[test]
fn sweep_writes_requested_scales_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let mut flags = blobs_flags(dir.path());
        flags.s_values = Some("1,3,7".into());
        flags.epochs = Some(3);
        cli::cmd_sweep_s(&RunConfig::resolve(&flags).unwrap()).unwrap();
    }
    let csv = a.path().join("sweep.csv");
    assert_eq!(fs::read(&csv).unwrap(), fs::read(b.path().join("sweep.csv")).unwrap());
    let (header, rows) = read_csv(&csv);
    assert_eq!(header, ["s", "iteration", "wc_intra", "row", "status"]);
    let mut seen: Vec<String> = rows.iter().map(|r| r[0].clone()).collect();
    seen.dedup();
    assert_eq!(seen, ["1", "3", "7"]);
    assert_eq!(rows.iter().filter(|r| r[3] == "final").count(), 3);
    assert!(a.path().join("sweep_summary.json").is_file());
}

#[test]
fn metrics_outputs_match_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let mut flags = blobs_flags(dir.path());
    flags.embed_dim = Some(2);
    flags.epochs = Some(5);
    let cfg = RunConfig::resolve(&flags).unwrap();
    cli::cmd_train(&cfg).unwrap();
    cli::cmd_metrics(&cfg).unwrap();

    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("angle_stats.json")).unwrap()).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    let data = cfg.load_data().unwrap().test;
    let emb = ckpt.embed(&data.features).unwrap();

    // embed2d.csv carries the embeddings; recompute from the exported values
    let (header, rows) = read_csv(&dir.path().join("embed2d.csv"));
    assert_eq!(header, ["x", "y", "label"]);
    let exported = Matrix::from_fn(rows.len(), 2, |i, j| rows[i][j].parse().unwrap());
    assert_eq!(exported, emb);
    let labels: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    let centers = metrics::class_centers(&exported, &labels, ckpt.num_classes()).unwrap();
    let expect = metrics::angle_stats(&ckpt.head.weights, &centers).unwrap();
    assert_eq!(stats["wc_intra"].as_f64().unwrap(), expect.wc_intra);
    assert_eq!(stats["w_inter"].as_f64().unwrap(), expect.w_inter);
    assert_eq!(stats["c_inter"].as_f64().unwrap(), expect.c_inter);

    let (header, rows) = read_csv(&dir.path().join("confusion.csv"));
    let k = rows.len();
    assert_eq!(header.len(), k + 2);
    assert_eq!(k, 10 * cfg.blobs.num_classes);
    for (i, row) in rows.iter().enumerate() {
        let diag: f64 = row[i + 2].parse().unwrap();
        assert!((diag - 1.0).abs() <= 1e-9);
    }
    let (header, rows) = read_csv(&dir.path().join("histogram.csv"));
    assert_eq!(header, ["epoch", "class_id", "bin_lo", "bin_hi", "count"]);
    assert_eq!(rows.len(), 36);
}

#[test]
fn weights_on_class_centers_give_zero_intra_angle() {
    let dir = tempfile::tempdir().unwrap();
    let mut flags = blobs_flags(dir.path());
    flags.epochs = Some(1);
    let cfg = RunConfig::resolve(&flags).unwrap();
    cli::cmd_train(&cfg).unwrap();
    let path = dir.path().join("checkpoint.json");
    let mut ckpt = Checkpoint::load(&path).unwrap();
    let data = cfg.load_data().unwrap().test;
    let emb = ckpt.embed(&data.features).unwrap();
    ckpt.head.weights = metrics::class_centers(&emb, &data.labels, ckpt.num_classes()).unwrap();
    ckpt.save(&path).unwrap();
    cli::cmd_metrics(&cfg).unwrap();
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("angle_stats.json")).unwrap()).unwrap();
    // the arccos clamp keeps identical directions at about sqrt(2e-7)
    assert!(stats["wc_intra"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn embed2d_request_needs_two_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let mut flags = blobs_flags(dir.path());
    flags.epochs = Some(1);
    flags.embed_dim = Some(3);
    let cfg = RunConfig::resolve(&flags).unwrap();
    cli::cmd_train(&cfg).unwrap();
    let out = bin()
        .args(["metrics", "--dataset", "blobs", "--embed-dim", "3", "--embed2d", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG as i32));
    assert!(!dir.path().join("embed2d.csv").exists());
}
