use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn mtsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtsa"))
        .args(args)
        .output()
        .expect("spawn mtsa")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Re-emits a CSV through a parse; should reproduce the input exactly.
fn csv_round_trip(bytes: &[u8]) -> Vec<u8> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes);
    let mut w = csv::Writer::from_writer(Vec::new());
    for rec in rdr.records() {
        w.write_record(&rec.unwrap()).unwrap();
    }
    w.into_inner().unwrap()
}

#[test]
fn equiv_default_suite_passes() {
    let out = mtsa(&["equiv", "--trials", "200", "--dtype", "f64"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["trials"], 200);
    assert!(report["max_diff"].as_f64().unwrap() <= 1e-9);
    assert!(!report["classes"].as_array().unwrap().is_empty());
}

#[test]
fn equiv_single_token_cases_pass() {
    let out = mtsa(&["equiv", "--n-max", "1", "--trials", "50"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn equiv_head_dim_divisor_fails_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let out = mtsa(&[
        "equiv",
        "--trials",
        "40",
        "--step3-divisor",
        "dh",
        "--report",
        path_str(&report),
    ]);
    assert_eq!(code(&out), 2);
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(saved["passed"], false);
    assert_eq!(saved["score_divisor"], "head_dim");
}

#[test]
fn equiv_single_precision() {
    let out = mtsa(&["equiv", "--trials", "50", "--dtype", "f32"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout_json(&out)["metric"], "rel");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&mtsa(&["equiv", "--n-max", "0"])), 1);
    assert_eq!(code(&mtsa(&["equiv", "--trials", "many"])), 1);
    assert_eq!(code(&mtsa(&["frobnicate"])), 1);
    assert_eq!(code(&mtsa(&["train-toy", "--variant", "sideways"])), 1);
    assert_eq!(code(&mtsa(&["--help"])), 0);
}

#[test]
fn gradcheck_passes_and_tol_is_honoured() {
    let out = mtsa(&["gradcheck", "--instances", "3", "--seed", "4"]);
    assert_eq!(code(&out), 0);
    let r = stdout_json(&out);
    assert!(r["max_rel_error"].as_f64().unwrap() <= 1e-4);
    assert!(r["coordinates"].as_u64().unwrap() > 0);
    assert_eq!(code(&mtsa(&["gradcheck", "--instances", "1", "--tol", "0"])), 2);
}

#[test]
fn bench_header_smoke_time_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let t = Instant::now();
    let out = mtsa(&["bench", "--lens", "16", "--out", path_str(&a)]);
    let elapsed = t.elapsed();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(elapsed.as_secs_f64() < 1.0, "n=16 bench took {elapsed:?}");
    assert_eq!(code(&mtsa(&["bench", "--lens", "16", "--out", path_str(&b)])), 0);

    let bytes = fs::read(&a).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "impl,n,batch,d_model,heads,wall_ms,peak_floats,seed");
    let impls: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(impls, ["naive", "fast", "multihead_dot", "conv_baseline"]);
    assert_eq!(csv_round_trip(&bytes), bytes);

    let peaks = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.split(',').nth(6).unwrap().to_string())
            .collect()
    };
    assert_eq!(peaks(&a), peaks(&b));
}

#[test]
fn bench_memory_ratio_at_64() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    let out = mtsa(&[
        "bench", "--impls", "naive,fast", "--lens", "64", "--d-model", "64", "--heads", "1",
        "--batch", "1", "--repeats", "1", "--out", path_str(&p),
    ]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(p).unwrap();
    let peak: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(6).unwrap().parse().unwrap())
        .collect();
    assert!(peak[0] / peak[1] >= 8.0, "ratio {}", peak[0] / peak[1]);
}

#[test]
fn bench_parallel_column_and_bad_impl() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    let out = mtsa(&[
        "bench", "--impls", "fast", "--lens", "8,16", "--d-model", "8", "--heads", "2",
        "--parallel-heads", "--out", path_str(&p),
    ]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("impl,n,batch,d_model,heads,wall_ms,peak_floats,seed,parallel_heads\n"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));

    assert_eq!(code(&mtsa(&["bench", "--impls", "cnn", "--out", path_str(&p)])), 1);
    assert_eq!(code(&mtsa(&["bench", "--lens", "32,16", "--out", path_str(&p)])), 1);
}

#[test]
fn train_toy_zero_steps_is_chance() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("metrics.csv");
    let out = mtsa(&["train-toy", "--variant", "fwbw", "--steps", "0", "--metrics", path_str(&m)]);
    assert_eq!(code(&out), 0);
    let acc: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((acc - 0.5).abs() <= 0.05);
    let bytes = fs::read(&m).unwrap();
    assert!(String::from_utf8_lossy(&bytes).starts_with("step,loss,eval_acc\n0,"));
    assert_eq!(csv_round_trip(&bytes), bytes);
}

#[test]
fn train_toy_ablation_direction() {
    let acc = |variant: &str| -> f64 {
        let out = mtsa(&["train-toy", "--variant", variant, "--steps", "3000", "--seed", "0"]);
        assert_eq!(code(&out), 0);
        String::from_utf8(out.stdout).unwrap().trim().parse().unwrap()
    };
    assert!(acc("fwbw") >= 0.95);
    assert!(acc("nomask") <= 0.65);
}

#[test]
fn train_toy_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = mtsa(&["train-toy", "--steps", "60", "--seed", "3", "--metrics", path_str(p)]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn train_toy_divergence_exits_3() {
    let out = mtsa(&["train-toy", "--steps", "50", "--lr", "inf"]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("last finite loss"), "{err}");
}

fn init_params(dir: &Path, masks: &str) -> std::path::PathBuf {
    let cfg = dir.join("layer.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"d_e": 3, "d_i": 2, "d_h": 2, "d_a": 2, "heads": 2,
                "sigma_t": "log_sigmoid", "sigma_s": "identity", "sigma_m": "relu",
                "masks": {masks}}}"#
        ),
    )
    .unwrap();
    let params = dir.join("params.bin");
    let out = mtsa(&["init", "--config", path_str(&cfg), "--seed", "5", "--out", path_str(&params)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    params
}

fn pgm_pixels(path: &Path) -> (usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .unwrap()
        .0;
    let header = String::from_utf8(bytes[..header_end].to_vec()).unwrap();
    let mut parts = header.split_whitespace();
    assert_eq!(parts.next(), Some("P5"));
    let w: usize = parts.next().unwrap().parse().unwrap();
    (w, bytes[header_end + 1..].to_vec())
}

#[test]
fn heatmap_export() {
    let dir = tempfile::tempdir().unwrap();
    let params = init_params(dir.path(), r#"["forward", "backward"]"#);
    let tokens = dir.path().join("tokens.txt");
    fs::write(&tokens, "a\t0.1 0.2 0.3\nb\t-1 0 1\nc\t0.5 0.5 -0.5\nd\t2 1 0\n").unwrap();
    let prefix = dir.path().join("viz");
    let out = mtsa(&[
        "heatmap", "--params", path_str(&params), "--input", path_str(&tokens), "--out",
        path_str(&prefix),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let (n, px) = pgm_pixels(&dir.path().join("viz_head0_t2t.pgm"));
    assert_eq!((n, px.len()), (4, 16));
    for key in 0..n {
        for query in 0..n {
            if key >= query {
                assert_eq!(px[key * n + query], 0);
            }
        }
    }
    let (_, bw) = pgm_pixels(&dir.path().join("viz_head1_t2t.pgm"));
    assert!((0..n).all(|i| (i..n).all(|j| bw[i * n + j] == 0)));

    let t2t = fs::read(dir.path().join("viz_head0_t2t.csv")).unwrap();
    assert!(String::from_utf8_lossy(&t2t).starts_with("key,a,b,c,d\n"));
    assert_eq!(csv_round_trip(&t2t), t2t);
    let s2t = fs::read_to_string(dir.path().join("viz_head1_s2t.csv")).unwrap();
    assert_eq!(s2t.lines().count(), 2);
    assert_eq!(s2t.lines().nth(1).unwrap().split(',').count(), 4);
}

#[test]
fn heatmap_single_token_is_black() {
    let dir = tempfile::tempdir().unwrap();
    let params = init_params(dir.path(), r#"["forward", "backward"]"#);
    let tokens = dir.path().join("one.txt");
    fs::write(&tokens, "only\t1 2 3\n").unwrap();
    let prefix = dir.path().join("one");
    let out = mtsa(&[
        "heatmap", "--params", path_str(&params), "--input", path_str(&tokens), "--out",
        path_str(&prefix),
    ]);
    assert_eq!(code(&out), 0);
    for head in 0..2 {
        let bytes = fs::read(dir.path().join(format!("one_head{head}_t2t.pgm"))).unwrap();
        assert_eq!(bytes, b"P5\n1 1\n255\n\0");
    }
}

#[test]
fn heatmap_rejects_corrupt_params() {
    let dir = tempfile::tempdir().unwrap();
    let params = init_params(dir.path(), r#"["none", "none"]"#);
    let tokens = dir.path().join("t.txt");
    fs::write(&tokens, "x\t1 2 3\n").unwrap();
    let mut bytes = fs::read(&params).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&params, bytes).unwrap();
    let out = mtsa(&[
        "heatmap", "--params", path_str(&params), "--input", path_str(&tokens), "--out",
        path_str(&dir.path().join("z")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(!dir.path().join("z_head0_t2t.pgm").exists());

    fs::write(&params, b"not a container").unwrap();
    let out = mtsa(&[
        "heatmap", "--params", path_str(&params), "--input", path_str(&tokens), "--out",
        path_str(&dir.path().join("z")),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn init_writes_container_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let params = init_params(dir.path(), r#"["window:2", "forward"]"#);
    assert!(fs::read(&params).unwrap().starts_with(b"MTSA1"));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("params.bin.json")).unwrap()).unwrap();
    assert_eq!(sidecar["masks"], serde_json::json!(["window:2", "forward"]));
    assert_eq!(sidecar["dtype"], "f64");
    assert_eq!(sidecar["heads"], 2);
}
