//! End-to-end subcommand tests driven through the library entry point
//! (plus one spawn of the real binary for exit-code and stderr checks).

use std::path::PathBuf;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["pdno".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    pdno_cli::run(argv)
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("pdno_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(path: &PathBuf, epochs: usize, seed: u64) {
    let cfg = serde_json::json!({
        "batch_size": 8,
        "learning_rate": 1e-2,
        "weight_decay": 0.0,
        "epochs": epochs,
        "lr_step": 100,
        "lr_gamma": 0.5,
        "width": 4,
        "sym_layers": 2,
        "sym_hidden": 4,
        "sym_activation": "gelu",
        "seed": seed,
        "use_x_symbol": false,
        "normalize_input": false,
        "threads": 1
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(run(&[]), 1);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["gen-data", "--does-not-exist"]), 1);
}

#[test]
fn missing_input_file_exits_2_with_path() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_pdno"))
        .args(["eval", "--model", "/nonexistent/model", "--data", "/nonexistent/data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent"), "stderr: {stderr}");
}

#[test]
fn gen_data_writes_expected_files_and_is_deterministic() {
    let d1 = tmp("gen1");
    let d2 = tmp("gen2");
    for d in [&d1, &d2] {
        let code = run(&[
            "gen-data",
            "--problem",
            "heat",
            "--resolution",
            "32",
            "--count",
            "3",
            "--seed",
            "7",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        for f in ["inputs.pdnt", "outputs.pdnt", "times.pdnt", "meta.json", "run-manifest.json"] {
            assert!(d.join(f).exists(), "missing {f}");
        }
    }
    // Identical argv and seed give identical data files.
    for f in ["inputs.pdnt", "outputs.pdnt", "times.pdnt"] {
        let a = std::fs::read(d1.join(f)).unwrap();
        let b = std::fs::read(d2.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
}

#[test]
fn train_then_eval_is_internally_consistent() {
    let data = tmp("pipe_data");
    let test_data = tmp("pipe_test");
    let model_dir = tmp("pipe_model");
    let eval_dir = tmp("pipe_eval");
    assert_eq!(
        run(&[
            "gen-data", "--problem", "heat", "--resolution", "32", "--count", "4",
            "--seed", "3", "--out", data.to_str().unwrap(),
        ]),
        0
    );
    assert_eq!(
        run(&[
            "gen-data", "--problem", "heat", "--resolution", "32", "--count", "2",
            "--seed", "4", "--out", test_data.to_str().unwrap(),
        ]),
        0
    );
    let cfg_path = model_dir.join("config.json");
    write_config(&cfg_path, 3, 5);
    assert_eq!(
        run(&[
            "train",
            "--config", cfg_path.to_str().unwrap(),
            "--data", data.to_str().unwrap(),
            "--test-data", test_data.to_str().unwrap(),
            "--out", model_dir.to_str().unwrap(),
        ]),
        0
    );
    for f in ["history.csv", "run-manifest.json"] {
        assert!(model_dir.join(f).exists(), "missing {f}");
    }
    assert!(model_dir.join("checkpoint-final/manifest.json").exists());
    assert_eq!(
        run(&[
            "eval",
            "--model", model_dir.join("checkpoint-final").to_str().unwrap(),
            "--data", test_data.to_str().unwrap(),
            "--out", eval_dir.to_str().unwrap(),
        ]),
        0
    );
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval.json")).unwrap())
            .unwrap();
    let eval_mean = eval["mean_rel_l2"].as_f64().unwrap();
    // The final history row's test metric was computed on the same data
    // with the same parameters the final checkpoint stores.
    let history = std::fs::read_to_string(model_dir.join("history.csv")).unwrap();
    let last = history.lines().last().unwrap();
    let test_col: f64 = last.split(',').nth(3).unwrap().parse().unwrap();
    assert!(
        (eval_mean - test_col).abs() < 1e-12,
        "eval {eval_mean} vs history {test_col}"
    );
}

#[test]
fn export_and_sweep_on_trained_model() {
    let data = tmp("exp_data");
    let model_dir = tmp("exp_model");
    assert_eq!(
        run(&[
            "gen-data", "--problem", "burgers", "--resolution", "32",
            "--fine-resolution", "64", "--count", "10", "--dt", "1e-3",
            "--seed", "9", "--out", data.to_str().unwrap(),
        ]),
        0
    );
    let cfg_path = model_dir.join("config.json");
    write_config(&cfg_path, 2, 6);
    assert_eq!(
        run(&[
            "train",
            "--config", cfg_path.to_str().unwrap(),
            "--data", data.to_str().unwrap(),
            "--out", model_dir.to_str().unwrap(),
        ]),
        0
    );
    let ckpt = model_dir.join("checkpoint-final");
    let sym_dir = tmp("exp_symbol");
    assert_eq!(
        run(&[
            "export-symbol",
            "--model", ckpt.to_str().unwrap(),
            "--grid", "xi",
            "--range", "8",
            "--density", "17",
            "--out", sym_dir.to_str().unwrap(),
        ]),
        0
    );
    assert!(sym_dir.join("symbol.csv").exists());
    assert!(sym_dir.join("symbol.pdnt").exists());
    let csv = std::fs::read_to_string(sym_dir.join("symbol.csv")).unwrap();
    assert!(csv.starts_with("xi0,i,j,re,im"));

    let sweep_csv = tmp("exp_sweep").join("sweep.csv");
    assert_eq!(
        run(&[
            "sweep-kmax",
            "--model", ckpt.to_str().unwrap(),
            "--data", data.to_str().unwrap(),
            "--kmax", "2,4,none",
            "--out", sweep_csv.to_str().unwrap(),
        ]),
        0
    );
    let sweep = std::fs::read_to_string(&sweep_csv).unwrap();
    assert_eq!(sweep.lines().count(), 4); // header + three rows
}

#[test]
fn verify_symbol_fresh_networks() {
    assert_eq!(run(&["verify-symbol", "--fresh", "gelu", "--order", "1"]), 0);
    assert_eq!(run(&["verify-symbol", "--fresh", "tanh", "--order", "0"]), 0);
}

#[test]
fn grad_check_subcommand_passes() {
    assert_eq!(run(&["grad-check", "--resolution", "16", "--width", "3"]), 0);
}
