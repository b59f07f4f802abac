//! End-to-end subcommand tests driven through the in-process dispatcher.

use std::path::Path;

fn run(args: &[&str]) -> u8 {
    let argv: Vec<String> = std::iter::once("wildreid".to_string())
        .chain(args.iter().map(|s| s.to_string()))
        .collect();
    wildreid_cli::run(&argv)
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    assert_eq!(run(&["no-such-subcommand"]), 2);
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["train", "--help"]), 0);
    assert_eq!(run(&["eval", "--help"]), 0);
    assert_eq!(run(&["visualize-match", "--help"]), 0);
}

#[test]
fn bad_config_files_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    // unknown key in the train block
    let cfg = dir.path().join("typo.toml");
    std::fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    assert_eq!(
        run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        1
    );

    // structurally valid but semantically bad: freeze >= epochs
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochs = 2\nfreeze_epochs = 5\n").unwrap();
    assert_eq!(
        run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        1
    );

    // unknown backbone name
    let cfg = dir.path().join("model.toml");
    std::fs::write(&cfg, "[model]\nbackbone = \"resnext\"\n").unwrap();
    assert_eq!(
        run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--toy",
            "--out",
            out.to_str().unwrap()
        ]),
        1
    );
}

fn make_tiny_dataset(dir: &Path) {
    assert_eq!(
        run(&[
            "make-toy",
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            "9",
            "--train-entities",
            "2",
            "--test-entities",
            "2",
            "--train-per-side",
            "2",
            "--test-per-side",
            "3",
            "--cameras",
            "2",
            "--image-size",
            "32",
            "--fusion-inputs",
        ]),
        0
    );
    assert!(dir.join("train.csv").is_file());
    assert!(dir.join("test.csv").is_file());
}

#[test]
fn full_pipeline_train_eval_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_tiny_dataset(&data);

    assert_eq!(
        run(&[
            "validate-manifest",
            "--train",
            data.join("train.csv").to_str().unwrap(),
            "--test",
            data.join("test.csv").to_str().unwrap(),
        ]),
        0
    );
    // a manifest always overlaps itself
    assert_eq!(
        run(&[
            "validate-manifest",
            "--train",
            data.join("train.csv").to_str().unwrap(),
            "--test",
            data.join("train.csv").to_str().unwrap(),
        ]),
        1
    );

    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        r#"
seed = 3

[dataset]

[model]
backbone = "toy"
input_size = 32

[train]
epochs = 1
freeze_epochs = 0
batch_p = 2
batch_k = 2
validation_fraction = 0.0
"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    assert_eq!(
        run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--manifest",
            data.join("train.csv").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]),
        0
    );
    let ckpt = out.join("final.ckpt");
    assert!(ckpt.is_file());
    assert!(out.join("resolved-config.toml").is_file());
    assert!(out.join("train_log.jsonl").is_file());
    assert!(out.join("history.json").is_file());
    // resolved config carries the top-level seed into the train block
    let resolved = std::fs::read_to_string(out.join("resolved-config.toml")).unwrap();
    assert!(resolved.contains("seed = 3"));

    let report = dir.path().join("reports/eval.txt");
    assert_eq!(
        run(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            data.join("test.csv").to_str().unwrap(),
            "--split-sides",
            "--report",
            report.to_str().unwrap(),
        ]),
        0
    );
    assert!(report.is_file());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.with_extension("json")).unwrap())
            .unwrap();
    assert!(json["map"].as_f64().unwrap() >= 0.0);

    // per-camera protocol exercises the single/cross splits
    assert_eq!(
        run(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            data.join("test.csv").to_str().unwrap(),
            "--protocol",
            "atrw",
            "--rerank",
            "--split-sides",
        ]),
        0
    );
    assert_eq!(
        run(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            data.join("test.csv").to_str().unwrap(),
            "--protocol",
            "mystery",
        ]),
        1
    );

    assert_eq!(
        run(&[
            "transfer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            data.join("test.csv").to_str().unwrap(),
            "--split-sides",
        ]),
        0
    );

    let panel = dir.path().join("panel.png");
    assert_eq!(
        run(&[
            "visualize-match",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--source",
            data.join("images/train/e00_left_0.png").to_str().unwrap(),
            "--target",
            data.join("images/train/e00_left_1.png").to_str().unwrap(),
            "--point",
            "16,20",
            "--layer",
            "dve",
            "--out",
            panel.to_str().unwrap(),
        ]),
        0
    );
    assert!(panel.is_file());

    // self-comparison trivially passes the identical-preprocessing check
    let panel2 = dir.path().join("panel2.png");
    assert_eq!(
        run(&[
            "visualize-match",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--source",
            data.join("images/train/e00_left_0.png").to_str().unwrap(),
            "--target",
            data.join("images/train/e01_left_0.png").to_str().unwrap(),
            "--point",
            "8,8",
            "--layer",
            "stage3-raw",
            "--out",
            panel2.to_str().unwrap(),
            "--compare-checkpoint",
            ckpt.to_str().unwrap(),
        ]),
        0
    );
    assert!(panel2.is_file());
    assert!(dir.path().join("panel2-compare.png").is_file());
}

#[test]
fn fuse_masks_processes_toy_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_tiny_dataset(&data);
    let out = dir.path().join("fused");
    assert_eq!(
        run(&[
            "fuse-masks",
            "--manifest",
            data.join("train.csv").to_str().unwrap(),
            "--candidates",
            data.join("candidates/train").to_str().unwrap(),
            "--reference",
            data.join("reference/train").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--criterion",
            "iou",
            "--threshold",
            "0.3",
        ]),
        0
    );
    assert!(out.join("fusion_report.tsv").is_file());
    assert!(out.join("masks/e00_left_0.png").is_file());
    assert!(out.join("images/e00_left_0.png").is_file());

    // unknown criterion is a config failure
    assert_eq!(
        run(&[
            "fuse-masks",
            "--manifest",
            data.join("train.csv").to_str().unwrap(),
            "--candidates",
            data.join("candidates/train").to_str().unwrap(),
            "--reference",
            data.join("reference/train").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--criterion",
            "dice",
        ]),
        1
    );
}
