use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = "\
content_vocab = 24
sentences_min = 2
sentences_max = 3
sentence_len_min = 2
sentence_len_max = 4
d_model = 16
num_heads = 2
d_ff = 32
num_layers = 1
max_sentences = 8
batch_size = 8
max_subdoc_len = 16
warmup_steps = 100
train_seed = 3
";

fn docins(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docins"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn run_ok(args: &[&str]) -> String {
    let output = docins(args);
    assert!(
        output.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout).unwrap()
}

fn run_err(args: &[&str]) -> String {
    let output = docins(args);
    assert!(
        !output.status.success(),
        "command {args:?} unexpectedly succeeded\nstdout: {}",
        String::from_utf8_lossy(&output.stdout)
    );
    String::from_utf8(output.stderr).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, TINY_CONFIG).unwrap();
    path.to_str().unwrap().to_string()
}

fn gen_data(config: &str, out: &Path) {
    run_ok(&[
        "gen-data",
        "--config",
        config,
        "--out",
        out.to_str().unwrap(),
        "--train",
        "8",
        "--valid",
        "4",
        "--test",
        "4",
    ]);
}

#[test]
fn gen_data_is_deterministic_and_respects_force() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data_a = dir.path().join("a");
    let data_b = dir.path().join("b");
    gen_data(&config, &data_a);
    gen_data(&config, &data_b);

    for name in ["vocab.txt", "train.jsonl", "valid.jsonl", "test.jsonl"] {
        let a = fs::read(data_a.join(name)).unwrap();
        let b = fs::read(data_b.join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    let train_text = fs::read_to_string(data_a.join("train.jsonl")).unwrap();
    assert_eq!(train_text.lines().count(), 8);
    assert!(train_text.starts_with("{\"id\":0,\"src\":[["), "{train_text}");

    let stderr = run_err(&[
        "gen-data",
        "--config",
        &config,
        "--out",
        data_a.to_str().unwrap(),
        "--train",
        "8",
        "--valid",
        "4",
        "--test",
        "4",
    ]);
    assert!(stderr.contains("--force"), "{stderr}");

    run_ok(&[
        "gen-data",
        "--config",
        &config,
        "--out",
        data_a.to_str().unwrap(),
        "--train",
        "8",
        "--valid",
        "4",
        "--test",
        "4",
        "--force",
    ]);
}

#[test]
fn unknown_config_keys_abort_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    fs::write(&config, "d_modle = 16\n").unwrap();
    let stderr = run_err(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert!(stderr.contains("unknown key"), "{stderr}");
    assert!(stderr.contains("line 1"), "{stderr}");
}

#[test]
fn pipeline_trains_decodes_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = dir.path().join("data");
    gen_data(&config, &data);
    let data = data.to_str().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let stdout = run_ok(&[
        "train", "--config", &config, "--data", data, "--steps", "30", "--out", ckpt,
        "--log-every", "10",
    ]);
    assert!(stdout.contains("step 30/30"), "{stdout}");
    assert!(stdout.contains("saved checkpoint"), "{stdout}");

    let hyps = dir.path().join("hyps.jsonl");
    let hyps = hyps.to_str().unwrap();
    let stdout = run_ok(&[
        "decode", "--checkpoint", ckpt, "--data", data, "--split", "test", "--out", hyps,
    ]);
    assert!(stdout.contains("decoded 4 documents"), "{stdout}");
    let hyp_text = fs::read_to_string(hyps).unwrap();
    assert_eq!(hyp_text.lines().count(), 4);

    let refs = format!("{data}/test.jsonl");
    let stdout = run_ok(&["eval", "--hyp", hyps, "--ref", &refs]);
    assert!(stdout.contains("bleu"), "{stdout}");
    assert!(stdout.contains("exact docs"), "{stdout}");

    let stdout = run_ok(&["eval", "--hyp", &refs, "--ref", &refs]);
    assert!(stdout.contains("bleu 100.0000"), "{stdout}");
    assert!(stdout.contains("token accuracy 1.0000"), "{stdout}");
    assert!(stdout.contains("exact docs 4/4"), "{stdout}");
}

#[test]
fn training_and_resume_reproduce_checkpoints_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = dir.path().join("data");
    gen_data(&config, &data);
    let data = data.to_str().unwrap();

    let train_to = |steps: &str, out: &Path, resume: Option<&str>| {
        let out = out.to_str().unwrap().to_string();
        let mut args = vec![
            "train", "--config", &config, "--data", data, "--steps", steps, "--out", &out,
        ];
        if let Some(from) = resume {
            args.push("--resume");
            args.push(from);
        }
        run_ok(&args);
    };

    let full_a = dir.path().join("full_a.ckpt");
    let full_b = dir.path().join("full_b.ckpt");
    train_to("24", &full_a, None);
    train_to("24", &full_b, None);
    assert_eq!(
        fs::read(&full_a).unwrap(),
        fs::read(&full_b).unwrap(),
        "two identical runs wrote different checkpoints"
    );

    let half = dir.path().join("half.ckpt");
    train_to("12", &half, None);
    let resumed = dir.path().join("resumed.ckpt");
    train_to("24", &resumed, Some(half.to_str().unwrap()));
    assert_eq!(
        fs::read(&full_a).unwrap(),
        fs::read(&resumed).unwrap(),
        "resumed run diverged from the uninterrupted one"
    );

    let other_cfg = dir.path().join("other.cfg");
    fs::write(&other_cfg, TINY_CONFIG.replace("d_model = 16", "d_model = 32")).unwrap();
    let out = dir.path().join("bad.ckpt");
    let mut args = vec![
        "train", "--config", other_cfg.to_str().unwrap(), "--data", data, "--steps", "24",
    ];
    let out_str = out.to_str().unwrap();
    args.extend_from_slice(&["--out", out_str, "--resume", half.to_str().unwrap()]);
    let stderr = run_err(&args);
    assert!(stderr.contains("different config"), "{stderr}");
}

#[test]
fn gradcheck_passes_and_catches_a_planted_fault() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());

    let stdout = run_ok(&["gradcheck", "--config", &config, "--coords", "120"]);
    assert!(stdout.contains("gradient check passed"), "{stdout}");

    let stdout = run_ok(&[
        "gradcheck", "--config", &config, "--coords", "120", "--inject-bug",
    ]);
    assert!(stdout.contains("planted fault detected"), "{stdout}");
}
