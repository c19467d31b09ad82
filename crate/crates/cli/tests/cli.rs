use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::process::{Command, Output};

use mmgen_core::harness::config::{RunConfig, StageId};
use mmgen_core::harness::stages::run_layout;
use mmgen_core::seqcodec::{serialize, write_token_stream, ImageTokenBlock};
use mmgen_core::IndexGrid;

fn mmgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_lines(text: &str) -> Vec<serde_json::Value> {
    text.lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// A run small enough to train every stage in seconds.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::toy(dir.join("run"));
    cfg.data.image_size = 16;
    cfg.data.train_images = 8;
    cfg.data.eval_images = 2;
    cfg.data.lm_samples = 4;
    cfg.data.edit_triples = 2;
    cfg.tokenizer_train.steps = 2;
    cfg.tokenizer_train.batch_size = 2;
    cfg.diffusion_train.steps = 2;
    cfg.diffusion_train.batch_size = 2;
    cfg.diffusion.timesteps = 4;
    for s in [
        &mut cfg.lm_train.stage1,
        &mut cfg.lm_train.stage2a,
        &mut cfg.lm_train.stage2b,
        &mut cfg.lm_train.stage3,
    ] {
        s.steps = 2;
        s.batch_size = 2;
    }
    cfg.lm_train.stage1.mode = mmgen_core::datapipe::ResolutionMode::Fixed { size: 16 };
    cfg.lm_train.stage2a.mode = mmgen_core::datapipe::ResolutionMode::Fixed { size: 16 };
    cfg.lm_train.stage2b.mode = mmgen_core::datapipe::ResolutionMode::Fixed { size: 16 };
    cfg.lm_train.stage3.mode = mmgen_core::datapipe::ResolutionMode::Anyres { budget: 512 };
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn init_writes_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let o = mmgen(&["init", "--out", path.to_str().unwrap(), "--out-dir", "somewhere"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = RunConfig::from_file(&path).unwrap();
    assert_eq!(cfg.out_dir, Path::new("somewhere"));
    assert_eq!(cfg.stages, StageId::ALL.to_vec());
}

#[test]
fn unknown_config_keys_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 0\nout_dir = \"x\"\nstages = []\nlearning_rate = 1.0\n").unwrap();
    let o = mmgen(&["run", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn data_plan_reproduces_the_worked_examples() {
    let o = mmgen(&["data", "plan", "800x600", "1000x300", "3000x300"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = json_lines(&stdout(&o));
    let got: Vec<(String, bool)> = recs
        .iter()
        .map(|r| (r["ratio"].as_str().unwrap().to_string(), r["keep"].as_bool().unwrap()))
        .collect();
    assert_eq!(
        got,
        [("4:3".to_string(), true), ("3:1".to_string(), true), ("4:1".to_string(), false)]
    );
    assert!((recs[1]["retained"].as_f64().unwrap() - 0.9).abs() < 1e-12);
    assert!((recs[2]["retained"].as_f64().unwrap() - 0.4).abs() < 1e-12);
}

#[test]
fn data_plan_writes_a_manifest_with_targets() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("plan.jsonl");
    let o = mmgen(&[
        "data",
        "plan",
        "640x480",
        "--budget",
        "4096",
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = json_lines(&std::fs::read_to_string(&manifest).unwrap());
    let target = recs[0]["target"].as_array().unwrap();
    let (h, w) = (target[0].as_u64().unwrap(), target[1].as_u64().unwrap());
    assert_eq!((h % 8, w % 8), (0, 0));
    assert!(h * w <= 4096);
    assert_eq!(w * 3, h * 4);

    let o = mmgen(&["data", "plan", "10x10", "--mode", "sideways:3"]);
    assert!(!o.status.success());
}

#[test]
fn seq_check_accepts_valid_streams_and_rejects_corrupt_ones() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let layout = run_layout(&RunConfig::from_file(&config).unwrap()).unwrap();
    let block = ImageTokenBlock::new(
        IndexGrid::new(1, 2, vec![3, 4]).unwrap(),
        IndexGrid::new(2, 4, vec![0, 1, 2, 3, 4, 5, 6, 7]).unwrap(),
    );
    let mut ids = serialize(&block, &layout).unwrap();
    let good = dir.path().join("good.utg");
    write_token_stream(BufWriter::new(File::create(&good).unwrap()), layout.hash(), &ids).unwrap();
    let o = mmgen(&["seq", "check", "--config", config.to_str().unwrap(), good.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json_lines(&stdout(&o))[0]["pix_dims"], serde_json::json!([2, 4]));

    let o = mmgen(&["seq", "dump", "--config", config.to_str().unwrap(), good.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), ids.len());

    // Drop the first row's end-of-line marker.
    ids.remove(6);
    let bad = dir.path().join("bad.utg");
    write_token_stream(BufWriter::new(File::create(&bad).unwrap()), layout.hash(), &ids).unwrap();
    let o = mmgen(&["seq", "check", "--config", config.to_str().unwrap(), bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("position"), "{}", stderr(&o));
}

#[test]
fn full_pipeline_trains_resumes_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let c = config.to_str().unwrap();
    let o = mmgen(&["lm", "train", "--config", c]);
    assert!(!o.status.success(), "language stages need a tokenizer first");
    assert!(stderr(&o).contains("tokenizer"), "{}", stderr(&o));

    let o = mmgen(&["run", "--config", c]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for id in StageId::ALL {
        assert!(run.join(format!("{}.safetensors", id.name())).exists(), "{id}");
    }
    let o = mmgen(&["run", "--config", c]);
    assert!(o.status.success());
    assert_eq!(stderr(&o).matches("already finished").count(), StageId::ALL.len());

    let tok = run.join("tokenizer.safetensors");
    let lm = run.join("mllm-3.safetensors");
    let tokens = dir.path().join("gen.utg");
    let png = dir.path().join("gen.png");
    let o = mmgen(&[
        "lm",
        "generate",
        "--checkpoint",
        lm.to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--prompt",
        "red disc dark",
        "--sem-h",
        "2",
        "--sem-w",
        "1",
        "--tokens",
        tokens.to_str().unwrap(),
        "--out",
        png.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mmgen(&["seq", "check", "--config", c, tokens.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let gen = image::open(&png).unwrap();
    assert_eq!((gen.height(), gen.width()), (16, 8));

    let big = dir.path().join("big.png");
    let o = mmgen(&[
        "diffusion",
        "decode",
        "--checkpoint",
        run.join("diffusion.safetensors").to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--tokens",
        tokens.to_str().unwrap(),
        "--config",
        c,
        "--out",
        big.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let big = image::open(&big).unwrap();
    assert_eq!((big.height(), big.width()), (32, 16));

    let recon = dir.path().join("recon.png");
    let o = mmgen(&[
        "tok",
        "reconstruct",
        "--checkpoint",
        tok.to_str().unwrap(),
        "--input",
        png.to_str().unwrap(),
        "--output",
        recon.to_str().unwrap(),
        "--noise",
        "zero",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(json_lines(&stdout(&o))[0]["psnr"].is_number());

    let edited = dir.path().join("edited.png");
    let o = mmgen(&[
        "lm",
        "edit",
        "--checkpoint",
        lm.to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--input",
        png.to_str().unwrap(),
        "--out",
        edited.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(image::open(&edited).unwrap().height(), 16);

    let o = mmgen(&[
        "lm",
        "generate",
        "--checkpoint",
        lm.to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--prompt",
        "purple",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("purple"), "{}", stderr(&o));
}
