mod common;

use std::path::Path;
use std::process::Command;

use msgdn::data::{load_png, save_png};
use msgdn::model::ModelConfig;
use msgdn::train::{PhaseLoss, TrainPlan};

use common::{bin, msgdn, s, synth};

fn fails(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().unwrap();
    assert!(!out.status.success(), "msgdn {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn prepare(dir: &Path, qps: &str) -> std::path::PathBuf {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).unwrap();
    save_png(&images.join("a.png"), &synth(24, 20, 1.0)).unwrap();
    save_png(&images.join("b.png"), &synth(20, 28, 1.5)).unwrap();
    let codec = dir.join("codec.toml");
    msgdn(&["stub-codec", "config", "--out", s(&codec)]);
    let manifest = dir.join("manifest.jsonl");
    msgdn(&["prepare", "--images", s(&images), "--qps", qps, "--codec", s(&codec), "--out", s(&manifest)]);
    manifest
}

#[test]
fn help_lists_every_subcommand() {
    let text = msgdn(&["--help"]);
    for cmd in ["prepare", "candidates", "allocate", "train", "infer", "evaluate", "rd-plot", "init", "stub-codec"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn stub_codec_is_lossless_at_low_qp() {
    let dir = tempfile::tempdir().unwrap();
    let raw: Vec<u8> = (0..3 * 6 * 4).map(|i| (i * 7 % 256) as u8).collect();
    let (yuv, bits, back) = (dir.path().join("in.yuv"), dir.path().join("x.bin"), dir.path().join("out.yuv"));
    std::fs::write(&yuv, &raw).unwrap();
    msgdn(&["stub-codec", "encode", "--input", s(&yuv), "--output", s(&bits), "--qp", "10", "--width", "6", "--height", "4"]);
    msgdn(&["stub-codec", "decode", "--input", s(&bits), "--output", s(&back)]);
    assert_eq!(std::fs::read(&back).unwrap(), raw);
}

#[test]
fn prepare_then_allocate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepare(dir.path(), "30,40");
    let cands = dir.path().join("cands.csv");
    msgdn(&["candidates", "--manifest", s(&manifest), "--out", s(&cands)]);
    let text = std::fs::read_to_string(&cands).unwrap();
    assert!(text.starts_with("# msgdn-candidates v1"));
    assert_eq!(text.lines().filter(|l| l.starts_with("a.png") || l.starts_with("b.png")).count(), 4);

    let plan = dir.path().join("plan.csv");
    msgdn(&["allocate", "--candidates", s(&cands), "--target-bpp", "1000", "--out", s(&plan)]);
    let p = msgdn::alloc::AllocationPlan::load(&plan).unwrap();
    assert!(p.choices.iter().all(|c| c.qp == 30), "a generous budget picks the finest QP");

    let err = fails(&["allocate", "--candidates", s(&cands), "--target-bpp", "0.0001", "--out", s(&plan)]);
    assert!(err.contains("infeasible"), "{err}");
}

#[test]
fn prepare_reports_missing_images() {
    let dir = tempfile::tempdir().unwrap();
    let codec = dir.path().join("codec.toml");
    msgdn(&["stub-codec", "config", "--out", s(&codec)]);
    let missing = dir.path().join("nope");
    let err = fails(&["prepare", "--images", s(&missing), "--qps", "37", "--codec", s(&codec), "--out", s(&dir.path().join("m.jsonl"))]);
    assert!(err.contains("nope"), "{err}");
}

#[test]
fn untrained_model_passes_images_through() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("init.safetensors");
    let config = dir.path().join("model.toml");
    std::fs::write(&config, toml::to_string(&ModelConfig::tiny()).unwrap()).unwrap();
    msgdn(&["init", "--config", s(&config), "--seed", "3", "--out", s(&model)]);
    let (input, output) = (dir.path().join("in.png"), dir.path().join("out.png"));
    let img = synth(19, 23, 1.2);
    save_png(&input, &img).unwrap();
    msgdn(&["infer", "--checkpoint", s(&model), "--input", s(&input), "--output", s(&output)]);
    assert_eq!(load_png(&output).unwrap(), img);
}

#[test]
fn train_refuses_to_overwrite_a_run_and_evaluate_emits_rd() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepare(dir.path(), "38");
    let mut plan = TrainPlan::objective(PhaseLoss::L1, 2);
    plan.model = ModelConfig::tiny();
    plan.patch_size = 16;
    plan.batch_size = 2;
    let plan_path = dir.path().join("train.toml");
    std::fs::write(&plan_path, plan.to_toml()).unwrap();
    let run = dir.path().join("run");
    msgdn(&["train", "--plan", s(&plan_path), "--manifest", s(&manifest), "--out", s(&run)]);
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);
    fails(&["train", "--plan", s(&plan_path), "--manifest", s(&manifest), "--out", s(&run)]);
    msgdn(&["train", "--plan", s(&plan_path), "--manifest", s(&manifest), "--out", s(&run), "--resume"]);

    let cands = dir.path().join("cands.csv");
    msgdn(&["candidates", "--manifest", s(&manifest), "--out", s(&cands)]);
    let alloc = dir.path().join("alloc.csv");
    msgdn(&["allocate", "--candidates", s(&cands), "--target-bpp", "100", "--out", s(&alloc)]);
    let model = run.join("model.safetensors");
    let eval = dir.path().join("eval.csv");
    let err = fails(&[
        "evaluate", "--manifest", s(&manifest), "--plan", s(&alloc), "--checkpoint", s(&model), "--out", s(&eval),
        "--rd-csv", s(&dir.path().join("rd.csv")),
    ]);
    assert!(err.contains("--rd-plot"), "{err}");

    let (rd1, rd2) = (dir.path().join("rd1.csv"), dir.path().join("rd2.csv"));
    for (rd, label) in [(&rd1, "a:"), (&rd2, "b:")] {
        msgdn(&[
            "evaluate", "--manifest", s(&manifest), "--plan", s(&alloc), "--checkpoint", s(&model), "--out", s(&eval),
            "--rd-csv", s(rd), "--rd-plot", s(&dir.path().join("rd.svg")), "--label", label,
        ]);
    }
    let (merged, svg) = (dir.path().join("all.csv"), dir.path().join("all.svg"));
    msgdn(&["rd-plot", "--inputs", s(&rd1), s(&rd2), "--out-csv", s(&merged), "--out-plot", s(&svg)]);
    let points = msgdn::eval::parse_rd_csv(&std::fs::read_to_string(&merged).unwrap()).unwrap();
    assert_eq!(points.len(), 4);
    let svg = std::fs::read_to_string(&svg).unwrap();
    for label in ["a:codec", "a:codec+msgdn", "b:codec", "b:codec+msgdn"] {
        assert!(svg.contains(&format!("data-label=\"{label}\"")), "{label}");
    }
}
