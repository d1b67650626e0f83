use contnet::analysis::{summarize, Include};
use contnet::cli::run_with;
use contnet::model::{build_network, ModelConfig};
use contnet::train::{
    synth_dataset, Checkpoint, SynthSpec, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, DATASET_MAGIC,
    DATASET_VERSION,
};

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("contnet").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

#[test]
fn tsv_rows_add_up_to_the_total_line() {
    let m = build_network::<f32>(&ModelConfig::micro(3), 0).unwrap();
    let tsv = summarize(&m, [1, 3, 16, 16], Include::ALL)
        .unwrap()
        .to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(
        lines[0],
        "layer\tkind\tparams\tflops\tattention_flops\tshape"
    );
    let mut sums = [0u64; 3];
    for row in &lines[1..lines.len() - 1] {
        let f: Vec<&str> = row.split('\t').collect();
        assert_eq!(f.len(), 6, "{row}");
        for (s, v) in sums.iter_mut().zip(&f[2..5]) {
            *s += v.parse::<u64>().unwrap();
        }
        assert!(f[5].split('x').all(|d| d.parse::<usize>().is_ok()), "{row}");
    }
    let total: Vec<&str> = lines.last().unwrap().split('\t').collect();
    assert_eq!(total[0], "total");
    let parsed: Vec<u64> = total[2..5].iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(parsed, sums);
}

#[test]
fn checkpoint_header_layout() {
    let m = build_network::<f32>(&ModelConfig::micro(3), 0).unwrap();
    let bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    assert_eq!(u32_at(&bytes, 4), CHECKPOINT_VERSION);
    let len = u32_at(&bytes, 8) as usize;
    let config = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
    assert_eq!(
        ModelConfig::from_toml(config).unwrap(),
        ModelConfig::micro(3)
    );
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(u32_at(&bytes, 12 + len) as usize, back.tensors.len());
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn dataset_header_layout() {
    let d = synth_dataset(&SynthSpec::new(3, 6, [8, 10], 4)).unwrap();
    let bytes = d.to_bytes();
    assert_eq!(&bytes[..4], DATASET_MAGIC);
    let header: Vec<u32> = (0..5).map(|i| u32_at(&bytes, 4 + 4 * i)).collect();
    assert_eq!(header, [DATASET_VERSION, 6, 3, 8, 10]);
    // per-channel mean and std, pixels, u16 labels
    assert_eq!(bytes.len(), 24 + 2 * 3 * 4 + 6 * 3 * 8 * 10 + 6 * 2);
}

#[test]
fn help_and_usage_errors() {
    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    for sub in [
        "summary",
        "gradcheck",
        "shapes",
        "synth",
        "train",
        "eval",
        "ablate",
    ] {
        assert!(out.contains(sub), "{sub} missing from help");
    }
    let (code, _, err) = cli(&["summary", "--variant", "xl"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error:"));
    assert_eq!(cli(&["frobnicate"]).0, 1);
    assert_eq!(cli(&["shapes", "--input", "224"]).0, 1);
    assert_eq!(
        cli(&[
            "eval",
            "--ckpt",
            "/nonexistent/ckpt",
            "--data",
            "/nonexistent/data"
        ])
        .0,
        1
    );
}

#[test]
fn summary_reports_published_deltas_for_presets_only() {
    let (code, out, _) = cli(&["summary", "--variant", "ti"]);
    assert_eq!(code, 0);
    let tail: Vec<&str> = out.lines().rev().take(3).collect();
    assert!(tail[2].starts_with("params ") && tail[2].ends_with('M'));
    assert!(tail[1].starts_with("flops  ") && tail[1].contains("G layers only"));
    assert!(tail[0].starts_with("published "));

    let (code, out, _) = cli(&["summary", "--variant", "ti", "--pe", "none"]);
    assert_eq!(code, 0);
    assert!(out.ends_with("published costs apply to the standard configuration only\n"));

    let (code, out, _) = cli(&["summary", "--variant", "ti", "--format", "tsv"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("layer\tkind\t"));
    assert!(out.lines().last().unwrap().starts_with("total\t"));
}

#[test]
fn shapes_lists_each_stage() {
    let (code, out, _) = cli(&["shapes", "--variant", "s", "--input", "224x224"]);
    assert_eq!(code, 0);
    let expected = [
        "stage1   [1, 64, 56, 56]",
        "stage2   [1, 128, 28, 28]",
        "stage3   [1, 256, 14, 14]",
        "stage4   [1, 512, 7, 7]",
        "features [1, 1024, 7, 7]",
        "logits   [1, 1000]",
    ];
    assert_eq!(out.lines().collect::<Vec<_>>(), expected);
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let (data, ckpt, config) = (path("d.bin"), path("m.ckpt"), path("run.toml"));
    std::fs::write(
        &config,
        "[model]\nnum_classes = 2\n\n[train]\noptimizer = \"sgd\"\nlr_conv = 0.1\nlr_ste = 0.005\nmomentum = 0.9\nweight_decay = 5e-5\nlabel_smooth_eps = 0.1\nbatch_size = 8\nsteps = 3\nseed = 1\n",
    )
    .unwrap();

    let (code, out, err) = cli(&["synth", "--out", &data, "--count", "16", "--seed", "2"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("wrote 16 images of 32x32 in 2 classes"));

    let (code, out, err) = cli(&[
        "train",
        "--config",
        &config,
        "--data",
        &data,
        "--out",
        &ckpt,
        "--log-every",
        "1",
    ]);
    assert_eq!(code, 0, "{err}");
    let steps: Vec<&str> = out.lines().filter(|l| l.starts_with("step ")).collect();
    assert_eq!(steps.len(), 3, "{out}");
    assert!(steps[2].contains("3/3") && steps[2].contains("loss "));
    assert!(out
        .lines()
        .any(|l| l.starts_with("trained 3 steps, final loss ")));
    assert!(out.ends_with(&format!("saved {ckpt}\n")));

    let (code, out, err) = cli(&["eval", "--ckpt", &ckpt, "--data", &data]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("accuracy ") && out.trim_end().ends_with("on 16 samples"));

    // a dataset with more classes than the checkpoint head is rejected
    let wide = path("wide.bin");
    assert_eq!(
        cli(&["synth", "--out", &wide, "--classes", "5", "--count", "10"]).0,
        0
    );
    assert_eq!(cli(&["eval", "--ckpt", &ckpt, "--data", &wide]).0, 1);

    let (code, out, _) = cli(&[
        "ablate",
        "--axis",
        "lr",
        "--choice",
        "0.2/0.01",
        "--variant",
        "ti",
    ]);
    assert_eq!(code, 0);
    assert!(out.starts_with("lr 0.2/0.01: "));
    assert!(out.contains("conv rate 0.2, encoder rate 0.01"));
}
