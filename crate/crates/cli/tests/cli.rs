use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msit::imageio::{read_pgm, read_ppm, write_ppm};
use msit::snapshot::Snapshot;
use msit::Tensor;
use tempfile::TempDir;

const MICRO: &str = "\
channels=8
encoder_blocks=1
msc_branches=2
proj_branches=2
heads=2
fourier_freqs=8
decoder_hidden=16
decoder_depth=2
patch_lr=8
scale_min=1
scale_max=2
lr=0.001
seed=5
";

fn msit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = msit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn file(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn image(&self, name: &str, h: usize, w: usize) -> PathBuf {
        let p = self.path(name);
        let img = Tensor::<f64>::from_fn(vec![1, 3, h, w], |i| ((i * 37 + 11) % 256) as f64 / 255.0);
        write_ppm(&p, &img).unwrap();
        p
    }

    fn dataset(&self) -> PathBuf {
        let d = self.path("data");
        std::fs::create_dir_all(&d).unwrap();
        let img = Tensor::<f64>::from_fn(vec![1, 3, 16, 16], |i| {
            let (c, y, x) = (i / 256, (i / 16) % 16, i % 16);
            0.5 + 0.3 * ((x as f64 * 0.7 + c as f64).sin() * (y as f64 * 0.45).cos())
        });
        write_ppm(d.join("a.ppm"), &img).unwrap();
        d
    }

    fn model(&self, name: &str, config: &str, zero: bool) -> PathBuf {
        let cfg = self.file(&format!("{name}.cfg"), config);
        let out = self.path(name);
        let mut args = vec!["init", "--config", s(&cfg), "--out", s(&out)];
        if zero {
            args.push("--zero-residual");
        }
        ok(&args);
        out
    }
}

fn ppm_size(p: &Path) -> (usize, usize) {
    let (_, _, h, w) = read_ppm::<f64>(p).unwrap().dims4().unwrap();
    (h, w)
}

fn total_of(stdout: &str) -> usize {
    stdout
        .lines()
        .find(|l| l.starts_with("total"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn params_of_a_single_conv_snapshot() {
    let w = Work::new();
    let mut snap = Snapshot::default();
    snap.records.insert("conv.weight".into(), Tensor::zeros(vec![4, 2, 3, 3]));
    snap.records.insert("conv.bias".into(), Tensor::zeros(vec![4]));
    let p = w.path("toy.snap");
    std::fs::write(&p, snap.to_bytes()).unwrap();
    assert_eq!(total_of(&ok(&["params", "--model", s(&p)])), 76);
}

#[test]
fn output_sizes_round_half_up() {
    let w = Work::new();
    let model = w.model("m", MICRO, false);
    let input = w.image("in.ppm", 24, 24);
    for (scale, want) in [("1.7", (41, 41)), ("2.6", (62, 62)), ("1.5,2", (36, 48))] {
        let out = w.path("out.ppm");
        ok(&["upsample", "--model", s(&model), "--in", s(&input), "--scale", scale, "--out", s(&out)]);
        assert_eq!(ppm_size(&out), want, "scale {scale}");
    }
}

#[test]
fn zero_residual_scale_one_round_trip() {
    let w = Work::new();
    let model = w.model("m", MICRO, true);
    let input = w.image("in.ppm", 10, 12);
    let out = w.path("out.ppm");
    ok(&["upsample", "--model", s(&model), "--in", s(&input), "--scale", "1", "--out", s(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&input).unwrap());
}

#[test]
fn error_map_against_itself_is_black() {
    let w = Work::new();
    let model = w.model("m", MICRO, false);
    let input = w.image("in.ppm", 12, 12);
    let first = w.path("first.ppm");
    ok(&["upsample", "--model", s(&model), "--in", s(&input), "--scale", "2.2", "--out", s(&first)]);
    let again = w.path("again.ppm");
    let map = w.path("err.pgm");
    let stdout = ok(&[
        "upsample", "--model", s(&model), "--in", s(&input), "--scale", "2.2", "--out", s(&again),
        "--ref", s(&first), "--error-map", s(&map),
    ]);
    assert!(stdout.contains("psnr_db=inf"), "{stdout}");
    let m = read_pgm::<f64>(&map).unwrap();
    assert_eq!(m.shape(), &[1, 1, 26, 26]);
    assert!(m.data().iter().all(|&v| v == 0.0));
}

#[test]
fn input_errors_exit_two() {
    let w = Work::new();
    let model = w.model("m", MICRO, false);
    let out = w.path("o.ppm");
    let missing = msit(&["upsample", "--model", s(&model), "--in", "/nonexistent.ppm", "--scale", "2", "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));

    let bad = w.file("bad.cfg", "channels=8\nchanels=16\n");
    let r = msit(&["init", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("chanels"));

    let not_image = w.file("x.ppm", "hello");
    let r = msit(&["upsample", "--model", s(&model), "--in", s(&not_image), "--scale", "2", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));

    let input = w.image("in.ppm", 12, 12);
    let r = msit(&["upsample", "--model", s(&model), "--in", s(&input), "--scale", "-1", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));

    assert_eq!(msit(&["upsample", "--bogus"]).status.code(), Some(2));
}

#[test]
fn consistency_errors_exit_three() {
    let w = Work::new();
    let model = w.model("m", MICRO, false);
    let mut snap = Snapshot::from_bytes(&std::fs::read(&model).unwrap()).unwrap();
    snap.meta.insert("config.channels".into(), "16".into());
    let broken = w.path("broken.snap");
    std::fs::write(&broken, snap.to_bytes()).unwrap();
    let input = w.image("in.ppm", 12, 12);
    let out = w.path("o.ppm");
    let r = msit(&["upsample", "--model", s(&broken), "--in", s(&input), "--scale", "2", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));

    let cfg = w.file("g.cfg", MICRO);
    let r = msit(&["gradcheck", "--config", s(&cfg), "--tolerance", "0"]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn zero_step_training_writes_the_initialisation() {
    let w = Work::new();
    let text = format!("{MICRO}steps=0\n");
    let init = w.model("init.snap", &text, false);
    let cfg = w.file("t.cfg", &text);
    let out = w.path("trained.snap");
    ok(&["train", "--config", s(&cfg), "--data", s(&w.dataset()), "--out", s(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&init).unwrap());
}

#[test]
fn training_reruns_are_byte_identical() {
    let w = Work::new();
    let cfg = w.file("t.cfg", &format!("{MICRO}steps=3\n"));
    let data = w.dataset();
    let (a, b) = (w.path("a.snap"), w.path("b.snap"));
    let out_a = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&a)]);
    let out_b = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(w.path("a.snap.loss.csv")).unwrap(),
        std::fs::read(w.path("b.snap.loss.csv")).unwrap()
    );
    assert!(out_a.starts_with("final_loss="));
    assert_eq!(out_a, out_b);
    let csv = std::fs::read_to_string(w.path("a.snap.loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,lr,loss"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn gradcheck_passes_on_the_micro_config() {
    let w = Work::new();
    let cfg = w.file("g.cfg", MICRO);
    let stdout = ok(&["gradcheck", "--config", s(&cfg)]);
    let last = stdout.lines().last().unwrap();
    let v: f64 = last.strip_prefix("max_rel_err=").unwrap().parse().unwrap();
    assert!(v <= 1e-3, "{stdout}");
    for module in ["encoder", "msno", "mssa", "fourier", "decoder"] {
        assert!(stdout.lines().any(|l| l.starts_with(module)), "{module}");
    }
}

#[test]
fn stage_two_trains_fewer_parameters() {
    let w = Work::new();
    let base = "patch_lr=12\nscale_min=1\nscale_max=1\nsteps=0\n";
    let s1 = w.model("s1.snap", base, false);
    let cfg = w.file("s2.cfg", &format!("{base}stage=stage2_rim\n"));
    let s2 = w.path("s2.snap");
    ok(&["train", "--config", s(&cfg), "--data", s(&w.dataset()), "--init", s(&s1), "--out", s(&s2)]);
    let n1 = total_of(&ok(&["params", "--model", s(&s1), "--trainable"]));
    let n2 = total_of(&ok(&["params", "--model", s(&s2), "--trainable"]));
    assert!(n2 < n1, "{n2} vs {n1}");
}

#[test]
fn cumulative_writes_every_stage() {
    let w = Work::new();
    let c1 = w.file("c1.cfg", &format!("{MICRO}steps=2\n"));
    let c2 = w.file("c2.cfg", &format!("{MICRO}steps=2\nstage=stage2_rim\n"));
    let out = w.path("final.snap");
    ok(&["cumulative", "--config1", s(&c1), "--config2", s(&c2), "--data", s(&w.dataset()), "--out", s(&out)]);
    for name in ["final.snap", "final.snap.stage1", "final.snap.stage2", "final.snap.stage1.loss.csv", "final.snap.stage2.loss.csv"] {
        assert!(w.path(name).exists(), "{name}");
    }
    let folded = Snapshot::from_bytes(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(folded.meta["stage"], "folded");

    let c3 = w.file("c3.cfg", &format!("{MICRO}steps=2\nstage=stage2_rim\nheads=4\n").replace("heads=2\n", ""));
    let r = msit(&["cumulative", "--config1", s(&c1), "--config2", s(&c3), "--data", s(&w.dataset()), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("heads"));
}

#[test]
fn manifest_checksums_match_outputs() {
    let w = Work::new();
    let cfg = w.file("m.cfg", MICRO);
    let out = w.path("m.snap");
    let man = w.path("run.manifest");
    ok(&["init", "--config", s(&cfg), "--out", s(&out), "--manifest", s(&man)]);
    let text = std::fs::read_to_string(&man).unwrap();
    assert!(text.starts_with("command=init\n"));
    assert!(text.contains("seed=5\n"));
    use sha2::Digest;
    let digest = hex::encode(sha2::Sha256::digest(std::fs::read(&out).unwrap()));
    assert!(text.contains(&format!("sha256 {digest} {}", out.display())));

    let r = msit(&["init", "--config", s(&cfg), "--out", s(&w.path("n.snap"))]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("command=init"));
}
