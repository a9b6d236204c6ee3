use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bevr_cli::{class_color, map_pixels};
use bevr_core::dataset::load_dataset;
use bevr_core::geometry::Rig;
use bevr_core::Class;

const TINY: &str = "bev_rows = 8\nbev_cols = 8\nchannels = 8\nheads = 2\npoints = 2\nlayers = 1\nlevels = 2\n\
                    ffn_mult = 1\nstem_stride = 1\nz_anchors = 0, 1\nepochs = 2\nbatch_size = 2\nlr = 1e-3\n";

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work { dir: tempfile::tempdir().unwrap() };
        fs::write(w.path("tiny.cfg"), format!("{TINY}rig = {}\n", w.path("rig.txt").display())).unwrap();
        fs::write(w.path("rig.txt"), Rig::surround(16, 16, 100f64.to_radians()).to_text()).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn bevr(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bevr"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("BEVR_THREADS")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.bevr(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn gen(&self, name: &str, count: usize, seed: u64) -> PathBuf {
        let p = self.path(name);
        self.ok(&["gen", "--config", "tiny.cfg", "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", name]);
        p
    }

    fn train(&self, data: &str, out: &str, extra: &[&str]) -> String {
        let mut args = vec!["train", "--config", "tiny.cfg", "--data", data, "--out", out];
        args.extend_from_slice(extra);
        self.ok(&args)
    }
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

fn read_ppm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let header: Vec<&[u8]> = bytes.splitn(5, |b| b.is_ascii_whitespace()).collect();
    assert_eq!(header[0], b"P6");
    let num = |s: &[u8]| std::str::from_utf8(s).unwrap().parse::<usize>().unwrap();
    let (w, h) = (num(header[1]), num(header[2]));
    assert_eq!(num(header[3]), 255);
    (w, h, header[4].to_vec())
}

#[test]
fn gen_is_deterministic_and_accepts_zero() {
    let w = Work::new();
    let a = fs::read(w.gen("a.bevd", 3, 4)).unwrap();
    let b = fs::read(w.gen("b.bevd", 3, 4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(fs::read(w.gen("c.bevd", 3, 5)).unwrap(), a);
    assert!(load_dataset(w.gen("empty.bevd", 0, 4)).unwrap().is_empty());
}

#[test]
fn usage_errors_exit_one() {
    let w = Work::new();
    assert_eq!(code(&w.bevr(&["frobnicate"])), Some(1));
    assert_eq!(code(&w.bevr(&["gen", "--count", "1"])), Some(1));
    assert_eq!(code(&w.bevr(&["gen", "--set", "no_such_key=3", "--out", "x"])), Some(1));
    assert_eq!(code(&w.bevr(&["train", "--class", "bicycle", "--out", "m.ckpt"])), Some(1));
    assert_eq!(code(&w.bevr(&["train", "--out", "m.ckpt"])), Some(1));
    assert_eq!(code(&w.bevr(&["--help"])), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let w = Work::new();
    assert_eq!(code(&w.bevr(&["eval", "--checkpoint", "missing.ckpt", "--data", "missing.bevd"])), Some(2));
    w.gen("d.bevd", 2, 1);
    w.train("d.bevd", "m.ckpt", &[]);
    let mismatch = w.bevr(&["eval", "--checkpoint", "m.ckpt", "--data", "d.bevd", "--class", "lane"]);
    assert_eq!(code(&mismatch), Some(2));
    let render = w.bevr(&["render", "--checkpoint", "m.ckpt", "--data", "d.bevd", "--index", "2", "--out", "r"]);
    assert_eq!(code(&render), Some(2));
}

#[test]
fn diverging_training_names_the_step() {
    let w = Work::new();
    w.gen("d.bevd", 2, 1);
    let out = w.bevr(&["train", "--config", "tiny.cfg", "--data", "d.bevd", "--out", "m.ckpt", "--set", "lr=1e300"]);
    assert_eq!(code(&out), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("step"), "{err}");
    assert!(!w.path("m.ckpt").exists());
}

#[test]
fn train_logs_every_epoch_and_resume_continues() {
    let w = Work::new();
    w.gen("d.bevd", 4, 2);
    let log = w.train("d.bevd", "m.ckpt", &[]);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    for (k, line) in lines[..2].iter().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[0], "epoch");
        assert_eq!(f[1], (k + 1).to_string());
        assert_eq!(f[2], "step");
        assert!(f.contains(&"l_main") && f.contains(&"l_aux") && f.contains(&"train_iou"), "{line}");
    }
    assert!(lines[2].ends_with("step\t4"), "{}", lines[2]);

    let resumed = w.ok(&["train", "--resume", "m.ckpt", "--data", "d.bevd", "--out", "m2.ckpt"]);
    assert!(resumed.lines().next().unwrap().starts_with("epoch\t1\tstep\t6"), "{resumed}");
    assert!(resumed.trim_end().ends_with("step\t8"));

    let m5 = w.train("d.bevd", "m5.ckpt", &["--variant", "m5"]);
    for line in m5.lines().filter(|l| l.starts_with("epoch")) {
        let f: Vec<&str> = line.split('\t').collect();
        let aux = f[f.iter().position(|x| *x == "l_aux").unwrap() + 1];
        assert_eq!(aux.parse::<f64>().unwrap(), 0.0, "{line}");
    }
}

#[test]
fn same_seed_trains_identical_checkpoints() {
    let w = Work::new();
    w.gen("d.bevd", 2, 3);
    w.train("d.bevd", "a.ckpt", &["--seed", "9"]);
    w.train("d.bevd", "b.ckpt", &["--seed", "9"]);
    assert_eq!(fs::read(w.path("a.ckpt")).unwrap(), fs::read(w.path("b.ckpt")).unwrap());
}

#[test]
fn eval_reports_are_stable() {
    let w = Work::new();
    w.gen("d.bevd", 3, 1);
    w.gen("empty.bevd", 0, 1);
    w.train("d.bevd", "m.ckpt", &[]);
    let a = w.ok(&["eval", "--checkpoint", "m.ckpt", "--data", "d.bevd"]);
    let b = w.ok(&["eval", "--checkpoint", "m.ckpt", "--data", "d.bevd"]);
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "class\tvehicle\tsamples\t3");
    assert!(lines[1].starts_with("sample\t0\tiou\t"));
    assert!(lines[4].starts_with("mean_iou\t"));

    let empty = w.ok(&["eval", "--checkpoint", "m.ckpt", "--data", "empty.bevd"]);
    assert_eq!(empty, "class\tvehicle\tsamples\t0\n");
}

#[test]
fn render_writes_recolored_maps_and_images() {
    let w = Work::new();
    let data = w.gen("d.bevd", 2, 6);
    w.train("d.bevd", "m.ckpt", &[]);
    w.ok(&["render", "--checkpoint", "m.ckpt", "--data", "d.bevd", "--index", "1", "--out", "r"]);
    let samples = load_dataset(data).unwrap();
    let map = samples[1].map(Class::Vehicle).unwrap();

    let (gw, gh, gt) = read_ppm(&w.path("r/gt.ppm"));
    assert_eq!((gw, gh), (8, 8));
    assert_eq!(gt, map_pixels(map, Class::Vehicle));
    let painted = gt.chunks(3).filter(|p| *p == class_color(Class::Vehicle)).count();
    assert_eq!(painted, map.count());

    for name in ["pred.ppm", "aux.ppm"] {
        let (pw, ph, px) = read_ppm(&w.path("r").join(name));
        assert_eq!((pw, ph, px.len()), (8, 8, 8 * 8 * 3), "{name}");
    }
    for k in 0..4 {
        let (iw, ih, px) = read_ppm(&w.path(&format!("r/cam{k}.ppm")));
        assert_eq!((iw, ih, px.len()), (16, 16, 16 * 16 * 3));
    }
}

#[test]
fn gradcheck_passes_and_catches_a_bad_gradient() {
    let w = Work::new();
    let report = w.ok(&["gradcheck"]);
    let checks: Vec<&str> = report.lines().filter(|l| l.starts_with("pass\t") || l.starts_with("FAIL\t")).collect();
    assert!(checks.len() >= 20);
    assert!(checks.iter().all(|l| l.starts_with("pass\t")));
    assert!(report.lines().last().unwrap().starts_with(&format!("checks\t{}\tpassed\t{}", checks.len(), checks.len())));

    let faulty = w.bevr(&["gradcheck", "--inject-fault", "softmax:1.01"]);
    assert_eq!(code(&faulty), Some(3));
    assert!(String::from_utf8_lossy(&faulty.stdout).contains("FAIL\t"));
}
