//! End-to-end runs of the `slim` binary.

use std::path::Path;
use std::process::{Command, Output};

use slim3d::geo::GeoParams;
use slim3d::mask::{causal_mask, load_mask, MaskStrategy};
use slim3d::scene::{save_layout, save_scene, SceneObjects, TokenLayout};
use slim3d::scenegen::oracle::oracle_mask;
use tempfile::TempDir;

fn slim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slim"))
        .args(args)
        .env("SLIM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Inputs {
    dir: TempDir,
    scene: SceneObjects,
    layout: TokenLayout,
}

impl Inputs {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let scene = SceneObjects::from_centers([
            [0.0, 0.0, 0.0],
            [0.5, 0.1, 0.0],
            [0.2, 0.7, 0.1],
            [4.0, 0.3, 0.2],
            [4.4, -0.6, 0.0],
            [3.7, 0.9, 0.5],
            [-3.0, 3.3, 1.0],
            [9.0, 9.5, -2.0],
        ])
        .unwrap();
        let layout = TokenLayout::new(2, 8, 2, 3, 1).unwrap();
        save_scene(&scene, dir.path().join("s.scn")).unwrap();
        save_layout(&layout, dir.path().join("l.lay")).unwrap();
        Inputs { dir, scene, layout }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn mask(&self, strategy: &str, extra: &[&str]) -> (Output, String) {
        let out = self.path(&format!("{}.smk", strategy.replace([':', '+'], "_")));
        let (scene, layout) = (self.path("s.scn"), self.path("l.lay"));
        let mut args = vec![
            "mask",
            "--scene",
            &scene,
            "--layout",
            &layout,
            "--strategy",
            strategy,
            "--out",
            &out,
        ];
        args.extend(extra);
        (slim(&args), out)
    }
}

#[test]
fn mask_writes_a_file_matching_the_oracle() {
    let inputs = Inputs::new();
    for (spec, kmin, kmax) in [
        ("geo+inst", 2, 10),
        ("geo", 1, 3),
        ("fixedn:5", 2, 10),
        ("diag+inst", 2, 10),
    ] {
        let (kmin_s, kmax_s) = (kmin.to_string(), kmax.to_string());
        let (o, path) = inputs.mask(spec, &["--kmin", &kmin_s, "--kmax", &kmax_s]);
        assert!(
            o.status.success(),
            "{spec}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(
            stdout(&o).contains("density"),
            "{spec}: stats line `{}`",
            stdout(&o)
        );
        let strategy = MaskStrategy::parse(spec, GeoParams::new(kmin, kmax).unwrap()).unwrap();
        let want = oracle_mask(&inputs.scene, &inputs.layout, &strategy).unwrap();
        assert_eq!(&load_mask(&path).unwrap(), want.allow(), "{spec}");
    }
}

#[test]
fn causal_strategy_ignores_geometry() {
    let inputs = Inputs::new();
    let (o, path) = inputs.mask("causal", &[]);
    assert!(o.status.success());
    assert_eq!(
        &load_mask(&path).unwrap(),
        causal_mask(inputs.layout.len()).unwrap().allow()
    );
}

#[test]
fn bare_fixedn_uses_the_nfixed_flag() {
    let inputs = Inputs::new();
    let (o, path) = inputs.mask("fixedn", &["--nfixed", "3"]);
    assert!(o.status.success());
    let strategy = MaskStrategy::parse("fixedn:3", GeoParams::default()).unwrap();
    let want = oracle_mask(&inputs.scene, &inputs.layout, &strategy).unwrap();
    assert_eq!(&load_mask(&path).unwrap(), want.allow());
}

#[test]
fn bad_inputs_exit_with_usage_code() {
    let inputs = Inputs::new();
    let (o, _) = inputs.mask("geo:7", &[]);
    assert_eq!(o.status.code(), Some(2));
    let (o, _) = inputs.mask("geo", &["--kmin", "5", "--kmax", "2"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(inputs.path("bad.scn"), "SLIMSCENE v1\n2\n0 0 0\n").unwrap();
    let o = slim(&[
        "mask",
        "--scene",
        &inputs.path("bad.scn"),
        "--layout",
        &inputs.path("l.lay"),
        "--out",
        &inputs.path("x.smk"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    assert!(!Path::new(&inputs.path("x.smk")).exists());
    assert_eq!(slim(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn check_is_deterministic_and_passes() {
    let a = slim(&["check", "--seed", "7", "--cases", "60"]);
    let b = slim(&["check", "--seed", "7", "--cases", "60"]);
    assert!(a.status.success(), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("all suites passed"));
}

#[test]
fn injected_gradient_fault_fails_check() {
    let o = slim(&["check", "--cases", "20", "--fault", "inject-grad"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(!text.contains("all suites passed"));
    assert!(
        text.contains("w_v") || text.contains("W_V") || text.contains("value"),
        "{text}"
    );
}

#[test]
fn bench_emits_csv() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench.csv");
    let o = slim(&[
        "bench",
        "--sizes",
        "16,32",
        "--trials",
        "3",
        "--warmup",
        "1",
        "--out",
        &out.to_string_lossy(),
    ]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv, stdout(&o));
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("n,strategy,object_block_density"));
    assert_eq!(lines.len(), 1 + 2 * 3);
}

#[test]
fn ablate_table_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("table.csv");
    let curves = dir.path().join("curves");
    let args = [
        "ablate",
        "--seeds",
        "2",
        "--steps",
        "3",
        "--out",
        &out.to_string_lossy(),
        "--curves",
        &curves.to_string_lossy(),
    ];
    let a = slim(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let table = std::fs::read_to_string(&out).unwrap();
    assert_eq!(table.lines().count(), 1 + 8);
    assert!(table.starts_with("strategy,mean_accuracy,sd_accuracy,runs,seed0,seed1"));
    assert_eq!(std::fs::read_dir(&curves).unwrap().count(), 16);
    let b = slim(&args);
    assert_eq!(table, std::fs::read_to_string(&out).unwrap());
    assert_eq!(stdout(&a), stdout(&b));
}
