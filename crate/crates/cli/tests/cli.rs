use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stormchip::augment::substream;
use stormchip::datapipe::{
    chip_relative_path, read_manifest, save_chip, write_manifest, ChipRecord, GeoTransform, Label, Split,
};
use stormchip::network::{build_paper_net, Activation, LayerSpec, Network};
use stormchip::persist::save_checkpoint;
use stormchip::tensor::Tensor;

fn stormchip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stormchip"))
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

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SIDE: usize = 64;

fn geo() -> GeoTransform {
    GeoTransform::new([-95.0, 1e-4, 0.0, 29.0, 0.0, -1e-4]).unwrap()
}

/// Writes a strip whose pixels are a deterministic colour pattern, or all
/// black when `black` is set.
fn write_strip(dir: &Path, id: &str, seed: u64, black: bool) {
    let mut data = vec![0.0f32; 3 * SIDE * SIDE];
    if !black {
        for (i, v) in data.iter_mut().enumerate() {
            *v = (((i as u64 * 2654435761 + seed * 97) >> 7) % 200 + 30) as f32 / 255.0;
        }
    }
    save_chip(&Tensor::from_vec(&[3, SIDE, SIDE], data).unwrap(), &dir.join(format!("{id}.png"))).unwrap();
    std::fs::write(dir.join(format!("{id}.geo")), geo().to_sidecar()).unwrap();
}

/// Strips `black_post`, `post` and `pre` plus twelve buildings, one of
/// them too close to the edge and one outside the strips.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let strips = root.join("strips");
    std::fs::create_dir_all(&strips).unwrap();
    write_strip(&strips, "black_post", 0, true);
    write_strip(&strips, "post", 1, false);
    write_strip(&strips, "pre", 2, false);
    std::fs::write(
        strips.join("strips.csv"),
        "strip_id,capture_epoch,phase\nblack_post,1504000000,post\npost,1504100000,post\npre,1500000000,pre\n",
    )
    .unwrap();

    let mut csv = String::from("id,lon,lat,label\n");
    let g = geo();
    for i in 0..12 {
        let (col, row) = (12 + (i % 4) * 12, 16 + (i / 4) * 14);
        let (lon, lat) = g.pixel_to_lonlat(col as f64, row as f64);
        let label = if i % 2 == 0 { "damaged" } else { "undamaged" };
        csv.push_str(&format!("b{i:02},{lon},{lat},{label}\n"));
    }
    let (lon, lat) = g.pixel_to_lonlat(2.0, 30.0);
    csv.push_str(&format!("edge,{lon},{lat},damaged\n"));
    let (lon, lat) = g.pixel_to_lonlat(500.0, 30.0);
    csv.push_str(&format!("far,{lon},{lat},undamaged\n"));
    let buildings = root.join("buildings.csv");
    std::fs::write(&buildings, csv).unwrap();
    (strips, buildings)
}

#[test]
fn crop_writes_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (strips, buildings) = fixture(dir.path());
    let out = dir.path().join("crop");
    let o = stormchip(&["crop", "--strips", p(&strips), "--buildings", p(&buildings), "--window", "16", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("buildings=14 kept=12 excluded=2"));
    assert!(stderr(&o).contains("window_px = 16"));

    let rows = read_manifest(&out.join("manifest.csv")).unwrap();
    let by_id = |id: &str| rows.iter().find(|r| r.id == id).unwrap();
    assert_eq!(by_id("b00").source, "post");
    assert_eq!(by_id("b01").source, "pre");
    assert_eq!(by_id("edge").exclude_reason.map(|r| r.as_str()), Some("edge_overflow"));
    assert_eq!(by_id("far").exclude_reason.map(|r| r.as_str()), Some("out_of_bounds"));
    let chip = image::open(out.join("chips/b00.png")).unwrap();
    assert_eq!((chip.width(), chip.height()), (16, 16));

    let first = std::fs::read(out.join("manifest.csv")).unwrap();
    let again = stormchip(&["crop", "--strips", p(&strips), "--buildings", p(&buildings), "--window", "16", "--out", p(&out)]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(std::fs::read(out.join("manifest.csv")).unwrap(), first);
}

#[test]
fn default_window_is_128() {
    let o = stormchip(&["crop", "--strips", "x", "--buildings", "y", "--out", "z", "--set", "epochs=1"]);
    assert!(stderr(&o).contains("window_px = 128"));
}

#[test]
fn missing_sidecar_is_a_data_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let (strips, buildings) = fixture(dir.path());
    std::fs::remove_file(strips.join("pre.geo")).unwrap();
    let o = stormchip(&["crop", "--strips", p(&strips), "--buildings", p(&buildings), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("pre.geo"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 3\nwindow = 64\n").unwrap();
    let o = stormchip(&["crop", "--strips", "s", "--buildings", "b", "--out", "o", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key \"window\""));
    assert_eq!(stormchip(&["eval", "--manifest", "m"]).status.code(), Some(2));
    assert_eq!(stormchip(&["gradcheck", "--seeds-per-kind", "0"]).status.code(), Some(2));
}

fn stub_row(id: String, label: Label, split: Split, chip: &str) -> ChipRecord {
    ChipRecord {
        id,
        lon: -95.0,
        lat: 29.0,
        label,
        chip_path: chip.into(),
        window_px: 4,
        source: "s".into(),
        capture_epoch: None,
        black_fraction: Some(0.0),
        cloud_score: Some(0.0),
        exclude_reason: None,
        split,
    }
}

#[test]
fn eval_majority_stub_on_unbalanced_split() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let flat = Tensor::new(&[3, 4, 4], 0.5f32).unwrap();
    save_chip(&flat, &root.join(chip_relative_path("shared"))).unwrap();
    let chip = chip_relative_path("shared");
    let mut rows = Vec::new();
    for i in 0..8000 {
        let split = if i < 1000 { Split::TestBalanced } else { Split::TestUnbalanced };
        rows.push(stub_row(format!("p{i:05}"), Label::Damaged, split, &chip));
    }
    for i in 0..1000 {
        rows.push(stub_row(format!("n{i:05}"), Label::Undamaged, Split::TestBalanced, &chip));
    }
    rows.push(stub_row("t0".into(), Label::Undamaged, Split::Train, &chip));
    let manifest = root.join("manifest.csv");
    write_manifest(&rows, &manifest).unwrap();

    // Zero weights and a large bias: every chip scores ≈ 1.
    let mut stub = Network::<f32>::new(
        &[3, 4, 4],
        vec![LayerSpec::Flatten, LayerSpec::Dense { out_units: 1 }, LayerSpec::Activation(Activation::Sigmoid)],
    )
    .unwrap();
    stub.layer_params_mut(1).unwrap().1.data_mut()[0] = 20.0;
    let ckpt = root.join("stub.ckpt");
    save_checkpoint(&stub, &ckpt).unwrap();

    let out = root.join("eval");
    let o = stormchip(&["eval", "--manifest", p(&manifest), "--ckpt", p(&ckpt), "--split", "test_unbalanced", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let acc: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("accuracy="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((acc - 0.8889).abs() <= 1e-4, "{text}");
    assert!(text.contains("n=9000 damaged=8000 undamaged=1000"));
    assert!(text.contains("auc=0.5000"));

    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("fp=1000\n") && report.contains("tp=8000\n"));
    let wrong = std::fs::read_to_string(out.join("misclassified.csv")).unwrap();
    assert_eq!(wrong.lines().count(), 1001);
    assert!(wrong.lines().skip(1).all(|l| l.ends_with(",FP")));
    assert!(std::fs::read_to_string(out.join("roc.csv")).unwrap().starts_with("fpr,tpr\n0,0\n"));
}

#[test]
fn gradcheck_is_deterministic() {
    let a = stormchip(&["gradcheck", "--seed", "7", "--seeds-per-kind", "2"]);
    let b = stormchip(&["gradcheck", "--seed", "7", "--seeds-per-kind", "2"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).trim_end().ends_with("overall PASS"));
}

#[test]
fn inspect_exports_one_map_per_first_layer_filter() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = build_paper_net();
    net.init_xavier(&mut substream(3, 0));
    let ckpt = dir.path().join("full.ckpt");
    save_checkpoint(&net, &ckpt).unwrap();
    let data: Vec<f32> = (0..3 * 40 * 40).map(|i| (i % 17) as f32 / 17.0).collect();
    let chip = dir.path().join("chip.png");
    save_chip(&Tensor::from_vec(&[3, 40, 40], data).unwrap(), &chip).unwrap();
    let out = dir.path().join("maps");
    let o = stormchip(&["inspect", "--ckpt", p(&ckpt), "--chip", p(&chip), "--layers", "1", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let maps = std::fs::read_dir(&out).unwrap().count();
    assert_eq!(maps, 32);
    let first = image::open(out.join("layer1_filter0.png")).unwrap();
    assert_eq!((first.width(), first.height()), (148, 148));
    assert!(stdout(&o).contains("layer 1: dead_filters="));
    let bad = stormchip(&["inspect", "--ckpt", p(&ckpt), "--chip", p(&chip), "--layers", "5", "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn split_train_eval_annotate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (strips, buildings) = fixture(root);
    let crop = root.join("crop");
    let o = stormchip(&["crop", "--strips", p(&strips), "--buildings", p(&buildings), "--window", "16", "--out", p(&crop)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let small = root.join("small.cfg");
    std::fs::write(
        &small,
        "train_per_class = 2\nval_per_class = 1\nbalanced_test_per_class = 1\nunbalanced_negatives = 1\n\
         unbalanced_ratio = 2\nbatch_size = 2\nepochs = 1\naugment = false\n",
    )
    .unwrap();
    let manifest = crop.join("manifest.csv");
    let before = std::fs::read(&manifest).unwrap();
    let split_path = root.join("splits").join("manifest.csv");
    let o = stormchip(&["split", "--manifest", p(&manifest), "--config", p(&small), "--seed", "3", "--out", p(&split_path)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("train=2/2"));
    assert!(stdout(&o).contains("test_unbalanced=2/1"));
    assert_eq!(std::fs::read(&manifest).unwrap(), before, "split must not touch its input");
    let rows = read_manifest(&split_path).unwrap();
    assert!(rows.iter().filter(|r| !r.chip_path.is_empty()).all(|r| split_path.parent().unwrap().join(&r.chip_path).exists()));

    let too_big = stormchip(&["split", "--manifest", p(&manifest), "--out", p(&root.join("x.csv"))]);
    assert_eq!(too_big.status.code(), Some(3));
    assert!(stderr(&too_big).contains("deficit"));

    let run = root.join("run");
    let o = stormchip(&["train", "--manifest", p(&split_path), "--config", p(&small), "--out", p(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("first training step:"));
    for f in ["model.ckpt", "last.ckpt", "history.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let lr = root.join("lr");
    let o = stormchip(&[
        "train", "--manifest", p(&split_path), "--config", p(&small), "--model", "lr", "--features-from",
        p(&run.join("model.ckpt")), "--out", p(&lr),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let no_features = stormchip(&["train", "--manifest", p(&split_path), "--model", "lr", "--out", p(&lr)]);
    assert_eq!(no_features.status.code(), Some(2));

    let eval = root.join("eval");
    let o = stormchip(&["eval", "--manifest", p(&split_path), "--ckpt", p(&lr.join("model.ckpt")), "--split", "val", "--out", p(&eval)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy="));

    let ann = root.join("annotations.csv");
    let o = stormchip(&[
        "annotate", "--ckpt", p(&run.join("model.ckpt")), "--buildings", p(&buildings), "--strips", p(&strips),
        "--window", "16", "--out", p(&ann),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&ann).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,lon,lat,probability,predicted_label"));
    assert_eq!(lines.count(), 12);
}
