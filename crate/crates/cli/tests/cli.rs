use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use featpred::data::{write_cifar10, write_idx_dataset};
use featpred::{gabor_filter, rng_from_seed, Dataset, Tensor4};
use featpred_cli::render::Pgm;
use rand::Rng;

fn featpred(args: &[&str], data: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featpred"))
        .args(args)
        .env("FEATPRED_DATA_DIR", data)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Two classes of small images told apart by the orientation of a Gabor
/// pattern.
fn oriented(n: usize, side: usize, channels: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = i % 2;
        let theta = if label == 0 { 0.0 } else { 1.57 } + rng.random_range(-0.2..0.2);
        let g = gabor_filter(side, side, channels, theta, side as f64 / 3.0, side as f64 / 2.0, rng.random_range(0.0..std::f64::consts::TAU));
        let peak = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        data.extend(g.iter().map(|v| 0.5 + 0.45 * v / peak));
        labels.push(label);
    }
    Dataset::new(Tensor4::new(n, side, side, channels, data).unwrap(), labels, 10, "fixture").unwrap()
}

fn mnist_fixture(root: &Path) {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    for (prefix, n, seed) in [("train", 60, 1), ("t10k", 30, 2)] {
        let ds = oriented(n, 8, 1, seed);
        write_idx_dataset(&ds, &dir.join(format!("{prefix}-images-idx3-ubyte")), &dir.join(format!("{prefix}-labels-idx1-ubyte"))).unwrap();
    }
}

fn cifar_fixture(root: &Path) {
    let dir = root.join("cifar-10-batches-bin");
    fs::create_dir_all(&dir).unwrap();
    for k in 1..=5 {
        write_cifar10(&dir.join(format!("data_batch_{k}.bin")), &oriented(6, 32, 3, k)).unwrap();
    }
    write_cifar10(&dir.join("test_batch.bin"), &oriented(6, 32, 3, 9)).unwrap();
}

const MLP: &str = r#"
experiment_id = "tiny"
seed = 1

[dataset]
kind = "mnist"
seed = 2

[model]
kind = "mlp"
hidden = [8, 8]
columns = 2

[sweep]
strategies = ["nokernel"]
fractions = [1.0]

[training]
learning_rate = 0.5
momentum = 0.5
batch_size = 10
epochs = 3
seed = 3
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn nokernel_single_fraction_gives_one_baseline_row() {
    let tmp = tempfile::tempdir().unwrap();
    mnist_fixture(tmp.path());
    let cfg = write_config(tmp.path(), "c.toml", MLP);
    let out = tmp.path().join("out");
    let o = featpred(&["run", &cfg, "--out", out.to_str().unwrap(), "-q"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_rows(&out.join("results.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][2], "nokernel");
    assert_eq!(rows[0][7], "1.000000");
    assert_eq!(rows[0][12], "ok");
    assert!(out.join("checkpoints/00_nokernel_1.json").is_file());
    let trace = fs::read_to_string(out.join("traces/00_nokernel_1.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);
}

#[test]
fn fraction_sweep_rows_are_ordered_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    mnist_fixture(tmp.path());
    let text = MLP.replace(r#"strategies = ["nokernel"]"#, r#"strategies = ["SE-Emp"]"#).replace(
        "fractions = [1.0]",
        "fractions = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]",
    );
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let run = |name: &str, workers: &str| {
        let out = tmp.path().join(name);
        let o = featpred(&["run", &cfg, "--out", out.to_str().unwrap(), "--workers", workers, "-q"], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
        read_rows(&out.join("results.csv"))
    };
    let a = run("a", "1");
    assert_eq!(a.len(), 10);
    assert!(a.iter().all(|r| r[2] == "SE-Emp"));
    let fd: Vec<f64> = a.iter().map(|r| r[7].parse().unwrap()).collect();
    assert!(fd.windows(2).all(|w| w[0] < w[1]), "{fd:?}");

    let b = run("b", "3");
    let strip = |rows: &[Vec<String>]| rows.iter().map(|r| r[..r.len() - 1].to_vec()).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &MLP.replace("fractions = [1.0]", "fractions = [0.5, 1.5]"));
    let o = featpred(&["run", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sweep.fractions[1]"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "d.toml", &MLP.replace("seed = 3", "seed = 3\nbogus = 1"));
    let o = featpred(&["run", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn missing_data_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", MLP);
    let o = featpred(&["run", &cfg, "--out", tmp.path().join("o").to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

const RICA: &str = r#"
experiment_id = "tiny-rica"
seed = 1

[dataset]
kind = "cifar10"
seed = 2

[model]
kind = "rica"
patch = 4
features = 9
sparsity = 0.1
patches = 300

[model.readout]
stride = 4
pool = 2

[model.readout.optimizer]
learning_rate = 0.1
batch_size = 10
epochs = 2

[sweep]
strategies = ["SE"]
fractions = [0.5]

[training]
learning_rate = 0.01
momentum = 0.9
batch_size = 50
epochs = 3
halve_on_increase = true
"#;

#[test]
fn every_cell_diverging_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    cifar_fixture(tmp.path());
    let text = RICA.replace("learning_rate = 0.01", "learning_rate = 1e300").replace("halve_on_increase = true", "");
    let cfg = write_config(tmp.path(), "r.toml", &text);
    let out = tmp.path().join("out");
    let o = featpred(&["run", &cfg, "--out", out.to_str().unwrap(), "-q"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let rows = read_rows(&out.join("results.csv"));
    assert_eq!(rows[0][12], "diverged");
}

#[test]
fn trained_rica_checkpoint_renders_to_a_readable_pgm() {
    let tmp = tempfile::tempdir().unwrap();
    cifar_fixture(tmp.path());
    let cfg = write_config(tmp.path(), "r.toml", RICA);
    let out = tmp.path().join("out");
    let o = featpred(&["run", &cfg, "--out", out.to_str().unwrap(), "-q"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let cp = out.join("checkpoints/00_SE_0.5.json");
    let pgm_path = tmp.path().join("f.pgm");
    let o = featpred(&["render", cp.to_str().unwrap(), "0", pgm_path.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = Pgm::parse(&fs::read_to_string(&pgm_path).unwrap()).unwrap();
    // 9 features of 4x4 in a 3x3 grid with 1-pixel borders.
    assert_eq!((pgm.width, pgm.height), (16, 16));
    assert!(pgm.pixels.contains(&0) && pgm.pixels.contains(&255));

    let o = featpred(&["render", cp.to_str().unwrap(), "1", pgm_path.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("layer 1"), "{}", stderr(&o));
}

#[test]
fn report_merges_result_files() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    fs::write(&a, "x,y\n1,2\n").unwrap();
    fs::write(&b, "x,y\n3,4\n").unwrap();
    let merged = tmp.path().join("m.csv");
    let o = featpred(&["report", a.to_str().unwrap(), b.to_str().unwrap(), "--out", merged.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&merged).unwrap(), "x,y\n1,2\n3,4\n");

    fs::write(&b, "x,z\n3,4\n").unwrap();
    let o = featpred(&["report", a.to_str().unwrap(), b.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}
