//! End-to-end runs of the `sqnet` binary: each test drives the real
//! executable over a scratch directory and inspects the files it leaves
//! behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sqnet(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sqnet"));
    cmd.args(args);
    cmd.env_remove("SQNET_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary launches")
}

fn ok(args: &[&str]) -> Output {
    let out = sqnet(args, &[]);
    assert!(
        out.status.success(),
        "`sqnet {}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails(args: &[&str]) -> String {
    let out = sqnet(args, &[]);
    assert!(!out.status.success(), "`sqnet {}` unexpectedly succeeded", args.join(" "));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Scratch directory, removed on drop.
struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("sqnet-cli-{}-{}", tag, std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.path(name)).unwrap_or_else(|e| panic!("reading {}: {}", name, e))
    }

    fn write_config(&self, name: &str, text: &str) -> String {
        fs::write(self.path(name), text).unwrap();
        self.arg(name)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn lines(csv: &str) -> Vec<&str> {
    csv.lines().collect()
}

const IMAGE_CFG: &str = "arch = sym_res\n\
                         depth = 2\n\
                         base_channels = 4\n\
                         bits_w = 4\n\
                         bits_a = 4\n\
                         epochs = 3\n\
                         lr = 0.02\n\
                         batch_size = 16\n\
                         data_size = 60\n\
                         data_classes = 2\n";

#[test]
fn image_pipeline_runs_end_to_end() {
    let t = Scratch::new("image");
    let cfg = t.write_config("exp.cfg", IMAGE_CFG);
    let (data, run) = (t.arg("data"), t.arg("run"));

    ok(&["gen-data", "--config", &cfg, "--out", &data]);
    assert!(t.path("data/images.sqnt").is_file());

    ok(&["train", "--config", &cfg, "--data", &data, "--out", &run]);
    let metrics = t.read("run/metrics.csv");
    let rows = lines(&metrics);
    assert_eq!(rows[0], "epoch,bits,lr,train_loss,train_acc,val_acc");
    assert_eq!(rows.len(), 4, "header plus one row per epoch");
    assert!(rows[1].starts_with("0,4,"), "quantized run logs its bit width: {}", rows[1]);
    let manifest = t.read("run/manifest.txt");
    assert!(manifest.contains("command = train"), "{}", manifest);
    assert!(manifest.contains("config_hash = "), "{}", manifest);
    assert!(manifest.contains("seed = 0"), "{}", manifest);
    // The canonical config alongside the manifest reproduces the run.
    assert!(t.read("run/config.txt").contains("bits_w = 4"));

    let evald = t.arg("evald");
    ok(&["eval", "--config", &cfg, "--data", &data, "--model", &t.arg("run/model.sqnt"), "--out", &evald]);
    let eval = t.read("evald/eval.csv");
    let rows = lines(&eval);
    assert_eq!(rows[0], "split,samples,accuracy");
    assert!(rows[1].starts_with("train,54,"), "{}", eval);
    assert!(rows[2].starts_with("val,6,"), "{}", eval);

    let an = t.arg("an");
    ok(&["analyze", "--config", &cfg, "--data", &data, "--model", &t.arg("run/model.sqnt"), "--out", &an]);
    let div = t.read("an/divergence.csv");
    let rows = lines(&div);
    assert_eq!(rows[0], "layer,mse");
    assert_eq!(rows.len(), 4, "one row per trunk block (res, pool, widen): {}", div);
    for (i, row) in rows[1..].iter().enumerate() {
        let mse: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(row.starts_with(&format!("{},", i + 1)) && mse.is_finite(), "{}", row);
    }

    let st = t.arg("st");
    ok(&["stability", "--config", &cfg, "--data", &data, "--model", &t.arg("run/model.sqnt"), "--out", &st]);
    let bound = t.read("st/step_bound.csv");
    assert_eq!(lines(&bound)[0], "index,kind,h,norm,bound,ok,certified");
    assert_eq!(lines(&bound).len(), 4, "{}", bound);
    let pert = t.read("st/perturbation.csv");
    assert_eq!(lines(&pert)[0], "stage,norm");
    assert_eq!(lines(&pert).len(), 5, "input perturbation plus one row per trunk block: {}", pert);
}

#[test]
fn integer_export_and_inference_match_the_float_model() {
    let t = Scratch::new("int");
    let cfg = t.write_config("exp.cfg", IMAGE_CFG);
    let (data, run, ex, inf) = (t.arg("data"), t.arg("run"), t.arg("ex"), t.arg("inf"));

    ok(&["gen-data", "--config", &cfg, "--out", &data]);
    ok(&["train", "--config", &cfg, "--data", &data, "--out", &run]);
    let model = t.arg("run/model.sqnt");
    ok(&["export-int", "--config", &cfg, "--model", &model, "--out", &ex]);
    assert!(t.path("ex/int_model.sqnt").is_file());

    // The same checkpoint's kernels live on the 4-bit grid, not the 8-bit one.
    let err = fails(&["export-int", "--config", &cfg, "--model", &model, "--out", &t.arg("exbad"), "--bits", "8"]);
    assert!(err.contains("off the 8-bit grid"), "{}", err);

    ok(&[
        "infer-int", "--config", &cfg, "--data", &data, "--model", &t.arg("ex/int_model.sqnt"),
        "--out", &inf, "--limit", "5", "--check", &model,
    ]);
    let logits = t.read("inf/logits.csv");
    let rows = lines(&logits);
    assert_eq!(rows[0], "sample,pred,logit0,logit1");
    assert_eq!(rows.len(), 6, "{}", logits);
    let check = t.read("inf/grid_check.csv");
    let rows = lines(&check);
    assert_eq!(rows[0], "sites,compared,mismatches,max_logit_gap");
    let fields: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(fields[2], "0", "integer and float paths disagree: {}", check);
}

#[test]
fn graph_pipeline_runs_end_to_end() {
    let t = Scratch::new("graph");
    let cfg = t.write_config(
        "g.cfg",
        "task = graph\n\
         arch = gcn_sym\n\
         depth = 3\n\
         base_channels = 8\n\
         bits_w = 4\n\
         bits_a = 4\n\
         epochs = 5\n\
         lr = 0.05\n\
         data_size = 60\n\
         data_classes = 3\n\
         data_noise = 0.3\n",
    );
    let (data, run, ex, inf) = (t.arg("data"), t.arg("run"), t.arg("ex"), t.arg("inf"));

    ok(&["gen-data", "--config", &cfg, "--out", &data]);
    assert!(t.path("data/graph.sqnt").is_file() && t.path("data/graph.edges").is_file());

    ok(&["train", "--config", &cfg, "--data", &data, "--out", &run]);
    let model = t.arg("run/model.sqnt");

    let an = t.arg("an");
    ok(&["analyze", "--config", &cfg, "--data", &data, "--model", &model, "--out", &an]);
    assert_eq!(lines(&t.read("an/divergence.csv")).len(), 4, "one row per diffusion layer");

    let st = t.arg("st");
    ok(&["stability", "--config", &cfg, "--data", &data, "--model", &model, "--out", &st]);
    assert_eq!(lines(&t.read("st/step_bound.csv")).len(), 4);
    assert!(!t.path("st/perturbation.csv").exists(), "feature-map perturbation is image-only");

    ok(&["export-int", "--config", &cfg, "--model", &model, "--out", &ex]);
    ok(&[
        "infer-int", "--config", &cfg, "--data", &data, "--model", &t.arg("ex/int_model.sqnt"),
        "--out", &inf, "--limit", "4", "--check", &model,
    ]);
    let check = t.read("inf/grid_check.csv");
    let fields: Vec<&str> = lines(&check)[1].split(',').collect();
    assert_eq!(fields[2], "0", "integer and float paths disagree: {}", check);
    assert!(lines(&t.read("inf/logits.csv"))[0].starts_with("node,pred,logit0"));
}

#[test]
fn report_merges_two_divergence_tables() {
    let t = Scratch::new("report");
    fs::write(t.path("plain.csv"), "layer,mse\n1,2e-3\n2,4e-3\n").unwrap();
    fs::write(t.path("sym.csv"), "layer,mse\n1,1e-3\n2,1.5e-3\n").unwrap();
    let (left, right) = (format!("nonsym={}", t.arg("plain.csv")), format!("sym={}", t.arg("sym.csv")));

    ok(&["report", &left, &right, "--out", &t.arg("rep")]);
    let cmp = t.read("rep/comparison.csv");
    let rows = lines(&cmp);
    assert_eq!(rows[0], "layer,nonsym,sym");
    assert_eq!(rows.len(), 3, "{}", cmp);
    assert!(rows[1].starts_with("1,2e-3,") || rows[1].starts_with("1,2e"), "{}", cmp);

    // Unlabeled inputs fall back to file stems.
    ok(&["report", &t.arg("plain.csv"), &t.arg("sym.csv"), "--out", &t.arg("rep2")]);
    assert_eq!(lines(&t.read("rep2/comparison.csv"))[0], "layer,plain,sym");

    fs::write(t.path("short.csv"), "layer,mse\n1,1e-3\n").unwrap();
    let err = fails(&["report", &left, &format!("sym={}", t.arg("short.csv")), "--out", &t.arg("rep3")]);
    assert!(err.contains("nonsym") && err.contains("sym"), "error must name both runs: {}", err);

    fs::write(t.path("junk.csv"), "time,loss\n0,1\n").unwrap();
    let err = fails(&["report", &t.arg("junk.csv"), &right, "--out", &t.arg("rep4")]);
    assert!(err.contains("layer,mse"), "{}", err);
}

#[test]
fn datasets_are_deterministic_for_a_fixed_seed() {
    let t = Scratch::new("det");
    let cfg = t.write_config("exp.cfg", IMAGE_CFG);
    ok(&["gen-data", "--config", &cfg, "--out", &t.arg("a")]);
    ok(&["gen-data", "--config", &cfg, "--out", &t.arg("b")]);
    let a = fs::read(t.path("a/images.sqnt")).unwrap();
    let b = fs::read(t.path("b/images.sqnt")).unwrap();
    assert_eq!(a, b, "same seed must produce identical bytes");
}

#[test]
fn seed_environment_override_is_honored() {
    let t = Scratch::new("env");
    let cfg = t.write_config("exp.cfg", IMAGE_CFG);
    let out = sqnet(&["gen-data", "--config", &cfg, "--out", &t.arg("d")], &[("SQNET_SEED", "123")]);
    assert!(out.status.success());
    let manifest = t.read("d/manifest.txt");
    assert!(manifest.contains("seed = 123"), "{}", manifest);
    assert!(manifest.contains("data_seed = 7"), "dataset seed is a config key, not the override: {}", manifest);

    let out = sqnet(&["gen-data", "--config", &cfg, "--out", &t.arg("e")], &[("SQNET_SEED", "nope")]);
    assert!(!out.status.success());
}

#[test]
fn bad_invocations_exit_nonzero_with_usage_or_cause() {
    let t = Scratch::new("bad");
    let cfg = t.write_config("exp.cfg", IMAGE_CFG);

    let err = fails(&["frobnicate"]);
    assert!(err.contains("Usage"), "{}", err);
    let err = fails(&["train", "--config", &cfg, "--data", "x", "--out", "y", "--frob"]);
    assert!(err.contains("Usage"), "{}", err);

    let err = fails(&["gen-data", "--config", &cfg, "--set", "dpeth=3", "--out", &t.arg("o1")]);
    assert!(err.contains("dpeth"), "{}", err);
    let err = fails(&["gen-data", "--config", &cfg, "--set", "task=graph", "--out", &t.arg("o2")]);
    assert!(err.contains("does not fit"), "task/arch mismatch should be caught before compute: {}", err);
    let err = fails(&["gen-data", "--config", &t.arg("missing.cfg"), "--out", &t.arg("o3")]);
    assert!(err.contains("missing.cfg"), "{}", err);
}

#[test]
fn overrides_reach_the_artifacts() {
    let t = Scratch::new("set");
    let cfg = t.write_config("exp.cfg", IMAGE_CFG);
    ok(&["gen-data", "--config", &cfg, "--set", "data_size=30", "--out", &t.arg("d")]);
    ok(&[
        "train", "--config", &cfg, "--set", "data_size=30", "--set", "epochs=1",
        "--data", &t.arg("d"), "--out", &t.arg("r"),
    ]);
    assert_eq!(lines(&t.read("r/metrics.csv")).len(), 2);
    assert!(t.read("r/config.txt").contains("data_size = 30"));
    // Same keys, different values: the manifests must disagree.
    let base = t.read("d/manifest.txt");
    ok(&["gen-data", "--config", &cfg, "--out", &t.arg("d2")]);
    let other = t.read("d2/manifest.txt");
    let hash = |m: &str| m.lines().find(|l| l.starts_with("config_hash")).unwrap().to_string();
    assert_ne!(hash(&base), hash(&other));
}
