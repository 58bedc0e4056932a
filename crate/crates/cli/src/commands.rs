//! One function per subcommand, plus the run-directory plumbing they
//! share. Each command loads its config (file, `--set` overrides, then the
//! `SQNET_SEED` environment override), does its work, and finishes by
//! writing `config.txt` and `manifest.txt` into the output directory.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sqnet_core::checkpoint::{
    atomic_write, load_graph_network, load_network, save_graph_network, save_network, FORMAT_VERSION,
};
use sqnet_core::config::{parse_assignment, ExperimentConfig, Task};
use sqnet_core::data::{
    generate_images, generate_sbm, load_graph_dataset, load_image_dataset, save_graph_dataset, save_image_dataset,
    GraphDataset, ImageDataset, IMAGE_SIDE,
};
use sqnet_core::graph::{build_graph_network, GraphOperator};
use sqnet_core::intinfer::{
    compare_graph, compare_image, export_graph, export_image, load_int_graph_model, load_int_image_model,
    save_int_graph_model, save_int_image_model, GridCheck,
};
use sqnet_core::layers::{build_network, fnv1a64, QuantMode};
use sqnet_core::stability::{
    check_step_bound, check_step_bound_graph, comparison_csv, divergence, paired_trace, paired_trace_graph,
    perturbation_growth, DivergenceReport, StepBoundRow,
};
use sqnet_core::tensor::Tensor;
use sqnet_core::train::{argmax_rows, evaluate_graph, evaluate_image, holdout_split, metrics_csv, train_graph, train_image};

use crate::ConfigArgs;

const IMAGES_FILE: &str = "images.sqnt";
const GRAPH_FILE: &str = "graph.sqnt";
const EDGES_FILE: &str = "graph.edges";

/// ReLU slope bound used in the step-size criterion `h < 2/(L |K|^2)`.
const LIPSCHITZ: f64 = 1.0;

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let mut overrides = Vec::with_capacity(args.set.len());
    for s in &args.set {
        overrides.push(parse_assignment(s)?);
    }
    let mut cfg = ExperimentConfig::parse_with_overrides(&text, &overrides)?;
    if let Ok(s) = env::var("SQNET_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| anyhow!("SQNET_SEED must be a non-negative integer, got {:?}", s))?;
    }
    Ok(cfg)
}

/// A run directory: every artifact is written via temp-file-plus-rename,
/// and `finish` records what produced the contents.
struct Outputs {
    dir: PathBuf,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Outputs { dir: dir.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        atomic_write(&self.path(name), text.as_bytes())?;
        Ok(())
    }

    fn finish(&self, command: &str, cfg: &ExperimentConfig) -> Result<()> {
        self.write("config.txt", &cfg.canonical())?;
        let fields = [
            ("config_hash", format!("{:016x}", cfg.hash())),
            ("seed", cfg.seed.to_string()),
            ("data_seed", cfg.data_seed.to_string()),
        ];
        self.write("manifest.txt", &manifest_text(command, &fields))
    }
}

fn manifest_text(command: &str, fields: &[(&str, String)]) -> String {
    let mut out = format!(
        "command = {}\nsqnet_version = {}\ncontainer_format = {}\n",
        command,
        env!("CARGO_PKG_VERSION"),
        FORMAT_VERSION
    );
    for (key, value) in fields {
        out.push_str(&format!("{} = {}\n", key, value));
    }
    out
}

fn load_image_data(cfg: &ExperimentConfig, data: &Path) -> Result<ImageDataset<f64>> {
    let path = data.join(IMAGES_FILE);
    let ds = load_image_dataset::<f64>(&path).with_context(|| format!("loading {}", path.display()))?;
    if ds.channels() != cfg.data_channels || ds.classes != cfg.data_classes {
        bail!(
            "dataset {} has {} channels / {} classes, config expects {} / {}",
            path.display(),
            ds.channels(),
            ds.classes,
            cfg.data_channels,
            cfg.data_classes
        );
    }
    Ok(ds)
}

fn load_graph_data(cfg: &ExperimentConfig, data: &Path) -> Result<GraphDataset<f64>> {
    let (path, edges) = (data.join(GRAPH_FILE), data.join(EDGES_FILE));
    let ds = load_graph_dataset::<f64>(&path, &edges).with_context(|| format!("loading {}", path.display()))?;
    if ds.graph.feature_width() != cfg.data_features || ds.classes != cfg.data_classes {
        bail!(
            "dataset {} has {} features / {} classes, config expects {} / {}",
            path.display(),
            ds.graph.feature_width(),
            ds.classes,
            cfg.data_features,
            cfg.data_classes
        );
    }
    Ok(ds)
}

pub(crate) fn gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = Outputs::new(out)?;
    match cfg.task {
        Task::Image => {
            let ds = generate_images::<f64>(cfg.data_size, cfg.data_channels, cfg.data_classes, cfg.data_noise, cfg.data_seed)?;
            save_image_dataset(&ds, &dir.path(IMAGES_FILE))?;
        }
        Task::Graph => {
            let ds = generate_sbm::<f64>(&cfg.sbm_params(), cfg.data_seed)?;
            save_graph_dataset(&ds, &dir.path(GRAPH_FILE), &dir.path(EDGES_FILE))?;
        }
    }
    dir.finish("gen-data", &cfg)
}

pub(crate) fn train(args: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = Outputs::new(out)?;
    let rows = match cfg.task {
        Task::Image => {
            let ds = load_image_data(&cfg, data)?;
            let mut net = build_network::<f64>(&cfg.image_specs()?, cfg.seed)?;
            let rows = train_image(&mut net, &ds, &cfg.train_config())?;
            net.freeze_quantized_weights()?;
            save_network(&net, &dir.path("model.sqnt"))?;
            rows
        }
        Task::Graph => {
            let ds = load_graph_data(&cfg, data)?;
            let mut net = build_graph_network::<f64>(&cfg.graph_spec()?, &ds.graph, cfg.seed)?;
            let rows = train_graph(&mut net, &ds, &cfg.train_config())?;
            net.freeze_quantized_weights()?;
            save_graph_network(&net, &dir.path("model.sqnt"))?;
            rows
        }
    };
    dir.write("metrics.csv", &metrics_csv(&rows))?;
    dir.finish("train", &cfg)
}

pub(crate) fn eval(args: &ConfigArgs, data: &Path, model: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = Outputs::new(out)?;
    let mut csv = String::from("split,samples,accuracy\n");
    match cfg.task {
        Task::Image => {
            let ds = load_image_data(&cfg, data)?;
            let mut net = build_network::<f64>(&cfg.image_specs()?, cfg.seed)?;
            load_network(&mut net, model)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (train_idx, val_idx) = holdout_split(ds.len(), &mut rng);
            for (split, idx) in [("train", &train_idx), ("val", &val_idx)] {
                if idx.is_empty() {
                    continue;
                }
                let acc = evaluate_image(&mut net, &ds, idx, cfg.batch_size, QuantMode::FULL)?;
                csv.push_str(&format!("{},{},{}\n", split, idx.len(), acc));
            }
        }
        Task::Graph => {
            let ds = load_graph_data(&cfg, data)?;
            let mut net = build_graph_network::<f64>(&cfg.graph_spec()?, &ds.graph, cfg.seed)?;
            load_graph_network(&mut net, model)?;
            for (split, mask) in [("train", &ds.train_mask), ("val", &ds.val_mask)] {
                let n = mask.iter().filter(|&&m| m).count();
                if n == 0 {
                    continue;
                }
                let acc = evaluate_graph(&mut net, &ds, mask, QuantMode::FULL)?;
                csv.push_str(&format!("{},{},{}\n", split, n, acc));
            }
        }
    }
    dir.write("eval.csv", &csv)?;
    dir.finish("eval", &cfg)
}

pub(crate) fn analyze(args: &ConfigArgs, data: &Path, model: &Path, out: &Path, trace_limit: usize) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = Outputs::new(out)?;
    let report = match cfg.task {
        Task::Image => {
            let ds = load_image_data(&cfg, data)?;
            let mut net = build_network::<f64>(&cfg.image_specs()?, cfg.seed)?;
            load_network(&mut net, model)?;
            // Trace the same held-out samples the training loop never saw.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (train_idx, val_idx) = holdout_split(ds.len(), &mut rng);
            let mut idx = if val_idx.is_empty() { train_idx } else { val_idx };
            idx.truncate(trace_limit.max(1));
            let (inputs, _) = ds.batch(&idx);
            let (quantized, full) = paired_trace(&mut net, &inputs, cfg.bits_a)?;
            divergence(&quantized, &full, cfg.bits_a, cfg.seed, cfg.arch.name())?
        }
        Task::Graph => {
            let ds = load_graph_data(&cfg, data)?;
            let mut net = build_graph_network::<f64>(&cfg.graph_spec()?, &ds.graph, cfg.seed)?;
            load_graph_network(&mut net, model)?;
            let features = ds.graph.features.clone();
            let (quantized, full) = paired_trace_graph(&mut net, &features, cfg.bits_a)?;
            divergence(&quantized, &full, cfg.bits_a, cfg.seed, cfg.arch.name())?
        }
    };
    dir.write("divergence.csv", &report.to_csv())?;
    dir.finish("analyze", &cfg)
}

fn step_bound_csv(rows: &[StepBoundRow]) -> String {
    let mut out = String::from("index,kind,h,norm,bound,ok,certified\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{},{}\n", r.index, r.kind, r.h, r.norm, r.bound, r.ok, r.certified));
    }
    out
}

pub(crate) fn stability(args: &ConfigArgs, data: &Path, model: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = Outputs::new(out)?;
    match cfg.task {
        Task::Image => {
            let ds = load_image_data(&cfg, data)?;
            let mut net = build_network::<f64>(&cfg.image_specs()?, cfg.seed)?;
            load_network(&mut net, model)?;
            let rows = check_step_bound(&net, (IMAGE_SIDE, IMAGE_SIDE), LIPSCHITZ, cfg.seed)?;
            dir.write("step_bound.csv", &step_bound_csv(&rows))?;
            let (input, _) = ds.batch(&[0]);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let eta0 = Tensor::<f64>::randn(input.shape(), 1e-3, &mut rng);
            let norms = perturbation_growth(&mut net, &input, &eta0)?;
            let mut csv = String::from("stage,norm\n");
            for (i, n) in norms.iter().enumerate() {
                csv.push_str(&format!("{},{:e}\n", i, n));
            }
            dir.write("perturbation.csv", &csv)?;
        }
        Task::Graph => {
            let ds = load_graph_data(&cfg, data)?;
            let mut net = build_graph_network::<f64>(&cfg.graph_spec()?, &ds.graph, cfg.seed)?;
            load_graph_network(&mut net, model)?;
            let rows = check_step_bound_graph(&net, LIPSCHITZ, cfg.seed)?;
            dir.write("step_bound.csv", &step_bound_csv(&rows))?;
        }
    }
    dir.finish("stability", &cfg)
}

pub(crate) fn export_int(args: &ConfigArgs, model: &Path, out: &Path, bits: Option<u32>) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = Outputs::new(out)?;
    match cfg.task {
        Task::Image => {
            let mut net = build_network::<f64>(&cfg.image_specs()?, cfg.seed)?;
            load_network(&mut net, model)?;
            if let Some(b) = bits {
                net.set_bits(b, b)?;
            }
            let int_model = export_image(&net)?;
            save_int_image_model(&int_model, &dir.path("int_model.sqnt"))?;
        }
        Task::Graph => {
            let mut net = build_graph_network_for(&cfg, model)?;
            if let Some(b) = bits {
                net.set_bits(b, b)?;
            }
            let int_model = export_graph(&net)?;
            save_int_graph_model(&int_model, &dir.path("int_model.sqnt"))?;
        }
    }
    dir.finish("export-int", &cfg)
}

/// Builds a graph network matching the checkpoint without needing the
/// dataset: the export path never applies the graph operator, so a
/// two-node placeholder graph with the right feature width suffices.
fn build_graph_network_for(cfg: &ExperimentConfig, model: &Path) -> Result<sqnet_core::graph::GraphNetwork<f64>> {
    let features = Tensor::<f64>::zeros(&[2, cfg.data_features]);
    let graph = sqnet_core::graph::Graph::new(2, vec![(0, 1)], features)?;
    let mut net = build_graph_network::<f64>(&cfg.graph_spec()?, &graph, cfg.seed)?;
    load_graph_network(&mut net, model)?;
    Ok(net)
}

fn logits_csv(id: &str, logits: &Tensor<f64>, limit: usize) -> String {
    let k = *logits.shape().last().expect("logits are [n, classes]");
    let preds = argmax_rows(logits);
    let mut out = String::from(id);
    out.push_str(",pred");
    for j in 0..k {
        out.push_str(&format!(",logit{}", j));
    }
    out.push('\n');
    for (i, row) in logits.data().chunks(k).take(limit).enumerate() {
        out.push_str(&format!("{},{}", i, preds[i]));
        for v in row {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    out
}

fn grid_check_csv(check: &GridCheck) -> String {
    format!(
        "sites,compared,mismatches,max_logit_gap\n{},{},{},{:e}\n",
        check.sites, check.compared, check.mismatches, check.max_logit_gap
    )
}

pub(crate) fn infer_int(
    args: &ConfigArgs,
    data: &Path,
    model: &Path,
    out: &Path,
    limit: Option<usize>,
    check: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = Outputs::new(out)?;
    match cfg.task {
        Task::Image => {
            let specs = cfg.image_specs()?;
            let int_model = load_int_image_model(&specs, model)?;
            let ds = load_image_data(&cfg, data)?;
            let n = limit.unwrap_or(usize::MAX).min(ds.len()).max(1);
            let idx: Vec<usize> = (0..n).collect();
            let (inputs, _) = ds.batch(&idx);
            let run = int_model.forward_image(&inputs)?;
            dir.write("logits.csv", &logits_csv("sample", &run.logits, n))?;
            if let Some(float_model) = check {
                let mut net = build_network::<f64>(&specs, cfg.seed)?;
                load_network(&mut net, float_model)?;
                let result = compare_image(&int_model, &mut net, &inputs)?;
                dir.write("grid_check.csv", &grid_check_csv(&result))?;
            }
        }
        Task::Graph => {
            let spec = cfg.graph_spec()?;
            let int_model = load_int_graph_model(&spec, model)?;
            let ds = load_graph_data(&cfg, data)?;
            let op = GraphOperator::new(&ds.graph, 1.0);
            let run = int_model.forward_graph(&op, &ds.graph.features)?;
            let n = limit.unwrap_or(usize::MAX).min(ds.graph.n).max(1);
            dir.write("logits.csv", &logits_csv("node", &run.logits, n))?;
            if let Some(float_model) = check {
                let mut net = build_graph_network::<f64>(&spec, &ds.graph, cfg.seed)?;
                load_graph_network(&mut net, float_model)?;
                let result = compare_graph(&int_model, &mut net, &ds.graph.features)?;
                dir.write("grid_check.csv", &grid_check_csv(&result))?;
            }
        }
    }
    dir.finish("infer-int", &cfg)
}

fn split_labeled(arg: &str) -> (String, PathBuf) {
    if let Some((label, path)) = arg.split_once('=') {
        if !label.is_empty() && !path.is_empty() {
            return (label.to_string(), PathBuf::from(path));
        }
    }
    let path = PathBuf::from(arg);
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    (label, path)
}

fn parse_divergence(text: &str, label: &str, path: &Path) -> Result<DivergenceReport> {
    let mut lines = text.lines();
    match lines.next() {
        Some("layer,mse") => {}
        other => bail!("{}: expected a `layer,mse` divergence table, got header {:?}", path.display(), other.unwrap_or("")),
    }
    let mut per_block = Vec::new();
    for (i, line) in lines.enumerate() {
        let mse = line
            .split(',')
            .nth(1)
            .and_then(|f| f.parse::<f64>().ok())
            .ok_or_else(|| anyhow!("{}: row {} is not `layer,mse`: {:?}", path.display(), i + 2, line))?;
        per_block.push(mse);
    }
    Ok(DivergenceReport { per_block, kinds: Vec::new(), bits: 0, seed: 0, arch: label.to_string() })
}

pub(crate) fn report(left: &str, right: &str, out: &Path) -> Result<()> {
    let (left_label, left_path) = split_labeled(left);
    let (right_label, right_path) = split_labeled(right);
    let left_text = fs::read_to_string(&left_path).with_context(|| format!("reading {}", left_path.display()))?;
    let right_text = fs::read_to_string(&right_path).with_context(|| format!("reading {}", right_path.display()))?;
    let left_report = parse_divergence(&left_text, &left_label, &left_path)?;
    let right_report = parse_divergence(&right_text, &right_label, &right_path)?;
    let csv = comparison_csv(&left_report, &right_report)?;
    let dir = Outputs::new(out)?;
    dir.write("comparison.csv", &csv)?;
    // No config here; the run's identity is the pair of input tables.
    let fields = [
        ("config_hash", format!("{:016x}", fnv1a64(&format!("{}\n{}", left_text, right_text)))),
        ("left", left_path.display().to_string()),
        ("right", right_path.display().to_string()),
    ];
    dir.write("manifest.txt", &manifest_text("report", &fields))
}
