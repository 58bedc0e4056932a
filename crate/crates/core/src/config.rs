//! Experiment configuration: a flat `key = value` text format.
//!
//! One experiment is one file. Lines hold a single `key = value` pair; `#`
//! starts a comment; blank lines are ignored. Every key has a default, the
//! full key set is fixed, and unknown keys are rejected — a typo fails the
//! run instead of silently training the wrong model. Values are validated
//! before any compute.
//!
//! The same pairs can arrive from the command line (`--set key=value`);
//! overrides are appended after the file's pairs, so the last assignment of
//! a key wins and validation always sees the final values.
//!
//! [`ExperimentConfig::canonical`] renders every field in a fixed order;
//! its fnv1a64 hash identifies the configuration in run manifests, so two
//! runs with the same hash trained the same experiment.

use crate::data::SbmParams;
use crate::error::{Error, Result};
use crate::graph::{GcnKind, GcnSpec};
use crate::layers::{fnv1a64, BlockKind, BlockSpec, QuantSpec, ResKind};
use crate::train::{BitSchedule, TrainConfig};

/// Bit width meaning "quantization off" for `bits_w` / `bits_a`.
pub const BITS_OFF: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Image,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    PlainRes,
    SymRes,
    PlainMobile,
    SymMobile,
    GcnSym,
    GcnNonsym,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::PlainRes => "plain_res",
            Arch::SymRes => "sym_res",
            Arch::PlainMobile => "plain_mobile",
            Arch::SymMobile => "sym_mobile",
            Arch::GcnSym => "gcn_sym",
            Arch::GcnNonsym => "gcn_nonsym",
        }
    }

    fn is_graph(self) -> bool {
        matches!(self, Arch::GcnSym | Arch::GcnNonsym)
    }
}

/// Everything a run needs: task and architecture, quantization widths, the
/// training schedule, and the synthetic dataset recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub arch: Arch,
    /// Residual-type blocks in the image trunk (the middle one widens the
    /// channels), or diffusion layers in a graph network.
    pub depth: usize,
    /// Trunk width after the opening (image) or hidden width (graph); image
    /// trunks double it at the widening block.
    pub base_channels: usize,
    pub h: f64,
    /// 2..=30, or [`BITS_OFF`] together with `bits_a` for full precision.
    pub bits_w: u32,
    pub bits_a: u32,
    pub tv_enabled: bool,
    pub tv_gamma_init: f64,
    pub loss: String,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Gradual bit reduction: start width, bits dropped per period, period
    /// in epochs. `bit_period = 0` trains at the fixed `bits_w`/`bits_a`.
    pub bit_start: u32,
    pub bit_decrement: u32,
    pub bit_period: usize,
    pub tv_lambda: f64,
    /// Samples (image) or nodes (graph).
    pub data_size: usize,
    /// Classes (image) or SBM blocks, which double as classes (graph).
    pub data_classes: usize,
    pub data_noise: f64,
    pub data_seed: u64,
    pub data_channels: usize,
    pub data_features: usize,
    pub data_p_intra: f64,
    pub data_p_inter: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Image,
            arch: Arch::SymRes,
            depth: 2,
            base_channels: 8,
            h: 0.5,
            bits_w: BITS_OFF,
            bits_a: BITS_OFF,
            tv_enabled: false,
            tv_gamma_init: 0.1,
            loss: "cross_entropy".to_string(),
            epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            bit_start: 16,
            bit_decrement: 1,
            bit_period: 0,
            tv_lambda: 0.0,
            data_size: 256,
            data_classes: 2,
            data_noise: 0.1,
            data_seed: 7,
            data_channels: 1,
            data_features: 8,
            data_p_intra: 0.1,
            data_p_inter: 0.01,
        }
    }
}

/// Splits one `key = value` (or `key=value`) assignment; used both for file
/// lines and for `--set` arguments.
pub fn parse_assignment(text: &str) -> Result<(String, String)> {
    let Some((key, value)) = text.split_once('=') else {
        return Err(Error::arg("config", format!("expected key=value, got {:?}", text)));
    };
    let (key, value) = (key.trim(), value.trim());
    if key.is_empty() || value.is_empty() {
        return Err(Error::arg("config", format!("expected key=value, got {:?}", text)));
    }
    Ok((key.to_string(), value.to_string()))
}

fn pairs_from_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let pair = parse_assignment(line)
            .map_err(|_| Error::arg("config", format!("line {}: expected key = value, got {:?}", lineno + 1, raw.trim())))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value.parse().map_err(|_| Error::arg("config", format!("{} must be {}, got {:?}", key, what, value)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::arg("config", format!("{} must be true or false, got {:?}", key, value))),
    }
}

impl ExperimentConfig {
    /// Parses a config file's text; every omitted key keeps its default.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses text, then applies `--set`-style overrides on top.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = pairs_from_text(text)?;
        pairs.extend_from_slice(overrides);
        let mut cfg = ExperimentConfig::default();
        for (key, value) in &pairs {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => {
                self.task = match value {
                    "image" => Task::Image,
                    "graph" => Task::Graph,
                    _ => return Err(Error::arg("config", format!("task must be image or graph, got {:?}", value))),
                }
            }
            "arch" => {
                self.arch = match value {
                    "plain_res" => Arch::PlainRes,
                    "sym_res" => Arch::SymRes,
                    "plain_mobile" => Arch::PlainMobile,
                    "sym_mobile" => Arch::SymMobile,
                    "gcn_sym" => Arch::GcnSym,
                    "gcn_nonsym" => Arch::GcnNonsym,
                    _ => {
                        return Err(Error::arg(
                            "config",
                            format!(
                                "arch must be one of plain_res, sym_res, plain_mobile, sym_mobile, gcn_sym, gcn_nonsym; got {:?}",
                                value
                            ),
                        ))
                    }
                }
            }
            "depth" => self.depth = parse_as(key, value, "a positive integer")?,
            "base_channels" => self.base_channels = parse_as(key, value, "a positive integer")?,
            "h" => self.h = parse_as(key, value, "a number")?,
            "bits_w" => self.bits_w = parse_as(key, value, "an integer bit width")?,
            "bits_a" => self.bits_a = parse_as(key, value, "an integer bit width")?,
            "tv_enabled" => self.tv_enabled = parse_bool(key, value)?,
            "tv_gamma_init" => self.tv_gamma_init = parse_as(key, value, "a number")?,
            "loss" => self.loss = value.to_string(),
            "epochs" => self.epochs = parse_as(key, value, "a non-negative integer")?,
            "lr" => self.lr = parse_as(key, value, "a number")?,
            "momentum" => self.momentum = parse_as(key, value, "a number")?,
            "batch_size" => self.batch_size = parse_as(key, value, "a positive integer")?,
            "seed" => self.seed = parse_as(key, value, "a non-negative integer")?,
            "bit_start" => self.bit_start = parse_as(key, value, "an integer bit width")?,
            "bit_decrement" => self.bit_decrement = parse_as(key, value, "a positive integer")?,
            "bit_period" => self.bit_period = parse_as(key, value, "a non-negative integer")?,
            "tv_lambda" => self.tv_lambda = parse_as(key, value, "a number")?,
            "data_size" => self.data_size = parse_as(key, value, "a positive integer")?,
            "data_classes" => self.data_classes = parse_as(key, value, "a positive integer")?,
            "data_noise" => self.data_noise = parse_as(key, value, "a number")?,
            "data_seed" => self.data_seed = parse_as(key, value, "a non-negative integer")?,
            "data_channels" => self.data_channels = parse_as(key, value, "a positive integer")?,
            "data_features" => self.data_features = parse_as(key, value, "a positive integer")?,
            "data_p_intra" => self.data_p_intra = parse_as(key, value, "a probability")?,
            "data_p_inter" => self.data_p_inter = parse_as(key, value, "a probability")?,
            _ => return Err(Error::arg("config", format!("unknown key {:?}", key))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::arg("config", detail));
        if self.arch.is_graph() != (self.task == Task::Graph) {
            return bad(format!("arch {} does not fit task {}", self.arch.name(), if self.task == Task::Image { "image" } else { "graph" }));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels must be at least 1".into());
        }
        if !self.h.is_finite() || self.h <= 0.0 {
            return bad(format!("h must be positive, got {}", self.h));
        }
        let quantized = self.quantized();
        if (self.bits_w >= BITS_OFF) != (self.bits_a >= BITS_OFF) {
            return bad(format!("bits_w {} and bits_a {} must be quantized together or both {}", self.bits_w, self.bits_a, BITS_OFF));
        }
        if quantized {
            quant_width("bits_w", self.bits_w)?;
            quant_width("bits_a", self.bits_a)?;
        }
        if self.loss != "cross_entropy" {
            return bad(format!("loss must be cross_entropy, got {:?}", self.loss));
        }
        if self.bit_period > 0 {
            if !quantized {
                return bad("bit_period needs quantization; set bits_w and bits_a".into());
            }
            if self.bits_w != self.bits_a {
                return bad(format!(
                    "the bit schedule lowers weight and activation widths together; bits_w {} and bits_a {} must match when bit_period > 0",
                    self.bits_w, self.bits_a
                ));
            }
            if self.bit_decrement == 0 {
                return bad("bit_decrement must be at least 1".into());
            }
            if self.bit_start < self.bits_w {
                return bad(format!("bit_start {} is below the target width {}", self.bit_start, self.bits_w));
            }
            quant_width("bit_start", self.bit_start)?;
        }
        if self.task == Task::Graph && (self.tv_enabled || self.tv_lambda > 0.0) {
            return bad("smoothing applies to image feature maps only; disable tv_enabled and tv_lambda for graph runs".into());
        }
        if self.tv_enabled && (!self.tv_gamma_init.is_finite() || self.tv_gamma_init <= 0.0) {
            return bad(format!("tv_gamma_init must be positive, got {}", self.tv_gamma_init));
        }
        self.train_config().validate()?;
        match self.task {
            Task::Image => {
                if self.data_size == 0 {
                    return bad("data_size must be at least 1".into());
                }
                if !(1..=3).contains(&self.data_channels) {
                    return bad(format!("data_channels must be 1..=3, got {}", self.data_channels));
                }
                if !(2..=4).contains(&self.data_classes) {
                    return bad(format!("data_classes must be 2..=4, got {}", self.data_classes));
                }
                if !self.data_noise.is_finite() || self.data_noise < 0.0 {
                    return bad(format!("data_noise must be finite and >= 0, got {}", self.data_noise));
                }
                self.image_specs()?;
            }
            Task::Graph => {
                self.sbm_params().validate()?;
                self.graph_spec()?;
            }
        }
        Ok(())
    }

    pub fn quantized(&self) -> bool {
        self.bits_w < BITS_OFF
    }

    /// The training loop's view of this config. The schedule drives weight
    /// and activation widths together, so mixed widths (`bits_w != bits_a`)
    /// train at the fixed spec widths with no schedule; the metrics CSV
    /// then reports the schedule-less label.
    pub fn train_config(&self) -> TrainConfig {
        let schedule = if !self.quantized() {
            None
        } else if self.bit_period > 0 {
            Some(BitSchedule { start: self.bit_start, decrement: self.bit_decrement, period: self.bit_period, target: self.bits_w })
        } else if self.bits_w == self.bits_a {
            Some(BitSchedule::constant(self.bits_w))
        } else {
            None
        };
        TrainConfig {
            epochs: self.epochs,
            lr0: self.lr,
            momentum: self.momentum,
            batch: self.batch_size,
            seed: self.seed,
            schedule,
            tv_lambda: self.tv_lambda,
        }
    }

    /// Image trunk layout: `depth` residual-type blocks, the middle one the
    /// channel-widening step (preceded by 2x2 pooling), flanked by the
    /// opening stem and the classifier head. `depth = 1` is a single block
    /// with no widening.
    pub fn image_specs(&self) -> Result<Vec<BlockSpec>> {
        if self.task != Task::Image {
            return Err(Error::arg("config", "image_specs on a graph config"));
        }
        let (res_kind, cc_kind) = match self.arch {
            Arch::PlainRes => (BlockKind::PlainRes, ResKind::Plain),
            Arch::SymRes => (BlockKind::SymRes, ResKind::Symmetric),
            Arch::PlainMobile => (BlockKind::PlainMobile, ResKind::Plain),
            Arch::SymMobile => (BlockKind::SymMobile, ResKind::Symmetric),
            _ => return Err(Error::arg("config", "image_specs on a graph arch")),
        };
        let c = self.base_channels;
        let widen_at = if self.depth >= 2 { Some(self.depth / 2) } else { None };
        let trunk_block = |kind: BlockKind, c_in: usize, c_out: usize| {
            let mut b = BlockSpec::new(kind, c_in, c_out).with_h(self.h);
            if self.quantized() {
                b = b.with_quant(self.bits_w, self.bits_a);
            }
            if self.tv_enabled {
                b = b.with_tv(self.tv_gamma_init);
            }
            b
        };
        let mut specs = vec![BlockSpec::new(BlockKind::Opening, self.data_channels, c)];
        let mut width = c;
        for i in 0..self.depth {
            if widen_at == Some(i) {
                specs.push(BlockSpec::new(BlockKind::AvgPool, width, width));
                specs.push(trunk_block(BlockKind::ChannelChange(cc_kind), width, 2 * c));
                width = 2 * c;
            } else {
                specs.push(trunk_block(res_kind, width, width));
            }
        }
        specs.push(BlockSpec::new(BlockKind::Classifier, width, self.data_classes));
        Ok(specs)
    }

    pub fn graph_spec(&self) -> Result<GcnSpec> {
        let kind = match self.arch {
            Arch::GcnSym => GcnKind::Sym,
            Arch::GcnNonsym => GcnKind::Nonsym,
            _ => return Err(Error::arg("config", "graph_spec on an image arch")),
        };
        Ok(GcnSpec {
            kind,
            layers: self.depth,
            features_in: self.data_features,
            width: self.base_channels,
            classes: self.data_classes,
            h: self.h,
            quant: if self.quantized() { Some(QuantSpec { bits_w: self.bits_w, bits_a: self.bits_a }) } else { None },
        })
    }

    pub fn sbm_params(&self) -> SbmParams {
        SbmParams {
            nodes: self.data_size,
            blocks: self.data_classes,
            p_intra: self.data_p_intra,
            p_inter: self.data_p_inter,
            features: self.data_features,
            noise: self.data_noise,
            ..SbmParams::default()
        }
    }

    /// Every field in a fixed order; parsing this text reproduces the
    /// config exactly.
    pub fn canonical(&self) -> String {
        let task = match self.task {
            Task::Image => "image",
            Task::Graph => "graph",
        };
        format!(
            "task = {task}\n\
             arch = {arch}\n\
             depth = {depth}\n\
             base_channels = {base_channels}\n\
             h = {h}\n\
             bits_w = {bits_w}\n\
             bits_a = {bits_a}\n\
             tv_enabled = {tv_enabled}\n\
             tv_gamma_init = {tv_gamma_init}\n\
             loss = {loss}\n\
             epochs = {epochs}\n\
             lr = {lr}\n\
             momentum = {momentum}\n\
             batch_size = {batch_size}\n\
             seed = {seed}\n\
             bit_start = {bit_start}\n\
             bit_decrement = {bit_decrement}\n\
             bit_period = {bit_period}\n\
             tv_lambda = {tv_lambda}\n\
             data_size = {data_size}\n\
             data_classes = {data_classes}\n\
             data_noise = {data_noise}\n\
             data_seed = {data_seed}\n\
             data_channels = {data_channels}\n\
             data_features = {data_features}\n\
             data_p_intra = {data_p_intra}\n\
             data_p_inter = {data_p_inter}\n",
            task = task,
            arch = self.arch.name(),
            depth = self.depth,
            base_channels = self.base_channels,
            h = self.h,
            bits_w = self.bits_w,
            bits_a = self.bits_a,
            tv_enabled = self.tv_enabled,
            tv_gamma_init = self.tv_gamma_init,
            loss = self.loss,
            epochs = self.epochs,
            lr = self.lr,
            momentum = self.momentum,
            batch_size = self.batch_size,
            seed = self.seed,
            bit_start = self.bit_start,
            bit_decrement = self.bit_decrement,
            bit_period = self.bit_period,
            tv_lambda = self.tv_lambda,
            data_size = self.data_size,
            data_classes = self.data_classes,
            data_noise = self.data_noise,
            data_seed = self.data_seed,
            data_channels = self.data_channels,
            data_features = self.data_features,
            data_p_intra = self.data_p_intra,
            data_p_inter = self.data_p_inter,
        )
    }

    /// Identity of the experiment for run manifests.
    pub fn hash(&self) -> u64 {
        fnv1a64(&self.canonical())
    }
}

fn quant_width(key: &str, bits: u32) -> Result<()> {
    if !(2..=30).contains(&bits) {
        return Err(Error::arg("config", format!("{} must lie in 2..=30 (or {} for full precision), got {}", key, BITS_OFF, bits)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_the_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "task = graph\narch = gcn_sym\ndepth = 8\nbase_channels = 16\nbits_w = 4\nbits_a = 8\ndata_size = 200\ndata_classes = 3\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn comments_and_spacing_are_tolerated() {
        let text = "# an experiment\n  depth=3   # inline note\n\n bits_w = 4 \nbits_a=4\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.depth, 3);
        assert_eq!((cfg.bits_w, cfg.bits_a), (4, 4));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected_by_name() {
        let err = ExperimentConfig::parse("dpeth = 3\n").unwrap_err();
        assert!(err.to_string().contains("dpeth"), "{}", err);
        let err = ExperimentConfig::parse("depth = three\n").unwrap_err();
        assert!(err.to_string().contains("depth"), "{}", err);
        let err = ExperimentConfig::parse("depth\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{}", err);
    }

    #[test]
    fn overrides_win_over_file_values() {
        let overrides = vec![parse_assignment("depth=5").unwrap(), parse_assignment("seed = 9").unwrap()];
        let cfg = ExperimentConfig::parse_with_overrides("depth = 3\n", &overrides).unwrap();
        assert_eq!(cfg.depth, 5);
        assert_eq!(cfg.seed, 9);
        assert!(parse_assignment("depth").is_err());
        assert!(parse_assignment("=3").is_err());
    }

    #[test]
    fn task_and_arch_must_agree() {
        let err = ExperimentConfig::parse("task = image\narch = gcn_sym\n").unwrap_err();
        assert!(err.to_string().contains("does not fit"), "{}", err);
        let err = ExperimentConfig::parse("task = graph\narch = sym_res\n").unwrap_err();
        assert!(err.to_string().contains("does not fit"), "{}", err);
    }

    #[test]
    fn quantization_widths_are_validated_together() {
        let err = ExperimentConfig::parse("bits_w = 4\n").unwrap_err();
        assert!(err.to_string().contains("together"), "{}", err);
        let err = ExperimentConfig::parse("bits_w = 1\nbits_a = 8\n").unwrap_err();
        assert!(err.to_string().contains("bits_w"), "{}", err);
        // A schedule needs matching target widths and a start above them.
        let err = ExperimentConfig::parse("bits_w = 4\nbits_a = 8\nbit_period = 10\n").unwrap_err();
        assert!(err.to_string().contains("must match"), "{}", err);
        let err = ExperimentConfig::parse("bits_w = 8\nbits_a = 8\nbit_period = 10\nbit_start = 4\n").unwrap_err();
        assert!(err.to_string().contains("bit_start"), "{}", err);
        let err = ExperimentConfig::parse("bit_period = 10\n").unwrap_err();
        assert!(err.to_string().contains("bit_period"), "{}", err);
    }

    #[test]
    fn smoothing_is_image_only() {
        let err = ExperimentConfig::parse("task = graph\narch = gcn_sym\ntv_enabled = true\n").unwrap_err();
        assert!(err.to_string().contains("image"), "{}", err);
    }

    #[test]
    fn schedule_mapping_covers_the_three_regimes() {
        let fixed = ExperimentConfig::parse("bits_w = 4\nbits_a = 4\n").unwrap().train_config();
        assert_eq!(fixed.schedule, Some(BitSchedule::constant(4)));
        let mixed = ExperimentConfig::parse("bits_w = 4\nbits_a = 8\n").unwrap().train_config();
        assert_eq!(mixed.schedule, None);
        let stepped = ExperimentConfig::parse("bits_w = 4\nbits_a = 4\nbit_period = 10\n").unwrap().train_config();
        assert_eq!(stepped.schedule, Some(BitSchedule { start: 16, decrement: 1, period: 10, target: 4 }));
        let full = ExperimentConfig::parse("").unwrap().train_config();
        assert_eq!(full.schedule, None);
    }

    #[test]
    fn image_trunk_widens_once_in_the_middle() {
        let text = "arch = sym_res\ndepth = 6\nbase_channels = 8\ndata_classes = 4\nbits_w = 4\nbits_a = 4\ntv_enabled = true\n";
        let specs = ExperimentConfig::parse(text).unwrap().image_specs().unwrap();
        let kinds: Vec<BlockKind> = specs.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            vec![
                BlockKind::Opening,
                BlockKind::SymRes,
                BlockKind::SymRes,
                BlockKind::SymRes,
                BlockKind::AvgPool,
                BlockKind::ChannelChange(ResKind::Symmetric),
                BlockKind::SymRes,
                BlockKind::SymRes,
                BlockKind::Classifier,
            ]
        );
        assert_eq!(specs[5].c_in, 8);
        assert_eq!(specs[5].c_out, 16);
        assert_eq!(specs[7].c_out, 16);
        assert_eq!(specs[8].c_out, 4);
        assert!(specs[1].quant.is_some() && specs[1].tv_gamma.is_some());
        assert!(specs[4].quant.is_none(), "pooling carries no parameters");

        let single = ExperimentConfig::parse("depth = 1\n").unwrap().image_specs().unwrap();
        assert_eq!(single.len(), 3, "opening, one block, classifier");
    }

    #[test]
    fn graph_spec_maps_the_shared_fields() {
        let text = "task = graph\narch = gcn_nonsym\ndepth = 8\nbase_channels = 16\nbits_w = 4\nbits_a = 8\ndata_size = 200\ndata_classes = 3\ndata_features = 8\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let spec = cfg.graph_spec().unwrap();
        assert_eq!(spec.kind, GcnKind::Nonsym);
        assert_eq!((spec.layers, spec.width, spec.classes, spec.features_in), (8, 16, 3, 8));
        assert_eq!(spec.quant, Some(QuantSpec { bits_w: 4, bits_a: 8 }));
        let sbm = cfg.sbm_params();
        assert_eq!((sbm.nodes, sbm.blocks, sbm.features), (200, 3, 8));
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = ExperimentConfig::parse("").unwrap();
        let changed = ExperimentConfig::parse("seed = 1\n").unwrap();
        assert_ne!(base.hash(), changed.hash());
    }
}
