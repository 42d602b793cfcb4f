//! `key=value` run configuration.
//!
//! Blank lines and `#` comments are ignored. `preset`, `task` and
//! `num_classes` are applied first regardless of position, `linear_probe`
//! last; everything else overrides the preset in file order.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use gft_core::config::{
    ClassifierConfig, EdgeConvConfig, ModelConfig, SegmentationConfig, TaskConfig,
};
use gft_core::optim::TrainConfig;

use crate::augment::Augment;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full-size classification/segmentation setup.
    Full,
    /// Small enough to train on one core in minutes.
    Desk,
    /// Finite-difference scale.
    Tiny,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            "tiny" => Ok(Preset::Tiny),
            other => Err(format!("unknown preset {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classification" => Ok(Task::Classification),
            "segmentation" => Ok(Task::Segmentation),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub num_points: usize,
    pub augment: Augment,
    /// Evaluate every this many epochs (the last epoch always evaluates).
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub fn model_preset(preset: Preset, task: Task, num_classes: usize) -> ModelConfig {
    let mut cfg = match preset {
        Preset::Full => ModelConfig::classification(num_classes),
        Preset::Desk => ModelConfig::desk(num_classes),
        Preset::Tiny => ModelConfig::tiny(num_classes),
    };
    if task == Task::Segmentation {
        let mut seg = SegmentationConfig::new(num_classes);
        match preset {
            Preset::Full => {}
            Preset::Desk => {
                seg.taps = vec![2, 4, 6];
                seg.dec_dim = 96;
                seg.dec_heads = 4;
                seg.point_hidden = 64;
            }
            Preset::Tiny => {
                seg.taps = vec![2, 4];
                seg.dec_dim = 8;
                seg.dec_heads = 2;
                seg.dec_blocks = 1;
                seg.point_hidden = 6;
            }
        }
        cfg.task = TaskConfig::Segmentation(seg);
    }
    cfg
}

pub fn run_preset(preset: Preset, task: Task, num_classes: usize) -> RunConfig {
    let model = model_preset(preset, task, num_classes);
    let (train, num_points) = match preset {
        Preset::Full => (TrainConfig::default(), 2048),
        Preset::Desk => (
            TrainConfig {
                lr: 3e-4,
                warmup_lr: 1e-6,
                min_lr: 1e-6,
                warmup_epochs: 5,
                epochs: 50,
                weight_decay: 0.05,
                batch_size: 16,
                seed: 0,
            },
            256,
        ),
        Preset::Tiny => (
            TrainConfig {
                lr: 1e-3,
                warmup_epochs: 1,
                epochs: 5,
                batch_size: 4,
                ..TrainConfig::default()
            },
            64,
        ),
    };
    RunConfig {
        model,
        train,
        data: DataConfig {
            num_points,
            augment: Augment::default(),
            eval_every: 1,
        },
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| format!("bad list element {s:?}")))
        .collect()
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        other => Err(format!("bad boolean {other:?}")),
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("bad number {v:?}"))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        Self::parse_with(path, text, Task::Classification, 4)
    }

    /// Like [`RunConfig::parse`] with the task and class count used when
    /// the text does not set them.
    pub fn parse_with(path: &Path, text: &str, task: Task, num_classes: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected key=value, found {line:?}"),
                });
            };
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let at = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let find = |key: &str| pairs.iter().rev().find(|(_, k, _)| k == key);
        let preset = match find("preset") {
            Some((l, _, v)) => v.parse().map_err(|m| at(*l, m))?,
            None => Preset::Desk,
        };
        let task = match find("task") {
            Some((l, _, v)) => v.parse().map_err(|m| at(*l, m))?,
            None => task,
        };
        let classes = match find("num_classes") {
            Some((l, _, v)) => num(v).map_err(|m| at(*l, m))?,
            None => num_classes,
        };
        let mut cfg = run_preset(preset, task, classes);
        let mut probe = false;
        for (line, k, v) in &pairs {
            cfg.apply(k, v, &mut probe).map_err(|m| at(*line, m))?;
        }
        if probe {
            cfg.model = cfg.model.linear_probe();
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    fn apply(&mut self, key: &str, v: &str, probe: &mut bool) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let b = &mut m.backbone;
        let g = &mut m.gft;
        match key {
            "preset" | "task" | "num_classes" => {}
            "learning_rate" => t.lr = num(v)?,
            "warmup_lr" => t.warmup_lr = num(v)?,
            "min_lr" => t.min_lr = num(v)?,
            "warmup_epochs" => t.warmup_epochs = num(v)?,
            "epochs" => t.epochs = num(v)?,
            "weight_decay" => t.weight_decay = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "num_points" => self.data.num_points = num(v)?,
            "eval_every" => self.data.eval_every = num::<usize>(v)?.max(1),
            "augment_rotate" => self.data.augment.rotate = parse_bool(v)?,
            "augment_scale" => self.data.augment.scale = parse_bool(v)?,
            "augment_translate" => self.data.augment.translate = parse_bool(v)?,
            "embed_dim" => b.dim = num(v)?,
            "depth" => b.depth = num(v)?,
            "heads" => b.heads = num(v)?,
            "mlp_ratio" => b.mlp_ratio = num(v)?,
            "num_patches" => b.num_patches = num(v)?,
            "patch_size" => b.group_size = num(v)?,
            "tokenizer_hidden" => b.tokenizer_hidden = num(v)?,
            "init_std" => b.init_std = num(v)?,
            "norm_eps" => b.norm_eps = num(v)?,
            "prompt_length" => g.prompt_len = num(v)?,
            "edgeconv" => {
                if parse_bool(v)? {
                    g.edgeconv.get_or_insert_with(EdgeConvConfig::default);
                } else {
                    g.edgeconv = None;
                }
            }
            "edgeconv_knn" | "edgeconv_dims" | "ffn_dim" | "edgeconv_out_dim" | "dynamic_graph" | "negative_slope" => {
                let e = g.edgeconv.get_or_insert_with(EdgeConvConfig::default);
                match key {
                    "edgeconv_knn" => e.k_graph = num(v)?,
                    "edgeconv_dims" => e.dims = parse_list(v)?,
                    "ffn_dim" => e.ffn_dim = num(v)?,
                    "edgeconv_out_dim" => e.out_dim = num(v)?,
                    "dynamic_graph" => e.dynamic_graph = parse_bool(v)?,
                    _ => e.negative_slope = num(v)?,
                }
            }
            "xattn_dim" => g.xattn_dim = num(v)?,
            "xattn_heads" => g.xattn_heads = num(v)?,
            "interaction_layers" => g.interaction_layers = parse_list(v)?,
            "unlock_tokenizer" => g.unlock_tokenizer = parse_bool(v)?,
            "train_cls_token" => g.train_cls_token = parse_bool(v)?,
            "linear_probe" => *probe = parse_bool(v)?,
            "head_hidden" | "dropout" | "pool_cls" | "pool_patches" | "pool_prompts" => {
                let TaskConfig::Classification(c) = &mut m.task else {
                    return Err(format!("{key} applies to classification only"));
                };
                apply_classifier(c, key, v)?;
            }
            "seg_taps" | "dec_dim" | "dec_blocks" | "dec_heads" | "dec_mlp_ratio" | "point_hidden" | "interp_k" => {
                let TaskConfig::Segmentation(s) = &mut m.task else {
                    return Err(format!("{key} applies to segmentation only"));
                };
                match key {
                    "seg_taps" => s.taps = parse_list(v)?,
                    "dec_dim" => s.dec_dim = num(v)?,
                    "dec_blocks" => s.dec_blocks = num(v)?,
                    "dec_heads" => s.dec_heads = num(v)?,
                    "dec_mlp_ratio" => s.dec_mlp_ratio = num(v)?,
                    "point_hidden" => s.point_hidden = num(v)?,
                    _ => s.interp_k = num(v)?,
                }
            }
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }
}

fn apply_classifier(c: &mut ClassifierConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "head_hidden" => c.hidden = parse_list(v)?,
        "dropout" => c.dropout = num(v)?,
        "pool_cls" => c.pooling.cls = parse_bool(v)?,
        "pool_patches" => c.pooling.patches = parse_bool(v)?,
        _ => c.pooling.prompts = parse_bool(v)?,
    }
    Ok(())
}

/// Every model field as `key=value` lines; parsing the result rebuilds the
/// same [`ModelConfig`].
pub fn render_model_config(m: &ModelConfig) -> String {
    let b = &m.backbone;
    let g = &m.gft;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k}={v}");
    };
    match &m.task {
        TaskConfig::Classification(c) => {
            kv("task", "classification".into());
            kv("num_classes", c.num_classes.to_string());
        }
        TaskConfig::Segmentation(s) => {
            kv("task", "segmentation".into());
            kv("num_classes", s.num_parts.to_string());
        }
    }
    kv("embed_dim", b.dim.to_string());
    kv("depth", b.depth.to_string());
    kv("heads", b.heads.to_string());
    kv("mlp_ratio", b.mlp_ratio.to_string());
    kv("num_patches", b.num_patches.to_string());
    kv("patch_size", b.group_size.to_string());
    kv("tokenizer_hidden", b.tokenizer_hidden.to_string());
    kv("init_std", b.init_std.to_string());
    kv("norm_eps", b.norm_eps.to_string());
    kv("prompt_length", g.prompt_len.to_string());
    kv("edgeconv", (g.edgeconv.is_some() as u8).to_string());
    if let Some(e) = &g.edgeconv {
        kv("edgeconv_knn", e.k_graph.to_string());
        kv("edgeconv_dims", join(&e.dims));
        kv("ffn_dim", e.ffn_dim.to_string());
        kv("edgeconv_out_dim", e.out_dim.to_string());
        kv("dynamic_graph", (e.dynamic_graph as u8).to_string());
        kv("negative_slope", e.negative_slope.to_string());
    }
    kv("xattn_dim", g.xattn_dim.to_string());
    kv("xattn_heads", g.xattn_heads.to_string());
    kv("interaction_layers", join(&g.interaction_layers));
    kv("unlock_tokenizer", (g.unlock_tokenizer as u8).to_string());
    kv("train_cls_token", (g.train_cls_token as u8).to_string());
    match &m.task {
        TaskConfig::Classification(c) => {
            kv("head_hidden", join(&c.hidden));
            kv("dropout", c.dropout.to_string());
            kv("pool_cls", (c.pooling.cls as u8).to_string());
            kv("pool_patches", (c.pooling.patches as u8).to_string());
            kv("pool_prompts", (c.pooling.prompts as u8).to_string());
        }
        TaskConfig::Segmentation(s) => {
            kv("seg_taps", join(&s.taps));
            kv("dec_dim", s.dec_dim.to_string());
            kv("dec_blocks", s.dec_blocks.to_string());
            kv("dec_heads", s.dec_heads.to_string());
            kv("dec_mlp_ratio", s.dec_mlp_ratio.to_string());
            kv("point_hidden", s.point_hidden.to_string());
            kv("interp_k", s.interp_k.to_string());
        }
    }
    out
}

/// Inverse of [`render_model_config`].
pub fn parse_model_config(path: &Path, text: &str) -> Result<ModelConfig> {
    Ok(RunConfig::parse(path, &format!("preset=tiny\n{text}"))?.model)
}
