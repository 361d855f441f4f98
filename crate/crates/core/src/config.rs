//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{generate_synth, load_cifar10_bin, Dataset, SynthSpec};
use crate::diagnostics::{DiagConfig, DiagMode};
use crate::error::{Error, Result};
use crate::optim::TrainOption;
use crate::oracle::OracleConfig;
use crate::search::{AdamConfig, SearchConfig, SgdConfig};
use crate::space::SpaceId;
use crate::supernet::NetConfig;

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("name", "", "run directory name under `out` (defaults to the command)"),
    ("out", "runs", "output root"),
    ("seed", "0", "master seed"),
    ("space", "nb201", "search space: nb201 | micro | darts"),
    ("option", "C", "trainable modules: A conv+bn, B conv, C bn, D none"),
    ("dataset", "synth", "synth | cifar10"),
    ("data_dir", "", "directory of the CIFAR-10 binary batches"),
    ("synth_classes", "4", "synthetic classes"),
    ("synth_train_per_class", "256", "synthetic training images per class"),
    ("synth_test_per_class", "64", "synthetic test images per class"),
    ("synth_image_size", "16", "synthetic image side"),
    ("synth_noise", "0.5", "synthetic pixel noise std"),
    ("synth_seed", "0", "synthetic generator seed"),
    ("cells_per_stage", "2", "cells per stage"),
    ("init_channels", "8", "channels of the first stage"),
    ("epochs", "50", "training epochs"),
    ("batch_size", "64", "batch size"),
    ("warmup_epochs", "0", "epochs training weights only before α updates"),
    ("lr", "0.025", "initial SGD learning rate (cosine schedule)"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "", "SGD weight decay (1.4e-3 on nb201, 1e-3 otherwise)"),
    ("grad_clip", "5", "gradient norm clip"),
    ("decay_bn_affine", "true", "apply weight decay to BN γ/β"),
    ("arch_lr", "3e-4", "Adam learning rate for α"),
    ("arch_beta1", "0.5", "Adam β1"),
    ("arch_beta2", "0.999", "Adam β2"),
    ("arch_weight_decay", "1e-3", "Adam weight decay"),
    ("include_none", "true", "let `none` win the per-edge argmax"),
    ("track_eta", "false", "record η during search"),
    ("budget_epochs", "10", "oracle training epochs per architecture"),
    ("oracle_seeds", "0", "comma-separated oracle seeds"),
    (
        "allow_large_space",
        "false",
        "permit enumerating all 15625 nb201 cells (hours)",
    ),
    ("mode", "conv+bn", "diagnostics training mode: conv+bn | only-bn"),
    ("width", "8", "diagnostics net width"),
    ("depth", "26", "λ net depth"),
    ("depths", "10,26", "plain net depths"),
    ("lambda_inits", "0,0.25,0.5", "initial λ values"),
    ("per_block_lambda", "false", "one λ per block"),
    ("probe_batch", "32", "images in the gradient-variance probe batch"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(Error::config(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| {
            KEYS.iter()
                .find(|(k, _, _)| *k == key)
                .map(|(_, d, _)| *d)
                .unwrap_or_else(|| panic!("`{key}` is not a declared key"))
        })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::config(key, format!("cannot parse `{s}`: {e}")))
            })
            .collect()
    }

    pub fn name_or(&self, fallback: &str) -> String {
        match self.raw("name") {
            "" => fallback.to_string(),
            n => n.to_string(),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn space(&self) -> Result<SpaceId> {
        self.raw("space").parse()
    }

    pub fn option(&self) -> Result<TrainOption> {
        self.raw("option").parse()
    }

    pub fn mode(&self) -> Result<DiagMode> {
        self.raw("mode").parse()
    }

    fn synth_spec(&self) -> Result<SynthSpec> {
        Ok(SynthSpec {
            num_classes: self.get("synth_classes")?,
            train_per_class: self.get("synth_train_per_class")?,
            test_per_class: self.get("synth_test_per_class")?,
            image_size: self.get("synth_image_size")?,
            noise: self.get("synth_noise")?,
            seed: self.get("synth_seed")?,
            ..SynthSpec::default()
        })
    }

    /// Train and test splits of the configured dataset.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.raw("dataset") {
            "synth" => generate_synth(&self.synth_spec()?),
            "cifar10" => {
                let dir = self.raw("data_dir");
                if dir.is_empty() {
                    return Err(Error::config("data_dir", "required when dataset = cifar10"));
                }
                if !Path::new(dir).is_dir() {
                    return Err(Error::config("data_dir", format!("`{dir}` is not a directory")));
                }
                load_cifar10_bin(Path::new(dir))
            }
            other => Err(Error::config(
                "dataset",
                format!("expected synth or cifar10, got `{other}`"),
            )),
        }
    }

    pub fn net(&self, train: &Dataset) -> Result<NetConfig> {
        let [c, h, w] = train.image_shape;
        if h != w {
            return Err(Error::config("dataset", "images must be square"));
        }
        let cfg = NetConfig {
            space: self.space()?,
            cells_per_stage: self.get("cells_per_stage")?,
            init_channels: self.get("init_channels")?,
            num_classes: train.num_classes,
            image_size: h,
            in_channels: c,
            option: self.option()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sgd(&self) -> Result<SgdConfig> {
        let mut sgd = SgdConfig::for_space(self.space()?);
        sgd.lr = self.get("lr")?;
        sgd.momentum = self.get("momentum")?;
        if !self.raw("weight_decay").is_empty() {
            sgd.weight_decay = self.get("weight_decay")?;
        }
        sgd.grad_clip = self.get("grad_clip")?;
        sgd.decay_bn_affine = self.get("decay_bn_affine")?;
        Ok(sgd)
    }

    pub fn search(&self, train: &Dataset) -> Result<SearchConfig> {
        let cfg = SearchConfig {
            net: self.net(train)?,
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            warmup_epochs: self.get("warmup_epochs")?,
            seed: self.get("seed")?,
            sgd: self.sgd()?,
            adam: AdamConfig {
                lr: self.get("arch_lr")?,
                betas: (self.get("arch_beta1")?, self.get("arch_beta2")?),
                weight_decay: self.get("arch_weight_decay")?,
            },
            include_none: self.get("include_none")?,
            track_eta: self.get("track_eta")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn oracle(&self, train: &Dataset) -> Result<OracleConfig> {
        let net = self.net(train)?;
        if net.space == SpaceId::Nb201 && !self.get::<bool>("allow_large_space")? {
            return Err(Error::config(
                "allow_large_space",
                "enumerating nb201 trains 15625 networks; set allow_large_space = true to proceed",
            ));
        }
        Ok(OracleConfig {
            net,
            budget_epochs: self.get("budget_epochs")?,
            batch_size: self.get("batch_size")?,
            sgd: self.sgd()?,
            seeds: self.list("oracle_seeds")?,
        })
    }

    pub fn diag(&self) -> Result<DiagConfig> {
        Ok(DiagConfig {
            width: self.get("width")?,
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            sgd: self.sgd()?,
            seed: self.get("seed")?,
        })
    }

    pub fn depth(&self) -> Result<usize> {
        self.get("depth")
    }

    pub fn depths(&self) -> Result<Vec<usize>> {
        self.list("depths")
    }

    pub fn lambda_inits(&self) -> Result<Vec<f64>> {
        let inits: Vec<f64> = self.list("lambda_inits")?;
        if let Some(bad) = inits.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::config("lambda_inits", format!("{bad} is outside [0, 1]")));
        }
        Ok(inits)
    }

    pub fn per_block_lambda(&self) -> Result<bool> {
        self.get("per_block_lambda")
    }

    pub fn probe_batch(&self) -> Result<usize> {
        self.get("probe_batch")
    }
}
