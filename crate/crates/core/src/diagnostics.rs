//! Mechanism probes: relative variance η of conv-BN pairs, trainable skip
//! coefficients λ, plain-net depth degradation and per-layer gradient
//! variance.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, BatchNorm2d, Conv2d, ConvSpec, Ctx, GradScope, Linear, Mode, Module, ParamKind, Parameter,
};
use crate::optim::{select_trainable, TrainOption};
use crate::search::SgdConfig;
use crate::supernet::{check_finite, Seq};
use crate::tensor::{Tensor, Var};
use crate::train::{evaluate, fit, Classifier, TrainRecipe};

// ---------------------------------------------------------------------------
// Relative variance

#[derive(Clone, Debug, PartialEq)]
pub struct EtaRecord {
    pub epoch: usize,
    pub layer: String,
    /// `Var[W ⊙ γ/σ]` over all kernel entries.
    pub scaled_var: f64,
    /// `Var[W_init]`.
    pub init_var: f64,
    pub eta: f64,
}

fn population_var(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = xs.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n.max(1) as f64;
    xs.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64
}

/// η per conv-BN pair: `Var[W ⊙ γ/σ] / Var[W_init]` with `σ` taken from the
/// BN running variance (`√(running_var + eps)` once it drops below `eps`).
pub fn compute_eta(pairs: &[(&Conv2d, &BatchNorm2d)], epoch: usize) -> Vec<EtaRecord> {
    pairs
        .iter()
        .map(|(conv, bn)| {
            let w = conv.weight.tensor.data();
            let per_out = w.len() / conv.spec.out_channels;
            let gamma = bn.gamma.tensor.data();
            let scale: Vec<f64> = bn
                .running_var
                .iter()
                .zip(gamma)
                .map(|(&rv, &g)| {
                    let sigma = if rv < bn.eps { (rv + bn.eps).sqrt() } else { rv.sqrt() };
                    g / sigma
                })
                .collect();
            let scaled_var = population_var(w.iter().enumerate().map(|(i, &v)| v * scale[i / per_out]));
            let init_var = population_var(conv.init_weight.iter().copied());
            EtaRecord {
                epoch,
                layer: conv.weight.name.clone(),
                scaled_var,
                init_var,
                eta: scaled_var / init_var,
            }
        })
        .collect()
}

pub fn mean_eta(records: &[EtaRecord]) -> f64 {
    records.iter().map(|r| r.eta).sum::<f64>() / records.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Deep plain / λ-residual networks

/// Which weights the diagnostic nets learn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagMode {
    ConvBn,
    OnlyBn,
}

impl DiagMode {
    pub fn option(self) -> TrainOption {
        match self {
            DiagMode::ConvBn => TrainOption::A,
            DiagMode::OnlyBn => TrainOption::C,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DiagMode::ConvBn => "conv+bn",
            DiagMode::OnlyBn => "only-bn",
        }
    }
}

impl fmt::Display for DiagMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DiagMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "conv+bn" => Ok(DiagMode::ConvBn),
            "only-bn" => Ok(DiagMode::OnlyBn),
            other => Err(Error::config(
                "mode",
                format!("expected conv+bn or only-bn, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepNetConfig {
    pub depth: usize,
    pub width: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Initial skip coefficient; `None` builds a plain net.
    pub lambda_init: Option<f64>,
    /// One λ per block instead of a single shared one.
    pub per_block_lambda: bool,
}

impl Default for DeepNetConfig {
    fn default() -> Self {
        DeepNetConfig {
            depth: 10,
            width: 8,
            in_channels: 3,
            num_classes: 4,
            lambda_init: None,
            per_block_lambda: false,
        }
    }
}

/// Stem conv-BN-ReLU, then `depth` blocks
/// `X ↦ ReLU(BN(conv3x3(X))) + λ·X`, then global pooling and a bias-free
/// linear head.
#[derive(Clone, Debug)]
pub struct DeepNet {
    pub cfg: DeepNetConfig,
    pub stem: Seq,
    pub blocks: Vec<Seq>,
    pub lambdas: Vec<Parameter>,
    pub classifier: Linear,
}

impl DeepNet {
    pub fn new(cfg: DeepNetConfig, seed: u64) -> Result<Self> {
        if cfg.depth == 0 || cfg.width == 0 {
            return Err(Error::config("depth", "depth and width must be positive"));
        }
        if let Some(l) = cfg.lambda_init {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config("lambda_inits", format!("{l} is outside [0, 1]")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.width;
        let stem = Seq::new("stem")
            .conv(ConvSpec::same(cfg.in_channels, c, 3, 1), &mut rng)
            .bn(c)
            .relu();
        let blocks = (0..cfg.depth)
            .map(|l| {
                Seq::new(format!("block{l}"))
                    .conv(ConvSpec::same(c, c, 3, 1), &mut rng)
                    .bn(c)
                    .relu()
            })
            .collect();
        let lambdas = match cfg.lambda_init {
            None => vec![],
            Some(init) => {
                let n = if cfg.per_block_lambda { cfg.depth } else { 1 };
                (0..n)
                    .map(|i| Parameter::new(format!("lambda{i}"), Tensor::scalar(init), ParamKind::SkipLambda))
                    .collect()
            }
        };
        let classifier = Linear::new("classifier.weight", c, cfg.num_classes, &mut rng);
        Ok(DeepNet {
            cfg,
            stem,
            blocks,
            lambdas,
            classifier,
        })
    }

    pub fn set_mode(&mut self, mode: DiagMode) {
        select_trainable(self.params_mut(), mode.option());
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambdas.first().map(|p| p.tensor.data()[0])
    }

    pub fn conv_bn_pairs(&self) -> Vec<(&Conv2d, &BatchNorm2d)> {
        self.blocks.iter().flat_map(|b| b.conv_bn_pairs()).collect()
    }

    pub fn block_bns_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        self.blocks.iter_mut().flat_map(|b| b.bns_mut()).collect()
    }

    /// Logits plus the input of every block and the last block's output.
    pub fn forward_traced(&mut self, ctx: &mut Ctx, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = self.stem.forward(ctx, x)?;
        let mut trace = Vec::with_capacity(self.blocks.len() + 1);
        let lambdas: Vec<Var> = self.lambdas.iter_mut().map(|p| ctx.param(p)).collect();
        for (l, block) in self.blocks.iter_mut().enumerate() {
            trace.push(h);
            let f = block.forward(ctx, h)?;
            h = match lambdas.get(if lambdas.len() > 1 { l } else { 0 }) {
                Some(&lam) => {
                    let skip = ctx.graph.scalar_mul(h, lam)?;
                    ctx.graph.add(f, skip)?
                }
                None => f,
            };
        }
        trace.push(h);
        let pooled = global_avg_pool(&mut ctx.graph, h)?;
        let logits = self.classifier.forward(ctx, pooled)?;
        Ok((check_finite(ctx, logits, "classifier")?, trace))
    }
}

impl Module for DeepNet {
    fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.stem.params();
        out.extend(self.blocks.iter().flat_map(|b| b.params()));
        out.extend(self.lambdas.iter());
        out.extend(self.classifier.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.stem.params_mut();
        out.extend(self.blocks.iter_mut().flat_map(|b| b.params_mut()));
        out.extend(self.lambdas.iter_mut());
        out.extend(self.classifier.params_mut());
        out
    }
}

impl Classifier for DeepNet {
    fn logits(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x)?.0)
    }

    /// Projects λ back into `[0, 1]`.
    fn after_step(&mut self) {
        for p in &mut self.lambdas {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
}

/// Shared knobs of the training-based experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            width: 8,
            epochs: 20,
            batch_size: 32,
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

impl DiagConfig {
    fn recipe(&self) -> TrainRecipe {
        TrainRecipe {
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd: self.sgd.clone(),
            seed: self.seed,
        }
    }

    fn net(&self, depth: usize, train: &Dataset, lambda_init: Option<f64>, mode: DiagMode) -> Result<DeepNet> {
        let mut net = DeepNet::new(
            DeepNetConfig {
                depth,
                width: self.width,
                in_channels: train.image_shape[0],
                num_classes: train.num_classes,
                lambda_init,
                per_block_lambda: false,
            },
            self.seed,
        )?;
        net.set_mode(mode);
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaTrace {
    pub init: f64,
    pub mode: DiagMode,
    /// λ at the end of every epoch, preceded by the initial value.
    pub lambdas: Vec<f64>,
}

impl LambdaTrace {
    pub fn drift(&self) -> f64 {
        self.lambdas.last().copied().unwrap_or(self.init) - self.init
    }
}

/// Trains a λ-residual net from every initial λ and records λ per epoch.
pub fn run_lambda_experiment(
    cfg: &DiagConfig,
    depth: usize,
    inits: &[f64],
    mode: DiagMode,
    train: &Dataset,
) -> Result<Vec<LambdaTrace>> {
    inits
        .iter()
        .map(|&init| {
            let mut net = cfg.net(depth, train, Some(init), mode)?;
            let mut lambdas = vec![init];
            fit(&mut net, train, &cfg.recipe(), |_, n| {
                lambdas.push(n.lambda().expect("λ net"));
                Ok(())
            })?;
            Ok(LambdaTrace { init, mode, lambdas })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthCurve {
    pub depth: usize,
    pub mode: DiagMode,
    /// Error on the training and test sets, index 0 being the untrained net.
    pub train_error: Vec<f64>,
    pub test_error: Vec<f64>,
    /// η records at the end of every epoch, index 0 being the untrained net.
    pub eta: Vec<Vec<EtaRecord>>,
}

/// Trains plain nets of every depth and records eval-mode errors and η
/// after each epoch.
pub fn run_plain_depth_experiment(
    cfg: &DiagConfig,
    depths: &[usize],
    mode: DiagMode,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<DepthCurve>> {
    depths
        .iter()
        .map(|&depth| {
            let mut net = cfg.net(depth, train, None, mode)?;
            let bs = cfg.batch_size;
            let mut curve = DepthCurve {
                depth,
                mode,
                train_error: vec![1.0 - evaluate(&mut net, train, bs)?.acc],
                test_error: vec![1.0 - evaluate(&mut net, test, bs)?.acc],
                eta: vec![compute_eta(&net.conv_bn_pairs(), 0)],
            };
            fit(&mut net, train, &cfg.recipe(), |epoch, n| {
                curve.train_error.push(1.0 - evaluate(n, train, bs)?.acc);
                curve.test_error.push(1.0 - evaluate(n, test, bs)?.acc);
                curve.eta.push(compute_eta(&n.conv_bn_pairs(), epoch));
                Ok(())
            })?;
            Ok(curve)
        })
        .collect()
}

/// Per-block gradient variances from one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVarProfile {
    /// `Var[ΔX_l]` at the input of block `l`.
    pub per_layer: Vec<f64>,
    /// Variance of the seed gradient injected at the last block's output.
    pub seed_var: f64,
}

impl GradVarProfile {
    /// `Var[ΔX_l] / Var[ΔX_{l+1}]` for every block, the last one measured
    /// against the seed.
    pub fn ratios(&self) -> Vec<f64> {
        let mut next = self.per_layer[1..].to_vec();
        next.push(self.seed_var);
        self.per_layer.iter().zip(next).map(|(a, b)| a / b).collect()
    }
}

/// Eval-mode forward of `batch`, then backward from the fixed random
/// projection `Σ r ⊙ X_L` (`r` standard normal, seeded).
pub fn grad_variance_probe(net: &mut DeepNet, batch: &Batch, seed: u64) -> Result<GradVarProfile> {
    let mut ctx = Ctx::new(Mode::Eval, GradScope::Nothing);
    let x = ctx.graph.leaf(batch.images.clone().with_grad());
    let (_, trace) = net.forward_traced(&mut ctx, x)?;
    let out = *trace.last().expect("at least the output");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = ctx.graph.shape(out).to_vec();
    let r: Vec<f64> = (0..shape.iter().product())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let seed_var = population_var(r.iter().copied());
    let rv = ctx.input(Tensor::new(&shape, r)?);
    let prod = ctx.graph.mul(out, rv)?;
    let loss = ctx.graph.sum(prod)?;
    let grads = ctx.graph.backward(loss)?;
    let per_layer = trace[..trace.len() - 1]
        .iter()
        .map(|&v| population_var(grads.get_or_zero(v).into_iter()))
        .collect();
    Ok(GradVarProfile { per_layer, seed_var })
}

// ---------------------------------------------------------------------------
// CSV writers

pub fn write_lambda_csv(path: &Path, traces: &[LambdaTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "init", "mode", "lambda"])?;
    for t in traces {
        for (epoch, l) in t.lambdas.iter().enumerate() {
            w.write_record([epoch.to_string(), t.init.to_string(), t.mode.to_string(), l.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_depth_csv(path: &Path, curves: &[DepthCurve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "depth", "mode", "split", "error"])?;
    for c in curves {
        for (split, errs) in [("train", &c.train_error), ("test", &c.test_error)] {
            for (epoch, e) in errs.iter().enumerate() {
                w.write_record([
                    epoch.to_string(),
                    c.depth.to_string(),
                    c.mode.to_string(),
                    split.to_string(),
                    e.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_eta_csv(path: &Path, records: &[EtaRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "layer", "eta"])?;
    for r in records {
        w.write_record([r.epoch.to_string(), r.layer.clone(), r.eta.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_gradvar_csv(path: &Path, profile: &GradVarProfile) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "var"])?;
    for (l, v) in profile.per_layer.iter().enumerate() {
        w.write_record([l.to_string(), v.to_string()])?;
    }
    w.write_record([profile.per_layer.len().to_string(), profile.seed_var.to_string()])?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synth, SynthSpec};

    fn probe_batch(n: usize, c: usize, size: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * c * size * size;
        Batch {
            images: Tensor::new(
                &[n, c, size, size],
                (0..len).map(|_| StandardNormal.sample(&mut rng)).collect(),
            )
            .unwrap(),
            labels: vec![0; n],
        }
    }

    fn plain(depth: usize, width: usize) -> DeepNet {
        DeepNet::new(
            DeepNetConfig {
                depth,
                width,
                ..DeepNetConfig::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn fresh_net_has_unit_eta() {
        let net = plain(4, 8);
        let recs = compute_eta(&net.conv_bn_pairs(), 0);
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().all(|r| (r.eta - 1.0).abs() < 1e-9));
    }

    #[test]
    fn doubled_gamma_quadruples_eta() {
        let mut net = plain(2, 4);
        for bn in net.block_bns_mut() {
            bn.gamma.tensor.data_mut().iter_mut().for_each(|g| *g = 2.0);
        }
        for r in compute_eta(&net.conv_bn_pairs(), 0) {
            assert!((r.eta - 4.0).abs() < 1e-9, "{}", r.eta);
        }
    }

    #[test]
    fn tiny_running_var_falls_back_to_eps() {
        let mut net = plain(1, 2);
        net.block_bns_mut()[0].running_var = vec![0.0, 0.0];
        let r = &compute_eta(&net.conv_bn_pairs(), 0)[0];
        assert!((r.eta - 1.0 / 1e-5).abs() < 1e-3);
    }

    #[test]
    fn kaiming_plain_net_keeps_gradient_scale() {
        let mut net = plain(8, 16);
        let profile = grad_variance_probe(&mut net, &probe_batch(8, 3, 16, 1), 2).unwrap();
        assert_eq!(profile.per_layer.len(), 8);
        for r in profile.ratios() {
            assert!((0.5..=2.0).contains(&r), "{:?}", profile.ratios());
        }
    }

    #[test]
    fn zero_batch_has_zero_gradients() {
        let mut net = plain(3, 4);
        let batch = Batch {
            images: Tensor::zeros(&[2, 3, 8, 8]),
            labels: vec![0, 0],
        };
        let p = grad_variance_probe(&mut net, &batch, 0).unwrap();
        assert!(p.per_layer.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubled_gamma_scales_upstream_gradient_variance() {
        let batch = probe_batch(4, 3, 16, 5);
        let mut net = plain(4, 8);
        let base = grad_variance_probe(&mut net, &batch, 9).unwrap();
        let mut bns = net.block_bns_mut();
        bns[2].gamma.tensor.data_mut().iter_mut().for_each(|g| *g *= 2.0);
        let doubled = grad_variance_probe(&mut net, &batch, 9).unwrap();
        for l in 0..=2 {
            let ratio = doubled.per_layer[l] / base.per_layer[l];
            assert!((ratio - 4.0).abs() <= 0.8, "layer {l}: {ratio}");
        }
        assert_eq!(doubled.per_layer[3], base.per_layer[3]);
    }

    #[test]
    fn product_formula_across_depth() {
        for c in [0.7, 1.5] {
            let depth = 6;
            let mut net = plain(depth, 16);
            for bn in net.block_bns_mut() {
                bn.gamma.tensor.data_mut().iter_mut().for_each(|g| *g = f64::sqrt(c));
            }
            let p = grad_variance_probe(&mut net, &probe_batch(8, 3, 16, 4), 1).unwrap();
            let measured = p.per_layer[0] / p.seed_var;
            let predicted = c.powi(depth as i32);
            let ratio = measured / predicted;
            assert!((1.0 / 3.0..=3.0).contains(&ratio), "c={c}: {measured} vs {predicted}");
        }
    }

    #[test]
    fn lambda_stays_in_unit_interval_and_zero_epochs_is_trivial() {
        let (train, _) = generate_synth(&SynthSpec {
            num_classes: 2,
            train_per_class: 8,
            image_size: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut cfg = DiagConfig {
            width: 4,
            epochs: 0,
            batch_size: 8,
            ..DiagConfig::default()
        };
        let t = run_lambda_experiment(&cfg, 3, &[0.0, 0.5], DiagMode::ConvBn, &train).unwrap();
        assert_eq!(t[0].lambdas, vec![0.0]);
        assert_eq!(t[1].lambdas, vec![0.5]);
        cfg.epochs = 3;
        cfg.sgd.lr = 5.0;
        for mode in [DiagMode::ConvBn, DiagMode::OnlyBn] {
            for t in run_lambda_experiment(&cfg, 3, &[0.0, 1.0], mode, &train).unwrap() {
                assert_eq!(t.lambdas.len(), 4);
                assert!(t.lambdas.iter().all(|l| (0.0..=1.0).contains(l)), "{:?}", t.lambdas);
            }
        }
        assert!(DeepNet::new(
            DeepNetConfig {
                lambda_init: Some(1.5),
                ..DeepNetConfig::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn untrained_nets_sit_near_chance() {
        let (train, test) = generate_synth(&SynthSpec {
            num_classes: 4,
            train_per_class: 64,
            test_per_class: 64,
            image_size: 8,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = DiagConfig {
            width: 4,
            epochs: 0,
            ..DiagConfig::default()
        };
        for c in run_plain_depth_experiment(&cfg, &[2, 6], DiagMode::ConvBn, &train, &test).unwrap() {
            assert!((c.train_error[0] - 0.75).abs() <= 0.15, "{:?}", c.train_error);
        }
    }
}
