//! Alternating first-order search: one weight step on a training batch,
//! then one architecture step on a held-out batch.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_iter, Batch, Dataset};
use crate::diagnostics::{compute_eta, EtaRecord};
use crate::error::{Error, Result};
use crate::nn::{GradScope, Mode, Module};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, Sgd};
use crate::space::{derive_genotype, Genotype, OpKind, SpaceId};
use crate::supernet::{build_supernet, NetConfig, Network};
use crate::train::forward_backward;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub decay_bn_affine: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 1e-3,
            grad_clip: 5.0,
            decay_bn_affine: true,
        }
    }
}

impl SgdConfig {
    /// Defaults with the space-specific weight decay (1.4e-3 on NB201).
    pub fn for_space(space: SpaceId) -> Self {
        SgdConfig {
            weight_decay: if space == SpaceId::Nb201 { 1.4e-3 } else { 1e-3 },
            ..SgdConfig::default()
        }
    }

    pub fn build(&self) -> Sgd {
        let mut s = Sgd::new(self.lr, self.momentum, self.weight_decay);
        s.decay_bn_affine = self.decay_bn_affine;
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            betas: (0.5, 0.999),
            weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs during which only the weights are trained.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    /// Whether `none` may win the per-edge argmax.
    pub include_none: bool,
    /// Record η for every conv-BN pair at the end of each epoch.
    pub track_eta: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            net: NetConfig::default(),
            epochs: 50,
            batch_size: 64,
            warmup_epochs: 0,
            seed: 0,
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            include_none: true,
            track_eta: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup_epochs", "must be smaller than epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Loss and accuracy averaged over one epoch of one split.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplitStats {
    pub loss: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: SplitStats,
    pub val: SplitStats,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchResult {
    pub genotype: Option<Genotype>,
    /// Per epoch, per edge, the softmax weights over the op set.
    pub alpha_trace: Vec<Vec<Vec<f64>>>,
    pub stats: Vec<EpochStats>,
    pub genotype_timeline: Vec<Genotype>,
    pub eta_trace: Vec<Vec<EtaRecord>>,
    pub final_alpha: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    pub ops: Vec<OpKind>,
}

impl SearchResult {
    pub fn skip_fraction(&self) -> f64 {
        self.genotype.as_ref().map_or(0.0, Genotype::skip_fraction)
    }

    /// `alpha_trace.csv`: epoch, edge, op, weight.
    pub fn write_alpha_trace(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "edge", "op", "weight"])?;
        for (epoch, rows) in self.alpha_trace.iter().enumerate() {
            for (e, row) in rows.iter().enumerate() {
                let (s, d) = self.edges[e];
                for (o, weight) in row.iter().enumerate() {
                    w.write_record([
                        (epoch + 1).to_string(),
                        format!("{s}->{d}"),
                        self.ops[o].to_string(),
                        weight.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `loss_trace.csv`: epoch, split, loss, acc.
    pub fn write_loss_trace(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "split", "loss", "acc"])?;
        for s in &self.stats {
            for (split, st) in [("train", s.train), ("val", s.val)] {
                w.write_record([
                    (s.epoch + 1).to_string(),
                    split.to_string(),
                    st.loss.to_string(),
                    st.acc.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Shuffles `ds` and cuts it into two halves of equal size (±1).
pub fn split_train_val(ds: &Dataset, batch_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.len() < 2 * batch_size.max(1) {
        return Err(Error::DatasetTooSmall {
            msg: format!("{} samples cannot fill two halves of batch size {batch_size}", ds.len()),
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = ds.len() / 2;
    Ok((ds.subset(&order[..half]), ds.subset(&order[half..])))
}

/// A search in progress: the supernet, both optimizers and both halves of
/// the training data.
pub struct Search {
    pub cfg: SearchConfig,
    pub net: Network,
    pub weights_data: Dataset,
    pub arch_data: Dataset,
    sgd: Sgd,
    adam: Adam,
}

impl Search {
    pub fn new(cfg: SearchConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let net = build_supernet(&cfg.net, cfg.seed)?;
        let (weights_data, arch_data) = split_train_val(train, cfg.batch_size, cfg.seed)?;
        Ok(Search {
            sgd: cfg.sgd.build(),
            adam: Adam::new(cfg.adam.lr, cfg.adam.betas, cfg.adam.weight_decay),
            cfg,
            net,
            weights_data,
            arch_data,
        })
    }

    /// Clips and steps the option's trainable weights; α is untouched.
    pub fn weight_step(&mut self, batch: &Batch) -> Result<SplitStats> {
        self.net.zero_grad();
        let stats = forward_backward(&mut self.net, batch, Mode::Train, GradScope::Weights)?;
        let mut params = self.net.weight_params_mut();
        clip_grad_norm(&mut params, self.cfg.sgd.grad_clip);
        self.sgd.step(&mut params)?;
        Ok(stats)
    }

    /// One Adam step on α from the gradient at the current weights.
    pub fn alpha_step(&mut self, batch: &Batch) -> Result<SplitStats> {
        self.net.zero_grad();
        let stats = forward_backward(&mut self.net, batch, Mode::Train, GradScope::Arch)?;
        if let (_, Some(alpha)) = self.net.split_params_mut() {
            self.adam.step(&mut [alpha])?;
        }
        Ok(stats)
    }

    pub fn derive(&self) -> Genotype {
        derive_genotype(self.net.alpha.as_ref().expect("supernet owns α"), self.cfg.include_none)
    }

    fn run_epoch(&mut self, epoch: usize, result: &mut SearchResult) -> Result<()> {
        self.sgd.lr = cosine_lr(epoch, self.cfg.epochs, self.cfg.sgd.lr);
        let bs = self.cfg.batch_size;
        let wb = batch_iter(self.weights_data.len(), bs, self.cfg.seed, epoch)?;
        let ab = batch_iter(self.arch_data.len(), bs, self.cfg.seed ^ 0x5eed, epoch)?;
        let searching = epoch >= self.cfg.warmup_epochs;
        let (mut train, mut val) = (SplitStats::default(), SplitStats::default());
        let steps = wb.len().min(ab.len());
        for (w_idx, a_idx) in wb.iter().zip(&ab) {
            let s = self.weight_step(&self.weights_data.gather(w_idx))?;
            train.loss += s.loss;
            train.acc += s.acc;
            let a_batch = self.arch_data.gather(a_idx);
            let s = if searching {
                self.alpha_step(&a_batch)?
            } else {
                forward_backward(&mut self.net, &a_batch, Mode::Eval, GradScope::Nothing)?
            };
            val.loss += s.loss;
            val.acc += s.acc;
        }
        let n = steps.max(1) as f64;
        for s in [&mut train, &mut val] {
            s.loss /= n;
            s.acc /= n;
        }
        result.stats.push(EpochStats { epoch, train, val });
        result
            .alpha_trace
            .push(self.net.alpha.as_ref().expect("supernet owns α").softmax());
        result.genotype_timeline.push(self.derive());
        if self.cfg.track_eta {
            result.eta_trace.push(compute_eta(&self.net.conv_bn_pairs(), epoch + 1));
        }
        Ok(())
    }

    fn snapshot(&self, mut result: SearchResult) -> SearchResult {
        result.genotype = Some(self.derive());
        result.final_alpha = self
            .net
            .alpha
            .as_ref()
            .expect("supernet owns α")
            .param
            .tensor
            .data()
            .to_vec();
        result
    }

    /// Runs every epoch. On failure the traces gathered so far travel in
    /// [`Error::SearchFailed`].
    pub fn run(&mut self) -> Result<SearchResult> {
        let topo = self.cfg.net.space.topology();
        let mut result = SearchResult {
            edges: topo.edges.clone(),
            ops: self.cfg.net.space.ops().to_vec(),
            ..SearchResult::default()
        };
        if self.cfg.track_eta {
            result.eta_trace.push(compute_eta(&self.net.conv_bn_pairs(), 0));
        }
        for epoch in 0..self.cfg.epochs {
            if let Err(e) = self.run_epoch(epoch, &mut result) {
                return Err(Error::SearchFailed {
                    epoch,
                    partial: Box::new(self.snapshot(result)),
                    source: Box::new(e),
                });
            }
        }
        Ok(self.snapshot(result))
    }
}

/// Builds the supernet, splits `train`, and searches.
pub fn run_search(cfg: &SearchConfig, train: &Dataset) -> Result<(SearchResult, Network)> {
    let mut search = Search::new(cfg.clone(), train)?;
    let result = search.run()?;
    Ok((result, search.net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synth, SynthSpec};
    use crate::nn::ParamKind;
    use crate::optim::TrainOption;
    use crate::space::SpaceId;

    fn tiny_cfg(option: TrainOption, epochs: usize) -> SearchConfig {
        SearchConfig {
            net: NetConfig {
                space: SpaceId::Micro,
                cells_per_stage: 1,
                init_channels: 4,
                num_classes: 3,
                image_size: 8,
                in_channels: 3,
                option,
            },
            epochs,
            batch_size: 16,
            seed: 11,
            ..SearchConfig::default()
        }
    }

    fn tiny_data() -> Dataset {
        generate_synth(&SynthSpec {
            num_classes: 3,
            train_per_class: 22,
            test_per_class: 4,
            image_size: 8,
            ..SynthSpec::default()
        })
        .unwrap()
        .0
    }

    fn snapshot(net: &Network, pick: impl Fn(ParamKind) -> bool) -> Vec<u64> {
        net.params()
            .iter()
            .filter(|p| pick(p.kind))
            .flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn halves_are_disjoint_and_cover() {
        let ds = Dataset::new(
            "ids",
            crate::data::Split::Train,
            1000,
            [1, 1, 1],
            (0..1000).map(|i| i as f64).collect(),
            (0..1000).collect(),
        )
        .unwrap();
        let (a, b) = split_train_val(&ds, 10, 3).unwrap();
        assert_eq!((a.len(), b.len()), (500, 500));
        let mut all: Vec<usize> = a.labels.iter().chain(&b.labels).copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        let (a2, _) = split_train_val(&ds, 10, 3).unwrap();
        assert_eq!(a.labels, a2.labels);
        assert!(split_train_val(&ds, 501, 3).is_err());
    }

    #[test]
    fn zero_epochs_derives_initial_alpha() {
        let cfg = tiny_cfg(TrainOption::C, 0);
        let mut s = Search::new(cfg, &tiny_data()).unwrap();
        let before = s.derive();
        let r = s.run().unwrap();
        assert_eq!(r.genotype, Some(before));
        assert!(r.alpha_trace.is_empty() && r.stats.is_empty());
    }

    #[test]
    fn steps_touch_exactly_one_set() {
        let mut s = Search::new(tiny_cfg(TrainOption::A, 1), &tiny_data()).unwrap();
        let batch = s.weights_data.gather(&(0..16).collect::<Vec<_>>());
        let alpha_before = snapshot(&s.net, |k| k == ParamKind::ArchAlpha);
        let w_before = snapshot(&s.net, |k| k != ParamKind::ArchAlpha);
        s.weight_step(&batch).unwrap();
        assert_eq!(alpha_before, snapshot(&s.net, |k| k == ParamKind::ArchAlpha));
        assert_ne!(w_before, snapshot(&s.net, |k| k != ParamKind::ArchAlpha));
        let w_mid = snapshot(&s.net, |k| k != ParamKind::ArchAlpha);
        s.alpha_step(&batch).unwrap();
        assert_eq!(w_mid, snapshot(&s.net, |k| k != ParamKind::ArchAlpha));
        assert_ne!(alpha_before, snapshot(&s.net, |k| k == ParamKind::ArchAlpha));
    }

    #[test]
    fn option_matrix_after_search() {
        for option in TrainOption::ALL {
            let mut s = Search::new(tiny_cfg(option, 2), &tiny_data()).unwrap();
            let conv0 = snapshot(&s.net, |k| k == ParamKind::ConvWeight);
            let bn0 = snapshot(&s.net, |k| matches!(k, ParamKind::BnGamma | ParamKind::BnBeta));
            let cls0 = snapshot(&s.net, |k| k == ParamKind::Classifier);
            s.run().unwrap();
            let conv_same = conv0 == snapshot(&s.net, |k| k == ParamKind::ConvWeight);
            let bn_same = bn0 == snapshot(&s.net, |k| matches!(k, ParamKind::BnGamma | ParamKind::BnBeta));
            assert_eq!(conv_same, !option.train_conv(), "{option}");
            assert_eq!(bn_same, !option.train_bn_affine(), "{option}");
            assert_ne!(cls0, snapshot(&s.net, |k| k == ParamKind::Classifier));
        }
    }

    #[test]
    fn search_is_deterministic() {
        let data = tiny_data();
        let cfg = SearchConfig {
            track_eta: true,
            ..tiny_cfg(TrainOption::C, 2)
        };
        let (a, _) = run_search(&cfg, &data).unwrap();
        let (b, _) = run_search(&cfg, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.alpha_trace.len(), 2);
        assert_eq!(a.stats.len(), 2);
        assert_eq!(a.genotype_timeline.len(), 2);
        assert_eq!(a.eta_trace.len(), 3);
        for rows in &a.alpha_trace {
            for r in rows {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn warmup_must_end_before_search() {
        let cfg = SearchConfig {
            warmup_epochs: 2,
            ..tiny_cfg(TrainOption::C, 2)
        };
        assert!(cfg.validate().unwrap_err().is_config());
    }
}
