//! Weight-sharing supernet and discrete subnetworks.
//!
//! Skeleton: stem (3×3 conv + BN) → stage of cells at `C` → residual
//! reduction → cells at `2C` → residual reduction → cells at `4C` →
//! BN + ReLU → global average pool → bias-free linear classifier.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2d, global_avg_pool, max_pool2d, relu, BatchNorm2d, Conv2d, ConvSpec, Ctx, Linear, Module, Parameter,
};
use crate::optim::{select_trainable, Partition, TrainOption};
use crate::space::{mixed_op, AlphaTable, CellTopology, Genotype, OpKind, SpaceId};
use crate::tensor::{Tensor, Var};

/// One stage of a sequential pipeline.
#[derive(Clone, Debug)]
pub enum Layer {
    Relu,
    Conv(Conv2d),
    Bn(BatchNorm2d),
    AvgPool { k: usize, stride: usize, pad: usize },
    MaxPool { k: usize, stride: usize, pad: usize },
}

/// A named chain of layers; the empty chain is the identity.
#[derive(Clone, Debug)]
pub struct Seq {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Seq {
    pub fn new(name: impl Into<String>) -> Self {
        Seq {
            name: name.into(),
            layers: Vec::new(),
        }
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn conv<R: Rng + ?Sized>(mut self, spec: ConvSpec, rng: &mut R) -> Self {
        let name = format!("{}.{}.weight", self.name, self.layers.len());
        self.layers.push(Layer::Conv(Conv2d::new(name, spec, rng)));
        self
    }

    pub fn bn(mut self, channels: usize) -> Self {
        let name = format!("{}.{}", self.name, self.layers.len());
        self.layers.push(Layer::Bn(BatchNorm2d::new(&name, channels)));
        self
    }

    pub fn avg_pool(mut self, k: usize, stride: usize, pad: usize) -> Self {
        self.layers.push(Layer::AvgPool { k, stride, pad });
        self
    }

    pub fn max_pool(mut self, k: usize, stride: usize, pad: usize) -> Self {
        self.layers.push(Layer::MaxPool { k, stride, pad });
        self
    }

    /// ReLU → conv → BN.
    pub fn relu_conv_bn<R: Rng + ?Sized>(name: impl Into<String>, spec: ConvSpec, rng: &mut R) -> Self {
        Seq::new(name).relu().conv(spec, rng).bn(spec.out_channels)
    }

    pub fn forward(&mut self, ctx: &mut Ctx, mut x: Var) -> Result<Var> {
        for layer in &mut self.layers {
            x = match layer {
                Layer::Relu => relu(&mut ctx.graph, x)?,
                Layer::Conv(c) => c.forward(ctx, x)?,
                Layer::Bn(b) => b.forward(ctx, x)?,
                Layer::AvgPool { k, stride, pad } => avg_pool2d(&mut ctx.graph, x, *k, *stride, *pad)?,
                Layer::MaxPool { k, stride, pad } => max_pool2d(&mut ctx.graph, x, *k, *stride, *pad)?,
            };
        }
        check_finite(ctx, x, &self.name)
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn bns(&self) -> impl Iterator<Item = &BatchNorm2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Bn(b) => Some(b),
            _ => None,
        })
    }

    pub fn bns_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm2d> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Bn(b) => Some(b),
            _ => None,
        })
    }

    /// Convolutions immediately followed by a BN layer.
    pub fn conv_bn_pairs(&self) -> Vec<(&Conv2d, &BatchNorm2d)> {
        self.layers
            .windows(2)
            .filter_map(|w| match w {
                [Layer::Conv(c), Layer::Bn(b)] => Some((c, b)),
                _ => None,
            })
            .collect()
    }
}

impl Module for Seq {
    fn params(&self) -> Vec<&Parameter> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv(c) => c.params(),
                Layer::Bn(b) => b.params(),
                _ => vec![],
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Conv(c) => c.params_mut(),
                Layer::Bn(b) => b.params_mut(),
                _ => vec![],
            })
            .collect()
    }
}

pub(crate) fn check_finite(ctx: &Ctx, x: Var, layer: &str) -> Result<Var> {
    if ctx.graph.value(x).is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite {
            layer: layer.to_string(),
        })
    }
}

/// Instantiates a candidate op; `None` stands for the `none` op.
pub fn build_op<R: Rng + ?Sized>(name: &str, op: OpKind, c: usize, stride: usize, rng: &mut R) -> Option<Seq> {
    let name = format!("{name}.{op}");
    let dw = |k: usize, s: usize, d: usize| ConvSpec::same(c, c, k, s).with_dilation(d).with_groups(c);
    let pw = ConvSpec::same(c, c, 1, 1);
    Some(match op {
        OpKind::None => return None,
        OpKind::Skip if stride == 1 => Seq::new(name),
        OpKind::Skip => Seq::new(name).conv(ConvSpec::same(c, c, 1, stride), rng).bn(c),
        OpKind::Conv1x1 => Seq::relu_conv_bn(name, ConvSpec::same(c, c, 1, stride), rng),
        OpKind::Conv3x3 => Seq::relu_conv_bn(name, ConvSpec::same(c, c, 3, stride), rng),
        OpKind::AvgPool3x3 => Seq::new(name).avg_pool(3, stride, 1),
        OpKind::MaxPool3x3 => Seq::new(name).max_pool(3, stride, 1),
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let k = if op == OpKind::SepConv3x3 { 3 } else { 5 };
            Seq::new(name)
                .relu()
                .conv(dw(k, stride, 1), rng)
                .conv(pw, rng)
                .bn(c)
                .relu()
                .conv(dw(k, 1, 1), rng)
                .conv(pw, rng)
                .bn(c)
        }
        OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
            let k = if op == OpKind::DilConv3x3 { 3 } else { 5 };
            Seq::new(name).relu().conv(dw(k, stride, 2), rng).conv(pw, rng).bn(c)
        }
    })
}

/// The candidate ops placed on one edge.
#[derive(Clone, Debug)]
pub struct EdgeOps {
    pub index: usize,
    pub src: usize,
    pub dst: usize,
    /// Supernet: one slot per op of the space. Subnet: the chosen op alone.
    pub ops: Vec<Option<Seq>>,
}

impl EdgeOps {
    fn forward(&mut self, ctx: &mut Ctx, x: Var, alpha: Option<Var>) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        let mut outs = Vec::with_capacity(self.ops.len());
        for op in &mut self.ops {
            outs.push(match op {
                Some(seq) => Some(seq.forward(ctx, x)?),
                None => None,
            });
        }
        match alpha {
            Some(a) => mixed_op(&mut ctx.graph, &outs, a, self.index, &shape),
            None => Ok(outs[0].unwrap_or_else(|| ctx.input(Tensor::zeros(&shape)))),
        }
    }
}

/// A cell: nodes sum their incoming edges. Complete-DAG cells output their
/// last node; DARTS cells concatenate the intermediate nodes and project
/// back to `C` channels with a 1×1 ReLU-conv-BN.
#[derive(Clone, Debug)]
pub struct Cell {
    pub name: String,
    pub topology: CellTopology,
    pub edges: Vec<EdgeOps>,
    pub project: Option<Seq>,
}

impl Cell {
    fn supernet<R: Rng + ?Sized>(name: String, space: SpaceId, c: usize, rng: &mut R) -> Self {
        let topology = space.topology();
        let edges = topology
            .edges
            .iter()
            .enumerate()
            .map(|(i, &(src, dst))| EdgeOps {
                index: i,
                src,
                dst,
                ops: space
                    .ops()
                    .iter()
                    .map(|&op| build_op(&format!("{name}.e{src}-{dst}"), op, c, 1, rng))
                    .collect(),
            })
            .collect();
        Cell::finish(name, topology, edges, space, c, rng)
    }

    fn discrete<R: Rng + ?Sized>(name: String, g: &Genotype, c: usize, rng: &mut R) -> Self {
        let topology = g.space.topology();
        let edges = g
            .edges()
            .into_iter()
            .map(|(src, dst, op)| EdgeOps {
                index: topology.edge_index(src, dst).expect("validated genotype"),
                src,
                dst,
                ops: vec![build_op(&format!("{name}.e{src}-{dst}"), op, c, 1, rng)],
            })
            .collect();
        Cell::finish(name, topology, edges, g.space, c, rng)
    }

    fn finish<R: Rng + ?Sized>(
        name: String,
        topology: CellTopology,
        edges: Vec<EdgeOps>,
        space: SpaceId,
        c: usize,
        rng: &mut R,
    ) -> Self {
        let project = (space == SpaceId::Darts).then(|| {
            let inter = topology.num_nodes - topology.num_inputs;
            Seq::relu_conv_bn(format!("{name}.project"), ConvSpec::same(inter * c, c, 1, 1), rng)
        });
        Cell {
            name,
            topology,
            edges,
            project,
        }
    }

    /// `inputs` feed the input nodes in order.
    pub fn forward(&mut self, ctx: &mut Ctx, inputs: &[Var], alpha: Option<Var>) -> Result<Var> {
        let shape = ctx.graph.shape(inputs[0]).to_vec();
        let mut nodes: Vec<Option<Var>> = vec![None; self.topology.num_nodes];
        for (i, &x) in inputs.iter().enumerate().take(self.topology.num_inputs) {
            nodes[i] = Some(x);
        }
        for dst in self.topology.num_inputs..self.topology.num_nodes {
            let mut acc: Option<Var> = None;
            for edge in self.edges.iter_mut().filter(|e| e.dst == dst) {
                let src = nodes[edge.src].expect("sources precede destinations");
                let y = edge.forward(ctx, src, alpha)?;
                acc = Some(match acc {
                    Some(a) => ctx.graph.add(a, y)?,
                    None => y,
                });
            }
            nodes[dst] = Some(acc.unwrap_or_else(|| ctx.input(Tensor::zeros(&shape))));
        }
        let out = match self.project.as_mut() {
            Some(p) => {
                let inter: Vec<Var> = nodes[self.topology.num_inputs..].iter().flatten().copied().collect();
                let cat = ctx.graph.concat_channels(&inter)?;
                p.forward(ctx, cat)?
            }
            None => nodes[self.topology.num_nodes - 1].expect("last node computed"),
        };
        check_finite(ctx, out, &self.name)
    }

    fn ops(&self) -> impl Iterator<Item = &Seq> {
        self.edges
            .iter()
            .flat_map(|e| e.ops.iter().flatten())
            .chain(self.project.iter())
    }

    fn ops_mut(&mut self) -> impl Iterator<Item = &mut Seq> {
        self.edges
            .iter_mut()
            .flat_map(|e| e.ops.iter_mut().flatten())
            .chain(self.project.iter_mut())
    }
}

/// Stride-2 residual block: ReLU-conv3x3(s2)-BN → ReLU-conv3x3-BN, plus an
/// avgpool2x2 → conv1x1 → BN shortcut.
#[derive(Clone, Debug)]
pub struct ResidualReduction {
    pub name: String,
    pub main: Seq,
    pub shortcut: Seq,
}

impl ResidualReduction {
    fn new<R: Rng + ?Sized>(name: String, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let main = Seq::relu_conv_bn(format!("{name}.a"), ConvSpec::same(c_in, c_out, 3, 2), rng)
            .relu()
            .conv(ConvSpec::same(c_out, c_out, 3, 1), rng)
            .bn(c_out);
        let shortcut = Seq::new(format!("{name}.shortcut"))
            .avg_pool(2, 2, 0)
            .conv(ConvSpec::same(c_in, c_out, 1, 1), rng)
            .bn(c_out);
        ResidualReduction { name, main, shortcut }
    }

    fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let a = self.main.forward(ctx, x)?;
        let b = self.shortcut.forward(ctx, x)?;
        let y = ctx.graph.add(a, b)?;
        check_finite(ctx, y, &self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub space: SpaceId,
    pub cells_per_stage: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub option: TrainOption,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            space: SpaceId::Nb201,
            cells_per_stage: 2,
            init_channels: 8,
            num_classes: 10,
            image_size: 16,
            in_channels: 3,
            option: TrainOption::C,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cells_per_stage", self.cells_per_stage),
            ("init_channels", self.init_channels),
            ("num_classes", self.num_classes),
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.image_size % 4 != 0 {
            return Err(Error::config("image_size", "must be divisible by 4"));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; 3] {
        let c = self.init_channels;
        [c, 2 * c, 4 * c]
    }
}

/// Tensor counts from [`Network::audit`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamAudit {
    pub conv_changed: usize,
    pub conv_total: usize,
    pub bn_changed: usize,
    pub bn_total: usize,
}

impl ParamAudit {
    /// Whether the changed sets are exactly what `option` trains.
    pub fn matches(&self, option: TrainOption) -> bool {
        let expect =
            |trained: bool, changed: usize, total: usize| if trained { changed == total } else { changed == 0 };
        expect(option.train_conv(), self.conv_changed, self.conv_total)
            && expect(option.train_bn_affine(), self.bn_changed, self.bn_total)
    }
}

impl fmt::Display for ParamAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "conv weights changed {}/{}, bn affine changed {}/{}",
            self.conv_changed, self.conv_total, self.bn_changed, self.bn_total
        )
    }
}

/// Either the supernet (`alpha` present, every op on every edge) or a
/// discrete network materialized from a genotype.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetConfig,
    pub genotype: Option<Genotype>,
    pub alpha: Option<AlphaTable>,
    pub stem: Seq,
    pub stages: Vec<Vec<Cell>>,
    pub reductions: Vec<ResidualReduction>,
    pub head: Seq,
    pub classifier: Linear,
    pub partition: Partition,
}

impl Network {
    fn build(cfg: &NetConfig, genotype: Option<&Genotype>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = cfg.stage_channels();
        let stem = Seq::new("stem")
            .conv(ConvSpec::same(cfg.in_channels, widths[0], 3, 1), &mut rng)
            .bn(widths[0]);
        let mut stages = Vec::new();
        let mut reductions = Vec::new();
        for (s, &c) in widths.iter().enumerate() {
            if s > 0 {
                reductions.push(ResidualReduction::new(format!("reduce{s}"), widths[s - 1], c, &mut rng));
            }
            let cells = (0..cfg.cells_per_stage)
                .map(|i| {
                    let name = format!("stage{s}.cell{i}");
                    match genotype {
                        Some(g) => Cell::discrete(name, g, c, &mut rng),
                        None => Cell::supernet(name, cfg.space, c, &mut rng),
                    }
                })
                .collect();
            stages.push(cells);
        }
        let head = Seq::new("head").bn(widths[2]).relu();
        let classifier = Linear::new("classifier.weight", widths[2], cfg.num_classes, &mut rng);
        let alpha = genotype
            .is_none()
            .then(|| AlphaTable::new(cfg.space, seed ^ 0x9e37_79b9_7f4a_7c15));
        let mut net = Network {
            cfg: cfg.clone(),
            genotype: genotype.cloned(),
            alpha,
            stem,
            stages,
            reductions,
            head,
            classifier,
            partition: Partition::default(),
        };
        net.set_option(cfg.option);
        Ok(net)
    }

    /// Re-partitions the parameters for a training option.
    pub fn set_option(&mut self, option: TrainOption) {
        self.cfg.option = option;
        self.partition = select_trainable(self.params_mut(), option);
    }

    pub fn num_cells(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    /// Input node count for the cell forward: DARTS cells take the two
    /// previous cell outputs.
    fn cell_inputs(&self) -> usize {
        self.cfg.space.topology().num_inputs
    }

    /// Logits for an `(N, C, H, W)` batch.
    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x)?.0)
    }

    /// Logits plus every cell's output, in execution order.
    pub fn forward_traced(&mut self, ctx: &mut Ctx, x: Var) -> Result<(Var, Vec<Var>)> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 4
            || shape[1] != self.cfg.in_channels
            || shape[2] != self.cfg.image_size
            || shape[3] != self.cfg.image_size
        {
            return Err(Error::Shape {
                op: "network",
                lhs: shape,
                rhs: vec![self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size],
            });
        }
        let alpha = self.alpha.as_mut().map(|a| ctx.param(&mut a.param));
        let two_inputs = self.cell_inputs() == 2;
        let mut h = self.stem.forward(ctx, x)?;
        let mut trace = Vec::with_capacity(self.num_cells());
        for s in 0..self.stages.len() {
            if s > 0 {
                h = self.reductions[s - 1].forward(ctx, h)?;
            }
            let mut prev = h;
            for cell in &mut self.stages[s] {
                let out = if two_inputs {
                    cell.forward(ctx, &[prev, h], alpha)?
                } else {
                    cell.forward(ctx, &[h], alpha)?
                };
                trace.push(out);
                prev = h;
                h = out;
            }
        }
        let h = self.head.forward(ctx, h)?;
        let pooled = global_avg_pool(&mut ctx.graph, h)?;
        let logits = self.classifier.forward(ctx, pooled)?;
        Ok((check_finite(ctx, logits, "classifier")?, trace))
    }

    pub fn seqs(&self) -> Vec<&Seq> {
        let mut out = vec![&self.stem];
        for (s, cells) in self.stages.iter().enumerate() {
            if s > 0 {
                let r = &self.reductions[s - 1];
                out.push(&r.main);
                out.push(&r.shortcut);
            }
            for cell in cells {
                out.extend(cell.ops());
            }
        }
        out.push(&self.head);
        out
    }

    fn seqs_mut(&mut self) -> Vec<&mut Seq> {
        seqs_mut(&mut self.stem, &mut self.stages, &mut self.reductions, &mut self.head)
    }

    pub fn conv_bn_pairs(&self) -> Vec<(&Conv2d, &BatchNorm2d)> {
        self.seqs().into_iter().flat_map(|s| s.conv_bn_pairs()).collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        self.seqs_mut().into_iter().flat_map(|s| s.bns_mut()).collect()
    }

    /// Counts conv weights and BN affine tensors that moved away from
    /// their initial values (bitwise comparison).
    pub fn audit(&self) -> ParamAudit {
        let mut a = ParamAudit::default();
        for seq in self.seqs() {
            for conv in seq.convs() {
                a.conv_total += 1;
                a.conv_changed += usize::from(conv.weight.tensor.data() != conv.init_weight.as_slice());
            }
            for bn in seq.bns() {
                a.bn_total += 2;
                a.bn_changed += usize::from(bn.gamma.tensor.data().iter().any(|&g| g != 1.0));
                a.bn_changed += usize::from(bn.beta.tensor.data().iter().any(|&b| b != 0.0));
            }
        }
        a
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        self.seqs_mut().into_iter().flat_map(|s| s.convs_mut()).collect()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        self.seqs().into_iter().flat_map(|s| s.bns()).collect()
    }

    /// Every parameter except the architecture logits.
    pub fn weight_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.split_params_mut().0
    }

    /// `(weights, alpha)` borrowed simultaneously.
    pub fn split_params_mut(&mut self) -> (Vec<&mut Parameter>, Option<&mut Parameter>) {
        let Network {
            stem,
            stages,
            reductions,
            head,
            classifier,
            alpha,
            ..
        } = self;
        let mut out: Vec<&mut Parameter> = seqs_mut(stem, stages, reductions, head)
            .into_iter()
            .flat_map(|s| s.params_mut())
            .collect();
        out.extend(classifier.params_mut());
        (out, alpha.as_mut().map(|a| &mut a.param))
    }

    pub fn weight_params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.seqs().into_iter().flat_map(|s| s.params()).collect();
        out.extend(self.classifier.params());
        out
    }
}

impl Module for Network {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.weight_params();
        out.extend(self.alpha.as_ref().map(|a| &a.param));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let (mut out, alpha) = self.split_params_mut();
        out.extend(alpha);
        out
    }
}

fn seqs_mut<'a>(
    stem: &'a mut Seq,
    stages: &'a mut [Vec<Cell>],
    reductions: &'a mut [ResidualReduction],
    head: &'a mut Seq,
) -> Vec<&'a mut Seq> {
    let mut out = vec![stem];
    let mut reductions = reductions.iter_mut();
    for (s, cells) in stages.iter_mut().enumerate() {
        if s > 0 {
            let r = reductions.next().expect("one reduction per later stage");
            out.push(&mut r.main);
            out.push(&mut r.shortcut);
        }
        for cell in cells {
            out.extend(cell.ops_mut());
        }
    }
    out.push(head);
    out
}

/// Supernet with one shared α table, deterministic under `seed`.
pub fn build_supernet(cfg: &NetConfig, seed: u64) -> Result<Network> {
    Network::build(cfg, None, seed)
}

/// Freshly initialized network with exactly the genotype's ops.
pub fn materialize_subnet(cfg: &NetConfig, genotype: &Genotype, seed: u64) -> Result<Network> {
    if genotype.space != cfg.space {
        return Err(Error::SpaceMismatch {
            genotype: genotype.to_string(),
            space: cfg.space.name().to_string(),
        });
    }
    Network::build(cfg, Some(genotype), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{GradScope, Mode};
    use crate::tensor::{finite_diff_check, Graph};

    fn tiny(space: SpaceId) -> NetConfig {
        NetConfig {
            space,
            cells_per_stage: 1,
            init_channels: 2,
            num_classes: 3,
            image_size: 4,
            in_channels: 1,
            option: TrainOption::A,
        }
    }

    fn batch(n: usize, cfg: &NetConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [n, cfg.in_channels, cfg.image_size, cfg.image_size];
        let len = shape.iter().product();
        Tensor::new(&shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn logits(net: &mut Network, x: &Tensor, mode: Mode) -> Tensor {
        let mut ctx = Ctx::new(mode, GradScope::Nothing);
        let xv = ctx.input(x.clone());
        let y = net.forward(&mut ctx, xv).unwrap();
        ctx.graph.value(y).clone()
    }

    fn conv_bn(c_in: usize, c_out: usize, k: usize) -> usize {
        k * k * c_in * c_out + 2 * c_out
    }

    /// Closed-form parameter count of the skeleton with one cell per
    /// stage, given the per-cell parameter count at width `c`.
    fn skeleton_count(cfg: &NetConfig, cell: impl Fn(usize) -> usize) -> usize {
        let [c1, c2, c3] = cfg.stage_channels();
        let reduce = |a: usize, b: usize| conv_bn(a, b, 3) + conv_bn(b, b, 3) + conv_bn(a, b, 1);
        conv_bn(cfg.in_channels, c1, 3)
            + cell(c1)
            + reduce(c1, c2)
            + cell(c2)
            + reduce(c2, c3)
            + cell(c3)
            + 2 * c3
            + c3 * cfg.num_classes
    }

    #[test]
    fn stage_widths_double() {
        let cfg = NetConfig {
            init_channels: 8,
            ..NetConfig::default()
        };
        assert_eq!(cfg.stage_channels(), [8, 16, 32]);
        let net = build_supernet(&cfg, 0).unwrap();
        assert_eq!(net.stages.len(), 3);
        assert!(net.stages.iter().all(|s| s.len() == 2));
        let names: std::collections::HashSet<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names.len(), net.params().len());
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        let cfg = NetConfig {
            init_channels: 4,
            num_classes: 10,
            in_channels: 3,
            ..tiny(SpaceId::Nb201)
        };
        let net = build_supernet(&cfg, 1).unwrap();
        let nb201_cell = |c: usize| 6 * (conv_bn(c, c, 1) + conv_bn(c, c, 3));
        assert_eq!(net.num_params(), skeleton_count(&cfg, nb201_cell) + 6 * 5);

        let g = Genotype::uniform(SpaceId::Nb201, OpKind::Conv3x3).unwrap();
        let sub = materialize_subnet(&cfg, &g, 1).unwrap();
        assert_eq!(sub.num_params(), skeleton_count(&cfg, |c| 6 * conv_bn(c, c, 3)));

        let micro = NetConfig {
            space: SpaceId::Micro,
            ..cfg
        };
        let net = build_supernet(&micro, 1).unwrap();
        assert_eq!(net.num_params(), skeleton_count(&micro, |c| 3 * conv_bn(c, c, 3)) + 9);
    }

    #[test]
    fn construction_is_seeded() {
        let cfg = tiny(SpaceId::Micro);
        let a = build_supernet(&cfg, 4).unwrap();
        let b = build_supernet(&cfg, 4).unwrap();
        let c = build_supernet(&cfg, 5).unwrap();
        let flat = |n: &Network| {
            n.params()
                .iter()
                .flat_map(|p| p.tensor.data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn zero_batch_gives_zero_logits() {
        let cfg = tiny(SpaceId::Nb201);
        let mut net = build_supernet(&cfg, 2).unwrap();
        let x = Tensor::zeros(&[2, 1, 4, 4]);
        for mode in [Mode::Train, Mode::Eval] {
            assert!(logits(&mut net, &x, mode).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn eval_forward_is_pure_and_permutation_equivariant() {
        let cfg = tiny(SpaceId::Nb201);
        let mut net = build_supernet(&cfg, 3).unwrap();
        let x = batch(3, &cfg, 9);
        logits(&mut net, &x, Mode::Train);
        let y1 = logits(&mut net, &x, Mode::Eval);
        let y2 = logits(&mut net, &x, Mode::Eval);
        assert_eq!(y1.data(), y2.data());
        let plane = 16;
        let mut swapped = x.clone();
        swapped.data_mut()[..plane].copy_from_slice(&x.data()[2 * plane..]);
        swapped.data_mut()[2 * plane..].copy_from_slice(&x.data()[..plane]);
        let ys = logits(&mut net, &swapped, Mode::Eval);
        assert_eq!(&ys.data()[..3], &y1.data()[6..]);
        assert_eq!(&ys.data()[6..], &y1.data()[..3]);
        assert_eq!(&ys.data()[3..6], &y1.data()[3..6]);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let cfg = tiny(SpaceId::Micro);
        let mut net = build_supernet(&cfg, 0).unwrap();
        let mut ctx = Ctx::new(Mode::Eval, GradScope::Nothing);
        let x = ctx.input(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(net.forward(&mut ctx, x).is_err());
    }

    #[test]
    fn space_mismatch_is_rejected() {
        let g = Genotype::uniform(SpaceId::Nb201, OpKind::Skip).unwrap();
        assert!(matches!(
            materialize_subnet(&tiny(SpaceId::Micro), &g, 0),
            Err(Error::SpaceMismatch { .. })
        ));
    }

    #[test]
    fn all_none_cells_block_features() {
        let cfg = tiny(SpaceId::Micro);
        let g = Genotype::uniform(SpaceId::Micro, OpKind::None).unwrap();
        let mut net = materialize_subnet(&cfg, &g, 0).unwrap();
        let a = logits(&mut net, &batch(2, &cfg, 1), Mode::Eval);
        let b = logits(&mut net, &batch(2, &cfg, 2), Mode::Eval);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn all_skip_cell_sums_identities() {
        // micro all-skip: node1 = x, node2 = x + node1 = 2x.
        let cfg = tiny(SpaceId::Micro);
        let g = Genotype::uniform(SpaceId::Micro, OpKind::Skip).unwrap();
        let mut net = materialize_subnet(&cfg, &g, 0).unwrap();
        let mut ctx = Ctx::new(Mode::Eval, GradScope::Nothing);
        let x = ctx.input(batch(2, &cfg, 3));
        let y = net.stages[0][0].forward(&mut ctx, &[x], None).unwrap();
        let want: Vec<f64> = ctx.graph.value(x).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(ctx.graph.value(y).data(), &want[..]);

        let nb = NetConfig {
            space: SpaceId::Nb201,
            ..cfg
        };
        let g = Genotype::uniform(SpaceId::Nb201, OpKind::Skip).unwrap();
        let mut net = materialize_subnet(&nb, &g, 0).unwrap();
        let y = net.stages[0][0].forward(&mut ctx, &[x], None).unwrap();
        // node1 = x, node2 = 2x, node3 = x + x + 2x
        let want: Vec<f64> = ctx.graph.value(x).data().iter().map(|v| 4.0 * v).collect();
        assert_eq!(ctx.graph.value(y).data(), &want[..]);
    }

    #[test]
    fn alpha_gradient_reaches_every_cell() {
        let cfg = NetConfig {
            cells_per_stage: 2,
            ..tiny(SpaceId::Micro)
        };
        let mut net = build_supernet(&cfg, 5).unwrap();
        let mut ctx = Ctx::new(Mode::Train, GradScope::Arch);
        let xv = ctx.input(batch(2, &cfg, 6));
        let (_, cells) = net.forward_traced(&mut ctx, xv).unwrap();
        assert_eq!(cells.len(), 6);
        let alpha = net.alpha.as_ref().unwrap().param.tensor.node_id.unwrap();
        let mut flows = Vec::new();
        for &out in &cells {
            let sq = ctx.graph.mul(out, out).unwrap();
            let loss = ctx.graph.sum(sq).unwrap();
            let grads = ctx.graph.backward(loss).unwrap();
            flows.push(grads.get(alpha).unwrap().iter().map(|g| g.abs()).sum::<f64>());
        }
        assert!(flows.iter().all(|&f| f > 0.0), "{flows:?}");
    }

    fn mean_logit_wrt_alpha(net: &Network, x: &Tensor, mode: Mode) -> f64 {
        let alpha = net.alpha.as_ref().unwrap().param.tensor.clone();
        finite_diff_check(
            |g: &mut Graph, a: Var| {
                let mut net = net.clone();
                let mut ctx = Ctx {
                    graph: std::mem::take(g),
                    mode,
                    scope: GradScope::Nothing,
                };
                let xv = ctx.input(x.clone());
                net.alpha.as_mut().unwrap().param.tensor.node_id = Some(a);
                let y = net.forward(&mut ctx, xv)?;
                let m = ctx.graph.mean(y)?;
                let sq = ctx.graph.mul(m, m)?;
                *g = ctx.graph;
                Ok(sq)
            },
            &alpha,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn supernet_alpha_grad_matches_finite_differences() {
        for space in [SpaceId::Micro, SpaceId::Nb201] {
            let cfg = tiny(space);
            let net = build_supernet(&cfg, 7).unwrap();
            let x = batch(2, &cfg, 8);
            for mode in [Mode::Train, Mode::Eval] {
                let err = mean_logit_wrt_alpha(&net, &x, mode);
                assert!(err < 1e-5, "{space} {mode:?}: {err}");
            }
        }
    }

    #[test]
    fn darts_space_supernet_runs() {
        let cfg = NetConfig {
            image_size: 8,
            ..tiny(SpaceId::Darts)
        };
        let mut net = build_supernet(&cfg, 1).unwrap();
        let y = logits(&mut net, &batch(2, &cfg, 2), Mode::Train);
        assert_eq!(y.shape(), &[2, 3]);
        let g = crate::space::derive_genotype(net.alpha.as_ref().unwrap(), false);
        let mut sub = materialize_subnet(&cfg, &g, 1).unwrap();
        assert_eq!(logits(&mut sub, &batch(2, &cfg, 2), Mode::Train).shape(), &[2, 3]);
    }
}
