//! Candidate operations, cell topologies, genotypes and architecture
//! parameters.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{ParamKind, Parameter};
use crate::tensor::{softmax_in_place, Graph, Tensor, Var};

/// Standard deviation of the architecture-parameter initialization.
pub const ALPHA_INIT_STD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    None,
    Skip,
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
    MaxPool3x3,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::None,
        OpKind::Skip,
        OpKind::Conv1x1,
        OpKind::Conv3x3,
        OpKind::AvgPool3x3,
        OpKind::MaxPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::Skip => "skip",
            OpKind::Conv1x1 => "conv1x1",
            OpKind::Conv3x3 => "conv3x3",
            OpKind::AvgPool3x3 => "avgpool3x3",
            OpKind::MaxPool3x3 => "maxpool3x3",
            OpKind::SepConv3x3 => "sepconv3x3",
            OpKind::SepConv5x5 => "sepconv5x5",
            OpKind::DilConv3x3 => "dilconv3x3",
            OpKind::DilConv5x5 => "dilconv5x5",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("op", format!("unknown operation `{s}`")))
    }
}

const NB201_OPS: [OpKind; 5] = [
    OpKind::None,
    OpKind::Skip,
    OpKind::Conv1x1,
    OpKind::Conv3x3,
    OpKind::AvgPool3x3,
];
const MICRO_OPS: [OpKind; 3] = [OpKind::None, OpKind::Skip, OpKind::Conv3x3];
const DARTS_OPS: [OpKind; 8] = [
    OpKind::None,
    OpKind::AvgPool3x3,
    OpKind::MaxPool3x3,
    OpKind::Skip,
    OpKind::SepConv3x3,
    OpKind::SepConv5x5,
    OpKind::DilConv3x3,
    OpKind::DilConv5x5,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpaceId {
    Nb201,
    /// Three-node, three-edge cell over {none, skip, conv3x3}: small enough
    /// to train every architecture.
    Micro,
    Darts,
}

impl SpaceId {
    pub fn name(self) -> &'static str {
        match self {
            SpaceId::Nb201 => "nb201",
            SpaceId::Micro => "micro",
            SpaceId::Darts => "darts",
        }
    }

    pub fn ops(self) -> &'static [OpKind] {
        match self {
            SpaceId::Nb201 => &NB201_OPS,
            SpaceId::Micro => &MICRO_OPS,
            SpaceId::Darts => &DARTS_OPS,
        }
    }

    pub fn topology(self) -> CellTopology {
        match self {
            SpaceId::Nb201 => CellTopology::complete(4, 1),
            SpaceId::Micro => CellTopology::complete(3, 1),
            SpaceId::Darts => CellTopology::complete(6, 2),
        }
    }

    pub fn is_enumerable(self) -> bool {
        self != SpaceId::Darts
    }

    pub fn op_index(self, op: OpKind) -> Option<usize> {
        self.ops().iter().position(|&o| o == op)
    }
}

impl fmt::Display for SpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpaceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nb201" => Ok(SpaceId::Nb201),
            "micro" => Ok(SpaceId::Micro),
            "darts" => Ok(SpaceId::Darts),
            other => Err(Error::config(
                "space",
                format!("expected nb201, micro or darts, got `{other}`"),
            )),
        }
    }
}

/// A cell DAG; edges are ordered by destination, then source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTopology {
    pub num_nodes: usize,
    pub num_inputs: usize,
    pub edges: Vec<(usize, usize)>,
}

impl CellTopology {
    /// Every `src < dst` pair with `dst` past the input nodes.
    pub fn complete(num_nodes: usize, num_inputs: usize) -> Self {
        let edges = (num_inputs..num_nodes)
            .flat_map(|dst| (0..dst).map(move |src| (src, dst)))
            .collect();
        CellTopology {
            num_nodes,
            num_inputs,
            edges,
        }
    }

    pub fn edge_index(&self, src: usize, dst: usize) -> Option<usize> {
        self.edges.iter().position(|&e| e == (src, dst))
    }

    pub fn incoming(&self, dst: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.1 == dst)
            .map(|(i, e)| (i, e.0))
    }
}

/// A discrete architecture: for every non-input node, its incoming
/// `(op, source)` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub space: SpaceId,
    pub nodes: Vec<Vec<(OpKind, usize)>>,
}

impl Genotype {
    /// Builds a genotype of a complete-DAG space from one op per edge.
    pub fn from_edge_ops(space: SpaceId, ops: &[OpKind]) -> Result<Self> {
        let topo = space.topology();
        if ops.len() != topo.edges.len() {
            return Err(Error::invalid(
                "genotype",
                format!("{space} has {} edges, got {} ops", topo.edges.len(), ops.len()),
            ));
        }
        let mut nodes = vec![Vec::new(); topo.num_nodes - topo.num_inputs];
        for (&(src, dst), &op) in topo.edges.iter().zip(ops) {
            if space.op_index(op).is_none() {
                return Err(Error::SpaceMismatch {
                    genotype: op.name().to_string(),
                    space: space.name().to_string(),
                });
            }
            nodes[dst - topo.num_inputs].push((op, src));
        }
        Ok(Genotype { space, nodes })
    }

    pub fn uniform(space: SpaceId, op: OpKind) -> Result<Self> {
        let n = space.topology().edges.len();
        Genotype::from_edge_ops(space, &vec![op; n])
    }

    /// `(src, dst, op)` for every edge present.
    pub fn edges(&self) -> Vec<(usize, usize, OpKind)> {
        let base = self.space.topology().num_inputs;
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(j, ins)| ins.iter().map(move |&(op, src)| (src, j + base, op)))
            .collect()
    }

    /// The op on each edge of the space's topology, `None` for edges the
    /// genotype does not keep.
    pub fn edge_ops(&self) -> Vec<Option<OpKind>> {
        let topo = self.space.topology();
        let mut out = vec![None; topo.edges.len()];
        for (src, dst, op) in self.edges() {
            if let Some(e) = topo.edge_index(src, dst) {
                out[e] = Some(op);
            }
        }
        out
    }

    pub fn count(&self, op: OpKind) -> usize {
        self.edges().iter().filter(|e| e.2 == op).count()
    }

    /// Fraction of kept edges that are skip connections.
    pub fn skip_fraction(&self) -> f64 {
        let edges = self.edges();
        self.count(OpKind::Skip) as f64 / edges.len().max(1) as f64
    }

    /// Parses the canonical `|op~src|…+|…|` form; the space follows from
    /// the number of node segments (2 micro, 3 nb201, 4 darts).
    pub fn parse(s: &str) -> Result<Self> {
        let nodes = parse_segments(s)?;
        let space = match nodes.len() {
            2 => SpaceId::Micro,
            3 => SpaceId::Nb201,
            4 => SpaceId::Darts,
            n => {
                return Err(Error::GenotypeParse {
                    offset: 0,
                    msg: format!("{n} node segments match no space"),
                })
            }
        };
        let g = Genotype { space, nodes };
        g.validate(s)?;
        Ok(g)
    }

    /// Parses and additionally requires membership in `space`.
    pub fn parse_in(space: SpaceId, s: &str) -> Result<Self> {
        let g = Genotype::parse(s)?;
        if g.space != space {
            return Err(Error::SpaceMismatch {
                genotype: s.to_string(),
                space: space.name().to_string(),
            });
        }
        Ok(g)
    }

    fn validate(&self, text: &str) -> Result<()> {
        let topo = self.space.topology();
        let mismatch = || Error::SpaceMismatch {
            genotype: text.to_string(),
            space: self.space.name().to_string(),
        };
        for (j, ins) in self.nodes.iter().enumerate() {
            let dst = j + topo.num_inputs;
            let expected: Vec<usize> = topo.incoming(dst).map(|(_, s)| s).collect();
            let srcs: Vec<usize> = ins.iter().map(|e| e.1).collect();
            let ok = match self.space {
                SpaceId::Darts => srcs.len() == 2 && srcs[0] < srcs[1] && srcs[1] < dst,
                _ => srcs == expected,
            };
            if !ok || ins.iter().any(|(op, _)| self.space.op_index(*op).is_none()) {
                return Err(mismatch());
            }
        }
        Ok(())
    }
}

fn parse_segments(s: &str) -> Result<Vec<Vec<(OpKind, usize)>>> {
    let err = |offset: usize, msg: &str| Error::GenotypeParse {
        offset,
        msg: msg.to_string(),
    };
    let mut nodes = Vec::new();
    let mut offset = 0;
    for seg in s.split('+') {
        if seg.len() < 2 || !seg.starts_with('|') || !seg.ends_with('|') {
            return Err(err(offset, "node segment must be delimited by `|`"));
        }
        let mut entries = Vec::new();
        let mut pos = offset + 1;
        for item in seg[1..seg.len() - 1].split('|') {
            let Some((op, src)) = item.split_once('~') else {
                return Err(err(pos, "expected `op~src`"));
            };
            let op: OpKind = op.parse().map_err(|_| err(pos, &format!("unknown operation `{op}`")))?;
            let src_off = pos + item.find('~').unwrap_or(0) + 1;
            if src.is_empty() || !src.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err(src_off, "source must be a node index"));
            }
            let src: usize = src.parse().map_err(|_| err(src_off, "source index overflows"))?;
            entries.push((op, src));
            pos += item.len() + 1;
        }
        nodes.push(entries);
        offset += seg.len() + 1;
    }
    Ok(nodes)
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (j, ins) in self.nodes.iter().enumerate() {
            if j > 0 {
                f.write_str("+")?;
            }
            f.write_str("|")?;
            for (op, src) in ins {
                write!(f, "{op}~{src}|")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Genotype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Genotype::parse(s)
    }
}

/// Architecture logits: one row per edge, one column per candidate op.
#[derive(Clone, Debug)]
pub struct AlphaTable {
    pub space: SpaceId,
    pub param: Parameter,
}

impl AlphaTable {
    /// I.i.d. `N(0, ALPHA_INIT_STD²)` logits.
    pub fn new(space: SpaceId, seed: u64) -> Self {
        let (e, o) = (space.topology().edges.len(), space.ops().len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, ALPHA_INIT_STD).expect("finite std");
        let data = (0..e * o).map(|_| normal.sample(&mut rng)).collect();
        AlphaTable::from_logits(space, data).expect("sized by construction")
    }

    pub fn from_logits(space: SpaceId, logits: Vec<f64>) -> Result<Self> {
        let (e, o) = (space.topology().edges.len(), space.ops().len());
        let tensor = Tensor::new(&[e, o], logits)?;
        Ok(AlphaTable {
            space,
            param: Parameter::new("alpha", tensor, ParamKind::ArchAlpha),
        })
    }

    pub fn zeros(space: SpaceId) -> Self {
        let (e, o) = (space.topology().edges.len(), space.ops().len());
        AlphaTable::from_logits(space, vec![0.0; e * o]).expect("sized by construction")
    }

    pub fn num_edges(&self) -> usize {
        self.param.tensor.shape()[0]
    }

    pub fn num_ops(&self) -> usize {
        self.param.tensor.shape()[1]
    }

    pub fn row(&self, edge: usize) -> &[f64] {
        let o = self.num_ops();
        &self.param.tensor.data()[edge * o..(edge + 1) * o]
    }

    pub fn row_mut(&mut self, edge: usize) -> &mut [f64] {
        let o = self.num_ops();
        &mut self.param.tensor.data_mut()[edge * o..(edge + 1) * o]
    }

    pub fn softmax(&self) -> Vec<Vec<f64>> {
        (0..self.num_edges())
            .map(|e| {
                let mut r = self.row(e).to_vec();
                softmax_in_place(&mut r);
                r
            })
            .collect()
    }

    /// Product over edges of the softmax weight of the genotype's op.
    pub fn score(&self, g: &Genotype) -> f64 {
        let w = self.softmax();
        g.edge_ops()
            .iter()
            .enumerate()
            .filter_map(|(e, op)| op.map(|op| (e, op)))
            .map(|(e, op)| self.space.op_index(op).map_or(0.0, |i| w[e][i]))
            .product()
    }
}

fn first_argmax(xs: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in xs {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Discretizes `alpha`. Complete-DAG spaces take the per-edge argmax
/// (`include_none` controls whether `none` may win); the DARTS space keeps,
/// per node, the two incoming edges whose best non-none weight is largest.
/// Ties go to the lowest op index, then the lowest source.
pub fn derive_genotype(alpha: &AlphaTable, include_none: bool) -> Genotype {
    let space = alpha.space;
    let ops = space.ops();
    let weights = alpha.softmax();
    let topo = space.topology();
    let best_op = |e: usize, allow_none: bool| {
        first_argmax(
            weights[e]
                .iter()
                .copied()
                .enumerate()
                .filter(|&(i, _)| allow_none || ops[i] != OpKind::None),
        )
        .expect("op set has a non-none op")
    };
    match space {
        SpaceId::Darts => {
            let nodes = (topo.num_inputs..topo.num_nodes)
                .map(|dst| {
                    let mut cands: Vec<(usize, usize, f64)> = topo
                        .incoming(dst)
                        .map(|(e, src)| {
                            let (i, w) = best_op(e, false);
                            (src, i, w)
                        })
                        .collect();
                    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
                    let mut kept: Vec<(OpKind, usize)> = cands[..2].iter().map(|&(s, i, _)| (ops[i], s)).collect();
                    kept.sort_by_key(|e| e.1);
                    kept
                })
                .collect();
            Genotype { space, nodes }
        }
        _ => {
            let chosen: Vec<OpKind> = (0..topo.edges.len()).map(|e| ops[best_op(e, include_none).0]).collect();
            Genotype::from_edge_ops(space, &chosen).expect("ops drawn from the space")
        }
    }
}

/// All genotypes of an enumerable space in lexicographic op-index order
/// (last edge varies fastest).
pub fn enumerate_space(space: SpaceId) -> Result<impl Iterator<Item = Genotype>> {
    if !space.is_enumerable() {
        return Err(Error::UnsupportedSpace(space.name().to_string()));
    }
    let ops = space.ops();
    let e = space.topology().edges.len();
    let total = ops.len().pow(e as u32);
    Ok((0..total).map(move |mut idx| {
        let mut chosen = vec![OpKind::None; e];
        for slot in chosen.iter_mut().rev() {
            *slot = ops[idx % ops.len()];
            idx /= ops.len();
        }
        Genotype::from_edge_ops(space, &chosen).expect("ops drawn from the space")
    }))
}

pub fn space_size(space: SpaceId) -> Result<usize> {
    if !space.is_enumerable() {
        return Err(Error::UnsupportedSpace(space.name().to_string()));
    }
    Ok(space.ops().len().pow(space.topology().edges.len() as u32))
}

/// `Σ_o softmax(α[edge])_o · outputs[o]`, where `None` outputs (the `none`
/// op) contribute exact zeros. `zero_shape` sizes the result when every op
/// is `none`.
pub fn mixed_op(
    graph: &mut Graph,
    outputs: &[Option<Var>],
    alpha: Var,
    edge: usize,
    zero_shape: &[usize],
) -> Result<Var> {
    let ncols = graph.shape(alpha).get(1).copied().unwrap_or(0);
    if outputs.len() != ncols {
        return Err(Error::Shape {
            op: "mixed_op",
            lhs: vec![outputs.len()],
            rhs: graph.shape(alpha).to_vec(),
        });
    }
    let row = graph.slice_row(alpha, edge)?;
    let weights = graph.softmax(row)?;
    let (xs, slots): (Vec<Var>, Vec<usize>) = outputs
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.map(|v| (v, i)))
        .unzip();
    if xs.is_empty() {
        return Ok(graph.constant(Tensor::zeros(zero_shape)));
    }
    graph.weighted_sum(&xs, weights, &slots)
}
