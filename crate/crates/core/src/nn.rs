//! Layers, parameters and initializers.
//!
//! Every layer is a [`Function`] recorded on the caller's [`Graph`]. Layers
//! that own weights ([`Conv2d`], [`BatchNorm2d`], [`Linear`]) keep them in
//! [`Parameter`]s and bind them to the graph through [`Ctx::param`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, gemm_nn, softmax_in_place, Function, Gradients, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

// ---------------------------------------------------------------------------
// Parameters

/// What a parameter is, which decides whether a training option updates it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    ConvWeight,
    BnGamma,
    BnBeta,
    Classifier,
    ArchAlpha,
    /// Trainable residual coefficient of the diagnostic networks.
    SkipLambda,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] = [
        ParamKind::ConvWeight,
        ParamKind::BnGamma,
        ParamKind::BnBeta,
        ParamKind::Classifier,
        ParamKind::ArchAlpha,
        ParamKind::SkipLambda,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv-weight",
            ParamKind::BnGamma => "bn-gamma",
            ParamKind::BnBeta => "bn-beta",
            ParamKind::Classifier => "classifier",
            ParamKind::ArchAlpha => "arch-alpha",
            ParamKind::SkipLambda => "skip-lambda",
        }
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

/// A named leaf tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            kind,
            frozen: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn zero_grad(&mut self) {
        self.tensor.zero_grad();
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

// ---------------------------------------------------------------------------
// Forward context

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which non-frozen parameters become gradient-requiring leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    /// Everything except architecture parameters.
    Weights,
    /// Architecture parameters only.
    Arch,
    All,
    Nothing,
}

impl GradScope {
    fn includes(self, kind: ParamKind) -> bool {
        match self {
            GradScope::Weights => kind != ParamKind::ArchAlpha,
            GradScope::Arch => kind == ParamKind::ArchAlpha,
            GradScope::All => true,
            GradScope::Nothing => false,
        }
    }
}

/// One forward pass: a fresh graph plus the mode flags layers consult.
pub struct Ctx {
    pub graph: Graph,
    pub mode: Mode,
    pub scope: GradScope,
}

impl Ctx {
    pub fn new(mode: Mode, scope: GradScope) -> Self {
        Ctx {
            graph: Graph::new(),
            mode,
            scope,
        }
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Binds a parameter as a leaf of this graph (once per graph).
    pub fn param(&mut self, p: &mut Parameter) -> Var {
        if let Some(v) = p.tensor.node_id {
            if v.graph_id() == self.graph.id() {
                return v;
            }
        }
        let mut t = Tensor::from_parts(p.tensor.shape().to_vec(), p.tensor.data().to_vec());
        t.requires_grad = !p.frozen && self.scope.includes(p.kind);
        let v = self.graph.leaf(t);
        p.tensor.node_id = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Adds the gradients of bound, gradient-requiring parameters into
    /// their `grad` slots.
    pub fn accumulate<'a>(&self, grads: &Gradients, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            let Some(v) = p.tensor.node_id else { continue };
            if v.graph_id() != self.graph.id() || !self.graph.requires_grad(v) {
                continue;
            }
            let g = grads.get_or_zero(v);
            p.tensor.accumulate_grad(&g);
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// `N(0, 2 / fan_in)`.
    KaimingNormal,
    /// `U(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    /// `γ = 1`, `β = 0`.
    BnDefault,
}

/// `(fan_in, fan_out)` of a weight laid out as `(out, in, k, k)` or `(out, in)`.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    let receptive: usize = shape.iter().skip(2).product();
    let fan_in = shape.get(1).copied().unwrap_or(1) * receptive;
    let fan_out = shape[0] * receptive;
    (fan_in, fan_out)
}

pub fn init_param<R: Rng + ?Sized>(p: &mut Parameter, scheme: InitScheme, rng: &mut R) -> Result<()> {
    let weight_kind = matches!(p.kind, ParamKind::ConvWeight | ParamKind::Classifier);
    match scheme {
        InitScheme::KaimingNormal | InitScheme::XavierUniform if !weight_kind => Err(Error::invalid(
            "init_param",
            format!("{scheme:?} cannot initialize {} `{}`", p.kind, p.name),
        )),
        InitScheme::KaimingNormal => {
            let (fan_in, _) = fans(p.tensor.shape());
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            p.tensor.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
            Ok(())
        }
        InitScheme::XavierUniform => {
            let (fan_in, fan_out) = fans(p.tensor.shape());
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let uniform = Uniform::new_inclusive(-a, a).expect("finite bound");
            p.tensor.data_mut().iter_mut().for_each(|v| *v = uniform.sample(rng));
            Ok(())
        }
        InitScheme::BnDefault => {
            let value = match p.kind {
                ParamKind::BnGamma => 1.0,
                ParamKind::BnBeta => 0.0,
                _ => {
                    return Err(Error::invalid(
                        "init_param",
                        format!("bn-default cannot initialize {} `{}`", p.kind, p.name),
                    ))
                }
            };
            p.tensor.data_mut().iter_mut().for_each(|v| *v = value);
            Ok(())
        }
    }
}

/// [`init_param`] with a private RNG seeded from `seed`.
pub fn init_param_seeded(p: &mut Parameter, scheme: InitScheme, seed: u64) -> Result<()> {
    init_param(p, scheme, &mut ChaCha8Rng::seed_from_u64(seed))
}

// ---------------------------------------------------------------------------
// Convolution

/// Geometry of a bias-free 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Shape-preserving (at stride 1) convolution: padding `k / 2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel / 2);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn num_weights(&self) -> usize {
        self.weight_shape().iter().product()
    }

    fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.out_channels > 0
            && self.kernel > 0
            && (self.stride == 1 || self.stride == 2)
            && self.dilation > 0
            && self.groups > 0
            && self.in_channels % self.groups == 0
            && self.out_channels % self.groups == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("conv2d", format!("invalid spec {self:?}")))
        }
    }

    /// Output extent along one spatial axis (floor division, as in common
    /// frameworks); errors when no full window fits.
    pub fn out_dim(&self, size: usize) -> Result<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = size + 2 * self.padding;
        if padded < span {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "input extent {size} too small for kernel span {span} with padding {}",
                    self.padding
                ),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }
    fn kg(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn plane(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unrolls the receptive fields of sample `n`, group `g` into
    /// `cols: (kg, ho*wo)`.
    fn im2col(&self, x: &[f64], n: usize, g: usize, cols: &mut [f64]) {
        let (k, p) = (self.k, self.plane());
        for ci in 0..self.cin_g() {
            let chan = &x[((n * self.c_in) + g * self.cin_g() + ci) * self.h * self.w..][..self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((ci * k + ki) * k + kj) * p..][..p];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki * self.dil) as isize - self.pad as isize;
                        let dst = &mut row[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &chan[ih as usize * self.w..][..self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj * self.dil) as isize - self.pad as isize;
                            *d = if iw < 0 || iw >= self.w as isize {
                                0.0
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], n: usize, g: usize, dx: &mut [f64]) {
        let (k, p) = (self.k, self.plane());
        for ci in 0..self.cin_g() {
            let chan = &mut dx[((n * self.c_in) + g * self.cin_g() + ci) * self.h * self.w..][..self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((ci * k + ki) * k + kj) * p..][..p];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki * self.dil) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut chan[ih as usize * self.w..][..self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj * self.dil) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += row[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dFn {
    geom: ConvGeom,
}

impl Function for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let geo = self.geom;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (kg, p, cog, cig) = (geo.kg(), geo.plane(), geo.cout_g(), geo.cin_g());
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        let mut cols = vec![0.0; kg * p];
        let mut dcols = vec![0.0; kg * p];
        for n in 0..geo.n {
            for grp in 0..geo.groups {
                let gout = &g[(n * geo.c_out + grp * cog) * p..][..cog * p];
                let wg = &w[grp * cog * kg..][..cog * kg];
                if let Some(dw) = dw.as_mut() {
                    let src: &[f64] = if geo.is_pointwise() {
                        &x[(n * geo.c_in + grp * cig) * p..][..kg * p]
                    } else {
                        geo.im2col(x, n, grp, &mut cols);
                        &cols
                    };
                    let dwg = &mut dw[grp * cog * kg..][..cog * kg];
                    for co in 0..cog {
                        let grow = &gout[co * p..(co + 1) * p];
                        for kk in 0..kg {
                            dwg[co * kg + kk] += dot(grow, &src[kk * p..(kk + 1) * p]);
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    if geo.is_pointwise() {
                        let dst = &mut dx[(n * geo.c_in + grp * cig) * p..][..kg * p];
                        for co in 0..cog {
                            for kk in 0..kg {
                                axpy(
                                    wg[co * kg + kk],
                                    &gout[co * p..(co + 1) * p],
                                    &mut dst[kk * p..(kk + 1) * p],
                                );
                            }
                        }
                    } else {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        for co in 0..cog {
                            for kk in 0..kg {
                                axpy(
                                    wg[co * kg + kk],
                                    &gout[co * p..(co + 1) * p],
                                    &mut dcols[kk * p..(kk + 1) * p],
                                );
                            }
                        }
                        geo.col2im(&dcols, n, grp, dx);
                    }
                }
            }
        }
        vec![dx, dw]
    }
}

/// Bias-free 2-D convolution of an NCHW tensor.
pub fn conv2d(graph: &mut Graph, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
    spec.validate()?;
    let xs = graph.shape(x).to_vec();
    let ws = graph.shape(w).to_vec();
    if xs.len() != 4 || xs[1] != spec.in_channels {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: xs,
            rhs: ws,
        });
    }
    if ws != spec.weight_shape() {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: spec.weight_shape().to_vec(),
            rhs: ws,
        });
    }
    let geom = ConvGeom {
        n: xs[0],
        c_in: xs[1],
        h: xs[2],
        w: xs[3],
        c_out: spec.out_channels,
        ho: spec.out_dim(xs[2])?,
        wo: spec.out_dim(xs[3])?,
        k: spec.kernel,
        stride: spec.stride,
        pad: spec.padding,
        dil: spec.dilation,
        groups: spec.groups,
    };
    let (kg, p, cog, cig) = (geom.kg(), geom.plane(), geom.cout_g(), geom.cin_g());
    let xd = graph.value(x).data();
    let wd = graph.value(w).data();
    let mut out = vec![0.0; geom.n * geom.c_out * p];
    let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { kg * p }];
    for n in 0..geom.n {
        for grp in 0..geom.groups {
            let src: &[f64] = if geom.is_pointwise() {
                &xd[(n * geom.c_in + grp * cig) * p..][..kg * p]
            } else {
                geom.im2col(xd, n, grp, &mut cols);
                &cols
            };
            let dst = &mut out[(n * geom.c_out + grp * cog) * p..][..cog * p];
            gemm_nn(cog, kg, p, &wd[grp * cog * kg..][..cog * kg], src, dst);
        }
    }
    let t = Tensor::from_parts(vec![geom.n, geom.c_out, geom.ho, geom.wo], out);
    graph.apply(Conv2dFn { geom }, &[x, w], t)
}

/// A convolution layer that remembers its initial weights.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Parameter,
    pub init_weight: Vec<f64>,
}

impl Conv2d {
    /// Kaiming-normal initialized convolution.
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, spec: ConvSpec, rng: &mut R) -> Self {
        let mut weight = Parameter::new(name, Tensor::zeros(&spec.weight_shape()), ParamKind::ConvWeight);
        init_param(&mut weight, InitScheme::KaimingNormal, rng).expect("conv weight accepts kaiming");
        let init_weight = weight.tensor.data().to_vec();
        Conv2d {
            spec,
            weight,
            init_weight,
        }
    }

    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&mut self.weight);
        conv2d(&mut ctx.graph, x, w, &self.spec)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight]
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

struct BatchNormTrainFn {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    n: usize,
    c: usize,
    plane: usize,
}

impl Function for BatchNormTrainFn {
    fn name(&self) -> &'static str {
        "batchnorm2d_train"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let m = (self.n * self.plane) as f64;
        let mut sum_g = vec![0.0; self.c];
        let mut sum_gx = vec![0.0; self.c];
        for n in 0..self.n {
            for c in 0..self.c {
                let s = (n * self.c + c) * self.plane..(n * self.c + c + 1) * self.plane;
                sum_g[c] += g[s.clone()].iter().sum::<f64>();
                sum_gx[c] += dot(&g[s.clone()], &self.xhat[s]);
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            for n in 0..self.n {
                for c in 0..self.c {
                    let scale = gamma[c] * self.inv_std[c] / m;
                    let s = (n * self.c + c) * self.plane..(n * self.c + c + 1) * self.plane;
                    for i in s {
                        dx[i] = scale * (m * g[i] - sum_g[c] - self.xhat[i] * sum_gx[c]);
                    }
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }
}

struct BatchNormEvalFn {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    n: usize,
    c: usize,
    plane: usize,
}

impl Function for BatchNormEvalFn {
    fn name(&self) -> &'static str {
        "batchnorm2d_eval"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let gamma = inputs[1].data();
        let mut dx = needs[0].then(|| vec![0.0; g.len()]);
        let mut dgamma = vec![0.0; self.c];
        let mut dbeta = vec![0.0; self.c];
        for n in 0..self.n {
            for c in 0..self.c {
                let s = (n * self.c + c) * self.plane..(n * self.c + c + 1) * self.plane;
                for i in s {
                    dbeta[c] += g[i];
                    dgamma[c] += g[i] * (x[i] - self.mean[c]) * self.inv_std[c];
                    if let Some(dx) = dx.as_mut() {
                        dx[i] = g[i] * gamma[c] * self.inv_std[c];
                    }
                }
            }
        }
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

fn nchw(graph: &Graph, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
    match *graph.shape(x) {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape {
            op,
            lhs: graph.shape(x).to_vec(),
            rhs: vec![],
        }),
    }
}

fn check_channels(graph: &Graph, op: &'static str, x: Var, c: usize, params: &[Var]) -> Result<()> {
    for &p in params {
        if graph.value(p).numel() != c {
            return Err(Error::Shape {
                op,
                lhs: graph.shape(x).to_vec(),
                rhs: graph.shape(p).to_vec(),
            });
        }
    }
    Ok(())
}

/// Train-mode batch normalization with biased batch variance. Returns the
/// output and the per-channel batch `(mean, variance)`.
pub fn batch_norm_train(
    graph: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = nchw(graph, "batchnorm2d", x)?;
    check_channels(graph, "batchnorm2d", x, c, &[gamma, beta])?;
    let plane = h * w;
    if n * plane < 2 {
        return Err(Error::invalid(
            "batchnorm2d",
            format!("train mode needs N·H·W ≥ 2, got {}", n * plane),
        ));
    }
    let xd = graph.value(x).data();
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            mean[ch] += xd[(s * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for s in 0..n {
        for ch in 0..c {
            let mu = mean[ch];
            var[ch] += xd[(s * c + ch) * plane..][..plane]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (gd, bd) = (graph.value(gamma).data(), graph.value(beta).data());
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
    }
    let t = Tensor::from_parts(vec![n, c, h, w], out);
    let y = graph.apply(
        BatchNormTrainFn {
            xhat,
            inv_std,
            n,
            c,
            plane,
        },
        &[x, gamma, beta],
        t,
    )?;
    Ok((y, mean, var))
}

/// Eval-mode batch normalization with fixed statistics.
pub fn batch_norm_eval(
    graph: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Var> {
    let (n, c, h, w) = nchw(graph, "batchnorm2d", x)?;
    check_channels(graph, "batchnorm2d", x, c, &[gamma, beta])?;
    if mean.len() != c || var.len() != c {
        return Err(Error::Shape {
            op: "batchnorm2d",
            lhs: graph.shape(x).to_vec(),
            rhs: vec![mean.len(), var.len()],
        });
    }
    let plane = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xd = graph.value(x).data();
    let (gd, bd) = (graph.value(gamma).data(), graph.value(beta).data());
    let mut out = vec![0.0; xd.len()];
    for s in 0..n {
        for ch in 0..c {
            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                out[i] = (xd[i] - mean[ch]) * inv_std[ch] * gd[ch] + bd[ch];
            }
        }
    }
    let t = Tensor::from_parts(vec![n, c, h, w], out);
    graph.apply(
        BatchNormEvalFn {
            mean: mean.to_vec(),
            inv_std,
            n,
            c,
            plane,
        },
        &[x, gamma, beta],
        t,
    )
}

/// Batch normalization layer: affine `γ`, `β` plus running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::BnGamma),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::BnBeta),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes with batch statistics (updating the running ones) in
    /// train mode, with running statistics in eval mode.
    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(&mut self.gamma);
        let beta = ctx.param(&mut self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, mean, var) = batch_norm_train(&mut ctx.graph, x, gamma, beta, self.eps)?;
                let m = self.momentum;
                for c in 0..self.channels() {
                    self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
                    self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
                }
                Ok(y)
            }
            Mode::Eval => batch_norm_eval(
                &mut ctx.graph,
                x,
                gamma,
                beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
        }
    }
}

impl Module for BatchNorm2d {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

// ---------------------------------------------------------------------------
// Activations, pooling, classifier, loss

struct ReluFn;

impl Function for ReluFn {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(
            g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
        )]
    }
}

pub fn relu(graph: &mut Graph, x: Var) -> Result<Var> {
    let t = graph.value(x);
    let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect());
    graph.apply(ReluFn, &[x], out)
}

#[derive(Clone, Copy)]
struct PoolGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl PoolGeom {
    fn new(graph: &Graph, x: Var, k: usize, stride: usize, pad: usize, op: &'static str) -> Result<Self> {
        let (n, c, h, w) = nchw(graph, op, x)?;
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid(
                op,
                format!("window {k} stride {stride} pad {pad} on {h}x{w}"),
            ));
        }
        Ok(PoolGeom {
            n,
            c,
            h,
            w,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
            k,
            stride,
            pad,
        })
    }

    /// Calls `f(out_index, in_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        for nc in 0..self.n * self.c {
            for oh in 0..self.ho {
                for ow in 0..self.wo {
                    let o = (nc * self.ho + oh) * self.wo + ow;
                    for ki in 0..self.k {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        for kj in 0..self.k {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw < 0 || iw >= self.w as isize {
                                continue;
                            }
                            f(o, (nc * self.h + ih as usize) * self.w + iw as usize);
                        }
                    }
                }
            }
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.ho, self.wo]
    }
}

struct AvgPoolFn {
    geom: PoolGeom,
    in_len: usize,
}

impl Function for AvgPoolFn {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let norm = 1.0 / (self.geom.k * self.geom.k) as f64;
        let mut dx = vec![0.0; self.in_len];
        self.geom.for_each_tap(|o, i| dx[i] += g[o] * norm);
        vec![Some(dx)]
    }
}

/// Average pooling that counts padded zeros in the denominator.
pub fn avg_pool2d(graph: &mut Graph, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
    let geom = PoolGeom::new(graph, x, k, stride, pad, "avg_pool2d")?;
    let xd = graph.value(x).data();
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; geom.n * geom.c * geom.ho * geom.wo];
    geom.for_each_tap(|o, i| out[o] += xd[i] * norm);
    let in_len = xd.len();
    let t = Tensor::from_parts(geom.out_shape(), out);
    graph.apply(AvgPoolFn { geom, in_len }, &[x], t)
}

struct MaxPoolFn {
    argmax: Vec<usize>,
    in_len: usize,
}

impl Function for MaxPoolFn {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.in_len];
        for (o, &i) in self.argmax.iter().enumerate() {
            dx[i] += g[o];
        }
        vec![Some(dx)]
    }
}

/// Max pooling; padded positions never win.
pub fn max_pool2d(graph: &mut Graph, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
    let geom = PoolGeom::new(graph, x, k, stride, pad, "max_pool2d")?;
    let xd = graph.value(x).data();
    let len = geom.n * geom.c * geom.ho * geom.wo;
    let mut out = vec![f64::NEG_INFINITY; len];
    let mut argmax = vec![usize::MAX; len];
    geom.for_each_tap(|o, i| {
        if argmax[o] == usize::MAX || xd[i] > out[o] {
            out[o] = xd[i];
            argmax[o] = i;
        }
    });
    let in_len = xd.len();
    let t = Tensor::from_parts(geom.out_shape(), out);
    graph.apply(MaxPoolFn { argmax, in_len }, &[x], t)
}

struct GlobalAvgPoolFn {
    plane: usize,
}

impl Function for GlobalAvgPoolFn {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let norm = 1.0 / self.plane as f64;
        vec![Some(
            g.iter()
                .flat_map(|&v| std::iter::repeat_n(v * norm, self.plane))
                .collect(),
        )]
    }
}

/// `(N, C, H, W) → (N, C)`.
pub fn global_avg_pool(graph: &mut Graph, x: Var) -> Result<Var> {
    let (n, c, h, w) = nchw(graph, "global_avg_pool", x)?;
    let plane = h * w;
    let xd = graph.value(x).data();
    let out = xd.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
    graph.apply(GlobalAvgPoolFn { plane }, &[x], Tensor::from_parts(vec![n, c], out))
}

struct LinearFn {
    n: usize,
    f: usize,
    k: usize,
}

impl Function for LinearFn {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (n, f, k) = (self.n, self.f, self.k);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n * f];
            for s in 0..n {
                for j in 0..k {
                    axpy(g[s * k + j], &w[j * f..(j + 1) * f], &mut dx[s * f..(s + 1) * f]);
                }
            }
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; k * f];
            for s in 0..n {
                for j in 0..k {
                    axpy(g[s * k + j], &x[s * f..(s + 1) * f], &mut dw[j * f..(j + 1) * f]);
                }
            }
            dw
        });
        vec![dx, dw]
    }
}

/// Bias-free `x · wᵀ` with `x: (N, F)` and `w: (K, F)`.
pub fn linear(graph: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let (xs, ws) = (graph.shape(x).to_vec(), graph.shape(w).to_vec());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::Shape {
            op: "linear",
            lhs: xs,
            rhs: ws,
        });
    }
    let (n, f, k) = (xs[0], xs[1], ws[0]);
    let (xd, wd) = (graph.value(x).data(), graph.value(w).data());
    let mut out = vec![0.0; n * k];
    for s in 0..n {
        for j in 0..k {
            out[s * k + j] = dot(&xd[s * f..(s + 1) * f], &wd[j * f..(j + 1) * f]);
        }
    }
    graph.apply(LinearFn { n, f, k }, &[x, w], Tensor::from_parts(vec![n, k], out))
}

/// Bias-free classifier head.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let mut weight = Parameter::new(name, Tensor::zeros(&[out_features, in_features]), ParamKind::Classifier);
        init_param(&mut weight, InitScheme::XavierUniform, rng).expect("classifier accepts xavier");
        Linear { weight }
    }

    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(&mut self.weight);
        linear(&mut ctx.graph, x, w)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight]
    }
}

struct CrossEntropyFn {
    probs: Vec<f64>,
    labels: Vec<usize>,
    k: usize,
}

impl Function for CrossEntropyFn {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn backward(&self, g: &[f64], _: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let scale = g[0] / self.labels.len() as f64;
        let mut d: Vec<f64> = self.probs.iter().map(|p| p * scale).collect();
        for (s, &y) in self.labels.iter().enumerate() {
            d[s * self.k + y] -= scale;
        }
        vec![Some(d)]
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn softmax_cross_entropy(graph: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = graph.shape(logits).to_vec();
    let [n, k] = shape[..] else {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    };
    if n != labels.len() {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let mut probs = graph.value(logits).data().to_vec();
    let mut loss = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        let row = &mut probs[s * k..(s + 1) * k];
        softmax_in_place(row);
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
    }
    loss /= n as f64;
    graph.apply(
        CrossEntropyFn {
            probs,
            labels: labels.to_vec(),
            k,
        },
        &[logits],
        Tensor::scalar(loss),
    )
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
