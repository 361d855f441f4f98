//! One line per acceptance criterion; exits nonzero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,3,8` restricts the run to the listed criteria.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;

use rfdarts::data::{
    generate_synth, load_cifar10_bin, Batch, Dataset, SynthSpec, CIFAR_FILE_BYTES, CIFAR_RECORD, CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
};
use rfdarts::diagnostics::{
    compute_eta, grad_variance_probe, mean_eta, run_lambda_experiment, run_plain_depth_experiment, write_depth_csv,
    write_lambda_csv, DeepNet, DeepNetConfig, DepthCurve, DiagConfig, DiagMode,
};
use rfdarts::nn::{
    avg_pool2d, batch_norm_eval, batch_norm_train, conv2d, global_avg_pool, init_param, linear, max_pool2d, relu,
    softmax_cross_entropy, ConvSpec, Ctx, GradScope, InitScheme, Mode, Module, ParamKind, Parameter,
};
use rfdarts::optim::TrainOption;
use rfdarts::oracle::{build_oracle, score_search, OracleConfig};
use rfdarts::search::{run_search, SearchConfig, SgdConfig};
use rfdarts::space::{derive_genotype, mixed_op, AlphaTable, Genotype, SpaceId};
use rfdarts::supernet::{build_supernet, NetConfig};
use rfdarts::tensor::{finite_diff_check_many, Graph, PrimitiveKind, Tensor, Var};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Res<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn project(g: &mut Graph, y: Var, seed: u64) -> rfdarts::Result<Var> {
    let r = g.constant(normal(&g.shape(y).to_vec(), seed));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn synth(classes: usize, per_class: usize, test_per_class: usize, image: usize, noise: f64) -> (Dataset, Dataset) {
    generate_synth(&SynthSpec {
        num_classes: classes,
        train_per_class: per_class,
        test_per_class,
        image_size: image,
        noise,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn micro_net(option: TrainOption) -> NetConfig {
    NetConfig {
        space: SpaceId::Micro,
        cells_per_stage: 1,
        init_channels: 4,
        num_classes: 4,
        image_size: 8,
        in_channels: 3,
        option,
    }
}

// ---------------------------------------------------------------------------
// 1

fn gradient_fidelity() -> Res<Verdict> {
    const EPS: f64 = 1e-6;
    let mut layer: f64 = 0.0;
    let mut check = |name: &str, f: &dyn Fn(&mut Graph, &[Var]) -> rfdarts::Result<Var>, xs: Vec<Tensor>| -> Res<()> {
        assert!(
            xs.iter().map(Tensor::numel).sum::<usize>() <= 1000,
            "{name} input too large"
        );
        let err = finite_diff_check_many(f, &xs, EPS)?;
        if err >= 1e-6 {
            println!("    {name}: {err:.2e}");
        }
        layer = layer.max(err);
        Ok(())
    };

    for (i, &kind) in PrimitiveKind::ALL.iter().enumerate() {
        let s = 10 * i as u64;
        let xs = match kind {
            PrimitiveKind::Add | PrimitiveKind::Sub | PrimitiveKind::MulElementwise => {
                vec![normal(&[3, 4], s), normal(&[3, 4], s + 1)]
            }
            PrimitiveKind::ScalarMul => vec![normal(&[2, 5], s), normal(&[1], s + 1)],
            PrimitiveKind::Matmul => vec![normal(&[3, 4], s), normal(&[4, 2], s + 1)],
            PrimitiveKind::ConcatChannels => vec![normal(&[2, 1, 2, 2], s), normal(&[2, 3, 2, 2], s + 1)],
            PrimitiveKind::MaxOverAxis | PrimitiveKind::Transpose2d => vec![normal(&[4, 5], s)],
            _ => vec![normal(&[2, 3, 4], s)],
        };
        check(
            &format!("{kind:?}"),
            &|g, v| {
                let y = g.primitive(kind, v)?;
                project(g, y, s + 7)
            },
            xs,
        )?;
    }

    let specs = [
        ConvSpec::same(3, 4, 3, 1),
        ConvSpec::same(4, 4, 3, 2),
        ConvSpec::same(4, 4, 1, 1),
        ConvSpec::same(4, 4, 3, 1).with_dilation(2),
        ConvSpec::same(4, 4, 3, 1).with_groups(4),
    ];
    for (i, spec) in specs.iter().enumerate() {
        let [o, ci, k, _] = spec.weight_shape();
        let s = 100 + i as u64;
        check(
            &format!("conv2d {spec:?}"),
            &|g, v| {
                let y = conv2d(g, v[0], v[1], spec)?;
                project(g, y, s)
            },
            vec![normal(&[2, spec.in_channels, 5, 5], s), normal(&[o, ci, k, k], s + 1)],
        )?;
    }

    let bn_inputs = || vec![normal(&[3, 2, 3, 3], 200), normal(&[2], 201), normal(&[2], 202)];
    check(
        "batchnorm train",
        &|g, v| {
            let (y, _, _) = batch_norm_train(g, v[0], v[1], v[2], 1e-5)?;
            project(g, y, 203)
        },
        bn_inputs(),
    )?;
    check(
        "batchnorm eval",
        &|g, v| {
            let y = batch_norm_eval(g, v[0], v[1], v[2], &[0.3, -0.2], &[1.5, 0.7], 1e-5)?;
            project(g, y, 204)
        },
        bn_inputs(),
    )?;
    check(
        "avg pool",
        &|g, v| {
            let y = avg_pool2d(g, v[0], 3, 1, 1)?;
            project(g, y, 205)
        },
        vec![normal(&[2, 2, 5, 5], 206)],
    )?;
    check(
        "max pool",
        &|g, v| {
            let y = max_pool2d(g, v[0], 3, 2, 1)?;
            project(g, y, 207)
        },
        vec![normal(&[2, 2, 5, 5], 208)],
    )?;
    check(
        "global avg pool",
        &|g, v| {
            let y = global_avg_pool(g, v[0])?;
            project(g, y, 209)
        },
        vec![normal(&[2, 3, 4, 4], 210)],
    )?;
    check(
        "relu",
        &|g, v| {
            let y = relu(g, v[0])?;
            project(g, y, 211)
        },
        vec![normal(&[4, 6], 212)],
    )?;
    check(
        "linear",
        &|g, v| {
            let y = linear(g, v[0], v[1])?;
            project(g, y, 213)
        },
        vec![normal(&[3, 5], 214), normal(&[4, 5], 215)],
    )?;
    check(
        "cross entropy",
        &|g, v| softmax_cross_entropy(g, v[0], &[0, 3, 1]),
        vec![normal(&[3, 4], 216)],
    )?;
    check(
        "mixed op",
        &|g, v| {
            let outs = [Some(v[1]), None, Some(v[2])];
            let y = mixed_op(g, &outs, v[0], 1, &[2, 2, 3, 3])?;
            project(g, y, 217)
        },
        vec![
            normal(&[3, 3], 218),
            normal(&[2, 2, 3, 3], 219),
            normal(&[2, 2, 3, 3], 220),
        ],
    )?;

    let cfg = NetConfig {
        cells_per_stage: 1,
        init_channels: 2,
        num_classes: 3,
        image_size: 4,
        in_channels: 2,
        option: TrainOption::A,
        ..micro_net(TrainOption::A)
    };
    let mut net = build_supernet(&cfg, 3)?;
    for (i, bn) in net.batch_norms_mut().into_iter().enumerate() {
        let n = bn.channels();
        bn.running_mean = normal(&[n], 300 + i as u64)
            .into_data()
            .iter()
            .map(|v| 0.1 * v)
            .collect();
        bn.running_var = normal(&[n], 400 + i as u64)
            .into_data()
            .iter()
            .map(|v| 1.0 + 0.2 * v.abs())
            .collect();
    }
    let x = normal(&[2, 2, 4, 4], 301);
    let params: Vec<Tensor> = net.params().iter().map(|p| p.tensor.clone()).collect();
    let numel: usize = params.iter().map(Tensor::numel).sum();
    let mut supernet: f64 = 0.0;
    for mode in [Mode::Train, Mode::Eval] {
        let err = finite_diff_check_many(
            |g, vs| {
                let mut net = net.clone();
                for (p, &v) in net.params_mut().into_iter().zip(vs) {
                    p.tensor.node_id = Some(v);
                }
                let mut ctx = Ctx {
                    graph: std::mem::take(g),
                    mode,
                    scope: GradScope::Nothing,
                };
                let xv = ctx.input(x.clone());
                let y = net.forward(&mut ctx, xv)?;
                let loss = project(&mut ctx.graph, y, 302)?;
                *g = ctx.graph;
                Ok(loss)
            },
            &params,
            1e-5,
        )?;
        supernet = supernet.max(err);
    }
    verdict(
        layer < 1e-6 && supernet < 1e-5,
        format!("layer-level max rel err {layer:.1e} (< 1e-6), supernet ({numel} params incl. α, train+eval) {supernet:.1e} (< 1e-5)"),
    )
}

// ---------------------------------------------------------------------------
// 2

fn option_semantics() -> Res<Verdict> {
    let (train, _) = synth(4, 32, 8, 8, 0.5);
    let mut parts = Vec::new();
    let mut pass = true;
    for option in [TrainOption::A, TrainOption::B, TrainOption::C, TrainOption::D] {
        let cfg = SearchConfig {
            net: micro_net(option),
            epochs: 5,
            batch_size: 16,
            seed: 0,
            ..SearchConfig::default()
        };
        let (_, net) = run_search(&cfg, &train)?;
        let audit = net.audit();
        let ok = audit.matches(option);
        pass &= ok;
        parts.push(format!("{option}: {audit}{}", if ok { "" } else { " MISMATCH" }));
    }
    verdict(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 3

fn init_condition() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst: f64 = 0.0;
    for (ci, co, k) in [(8, 16, 3), (16, 32, 3), (32, 64, 3), (64, 64, 1)] {
        let conv = rfdarts::nn::Conv2d::new("c", ConvSpec::same(ci, co, k, 1), &mut rng);
        let n = ci * k * k;
        let w = conv.weight.tensor.data();
        let var =
            w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64 - (w.iter().sum::<f64>() / w.len() as f64).powi(2);
        worst = worst.max((0.5 * n as f64 * var - 1.0).abs());
    }
    let mut fc = Parameter::new("fc", Tensor::zeros(&[64, 128]), ParamKind::Classifier);
    init_param(&mut fc, InitScheme::KaimingNormal, &mut rng)?;
    let w = fc.tensor.data();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
    worst = worst.max((0.5 * 128.0 * var - 1.0).abs());

    let mut net = DeepNet::new(
        DeepNetConfig {
            depth: 8,
            width: 16,
            ..DeepNetConfig::default()
        },
        1,
    )?;
    let batch = Batch {
        images: normal(&[32, 3, 8, 8], 2),
        labels: vec![0; 32],
    };
    let ratios = grad_variance_probe(&mut net, &batch, 3)?.ratios();
    let (lo, hi) = ratios
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), &r| (l.min(r), h.max(r)));
    verdict(
        worst <= 0.1 && lo >= 0.5 && hi <= 2.0,
        format!(
            "max |½·n·Var[W] − 1| = {worst:.3} (≤ 0.1); 8-layer gradient-variance ratios in [{lo:.3}, {hi:.3}] (⊂ [0.5, 2])"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4–6 share one data set and one training setup.

const DIAG_DEPTHS: [usize; 2] = [10, 26];
const LAMBDA_DEPTH: usize = 26;
const LAMBDA_INITS: [f64; 3] = [0.0, 0.25, 0.5];

fn diag_setup() -> (DiagConfig, Dataset, Dataset) {
    let (train, test) = synth(4, 128, 64, 16, 0.5);
    let mut cfg = DiagConfig {
        width: 16,
        epochs: 20,
        batch_size: 32,
        seed: 0,
        ..DiagConfig::default()
    };
    cfg.sgd.lr = 0.1;
    cfg.sgd.decay_bn_affine = false;
    (cfg, train, test)
}

struct DepthRuns {
    conv_bn: Vec<DepthCurve>,
    only_bn: Vec<DepthCurve>,
}

fn depth_runs() -> Res<DepthRuns> {
    let (cfg, train, test) = diag_setup();
    Ok(DepthRuns {
        conv_bn: run_plain_depth_experiment(&cfg, &DIAG_DEPTHS, DiagMode::ConvBn, &train, &test)?,
        only_bn: run_plain_depth_experiment(&cfg, &DIAG_DEPTHS, DiagMode::OnlyBn, &train, &test)?,
    })
}

fn eta_behavior(runs: &DepthRuns) -> Res<Verdict> {
    let mut fresh: f64 = 0.0;
    for seed in 0..3 {
        let net = DeepNet::new(DeepNetConfig::default(), seed)?;
        for r in compute_eta(&net.conv_bn_pairs(), 0) {
            fresh = fresh.max((r.eta - 1.0).abs());
        }
    }
    for c in runs.conv_bn.iter().chain(&runs.only_bn) {
        for r in &c.eta[0] {
            fresh = fresh.max((r.eta - 1.0).abs());
        }
    }
    let last = |c: &DepthCurve| mean_eta(c.eta.last().expect("epoch records"));
    let only: Vec<f64> = runs.only_bn.iter().map(last).collect();
    let conv: Vec<f64> = runs.conv_bn.iter().map(last).collect();
    let only_ok = only.iter().all(|e| (0.5..=2.0).contains(e));
    let conv_ok = conv.iter().all(|e| !(0.8..=1.25).contains(e));
    let fmt = |v: &[f64]| {
        DIAG_DEPTHS
            .iter()
            .zip(v)
            .map(|(d, e)| format!("{d}:{e:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    verdict(
        fresh <= 1e-9 && only_ok && conv_ok,
        format!(
            "fresh max |η−1| = {fresh:.1e}; final mean η only-BN [{}] (∈ [0.5, 2]), conv+BN [{}] (∉ [0.8, 1.25])",
            fmt(&only),
            fmt(&conv)
        ),
    )
}

fn lambda_experiment() -> Res<Verdict> {
    let (base, train, _) = diag_setup();
    let cfg = DiagConfig {
        width: 8,
        sgd: SgdConfig::default(),
        ..base
    };
    let conv = run_lambda_experiment(&cfg, LAMBDA_DEPTH, &LAMBDA_INITS, DiagMode::ConvBn, &train)?;
    let only = run_lambda_experiment(&cfg, LAMBDA_DEPTH, &LAMBDA_INITS, DiagMode::OnlyBn, &train)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (c, o) in conv.iter().zip(&only) {
        let ok = c.drift() > 0.2 && o.drift().abs() < c.drift().abs();
        pass &= ok;
        parts.push(format!(
            "λ0={}: conv+BN {:+.3}, only-BN {:+.3}{}",
            c.init,
            c.drift(),
            o.drift(),
            if ok { "" } else { " ✗" }
        ));
    }
    verdict(
        pass,
        format!("{LAMBDA_DEPTH} blocks, width 8, lr 0.025; {}", parts.join("; ")),
    )
}

fn depth_degradation(runs: &DepthRuns) -> Res<Verdict> {
    let final_err = |cs: &[DepthCurve]| -> (f64, f64) {
        let e = |c: &DepthCurve| *c.train_error.last().expect("epochs");
        (e(&cs[0]), e(&cs[1]))
    };
    let (c_shallow, c_deep) = final_err(&runs.conv_bn);
    let (o_shallow, o_deep) = final_err(&runs.only_bn);
    verdict(
        c_deep > c_shallow && o_deep <= o_shallow + 0.02,
        format!(
            "final train error conv+BN {}:{c_shallow:.3} vs {}:{c_deep:.3} (deep worse); only-BN {}:{o_shallow:.3} vs {}:{o_deep:.3} (deep ≤ shallow + 0.02)",
            DIAG_DEPTHS[0], DIAG_DEPTHS[1], DIAG_DEPTHS[0], DIAG_DEPTHS[1]
        ),
    )
}

// ---------------------------------------------------------------------------
// 7

fn search_efficacy() -> Res<Verdict> {
    let (train, test) = synth(10, 256, 100, 16, 2.0);
    let net = NetConfig {
        num_classes: 10,
        image_size: 16,
        ..micro_net(TrainOption::A)
    };
    let table = build_oracle(
        &OracleConfig {
            net: net.clone(),
            budget_epochs: 10,
            batch_size: 32,
            sgd: SgdConfig::default(),
            seeds: vec![0],
        },
        &train,
        &test,
    )?;
    let mut ranks = Vec::new();
    let mut regrets = Vec::new();
    let mut skip = [Vec::new(), Vec::new()];
    for seed in 0..3 {
        for (i, option) in [TrainOption::C, TrainOption::B].into_iter().enumerate() {
            let cfg = SearchConfig {
                net: NetConfig { option, ..net.clone() },
                epochs: 50,
                batch_size: 32,
                seed,
                ..SearchConfig::default()
            };
            let (result, _) = run_search(&cfg, &train)?;
            if option == TrainOption::C {
                let rep = score_search(&result, &table)?;
                ranks.push(rep.rank);
                regrets.push(rep.regret);
            }
            skip[i].push(result.skip_fraction());
        }
    }
    let median = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let median_rank = median(&ranks.iter().map(|&r| r as f64).collect::<Vec<_>>());
    let median_regret = median(&regrets);
    let (skip_c, skip_b) = (median(&skip[0]), median(&skip[1]));
    verdict(
        median_rank <= 3.0 && median_regret <= 0.02 && skip_c <= skip_b,
        format!(
            "option C ranks {ranks:?} (median {median_rank} ≤ 3 of {}), regrets {:?} (median {median_regret:.4} ≤ 0.02); median skip fraction C {skip_c:.3} vs B {skip_b:.3} (C ≤ B)",
            table.len(),
            regrets.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8

fn determinism_and_contracts() -> Res<Verdict> {
    let dir = TempDir::new()?;
    let (train, _) = synth(4, 16, 8, 8, 0.5);
    let artifacts = |tag: &str| -> Res<Vec<Vec<u8>>> {
        let cfg = SearchConfig {
            net: micro_net(TrainOption::C),
            epochs: 2,
            batch_size: 16,
            seed: 5,
            ..SearchConfig::default()
        };
        let (result, _) = run_search(&cfg, &train)?;
        let (a, l) = (
            dir.path().join(format!("{tag}_alpha.csv")),
            dir.path().join(format!("{tag}_loss.csv")),
        );
        result.write_alpha_trace(&a)?;
        result.write_loss_trace(&l)?;

        let dcfg = DiagConfig {
            width: 4,
            epochs: 2,
            batch_size: 16,
            seed: 5,
            ..DiagConfig::default()
        };
        let (lp, dp) = (
            dir.path().join(format!("{tag}_lambda.csv")),
            dir.path().join(format!("{tag}_depth.csv")),
        );
        write_lambda_csv(&lp, &run_lambda_experiment(&dcfg, 3, &[0.5], DiagMode::OnlyBn, &train)?)?;
        write_depth_csv(
            &dp,
            &run_plain_depth_experiment(&dcfg, &[2], DiagMode::ConvBn, &train, &train)?,
        )?;
        Ok(vec![
            format!("{:?}", result.genotype).into_bytes(),
            fs::read(a)?,
            fs::read(l)?,
            fs::read(lp)?,
            fs::read(dp)?,
        ])
    };
    let reproducible = artifacts("first")? == artifacts("second")?;

    let cifar = dir.path().join("cifar");
    fs::create_dir(&cifar)?;
    let mut bytes = vec![0u8; CIFAR_FILE_BYTES as usize];
    for (r, rec) in bytes.chunks_exact_mut(CIFAR_RECORD).enumerate() {
        rec[0] = (r % 10) as u8;
        rec[1 + r % 3072] = (r % 251) as u8;
    }
    for f in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
        fs::write(cifar.join(f), &bytes)?;
    }
    let counts = load_cifar10_bin(&cifar).map(|(tr, te)| (tr.len(), te.len())).ok();
    let short = bytes[..bytes.len() - 1].to_vec();
    fs::write(cifar.join(CIFAR_TEST_FILE), &short)?;
    let rejects_short = load_cifar10_bin(&cifar).is_err();
    bytes[CIFAR_RECORD * 7] = 10;
    fs::write(cifar.join(CIFAR_TEST_FILE), &bytes)?;
    let rejects_label = load_cifar10_bin(&cifar).is_err();
    drop(bytes);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spaces = [SpaceId::Micro, SpaceId::Nb201, SpaceId::Darts];
    let round_trips = (0..100)
        .filter(|i| {
            let space = spaces[i % 3];
            let logits = (0..space.topology().edges.len() * space.ops().len())
                .map(|_| rng.random::<f64>())
                .collect();
            let g = derive_genotype(&AlphaTable::from_logits(space, logits).unwrap(), rng.random());
            Genotype::parse(&g.to_string()).ok() == Some(g)
        })
        .count();

    verdict(
        reproducible && counts == Some((50_000, 10_000)) && rejects_short && rejects_label && round_trips == 100,
        format!(
            "rerun byte-identical: {reproducible}; cifar fixture counts {counts:?}, rejects truncated: {rejects_short}, rejects bad label: {rejects_label}; genotype round-trips {round_trips}/100"
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));

    let mut depth: Option<Res<DepthRuns>> = None;
    let mut shared = |f: fn(&DepthRuns) -> Res<Verdict>| -> Res<Verdict> {
        match depth.get_or_insert_with(depth_runs) {
            Ok(runs) => f(runs),
            Err(e) => Err(e.to_string().into()),
        }
    };

    let names = [
        "gradient fidelity",
        "option semantics",
        "initialization condition",
        "relative variance η",
        "λ experiment",
        "depth degradation",
        "search efficacy on the micro oracle",
        "determinism and interface contracts",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match n {
            1 => gradient_fidelity(),
            2 => option_semantics(),
            3 => init_condition(),
            4 => shared(eta_behavior),
            5 => lambda_experiment(),
            6 => shared(depth_degradation),
            7 => search_efficacy(),
            _ => determinism_and_contracts(),
        };
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {n} {}: {name}: {detail} [{secs:.1}s]",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
