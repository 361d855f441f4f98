//! Brute-force ground truth over an enumerable space: train every genotype
//! as a standalone net, then rank search outcomes against the table.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::optim::TrainOption;
use crate::search::{SearchResult, SgdConfig};
use crate::space::{enumerate_space, AlphaTable, Genotype, SpaceId};
use crate::supernet::{materialize_subnet, NetConfig};
use crate::train::{evaluate, fit, TrainRecipe};

/// Environment variable capping the oracle worker pool.
pub const THREADS_ENV: &str = "RFDARTS_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    pub net: NetConfig,
    pub budget_epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seeds: Vec<u64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            net: NetConfig {
                space: SpaceId::Micro,
                ..NetConfig::default()
            },
            budget_epochs: 10,
            batch_size: 64,
            sgd: SgdConfig::default(),
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchEval {
    pub val_acc: f64,
    pub test_acc: f64,
    pub params: usize,
}

/// Alternates the samples of every class between a validation half (first,
/// third, ... occurrence) and a test half, so both halves keep the class
/// balance of `test`.
pub fn split_eval_halves(test: &Dataset) -> (Dataset, Dataset) {
    let mut seen = vec![0usize; test.num_classes];
    let (mut val, mut held) = (Vec::new(), Vec::new());
    for (i, &y) in test.labels.iter().enumerate() {
        if seen[y] % 2 == 0 {
            val.push(i)
        } else {
            held.push(i)
        }
        seen[y] += 1;
    }
    (test.subset(&val), test.subset(&held))
}

/// Trains the genotype's standalone net (all weights learnable) for the
/// budget and reports accuracy on both halves of `test`.
pub fn evaluate_arch(
    cfg: &OracleConfig,
    genotype: &Genotype,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<ArchEval> {
    let net_cfg = NetConfig {
        option: TrainOption::A,
        ..cfg.net.clone()
    };
    let mut net = materialize_subnet(&net_cfg, genotype, seed)?;
    let recipe = TrainRecipe {
        epochs: cfg.budget_epochs,
        batch_size: cfg.batch_size,
        sgd: cfg.sgd.clone(),
        seed,
    };
    fit(&mut net, train, &recipe, |_, _| Ok(()))?;
    let (val, held) = split_eval_halves(test);
    Ok(ArchEval {
        val_acc: evaluate(&mut net, &val, cfg.batch_size)?.acc,
        test_acc: evaluate(&mut net, &held, cfg.batch_size)?.acc,
        params: net.num_params(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub genotype: Genotype,
    pub val_acc: f64,
    pub test_acc: f64,
    pub params: usize,
}

/// Seed-averaged accuracies of every genotype, in enumeration order.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTable {
    pub space: SpaceId,
    pub budget_epochs: usize,
    pub seeds: Vec<u64>,
    rows: Vec<OracleRow>,
    index: BTreeMap<String, usize>,
}

impl OracleTable {
    /// Checks that `rows` cover the space's enumeration exactly once.
    pub fn from_rows(space: SpaceId, budget_epochs: usize, seeds: Vec<u64>, rows: Vec<OracleRow>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            if r.genotype.space != space {
                return Err(Error::SpaceMismatch {
                    genotype: r.genotype.to_string(),
                    space: space.name().to_string(),
                });
            }
            if index.insert(r.genotype.to_string(), i).is_some() {
                return Err(Error::invalid(
                    "oracle table",
                    format!("duplicate genotype {}", r.genotype),
                ));
            }
        }
        for g in enumerate_space(space)? {
            if !index.contains_key(&g.to_string()) {
                return Err(Error::MissingGenotype(g.to_string()));
            }
        }
        Ok(OracleTable {
            space,
            budget_epochs,
            seeds,
            rows,
            index,
        })
    }

    pub fn rows(&self) -> &[OracleRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, g: &Genotype) -> Option<&OracleRow> {
        self.index.get(&g.to_string()).map(|&i| &self.rows[i])
    }

    /// Rows from best to worst test accuracy, ties by genotype string.
    pub fn ranked(&self) -> Vec<&OracleRow> {
        let mut rows: Vec<(&OracleRow, String)> = self.rows.iter().map(|r| (r, r.genotype.to_string())).collect();
        rows.sort_by(|(a, sa), (b, sb)| b.test_acc.total_cmp(&a.test_acc).then_with(|| sa.cmp(sb)));
        rows.into_iter().map(|(r, _)| r).collect()
    }

    pub fn best(&self) -> &OracleRow {
        self.ranked()[0]
    }

    /// 1-based rank of `g`.
    pub fn rank_of(&self, g: &Genotype) -> Result<usize> {
        let key = g.to_string();
        self.ranked()
            .iter()
            .position(|r| r.genotype.to_string() == key)
            .map(|p| p + 1)
            .ok_or(Error::MissingGenotype(key))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["genotype", "val_acc", "test_acc", "params", "budget_epochs", "seeds"])?;
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        for r in &self.rows {
            w.write_record([
                r.genotype.to_string(),
                format!("{:.6}", r.val_acc),
                format!("{:.6}", r.test_acc),
                r.params.to_string(),
                self.budget_epochs.to_string(),
                seeds.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        let (mut budget, mut seeds) = (0, Vec::new());
        let bad = |msg: String| Error::invalid("oracle table", msg);
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 6 {
                return Err(bad(format!("expected 6 columns, found {}", rec.len())));
            }
            let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("column {i}: {e}")));
            rows.push(OracleRow {
                genotype: Genotype::parse(&rec[0])?,
                val_acc: num(1)?,
                test_acc: num(2)?,
                params: rec[3].parse().map_err(|e| bad(format!("params: {e}")))?,
            });
            budget = rec[4].parse().map_err(|e| bad(format!("budget_epochs: {e}")))?;
            seeds = rec[5]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| bad(format!("seeds: {e}"))))
                .collect::<Result<_>>()?;
        }
        let space = rows
            .first()
            .map(|r| r.genotype.space)
            .ok_or_else(|| bad("empty table".into()))?;
        OracleTable::from_rows(space, budget, seeds, rows)
    }
}

fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

/// Evaluates every genotype of `cfg.net.space` under every seed and
/// averages. Runs on a worker pool; results are gathered in enumeration
/// order so the table does not depend on scheduling.
pub fn build_oracle(cfg: &OracleConfig, train: &Dataset, test: &Dataset) -> Result<OracleTable> {
    cfg.net.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let genotypes: Vec<Genotype> = enumerate_space(cfg.net.space)?.collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::invalid("build_oracle", e.to_string()))?;
    let rows = pool.install(|| {
        genotypes
            .par_iter()
            .map(|g| {
                let evals = cfg
                    .seeds
                    .iter()
                    .map(|&s| evaluate_arch(cfg, g, train, test, s))
                    .collect::<Result<Vec<_>>>()?;
                let n = evals.len() as f64;
                Ok(OracleRow {
                    genotype: g.clone(),
                    val_acc: evals.iter().map(|e| e.val_acc).sum::<f64>() / n,
                    test_acc: evals.iter().map(|e| e.test_acc).sum::<f64>() / n,
                    params: evals[0].params,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    OracleTable::from_rows(cfg.net.space, cfg.budget_epochs, cfg.seeds.clone(), rows)
}

/// Kendall τ-b, accounting for ties in either ranking.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let dx = xs[i].total_cmp(&xs[j]) as i64;
            let dy = ys[i].total_cmp(&ys[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tie_x += 1,
                (_, 0) => tie_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n_x = (concordant + discordant + tie_y) as f64;
    let n_y = (concordant + discordant + tie_x) as f64;
    if n_x == 0.0 || n_y == 0.0 {
        return 0.0;
    }
    (concordant - discordant) as f64 / (n_x * n_y).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankReport {
    pub genotype: Genotype,
    pub rank: usize,
    pub regret: f64,
    /// τ between α-implied scores and oracle test accuracy.
    pub kendall_tau: Option<f64>,
}

impl RankReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["genotype", "rank", "regret", "kendall_tau"])?;
        w.write_record([
            self.genotype.to_string(),
            self.rank.to_string(),
            format!("{:.6}", self.regret),
            self.kendall_tau.map_or_else(String::new, |t| format!("{t:.6}")),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// τ between `alpha`'s per-genotype scores and the table's test accuracy.
pub fn alpha_kendall_tau(alpha: &AlphaTable, table: &OracleTable) -> f64 {
    let (scores, accs): (Vec<f64>, Vec<f64>) = table
        .rows()
        .iter()
        .map(|r| (alpha.score(&r.genotype), r.test_acc))
        .unzip();
    kendall_tau(&scores, &accs)
}

pub fn score_genotype(genotype: &Genotype, alpha: Option<&AlphaTable>, table: &OracleTable) -> Result<RankReport> {
    let row = table
        .get(genotype)
        .ok_or_else(|| Error::MissingGenotype(genotype.to_string()))?;
    Ok(RankReport {
        genotype: genotype.clone(),
        rank: table.rank_of(genotype)?,
        regret: (table.best().test_acc - row.test_acc).max(0.0),
        kendall_tau: alpha.map(|a| alpha_kendall_tau(a, table)),
    })
}

pub fn score_search(result: &SearchResult, table: &OracleTable) -> Result<RankReport> {
    let genotype = result
        .genotype
        .as_ref()
        .ok_or_else(|| Error::invalid("score_search", "search produced no genotype"))?;
    let alpha = if result.final_alpha.is_empty() {
        None
    } else {
        Some(AlphaTable::from_logits(genotype.space, result.final_alpha.clone())?)
    };
    score_genotype(genotype, alpha.as_ref(), table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synth, SynthSpec};
    use crate::space::{space_size, OpKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fake_table(seed: u64) -> OracleTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = enumerate_space(SpaceId::Micro)
            .unwrap()
            .map(|g| OracleRow {
                genotype: g,
                val_acc: rng.random(),
                test_acc: rng.random(),
                params: 1,
            })
            .collect();
        OracleTable::from_rows(SpaceId::Micro, 1, vec![0], rows).unwrap()
    }

    #[test]
    fn rank_and_regret_extremes() {
        let t = fake_table(1);
        let ranked = t.ranked();
        let best = ranked[0].genotype.clone();
        let worst = ranked[26].genotype.clone();
        let r = score_genotype(&best, None, &t).unwrap();
        assert_eq!((r.rank, r.regret), (1, 0.0));
        assert_eq!(score_genotype(&worst, None, &t).unwrap().rank, 27);
        let mut ranks: Vec<usize> = t.rows().iter().map(|r| t.rank_of(&r.genotype).unwrap()).collect();
        ranks.sort();
        assert_eq!(ranks, (1..=27).collect::<Vec<_>>());
    }

    #[test]
    fn ties_break_by_genotype_string() {
        let rows: Vec<OracleRow> = enumerate_space(SpaceId::Micro)
            .unwrap()
            .map(|g| OracleRow {
                genotype: g,
                val_acc: 0.5,
                test_acc: 0.5,
                params: 0,
            })
            .collect();
        let mut names: Vec<String> = rows.iter().map(|r| r.genotype.to_string()).collect();
        names.sort();
        let t = OracleTable::from_rows(SpaceId::Micro, 0, vec![], rows).unwrap();
        assert_eq!(t.best().genotype.to_string(), names[0]);
    }

    #[test]
    fn incomplete_table_and_missing_genotype_are_errors() {
        let t = fake_table(2);
        let mut rows = t.rows().to_vec();
        rows.pop();
        assert!(matches!(
            OracleTable::from_rows(SpaceId::Micro, 1, vec![0], rows),
            Err(Error::MissingGenotype(_))
        ));
        let nb = Genotype::uniform(SpaceId::Nb201, OpKind::Skip).unwrap();
        assert!(matches!(score_genotype(&nb, None, &t), Err(Error::MissingGenotype(_))));
    }

    #[test]
    fn kendall_tau_known_values() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&a, &a), 1.0);
        assert_eq!(kendall_tau(&a, &[4.0, 3.0, 2.0, 1.0]), -1.0);
        // One discordant pair out of six.
        assert!((kendall_tau(&a, &[1.0, 2.0, 4.0, 3.0]) - 4.0 / 6.0).abs() < 1e-12);
        // τ-b with a tie in y: (C − D) / sqrt(n0 · (n0 − 1)).
        let t = kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 1.0, 2.0]);
        assert!((t - 2.0 / (3.0f64 * 2.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn random_alpha_tau_is_small() {
        let t = fake_table(3);
        let mut big = 0;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let logits = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = AlphaTable::from_logits(SpaceId::Micro, logits).unwrap();
            if alpha_kendall_tau(&a, &t).abs() >= 0.3 {
                big += 1;
            }
        }
        assert!(big <= 5, "{big} of 50 random α tables had |τ| ≥ 0.3");
    }

    #[test]
    fn csv_round_trip_and_enumerable_only() {
        let t = fake_table(4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("oracle_table.csv");
        t.write_csv(&p).unwrap();
        let back = OracleTable::read_csv(&p).unwrap();
        assert_eq!(back.len(), 27);
        for (a, b) in t.rows().iter().zip(back.rows()) {
            assert_eq!(a.genotype, b.genotype);
            assert!((a.test_acc - b.test_acc).abs() < 1e-6);
        }
        let cfg = OracleConfig {
            net: NetConfig {
                space: SpaceId::Darts,
                ..NetConfig::default()
            },
            ..OracleConfig::default()
        };
        let (train, test) = generate_synth(&SynthSpec {
            train_per_class: 4,
            test_per_class: 4,
            image_size: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        assert!(build_oracle(&cfg, &train, &test).is_err());
        assert!(space_size(SpaceId::Darts).is_err());
    }

    #[test]
    fn eval_halves_keep_class_balance() {
        let (_, test) = generate_synth(&SynthSpec {
            num_classes: 4,
            train_per_class: 2,
            test_per_class: 6,
            image_size: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let (val, held) = split_eval_halves(&test);
        assert_eq!(val.len() + held.len(), test.len());
        for k in 0..4 {
            assert_eq!(val.labels.iter().filter(|&&y| y == k).count(), 3);
            assert_eq!(held.labels.iter().filter(|&&y| y == k).count(), 3);
        }
    }

    #[test]
    fn zero_budget_is_chance_and_deterministic() {
        let (train, test) = generate_synth(&SynthSpec {
            train_per_class: 16,
            test_per_class: 64,
            image_size: 8,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = OracleConfig {
            net: NetConfig {
                space: SpaceId::Micro,
                cells_per_stage: 1,
                init_channels: 4,
                num_classes: 4,
                image_size: 8,
                ..NetConfig::default()
            },
            budget_epochs: 0,
            batch_size: 16,
            ..OracleConfig::default()
        };
        let g = Genotype::uniform(SpaceId::Micro, OpKind::Conv3x3).unwrap();
        let a = evaluate_arch(&cfg, &g, &train, &test, 7).unwrap();
        let b = evaluate_arch(&cfg, &g, &train, &test, 7).unwrap();
        assert_eq!(a, b);
        assert!((a.test_acc - 0.25).abs() <= 0.15, "{a:?}");
    }
}
