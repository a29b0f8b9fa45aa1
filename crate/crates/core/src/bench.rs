//! Benchmark harness: runtime per token and allocated floats per token
//! across forward strategies and parameter sweeps.
//!
//! Memory is the deterministic allocation accounting reported by the
//! kernels, never process RSS, so same-seed reruns produce identical
//! floats-per-token. Timing rows are medians over repetitions with warmup
//! excluded; a row whose spread exceeds half its median after retries is
//! flagged rather than failed. Inputs for every cell are pre-generated
//! from the seed and shared by all strategies, so every strategy times
//! identical work.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{random_layer, AllocReport, MeteoraLayer, Strategy, TokenBatch};
use crate::routing::RoutingConfig;
use crate::tensor::{matmul_acc_slices, matmul_slices, Tensor};

/// The non-routed reference: one fixed adapter fused into the forward,
/// no gate evaluation, no decisions. Upper bound for every strategy.
pub const BASELINE_NAME: &str = "single-lora";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub b: Vec<usize>,
    pub s: Vec<usize>,
    pub k: Vec<usize>,
    pub r: Vec<usize>,
    pub n: Vec<usize>,
    pub d: Vec<usize>,
    pub h: Vec<usize>,
    /// Tokens to generate per repetition (forward calls per timing run).
    pub g: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    pub threads: usize,
    /// Also time the single-lora baseline for every cell.
    pub baseline: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            b: vec![1],
            s: vec![1],
            k: vec![2],
            r: vec![8],
            n: vec![28],
            d: vec![64],
            h: vec![64],
            g: vec![64],
            strategies: Strategy::ALL.to_vec(),
            repetitions: 5,
            warmup: 2,
            seed: 0,
            threads: 1,
            baseline: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(Error::Parameter(format!(
                "bench repetitions must be >= 3, got {}",
                self.repetitions
            )));
        }
        if self.warmup < 1 {
            return Err(Error::Parameter(format!(
                "bench warmup must be >= 1, got {}",
                self.warmup
            )));
        }
        if self.threads < 1 {
            return Err(Error::Parameter("bench threads must be >= 1".into()));
        }
        for (name, list) in [
            ("b", &self.b),
            ("s", &self.s),
            ("k", &self.k),
            ("r", &self.r),
            ("n", &self.n),
            ("d", &self.d),
            ("h", &self.h),
            ("g", &self.g),
        ] {
            if list.is_empty() || list.contains(&0) {
                return Err(Error::Parameter(format!(
                    "bench sweep '{name}' must be non-empty and positive"
                )));
            }
        }
        Ok(())
    }
}

/// One (cell, strategy) measurement.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub b: usize,
    pub s: usize,
    pub k: usize,
    pub r: usize,
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub g: usize,
    pub strategy: String,
    /// Median over post-warmup repetitions.
    pub ms_per_token: f64,
    /// Half the max-min span of the repetition medians.
    pub spread: f64,
    pub floats_per_token: f64,
    /// ms_per_token * floats_per_token.
    pub product: f64,
    /// Adapter-operand share of the allocation, per token.
    pub adapter_floats_per_token: f64,
    /// Timing spread stayed above 50% of the median after retries.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub threads: usize,
}

struct Cell {
    b: usize,
    s: usize,
    k: usize,
    r: usize,
    n: usize,
    d: usize,
    h: usize,
    g: usize,
}

fn time_run(
    layer: &MeteoraLayer<f32>,
    inputs: &[TokenBatch<f32>],
    strategy: Strategy,
) -> Result<(f64, AllocReport)> {
    let mut total = AllocReport::default();
    let start = Instant::now();
    for batch in inputs {
        let out = layer.forward(batch, strategy)?;
        let a = out.alloc;
        total.adapter_operand_floats += a.adapter_operand_floats;
        total.token_operand_floats += a.token_operand_floats;
        total.workspace_floats += a.workspace_floats;
        total.routing_floats += a.routing_floats;
        total.output_floats += a.output_floats;
    }
    Ok((start.elapsed().as_secs_f64() * 1e3, total))
}

/// Fused single-adapter forward over the same inputs: base GEMM plus the
/// two low-rank GEMMs, nothing else.
fn time_baseline(
    layer: &MeteoraLayer<f32>,
    inputs: &[TokenBatch<f32>],
) -> (f64, AllocReport) {
    let d = layer.input_dim();
    let h = layer.output_dim();
    let r = layer.bank().rank();
    let scale = layer.scale() as f32;
    let a0 = layer.bank().a_slice(0);
    let b0 = layer.bank().b_slice(0);
    let mut total = AllocReport::default();
    let start = Instant::now();
    for batch in inputs {
        let bs = batch.tokens();
        let mut out = vec![0.0f32; bs * h];
        let mut xa = vec![0.0f32; bs * r];
        matmul_slices(&mut out, batch.tensor().data(), layer.w_base().data(), bs, d, h);
        matmul_slices(&mut xa, batch.tensor().data(), a0, bs, d, r);
        matmul_acc_slices(&mut out, scale, &xa, b0, bs, r, h);
        total.output_floats += (bs * h) as u64;
        total.workspace_floats += (bs * r) as u64;
        std::hint::black_box(&out);
    }
    (start.elapsed().as_secs_f64() * 1e3, total)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_bench_inner(cfg))
}

fn run_bench_inner(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rows = Vec::new();
    let mut cell_idx = 0u64;
    for &b in &cfg.b {
        for &s in &cfg.s {
            for &k in &cfg.k {
                for &r in &cfg.r {
                    for &n in &cfg.n {
                        for &d in &cfg.d {
                            for &h in &cfg.h {
                                for &g in &cfg.g {
                                    if k > n {
                                        continue;
                                    }
                                    let cell = Cell {
                                        b,
                                        s,
                                        k,
                                        r,
                                        n,
                                        d,
                                        h,
                                        g,
                                    };
                                    run_cell(cfg, &cell, cell_idx, &mut rows)?;
                                    cell_idx += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(BenchReport {
        rows,
        threads: cfg.threads,
    })
}

fn run_cell(cfg: &BenchConfig, cell: &Cell, cell_idx: u64, rows: &mut Vec<BenchRow>) -> Result<()> {
    let layer: MeteoraLayer<f32> = random_layer(
        cell.n,
        cell.d,
        cell.r,
        cell.h,
        RoutingConfig::new(cell.k),
        cfg.seed.wrapping_add(cell_idx),
    );
    // Deterministic inputs, shared by every strategy in this cell.
    let mut rng = crate::rng::Rng::new(cfg.seed).fork(0xbe7c ^ cell_idx);
    let inputs: Vec<TokenBatch<f32>> = (0..cell.g)
        .map(|_| TokenBatch::new(Tensor::randn(&[cell.b, cell.s, cell.d], 1.0, &mut rng)))
        .collect::<Result<_>>()?;
    let tokens = (cell.g * cell.b * cell.s) as f64;

    let layer_ref = &layer;
    let inputs_ref = &inputs;
    let mut runs: Vec<(String, Box<dyn Fn() -> Result<(f64, AllocReport)> + '_>)> = Vec::new();
    for &strategy in &cfg.strategies {
        runs.push((
            strategy.name().to_string(),
            Box::new(move || time_run(layer_ref, inputs_ref, strategy)),
        ));
    }
    if cfg.baseline {
        runs.push((
            BASELINE_NAME.to_string(),
            Box::new(move || Ok(time_baseline(layer_ref, inputs_ref))),
        ));
    }

    for (name, run) in runs {
        for _ in 0..cfg.warmup {
            run()?;
        }
        let mut samples = Vec::with_capacity(cfg.repetitions);
        let mut alloc = AllocReport::default();
        let mut flagged = false;
        // Up to two retry rounds if the spread is noisy.
        for round in 0..3 {
            for _ in 0..cfg.repetitions {
                let (ms, a) = run()?;
                samples.push(ms);
                alloc = a;
            }
            let med = median(&mut samples.clone());
            let spread = samples.iter().cloned().fold(f64::MIN, f64::max)
                - samples.iter().cloned().fold(f64::MAX, f64::min);
            if spread <= 0.5 * med {
                break;
            }
            if round == 2 {
                flagged = true;
                eprintln!(
                    "warning: bench row ({name}, b={} s={} n={}) stayed noisy: spread {spread:.3}ms vs median {med:.3}ms",
                    cell.b, cell.s, cell.n
                );
            }
        }
        let med = median(&mut samples.clone()) / tokens;
        let spread = (samples.iter().cloned().fold(f64::MIN, f64::max)
            - samples.iter().cloned().fold(f64::MAX, f64::min))
            / (2.0 * tokens);
        let floats = alloc.total() as f64 / tokens;
        rows.push(BenchRow {
            b: cell.b,
            s: cell.s,
            k: cell.k,
            r: cell.r,
            n: cell.n,
            d: cell.d,
            h: cell.h,
            g: cell.g,
            strategy: name,
            ms_per_token: med,
            spread,
            floats_per_token: floats,
            product: med * floats,
            adapter_floats_per_token: alloc.adapter_operand_floats as f64 / tokens,
            flagged,
        });
    }
    Ok(())
}

/// CSV with the stable column order
/// `b,s,k,r,n,d,h,g,strategy,ms_per_token,floats_per_token,product`,
/// header row, LF line endings.
pub fn render_csv(report: &BenchReport) -> String {
    let mut out = String::from("b,s,k,r,n,d,h,g,strategy,ms_per_token,floats_per_token,product\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.6},{:.3},{:.6}\n",
            row.b,
            row.s,
            row.k,
            row.r,
            row.n,
            row.d,
            row.h,
            row.g,
            row.strategy,
            row.ms_per_token,
            row.floats_per_token,
            row.product
        ));
    }
    out
}

pub fn emit_report(report: &BenchReport, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, render_csv(report))?;
    Ok(())
}

/// Parsed-back CSV row; the round-trip oracle for `emit_report`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRow {
    pub b: usize,
    pub s: usize,
    pub k: usize,
    pub r: usize,
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub g: usize,
    pub strategy: String,
    pub ms_per_token: f64,
    pub floats_per_token: f64,
    pub product: f64,
}

pub fn parse_csv(text: &str) -> Result<Vec<ParsedRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty bench csv".into()))?;
    if header != "b,s,k,r,n,d,h,g,strategy,ms_per_token,floats_per_token,product" {
        return Err(Error::Format(format!("unexpected bench csv header: {header}")));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 12 {
            return Err(Error::Format(format!("bad bench csv row: {line}")));
        }
        let num = |i: usize| -> Result<usize> {
            parts[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad integer in bench csv: {}", parts[i])))
        };
        let float = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad float in bench csv: {}", parts[i])))
        };
        rows.push(ParsedRow {
            b: num(0)?,
            s: num(1)?,
            k: num(2)?,
            r: num(3)?,
            n: num(4)?,
            d: num(5)?,
            h: num(6)?,
            g: num(7)?,
            strategy: parts[8].to_string(),
            ms_per_token: float(9)?,
            floats_per_token: float(10)?,
            product: float(11)?,
        });
    }
    Ok(rows)
}

impl BenchReport {
    pub fn row(&self, strategy: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> BenchConfig {
        BenchConfig {
            n: vec![4],
            g: vec![4],
            d: vec![16],
            h: vec![16],
            r: vec![4],
            repetitions: 3,
            warmup: 1,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = quick_cfg();
        cfg.repetitions = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_cfg();
        cfg.warmup = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_cfg();
        cfg.b = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_sweep_yields_header_only_csv() {
        let report = BenchReport {
            rows: vec![],
            threads: 1,
        };
        let csv = render_csv(&report);
        assert_eq!(
            csv,
            "b,s,k,r,n,d,h,g,strategy,ms_per_token,floats_per_token,product\n"
        );
    }

    #[test]
    fn sweep_produces_expected_row_count_and_round_trips() {
        let mut cfg = quick_cfg();
        cfg.s = vec![1, 2];
        let report = run_bench(&cfg).unwrap();
        // 2 cells x (3 strategies + baseline)
        assert_eq!(report.rows.len(), 2 * 4);

        let csv = render_csv(&report);
        let parsed = parse_csv(&csv).unwrap();
        assert_eq!(parsed.len(), report.rows.len());
        for (row, parsed) in report.rows.iter().zip(&parsed) {
            assert_eq!(row.strategy, parsed.strategy);
            assert_eq!(row.b, parsed.b);
            assert!((row.product - parsed.product).abs() < 1e-6 + row.product * 1e-4);
        }
        // LF endings, no CR anywhere.
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn same_seed_reruns_reproduce_floats_exactly() {
        let cfg = quick_cfg();
        let a = run_bench(&cfg).unwrap();
        let b = run_bench(&cfg).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.floats_per_token, rb.floats_per_token);
            assert_eq!(ra.adapter_floats_per_token, rb.adapter_floats_per_token);
        }
    }

    #[test]
    fn degenerate_single_adapter_is_near_baseline() {
        // n=1: no routing work beyond one gate; every strategy should sit
        // within 2x of the fused single-lora pass.
        let cfg = BenchConfig {
            n: vec![1],
            k: vec![1],
            g: vec![32],
            d: vec![64],
            h: vec![64],
            repetitions: 5,
            warmup: 2,
            ..Default::default()
        };
        let report = run_bench(&cfg).unwrap();
        let base = report.row(BASELINE_NAME).unwrap().ms_per_token;
        for strategy in ["loop", "batched", "blocked"] {
            let row = report.row(strategy).unwrap();
            assert!(
                row.ms_per_token <= 2.0 * base,
                "{strategy}: {} vs baseline {base}",
                row.ms_per_token
            );
        }
    }
}
