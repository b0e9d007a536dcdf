//! Latency and accounted-memory benchmarks of single blocks.
//!
//! Latency is the median wall clock over `repeats` timed forward passes after
//! `warmup` untimed ones. Peak bytes come from a separate single-threaded
//! pass under [`measure_peak`] and cover activations only: parameters and the
//! input batch are allocated before measurement starts.

use crate::cost::{CostModel, OperatorKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lisa::{LiSAConfig, TokenLayout, DEFAULT_LATENT};
use crate::model::{block_forward_with, mlp, LiSABlockParams, LN_EPS};
use crate::ndtensor::alloc::measure_peak;
use crate::ndtensor::{contract_with, layer_norm, linear_with, softmax, Contraction, Tensor};
use crate::random::{normal_tensor, rng_from_seed};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

pub const CSV_HEADER: &str = "kind,tokens,batch,channels,macs,latency_ms,peak_bytes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    SelfAttentionBlock,
    LisaBlock,
}

impl BlockKind {
    pub const ALL: [BlockKind; 2] = [BlockKind::LisaBlock, BlockKind::SelfAttentionBlock];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::SelfAttentionBlock => "self_attention_block",
            BlockKind::LisaBlock => "lisa_block",
        }
    }

    pub fn operator(self) -> OperatorKind {
        match self {
            BlockKind::SelfAttentionBlock => OperatorKind::SelfAttention,
            BlockKind::LisaBlock => OperatorKind::LiSA,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown block kind '{s}' (self_attention_block, lisa_block)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub kinds: Vec<BlockKind>,
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub channels: usize,
    pub heads: usize,
    pub latent: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
    /// Runs whose predicted activation bytes exceed this are skipped.
    pub memory_budget: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            kinds: BlockKind::ALL.to_vec(),
            tokens: vec![196, 256, 1024, 4096],
            batch: 16,
            channels: 96,
            heads: 3,
            latent: DEFAULT_LATENT,
            repeats: 5,
            warmup: 2,
            threads: 1,
            seed: crate::random::DEFAULT_SEED,
            memory_budget: 2 << 30,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.tokens.is_empty() {
            return Err(Error::arg("at least one kind and one token count are required"));
        }
        if self.tokens.contains(&0) || self.batch == 0 || self.threads == 0 {
            return Err(Error::arg("token counts, batch and threads must be positive"));
        }
        if self.repeats < 5 || self.warmup < 2 {
            return Err(Error::arg("benchmarks need at least 5 repeats and 2 warmup runs"));
        }
        LiSAConfig::new(TokenLayout::Sequence(1), self.channels, self.heads, self.latent).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub kind: BlockKind,
    pub tokens: usize,
    pub batch: usize,
    pub channels: usize,
    pub macs: u64,
    /// `None` when the run was skipped.
    pub latency_ms: Option<f64>,
    pub peak_bytes: Option<u64>,
}

impl BenchRecord {
    pub fn measured(&self) -> bool {
        self.latency_ms.is_some() && self.peak_bytes.is_some()
    }
}

/// Records as CSV under [`CSV_HEADER`]; unmeasured fields are left empty.
pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in records {
        let lat = r.latency_ms.map(|v| format!("{v:.4}")).unwrap_or_default();
        let peak = r.peak_bytes.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{lat},{peak}",
            r.kind, r.tokens, r.batch, r.channels, r.macs
        );
    }
    s
}

/// Quadratic-attention block on a batch laid out as `[B N, C]`.
///
/// Scores and probabilities for all `B h` heads are materialized at once,
/// then the scores are released before the value product.
pub fn self_attention_block_forward(
    x: &Tensor,
    p: &LiSABlockParams,
    batch: usize,
    heads: usize,
    exec: Exec,
) -> Result<Tensor> {
    let c = x.dim(1);
    let n = x.dim(0) / batch;
    let ch = c / heads;
    let h = layer_norm(x, &p.ln1_g, &p.ln1_b, LN_EPS)?;
    let qkv = linear_with(&h, &p.attn.qkv_w, &p.attn.qkv_b, exec)?;
    drop(h);
    let scale = 1.0 / (ch as f64).sqrt();
    let gather = |part: usize, s: f64| {
        Tensor::from_fn(&[batch * heads, n, ch], |f| {
            let (g, i, k) = (f / (n * ch), (f / ch) % n, f % ch);
            let (b, hd) = (g / heads, g % heads);
            s * qkv.data()[(b * n + i) * 3 * c + part * c + hd * ch + k]
        })
    };
    let (q, k, v) = (gather(0, scale), gather(1, 1.0), gather(2, 1.0));
    drop(qkv);
    let scores = contract_with(&q, &k, Contraction::BatchedBt, exec)?;
    drop((q, k));
    let probs = softmax(&scores, 2)?;
    drop(scores);
    let o = contract_with(&probs, &v, Contraction::Batched, exec)?;
    drop((probs, v));
    let merged = Tensor::from_fn(&[batch * n, c], |f| {
        let (row, col) = (f / c, f % c);
        let (b, i, hd, k) = (row / n, row % n, col / ch, col % ch);
        o.data()[((b * heads + hd) * n + i) * ch + k]
    });
    drop(o);
    let x = x.add(&linear_with(&merged, &p.attn.out_w, &p.attn.out_b, exec)?)?;
    let m = mlp(&layer_norm(&x, &p.ln2_g, &p.ln2_b, LN_EPS)?, p, exec)?;
    x.add(&m)
}

/// LiSA block over a `[B N, C]` batch, one item at a time (heads under `exec`).
pub fn lisa_block_forward(x: &Tensor, p: &LiSABlockParams, cfg: &LiSAConfig, batch: usize, exec: Exec) -> Result<Tensor> {
    let n = cfg.tokens();
    let c = cfg.channels;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..batch {
        let xb = Tensor::from_vec(&[n, c], x.data()[b * n * c..(b + 1) * n * c].to_vec())?;
        let yb = block_forward_with(&xb, p, cfg, exec)?;
        out.data_mut()[b * n * c..(b + 1) * n * c].copy_from_slice(yb.data());
    }
    Ok(out)
}

/// Rough activation footprint used to decide whether a run fits the budget.
pub fn predicted_bytes(kind: BlockKind, n: usize, batch: usize, channels: usize, heads: usize, latent: usize) -> u64 {
    let (n, b, c) = (n as u64, batch as u64, channels as u64);
    let linear = 8 * b * n * c * 16;
    match kind {
        BlockKind::SelfAttentionBlock => linear + 2 * 8 * b * heads as u64 * n * n,
        BlockKind::LisaBlock => linear + 8 * 8 * n * (c / heads as u64) * latent as u64,
    }
}

struct Runner<'a> {
    cfg: &'a BenchConfig,
    params: LiSABlockParams,
    lisa_cfg: LiSAConfig,
    x: Tensor,
    kind: BlockKind,
}

impl Runner<'_> {
    fn forward(&self, exec: Exec) -> Result<Tensor> {
        match self.kind {
            BlockKind::SelfAttentionBlock => {
                self_attention_block_forward(&self.x, &self.params, self.cfg.batch, self.cfg.heads, exec)
            }
            BlockKind::LisaBlock => lisa_block_forward(&self.x, &self.params, &self.lisa_cfg, self.cfg.batch, exec),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn measure(cfg: &BenchConfig, kind: BlockKind, n: usize, exec: Exec) -> Result<(f64, u64)> {
    let layout = TokenLayout::square_or_sequence(n);
    let lisa_cfg = LiSAConfig::new(layout, cfg.channels, cfg.heads, cfg.latent)?;
    let mut rng = rng_from_seed(cfg.seed ^ n as u64);
    let params = LiSABlockParams::init(&lisa_cfg, &mut rng);
    let x = normal_tensor(&[cfg.batch * n, cfg.channels], 1.0, &mut rng);
    let r = Runner {
        cfg,
        params,
        lisa_cfg,
        x,
        kind,
    };
    let (y, peak) = measure_peak(|| r.forward(Exec::Sequential));
    if !y?.all_finite() {
        return Err(Error::State(format!("{kind} produced non-finite output at N={n}")));
    }
    for _ in 0..cfg.warmup {
        r.forward(exec)?;
    }
    let mut times = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let t = Instant::now();
        let y = r.forward(exec)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        drop(y);
    }
    Ok((median(times).max(1e-6), peak.max(1) as u64))
}

fn run_all(cfg: &BenchConfig, exec: Exec) -> Result<Vec<BenchRecord>> {
    let mut kinds = cfg.kinds.clone();
    kinds.sort_by_key(|k| k.name());
    kinds.dedup();
    let mut tokens = cfg.tokens.clone();
    tokens.sort_unstable();
    tokens.dedup();
    let mut out = Vec::new();
    for &kind in &kinds {
        for &n in &tokens {
            let cm = CostModel::new(kind.operator(), n, cfg.channels, cfg.latent, cfg.heads);
            let macs = cm.block().total() * cfg.batch as u64;
            let fits = predicted_bytes(kind, n, cfg.batch, cfg.channels, cfg.heads, cfg.latent) <= cfg.memory_budget;
            let (latency_ms, peak_bytes) = if fits {
                let (l, p) = measure(cfg, kind, n, exec)?;
                (Some(l), Some(p))
            } else {
                (None, None)
            };
            out.push(BenchRecord {
                kind,
                tokens: n,
                batch: cfg.batch,
                channels: cfg.channels,
                macs,
                latency_ms,
                peak_bytes,
            });
        }
    }
    Ok(out)
}

/// Benchmarks every (kind, N) pair, sorted by kind name then token count.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    if cfg.threads == 1 {
        return run_all(cfg, Exec::Sequential);
    }
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::config(format!("cannot start {} worker threads: {e}", cfg.threads)))?;
        pool.install(|| run_all(cfg, Exec::Parallel))
    }
    #[cfg(not(feature = "parallel"))]
    Err(Error::config("built without the `parallel` feature; use --threads 1"))
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}
