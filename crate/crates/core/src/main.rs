use clap::{Parser, Subcommand, ValueEnum};
use lisa_core::bench::{run_bench, to_csv, BenchConfig, BlockKind};
use lisa_core::cost::{estimate_flops, FftCostMode, OperatorKind};
use lisa_core::kernels::{export_kernel_images, probe_image};
use lisa_core::model::{build_isotropic, count_parameters, ModelConfig};
use lisa_core::random::default_seed;
use lisa_core::verify::run_suite;
use lisa_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

/// Structure-aware attention toolkit: self-checks, benchmarks, cost and
/// parameter accounting, kernel export.
///
/// Costs are counted in multiply-accumulate operations (one multiply-add = 1).
/// The LISA_SEED environment variable overrides the default random seed.
#[derive(Parser)]
#[command(name = "lisa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "lisanet-i-t")]
    LisanetIT,
}

#[derive(Clone, Copy, ValueEnum)]
enum FftCost {
    Exact,
    Zero,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle and invariant suite; exit 0 iff every check passes.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time single blocks and account their peak activation bytes; writes CSV.
    Bench {
        /// Comma list of self_attention_block, lisa_block.
        #[arg(long, value_delimiter = ',', default_value = "lisa_block,self_attention_block")]
        kinds: Vec<String>,
        /// Comma list of token counts; perfect squares run on a square grid.
        #[arg(long, value_delimiter = ',', default_value = "196,256,1024,4096")]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 96)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        latent: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Worker threads; 1 runs everything on the calling thread.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Skip runs predicted to need more activation memory than this.
        #[arg(long, default_value_t = 2048)]
        budget_mib: u64,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multiply-accumulate estimate of the classifier for each token mixer.
    Flops {
        #[arg(long, value_enum, default_value = "lisanet-i-t")]
        config: Preset,
        #[arg(long, value_enum, default_value = "exact")]
        fft_cost: FftCost,
        #[arg(long)]
        latent: Option<usize>,
    },
    /// Export effective query kernels as P5 graymaps plus raw CSV.
    Kernels {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9,10,11")]
        layers: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        heads: Vec<usize>,
        /// Query token (row-major); defaults to the grid center.
        #[arg(long)]
        query: Option<usize>,
        #[arg(long, default_value = "kernels")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parameter counts by component.
    Params {
        #[arg(long, value_enum, default_value = "lisanet-i-t")]
        config: Preset,
        #[arg(long)]
        latent: Option<usize>,
    },
}

fn preset(p: Preset, latent: Option<usize>) -> ModelConfig {
    let cfg = match p {
        Preset::LisanetIT => ModelConfig::isotropic_tiny(),
    };
    match latent {
        Some(d) => cfg.with_latent(d),
        None => cfg,
    }
}

fn verify(seed: u64) -> Result<bool> {
    let checks = run_suite(seed);
    println!("{:<34} {:<6} {:>8}  detail", "check", "result", "seconds");
    for c in &checks {
        let mark = if c.passed { "PASS" } else { "FAIL" };
        println!("{:<34} {:<6} {:>8.2}  {}", c.name, mark, c.seconds, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify { seed } => verify(seed.unwrap_or_else(default_seed)),
        Command::Bench {
            kinds,
            tokens,
            batch,
            channels,
            heads,
            latent,
            repeats,
            warmup,
            threads,
            budget_mib,
            seed,
            out,
        } => {
            let cfg = BenchConfig {
                kinds: kinds.iter().map(|k| k.parse::<BlockKind>()).collect::<Result<_>>()?,
                tokens,
                batch,
                channels,
                heads,
                latent,
                repeats,
                warmup,
                threads,
                seed: seed.unwrap_or_else(default_seed),
                memory_budget: budget_mib << 20,
            };
            let records = run_bench(&cfg)?;
            for r in records.iter().filter(|r| !r.measured()) {
                eprintln!("{} at N={} skipped: exceeds the memory budget", r.kind, r.tokens);
            }
            eprintln!("threads: {threads}");
            let csv = to_csv(&records);
            match out {
                Some(path) => std::fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?,
                None => print!("{csv}"),
            }
            Ok(true)
        }
        Command::Flops { config, fft_cost, latent } => {
            let cfg = preset(config, latent);
            let mode = match fft_cost {
                FftCost::Exact => FftCostMode::Exact,
                FftCost::Zero => FftCostMode::Zero,
            };
            println!("{} ({} tokens, C={}, D={}), MACs", cfg.name, cfg.tokens(), cfg.channels, cfg.latent);
            println!("{:<16} {:>14} {:>14} {:>14} {:>14} {:>10}", "operator", "patch_embed", "per_block", "attention", "head", "total_G");
            for kind in OperatorKind::ALL {
                let c = estimate_flops(&cfg, kind, mode)?;
                println!(
                    "{:<16} {:>14} {:>14} {:>14} {:>14} {:>10.4}",
                    kind.name(),
                    c.patch_embed,
                    c.block.total(),
                    c.block.attention,
                    c.head,
                    c.total() as f64 / 1e9
                );
            }
            Ok(true)
        }
        Command::Kernels {
            layers,
            heads,
            query,
            out_dir,
            seed,
        } => {
            let seed = seed.unwrap_or_else(default_seed);
            let cfg = ModelConfig::isotropic_tiny();
            let model = build_isotropic(&cfg, seed)?;
            let g = cfg.grid();
            let query = query.unwrap_or((g / 2) * g + g / 2);
            let image = probe_image(cfg.image, seed.wrapping_add(1));
            let written = export_kernel_images(&model, &image, &layers, &heads, query, &out_dir)?;
            for w in &written {
                println!("{} {}", w.pgm.display(), w.csv.display());
            }
            Ok(true)
        }
        Command::Params { config, latent } => {
            let cfg = preset(config, latent);
            let p = count_parameters(&cfg)?;
            println!("{} (D={})", cfg.name, cfg.latent);
            println!("patch_embed        {:>10}", p.patch_embed);
            println!("block.norms        {:>10}", p.block.norms);
            println!("block.qkv          {:>10}", p.block.qkv);
            println!("block.out_proj     {:>10}", p.block.out_proj);
            println!("block.mlp          {:>10}", p.block.mlp);
            println!("block.embeddings   {:>10}", p.block.embeddings);
            println!("blocks             {:>10}", p.blocks);
            println!("final_norm         {:>10}", p.final_norm);
            println!("head               {:>10}", p.head);
            println!("total              {:>10} ({:.2} M)", p.total(), p.total() as f64 / 1e6);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
