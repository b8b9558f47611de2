use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use medvill::corpus::SplitCounts;
use medvill::harness::{self, DEFAULT_DECODE_LEN};
use medvill::masks::MaskScheme;
use medvill::tasks::Task;
use medvill::Error;

/// Joint vision-language transformer toolkit for synthetic chest X-ray studies.
#[derive(Parser)]
#[command(name = "medvill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (PGM images plus JSON-lines manifests).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_valid: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre-train with masked language modeling and image-report matching.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a checkpoint (or fresh weights) on a downstream task.
    Finetune {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate on the test split with bootstrap statistics.
    Eval {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Second checkpoint for Welch t-test p-values.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Decode budget for generation metrics.
        #[arg(long, default_value_t = DEFAULT_DECODE_LEN)]
        max_len: usize,
    },
    /// Greedily decode reports for every study of a split.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = DEFAULT_DECODE_LEN)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one attention head as a CSV matrix and a PGM heat map.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        report: String,
        /// Corpus directory whose vocabulary tokenizes the report.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// bi, s2s, bar or noncross (default: the checkpoint's scheme).
        #[arg(long)]
        mask: Option<MaskScheme>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<String, Error> {
    match cli.command {
        Command::GenData { out, n_train, n_valid, n_test, seed } => {
            let counts = SplitCounts { train: n_train, valid: n_valid, test: n_test };
            harness::cmd_gen_data(&out, counts, seed)
        }
        Command::Pretrain { config, data, out } => harness::cmd_pretrain(&config, &data, &out),
        Command::Finetune { task, ckpt, data, config, out } => {
            harness::cmd_finetune(task, ckpt.as_deref(), &data, config.as_deref(), &out)
        }
        Command::Eval { task, ckpt, data, out, compare, max_len } => {
            let report = harness::cmd_eval(task, &ckpt, &data, &out, compare.as_deref(), max_len)?;
            let mut lines = Vec::new();
            for e in &report.entries {
                let p = e.p_value.map(|p| format!(" p={p:.4}")).unwrap_or_default();
                lines.push(format!("{} {:.4} (mean {:.4}, std {:.4}){p}", e.metric, e.value, e.mean, e.std));
            }
            Ok(lines.join("\n"))
        }
        Command::Generate { ckpt, data, split, max_len, out } => {
            harness::cmd_generate(&ckpt, &data, &split, max_len, &out)
        }
        Command::ExportAttn { ckpt, image, report, data, layer, head, mask, out } => {
            let vocab = harness::load_vocab(&data)?;
            harness::cmd_export_attn(&ckpt, &image, &report, &vocab, layer, head, mask, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
