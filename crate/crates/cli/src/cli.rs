use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use laclip_core::dataset::Split;
use laclip_core::retrieval::Direction;
use laclip_core::trainer::Optimizer;
use laclip_core::ScoreMode;

#[derive(Debug, Parser)]
#[command(name = "laclip", version, about = "Local-alignment cross-modal retrieval over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a manifest and print per-(source, volume, category) counts.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        /// Report every bad line instead of stopping at the first.
        #[arg(long)]
        lenient: bool,
    },
    /// Assign train/test/val labels per (volume, category) group at 7:1:2.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = laclip_core::DEFAULT_SEED)]
        seed: u64,
        /// Output manifest with the split field filled in.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train projection heads on one manifest split; history goes to stdout.
    Train(TrainArgs),
    /// Top-K retrieval for one query id.
    Retrieve {
        #[arg(long, default_value = "t2i")]
        direction: Direction,
        #[command(flatten)]
        scoring: Scoring,
        #[arg(long, default_value_t = 10, value_parser = positive)]
        k: usize,
        #[command(flatten)]
        stores: Stores,
        #[arg(long)]
        query_id: String,
    },
    /// Recall@{1,5,10} in both directions and Mean Recall over gold pairs.
    Eval {
        #[command(flatten)]
        stores: Stores,
        /// Tab-separated `text_id image_id` lines.
        #[arg(long)]
        gold: PathBuf,
        #[command(flatten)]
        scoring: Scoring,
        /// Write the key=value report here instead of after the table.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Rank each query only against candidates of its own category.
        #[arg(long, requires = "manifest")]
        pool_by_category: bool,
        /// Manifest providing categories for --pool-by-category.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
    },
    /// Print the patch weights of one image.
    InspectWeights {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        image_id: String,
        #[arg(long, default_value_t = laclip_core::DEFAULT_ALPHA, value_parser = alpha)]
        alpha: f64,
    },
    /// Check that published MR values equal the mean of their six recalls.
    MrCheck {
        #[arg(long)]
        fixtures: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Stores {
    #[arg(long)]
    pub texts: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Projection head (CHED) applied to both stores first.
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Score patch-free images globally and clamp oversized K instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct Scoring {
    #[arg(long, default_value = "local")]
    pub mode: ScoreMode,
    #[arg(long, default_value_t = laclip_core::DEFAULT_ALPHA, value_parser = alpha)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub texts: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Manifest with split labels (see `split`).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Split scored for R@1 after every epoch.
    #[arg(long, default_value = "val")]
    pub val_split: Split,
    /// Skip validation scoring.
    #[arg(long)]
    pub no_val: bool,
    #[arg(long, default_value_t = 32, value_parser = batch)]
    pub batch: usize,
    #[arg(long, default_value_t = 5e-5, value_parser = learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = laclip_core::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value = "adam")]
    pub optimizer: Optimizer,
    #[arg(long, default_value = "head.ched")]
    pub out: PathBuf,
}

fn alpha(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("alpha must be finite and >= 0, got {s}"))
    }
}

fn learning_rate(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("learning rate must be finite and > 0, got {s}"))
    }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn batch(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 2 => Ok(v),
        Ok(v) => Err(format!("batch must be at least 2, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn rejects_bad_flags_before_io() {
        for args in [
            &["laclip", "retrieve", "--texts", "t", "--images", "i", "--query-id", "q", "--k", "0"][..],
            &["laclip", "retrieve", "--texts", "t", "--images", "i", "--query-id", "q", "--alpha", "-1"],
            &["laclip", "retrieve", "--texts", "t", "--images", "i", "--query-id", "q", "--mode", "fuzzy"],
            &["laclip", "train", "--texts", "t", "--images", "i", "--manifest", "m", "--batch", "1"],
            &["laclip", "train", "--texts", "t", "--images", "i", "--manifest", "m", "--lr", "0"],
            &["laclip", "eval", "--texts", "t", "--images", "i", "--gold", "g", "--pool-by-category"],
        ] {
            assert!(Cli::try_parse_from(args).is_err(), "{args:?}");
        }
        let ok = Cli::try_parse_from(["laclip", "inspect-weights", "--images", "i", "--image-id", "x"]).unwrap();
        assert!(matches!(ok.command, Command::InspectWeights { alpha, .. } if alpha == 1.02));
    }
}
