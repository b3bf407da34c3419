use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use laclip_core::dataset::{self, ManifestRecord, ParseOptions, Split};
use laclip_core::eval::{self, GoldMapping, DEFAULT_KS};
use laclip_core::fsutil::write_atomic;
use laclip_core::retrieval::{Direction, IndexOptions};
use laclip_core::trainer::{self, PairedData, ProjectionHead, TrainConfig};
use laclip_core::{cosine_similarity, patch_weights, EmbeddingStore, RetrievalIndex};

use crate::cli::{Scoring, Stores, TrainArgs};

/// A failure in the inputs rather than in how the command was invoked.
#[derive(Debug)]
pub struct DataError(pub String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn write_output(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn validate(manifest: &Path, lenient: bool) -> Result<String> {
    let report = dataset::parse_manifest_with(manifest, ParseOptions { lenient })?;
    for e in &report.errors {
        eprintln!("{}: {e}", manifest.display());
    }
    let out = dataset::summarize(&report.records).to_tsv();
    if !report.errors.is_empty() {
        print!("{out}");
        return Err(DataError(format!("{} invalid line(s)", report.errors.len())).into());
    }
    Ok(out)
}

pub fn split(manifest: &Path, seed: u64, out: &Path) -> Result<String> {
    let records = dataset::parse_manifest(manifest)?;
    let assignment = dataset::assign_splits(&records, seed);
    let labelled = dataset::apply_splits(&records, &assignment);
    let body: String = labelled.iter().map(|r| r.to_json_line() + "\n").collect();
    write_output(out, &body)?;

    let mut counts: BTreeMap<(&str, String), [usize; 3]> = BTreeMap::new();
    for r in &labelled {
        let slot = match r.split {
            Some(Split::Train) => 0,
            Some(Split::Test) => 1,
            _ => 2,
        };
        counts.entry((r.volume.as_str(), r.category.to_string())).or_default()[slot] += 1;
    }
    let mut text = String::from("volume\tcategory\ttrain\ttest\tval\n");
    for ((volume, category), [tr, te, va]) in counts {
        let _ = writeln!(text, "{volume}\t{category}\t{tr}\t{te}\t{va}");
    }
    Ok(text)
}

fn ids_in_split(records: &[ManifestRecord], split: Split) -> Vec<&str> {
    records.iter().filter(|r| r.split == Some(split)).map(|r| r.id.as_str()).collect()
}

pub fn train(args: &TrainArgs) -> Result<String> {
    let records = dataset::parse_manifest(&args.manifest)?;
    if records.iter().all(|r| r.split.is_none()) {
        bail!(DataError(format!(
            "{} has no split labels; run `laclip split` first",
            args.manifest.display()
        )));
    }
    let texts = EmbeddingStore::open(&args.texts)?;
    let images = EmbeddingStore::open(&args.images)?;
    let train_ids = ids_in_split(&records, args.split);
    if train_ids.len() < 2 {
        bail!(DataError(format!("split {} has {} record(s), need at least 2", args.split, train_ids.len())));
    }
    let data = PairedData::from_stores(&texts, &images, train_ids)?;
    let val = if args.no_val {
        None
    } else {
        let ids = ids_in_split(&records, args.val_split);
        Some(PairedData::from_stores(&texts, &images, ids)?)
    };
    let config = TrainConfig {
        batch_size: args.batch,
        learning_rate: args.lr,
        epochs: args.epochs,
        seed: args.seed,
        optimizer: args.optimizer,
        ..TrainConfig::default()
    };
    let outcome = trainer::train(&ProjectionHead::identity(texts.dim()), &data, &config, val.as_ref())?;
    outcome.head.save(&args.out)?;
    log::info!("{} steps, tau {:.6}, head written to {}", outcome.steps, outcome.head.tau, args.out.display());

    let mut text = String::from("epoch\tloss\tstep_loss\tval_r1\n");
    for rec in &outcome.history {
        text.push_str(&rec.to_tsv());
        text.push('\n');
    }
    Ok(text)
}

fn load_index(stores: &Stores, scoring: &Scoring) -> Result<RetrievalIndex> {
    let mut texts = EmbeddingStore::open(&stores.texts)?;
    let mut images = EmbeddingStore::open(&stores.images)?;
    if let Some(path) = &stores.head {
        let head = ProjectionHead::load(path)?;
        texts = trainer::apply_head(&head, &texts, false)?;
        images = trainer::apply_head(&head, &images, true)?;
    }
    let opts = IndexOptions {
        strict: !stores.lenient,
        ..IndexOptions::new(scoring.mode, scoring.alpha)
    };
    Ok(RetrievalIndex::build(texts, images, opts)?)
}

pub fn retrieve(direction: Direction, scoring: &Scoring, k: usize, stores: &Stores, query_id: &str) -> Result<String> {
    let index = load_index(stores, scoring)?;
    let hits = index.query_by_id(direction, query_id, k)?;
    let mut text = String::new();
    for h in hits {
        let _ = writeln!(text, "{}\t{:.6}\t{}", h.rank, h.score, h.candidate_id);
    }
    Ok(text)
}

pub struct EvalArgs<'a> {
    pub stores: &'a Stores,
    pub gold: &'a Path,
    pub scoring: &'a Scoring,
    pub report: Option<&'a Path>,
    pub pool_manifest: Option<&'a Path>,
    pub model: Option<&'a str>,
}

pub fn evaluate(args: EvalArgs<'_>) -> Result<String> {
    let gold = GoldMapping::load(args.gold)?;
    if gold.is_empty() {
        bail!(DataError(format!("{} has no pairs", args.gold.display())));
    }
    let full = load_index(args.stores, args.scoring)?;
    // candidates are restricted to the ids named in the gold file
    let texts = full.texts().subset(gold.pairs().iter().map(|(t, _)| t.as_str()));
    let images = full.images().subset(gold.pairs().iter().map(|(_, i)| i.as_str()));
    for (t, i) in gold.pairs() {
        if texts.get(t).is_none() || images.get(i).is_none() {
            bail!(DataError(format!("gold pair ({t}, {i}) is missing from the stores")));
        }
    }
    let index = RetrievalIndex::build(texts, images, full.options())?;
    let report = match args.pool_manifest {
        None => eval::evaluate_split(&index, &gold, DEFAULT_KS)?,
        Some(path) => {
            let pools: HashMap<String, String> = dataset::parse_manifest(path)?
                .into_iter()
                .map(|r| (r.id, r.category.to_string()))
                .collect();
            eval::evaluate_split_pooled(&index, &gold, DEFAULT_KS, &pools)?
        }
    };
    let model = args.model.unwrap_or(match args.scoring.mode {
        laclip_core::ScoreMode::Local => "local",
        laclip_core::ScoreMode::Global => "global",
    });
    let mut text = report.render_table(model);
    match args.report {
        Some(path) => write_output(path, &report.to_machine())?,
        None => {
            text.push('\n');
            text.push_str(&report.to_machine());
        }
    }
    Ok(text)
}

pub fn inspect_weights(images: &Path, image_id: &str, alpha: f64) -> Result<String> {
    let store = EmbeddingStore::open(images)?;
    let record = store
        .get(image_id)
        .ok_or_else(|| DataError(format!("image id {image_id:?} not found in {}", images.display())))?;
    if record.patches.is_empty() {
        bail!(DataError(format!("image {image_id:?} has no patches")));
    }
    let w = patch_weights(&record.global, &record.patches, alpha)?;
    let mut text = String::new();
    for (k, (wk, p)) in w.weights.iter().zip(&record.patches).enumerate() {
        let c = cosine_similarity(p, &record.global)?;
        let _ = writeln!(text, "{k}\t{c:.6}\t{wk:.9}");
    }
    Ok(text)
}

pub fn mr_check(fixtures: &Path) -> Result<String> {
    let body = std::fs::read_to_string(fixtures).with_context(|| format!("reading {}", fixtures.display()))?;
    let rows = eval::parse_table_fixtures(&body)?;
    let mut text = String::from("table\tmodel\tmean\tmr\tstatus\n");
    let mut bad = 0;
    for row in &rows {
        let ok = row.is_consistent();
        bad += usize::from(!ok);
        let _ = writeln!(
            text,
            "{}\t{}\t{:.4}\t{:.1}\t{}",
            row.table,
            row.model,
            row.computed_mr(),
            row.mr,
            if ok { "ok" } else { "MISMATCH" }
        );
    }
    if bad > 0 {
        print!("{text}");
        bail!(DataError(format!("{bad} of {} rows inconsistent", rows.len())));
    }
    Ok(text)
}
