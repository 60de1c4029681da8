use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use trimodal::config::{gen_config, train_config, Settings};
use trimodal::corpus::{load_corpus, save_corpus};
use trimodal::datagen::{generate, save_manifest, GenManifest};
use trimodal::evalkit::{save_report, write_row_csv, CategoryMatchOracle};
use trimodal::index::{HCIndex, SearchParams};
use trimodal::model::query_vector;
use trimodal::serve::{
    build_eval_records, category_gate_means, corpus_embeddings, load_embeddings, run_eval,
    save_embeddings, write_gate_csv,
};
use trimodal::text::Vocabulary;
use trimodal::train::{
    append_loss_csv, load_checkpoint, prepare, save_checkpoint, train_loop, TrainState,
};
use trimodal::Result;

/// Text-to-product retrieval: three-tower training, embedding export,
/// hierarchical index, and evaluation.
#[derive(Parser)]
#[command(name = "trimodal", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.peak_lr=3e-3. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(path) => Settings::from_file(path)?,
            None => Settings::default(),
        };
        for spec in &self.sets {
            s.apply_override(spec)?;
        }
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic product corpus.
    GenData {
        /// Corpus output path (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Manifest path; defaults to `<out>.manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Generation seed (overrides `gen.seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model on a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory for vocab, loss log, and checkpoints.
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a saved checkpoint (its config snapshot wins).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save `checkpoint-<step>.ckpt` every this many steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Objective wiring: make, ibns, no-ma, or no-ke.
        #[arg(long)]
        loss_mode: Option<String>,
        /// Training seed (overrides `train.seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Embed every product in a corpus with a trained checkpoint.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Embedding file output path.
        #[arg(long)]
        out: PathBuf,
        /// Also write per-category mean gate weights to this CSV.
        #[arg(long)]
        gate_csv: Option<PathBuf>,
    },
    /// Cluster exported embeddings into a search index.
    BuildIndex {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Children per internal node.
        #[arg(long, default_value_t = 16)]
        branching: usize,
        /// Internal levels above the leaves.
        #[arg(long, default_value_t = 1)]
        depth: usize,
        /// Clustering seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Embed a query and search the index.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Children expanded per probed node.
        #[arg(long, default_value_t = 4)]
        nprobe: usize,
    },
    /// Retrieval metrics over every corpus query.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Retrieval depth per query.
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        nprobe: usize,
        /// Cutoffs reported as recall@K.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
        /// Report JSON output path.
        #[arg(long)]
        report: PathBuf,
        /// Optional per-query CSV output path.
        #[arg(long)]
        rows: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, manifest, seed, config } => {
            let mut s = config.settings()?;
            if let Some(seed) = seed {
                s.apply_override(&format!("gen.seed={seed}"))?;
            }
            let cfg = gen_config(&mut s)?;
            s.finish()?;
            let products = generate(&cfg)?;
            save_corpus(&out, &products)?;
            let manifest_path = manifest.unwrap_or_else(|| {
                let mut p = out.as_os_str().to_owned();
                p.push(".manifest.json");
                PathBuf::from(p)
            });
            save_manifest(
                &manifest_path,
                &GenManifest { config: cfg, n_products: products.len() },
            )?;
            println!(
                "wrote {} products to {} (manifest {})",
                products.len(),
                out.display(),
                manifest_path.display()
            );
            Ok(())
        }
        Cmd::Train { corpus, out_dir, resume, checkpoint_every, loss_mode, seed, config } => {
            let mut s = config.settings()?;
            if let Some(mode) = loss_mode {
                s.apply_override(&format!("train.loss_mode={mode}"))?;
            }
            if let Some(seed) = seed {
                s.apply_override(&format!("train.seed={seed}"))?;
            }
            let cfg = train_config(&mut s)?;
            s.finish()?;

            let products = load_corpus(&corpus)?;
            let (resumed, cfg) = match &resume {
                Some(path) => {
                    let (state, ckpt_cfg) = load_checkpoint(path)?;
                    if ckpt_cfg != cfg {
                        eprintln!("note: resuming with the checkpoint's config snapshot");
                    }
                    (Some(state), ckpt_cfg)
                }
                None => (None, cfg),
            };
            let (vocab, freq, total) = prepare(&products, &cfg)?;
            let state = match resumed {
                Some(state) => state,
                None => TrainState::fresh(&cfg, vocab.len()),
            };

            std::fs::create_dir_all(&out_dir)?;
            vocab.save(&out_dir.join("vocab.txt"))?;
            let csv = out_dir.join("loss.csv");
            if state.step == 0 && csv.exists() {
                std::fs::remove_file(&csv)?;
            }

            eprintln!(
                "training {} mode: {} products, batch {}, {total} steps",
                cfg.loss_mode.as_str(),
                products.len(),
                cfg.batch_size
            );
            let ckpt_cfg = cfg.clone();
            let ckpt_dir = out_dir.clone();
            let final_state =
                train_loop(&products, &cfg, &vocab, &freq, state, total, |st, c| {
                    let step = st.step - 1;
                    append_loss_csv(&csv, step, c)?;
                    if step % 25 == 0 || st.step == total {
                        eprintln!("step {step}: total {:.4}", c.total);
                    }
                    if let Some(every) = checkpoint_every {
                        if st.step % every == 0 && st.step < total {
                            let path = ckpt_dir.join(format!("checkpoint-{}.ckpt", st.step));
                            save_checkpoint(st, &ckpt_cfg, &path)?;
                        }
                    }
                    Ok(())
                })?;
            let model_path = out_dir.join("model.ckpt");
            save_checkpoint(&final_state, &cfg, &model_path)?;
            println!(
                "trained to step {} ({}); checkpoint {}",
                final_state.step,
                cfg.loss_mode.as_str(),
                model_path.display()
            );
            Ok(())
        }
        Cmd::ExportEmbeddings { checkpoint, vocab, corpus, out, gate_csv } => {
            let (state, cfg) = load_checkpoint(&checkpoint)?;
            let vocab = Vocabulary::load(&vocab)?;
            let products = load_corpus(&corpus)?;
            let (ids, rows) = corpus_embeddings(&state.store, &cfg.model, &vocab, &products)?;
            save_embeddings(&ids, &rows, &out)?;
            if let Some(path) = gate_csv {
                let means = category_gate_means(&state.store, &cfg.model, &vocab, &products)?;
                write_gate_csv(&means, &path)?;
            }
            println!(
                "exported {} embeddings (dim {}) to {}",
                ids.len(),
                rows.first().map_or(0, |r| r.len()),
                out.display()
            );
            Ok(())
        }
        Cmd::BuildIndex { embeddings, out, branching, depth, seed } => {
            let items = load_embeddings(&embeddings)?;
            let index = HCIndex::build(&items, branching, depth, seed)?;
            index.save(&out)?;
            println!(
                "indexed {} products (branching {branching}, depth {depth}) into {}",
                items.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Search { checkpoint, vocab, index, query, k, nprobe } => {
            let (state, cfg) = load_checkpoint(&checkpoint)?;
            let vocab = Vocabulary::load(&vocab)?;
            let index = HCIndex::load(&index)?;
            let u = query_vector(&state.store, &cfg.model, &vocab, &query)?;
            let result = index.search(&u, &SearchParams { k, nprobe })?;
            for hit in &result.hits {
                println!("{}\t{:.6}", hit.product_id, hit.score);
            }
            if result.short {
                eprintln!("note: fewer than {k} products reachable at nprobe {nprobe}");
            }
            Ok(())
        }
        Cmd::Eval { checkpoint, vocab, corpus, index, k, nprobe, ks, report, rows } => {
            let (state, cfg) = load_checkpoint(&checkpoint)?;
            let vocab = Vocabulary::load(&vocab)?;
            let products = load_corpus(&corpus)?;
            let index = HCIndex::load(&index)?;
            let params = SearchParams { k, nprobe };
            let records =
                build_eval_records(&state.store, &cfg.model, &vocab, &products, &index, &params)?;
            let summary = run_eval(&records, &products, &ks)?;
            save_report(&summary, &report)?;
            if let Some(path) = rows {
                let oracle = CategoryMatchOracle::from_corpus(&products)?;
                write_row_csv(&records, &oracle, &path)?;
            }
            println!("queries evaluated: {}", summary.rows);
            println!("p_rel:  {:.4}", summary.p_rel);
            println!("p_cate: {:.4}", summary.p_cate);
            for (k, r) in &summary.recall_at_k {
                println!("recall@{k}: {r:.4}");
            }
            Ok(())
        }
    }
}
