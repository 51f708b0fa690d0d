//! The five commands, callable in-process.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use lstrl_core::backbone::LstrlNet;
use lstrl_core::data::{generate_synthetic, rrs_sample, Dataset, SampleMode};
use lstrl_core::eval::{cmc_map, distance_matrix, embed_split, EvalReport, RetrievalTable, SplitEmbeddings};
use lstrl_core::gradsuite::{run_suites, SuiteResult};
use lstrl_core::tensor::io::{load_checkpoint, load_tensor, save_tensor};
use lstrl_core::tensor::tape::corrupt_gradient_of;
use lstrl_core::tensor::{ParamStore, Tape};
use lstrl_core::training::checkpoint::{epoch_checkpoint_path, restore};
use lstrl_core::training::{train as train_epochs, EpochLog, LOG_HEADER};
use lstrl_core::{Error, Result, Tensor};

use crate::config::RunConfig;

pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const REPORT_TSV: &str = "eval_report.tsv";
pub const REPORT_LINE: &str = "eval_report.txt";

/// Name of the bias vector whose length gives the number of classes.
const CLASSIFIER_BIAS: &str = "classifier.b";

pub fn generate(cfg: &RunConfig, force: bool, out: &mut dyn Write) -> Result<usize> {
    let n = generate_synthetic(&cfg.synth(), &cfg.data_root, force)?;
    writeln!(out, "wrote {n} tracklets to {}", cfg.data_root.display())?;
    Ok(n)
}

/// Builds the network for `cfg` and loads parameter values from `path`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(LstrlNet, ParamStore<f32>)> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = load_checkpoint(path)?;
    let classes = ck
        .get(CLASSIFIER_BIAS)
        .and_then(|t| t.shape().first().copied())
        .ok_or_else(|| Error::Format(format!("checkpoint {} lacks {CLASSIFIER_BIAS}", path.display())))?;
    let mut store = ParamStore::new();
    let net = LstrlNet::build(cfg.backbone(classes), &mut store, cfg.seed)?;
    restore(&mut store, &ck)?;
    Ok((net, store))
}

/// Writes every line to both sinks.
struct Tee<'a> {
    file: File,
    echo: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        self.echo.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()?;
        self.echo.flush()
    }
}

/// Trains from scratch, or from `resume` if given. Returns the epochs run.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, force: bool, out: &mut dyn Write) -> Result<Vec<EpochLog>> {
    let dataset = Dataset::load(&cfg.data_root, "train")?;
    let classes = dataset.label_map().len();
    let (net, mut store, start) = match resume {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
            }
            let (net, mut store) = load_model(cfg, path)?;
            let start = restore(&mut store, &load_checkpoint(path)?)?;
            (net, store, start)
        }
        None => {
            let mut store = ParamStore::new();
            let net = LstrlNet::build(cfg.backbone(classes), &mut store, cfg.seed)?;
            (net, store, 0)
        }
    };
    let log_path = cfg.out_dir.join(LOG_FILE);
    if resume.is_none() && log_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already holds a run (use --force to overwrite)",
            cfg.out_dir.display()
        )));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_text())?;
    let file = if resume.is_some() && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = File::create(&log_path)?;
        writeln!(f, "{LOG_HEADER}")?;
        f
    };
    let mut tc = cfg.train();
    tc.augment.fill = dataset.channel_mean();
    let ck_dir = cfg.out_dir.join(CHECKPOINT_DIR);
    let mut tee = Tee { file, echo: out };
    let logs = train_epochs(&net, &mut store, &dataset, &tc, start, Some(&ck_dir), &mut tee)?;
    let last = epoch_checkpoint_path(&ck_dir, cfg.epochs);
    if last.is_file() {
        fs::copy(&last, cfg.out_dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(logs)
}

fn write_labels(path: &Path, split: &SplitEmbeddings) -> Result<()> {
    let mut text = String::from("identity\tcamera\n");
    for (id, cam) in split.ids.iter().zip(&split.cams) {
        text.push_str(&format!("{id}\t{cam}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Embeds query and gallery with the checkpoint's weights, scores them and
/// writes the report, the embeddings and their labels to `out.dir`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &mut dyn Write) -> Result<EvalReport> {
    let (net, store) = load_model(cfg, checkpoint)?;
    let query = Dataset::load(&cfg.data_root, "query")?;
    let gallery = Dataset::load(&cfg.data_root, "gallery")?;
    let table = RetrievalTable {
        query: embed_split(&net, &store, &query, cfg.eval_frames, cfg.eval_batch_size)?,
        gallery: embed_split(&net, &store, &gallery, cfg.eval_frames, cfg.eval_batch_size)?,
    };
    let d = distance_matrix(&table.query.embeddings, &table.gallery.embeddings, cfg.eval_metric)?;
    let report = cmc_map(&table, &d.values)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_TSV), report.tsv())?;
    fs::write(dir.join(REPORT_LINE), format!("{}\n", report.key_values()))?;
    save_tensor(dir.join("query_embeddings.lstt"), &table.query.embeddings)?;
    save_tensor(dir.join("gallery_embeddings.lstt"), &table.gallery.embeddings)?;
    write_labels(&dir.join("query_labels.tsv"), &table.query)?;
    write_labels(&dir.join("gallery_labels.tsv"), &table.gallery)?;
    writeln!(out, "{}", report.key_values())?;
    Ok(report)
}

/// Runs the gradient suites over seeds `0..gradcheck.seeds` and prints one
/// row per suite.
pub fn gradcheck(
    cfg: &RunConfig,
    only: Option<&str>,
    corrupt_op: Option<&str>,
    out: &mut dyn Write,
) -> Result<Vec<SuiteResult>> {
    let seeds: Vec<u64> = (0..cfg.gradcheck_seeds as u64).collect();
    corrupt_gradient_of(corrupt_op);
    let results = run_suites(&seeds, only);
    corrupt_gradient_of(None);
    let results = results?;
    if results.is_empty() {
        return Err(Error::Config(format!("no gradient suite matches {:?}", only.unwrap_or(""))));
    }
    writeln!(
        out,
        "{:<20} {:>9} {:>12} {:>6} {:>14} {:<6} worst",
        "suite", "tol", "max_rel_err", "seeds", "kinks/entries", "status"
    )?;
    for r in &results {
        writeln!(
            out,
            "{:<20} {:>9.1e} {:>12.3e} {:>6} {:>14} {:<6} {}",
            r.name,
            r.tolerance,
            r.max_rel_err,
            r.seeds,
            format!("{}/{}", r.kinks, r.entries),
            if r.passed { "PASS" } else { "FAIL" },
            r.worst
        )?;
    }
    Ok(results)
}

/// Loads every `frame_*.lst` of a tracklet directory, in name order.
pub fn load_clip_frames(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("clip directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".lst"))
    });
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no frame files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let f: Tensor<f32> = load_tensor(p)?.into_real();
            if f.rank() != 3 || f.shape()[2] != 3 {
                return Err(Error::Data(format!(
                    "frame {} has shape {:?}, expected [H,W,3]",
                    p.display(),
                    f.shape()
                )));
            }
            Ok(f)
        })
        .collect()
}

/// Encodes `eval.frames` frames of the clip and writes `stage{s}_D{i}.lstt`,
/// `stage{s}_Mf.lstt` and `stage{s}_Mb.lstt` for every block-bearing stage.
pub fn inspect(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    clip_dir: &Path,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<Vec<PathBuf>> {
    let (net, store) = match checkpoint {
        Some(p) => load_model(cfg, p)?,
        None => {
            let mut store = ParamStore::new();
            let net = LstrlNet::build(cfg.backbone(cfg.synth_identities), &mut store, cfg.seed)?;
            (net, store)
        }
    };
    let frames = load_clip_frames(clip_dir)?;
    let mut rng = rand_free_rng();
    let picked = rrs_sample(frames.len(), cfg.eval_frames, SampleMode::Eval, &mut rng)?;
    let clip = Tensor::stack(&picked.iter().map(|&i| frames[i].clone()).collect::<Vec<_>>())
        .map_err(|e| Error::Data(format!("clip frames differ in shape: {e}")))?;
    let mut tape = Tape::new();
    let x = tape.constant(clip);
    let output = net.forward(&mut tape, &store, x)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for trace in &output.traces {
        let s = trace.stage;
        let mut dumps = Vec::new();
        if let Some(g) = &trace.appearance {
            for (i, d) in g.d.iter().enumerate() {
                if let Some(d) = d {
                    dumps.push((format!("stage{s}_D{}.lstt", i + 1), *d));
                }
            }
        }
        if let Some(m) = &trace.motion {
            dumps.push((format!("stage{s}_Mf.lstt"), m.m_fwd));
            if let Some(b) = m.m_bwd {
                dumps.push((format!("stage{s}_Mb.lstt"), b));
            }
        }
        for (name, var) in dumps {
            let path = out_dir.join(name);
            save_tensor(&path, tape.value(var))?;
            writeln!(out, "{} {:?}", path.display(), tape.shape(var))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Eval-mode sampling never draws from its generator; any seed will do.
fn rand_free_rng() -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}
