use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dsae_core::eval::{run_evaluation_suite, swap_decode};
use dsae_core::gradcheck::{run_suite, GradcheckReport};
use dsae_core::synthdata::{generate_dataset, read_dataset, write_dataset, Dataset, SequenceRecord, FORMAT_VERSION};
use dsae_core::training::{load_checkpoint, save_checkpoint, TrainState, LOG_HEADER};
use dsae_core::Rng;
use serde_json::json;

use crate::config::ExperimentConfig;

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const REPORT_FILE: &str = "eval_report.csv";

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// `<train>.provenance.json`, next to the training file.
pub fn provenance_path(train: &Path) -> PathBuf {
    train.with_extension("provenance.json")
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let d = &cfg.data;
    let generated = generate_dataset(&d.spec, d.n_sequences, d.seed)?;
    for (path, set) in [(&d.train, &generated.train), (&d.val, &generated.val)] {
        ensure_parent(path)?;
        write_dataset(set, path)?;
    }
    let provenance = json!({
        "format_version": FORMAT_VERSION,
        "seed": d.seed,
        "n_sequences": d.n_sequences,
        "n_train": generated.train.len(),
        "n_val": generated.val.len(),
        "duplicate_triples": generated.duplicates,
        "spec": d.spec,
    });
    let sidecar = provenance_path(&d.train);
    fs::write(&sidecar, serde_json::to_string_pretty(&provenance)? + "\n")
        .with_context(|| format!("writing {}", sidecar.display()))?;
    println!(
        "wrote {} train and {} val sequences ({} repeated factor triples)",
        generated.train.len(),
        generated.val.len(),
        generated.duplicates
    );
    Ok(())
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let train = read_dataset(&cfg.data.train)?;
    let val = read_dataset(&cfg.data.val)?;
    for (name, set) in [("train", &train), ("val", &val)] {
        if set.is_empty() {
            bail!("{name} dataset is empty");
        }
        if set.bins() != cfg.train.model.d_input || set.frames() != cfg.train.model.seq_len {
            bail!(
                "{name} dataset has T={}, D={} but the model expects T={}, D={}",
                set.frames(),
                set.bins(),
                cfg.train.model.seq_len,
                cfg.train.model.d_input
            );
        }
    }
    Ok((train, val))
}

/// Keeps the header and every row up to `epoch` from an existing log.
fn truncated_log(path: &Path, epoch: usize) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != LOG_HEADER {
                bail!("{} does not start with the training-log header", path.display());
            }
        } else {
            let row_epoch: usize = line
                .split(',')
                .next()
                .and_then(|e| e.parse().ok())
                .with_context(|| format!("{} line {}: bad epoch", path.display(), i + 1))?;
            if row_epoch > epoch {
                break;
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Write the checkpoint and return after this epoch.
    pub stop_after_epoch: Option<usize>,
}

pub fn train(cfg: &ExperimentConfig, options: &TrainOptions) -> Result<TrainState> {
    let (train, val) = load_data(cfg)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join(LOG_FILE);

    let (mut state, log_prefix) = match &options.resume {
        Some(path) => {
            let state = load_checkpoint(path, Some(&cfg.train))?;
            if state.config != cfg.train {
                bail!("checkpoint {} was written with a different [train] section", path.display());
            }
            let prefix = truncated_log(&log_path, state.epoch)?;
            (state, prefix)
        }
        None => (TrainState::new(cfg.train.clone())?, format!("{LOG_HEADER}\n")),
    };
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    log.write_all(log_prefix.as_bytes())?;

    let stop_after = options.stop_after_epoch.unwrap_or(usize::MAX);
    while !state.finished() && state.epoch < stop_after {
        let entry = state.step_epoch(&train, &val)?;
        for row in entry.csv_rows() {
            writeln!(log, "{row}")?;
        }
        if entry.improved {
            save_checkpoint(&state, &out.join(BEST_CHECKPOINT))?;
        }
        eprintln!(
            "epoch {:>4} stage {} train {:.5} val {:.5}",
            entry.epoch,
            entry.stage.number(),
            entry.train.total,
            entry.val.total
        );
    }
    log.flush()?;
    save_checkpoint(&state, &out.join(FINAL_CHECKPOINT))?;
    Ok(state)
}

/// Best checkpoint when one exists, otherwise the final one.
pub fn default_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    let best = cfg.output_dir.join(BEST_CHECKPOINT);
    if best.exists() {
        best
    } else {
        cfg.output_dir.join(FINAL_CHECKPOINT)
    }
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<String> {
    let (train, val) = load_data(cfg)?;
    let state = load_checkpoint(checkpoint, Some(&cfg.train))?;
    let report = run_evaluation_suite(&state.params, &train, &val, &cfg.eval)?;
    let csv = report.to_csv();
    ensure_parent(out)?;
    fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    Ok(csv)
}

pub const SWAP_FILES: [&str; 5] = ["x_i.dseq", "x_j.dseq", "recon_i.dseq", "x_vswap.dseq", "x_zswap.dseq"];

/// Writes x^i, x^j, the reconstruction of i and both swaps as one-record
/// datasets in `out_dir`.
pub fn swap(cfg: &ExperimentConfig, checkpoint: &Path, i: usize, j: usize, out_dir: &Path) -> Result<()> {
    let (_, val) = load_data(cfg)?;
    if i >= val.len() || j >= val.len() {
        bail!("indices {i}, {j} out of range for {} validation sequences", val.len());
    }
    let state = load_checkpoint(checkpoint, Some(&cfg.train))?;
    let partner = Dataset {
        records: vec![val.records[i].clone(), val.records[j].clone()],
        n_factors: val.n_factors,
    };
    let mut rng = Rng::seed_from_u64(cfg.eval.seed);
    let decodes = swap_decode(&state.params, &partner, &[1, 0], &cfg.eval, &mut rng)?;
    let (ri, rj) = (&val.records[i], &val.records[j]);
    let record = |x, from: &SequenceRecord| SequenceRecord {
        x,
        instrument: from.instrument,
        octave: from.octave,
        melody: None,
    };
    let outputs = [
        ri.clone(),
        rj.clone(),
        record(decodes.recon[0].clone(), ri),
        record(decodes.x_vswap[0].clone(), rj),
        record(decodes.x_zswap[0].clone(), ri),
    ];
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (name, rec) in SWAP_FILES.iter().zip(outputs) {
        let set = Dataset {
            records: vec![rec],
            n_factors: val.n_factors,
        };
        write_dataset(&set, &out_dir.join(name))?;
    }
    Ok(())
}

pub fn grad_check(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    Ok(run_suite(cfg.gradcheck.seed, cfg.gradcheck.trials)?)
}
