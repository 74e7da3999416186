use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use parcon_core::evaluation::{predict_groups, write_predictions, ConsensusReport};
use parcon_core::losses::gradcheck::gradient_suite;
use parcon_core::similarity::{filter_paraphrases, TokenHashEmbedder};
use parcon_core::training::{self, LossKind, RunLog, Scheme};
use parcon_core::{build_indices, generate, Dataset, IndexedDataset, NetworkState, Sample};
use serde::Deserialize;

use crate::config::RunConfig;
use crate::Split;

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating output directory {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// The resolved config is stored next to every command's outputs.
fn log_config(cfg: &RunConfig) -> Result<()> {
    write_file(&out_dir(cfg)?.join("config.toml"), &cfg.to_toml()?)
}

fn embedder(cfg: &RunConfig) -> Result<TokenHashEmbedder> {
    Ok(TokenHashEmbedder::new(cfg.d_q)?)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(path) => Dataset::load(path).with_context(|| format!("loading dataset {}", path.display())),
        None => Ok(generate(&cfg.synth_spec())?),
    }
}

fn index(cfg: &RunConfig, d: Dataset) -> Result<Option<IndexedDataset>> {
    if d.samples.is_empty() {
        return Ok(None);
    }
    Ok(Some(build_indices(d, cfg.epsilon, &embedder(cfg)?)?))
}

/// `(train, held_out)` split by paraphrase group.
fn split(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = load_dataset(cfg)?;
    Ok(d.split_by_group(cfg.held_out_fraction, cfg.seed)?)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let d = generate(&cfg.synth_spec())?;
    let path = dir.join("dataset.jsonl");
    d.save(&path)?;
    log_config(cfg)?;
    println!("wrote {} samples to {}", d.samples.len(), path.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateRecord {
    sample_id: String,
    candidates: Vec<String>,
}

pub fn filter(cfg: &RunConfig, candidates: &Path) -> Result<()> {
    let dir = out_dir(cfg)?;
    let mut d = load_dataset(cfg)?;
    let emb = embedder(cfg)?;
    let f = fs::File::open(candidates).with_context(|| format!("opening {}", candidates.display()))?;
    let mut added = Vec::new();
    let (mut records, mut offered) = (0usize, 0usize);
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CandidateRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed candidate record", candidates.display(), n + 1))?;
        let Some(original) = d.samples.iter().find(|s| s.sample_id == rec.sample_id) else {
            bail!("{}:{}: unknown sample `{}`", candidates.display(), n + 1, rec.sample_id);
        };
        if original.is_paraphrase {
            bail!("{}:{}: `{}` is itself a paraphrase", candidates.display(), n + 1, rec.sample_id);
        }
        let mut policy = cfg.filter_policy();
        policy.rng_seed = cfg.seed.wrapping_add(records as u64);
        let kept = filter_paraphrases(&original.question_text, &rec.candidates, &policy, &emb)?;
        for (j, text) in kept.into_iter().enumerate() {
            added.push(Sample {
                sample_id: format!("{}_para{j}", original.sample_id),
                question_text: text,
                is_paraphrase: true,
                ..original.clone()
            });
        }
        records += 1;
        offered += rec.candidates.len();
    }
    let kept = added.len();
    d.samples.extend(added);
    // Fails early on duplicate ids or malformed groups.
    build_indices(d.clone(), cfg.epsilon, &emb)?;
    let path = dir.join("filtered.jsonl");
    d.save(&path)?;
    write_file(
        &dir.join("filter_summary.txt"),
        &format!("originals = {records}\ncandidates = {offered}\nkept = {kept}\n"),
    )?;
    log_config(cfg)?;
    println!("kept {kept} of {offered} candidates for {records} originals; wrote {}", path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let plan = cfg.plan()?;
    let (train_set, held) = split(cfg)?;
    let header = train_set.header;
    let train_idx = index(cfg, train_set)?.context("training split is empty")?;
    let eval_idx = index(cfg, held)?;
    let state = NetworkState::new(cfg.dims(header.d_v, header.num_labels), cfg.seed);
    let out = training::train(&plan, &train_idx, eval_idx.as_ref(), state)?;

    out.log.write_jsonl(create(&dir.join("runlog.jsonl"))?)?;
    if let Some(boundary) = &out.phase_boundary {
        boundary.save(dir.join("phase_boundary.json"))?;
    }
    out.exported().save(dir.join("checkpoint.json"))?;
    log_config(cfg)?;

    let (mut ce, mut ssc, mut joint) = (0, 0, 0);
    for (_, kind, _) in out.log.steps() {
        match kind {
            LossKind::Ce => ce += 1,
            LossKind::Ssc => ssc += 1,
            LossKind::Joint => joint += 1,
        }
    }
    println!("trained {} iterations ({ce} CE, {ssc} SSC, {joint} joint)", ce + ssc + joint);
    if let Some((it, acc, cs)) = out.log.last_eval() {
        println!("held-out at iteration {it}: accuracy {acc:.4}, CS {cs:.4?}");
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, which: Split) -> Result<()> {
    let dir = out_dir(cfg)?;
    let ck_path = checkpoint.map_or_else(|| dir.join("checkpoint.json"), Path::to_path_buf);
    let state = NetworkState::load(&ck_path).with_context(|| format!("loading checkpoint {}", ck_path.display()))?;
    let data = match which {
        Split::All => load_dataset(cfg)?,
        Split::Train => split(cfg)?.0,
        Split::HeldOut => split(cfg)?.1,
    };
    let idx = index(cfg, data)?.context("evaluation split is empty")?;
    let groups = predict_groups(&state, &idx)?;
    let report = ConsensusReport::from_groups(&groups, cfg.k_max)?;
    write_predictions(&groups, create(&dir.join("predictions.jsonl"))?)?;
    write_file(&dir.join("report.txt"), &report.to_key_value())?;
    write_file(&dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    print!("{}", report.to_key_value());
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let rows = gradient_suite(cfg.gradcheck_instances, cfg.seed, cfg.gradcheck_step);
    let mut table = format!(
        "{:<14} {:>9} {:>14} {:>16} {:>6}\n",
        "loss", "instances", "max_rel_error", "max_coord_error", "status"
    );
    let mut failed = Vec::new();
    for r in &rows {
        let pass = r.max_rel_error <= cfg.gradcheck_tolerance;
        if !pass {
            failed.push(r.loss.name());
        }
        table.push_str(&format!(
            "{:<14} {:>9} {:>14.3e} {:>16.3e} {:>6}\n",
            r.loss.name(),
            r.instances,
            r.max_rel_error,
            r.max_coord_error,
            if pass { "PASS" } else { "FAIL" }
        ));
    }
    write_file(&dir.join("gradcheck.txt"), &table)?;
    log_config(cfg)?;
    print!("{table}");
    if !failed.is_empty() {
        bail!(
            "gradient check above tolerance {:e} for: {}",
            cfg.gradcheck_tolerance,
            failed.join(", ")
        );
    }
    Ok(())
}

struct RunRow {
    name: String,
    losses: String,
    scaling: String,
    n_type: String,
    scheme: String,
    final_eval: Option<(f64, Vec<f64>)>,
}

fn describe_run(dir: &Path) -> Result<RunRow> {
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let log_path = dir.join("runlog.jsonl");
    let f = fs::File::open(&log_path).with_context(|| format!("opening {}", log_path.display()))?;
    let log = RunLog::read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", log_path.display()))?;
    let has = |k: LossKind| log.steps().any(|(_, kind, _)| kind == k);
    let (ce, ssc) = match (has(LossKind::Joint), has(LossKind::Ce), has(LossKind::Ssc)) {
        (true, _, _) => (cfg.beta < 1.0, cfg.beta > 0.0),
        (false, ce, ssc) => (ce, ssc),
    };
    let losses = match (ssc, ce) {
        (true, true) => "SSC + CE",
        (true, false) => "SSC",
        (false, true) => "CE",
        (false, false) => "none",
    };
    let (scaling, n_type) = if ssc {
        (
            format!("{} (s={})", serde_json::to_value(cfg.alpha_mode)?.as_str().unwrap_or("?"), cfg.s),
            format!("{}/{}/{}", cfg.w_img, cfg.w_que, cfg.w_rand),
        )
    } else {
        ("-".to_string(), "-".to_string())
    };
    let scheme = match cfg.scheme {
        _ if !ssc || !ce => "-".to_string(),
        Scheme::Joint => format!("joint (beta={})", cfg.beta),
        Scheme::Alternate => format!("alternate (N_ce={})", cfg.n_ce),
        Scheme::PretrainFinetune => format!("pretrain-finetune ({}+{})", cfg.n_p, cfg.n_f),
    };
    Ok(RunRow {
        name: dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        losses: losses.to_string(),
        scaling,
        n_type,
        scheme,
        final_eval: log.last_eval().map(|(_, acc, cs)| (acc, cs.to_vec())),
    })
}

pub fn report(cfg: &RunConfig, runs: &[PathBuf]) -> Result<()> {
    let dir = out_dir(cfg)?;
    let rows = runs.iter().map(|r| describe_run(r)).collect::<Result<Vec<_>>>()?;
    let k_max = rows
        .iter()
        .filter_map(|r| r.final_eval.as_ref().map(|(_, cs)| cs.len()))
        .max()
        .unwrap_or(0);
    let mut header = vec!["run", "Loss(es)", "Scaling", "N-Type", "Train Scheme", "Accuracy"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend((1..=k_max).map(|k| format!("CS({k})")));
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in &rows {
        let mut cells = vec![
            r.name.clone(),
            r.losses.clone(),
            r.scaling.clone(),
            r.n_type.clone(),
            r.scheme.clone(),
        ];
        match &r.final_eval {
            Some((acc, cs)) => {
                cells.push(format!("{:.2}", 100.0 * acc));
                cells.extend((0..k_max).map(|k| cs.get(k).map_or("-".into(), |v| format!("{:.2}", 100.0 * v))));
            }
            None => cells.extend(std::iter::repeat_n("-".to_string(), k_max + 1)),
        }
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    let path = dir.join("report.md");
    let mut w = create(&path)?;
    w.write_all(out.as_bytes())?;
    w.flush()?;
    print!("{out}");
    Ok(())
}
