use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use demp_core::data::{
    filter_unpaired, load_paired, load_unpaired, synth_corpus, tokenize, train_tagger, write_jsonl, DialogueExample,
    FilterStats, LabelSet, RawUtterance, SideSeqs, SynthOptions, TaggerOptions, UnpairedExample, UnpairedKind,
    UnpairedRecord, Vocabulary,
};
use demp_core::inference::greedy_generate;
use demp_core::metrics::{evaluate, EmbeddingTable};
use demp_core::model::Role;
use demp_core::sweep::{gradient_sweep, SweepOptions};
use demp_core::training::{load_checkpoint, save_checkpoint, Checkpoint, TrainData, Trainer};
use demp_core::{Direction, DualEmp, RunConfig};
use serde::Deserialize;

use crate::{ChatArgs, Command, EvaluateArgs, GenerateArgs, GradcheckArgs, PrepareArgs, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<demp_core::Error> for CliError {
    fn from(e: demp_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::PrepareData(a) => prepare_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Chat(a) => chat(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let opts = SynthOptions {
        n_labels: a.n_labels,
        examples_per_label: a.per_label,
        vocab_size: a.vocab_size,
        separability: a.separability,
        turn_pairs: a.turn_pairs,
        unpaired_per_label: a.unpaired_per_label,
        seed: a.seed,
    };
    let corpus = synth_corpus(&opts)?;
    corpus.write(&a.out)?;
    log::info!(
        "wrote {} train, {} valid, {} test conversations to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        a.out.display()
    );
    Ok(())
}

/// `--labels`, else labels.txt next to `beside`.
fn label_set(explicit: Option<&Path>, beside: Option<&Path>) -> Result<LabelSet> {
    let path = match (explicit, beside) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(b)) => b.parent().unwrap_or(Path::new(".")).join("labels.txt"),
        (None, None) => return Err(CliError::Validation("--labels is required".into())),
    };
    if !path.exists() {
        return Err(CliError::Validation(format!("label file {} not found; pass --labels", path.display())));
    }
    Ok(LabelSet::load(&path)?)
}

fn candidates(path: &Path, kind: UnpairedKind) -> Result<Vec<UnpairedRecord>> {
    let records = load_unpaired(path)?;
    if let Some(bad) = records.iter().position(|r| r.kind != kind) {
        return Err(CliError::Validation(format!(
            "{}: record {} has kind {:?}, expected {kind:?}",
            path.display(),
            bad + 1,
            records[bad].kind
        )));
    }
    Ok(records)
}

fn prepare_data(a: PrepareArgs) -> Result<()> {
    if a.unpaired_c.is_none() && a.unpaired_y.is_none() {
        return Err(CliError::Validation("give --unpaired-c and/or --unpaired-y".into()));
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(CliError::Validation(format!("threshold {} outside [0, 1]", a.threshold)));
    }
    let labels = label_set(a.labels.as_deref(), a.paired.as_deref())?;
    let tagger = if a.prescored {
        None
    } else {
        let paired = a
            .paired
            .as_deref()
            .ok_or_else(|| CliError::Validation("--paired is required unless --prescored".into()))?;
        let examples = load_paired(paired, &labels)?;
        Some(train_tagger(&examples, labels.len(), TaggerOptions::default())?)
    };
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;

    let mut report = serde_json::Map::new();
    let streams = [
        (a.unpaired_c.as_deref(), UnpairedKind::Context, "unpaired_context"),
        (a.unpaired_y.as_deref(), UnpairedKind::Response, "unpaired_response"),
    ];
    for (path, kind, name) in streams {
        let Some(path) = path else { continue };
        let records = candidates(path, kind)?;
        let classify = |r: &UnpairedRecord| -> demp_core::Result<(usize, f64)> {
            match &tagger {
                Some(t) => Ok(t.classify(&r.text)),
                None => {
                    let ex = UnpairedExample::from_record(r, &labels)?;
                    match r.confidence {
                        Some(c) => Ok((ex.label, c)),
                        None => Err(demp_core::Error::Invalid(format!("prescored record {:?} has no confidence", r.text))),
                    }
                }
            }
        };
        let (kept, stats): (Vec<UnpairedExample>, FilterStats) = filter_unpaired(&records, classify, a.threshold, a.min_len)?;
        let out: Vec<UnpairedRecord> = kept.iter().map(|k| k.to_record(&labels)).collect();
        write_jsonl(&a.out.join(format!("{name}.jsonl")), &out)?;
        report.insert(name.to_string(), serde_json::to_value(stats).map_err(|e| CliError::Runtime(e.to_string()))?);
    }
    println!("{}", serde_json::Value::Object(report));
    Ok(())
}

fn load_unpaired_examples(path: Option<&Path>, kind: UnpairedKind, labels: &LabelSet) -> Result<Vec<UnpairedExample>> {
    let Some(path) = path else { return Ok(Vec::new()) };
    let records = candidates(path, kind)?;
    records
        .iter()
        .map(|r| UnpairedExample::from_record(r, labels).map_err(CliError::from))
        .collect()
}

fn build_vocab(paired: &[DialogueExample], unpaired: &[&UnpairedExample], min_frequency: usize) -> Result<Vocabulary> {
    let mut seqs: Vec<Vec<String>> = Vec::new();
    for ex in paired {
        seqs.extend(ex.utterances.iter().map(|u| tokenize(&u.text)));
    }
    seqs.extend(unpaired.iter().map(|u| tokenize(&u.text)));
    Ok(Vocabulary::build(seqs.iter().map(Vec::as_slice), min_frequency)?)
}

fn train(a: TrainArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let best_path = a.out.join("best.demp");
    let last_path = a.out.join("last.demp");

    let mut trainer = match &a.checkpoint {
        Some(path) => {
            if a.config.is_some() || a.seed.is_some() || a.ablation.is_some() {
                log::warn!("resuming: --config, --seed and --ablation come from the checkpoint");
            }
            let last = load_checkpoint(path)?;
            let best = if best_path.exists() { Some(load_checkpoint(&best_path)?) } else { None };
            Trainer::resume(&last, best)?
        }
        None => {
            let cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let mut plan = cfg.plan()?;
            if let Some(s) = a.seed {
                plan.seed = s;
            }
            if let Some(ab) = a.ablation {
                plan.ablation = ab;
            }
            let labels = label_set(a.labels.as_deref(), Some(&a.paired))?;
            let paired = load_paired(&a.paired, &labels)?;
            let uc = load_unpaired_examples(a.unpaired_c.as_deref(), UnpairedKind::Context, &labels)?;
            let uy = load_unpaired_examples(a.unpaired_y.as_deref(), UnpairedKind::Response, &labels)?;
            let all_unpaired: Vec<&UnpairedExample> = uc.iter().chain(&uy).collect();
            let vocab = build_vocab(&paired, &all_unpaired, cfg.min_frequency())?;
            let model_cfg = cfg.model_config(vocab.len(), labels.len())?;
            let model = DualEmp::new(model_cfg, plan.seed)?;
            Trainer::new(plan, model, vocab, labels.names().to_vec())?
        }
    };

    let labels = LabelSet::new(trainer.labels.clone())?;
    let paired = load_paired(&a.paired, &labels)?;
    let valid = match &a.valid {
        Some(p) => load_paired(p, &labels)?,
        None => Vec::new(),
    };
    let uc = load_unpaired_examples(a.unpaired_c.as_deref(), UnpairedKind::Context, &labels)?;
    let uy = load_unpaired_examples(a.unpaired_y.as_deref(), UnpairedKind::Response, &labels)?;
    let data = TrainData::encode(&trainer.vocab, trainer.model.config.max_positions, &paired, &valid, &uc, &uy)?;
    log::info!(
        "{} paired, {} valid, {} unpaired contexts, {} unpaired responses; vocabulary {}",
        data.paired.len(),
        data.valid.len(),
        data.unpaired_c.len(),
        data.unpaired_y.len(),
        trainer.vocab.len()
    );

    let log_path = a.out.join("train_log.jsonl");
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(a.checkpoint.is_some())
        .write(true)
        .truncate(a.checkpoint.is_none())
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log_out = BufWriter::new(log_file);
    let mut on_step = |rec: &demp_core::training::StepRecord| -> demp_core::Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(log_out, "{line}").map_err(|e| demp_core::Error::Invalid(format!("{}: {e}", log_path.display())))
    };
    let mut on_epoch = |t: &Trainer, rec: &demp_core::training::EpochRecord| -> demp_core::Result<()> {
        save_checkpoint(&last_path, &t.checkpoint())?;
        if rec.improved {
            if let Some(best) = t.best() {
                save_checkpoint(&best_path, best)?;
            }
        }
        Ok(())
    };
    let outcome = trainer.fit(&data, &mut on_step, &mut on_epoch)?;
    log_out.flush().map_err(|e| io_err(&a.out, e))?;
    if !best_path.exists() {
        save_checkpoint(&best_path, &outcome.best)?;
    }
    let state = trainer.state();
    println!(
        "{}",
        serde_json::json!({
            "epochs": state.epoch,
            "steps": state.step,
            "best_epoch": state.best_epoch,
            "best_valid_ppl": state.best_valid_ppl,
            "stopped_early": outcome.stopped_early,
        })
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, DualEmp, LabelSet)> {
    let ckpt = load_checkpoint(path)?;
    let model = ckpt.model()?;
    let labels = LabelSet::new(ckpt.header.labels.clone())?;
    Ok((ckpt, model, labels))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let (ckpt, model, labels) = load_model(&a.checkpoint)?;
    let examples = load_paired(&a.paired, &labels)?;
    let table = match &a.embeddings {
        Some(p) => Some(EmbeddingTable::load(p)?),
        None => None,
    };
    let (report, samples) = evaluate(&model, &ckpt.header.vocab, labels.names(), &examples, table.as_ref())?;
    print!("{}", report.table());
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join("metrics.json");
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
        write_jsonl(&dir.join("samples.jsonl"), &samples)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ContextRecord {
    #[serde(default)]
    conv_id: Option<String>,
    utterances: Vec<RawUtterance>,
}

fn encode_context(vocab: &Vocabulary, turns: &[(Role, String)], max_positions: usize) -> Result<SideSeqs> {
    if turns.is_empty() {
        return Err(CliError::Validation("empty context".into()));
    }
    let ids: Vec<(Role, Vec<usize>)> = turns.iter().map(|(r, t)| (*r, vocab.encode(&tokenize(t)))).collect();
    Ok(SideSeqs::context(&ids, max_positions)?.0)
}

fn respond(model: &DualEmp, vocab: &Vocabulary, labels: &LabelSet, turns: &[(Role, String)], max_steps: usize) -> Result<(String, String, f64)> {
    let side = encode_context(vocab, turns, model.config.max_positions)?;
    let out = greedy_generate(model, &side.enc, Direction::Forward, max_steps)?;
    let words: Vec<String> = vocab.decode(&out.tokens);
    Ok((words.join(" "), labels.name(out.emotion).to_string(), out.emotion_prob))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let (ckpt, model, labels) = load_model(&a.checkpoint)?;
    let vocab = &ckpt.header.vocab;
    let file = File::open(&a.input).map_err(|e| io_err(&a.input, e))?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(&a.input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ContextRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Validation(format!("{}:{}: {e}", a.input.display(), idx + 1)))?;
        let turns: Vec<(Role, String)> = rec.utterances.iter().map(|u| (u.role, u.text.clone())).collect();
        let (response, emotion, probability) = respond(&model, vocab, &labels, &turns, a.max_steps)?;
        let context: Vec<String> = rec.utterances.iter().map(|u| u.text.clone()).collect();
        let mut obj = serde_json::json!({
            "context": context,
            "response": response,
            "emotion": emotion,
            "probability": probability,
        });
        if let Some(id) = rec.conv_id {
            obj["conv_id"] = serde_json::Value::String(id);
        }
        writeln!(out, "{obj}").map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    out.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn chat(a: ChatArgs) -> Result<()> {
    let (ckpt, model, labels) = load_model(&a.checkpoint)?;
    let vocab = &ckpt.header.vocab;
    let mut turns: Vec<(Role, String)> = Vec::new();
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    println!("type a message; /reset clears the context, /quit or end of input exits");
    loop {
        print!("> ");
        stdout.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).map_err(|e| CliError::Runtime(e.to_string()))? == 0 {
            break;
        }
        let line = line.trim();
        match line {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                turns.clear();
                continue;
            }
            _ => {}
        }
        turns.push((Role::Speaker, line.to_string()));
        let (response, emotion, p) = respond(&model, vocab, &labels, &turns, a.max_steps)?;
        println!("[{emotion} {p:.2}] {response}");
        turns.push((Role::Listener, response));
        // Keep the window from growing without bound; encoding truncates
        // to max_positions anyway.
        let cap = model.config.max_positions;
        let mut total: usize = turns.iter().map(|t| tokenize(&t.1).len()).sum();
        while total > cap && turns.len() > 1 {
            total -= tokenize(&turns.remove(0).1).len();
        }
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut opts = SweepOptions {
        seed: a.seed,
        tol: a.tol,
        ..SweepOptions::default()
    };
    if !a.small {
        let cfg = match &a.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let small = &opts.model;
        opts.model = cfg.model_config(small.vocab_size, small.n_labels)?;
        opts.model.dropout = 0.0;
        opts.stride = a.stride.max(1);
    }
    let started = std::time::Instant::now();
    let report = gradient_sweep(&opts)?;
    print!("{}", report.table());
    log::info!("sweep took {:.1}s", started.elapsed().as_secs_f64());
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {:.3e} >= {:.0e}",
            report.max_rel_error, report.tol
        )))
    }
}
