use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use tokrag_core::decoder::{decode_collab, records_jsonl, DecodeOptions, DecodeSession, ModelHandle, PirStrategy};
use tokrag_core::eval::{
    build_dataset, evaluate_oracle_suite, oracle_suite, report_csv, score_set, EvalItem, EvalReport, Method,
    ScoringOptions,
};
use tokrag_core::hmm::{run_sweep, sample_passages, sample_world, summarize, sweep_csv};
use tokrag_core::lm::{load_weights, save_weights, ModelWeights, TokenizerVocab};
use tokrag_core::probe::{attention_mass_series, dist_change_series, fusion_layer};
use tokrag_core::retriever::{assemble_retrieved_list, ingest, InvertedIndex};
use tokrag_core::{RetrievedList, TokenId};

use crate::config::{RunConfig, Stamp};
use crate::{Cli, CliError, Command, StrategyArg};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn out_dir(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no output directory (--out)".into()))?;
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".stamp.json");
    PathBuf::from(name)
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes") + "\n"
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("no {what} path given")))
}

struct TextModel {
    weights: ModelWeights,
    vocab: TokenizerVocab,
    index: Option<InvertedIndex>,
}

impl TextModel {
    fn load(config: &RunConfig) -> Result<Self, CliError> {
        let weights = load_weights(required(&config.model, "model")?)?;
        let vocab = TokenizerVocab::load(required(&config.vocab, "vocab")?)?;
        if vocab.len() > weights.config.vocab_size {
            return Err(CliError::Run(format!(
                "vocabulary has {} tokens but the model only {}",
                vocab.len(),
                weights.config.vocab_size
            )));
        }
        let index = config.index.as_deref().map(InvertedIndex::load).transpose()?;
        Ok(Self { weights, vocab, index })
    }

    fn retrieve(&self, query: &str, k: usize) -> Result<RetrievedList, CliError> {
        let Some(index) = &self.index else {
            return Ok(RetrievedList::empty(self.vocab.delimiter()));
        };
        let docs: Vec<_> = index
            .search(query, k)?
            .iter()
            .filter_map(|h| index.doc(&h.doc_id).cloned())
            .collect();
        Ok(assemble_retrieved_list(&docs, &self.vocab)?)
    }

    fn prefix(&self, query: &str) -> Result<Vec<TokenId>, CliError> {
        let ids = self.vocab.tokenize(query);
        if ids.is_empty() {
            return Err(CliError::Run("query has no tokens".into()));
        }
        Ok(ids)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::VerifyTheory { out, seed, seeds } => {
            override_opt(&mut config.out, out);
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(n) = seeds {
                config.seeds = (config.seed..config.seed + n).collect();
            }
            config.validate()?;
            verify_theory(&config)
        }
        Command::Probe { model, vocab, index, query, k, a, out } => {
            override_opt(&mut config.model, model);
            override_opt(&mut config.vocab, vocab);
            override_opt(&mut config.index, index);
            override_opt(&mut config.out, out);
            override_val(&mut config.top_k, k);
            override_val(&mut config.probe_threshold, a);
            config.validate()?;
            probe(&config, &query)
        }
        Command::Index { corpus, out } => {
            config.validate()?;
            let index = InvertedIndex::build(ingest(&corpus)?);
            index.save(&out)?;
            write(&sidecar(&out), &Stamp::new("index", &config).to_json())?;
            eprintln!("indexed {} documents into {}", index.doc_count(), out.display());
            Ok(())
        }
        Command::Search { index, query, k } => {
            override_opt(&mut config.index, index);
            override_val(&mut config.top_k, k);
            config.validate()?;
            search(&config, &query)
        }
        Command::Decode {
            model,
            vocab,
            index,
            oracle,
            query,
            k,
            max_tokens,
            strategy,
            seed,
            out,
        } => {
            let oracle = oracle || model.as_deref() == Some("oracle");
            if !oracle {
                override_opt(&mut config.model, model.map(PathBuf::from));
            }
            override_opt(&mut config.vocab, vocab);
            override_opt(&mut config.index, index);
            override_opt(&mut config.out, out);
            override_val(&mut config.top_k, k);
            override_val(&mut config.max_tokens, max_tokens);
            override_val(&mut config.seed, seed);
            config.validate()?;
            decode(&config, oracle, &query, strategy)
        }
        Command::EvalBd {
            model,
            vocab,
            index,
            oracle,
            sentences,
            methods,
            seed,
            out,
        } => {
            override_opt(&mut config.model, model);
            override_opt(&mut config.vocab, vocab);
            override_opt(&mut config.index, index);
            override_opt(&mut config.out, out);
            override_val(&mut config.seed, seed);
            config.validate()?;
            let methods = methods
                .split(',')
                .map(|m| Method::parse(m.trim()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Config(e.to_string()))?;
            eval_bd(&config, oracle, sentences.as_deref(), &methods)
        }
        Command::GenModel {
            out,
            seed,
            layers,
            d_model,
            heads,
            head_dim,
            vocab_size,
            context,
            corpus,
            vocab_out,
        } => {
            let mc = &mut config.model_config;
            override_val(&mut mc.layers, layers);
            override_val(&mut mc.d_model, d_model);
            override_val(&mut mc.heads, heads);
            override_val(&mut mc.head_dim, head_dim);
            override_val(&mut mc.vocab_size, vocab_size);
            override_val(&mut mc.context, context);
            override_val(&mut config.seed, seed);
            config.validate()?;
            gen_model(&config, &out, corpus.as_deref(), vocab_out)
        }
    }
}

fn override_opt<T>(field: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *field = flag;
    }
}

fn override_val<T>(field: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *field = v;
    }
}

fn verify_theory(config: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(config)?;
    let rows = run_sweep(&config.sweep())?;
    let summary = summarize(&rows)?;
    write(&dir.join("sweep.csv"), &sweep_csv(&rows))?;
    write(&dir.join("summary.json"), &json(&summary))?;
    write(&dir.join("stamp.json"), &Stamp::new("verify-theory", config).to_json())?;
    println!(
        "rho {:.4}  agreement {:.4}  bound held {:.4}  n {}",
        summary.rho, summary.agreement_rate, summary.bound_hold_rate, summary.n
    );
    Ok(())
}

#[derive(Serialize)]
struct FusionSummary {
    l_star: usize,
    argmax_f: usize,
    first_cross: usize,
    a: f64,
}

fn probe(config: &RunConfig, query: &str) -> Result<(), CliError> {
    let dir = out_dir(config)?;
    let tm = TextModel::load(config)?;
    let retrieved = tm.retrieve(query, config.top_k)?;
    if retrieved.is_empty() {
        return Err(CliError::Run("nothing retrieved; probing needs a retrieved span".into()));
    }
    let prefix = tm.prefix(query)?;
    let llm = tm.weights.forward_trace(&prefix)?;
    let rag = tm.weights.forward_trace(&retrieved.rag_input(&prefix))?;
    let f = attention_mass_series(&rag, retrieved.span())?;
    let g = dist_change_series(&rag, &llm, &tm.weights)?;
    let mut csv = String::from("layer,f,g\n");
    for (layer, (fv, gv)) in f.iter().zip(&g).enumerate() {
        csv.push_str(&format!("{layer},{fv},{gv}\n"));
    }
    write(&dir.join("probe.csv"), &csv)?;
    write(&dir.join("stamp.json"), &Stamp::new("probe", config).to_json())?;
    let point = fusion_layer(&f, &g, config.probe_threshold)?;
    let summary = FusionSummary {
        l_star: point.l_star,
        argmax_f: point.argmax_f,
        first_cross: point.first_g_cross,
        a: point.threshold_a,
    };
    write(&dir.join("fusion.json"), &json(&summary))?;
    println!("l* = {}", point.l_star);
    Ok(())
}

fn search(config: &RunConfig, query: &str) -> Result<(), CliError> {
    let index = InvertedIndex::load(required(&config.index, "index")?)?;
    let hits = index.search(query, config.top_k)?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    let fail = |e: csv::Error| CliError::Run(e.to_string());
    w.write_record(["rank", "doc_id", "score"]).map_err(fail)?;
    for (rank, h) in hits.iter().enumerate() {
        w.write_record([(rank + 1).to_string(), h.doc_id.clone(), h.score.to_string()])
            .map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::Run(e.to_string()))?;
    eprint!("{}", Stamp::new("search", config).to_json());
    Ok(())
}

fn decode(config: &RunConfig, oracle: bool, query: &str, strategy: Option<StrategyArg>) -> Result<(), CliError> {
    let matching = PirStrategy::Matching {
        threshold: config.probe_threshold,
        freeze_l_star: false,
    };
    let pick = |default: PirStrategy| match strategy {
        None => default,
        Some(StrategyArg::Exact) => PirStrategy::Exact,
        Some(StrategyArg::Matching) => matching,
        Some(StrategyArg::PureLm) => PirStrategy::PureLm,
    };
    let (output, text) = if oracle {
        let world = sample_world(&config.world, config.seed)?;
        let retrieved = sample_passages(&world, config.passages, config.passage_length, config.seed ^ 0x5eed)?;
        let prefix: Vec<TokenId> = if query.trim().is_empty() {
            world.sample_sequence(world.star_index(), config.prefix_length, config.seed ^ 0x7e47)?
        } else {
            query
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| CliError::Run(format!("bad token id {t:?}"))))
                .collect::<Result<_, _>>()?
        };
        let opts = options(config, pick(PirStrategy::Exact));
        let mut session = DecodeSession::new(ModelHandle::Oracle(&world), retrieved, prefix, opts)?;
        let out = decode_collab(&mut session)?;
        let text = out.tokens.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        (out, text)
    } else {
        let tm = TextModel::load(config)?;
        let retrieved = tm.retrieve(query, config.top_k)?;
        let prefix = tm.prefix(query)?;
        let opts = options(config, pick(matching));
        let mut session = DecodeSession::new(ModelHandle::Tiny(&tm.weights), retrieved, prefix, opts)?;
        let out = decode_collab(&mut session)?;
        let text = tm.vocab.detokenize(&out.tokens);
        (out, text)
    };
    println!("{text}");
    if config.out.is_some() {
        let dir = out_dir(config)?;
        write(&dir.join("trail.jsonl"), &records_jsonl(&output.records)?)?;
        write(&dir.join("output.txt"), &format!("{text}\n"))?;
        write(&dir.join("stamp.json"), &Stamp::new("decode", config).to_json())?;
    }
    Ok(())
}

fn options(config: &RunConfig, strategy: PirStrategy) -> DecodeOptions {
    DecodeOptions {
        max_tokens: config.max_tokens,
        stop_ids: Vec::new(),
        strategy,
        parallel: true,
        top_k: None,
    }
}

fn eval_bd(config: &RunConfig, oracle: bool, sentences: Option<&Path>, methods: &[Method]) -> Result<(), CliError> {
    let dir = out_dir(config)?;
    let mut scoring = ScoringOptions {
        strategy: PirStrategy::Exact,
        top_k: None,
        consistency_runs: config.consistency_runs,
        temperature: config.temperature,
        seed: config.seed,
    };
    let reports: Vec<EvalReport> = if oracle {
        let cases = oracle_suite(&config.suite)?;
        evaluate_oracle_suite(&cases, methods, &scoring, config.truncation_cap)?
    } else {
        let path = sentences.ok_or_else(|| CliError::Config("eval-bd needs --sentences or --oracle".into()))?;
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let tm = TextModel::load(config)?;
        let mut items = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let sentence = tm.vocab.tokenize(line);
            let query = tm.vocab.detokenize(&sentence[..sentence.len().div_ceil(2)]);
            items.push(EvalItem {
                retrieved: tm.retrieve(&query, config.top_k)?,
                sentence,
            });
        }
        if items.is_empty() {
            eprintln!("warning: no sentences in {}", path.display());
        }
        scoring.strategy = PirStrategy::Matching {
            threshold: config.probe_threshold,
            freeze_l_star: false,
        };
        let model = ModelHandle::Tiny(&tm.weights);
        let samples = build_dataset(model, &items, config.truncation_cap, config.seed)?;
        methods
            .iter()
            .map(|&m| Ok(score_set(model, &items, &samples, m, &scoring)?.into_report(m)?))
            .collect::<Result<_, CliError>>()?
    };
    for r in &reports {
        write(&dir.join(format!("{}.csv", r.method)), &report_csv(r))?;
        write(&dir.join(format!("{}.json", r.method)), &json(r))?;
        println!(
            "{:<12} auc {:.4}  f1 {:.4}  n {}  skipped {}",
            r.method, r.auc, r.f1, r.n_samples, r.skipped
        );
    }
    write(&dir.join("stamp.json"), &Stamp::new("eval-bd", config).to_json())?;
    Ok(())
}

fn gen_model(config: &RunConfig, out: &Path, corpus: Option<&Path>, vocab_out: Option<PathBuf>) -> Result<(), CliError> {
    let weights = ModelWeights::random(config.model_config, config.seed)?;
    save_weights(&weights, out)?;
    if let Some(corpus) = corpus {
        let docs = ingest(corpus)?;
        let vocab = TokenizerVocab::build(docs.iter().map(|d| d.text.as_str()), config.model_config.vocab_size)?;
        let path = vocab_out.unwrap_or_else(|| out.with_extension("vocab"));
        vocab.save(&path)?;
        eprintln!("wrote vocabulary of {} tokens to {}", vocab.len(), path.display());
    }
    write(&sidecar(out), &Stamp::new("gen-model", config).to_json())?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
