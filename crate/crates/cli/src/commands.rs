use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use ragaseq::classify::{Classifier, Outcome};
use ragaseq::corpus::{self, Dataset, EntrySource, ManifestEntry, SynthConfig};
use ragaseq::eval::{self, ExperimentConfig, Fold};
use ragaseq::nnet::{self, Head, ModelConfig, ModelParams};
use ragaseq::rank::{self, EmbeddingIndex, RankerConfig, SubsequencePool};
use ragaseq::sampling::{self, SamplerConfig};
use ragaseq::tokenize::{self, QuantizerConfig, TokenSequence, Vocabulary, PAD_ID};
use ragaseq::train::{self, SequenceClassification, TrainConfig, TrainReport};
use ragaseq::{pitch, wav, PitchConfig};

use crate::args::*;

pub fn dispatch(cmd: &Command, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::Synth(a) => synth(a, g),
        Command::Pitch(a) => pitch_cmd(a, g),
        Command::Tokenize(a) => tokenize_cmd(a, g),
        Command::Sample(a) => sample(a, g),
        Command::Train(a) => train_cmd(a, g),
        Command::Infer(a) => infer(a, g),
        Command::RankTrain(a) => rank_train(a, g),
        Command::Index(a) => index(a, g),
        Command::Query(a) => query(a, g),
        Command::Eval(a) => eval_cmd(a, g),
        Command::LengthStudy(a) => length_study(a, g),
    }
}

fn pitch_config(a: &PitchArgs) -> PitchConfig {
    PitchConfig {
        fmin_hz: a.fmin,
        fmax_hz: a.fmax,
        hop_s: a.hop,
        frame_s: a.frame,
        voicing_threshold: a.voicing_threshold,
        octave_cost: a.octave_cost,
    }
}

fn quant_config(a: &QuantArgs) -> QuantizerConfig {
    QuantizerConfig {
        k: a.k,
        clamp_octaves: a.clamp_octaves,
        rest_token: false,
    }
}

/// The quantizer a model's vocabulary was built with.
fn model_quantizer(cfg: &ModelConfig) -> Result<QuantizerConfig> {
    let per_octave = 24 * cfg.k_levels as usize;
    let clamp = cfg.vocab_size.saturating_sub(3) / per_octave.max(1);
    let q = QuantizerConfig {
        k: cfg.k_levels,
        clamp_octaves: clamp as u32,
        rest_token: false,
    };
    ensure!(
        clamp > 0 && Vocabulary::new(&q)?.len() == cfg.vocab_size,
        "model vocabulary of {} does not match any quantizer with k = {}",
        cfg.vocab_size,
        cfg.k_levels
    );
    Ok(q)
}

fn load_corpus(a: &CorpusArgs, q: &QuantizerConfig) -> Result<(Dataset, Vec<TokenSequence>)> {
    let ds = corpus::load_manifest(&a.manifest)?;
    let seqs = ds
        .load_sequences(q, &pitch_config(&a.pitch))
        .with_context(|| format!("loading recordings of {}", a.manifest.display()))?;
    log::info!("loaded {} recordings in {} classes", seqs.len(), ds.n_classes());
    Ok((ds, seqs))
}

fn sampler_config(a: &SamplerArgs, seed: u64) -> SamplerConfig {
    SamplerConfig {
        subseq_len: a.subseq_len,
        num_samples_override: a.num_samples,
        seed,
    }
}

fn model_config(a: &ModelArgs, vocab: &Vocabulary, n_classes: usize, subseq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: a.embed_dim,
        lstm_hidden: a.hidden,
        dense1_units: a.dense,
        n_classes,
        dropout_rate: a.dropout,
        head: Head::Classifier,
        k_levels: vocab.k(),
        subseq_len,
    }
}

fn train_config(a: &OptimArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: a.batch_size,
        learning_rate: a.lr,
        max_epochs: a.epochs,
        workers: a.workers,
        staleness_bound: a.staleness_bound,
        seed,
        ..TrainConfig::default()
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn file_stem(p: &Path) -> Result<String> {
    Ok(p.file_stem()
        .with_context(|| format!("{} has no file name", p.display()))?
        .to_string_lossy()
        .into_owned())
}

fn synth(a: &SynthArgs, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    let cfg = SynthConfig {
        n_ragas: a.ragas,
        recordings_per_raga: a.per_raga,
        seq_len: a.length,
        seed: g.seed,
        render_audio: a.audio,
        k_levels: a.k,
        noise_rate: a.noise,
        ragas: None,
    };
    let ds = corpus::generate_synthetic_corpus(&cfg, &g.out)?;
    let ragas = g.out.join("ragas.json");
    std::fs::write(&ragas, serde_json::to_string_pretty(&cfg.raga_models()?)?)?;
    log::info!("wrote {} recordings of {} ragas", ds.len(), ds.n_classes());
    Ok(vec![g.out.join("manifest.csv"), ragas])
}

fn pitch_cmd(a: &PitchCmd, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    let (samples, sr) = wav::read_wav(&a.input)?;
    let contour = pitch::track_pitch(&samples, sr, &pitch_config(&a.pitch))?;
    let out = g.out.join(format!("{}.csv", file_stem(&a.input)?));
    contour.write_csv(&out)?;
    log::info!(
        "{} frames, {} voiced",
        contour.frames.len(),
        contour.voiced().count()
    );
    Ok(vec![out])
}

fn tokenize_cmd(a: &TokenizeArgs, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    let q = quant_config(&a.quant);
    if let Some(input) = &a.input {
        let tonic = a.tonic.context("--tonic is required with --in")?;
        let contour = pitch::PitchContour::read_csv(input)?;
        let values: Vec<i32> = tokenize::quantize_contour(&contour, tonic, &q)?
            .into_iter()
            .flatten()
            .collect();
        let out = g.out.join(format!("{}.tok", file_stem(input)?));
        tokenize::write_token_file(&out, &values)?;
        return Ok(vec![out]);
    }
    let manifest = a
        .manifest
        .as_ref()
        .context("either --in or --manifest is required")?;
    let ds = corpus::load_manifest(manifest)?;
    let dir = g.out.join("tokens");
    std::fs::create_dir_all(&dir)?;
    let pcfg = pitch_config(&a.pitch);
    let entries = ds
        .entries
        .par_iter()
        .map(|e| -> Result<ManifestEntry> {
            let source = match &e.source {
                EntrySource::Tokens(p) => EntrySource::Tokens(p.clone()),
                EntrySource::Audio(p) => {
                    let (samples, sr) = wav::read_wav(p)?;
                    let contour = pitch::track_pitch(&samples, sr, &pcfg)?;
                    let values: Vec<i32> = tokenize::quantize_contour(&contour, e.tonic_hz, &q)?
                        .into_iter()
                        .flatten()
                        .collect();
                    let out = dir.join(format!("{}.tok", e.id));
                    tokenize::write_token_file(&out, &values)?;
                    EntrySource::Tokens(out)
                }
            };
            Ok(ManifestEntry { source, ..e.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = g.out.join("manifest.csv");
    corpus::write_manifest(&out, &Dataset::from_entries(entries)?)?;
    Ok(vec![out, dir])
}

fn sample(a: &SampleArgs, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    let (ds, seqs) = load_corpus(&a.corpus, &quant_config(&a.quant))?;
    let scfg = sampler_config(&a.sampler, g.seed);
    scfg.validate()?;
    let max_len = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
    let n_r = scfg.num_samples(max_len);
    let names = ds.class_names();
    let mut lines = vec!["source_id,raga,start,length".to_string()];
    for (i, s) in seqs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(scfg.seed);
        rng.set_stream(i as u64);
        for start in sampling::sample_starts(s.len(), scfg.subseq_len, n_r, &mut rng) {
            let len = scfg.subseq_len.min(s.len() - start);
            lines.push(format!("{},{},{start},{len}", s.source_id, names[s.raga]));
        }
    }
    let out = g.out.join("samples.csv");
    write_lines(&out, &lines)?;
    log::info!("{n_r} samples per recording, {} in total", lines.len() - 1);
    Ok(vec![out])
}

fn train_cmd(a: &TrainCmd, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    let q = quant_config(&a.quant);
    let vocab = Vocabulary::new(&q)?;
    let (ds, seqs) = load_corpus(&a.corpus, &q)?;
    let scfg = sampler_config(&a.sampler, g.seed);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let (subseqs, n_r) = eval::training_subsequences(&refs, &scfg)?;
    log::info!("{n_r} subsequences per recording, {} in total", subseqs.len());
    let cfg = model_config(&a.model, &vocab, ds.n_classes(), scfg.subseq_len);
    let tcfg = TrainConfig {
        loss_threshold: a.loss_threshold,
        ..train_config(&a.optim, g.seed)
    };
    let objective = SequenceClassification::<f32>::new(&cfg, &subseqs)?;
    let init = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(g.seed));

    let best_path = g.out.join("model.ckpt");
    let mut best = f64::INFINITY;
    let mut save_best = |r: &TrainReport, p: &ModelParams<f32>| -> ragaseq::Result<()> {
        let e = r.epochs.last().expect("called after an epoch");
        log::info!("epoch {}: loss {:.5} ({:.1}s)", e.epoch, e.loss, e.wall_s);
        if e.loss < best {
            best = e.loss;
            nnet::save_checkpoint(&best_path, &cfg, p)?;
        }
        Ok(())
    };
    let (params, report) = train::train(&objective, init, &tcfg, Some(&mut save_best))?;

    let final_path = g.out.join("final.ckpt");
    nnet::save_checkpoint(&final_path, &cfg, &params)?;
    if report.epochs.is_empty() {
        nnet::save_checkpoint(&best_path, &cfg, &params)?;
    }
    let report_path = g.out.join("train_report.csv");
    report.write_csv(&report_path)?;
    let classes = g.out.join("classes.txt");
    write_lines(&classes, &ds.class_names())?;
    if report.submitted > report.applied {
        log::info!(
            "{} of {} gradients discarded as stale",
            report.discarded,
            report.submitted
        );
    }
    if let Some(e) = report.epochs_to_threshold {
        log::info!("loss threshold reached at epoch {e}");
    }
    Ok(vec![best_path, final_path, report_path, classes])
}

fn load_classifier(paths: &[PathBuf]) -> Result<Classifier<f32>> {
    let models = paths
        .iter()
        .map(|p| nnet::load_checkpoint::<f32>(p, None).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Classifier::ensemble(models)?)
}

fn infer(a: &InferArgs, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    let classifier = load_classifier(&a.model)?;
    let cfg = classifier.config().clone();
    let classes_path = match &a.classes {
        Some(p) => p.clone(),
        None => a.model[0].with_file_name("classes.txt"),
    };
    let names = read_lines(&classes_path)?;
    ensure!(
        names.len() == cfg.n_classes,
        "{} lists {} classes but the model has {}",
        classes_path.display(),
        names.len(),
        cfg.n_classes
    );
    let (ds, seqs) = load_corpus(&a.corpus, &model_quantizer(&cfg)?)?;
    let len = a.subseq_len.unwrap_or(cfg.subseq_len);
    let verdicts = seqs
        .par_iter()
        .map(|s| classifier.classify(s, len))
        .collect::<ragaseq::Result<Vec<_>>>()?;

    let mut lines = vec!["id,prediction,majority_fraction".to_string()];
    let (mut correct, mut known) = (0, 0);
    let ds_names = ds.class_names();
    for (s, v) in seqs.iter().zip(&verdicts) {
        let label = match v.outcome {
            Outcome::Label(c) => names[c].clone(),
            Outcome::Abstain => "ABSTAIN".to_string(),
        };
        let line = format!("{},{label},{:.4}", s.source_id, v.majority_fraction);
        println!("{line}");
        lines.push(line);
        if names.contains(&ds_names[s.raga]) {
            known += 1;
            correct += usize::from(label == ds_names[s.raga]);
        }
    }
    if known > 0 {
        log::info!(
            "accuracy {:.4} over {known} recordings with known labels",
            correct as f64 / known as f64
        );
    }
    let out = g.out.join("verdicts.csv");
    write_lines(&out, &lines)?;
    Ok(vec![out])
}

fn rank_train(a: &RankTrainArgs, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    let (cfg, params) = nnet::load_checkpoint::<f32>(&a.model, None)?;
    let (_, seqs) = load_corpus(&a.corpus, &model_quantizer(&cfg)?)?;
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let (subseqs, _) = eval::training_subsequences(&refs, &sampler_config(&a.sampler, g.seed))?;
    let pool = SubsequencePool::new(subseqs)?;
    let rcfg = RankerConfig {
        embed_out_dim: a.embed_out_dim,
        margin: a.margin,
        triplets_per_step: a.triplets_per_step,
        steps: a.steps,
        seed: g.seed,
    };
    let tcfg = TrainConfig {
        learning_rate: a.lr,
        seed: g.seed,
        ..TrainConfig::default()
    };
    let (rank_cfg, rank_params) =
        rank::adapt_classifier(&cfg, &params, &rcfg, &mut ChaCha8Rng::seed_from_u64(g.seed))?;
    let (tuned, report) = rank::finetune_ranker(&rank_cfg, &rank_params, &pool, &rcfg, &tcfg)?;
    if let (Some(first), Some(last)) = (report.step_losses.first(), report.step_losses.last()) {
        log::info!(
            "triplet loss {first:.4} -> {last:.4} over {} steps",
            report.step_losses.len()
        );
    }
    let ckpt = g.out.join("ranker.ckpt");
    nnet::save_checkpoint(&ckpt, &rank_cfg, &tuned)?;
    let mut lines = vec!["step,loss".to_string()];
    lines.extend(
        report
            .step_losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{},{l}", i + 1)),
    );
    let report_path = g.out.join("ranker_report.csv");
    write_lines(&report_path, &lines)?;
    Ok(vec![ckpt, report_path])
}

/// Inference windows of `seq` with their start offsets.
fn windows_with_offsets(seq: &TokenSequence, len: usize) -> ragaseq::Result<Vec<(TokenSequence, usize)>> {
    let windows = sampling::split_for_inference(seq, len)?;
    // The trailing window, if any, is left-padded and starts right after the
    // last full one, so window j always begins at j * len.
    Ok(windows
        .into_iter()
        .enumerate()
        .map(|(j, w)| (w, j * len))
        .collect())
}

fn load_ranker(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    let (cfg, params) = nnet::load_checkpoint::<f32>(path, None)?;
    if cfg.head != Head::Embedding {
        bail!("{} is a classifier; run rank-train first", path.display());
    }
    Ok((cfg, params))
}

fn index(a: &IndexArgs, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    let (cfg, params) = load_ranker(&a.model)?;
    let (_, seqs) = load_corpus(&a.corpus, &model_quantizer(&cfg)?)?;
    let mut items = Vec::new();
    for s in &seqs {
        items.extend(windows_with_offsets(s, cfg.subseq_len)?);
    }
    let index = eval::build_index(&cfg, &params, &items)?;
    let out = g.out.join("index.bin");
    index.save(&out)?;
    let mut artifacts = vec![out.clone(), rank::sidecar_path(&out)];
    log::info!("indexed {} subsequences", index.len());
    if !a.precision_at.is_empty() {
        let p = eval::retrieval_precision(&index, &a.precision_at)?;
        let mut lines = vec!["k,precision".to_string()];
        for (k, v) in a.precision_at.iter().zip(&p) {
            println!("precision@{k}: {v:.4}");
            lines.push(format!("{k},{v}"));
        }
        let path = g.out.join("retrieval.csv");
        write_lines(&path, &lines)?;
        artifacts.push(path);
    }
    Ok(artifacts)
}

fn query(a: &QueryArgs, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    let (cfg, params) = load_ranker(&a.model)?;
    let index = EmbeddingIndex::load(&a.index)?;
    let vocab = Vocabulary::new(&model_quantizer(&cfg)?)?;
    let ids = vocab.encode(&tokenize::read_token_file(&a.input)?);
    ensure!(
        a.start < ids.len(),
        "--start {} is past the end of a {}-token query",
        a.start,
        ids.len()
    );
    let end = (a.start + cfg.subseq_len).min(ids.len());
    let mut window = vec![PAD_ID; cfg.subseq_len - (end - a.start)];
    window.extend_from_slice(&ids[a.start..end]);
    let e: Vec<f32> = rank::embed(&cfg, &params, &window)?.into_iter().collect();
    let result = index.query_top_k(&e, a.k)?;
    if result.truncated {
        log::warn!("index holds only {} entries", index.len());
    }
    let mut lines = vec!["rank,source_id,class,offset,distance".to_string()];
    for (r, h) in result.hits.iter().enumerate() {
        let entry = &index.entries()[h.index];
        let line = format!(
            "{},{},{},{},{:.6}",
            r + 1,
            entry.source_id,
            entry.raga,
            entry.offset,
            h.distance
        );
        println!("{line}");
        lines.push(line);
    }
    let out = g.out.join("query.csv");
    write_lines(&out, &lines)?;
    Ok(vec![out])
}

fn experiment(
    model: &ModelArgs,
    optim: &OptimArgs,
    vocab: &Vocabulary,
    subseq_len: usize,
    num_samples: Option<usize>,
    seed: u64,
) -> ExperimentConfig {
    ExperimentConfig {
        model: model_config(model, vocab, 2, subseq_len),
        train: train_config(optim, seed),
        sampler: SamplerConfig {
            subseq_len,
            num_samples_override: num_samples,
            seed,
        },
    }
}

fn eval_cmd(a: &EvalArgs, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    let q = quant_config(&a.quant);
    let vocab = Vocabulary::new(&q)?;
    let (ds, seqs) = load_corpus(&a.corpus, &q)?;
    let folds: Vec<Fold> = match a.protocol {
        Protocol::Loocv => eval::loocv_splits(&ds)?,
        Protocol::Kfold => eval::stratified_kfold(&ds, a.folds, g.seed)?,
        Protocol::Holdout => vec![eval::holdout_split(&ds, a.holdout, g.seed)?],
    };
    let cfg = experiment(
        &a.model,
        &a.optim,
        &vocab,
        a.sampler.subseq_len,
        a.sampler.num_samples,
        g.seed,
    );
    let cv = eval::cross_validate(&seqs, ds.n_classes(), &folds, &cfg)?;
    let names = ds.class_names();

    let mut metrics = vec!["fold,recording_accuracy,subsequence_accuracy".to_string()];
    let mut predictions = vec!["fold,id,truth,prediction,majority_fraction".to_string()];
    for (i, f) in cv.folds.iter().enumerate() {
        metrics.push(format!(
            "{},{},{}",
            i + 1,
            f.recording_confusion.accuracy(),
            f.subsequence_confusion.accuracy()
        ));
        for r in &f.recordings {
            let pred = match r.verdict.outcome {
                Outcome::Label(c) => names[c].clone(),
                Outcome::Abstain => "ABSTAIN".into(),
            };
            predictions.push(format!(
                "{},{},{},{pred},{:.4}",
                i + 1,
                r.id,
                names[r.truth],
                r.verdict.majority_fraction
            ));
        }
    }
    metrics.push(format!(
        "all,{},{}",
        cv.recording_accuracy(),
        cv.subsequence_accuracy()
    ));
    println!(
        "recording accuracy {:.4}, subsequence accuracy {:.4}",
        cv.recording_accuracy(),
        cv.subsequence_accuracy()
    );
    let paths = [
        g.out.join("metrics.csv"),
        g.out.join("predictions.csv"),
        g.out.join("confusion_recordings.csv"),
        g.out.join("confusion_subsequences.csv"),
    ];
    write_lines(&paths[0], &metrics)?;
    write_lines(&paths[1], &predictions)?;
    eval::write_confusion_csv(&paths[2], &cv.recording_confusion, &names)?;
    eval::write_confusion_csv(&paths[3], &cv.subsequence_confusion, &names)?;
    Ok(paths.to_vec())
}

fn length_study(a: &LengthStudyArgs, g: &GlobalArgs) -> Result<Vec<PathBuf>> {
    let q = quant_config(&a.quant);
    let vocab = Vocabulary::new(&q)?;
    let (ds, seqs) = load_corpus(&a.corpus, &q)?;
    let fold = eval::holdout_split(&ds, a.holdout, g.seed)?;
    let first = *a.lengths.first().context("--lengths is empty")?;
    let cfg = experiment(&a.model, &a.optim, &vocab, first, a.num_samples, g.seed);
    let rows = eval::run_length_study(&a.lengths, &seqs, ds.n_classes(), &fold, &cfg, a.loss_threshold)?;
    let out = g.out.join("length_study.csv");
    let mut buf = Vec::new();
    eval::write_length_study_csv(&rows, &mut buf)?;
    std::fs::write(&out, &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(vec![out])
}
