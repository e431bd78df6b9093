use ibq_core::ar::{self, ARTrainConfig};
use ibq_core::config::RunConfig;
use ibq_core::data::save_ppm;
use ibq_core::diag::{gradient_oracle_suite, quantizer_flow_checks, render_flow_table, Corruption};
use ibq_core::error::{Error, Result};
use ibq_core::metrics::psnr;
use ibq_core::optim::AdamConfig;
use ibq_core::quantize::QuantizerKind;
use ibq_core::rng::Rng;
use ibq_core::tensor::Tensor;
use ibq_core::tokenizer::{
    self, evaluate, load_checkpoint, tokenize_dataset, tokenizer_param_count, EvalMode,
};
use ibq_core::tokens::TokenDataset;
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn train_tokenizer(
    cfg: &RunConfig,
    resume: bool,
    dry_run: bool,
    stop_after: Option<u64>,
) -> Result<()> {
    let model_cfg = cfg.tokenizer_config();
    if dry_run {
        println!("config ok");
        println!("tokenizer parameters: {}", tokenizer_param_count(&model_cfg));
        return Ok(());
    }
    let data = cfg.load_data()?;
    let out_dir = cfg.out_dir();
    cfg.echo_to(&out_dir)?;
    let mut train_cfg = cfg.tokenizer_train_config();
    train_cfg.stop_after = stop_after;
    let summary = tokenizer::train_tokenizer(&data, &train_cfg, &out_dir, resume)?;
    println!(
        "trained {} epochs  usage {:.4}  perplexity {:.2}  psnr {:.2} dB",
        summary.epochs_run, summary.final_usage, summary.final_perplexity, summary.final_psnr
    );
    println!("checkpoint: {}", summary.checkpoint.display());
    println!("metrics:    {}", summary.metrics.display());
    Ok(())
}

/// Per-quantizer training under one config/seed, with a combined CSV and a
/// stdout summary. Soft VQ additionally reports its soft-vs-hard inference
/// PSNR gap at the final checkpoint.
pub fn compare_quantizers(cfg: &RunConfig, kinds: &[QuantizerKind]) -> Result<()> {
    let data = cfg.load_data()?;
    let out_dir = cfg.out_dir();
    cfg.echo_to(&out_dir)?;
    let combined_path = out_dir.join("compare.csv");
    let mut combined = String::from("quantizer,epoch,usage,psnr,loss\n");
    let mut summary_rows = Vec::new();

    for &kind in kinds {
        let mut sub = cfg.clone();
        sub.tokenizer.quantizer = kind;
        if kind == QuantizerKind::Lfq {
            // LFQ's codebook is implicit: K is pinned by the code dimension.
            sub.tokenizer.k = 1usize << sub.tokenizer.d.min(20);
        }
        sub.validate()?;
        let run_dir = out_dir.join(kind.name());
        let mut train_cfg = sub.tokenizer_train_config();
        train_cfg.stop_after = None;
        let summary = tokenizer::train_tokenizer(&data, &train_cfg, &run_dir, false)?;
        let csv = std::fs::read_to_string(tokenizer::metrics_path(&run_dir))
            .map_err(|e| Error::io(tokenizer::metrics_path(&run_dir), e))?;
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            // columns: step,epoch,lr,loss_total,...,usage,perplexity,psnr_val
            combined.push_str(&format!(
                "{},{},{},{},{}\n",
                kind.name(),
                cols[1],
                cols[7],
                cols[9],
                cols[3]
            ));
        }
        let mut extra = String::new();
        if kind == QuantizerKind::Softvq {
            let state = load_checkpoint(&tokenizer::checkpoint_path(&run_dir), AdamConfig::tokenizer(1e-4))?;
            let (_, eval_idx) = data.split(train_cfg.holdout, train_cfg.seed);
            let soft = evaluate(&state.model, &data, &eval_idx, train_cfg.batch, EvalMode::Soft(0.5));
            let hard = evaluate(&state.model, &data, &eval_idx, train_cfg.batch, EvalMode::Hard);
            extra = format!(
                "  soft-infer psnr {:.2} dB vs hard-infer {:.2} dB (gap {:.2} dB)",
                soft.psnr_db,
                hard.psnr_db,
                soft.psnr_db - hard.psnr_db
            );
        }
        summary_rows.push((kind, summary, extra));
    }

    std::fs::write(&combined_path, combined).map_err(|e| Error::io(&combined_path, e))?;
    println!("{:<8} {:>8} {:>12} {:>10}", "quant", "usage", "perplexity", "psnr(dB)");
    for (kind, s, extra) in &summary_rows {
        println!(
            "{:<8} {:>8.4} {:>12.2} {:>10.2}{extra}",
            kind.name(),
            s.final_usage,
            s.final_perplexity,
            s.final_psnr
        );
    }
    println!("combined csv: {}", combined_path.display());
    Ok(())
}

pub fn eval_tokenizer(checkpoint: &Path, cfg: &RunConfig) -> Result<()> {
    let state = load_checkpoint(checkpoint, AdamConfig::tokenizer(1e-4))?;
    let data = cfg.load_data()?;
    if data.image_size() % state.model.cfg.downsample != 0 {
        return Err(Error::Config(format!(
            "data size {} incompatible with checkpoint downsample {}",
            data.image_size(),
            state.model.cfg.downsample
        )));
    }
    let (_, eval_idx) = data.split(cfg.optim.holdout, cfg.seed);
    let stats = evaluate(&state.model, &data, &eval_idx, cfg.optim.batch, EvalMode::Hard);
    println!("usage       {:.6}", stats.usage.usage);
    println!("perplexity  {:.6}", stats.usage.perplexity);
    println!("psnr        {:.6}", stats.psnr_db);
    if let Some(gap) = stats.distribution_gap {
        println!("dist_gap    {gap:.6}");
    }

    let out_dir = cfg.out_dir().join("recon");
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut index_dump = String::from("image,position,index\n");
    for (i, &idx) in eval_idx.iter().take(16).enumerate() {
        let image = data.image(idx);
        let (recon, indices) = tokenizer::reconstruct(&state.model, &image);
        let path = out_dir.join(format!("recon_{i:02}.ppm"));
        save_ppm(&path, &recon)?;
        for (pos, &code) in indices.iter().enumerate() {
            index_dump.push_str(&format!("{i},{pos},{code}\n"));
        }
    }
    let dump_path = cfg.out_dir().join("eval_indices.csv");
    std::fs::write(&dump_path, index_dump).map_err(|e| Error::io(&dump_path, e))?;
    println!("reconstructions: {}", out_dir.display());
    println!("index dump:      {}", dump_path.display());
    Ok(())
}

fn default_tokens_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("tokens.ibqk")
}

pub fn tokenize(cfg: &RunConfig, checkpoint: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let ckpt = checkpoint.unwrap_or_else(|| tokenizer::checkpoint_path(&cfg.out_dir()));
    if !ckpt.exists() {
        return Err(Error::Config(format!("tokenizer checkpoint {} missing", ckpt.display())));
    }
    let state = load_checkpoint(&ckpt, AdamConfig::tokenizer(1e-4))?;
    let data = cfg.load_data()?;
    let tokens = tokenize_dataset(&state.model, &data, cfg.optim.batch)?;
    let path = out.unwrap_or_else(|| default_tokens_path(cfg));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    tokens.save(&path)?;
    println!(
        "tokenized {} images -> {} (K={}, T={})",
        tokens.records.len(),
        path.display(),
        tokens.k,
        tokens.t
    );
    Ok(())
}

pub fn train_ar(
    cfg: &RunConfig,
    tokens: Option<PathBuf>,
    resume: bool,
    stop_after: Option<u64>,
) -> Result<()> {
    let tokens_path = tokens.unwrap_or_else(|| default_tokens_path(cfg));
    if !tokens_path.exists() {
        return Err(Error::Config(format!(
            "token dataset {} missing (run `ibq tokenize` first)",
            tokens_path.display()
        )));
    }
    let dataset = TokenDataset::load(&tokens_path)?;
    if dataset.k as usize != cfg.tokenizer.k {
        return Err(Error::Config(format!(
            "token dataset K {} != config tokenizer.k {}",
            dataset.k, cfg.tokenizer.k
        )));
    }
    if dataset.t as usize != cfg.ar.t {
        return Err(Error::Config(format!(
            "token dataset T {} != config ar.t {}",
            dataset.t, cfg.ar.t
        )));
    }
    let out_dir = cfg.out_dir();
    cfg.echo_to(&out_dir)?;
    let mut train_cfg: ARTrainConfig = cfg.ar_train_config();
    train_cfg.stop_after = stop_after;
    let summary = ar::train_ar(&dataset, &train_cfg, &out_dir, resume)?;
    println!(
        "trained {} epochs  nll_train {:.4}  nll_eval {:.4} (ln K = {:.4})",
        summary.epochs_run,
        summary.final_nll_train,
        summary.final_nll_eval,
        (dataset.k as f64).ln()
    );
    println!("checkpoint: {}", summary.checkpoint.display());
    Ok(())
}

pub fn sample(
    cfg: &RunConfig,
    class: usize,
    n: usize,
    seed: u64,
    temperature: f32,
    top_k: Option<usize>,
) -> Result<()> {
    let out_dir = cfg.out_dir();
    let tok_state = load_checkpoint(&tokenizer::checkpoint_path(&out_dir), AdamConfig::tokenizer(1e-4))?;
    let ar_state = ar::load_checkpoint(&ar::checkpoint_path(&out_dir), AdamConfig::ar(1e-4))?;
    if ar_state.model.cfg.vocab != tok_state.model.cfg.k {
        return Err(Error::Config(format!(
            "ar vocab {} != tokenizer codebook {}",
            ar_state.model.cfg.vocab, tok_state.model.cfg.k
        )));
    }
    if class >= ar_state.model.cfg.num_classes {
        return Err(Error::Config(format!(
            "class {class} out of range (num_classes {})",
            ar_state.model.cfg.num_classes
        )));
    }
    let grid = cfg.data.size / tok_state.model.cfg.downsample;
    if grid * grid != ar_state.model.cfg.seq_len {
        return Err(Error::Config(format!(
            "token grid {}x{} != ar sequence length {}",
            grid,
            grid,
            ar_state.model.cfg.seq_len
        )));
    }
    let top_k = top_k.unwrap_or(ar_state.model.cfg.vocab);
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    for i in 0..n {
        let mut rng = Rng::new(seed).derive("sample", i as u64);
        let tokens = ar_state.model.sample(class, temperature, top_k, &mut rng);
        let image = tokenizer::decode_indices(&tok_state.model, &tokens, 1, grid, grid);
        let path = samples_dir.join(format!("class{class}_seed{seed}_{i:02}.ppm"));
        save_ppm(&path, &image)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn quantcheck(k: usize, d: usize, batch: usize, seeds: u64, instances: usize) -> Result<()> {
    println!("finite-difference oracle ({instances} instances per op):");
    let reports = gradient_oracle_suite(instances, 0xD1A6);
    let mut all_pass = true;
    for r in &reports {
        println!("  {}", r.render());
        all_pass &= r.worst.pass;
    }
    let seed_list: Vec<u64> = (1..=seeds).collect();
    println!("\ngradient flow (K={k}, D={d}, batch={batch}, {seeds} seeds):");
    let checks = quantizer_flow_checks(k, d, batch, &seed_list, Corruption::None);
    print!("{}", render_flow_table(&checks));
    all_pass &= checks.iter().all(|c| c.pass);

    // PSNR sanity on a pair of constant images keeps the metric wired in.
    let a = Tensor::full(vec![1, 3, 4, 4], 1.0f32);
    debug_assert!(psnr(&a, &a).is_infinite());

    let mut out = std::io::stdout();
    out.flush().ok();
    if all_pass {
        println!("\nall checks passed");
        Ok(())
    } else {
        Err(Error::Numeric("quantcheck found failing checks".into()))
    }
}
