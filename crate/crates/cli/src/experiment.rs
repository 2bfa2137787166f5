//! Training runs and the three-way embedding ablation.

use bvv_core::embedmat::{build_random_embeddings, build_visual_embeddings, EmbeddingMatrix, Provenance};
use bvv_core::fontstore::GlyphStore;
use bvv_core::nanoformer::{
    perplexity, smoothed_losses, steps_to_threshold, EmbeddingMode, LossRecord, Model, NanoError, Trainer,
};
use bvv_core::univoc::{TokenId, Vocab};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Everything a run reads: glyphs, vocabulary and the tokenized corpus.
pub struct Inputs {
    pub store: GlyphStore,
    pub vocab: Vocab,
    pub tokens: Vec<TokenId>,
}

impl Inputs {
    /// Bundled Unifont subset, compact vocabulary and toy corpus.
    pub fn bundled() -> Result<Self, CliError> {
        let vocab = bvv_core::fixtures::compact_vocab();
        let tokens = vocab.encode(bvv_core::fixtures::TOY_CORPUS)?;
        Ok(Self {
            store: GlyphStore::bundled(),
            vocab,
            tokens,
        })
    }
}

/// The frozen matrix a mode needs: the configured embedding file when its
/// provenance fits, otherwise a fresh build.
pub fn frozen_matrix(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    mode: EmbeddingMode,
    preloaded: Option<&EmbeddingMatrix>,
) -> Result<Option<EmbeddingMatrix>, CliError> {
    let wanted = match mode {
        EmbeddingMode::Trainable => return Ok(None),
        EmbeddingMode::FrozenVisual => Provenance::Visual,
        EmbeddingMode::FrozenRandom => Provenance::RandomBitmap,
    };
    if let Some(m) = preloaded.filter(|m| m.provenance == wanted) {
        if !m.matches_vocab(&inputs.vocab) {
            return Err(CliError::Config(
                "embedding file was built for a different vocabulary".into(),
            ));
        }
        return Ok(Some(m.clone()));
    }
    let p = &cfg.profile;
    let build = match wanted {
        Provenance::Visual => build_visual_embeddings(&inputs.vocab, &inputs.store, p.side, p.d_model)?,
        _ => build_random_embeddings(&inputs.vocab, cfg.ablation.random_seed, p.side, p.d_model)?,
    };
    Ok(Some(build.matrix))
}

pub fn init_model(
    cfg: &ExperimentConfig,
    vocab_size: usize,
    mode: EmbeddingMode,
    embedding: Option<&EmbeddingMatrix>,
) -> Result<Model<f32>, CliError> {
    let mut model = Model::<f32>::new(cfg.profile.model_config(vocab_size, mode), cfg.train.seed)?;
    if let Some(m) = embedding {
        model.set_token_embedding(&m.rows, m.vocab_size, m.d_model)?;
    }
    Ok(model)
}

/// Summary of one finished run.
#[derive(Debug, Clone)]
pub struct ModeResult {
    pub mode: EmbeddingMode,
    pub history: Vec<LossRecord>,
    /// Moving average of the last `window` training losses.
    pub final_train_loss: f64,
    /// Perplexity over the whole validation split.
    pub val_perplexity: f64,
    pub steps_to_threshold: Option<u64>,
    /// Token embedding bitwise unchanged by training.
    pub embedding_unchanged: bool,
}

/// Train one mode from scratch. `on_eval` sees the trainer after every
/// evaluation step (for checkpointing).
pub fn train_mode<F>(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    mode: EmbeddingMode,
    preloaded: Option<&EmbeddingMatrix>,
    on_eval: F,
) -> Result<(Trainer, ModeResult), CliError>
where
    F: FnMut(&Trainer) -> Result<(), NanoError>,
{
    let emb = frozen_matrix(cfg, inputs, mode, preloaded)?;
    let model = init_model(cfg, inputs.vocab.len(), mode, emb.as_ref())?;
    let initial = model.token_embedding().data.clone();
    let mut trainer = Trainer::new(model, &inputs.tokens, cfg.train)?;
    log::info!("training {mode}: {} steps", cfg.train.steps);
    trainer.run(on_eval)?;
    let result = summarize(cfg, &trainer, mode, &initial)?;
    Ok((trainer, result))
}

pub fn summarize(
    cfg: &ExperimentConfig,
    trainer: &Trainer,
    mode: EmbeddingMode,
    initial_embedding: &[f32],
) -> Result<ModeResult, CliError> {
    let window = cfg.ablation.window;
    let val = trainer.validation_tokens();
    let val_perplexity = if val.len() >= 2 {
        perplexity(&trainer.model, val)?
    } else {
        trainer.validation_perplexity()?
    };
    let current = &trainer.model.token_embedding().data;
    Ok(ModeResult {
        mode,
        final_train_loss: smoothed_losses(&trainer.history, window).last().copied().unwrap_or(f64::NAN),
        val_perplexity,
        steps_to_threshold: steps_to_threshold(&trainer.history, cfg.ablation.threshold, window),
        embedding_unchanged: initial_embedding.len() == current.len()
            && initial_embedding.iter().zip(current).all(|(a, b)| a.to_bits() == b.to_bits()),
        history: trainer.history.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<ModeResult>,
    pub threshold: f64,
    pub window: usize,
}

impl AblationReport {
    pub fn row(&self, mode: EmbeddingMode) -> Option<&ModeResult> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// steps-to-threshold(frozen_random) / steps-to-threshold(frozen_visual).
    /// A run that never reaches the threshold counts as its full length.
    pub fn slowdown(&self) -> Option<f64> {
        let steps = |mode| {
            self.row(mode)
                .map(|r| r.steps_to_threshold.unwrap_or(r.history.len() as u64 + 1) as f64)
        };
        Some(steps(EmbeddingMode::FrozenRandom)? / steps(EmbeddingMode::FrozenVisual)?)
    }

    /// |ppl(frozen_visual) − ppl(trainable)| / ppl(trainable).
    pub fn perplexity_gap(&self) -> Option<f64> {
        let v = self.row(EmbeddingMode::FrozenVisual)?.val_perplexity;
        let t = self.row(EmbeddingMode::Trainable)?.val_perplexity;
        Some((v - t).abs() / t)
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "final_train_loss", "val_perplexity", "steps_to_threshold"])?;
        for r in &self.rows {
            w.write_record([
                r.mode.name().to_string(),
                format!("{:.6}", r.final_train_loss),
                format!("{:.6}", r.val_perplexity),
                r.steps_to_threshold.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>16} {:>14} {:>18}\n",
            "mode",
            "final_train_loss",
            "val_ppl",
            format!("steps<{:.2}", self.threshold)
        );
        for r in &self.rows {
            let steps = r
                .steps_to_threshold
                .map(|s| s.to_string())
                .unwrap_or_else(|| "not reached".into());
            out.push_str(&format!(
                "{:<14} {:>16.4} {:>14.3} {:>18}\n",
                r.mode.name(),
                r.final_train_loss,
                r.val_perplexity,
                steps
            ));
        }
        if let Some(s) = self.slowdown() {
            out.push_str(&format!("slowdown random/visual: {s:.3}x\n"));
        }
        if let Some(g) = self.perplexity_gap() {
            out.push_str(&format!("val perplexity gap visual vs trainable: {:.2}%\n", 100.0 * g));
        }
        out
    }
}

/// Run trainable, frozen_visual and frozen_random with identical seeds and
/// hyperparameters.
pub fn run_ablation<F>(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    preloaded: Option<&EmbeddingMatrix>,
    mut on_finish: F,
) -> Result<AblationReport, CliError>
where
    F: FnMut(&Trainer, &ModeResult) -> Result<(), CliError>,
{
    let mut rows = Vec::with_capacity(3);
    for mode in EmbeddingMode::ALL {
        let (trainer, result) = train_mode(cfg, inputs, mode, preloaded, |_| Ok(()))?;
        on_finish(&trainer, &result)?;
        rows.push(result);
    }
    Ok(AblationReport {
        rows,
        threshold: cfg.ablation.threshold,
        window: cfg.ablation.window,
    })
}
