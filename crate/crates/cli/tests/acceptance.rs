//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line to stderr (uncaptured). Failures are reported but
//! only abort the test when `BVV_ACCEPTANCE_STRICT=1`.
//!
//! Run with `cargo test -p bvv-cli --test acceptance -- --nocapture`.

#[path = "../../core/tests/support/jacobi.rs"]
mod jacobi;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bvv_cli::config::ExperimentConfig;
use bvv_cli::experiment::{run_ablation, AblationReport, Inputs};
use bvv_core::binfmt::FormatError;
use bvv_core::embedmat::{build_visual_embeddings, density_length_correlation, EmbeddingMatrix};
use bvv_core::fixtures;
use bvv_core::fontstore::GlyphStore;
use bvv_core::nanoformer::{
    gradient_check, Checkpoint, EmbeddingMode, Model, ModelConfig, NanoError, TrainConfig, Trainer,
};
use bvv_core::pca::PcaModel;
use bvv_core::univoc::{mine_ngrams, Profile, TokenId, Vocab, PAD_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "{} criterion {id} ({name}): {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    let strict = std::env::var("BVV_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !pass {
        panic!("{line}");
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn random_char(rng: &mut ChaCha8Rng) -> char {
    let ranges: [(u32, u32, u32); 10] = [
        (6, 0x20, 0x7F),
        (1, 0xA0, 0x250),
        (3, 0x400, 0x4FF),
        (2, 0x4E00, 0x9FFF),
        (2, 0x300, 0x36F),
        (1, 0x590, 0x6FF),
        (1, 0xE000, 0xF8FF),
        (2, 0x1F300, 0x1FAFF),
        (1, 0x10000, 0x10FFFF),
        (1, 0x0, 0x1F),
    ];
    let total: u32 = ranges.iter().map(|r| r.0).sum();
    let mut pick = rng.random_range(0..total);
    for &(w, lo, hi) in &ranges {
        if pick < w {
            loop {
                if let Some(c) = char::from_u32(rng.random_range(lo..=hi)) {
                    return c;
                }
            }
        }
        pick -= w;
    }
    unreachable!()
}

#[test]
fn criterion_1_tokenizer_round_trip() {
    let ngrams = mine_ngrams(fixtures::TOY_CORPUS, 4000);
    let bmp = Vocab::build(&ngrams, Profile::Bmp).unwrap();
    let extended = Vocab::build(&mine_ngrams(fixtures::TOY_CORPUS, 12000), Profile::Extended).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let start = Instant::now();
    let total = 100_000;
    let mut ok = 0;
    for i in 0..total {
        let len = rng.random_range(0..48);
        let s: String = (0..len).map(|_| random_char(&mut rng)).collect();
        let v = if i % 2 == 0 { &bmp } else { &extended };
        if v.encode(&s).and_then(|ids| v.decode(&ids)).is_ok_and(|d| d == s) {
            ok += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        "tokenizer round-trip",
        ok == total && elapsed < Duration::from_secs(30),
        &format!("{ok}/{total} strings round-trip, {}", secs(elapsed)),
    );
}

#[test]
fn criterion_2_pca_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst_val: f64 = 0.0;
    let mut worst_vec: f64 = 0.0;
    for _ in 0..20 {
        let dim = rng.random_range(2..=16);
        let rows = rng.random_range(dim + 2..=64);
        let scales: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..4.0)).collect();
        let data: Vec<f64> = (0..rows * dim)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scales[i % dim]
            })
            .collect();
        let model = PcaModel::fit(&data, rows, dim, dim).unwrap();
        let (values, vectors) = jacobi::jacobi_eigen(&jacobi::covariance(&data, rows, dim), dim);
        for i in 0..dim {
            worst_val = worst_val.max((model.variances()[i] - values[i]).abs());
            for (a, b) in model.component(i).iter().zip(&vectors[i]) {
                worst_vec = worst_vec.max((a - b).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        2,
        "PCA oracle equivalence",
        worst_val <= 1e-8 && worst_vec <= 1e-8 && elapsed < Duration::from_secs(5),
        &format!(
            "max eigenvalue diff {worst_val:.2e}, max eigenvector diff {worst_vec:.2e}, {}",
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_3_embedding_determinism_and_norms() {
    let start = Instant::now();
    let build = || {
        let vocab = fixtures::compact_vocab();
        let store = GlyphStore::bundled();
        build_visual_embeddings(&vocab, &store, 16, 64).unwrap()
    };
    let a = build();
    let b = build();
    let identical = a.matrix.to_bytes() == b.matrix.to_bytes();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..a.matrix.vocab_size {
        if a.raw.row(i).iter().any(|&bit| bit != 0) {
            worst = worst.max((a.matrix.row_norm(i) - 1.0).abs());
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    report(
        3,
        "embedding determinism and normalization",
        identical && worst <= 1e-5 && elapsed < Duration::from_secs(60),
        &format!(
            "bitwise identical: {identical}, {checked} non-blank rows, max |norm-1| {worst:.2e}, {}",
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_4_gradient_check() {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        block_size: 8,
        embedding_mode: EmbeddingMode::Trainable,
    };
    let mut model = Model::<f64>::with_init_std(cfg, 4, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for t in &mut model.tensors {
        if t.name.ends_with(".g") {
            t.data.iter_mut().for_each(|x| *x = rng.random_range(0.5..1.5));
        } else if t.name.ends_with(".b") {
            t.data.iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
        }
    }
    let batch: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..4)
        .map(|_| {
            let x = (0..8).map(|_| rng.random_range(0..64)).collect();
            let y = (0..8).map(|_| rng.random_range(1..64)).collect();
            (x, y)
        })
        .collect();
    let checks = gradient_check(&model, &batch, 200, 1e-5, 1e-6, 4).unwrap();
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let full = checks
        .iter()
        .all(|c| c.checked >= 200.min(model.tensor(&c.tensor).unwrap().numel()));
    let entries: usize = checks.iter().map(|c| c.checked).sum();
    let elapsed = start.elapsed();
    report(
        4,
        "gradient check",
        worst.max_rel_error <= 1e-3 && full && elapsed < Duration::from_secs(60),
        &format!(
            "{} tensors, {entries} entries, max relative error {:.2e} ({}), {}",
            checks.len(),
            worst.max_rel_error,
            worst.tensor,
            secs(elapsed)
        ),
    );
}

fn freeze_run(mode: EmbeddingMode, inputs: &Inputs, matrix: &EmbeddingMatrix) -> bool {
    let cfg = ModelConfig {
        vocab_size: inputs.vocab.len(),
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        block_size: 32,
        embedding_mode: mode,
    };
    let mut model = Model::<f32>::new(cfg, 5).unwrap();
    model.set_token_embedding(&matrix.rows, matrix.vocab_size, matrix.d_model).unwrap();
    let before = model.token_embedding().data.clone();
    let tc = TrainConfig {
        steps: 200,
        batch: 4,
        eval_every: 200,
        eval_blocks: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, &inputs.tokens, tc).unwrap();
    trainer.run(|_| Ok(())).unwrap();
    assert_eq!(trainer.adam.step, 200);
    before
        .iter()
        .zip(&trainer.model.token_embedding().data)
        .all(|(a, b)| a.to_bits() == b.to_bits())
}

#[test]
fn criterion_5_freeze_contract() {
    let start = Instant::now();
    let inputs = Inputs::bundled().unwrap();
    let matrix = build_visual_embeddings(&inputs.vocab, &inputs.store, 16, 64).unwrap().matrix;
    let frozen_same = freeze_run(EmbeddingMode::FrozenVisual, &inputs, &matrix);
    let trainable_same = freeze_run(EmbeddingMode::Trainable, &inputs, &matrix);
    let elapsed = start.elapsed();
    report(
        5,
        "freeze contract",
        frozen_same && !trainable_same && elapsed < Duration::from_secs(120),
        &format!(
            "frozen unchanged after 200 steps: {frozen_same}, trainable changed: {}, {}",
            !trainable_same,
            secs(elapsed)
        ),
    );
}

/// The three-mode run shared by criteria 6 and 7, with its wall time.
fn ablation() -> &'static (AblationReport, Duration) {
    static RUN: OnceLock<(AblationReport, Duration)> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let inputs = Inputs::bundled().unwrap();
        let start = Instant::now();
        let report = run_ablation(&cfg, &inputs, None, |_, r| {
            let _ = writeln!(
                std::io::stderr(),
                "  ablation run {}: final train loss {:.4}, val ppl {:.3}, steps-to-threshold {:?}",
                r.mode,
                r.final_train_loss,
                r.val_perplexity,
                r.steps_to_threshold
            );
            Ok(())
        })
        .unwrap();
        (report, start.elapsed())
    })
}

#[test]
fn criterion_6_convergence() {
    let (abl, elapsed) = ablation();
    let steps = ExperimentConfig::default().train.steps;
    let bound = 0.8 * (fixtures::COMPACT_VOCAB_SIZE as f64).ln();
    let visual = abl.row(EmbeddingMode::FrozenVisual).unwrap();
    let trainable = abl.row(EmbeddingMode::Trainable).unwrap();
    // Two of the three runs belong to this criterion.
    let share = elapsed.mul_f64(2.0 / 3.0);
    let gap = abl.perplexity_gap().unwrap();
    report(
        6,
        "convergence",
        visual.final_train_loss < bound
            && trainable.final_train_loss < bound
            && gap <= 0.10
            && share < Duration::from_secs(15 * 60),
        &format!(
            "{steps} steps; train loss visual {:.3} / trainable {:.3} (bound {bound:.3}); \
             val ppl visual {:.2} / trainable {:.2}, gap {:.1}% (bound 10%); {}",
            visual.final_train_loss,
            trainable.final_train_loss,
            visual.val_perplexity,
            trainable.val_perplexity,
            100.0 * gap,
            secs(share)
        ),
    );
}

#[test]
fn criterion_7_ablation_ordering() {
    let (abl, elapsed) = ablation();
    let ratio = abl.slowdown().unwrap();
    let steps = |m| abl.row(m).unwrap().steps_to_threshold;
    report(
        7,
        "ablation ordering",
        ratio > 1.0 && *elapsed < Duration::from_secs(30 * 60),
        &format!(
            "steps to smoothed loss < {:.2}: visual {:?}, random {:?}, trainable {:?}; ratio random/visual {ratio:.3}; {}",
            abl.threshold,
            steps(EmbeddingMode::FrozenVisual),
            steps(EmbeddingMode::FrozenRandom),
            steps(EmbeddingMode::Trainable),
            secs(*elapsed)
        ),
    );
}

#[test]
fn criterion_8_density_length_correlation() {
    let vocab = fixtures::compact_vocab();
    let store = GlyphStore::bundled();
    let build = build_visual_embeddings(&vocab, &store, 16, 64).unwrap();
    let corr = density_length_correlation(&vocab, &build.raw).unwrap_or(f64::NAN);
    let points = bvv_cli::project_rows(&build.matrix).unwrap();
    let lens: Vec<f64> = vocab.entries().iter().map(|e| e.text.chars().count() as f64).collect();
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let cx = bvv_core::embedmat::pearson(&lens, &xs).unwrap_or(f64::NAN);
    let cy = bvv_core::embedmat::pearson(&lens, &ys).unwrap_or(f64::NAN);
    report(
        8,
        "density-length correlation",
        corr > 0.3,
        &format!(
            "corr(char_len, ink_density) over multi-char tokens = {corr:.4} (bound 0.3); \
             project2d rows {}, corr(char_len, x) = {cx:.3}, corr(char_len, y) = {cy:.3}",
            points.len()
        ),
    );
}

fn damage_codes(bytes: &[u8], parse: impl Fn(&[u8]) -> Result<(), u8>) -> Vec<u8> {
    let mut codes = Vec::new();
    codes.push(parse(&bytes[..bytes.len() / 2]).err().unwrap_or(0));
    let mut magic = bytes.to_vec();
    magic[0] ^= 0xFF;
    codes.push(parse(&magic).err().unwrap_or(0));
    let mut version = bytes.to_vec();
    version[4] = 99;
    codes.push(parse(&version).err().unwrap_or(0));
    let mut trailing = bytes.to_vec();
    trailing.push(0);
    codes.push(parse(&trailing).err().unwrap_or(0));
    codes
}

#[test]
fn criterion_9_file_format_round_trips() {
    let vocab = fixtures::compact_vocab();
    let store = GlyphStore::bundled();
    let matrix = build_visual_embeddings(&vocab, &store, 16, 64).unwrap().matrix;
    let bvve = matrix.to_bytes();
    let mut buf = Vec::new();
    EmbeddingMatrix::load(&bvve[..]).unwrap().save(&mut buf).unwrap();
    let bvve_ok = buf == bvve;
    let bvve_codes = damage_codes(&bvve, |b| EmbeddingMatrix::from_bytes(b).map(|_| ()).map_err(|e| e.code()));

    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        block_size: 32,
        embedding_mode: EmbeddingMode::FrozenVisual,
    };
    let mut model = Model::<f32>::new(cfg, 1).unwrap();
    model.set_token_embedding(&matrix.rows, matrix.vocab_size, 64).unwrap();
    let tokens = vocab.encode(fixtures::TOY_CORPUS).unwrap();
    let tc = TrainConfig {
        steps: 5,
        batch: 2,
        eval_every: 5,
        eval_blocks: 2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, &tokens, tc).unwrap();
    trainer.run(|_| Ok(())).unwrap();
    let bvvc = trainer.checkpoint().to_bytes();
    let mut buf = Vec::new();
    Checkpoint::load(&bvvc[..]).unwrap().save(&mut buf).unwrap();
    let bvvc_ok = buf == bvvc;
    let bvvc_codes = damage_codes(&bvvc, |b| {
        Checkpoint::from_bytes(b).map(|_| ()).map_err(|e| match e {
            NanoError::Format(f) => f.code(),
            _ => 1,
        })
    });

    let distinct = |codes: &[u8]| {
        let set: std::collections::HashSet<_> = codes.iter().collect();
        set.len() == codes.len() && !codes.contains(&0)
    };
    let expected = [
        FormatError::Truncated { offset: 0, needed: 0, available: 0 }.code(),
        FormatError::BadMagic { expected: [0; 4], found: [0; 4] }.code(),
        FormatError::UnsupportedVersion { found: 0, supported: 0 }.code(),
        FormatError::Corrupt(String::new()).code(),
    ];
    let pass = bvve_ok
        && bvvc_ok
        && distinct(&bvve_codes)
        && distinct(&bvvc_codes)
        && bvve_codes == expected
        && bvvc_codes == expected;
    report(
        9,
        "file-format round-trips",
        pass,
        &format!(
            "BVVE stable: {bvve_ok}, checkpoint stable: {bvvc_ok}; \
             codes for truncated/magic/version/trailing: BVVE {bvve_codes:?}, checkpoint {bvvc_codes:?}"
        ),
    );
    // PAD is id 0 in the fixture vocabulary.
    assert_eq!(vocab.entry(PAD_ID).unwrap().text, "\0");
}
