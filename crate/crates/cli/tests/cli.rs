use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bvv_cli::config::ExperimentConfig;

fn bvv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bvv"))
        .arg("--outdir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bvv(dir, args);
    assert!(
        out.status.success(),
        "bvv {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.trim().strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .unwrap_or_else(|| panic!("{key} missing from:\n{text}"))
}

#[test]
fn build_vocab_from_ngram_list() {
    let dir = tempfile::tempdir().unwrap();
    let list = dir.path().join("top.txt");
    fs::write(&list, "the\ning\n при\n").unwrap();
    let out = ok(dir.path(), &["build-vocab", "--profile", "65536", "--ngrams", list.to_str().unwrap()]);
    assert_eq!(field(&out, "V"), "65536");
    assert_eq!(field(&out, "n-grams"), "3");
    let jsonl = fs::read_to_string(dir.path().join("vocab.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 65536);
    assert!(jsonl.lines().nth(0xE000).unwrap().contains("\"the\""));
}

#[test]
fn mined_ngrams_follow_frequency_counts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = "abcab abcab xyz";
    let path = dir.path().join("c.txt");
    fs::write(&path, corpus).unwrap();
    let list = dir.path().join("mined.txt");
    let out = ok(
        dir.path(),
        &[
            "build-vocab",
            "--mine",
            path.to_str().unwrap(),
            "--top",
            "5",
            "--write-ngrams",
            list.to_str().unwrap(),
        ],
    );
    assert_eq!(field(&out, "n-grams"), "5");

    // Brute-force oracle: count every substring of 2..=8 chars.
    let chars: Vec<char> = corpus.chars().collect();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for i in 0..chars.len() {
        for n in 2..=8 {
            if i + n <= chars.len() {
                *counts.entry(chars[i..i + n].iter().collect()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let expected: Vec<String> = ranked.into_iter().take(5).map(|(s, _)| s).collect();
    let mined: Vec<String> = fs::read_to_string(&list).unwrap().lines().map(String::from).collect();
    assert_eq!(mined, expected);
}

#[test]
fn missing_input_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = bvv(dir.path(), &["build-vocab", "--ngrams", "/no/such/file.txt"]);
    assert_eq!(out.status.code(), Some(10));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/file.txt"));
    let out = bvv(dir.path(), &["build-vocab"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn build_emb_file_length_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["build-emb", "--H", "16", "--d", "64"]);
    let (v, d, raw) = (1024usize, 64usize, 256usize);
    // magic, version, V, d, H, provenance, frozen flag, vocab hash
    let header = 4 + 4 + 8 + 4 + 4 + 1 + 1 + 32;
    let expected = header + raw * 8 + d * raw * 8 + v * d * 4;
    assert_eq!(fs::metadata(dir.path().join("embeddings.bvve")).unwrap().len() as usize, expected);
    assert!(out.contains("PCA variance ratios (top 10)"));

    let a = dir.path().join("a.bvve");
    let b = dir.path().join("b.bvve");
    for p in [&a, &b] {
        ok(dir.path(), &["--seed", "7", "build-emb", "--random", "--out", p.to_str().unwrap()]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let bad = bvv(dir.path(), &["build-emb", "--d", "512", "--H", "16"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("512"));
}

#[test]
fn corrupted_embedding_file_gets_format_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["build-emb"]);
    let path = dir.path().join("embeddings.bvve");
    let bytes = fs::read(&path).unwrap();
    let cut = dir.path().join("cut.bvve");
    fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let out = bvv(dir.path(), &["project2d", "--emb", cut.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(13));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&cut, &bad).unwrap();
    let out = bvv(dir.path(), &["project2d", "--emb", cut.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(11));
}

#[test]
fn train_eval_generate_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let common = ["--steps", "120", "--eval-every", "40", "--batch", "4"];

    let mut args = vec!["train", "--mode", "frozen_visual"];
    args.extend(common);
    let out = ok(d, &args);
    let loss: f64 = field(&out, "final train loss").split(' ').next().unwrap().parse().unwrap();
    assert!(loss < 1024f64.ln(), "loss {loss}");
    let visual_csv = fs::read_to_string(d.join("loss_frozen_visual.csv")).unwrap();
    assert_eq!(visual_csv.lines().count(), 121);

    let mut args = vec!["train", "--mode", "trainable"];
    args.extend(common);
    ok(d, &args);
    assert_ne!(visual_csv, fs::read_to_string(d.join("loss_trainable.csv")).unwrap());

    // Stop at 40 steps, then resume to 120: same history as the straight run.
    let part = d.join("part");
    fs::create_dir_all(&part).unwrap();
    let out = bvv(
        &part,
        &["train", "--mode", "frozen_visual", "--steps", "40", "--eval-every", "40", "--batch", "4"],
    );
    assert!(out.status.success());
    let ckpt = part.join("frozen_visual.bvvc");
    ok(&part, &["train", "--resume", ckpt.to_str().unwrap(), "--steps", "120"]);
    assert_eq!(fs::read_to_string(part.join("loss_frozen_visual.csv")).unwrap(), visual_csv);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(d.join("frozen_visual.bvvc")).unwrap());

    let ck = d.join("frozen_visual.bvvc");
    let out = ok(d, &["eval", "--ckpt", ck.to_str().unwrap()]);
    let ppl: f64 = field(&out, "perplexity").parse().unwrap();
    assert!(ppl < 1024.0);

    let g1 = ok(d, &["generate", "--ckpt", ck.to_str().unwrap(), "--prompt", "The ", "-n", "20", "--temperature", "0"]);
    let g2 = ok(d, &["generate", "--ckpt", ck.to_str().unwrap(), "--prompt", "The ", "-n", "20", "--temperature", "0"]);
    assert_eq!(g1, g2);
    assert!(g1.starts_with("The "));
    let s1 = ok(d, &["--seed", "3", "generate", "--ckpt", ck.to_str().unwrap(), "--prompt", "Мы"]);
    let s2 = ok(d, &["--seed", "3", "generate", "--ckpt", ck.to_str().unwrap(), "--prompt", "Мы"]);
    assert_eq!(s1, s2);
}

#[test]
fn ablate_reports_three_modes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["ablate", "--steps", "30", "--batch", "2", "--eval-every", "30"]);
    assert!(out.contains("slowdown random/visual"));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, mode) in rows.iter().zip(["trainable", "frozen_visual", "frozen_random"]) {
        assert!(row.starts_with(mode));
    }
}

#[test]
fn project2d_has_one_row_per_token_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["build-emb"]);
    let emb = dir.path().join("embeddings.bvve");
    let copy = dir.path().join("copy.bvve");
    fs::copy(&emb, &copy).unwrap();
    let out = ok(dir.path(), &["project2d", "--emb", emb.to_str().unwrap()]);
    assert!(out.contains("corr(char_len, ink_density)"));
    let first = fs::read(dir.path().join("project2d.csv")).unwrap();
    let p2 = dir.path().join("p2.csv");
    ok(dir.path(), &["project2d", "--emb", copy.to_str().unwrap(), "--out", p2.to_str().unwrap()]);
    assert_eq!(fs::read(&p2).unwrap(), first);

    let mut reader = csv::Reader::from_reader(&first[..]);
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["id", "token_text", "char_len", "x", "y", "ink_density"]
    );
    assert_eq!(reader.records().count(), 1024);
}

#[test]
fn stats_on_plain_and_ngram_vocabularies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let empty = d.join("none.txt");
    fs::write(&empty, "").unwrap();
    let plain = d.join("plain.jsonl");
    ok(d, &["build-vocab", "--ngrams", empty.to_str().unwrap(), "--out", plain.to_str().unwrap()]);
    let corpus = d.join("ascii.txt");
    fs::write(&corpus, "the cat and the hat\nthe end\n").unwrap();

    let out = ok(d, &["stats", "--vocab", plain.to_str().unwrap(), corpus.to_str().unwrap()]);
    assert_eq!(field(&out, "avg chars/token"), "1.0000");
    assert!(out.contains("round-trip: OK 100%"));

    let tri = d.join("tri.txt");
    fs::write(&tri, "the\nand\n").unwrap();
    let with_tri = d.join("tri.jsonl");
    ok(d, &["build-vocab", "--ngrams", tri.to_str().unwrap(), "--out", with_tri.to_str().unwrap()]);
    let out = ok(d, &["stats", "--vocab", with_tri.to_str().unwrap(), corpus.to_str().unwrap()]);
    let avg: f64 = field(&out, "avg chars/token").parse().unwrap();
    assert!(avg > 1.0);

    let bundled = ok(d, &["stats"]);
    assert!(bundled.contains("round-trip: OK 100%"));
}

#[test]
fn commands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "hello hello world, привет мир 你好\n".repeat(20)).unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        ok(dir.path(), &["build-vocab", "--compact", corpus.to_str().unwrap(), "--size", "64", "--out", p.to_str().unwrap()]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn config_file_round_trips_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    fs::write(&cfg_path, "mode = \"trainable\"\n[train]\nsteps = 17\nseed = 5\n[profile]\nside = 12\n").unwrap();
    let shown = ok(dir.path(), &["--config", cfg_path.to_str().unwrap(), "--seed", "9", "show-config"]);
    let parsed = ExperimentConfig::from_toml_str(&shown).unwrap();
    assert_eq!(parsed.train.steps, 17);
    assert_eq!(parsed.train.seed, 9);
    assert_eq!(parsed.profile.side, 12);
    assert_eq!(ExperimentConfig::from_toml_str(&parsed.to_toml_string().unwrap()).unwrap(), parsed);

    fs::write(&cfg_path, "[profile]\nd_model = 300\n").unwrap();
    let out = bvv(dir.path(), &["--config", cfg_path.to_str().unwrap(), "show-config"]);
    assert_eq!(out.status.code(), Some(3));
}
