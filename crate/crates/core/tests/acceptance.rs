//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.
//!
//! Set `POSFAITH_UPDATE_SNAPSHOTS=1` to rewrite the pipeline snapshot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use posfaith::attention::{
    block_sentence_attention, load_attention, partition_blocks, select_targets, write_attention, AttentionMatrix,
    TokenSpan,
};
use posfaith::corpus::{words_range_for_context, Document};
use posfaith::llmclient::{chunked_summarize, ClientConfig, HttpChatClient, RetryPolicy, DEFAULT_CHUNK_TOKENS, MERGE_PROMPT};
use posfaith::llmclient::stub::{StubConfig, StubServer};
use posfaith::positional::{assign_bins, sensitivity, BinError, BinMode, BinProfile};
use posfaith::report::{raw_agreement, round_to};
use posfaith::scorers::{rouge_l_tokens, score_fact, sentence_faithfulness, RougeScorer, ScorerBackend};
use posfaith::segment::{filter_facts, AtomicFact};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn criterion_1() -> Outcome {
    let rows: [(&str, [f64; 5], f64); 5] = [
        ("Llama-8B", [0.81, 0.82, 0.79, 0.80, 0.75], 5.50),
        ("Llama-70B", [0.83, 0.82, 0.83, 0.81, 0.77], 5.25),
        ("Gemma3-12B", [0.85, 0.83, 0.84, 0.83, 0.79], 4.75),
        ("GPT-4o mini", [0.83, 0.81, 0.81, 0.78, 0.76], 4.75),
        ("Qwen", [0.86, 0.83, 0.83, 0.82, 0.84], -0.50),
    ];
    for (name, means, printed) in rows {
        let got = sensitivity(&BinProfile::from_means(&means))
            .sensitivity
            .ok_or_else(|| format!("{name}: undefined"))?;
        check((got - printed).abs() <= 0.01, || format!("{name}: {got} vs {printed}"))?;
    }
    Ok("5 model rows within 0.01".into())
}

fn criterion_2() -> Outcome {
    let first = [
        ("Sara Sorribes Tormo is a Spanish professional tennis player.", 0.92),
        ("Sara Sorribes Tormo was born in Spain.", 0.90),
        ("Sara Sorribes Tormo was born on October 8.", 0.87),
        ("Sara Sorribes Tormo was born in 1996.", 0.96),
        ("Sara Sorribes Tormo was born in Castellón de la Plana.", 0.93),
    ];
    let last = [
        ("Sara navigates her career.", 0.87),
        ("Sara’s career is that of an athlete.", 0.91),
        ("Sara has a unique blend of skill.", 0.14),
        ("Sara has perseverance.", 0.81),
        ("Sara is a promising athlete.", 0.30),
        ("Sara inspires current players.", 0.11),
        ("Sara inspires aspiring players.", 0.15),
    ];
    let mut out = Vec::new();
    for (sentence, facts, expected, shown) in [(0, &first[..], 0.916, "0.92"), (1, &last[..], 0.47, "0.47")] {
        let atomic: Vec<AtomicFact> = facts
            .iter()
            .enumerate()
            .map(|(j, (t, _))| AtomicFact {
                summary_id: "example".into(),
                sentence_index: sentence,
                fact_index: j,
                text: (*t).into(),
                position_words: 0.0,
                kept: true,
            })
            .collect();
        let kept = filter_facts(&atomic).iter().filter(|f| f.kept).count();
        check(kept == facts.len(), || format!("filter dropped {} facts", facts.len() - kept))?;
        let scores: Vec<f64> = facts.iter().map(|(_, s)| *s).collect();
        let got = sentence_faithfulness(&scores).map_err(|e| e.to_string())?;
        check((got - expected).abs() <= 0.005, || format!("{got} vs {expected}"))?;
        check(format!("{got:.2}") == shown, || format!("prints {got:.2}, expected {shown}"))?;
        out.push(format!("{got:.3}"));
    }
    Ok(format!("sentence faithfulness {} and {}", out[0], out[1]))
}

const VOCAB: &[&str] = &["river", "stone", "bridge", "market", "tower", "north", "winter", "lamp"];

fn oracle_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.to_lowercase().chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Textbook LCS recurrence over the full table.
fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn random_words(rng: &mut StdRng, max: usize) -> Vec<String> {
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())].to_owned()).collect()
}

fn criterion_3() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let backend = ScorerBackend::RougeL(RougeScorer);
    for case in 0..200 {
        let m = rng.gen_range(1..=8);
        let sentences: Vec<Vec<String>> = (0..m).map(|_| random_words(&mut rng, 10)).collect();
        let text = sentences
            .iter()
            .map(|w| {
                let mut s = w.join(" ");
                s[..1].make_ascii_uppercase();
                format!("{s}.")
            })
            .collect::<Vec<_>>()
            .join(" ");
        let fact = random_words(&mut rng, 8).join(" ");
        let doc = Document::new(format!("d{case}"), &text, BTreeMap::new());
        check(doc.sentences.len() == m, || format!("case {case}: split into {} sentences, built {m}", doc.sentences.len()))?;
        let h = oracle_tokens(&fact);
        let mut best = f64::NEG_INFINITY;
        for s in &sentences {
            let p = oracle_tokens(&s.join(" "));
            let l = oracle_lcs(&p, &h);
            let v = if l == 0 { 0.0 } else { 2.0 * l as f64 / (p.len() + h.len()) as f64 };
            best = best.max(v);
        }
        let got = score_fact(&fact, &doc, &backend).map_err(|e| e.to_string())?.score;
        check(got.to_bits() == best.to_bits(), || format!("case {case}: {got} vs brute force {best}"))?;
    }
    Ok("200 instances bit-exact".into())
}

fn criterion_4() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let seq = |rng: &mut StdRng| -> Vec<String> {
            let n = rng.gen_range(0..=20);
            (0..n).map(|_| VOCAB[rng.gen_range(0..5)].to_owned()).collect()
        };
        let a = seq(&mut rng);
        let b = seq(&mut rng);
        let l = oracle_lcs(&a, &b) as f64;
        let expected = if l == 0.0 {
            0.0
        } else {
            let (p, r) = (l / b.len() as f64, l / a.len() as f64);
            2.0 * p * r / (p + r)
        };
        let got = rouge_l_tokens(&a, &b);
        worst = worst.max((got - expected).abs());
        check((got - expected).abs() <= 1e-12, || format!("case {case}: {got} vs {expected}"))?;
    }
    Ok(format!("500 pairs, max deviation {worst:.1e}"))
}

fn oracle_fixed_bin(p: f64, w: f64, k: usize) -> Vec<usize> {
    (0..k)
        .filter(|&i| {
            let lo = w * i as f64 / k as f64;
            let hi = w * (i + 1) as f64 / k as f64;
            if i + 1 == k {
                lo <= p && p <= w
            } else {
                lo <= p && p < hi
            }
        })
        .collect()
}

fn oracle_observed_bin(p: f64, min: f64, max: f64, k: usize) -> Vec<usize> {
    let range = max - min;
    (0..k)
        .filter(|&i| {
            let lo = if i == 0 { min - 0.001 * range } else { min + range * i as f64 / k as f64 };
            let hi = if i + 1 == k { max } else { min + range * (i + 1) as f64 / k as f64 };
            lo < p && p <= hi
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let mut rng = StdRng::seed_from_u64(5);
    let mut degenerate = 0;
    for case in 0..200 {
        let k = if case % 2 == 0 { 5 } else { 10 };
        let lens: Vec<usize> = (0..rng.gen_range(1..=40)).map(|_| rng.gen_range(1..=30)).collect();
        let mut start = 0;
        let mut positions = Vec::new();
        for len in &lens {
            let mid = (2 * start + len) as f64 / 2.0;
            for _ in 0..rng.gen_range(1..=4) {
                positions.push(mid);
            }
            start += len;
        }
        let w = start as f64;
        let fixed = assign_bins(&positions, w, k, BinMode::FixedDomain).map_err(|e| e.to_string())?;
        for (p, b) in positions.iter().zip(&fixed.bins) {
            let hits = oracle_fixed_bin(*p, w, k);
            check(hits == [*b], || format!("case {case}: fixed position {p} in {hits:?}, assigned {b}"))?;
        }
        let min = positions.iter().copied().fold(f64::INFINITY, f64::min);
        let max = positions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match assign_bins(&positions, w, k, BinMode::ObservedRange) {
            Err(BinError::DegenerateRange) if min == max => degenerate += 1,
            Err(e) => return Err(format!("case {case}: {e}")),
            Ok(observed) => {
                for (p, b) in positions.iter().zip(&observed.bins) {
                    let hits = oracle_observed_bin(*p, min, max, k);
                    check(hits == [*b], || format!("case {case}: observed position {p} in {hits:?}, assigned {b}"))?;
                }
            }
        }
    }
    Ok(format!("200 position sets, both modes ({degenerate} degenerate ranges rejected)"))
}

fn double_sum(m: &AttentionMatrix, start: usize, len: usize, t: TokenSpan) -> f64 {
    let mut s = 0.0;
    for i in start..start + len {
        for j in t.start..t.start + t.length {
            s += m.get(i, j);
        }
    }
    s / (len * t.length) as f64
}

fn criterion_6() -> Outcome {
    let n = 350;
    let prompt = 140;
    let uniform = AttentionMatrix::from_fn(n, prompt, |i, j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 })
        .map_err(|e| e.to_string())?;
    let spans: Vec<TokenSpan> = [(140, 35), (175, 60), (235, 45), (280, 40), (320, 30)]
        .map(|(s, l)| TokenSpan::new(s, l))
        .to_vec();
    let blocks = partition_blocks(n);
    check(blocks.iter().map(|b| b.length).collect::<Vec<_>>() == [100, 100, 100, 50], || "block partition".into())?;
    let targets = select_targets(&spans).map_err(|e| e.to_string())?;
    check(targets.indices == (0, 2, 4), || format!("targets {:?}", targets.indices))?;
    let mut pairs = 0;
    for block in &blocks {
        for t in spans.iter().chain([&targets.first, &targets.middle, &targets.last]) {
            let got = block_sentence_attention(&uniform, *block, *t);
            let want = double_sum(&uniform, block.start, block.length, *t);
            check((got - want).abs() <= 1e-6, || format!("block {} span {t:?}: {got} vs {want}", block.index))?;
            pairs += 1;
        }
    }

    let identity = AttentionMatrix::from_fn(n, prompt, |i, j| if i == j { 1.0 } else { 0.0 }).map_err(|e| e.to_string())?;
    for block in &blocks {
        for t in spans.iter().filter(|t| t.start >= block.start && t.end() <= block.end()) {
            let got = block_sentence_attention(&identity, *block, *t);
            check(got == 1.0 / block.length as f64, || format!("diagonal block {}: {got}", block.index))?;
        }
    }
    let tail = TokenSpan::new(310, 25);
    check(block_sentence_attention(&identity, blocks[3], tail) == 1.0 / 50.0, || "partial block".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let local = AttentionMatrix::from_fn(n, prompt, |i, j| match (i, j) {
        (0, 0) => 1.0,
        _ if i == 0 => 0.0,
        _ if j == i => 0.5,
        _ if j < i => 0.5 / i as f64,
        _ => 0.0,
    })
    .map_err(|e| e.to_string())?;
    let stack = [uniform.clone(), local.clone(), uniform.clone(), local.clone()];
    write_attention(dir.path().join("stack"), &stack, 2, 2).map_err(|e| e.to_string())?;
    write_attention(dir.path().join("a"), &[uniform.clone()], 1, 1).map_err(|e| e.to_string())?;
    write_attention(dir.path().join("b"), &[local.clone()], 1, 1).map_err(|e| e.to_string())?;
    let stacked = load_attention(dir.path().join("stack")).map_err(|e| e.to_string())?;
    let a = load_attention(dir.path().join("a")).map_err(|e| e.to_string())?;
    let b = load_attention(dir.path().join("b")).map_err(|e| e.to_string())?;
    for block in &blocks {
        for t in &spans {
            let of_mean = block_sentence_attention(&stacked, *block, *t);
            let mean_of = (block_sentence_attention(&a, *block, *t) + block_sentence_attention(&b, *block, *t)) / 2.0;
            check((of_mean - mean_of).abs() <= 1e-6, || format!("stack commute block {}: {of_mean} vs {mean_of}", block.index))?;
        }
    }
    write_attention(dir.path().join("same"), &[uniform.clone(), uniform.clone(), uniform.clone(), uniform.clone()], 2, 2)
        .map_err(|e| e.to_string())?;
    let same = load_attention(dir.path().join("same")).map_err(|e| e.to_string())?;
    check(same == a, || "stack of identical matrices differs from single load".into())?;
    Ok(format!("{pairs} block/target pairs; diagonal exact; stack commutes"))
}

fn criterion_7() -> Outcome {
    let mut shown = Vec::new();
    for (agree, total, expected) in [(515usize, 543usize, "94.8"), (1541, 1569, "98.2")] {
        let a = vec![true; total];
        let b: Vec<bool> = (0..total).map(|i| i < agree).collect();
        let pct = raw_agreement(&a, &b).map_err(|e| e.to_string())?;
        let printed = format!("{:.1}", round_to(pct, 1));
        check(printed == expected, || format!("{agree}/{total} -> {printed}, expected {expected}"))?;
        shown.push(format!("{agree}/{total} -> {printed}"));
    }
    Ok(shown.join(", "))
}

fn criterion_8() -> Outcome {
    let table = [
        (4000, (800, 1000)),
        (5000, (1000, 1250)),
        (6000, (1200, 1500)),
        (7000, (1400, 1750)),
        (8000, (1600, 2000)),
    ];
    for (tokens, range) in table {
        let got = words_range_for_context(tokens);
        check(got == range, || format!("{tokens}: {got:?} vs {range:?}"))?;
    }
    Ok("4K-8K rows exact".into())
}

const SNAPSHOT_FILES: &[&str] = &["report.md", "report.json", "report.svg", "bins.jsonl"];

fn run_cli(server: &StubServer, out: &Path) -> Result<serde_json::Value, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_posfaith"))
        .arg("pipeline")
        .arg(fixtures().join("corpus.jsonl"))
        .arg("--out")
        .arg(out)
        .args(["--endpoint", &server.base_url(), "--model", "stub-model", "--concurrency", "4"])
        .env_remove("POSFAITH_API_KEY")
        .output()
        .map_err(|e| e.to_string())?;
    check(output.status.success(), || {
        format!("exit {:?}: {}", output.status.code(), String::from_utf8_lossy(&output.stderr))
    })?;
    let run = std::fs::read_to_string(out.join("run.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&run).map_err(|e| e.to_string())
}

fn criterion_9() -> Outcome {
    let server = StubServer::start(StubConfig::default()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    let first = run_cli(&server, &out)?;
    let hits = server.hits();
    check(hits > 0 && first["network_calls"] == hits, || format!("first run: {hits} hits, run.json {first}"))?;

    let snapshot = fixtures().join("snapshot");
    if std::env::var_os("POSFAITH_UPDATE_SNAPSHOTS").is_some() {
        std::fs::create_dir_all(&snapshot).map_err(|e| e.to_string())?;
        for f in SNAPSHOT_FILES {
            std::fs::copy(out.join(f), snapshot.join(f)).map_err(|e| e.to_string())?;
        }
    }
    for f in SNAPSHOT_FILES {
        let got = std::fs::read(out.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let want = std::fs::read(snapshot.join(f)).map_err(|e| format!("snapshot {f}: {e}"))?;
        check(got == want, || format!("{f} differs from snapshot"))?;
    }
    let report = std::fs::read_to_string(out.join("report.md")).map_err(|e| e.to_string())?;
    check(report.contains("Sensitivity"), || "report lacks a sensitivity column".into())?;

    let second = run_cli(&server, &out)?;
    check(server.hits() == hits, || format!("second run reached the server {} times", server.hits() - hits))?;
    check(second["network_calls"] == 0, || format!("second run: {second}"))?;
    for f in SNAPSHOT_FILES {
        let again = std::fs::read(out.join(f)).map_err(|e| e.to_string())?;
        let want = std::fs::read(snapshot.join(f)).map_err(|e| e.to_string())?;
        check(again == want, || format!("{f} changed on the cached run"))?;
    }
    Ok(format!(
        "snapshot stable; first run {hits} calls, second run 0 calls / {} cache hits",
        second["cache_hits"]
    ))
}

fn criterion_10() -> Outcome {
    let text: Vec<String> = (0..16)
        .map(|i| {
            let words: Vec<String> = (1..384).map(|j| format!("w{i}n{j}")).collect();
            format!("Part{i} {}.", words.join(" "))
        })
        .collect();
    let doc = Document::new("long", &text.join(" "), BTreeMap::new());
    let server = StubServer::start(StubConfig::default()).map_err(|e| e.to_string())?;
    let mut config = ClientConfig::new(server.base_url(), "stub-model");
    config.api_key = None;
    config.retry = RetryPolicy {
        retries: 0,
        base_delay: Duration::from_millis(1),
    };
    let client = HttpChatClient::new(config).map_err(|e| e.to_string())?;
    let out = chunked_summarize(&doc, DEFAULT_CHUNK_TOKENS, &client, 4).map_err(|e| e.to_string())?;
    let prompts = server.prompts();
    let leaves = prompts.iter().filter(|p| p.starts_with("Write an accurate")).count();
    let merges = prompts.iter().filter(|p| p.starts_with(MERGE_PROMPT)).count();
    check(out.chunks.len() == 4, || format!("{} chunks", out.chunks.len()))?;
    check((leaves, merges) == (4, 3), || format!("{leaves} leaf + {merges} merge calls"))?;
    check((out.leaf_calls, out.merge_calls) == (4, 3), || "reported call counts".into())?;
    Ok("4 chunks: 4 leaf + 3 merge calls at 2048 tokens".into())
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome, Option<Duration>); 10] = [
        (1, "sensitivity reproduction", criterion_1, Some(Duration::from_secs(1))),
        (2, "worked example", criterion_2, Some(Duration::from_secs(1))),
        (3, "max-over-sentences oracle", criterion_3, Some(Duration::from_secs(5))),
        (4, "ROUGE-L oracle", criterion_4, Some(Duration::from_secs(5))),
        (5, "binning oracle", criterion_5, Some(Duration::from_secs(5))),
        (6, "attention aggregation", criterion_6, Some(Duration::from_secs(5))),
        (7, "agreement arithmetic", criterion_7, None),
        (8, "word-range table", criterion_8, None),
        (9, "end-to-end pipeline", criterion_9, Some(Duration::from_secs(30))),
        (10, "chunk-merge shape", criterion_10, None),
    ];
    let mut failed = 0;
    for (n, name, f, limit) in criteria {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took {elapsed:.2?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("[PASS] criterion {n}: {name}: {detail} ({elapsed:.2?})"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] criterion {n}: {name}: {why} ({elapsed:.2?})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
