//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. The full pipeline runs at the default
//! scale, so this test takes several minutes even in release mode.

use neural_search::catalog::{self, AttributeVocabulary, ClickModel, ProductId};
use neural_search::encoders::{
    gru_cell_step, BiGruEncoder, Encoder, GruCell, GruConfig, Pooling, TransformerConfig,
    TransformerEncoder,
};
use neural_search::graphs::{self, QueryClass, WalkConfig};
use neural_search::index::{exact_knn, EmbeddingIndex, IndexConfig};
use neural_search::metrics::{
    average_precision, mean, ndcg, precision_recall_at_k, rank_candidates, reciprocal_rank,
};
use neural_search::pipeline::{
    random_mrr_baseline, read_json, PresetSummary, PretrainSummary, RunConfig,
};
use neural_search::rng::{rng, Rng};
use neural_search::tensor::{
    grad_check_params, primitive_suite, Graph, ParamStore, Parameterized, Tensor, Var, SUITE_TOL,
};
use neural_search::triplets::{self, SamplerConfig, TripletSource};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Write straight to the stderr handle so the line survives output capture.
fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

// ------------------------------------------------------------ criterion 2

fn probe<'g, E: Encoder<f64>>(g: &'g Graph<f64>, enc: &E, batch: &[Vec<u32>]) -> Var<'g, f64> {
    let out = enc.encode_batch(g, batch).expect("encode");
    let shape = out.shape();
    let w: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3)
        .collect();
    out.mul(&g.constant(&shape, w)).sum()
}

fn random_batch(r: &mut Rng, vocab: u32, first_id: u32) -> Vec<Vec<u32>> {
    (0..r.random_range(1..4))
        .map(|_| {
            (0..r.random_range(1..5))
                .map(|_| r.random_range(first_id..vocab))
                .collect()
        })
        .collect()
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let seeds = 20u64;
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut record = |name: String, err: f64, passed: bool| {
        if err > worst.0 {
            worst = (err, name.clone());
        }
        if !passed {
            failures.push(name);
        }
    };
    let mut primitives = BTreeSet::new();
    for seed in 0..seeds {
        for (name, rep) in primitive_suite(seed) {
            primitives.insert(name);
            record(format!("{name}@{seed}"), rep.max_rel_error, rep.passed());
        }
        let mut r = rng(seed ^ 0xacce);
        for layers in [1, 2] {
            let cfg = GruConfig {
                vocab_size: 7,
                embed_dim: 2,
                hidden: 2,
                layers,
                output_dim: 2,
                max_len: 16,
                init_scale: 0.5,
            };
            let mut enc = BiGruEncoder::<f64>::new(cfg, seed).unwrap();
            let batch = random_batch(&mut r, 7, 0);
            let rep = grad_check_params(&mut enc, |g, e| probe(g, e, &batch), 1e-6, SUITE_TOL);
            record(
                format!("bigru{layers}@{seed}"),
                rep.max_rel_error,
                rep.passed(),
            );
        }
        let pooling = if seed % 2 == 0 {
            Pooling::Mean
        } else {
            Pooling::First
        };
        let cfg = TransformerConfig {
            vocab_size: 9,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 6,
            max_len: 8,
            output_dim: 3,
            pooling,
            dropout: 0.0,
            init_std: 0.5,
            ln_eps: 1e-5,
        };
        let mut enc = TransformerEncoder::<f64>::new(cfg, seed).unwrap();
        let ln: Vec<_> = enc
            .params()
            .ids()
            .filter(|&id| enc.params().name(id).contains("ln"))
            .collect();
        for id in ln {
            let shape = enc.params().get(id).shape().to_vec();
            let base = if enc.params().name(id).ends_with(".g") {
                1.0
            } else {
                0.0
            };
            let mut t = Tensor::uniform(&shape, -0.3, 0.3, &mut r);
            t.data_mut().iter_mut().for_each(|v| *v += base);
            enc.params_mut().assign(id, t).unwrap();
        }
        let batch = random_batch(&mut r, 9, 5);
        let rep = grad_check_params(&mut enc, |g, e| probe(g, e, &batch), 1e-6, SUITE_TOL);
        record(
            format!("transformer@{seed}"),
            rep.max_rel_error,
            rep.passed(),
        );
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        failures.is_empty() && secs < 120.0,
        format!(
            "{} primitives + BiGRU(1,2) + transformer over {seeds} seeds; worst rel err {:.2e} ({}); failures {:?}; {secs:.1}s (limit 120s)",
            primitives.len(),
            worst.0,
            worst.1,
            failures
        ),
    )
}

// ------------------------------------------------------------ criterion 3

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn scalar_gru(w: [f64; 9], x: f64, h: f64) -> f64 {
    let r = sigmoid(x * w[0] + h * w[3] + w[6]);
    let z = sigmoid(x * w[1] + h * w[4] + w[7]);
    let cand = (x * w[2] + (r * h) * w[5] + w[8]).tanh();
    z * h + (1.0 - z) * cand
}

fn library_gru(w: [f64; 9], x: f64, h: f64) -> f64 {
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "c", 1, 1, 0.1, &mut rng(0));
    for (id, v) in cell.ids().into_iter().zip(w) {
        store
            .assign(id, Tensor::new(vec![1, 1], vec![v]).unwrap())
            .unwrap();
    }
    let g = Graph::inference();
    let bound = cell.bind(&g, &store);
    gru_cell_step(
        &bound,
        g.constant(&[1, 1], vec![x]),
        g.constant(&[1, 1], vec![h]),
    )
    .item()
}

fn gru_oracle() -> Verdict {
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let w: [f64; 9] = std::array::from_fn(|_| r.random_range(-2.0..2.0));
        let (x, h) = (r.random_range(-2.0..2.0), r.random_range(-1.0..1.0));
        worst = worst.max((library_gru(w, x, h) - scalar_gru(w, x, h)).abs());
    }
    let zero = library_gru([0.0; 9], 1.3, 0.8);
    let copy = library_gru(
        [0.7, -0.3, 1.1, 0.4, 0.9, -0.6, 0.2, 50.0, -0.1],
        0.9,
        -0.37,
    );
    let trace = library_gru([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0], 1.0, 0.0);
    let ok =
        worst < 1e-6 && zero == 0.4 && (copy + 0.37).abs() < 1e-4 && (trace - 0.2048).abs() < 1e-4;
    verdict(ok, format!("100 draws max |diff| {worst:.2e} (limit 1e-6); zero weights {zero} (want 0.4); Z=1 copy {copy:.6}; hand trace {trace:.6} (want 0.2048)"))
}

// ------------------------------------------------------------ criterion 4

fn oracle_rr(ranking: &[ProductId], positive: ProductId) -> f64 {
    let mut i = 0;
    while ranking[i] != positive {
        i += 1;
    }
    1.0 / (i + 1) as f64
}

fn oracle_ap(ranking: &[ProductId], positives: &BTreeSet<ProductId>) -> f64 {
    let mut total = 0.0;
    for (i, p) in ranking.iter().enumerate() {
        if positives.contains(p) {
            let above = ranking[..=i]
                .iter()
                .filter(|q| positives.contains(q))
                .count();
            total += above as f64 / (i + 1) as f64;
        }
    }
    total / positives.len() as f64
}

fn dcg(ranking: &[ProductId], positives: &BTreeSet<ProductId>) -> f64 {
    ranking
        .iter()
        .enumerate()
        .filter(|(_, p)| positives.contains(p))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum()
}

fn permutations(items: &[ProductId]) -> Vec<Vec<ProductId>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn metric_oracles() -> Verdict {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.random_range(1..=8usize);
        let mut ranking: Vec<ProductId> = (0..n as ProductId).map(|i| i * 3 + 1).collect();
        ranking.shuffle(&mut r);
        let n_pos = r.random_range(1..=n);
        let positives: BTreeSet<ProductId> =
            ranking.choose_multiple(&mut r, n_pos).copied().collect();
        let single = *positives.iter().next().unwrap();
        let ideal = permutations(&ranking)
            .iter()
            .map(|p| dcg(p, &positives))
            .fold(0.0, f64::max);
        let k = r.random_range(1..=n);
        let n_truth = r.random_range(1..=n);
        let truth: BTreeSet<ProductId> =
            ranking.choose_multiple(&mut r, n_truth).copied().collect();
        let hits = ranking[..k].iter().filter(|p| truth.contains(p)).count() as f64;
        let (p, rc) = precision_recall_at_k(&ranking[..k], &truth, k);
        for diff in [
            reciprocal_rank(&ranking, single).unwrap() - oracle_rr(&ranking, single),
            average_precision(&ranking, &positives) - oracle_ap(&ranking, &positives),
            ndcg(&ranking, &positives) - dcg(&ranking, &positives) / ideal,
            p - hits / k as f64,
            rc - hits / truth.len() as f64,
        ] {
            worst = worst.max(diff.abs());
        }
    }
    let mut r = rng(5);
    let rrs: Vec<f64> = (0..10_000)
        .map(|_| {
            let q: Vec<f32> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
            let vecs: Vec<Vec<f32>> = (0..21)
                .map(|_| (0..8).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect();
            let cands: Vec<(ProductId, &[f32])> = vecs
                .iter()
                .enumerate()
                .map(|(i, v)| (i as ProductId, v.as_slice()))
                .collect();
            reciprocal_rank(&rank_candidates(&q, &cands), 0).unwrap()
        })
        .collect();
    let random_mrr = mean(rrs);
    let target = random_mrr_baseline(21);
    verdict(
        worst <= 1e-12 && (random_mrr - target).abs() <= 0.01,
        format!("1000 cases max |diff| {worst:.1e} (limit 1e-12); random-embedding MRR {random_mrr:.4} vs H21/21 = {target:.4} (±0.01)"),
    )
}

// ------------------------------------------------------------ criterion 5

fn unit_vectors(n: usize, d: usize, r: &mut Rng) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..d).map(|_| r.random_range(-1.0f32..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn ann_fidelity() -> Verdict {
    let start = Instant::now();
    let mut r = rng(55);
    let items: Vec<(ProductId, Vec<f32>)> = unit_vectors(10_000, 64, &mut r)
        .into_iter()
        .enumerate()
        .map(|(i, v)| (i as ProductId, v))
        .collect();
    let queries = unit_vectors(200, 64, &mut r);
    let index = EmbeddingIndex::build(
        items.clone(),
        IndexConfig {
            seed: 7,
            ..IndexConfig::default()
        },
    )
    .unwrap();
    let build_secs = start.elapsed().as_secs_f64();
    let mut recall = Vec::new();
    for q in &queries {
        let truth: BTreeSet<ProductId> = exact_knn(&items, q, 10)
            .unwrap()
            .ids()
            .into_iter()
            .collect();
        let got = index.query(q, 10).unwrap().ids();
        recall.push(got.iter().filter(|p| truth.contains(p)).count() as f64 / 10.0);
    }
    let recall = mean(recall);
    let mut bytes = Vec::new();
    index.write(&mut bytes).unwrap();
    let back = EmbeddingIndex::<f32>::read(bytes.as_slice()).unwrap();
    let identical = queries.iter().all(|q| {
        let (a, b) = (index.query(q, 50).unwrap(), back.query(q, 50).unwrap());
        a.hits.len() == b.hits.len()
            && a.hits
                .iter()
                .zip(&b.hits)
                .all(|(x, y)| x.0 == y.0 && x.1.to_bits() == y.1.to_bits())
    });
    let secs = start.elapsed().as_secs_f64();
    verdict(
        recall >= 0.95 && identical && secs < 180.0,
        format!("recall@10 {recall:.4} over 200 queries (need >= 0.95); round trip bit-exact: {identical}; build {build_secs:.1}s, total {secs:.1}s (limit 180s)"),
    )
}

// ------------------------------------------------------------ criterion 6

fn within_3_sigma(hits: usize, n: usize, p: f64) -> (bool, f64) {
    let rate = hits as f64 / n as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    ((rate - p).abs() <= 3.0 * sigma, rate)
}

fn sampling_rules() -> Verdict {
    let cfg = RunConfig::desk();
    let vocab = AttributeVocabulary::default();
    let cat = catalog::gen_catalog(&vocab, cfg.n_products, 1).unwrap();
    let (queries, log) = catalog::gen_clicklog(
        &cat,
        cfg.n_queries,
        cfg.n_sessions,
        &ClickModel::default(),
        2,
    )
    .unwrap();
    let log = graphs::dedup_queries(&queries, &log);
    let qp = graphs::build_qp_graph(&log);
    let pp = graphs::build_pp_graph(&log, &cat);
    let classes = graphs::classify_all(&qp, &cat, cfg.broad_threshold);
    let walks = graphs::random_walks(&pp, &WalkConfig::default(), 3);
    let anchors: Vec<u32> = qp.queries().collect();
    let sampler = SamplerConfig {
        seed: 9,
        ..SamplerConfig::default()
    };
    let atg = |p: ProductId| &cat.product(p).atg;
    let (mut broad, mut broad_diff, mut narrow, mut narrow_same, mut pps, mut pp_same) =
        (0, 0, 0, 0, 0, 0);
    let mut epoch = 0;
    while (broad < 10_000 || narrow < 10_000 || pps < 10_000) && epoch < 500 {
        let (qt, _) =
            triplets::sample_qp_triplets(&anchors, &qp, &classes, &queries, &cat, &sampler, epoch)
                .unwrap();
        for t in qt {
            match classes.get(&t.anchor_id) {
                Some(QueryClass::Broad(_)) => {
                    broad += 1;
                    broad_diff += usize::from(atg(t.negative_id) != atg(t.positive_id));
                }
                Some(QueryClass::Narrow(_)) => {
                    narrow += 1;
                    narrow_same += usize::from(atg(t.negative_id) == atg(t.positive_id));
                }
                _ => {}
            }
        }
        if pps < 10_000 {
            let (pt, _) = triplets::sample_pp_triplets(&walks, &cat, &sampler, epoch).unwrap();
            for t in pt.into_iter().filter(|t| t.source == TripletSource::Pp) {
                pps += 1;
                pp_same += usize::from(atg(t.negative_id) == atg(t.anchor_id));
            }
        }
        epoch += 1;
    }
    let (narrow_ok, narrow_rate) = within_3_sigma(narrow_same, narrow, 0.5);
    let (pp_ok, pp_rate) = within_3_sigma(pp_same, pps, 0.5);
    let ok = broad >= 10_000
        && narrow >= 10_000
        && pps >= 10_000
        && broad_diff == broad
        && narrow_ok
        && pp_ok;
    verdict(
        ok,
        format!(
            "broad {broad} triplets, {:.2}% different-ATG; narrow {narrow} triplets, same-ATG rate {narrow_rate:.4}; \
             product {pps} triplets, same-ATG rate {pp_rate:.4} (0.5 ± 3σ)",
            100.0 * broad_diff as f64 / broad.max(1) as f64
        ),
    )
}

// ------------------------------------------------------- criteria 7, 8, 9

const PRESETS: [&str; 6] = [
    "transformer-qp",
    "transformer-augmented",
    "gru1-qp",
    "gru1-augmented",
    "gru2-qp",
    "gru2-augmented",
];

fn pipeline(dir: &Path, preset: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_nsearch"))
        .args(["pipeline", "--preset", preset, "--seed", "1", "--out"])
        .arg(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{preset} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn learning_signal(dir: &Path) -> (Verdict, Option<PretrainSummary>) {
    let start = Instant::now();
    for p in PRESETS {
        if let Err(e) = pipeline(dir, p) {
            return (verdict(false, e), None);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = |p: &str| -> PresetSummary {
        read_json(&dir.join(format!("reports/{p}.summary.json"))).unwrap()
    };
    let pre: PretrainSummary = read_json(&dir.join("reports/pretrain.json")).unwrap();
    let ppl: Vec<f64> = pre
        .training
        .perplexity
        .iter()
        .map(|p| p.perplexity)
        .collect();
    let v = pre.vocab_size as f64;
    let a = ppl.len() >= 3 && ppl[0] > ppl[1] && ppl[1] > ppl[2] && *ppl.last().unwrap() < 0.25 * v;
    let mut lines = vec![format!(
        "(a) PPL first evals {:.1} > {:.1} > {:.1}, final {:.2} vs 0.25|V| = {:.1}: {}",
        ppl[0],
        ppl[1],
        ppl[2],
        ppl.last().unwrap(),
        0.25 * v,
        a
    )];
    let mut b = true;
    let mut c = true;
    let mut d = true;
    for data in ["qp", "augmented"] {
        let t = summary(&format!("transformer-{data}"));
        let untrained = t.untrained_mrr.unwrap();
        let ok_b = t.mrr >= 2.0 * untrained && t.mrr >= 2.0 * t.random_mrr;
        b &= ok_b;
        lines.push(format!(
            "(b) transformer-{data} MRR {:.4} vs 2x untrained {:.4} and 2x random {:.4}: {ok_b}",
            t.mrr,
            2.0 * untrained,
            2.0 * t.random_mrr
        ));
        for layers in ["gru1", "gru2"] {
            let g = summary(&format!("{layers}-{data}"));
            let ok_c = g.mrr > g.random_mrr;
            let ok_d = t.mrr >= g.mrr && t.map >= g.map && t.ndcg >= g.ndcg;
            c &= ok_c;
            d &= ok_d;
            lines.push(format!(
                "(c/d) {layers}-{data} MRR/MAP/NDCG {:.4}/{:.4}/{:.4} vs transformer {:.4}/{:.4}/{:.4}: above random {ok_c}, transformer ahead {ok_d}",
                g.mrr, g.map, g.ndcg, t.mrr, t.map, t.ndcg
            ));
        }
    }
    let in_time = secs < 1800.0;
    lines.push(format!(
        "all six presets {secs:.0}s (limit 1800s): {in_time}"
    ));
    (
        verdict(a && b && c && d && in_time, lines.join("\n    ")),
        Some(pre),
    )
}

fn fill_mask_sanity(pre: Option<&PretrainSummary>) -> Verdict {
    let Some(pre) = pre else {
        return verdict(false, "pre-training did not run");
    };
    let f = &pre.fill_mask;
    verdict(
        f.queries == 50 && f.accuracy > 5.0 * f.chance_rate,
        format!(
            "{} held-out queries, top-{} accuracy {:.3} vs 5x chance {:.4} (|V| = {})",
            f.queries,
            f.top,
            f.accuracy,
            5.0 * f.chance_rate,
            pre.vocab_size
        ),
    )
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            out.insert(
                e.path().strip_prefix(dir).unwrap().to_path_buf(),
                std::fs::read(e.path()).unwrap(),
            );
        }
    }
    out
}

fn determinism(first: &Path, second: &Path) -> Verdict {
    for p in ["transformer-qp", "gru1-qp"] {
        if let Err(e) = pipeline(second, p) {
            return verdict(false, e);
        }
    }
    let again = files_under(&second.join("reports"));
    let before = files_under(&first.join("reports"));
    let differing: Vec<String> = again
        .iter()
        .filter(|(name, bytes)| before.get(*name) != Some(bytes))
        .map(|(name, _)| name.display().to_string())
        .collect();
    verdict(
        differing.is_empty() && !again.is_empty(),
        format!("transformer-qp and gru1-qp rerun in a fresh directory: {} report files compared, differing {:?}", again.len(), differing),
    )
}

#[test]
fn acceptance_criteria() {
    let work = tempfile::tempdir().unwrap();
    let first = work.path().join("run1");
    let second = work.path().join("run2");
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let v = f();
        say(&format!(
            "criterion {n} [{name}]: {} - {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        ));
        results.push((n, name, v));
    };
    run(2, "gradient correctness", &mut gradient_correctness);
    run(3, "GRU oracle equivalence", &mut gru_oracle);
    run(4, "metric oracle equivalence", &mut metric_oracles);
    run(5, "ANN fidelity", &mut ann_fidelity);
    run(6, "sampling-rule conformance", &mut sampling_rules);
    let mut pre = None;
    run(7, "end-to-end learning signal", &mut || {
        let (v, p) = learning_signal(&first);
        pre = p;
        v
    });
    run(8, "fill-mask sanity", &mut || {
        fill_mask_sanity(pre.as_ref())
    });
    run(9, "determinism", &mut || determinism(&first, &second));
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
