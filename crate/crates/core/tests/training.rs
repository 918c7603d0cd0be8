use neural_search::encoders::{
    BiGruEncoder, Encoder, GruConfig, Pooling, TransformerConfig, TransformerEncoder,
};
use neural_search::rng::rng;
use neural_search::tensor::{Graph, ParamStore, Parameterized, Tensor};
use neural_search::tokenizer::{train_bpe, MASK};
use neural_search::training::{
    finetune, pretrain_mlm, pseudo_perplexity, train_gru, triplet_loss, EncodedTriplet,
    EncodedTriplets, FinetuneConfig, GruTrainConfig, Optimizer, OptimizerConfig, PretrainConfig,
    RunLog, RunRecord,
};
use neural_search::Error;
use proptest::prelude::*;
use rand::Rng as _;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplet_loss_is_a_hinge(
        vals in prop::collection::vec(-2.0f64..2.0, 27),
        margin in 0.0f64..1.0,
    ) {
        let g = Graph::<f64>::new();
        let leaf = |r: std::ops::Range<usize>| g.leaf(&Tensor::new(vec![3, 3], vals[r].to_vec()).unwrap().with_requires_grad(true));
        let (a, p, n) = (leaf(0..9), leaf(9..18), leaf(18..27));
        let loss = triplet_loss(&a, &p, &n, margin);
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 { 0.0 } else { dot / (nx * ny) }
        };
        let mut expected = 0.0;
        let mut active = [false; 3];
        for i in 0..3 {
            let row = |o: usize| &vals[o + 3 * i..o + 3 * i + 3];
            let h = (1.0 - cos(row(0), row(9))) - (1.0 - cos(row(0), row(18))) + margin;
            active[i] = h > 0.0;
            expected += h.max(0.0);
        }
        let value = loss.item();
        prop_assert!(value >= 0.0);
        prop_assert!((value - expected).abs() < 1e-9);
        g.backward(loss).unwrap();
        let grad_n = g.grad(n).unwrap();
        for (i, &on) in active.iter().enumerate() {
            if !on {
                prop_assert!(grad_n.data()[3 * i..3 * i + 3].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn optimizer_steps_keep_shapes_and_finiteness(
        seed in any::<u64>(),
        adamw in any::<bool>(),
        lr in 0.0f64..1.0,
    ) {
        let mut r = rng(seed);
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r));
        let b = store.add("b", Tensor::uniform(&[1, 4], -1.0, 1.0, &mut r));
        let cfg = if adamw { OptimizerConfig::adamw(0.01) } else { OptimizerConfig::adam() };
        let mut opt = Optimizer::new(cfg, &store).unwrap();
        for _ in 0..5 {
            let grads = vec![
                (a, (0..12).map(|_| r.random_range(-1e3f32..1e3)).collect()),
                (b, (0..4).map(|_| r.random_range(-1e-6f32..1e-6)).collect()),
            ];
            opt.step(&mut store, &grads, lr);
        }
        prop_assert_eq!(store.get(a).shape(), &[3, 4]);
        prop_assert_eq!(store.get(b).shape(), &[1, 4]);
        prop_assert!(store.all_finite());
    }
}

fn gru() -> BiGruEncoder<f32> {
    BiGruEncoder::new(
        GruConfig {
            vocab_size: 20,
            embed_dim: 8,
            hidden: 8,
            layers: 1,
            output_dim: 8,
            max_len: 8,
            init_scale: 0.1,
        },
        7,
    )
    .unwrap()
}

/// Anchors and positives share a token family (5..10 or 10..15), negatives
/// come from the other family.
fn separable(n: usize, seed: u64) -> Vec<EncodedTriplet> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let fam = r.random_range(0..2u32);
            let draw = |r: &mut neural_search::rng::Rng, f: u32| {
                (0..3)
                    .map(|_| 5 + 5 * f + r.random_range(0..5))
                    .collect::<Vec<u32>>()
            };
            EncodedTriplet {
                anchor: draw(&mut r, fam),
                positive: draw(&mut r, fam),
                negative: draw(&mut r, 1 - fam),
            }
        })
        .collect()
}

#[test]
fn gru_training_descends_and_is_deterministic() {
    let data = separable(200, 1);
    let cfg = GruTrainConfig {
        epochs: 5,
        batch_size: 16,
        lr: 1e-2,
        margin: 0.5,
        seed: 3,
    };
    let mut a = gru();
    let ra = train_gru(&mut a, &data, &cfg, &mut RunLog::in_memory()).unwrap();
    assert!(
        ra.epoch_losses.last().unwrap() < ra.epoch_losses.first().unwrap(),
        "{:?}",
        ra.epoch_losses
    );
    let mut b = gru();
    let rb = train_gru(&mut b, &data, &cfg, &mut RunLog::in_memory()).unwrap();
    assert_eq!(ra, rb);
    assert!(a.params().same_values(b.params()));
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let data = separable(40, 2);
    let mut enc = gru();
    let before = enc.params().clone();
    let cfg = GruTrainConfig {
        epochs: 3,
        batch_size: 8,
        lr: 0.0,
        margin: 0.5,
        seed: 1,
    };
    train_gru(&mut enc, &data, &cfg, &mut RunLog::in_memory()).unwrap();
    assert!(enc.params().same_values(&before));
}

#[test]
fn empty_triplet_set_is_rejected() {
    let mut enc = gru();
    assert!(matches!(
        train_gru(
            &mut enc,
            &[],
            &GruTrainConfig::default(),
            &mut RunLog::in_memory()
        ),
        Err(Error::Config(_))
    ));
}

fn small_transformer(vocab: usize) -> TransformerConfig {
    TransformerConfig {
        vocab_size: vocab,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        max_len: 8,
        output_dim: 8,
        pooling: Pooling::Mean,
        dropout: 0.0,
        init_std: 0.02,
        ln_eps: 1e-5,
    }
}

#[test]
fn fresh_model_perplexity_is_near_vocabulary_size() {
    let enc = TransformerEncoder::<f32>::new(small_transformer(50), 1).unwrap();
    let seqs: Vec<Vec<u32>> = (0..10)
        .map(|i| (0..5).map(|j| 5 + (i * 7 + j * 3) % 45).collect())
        .collect();
    let ppl = pseudo_perplexity(&enc, &seqs, 16).unwrap().perplexity;
    assert!(ppl > 25.0 && ppl < 100.0, "{ppl}");
    assert!(pseudo_perplexity(&enc, &[], 16).is_err());
}

#[test]
fn zero_mask_rate_has_no_objective() {
    let mut enc = TransformerEncoder::<f32>::new(small_transformer(10), 1).unwrap();
    let cfg = PretrainConfig {
        mask_rate: 0.0,
        ..PretrainConfig::default()
    };
    let r = pretrain_mlm(&mut enc, &[vec![5, 6]], &[], &cfg, &mut RunLog::in_memory());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn two_token_corpus_is_learned_exactly() {
    let vocab = train_bpe(["nike men"; 4], 40, 0).unwrap();
    let ids = vocab.encode("nike men");
    assert_eq!(ids.len(), 2, "{ids:?}");
    let mut enc = TransformerEncoder::<f32>::new(small_transformer(vocab.len()), 2).unwrap();
    let corpus = vec![ids.clone(); 64];
    let cfg = PretrainConfig {
        epochs: 8,
        batch_size: 8,
        lr_max: 1e-2,
        eval_every: 0,
        seed: 4,
        ..PretrainConfig::default()
    };
    let report = pretrain_mlm(
        &mut enc,
        &corpus,
        std::slice::from_ref(&ids),
        &cfg,
        &mut RunLog::in_memory(),
    )
    .unwrap();
    let first = report.perplexity.first().unwrap().perplexity;
    let last = report.perplexity.last().unwrap().perplexity;
    assert!(last < first && last < 1.1, "{:?}", report.perplexity);

    for pos in 0..2 {
        let mut masked = ids.clone();
        masked[pos] = MASK;
        let batch = enc.prepare(&[masked]).unwrap();
        let g = Graph::inference();
        let logits = enc.mlm_logits(&g, &batch, &[pos + 1]).to_vec();
        let best = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
            .unwrap();
        assert_eq!(best as u32, ids[pos]);
    }
    let top = neural_search::encoders::fill_mask(&enc, &vocab, "nike <mask>", 1).unwrap();
    assert_eq!(top[0].0.trim(), "men");
}

fn encoded(items: Vec<EncodedTriplet>, hash: &str) -> EncodedTriplets {
    EncodedTriplets {
        tokenizer_hash: hash.into(),
        items,
    }
}

#[test]
fn finetune_descends_and_logs_the_schedule() {
    let data = encoded(separable(96, 5), "tok");
    let mut enc = TransformerEncoder::<f32>::new(small_transformer(20), 3).unwrap();
    let initial = mean_loss(&enc, &data.items);
    let cfg = FinetuneConfig {
        epochs: 3,
        lr_max: 5e-3,
        seed: 2,
        ..FinetuneConfig::default()
    };
    let mut log = RunLog::in_memory();
    let (_, schedule) = finetune(&mut enc, "tok", &data, &cfg, &mut log).unwrap();
    assert!(mean_loss(&enc, &data.items) < initial);
    assert_eq!(log.records().len(), 36);
    for RunRecord { step, lr, .. } in log.records() {
        assert_eq!(*lr, schedule.lr(*step));
    }
}

fn mean_loss(enc: &TransformerEncoder<f32>, items: &[EncodedTriplet]) -> f64 {
    let g = Graph::inference();
    let side = |f: fn(&EncodedTriplet) -> &Vec<u32>| {
        enc.encode_batch(&g, &items.iter().map(|t| f(t).clone()).collect::<Vec<_>>())
            .unwrap()
    };
    let loss = triplet_loss(
        &side(|t| &t.anchor),
        &side(|t| &t.positive),
        &side(|t| &t.negative),
        0.5,
    );
    f64::from(loss.item()) / items.len() as f64
}

#[test]
fn finetune_guards() {
    let data = encoded(separable(16, 5), "tok");
    let mut enc = TransformerEncoder::<f32>::new(small_transformer(20), 3).unwrap();
    let before = enc.params().clone();
    let frozen = FinetuneConfig {
        lr_max: 0.0,
        weight_decay: 0.0,
        ..FinetuneConfig::default()
    };
    finetune(&mut enc, "tok", &data, &frozen, &mut RunLog::in_memory()).unwrap();
    assert!(enc.params().same_values(&before));
    assert!(matches!(
        finetune(
            &mut enc,
            "other",
            &data,
            &FinetuneConfig::default(),
            &mut RunLog::in_memory()
        ),
        Err(Error::Mismatch(_))
    ));
    let stub = FinetuneConfig {
        layer_lr_decay: Some(0.9),
        ..FinetuneConfig::default()
    };
    assert!(finetune(&mut enc, "tok", &data, &stub, &mut RunLog::in_memory()).is_err());
}

#[test]
fn run_log_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let mut log = RunLog::to_file(&path).unwrap();
    let mut enc = gru();
    let cfg = GruTrainConfig {
        epochs: 1,
        batch_size: 10,
        lr: 1e-3,
        margin: 0.5,
        seed: 1,
    };
    train_gru(&mut enc, &separable(30, 1), &cfg, &mut log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let recs: Vec<RunRecord> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(recs.len(), 3);
    assert_eq!(
        recs.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![0, 1, 2]
    );
}
