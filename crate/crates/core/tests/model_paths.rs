use topk_lab::attention::{AttentionTrace, DecodeMode, WindowPolicy};
use topk_lab::model::{
    generate, generate_with, prefill_with, sequence_logits, Checkpoint, GenerateOptions, ModelConfig,
    PrefillCapture, Session,
};
use topk_lab::numerics::{rmsnorm_into, RopeTable};
use topk_lab::selection::{exact_topk, indexer_scores, retrieval_precision, IndexerConfig, IndexerProjection};
use topk_lab::tasks::{gen_needle, TaskKind, TaskSpec};
use topk_lab::training::{forward_loss, TrainExample, TrainMode};

fn cfg(heads: usize) -> ModelConfig {
    ModelConfig {
        vocab: 40,
        layers: 2,
        heads,
        d_model: 16,
        d_ff: 32,
        max_positions: 96,
        ..Default::default()
    }
}

fn prompt(len: usize, seed: u32) -> Vec<u32> {
    (0..len as u32).map(|i| (i * 13 + seed * 7 + 3) % 40).collect()
}

#[test]
fn degenerate_indexer_scores_are_summed_logits() {
    let ck = Checkpoint::init(cfg(2), 3).unwrap();
    let c = ck.config;
    let ix_cfg = IndexerConfig::degenerate(c.heads, c.head_dim());
    let ix = ck.indexer_weights(&ix_cfg).unwrap();
    let toks = prompt(20, 1);
    let mut out = prefill_with(&ck, &toks, &PrefillCapture::None, Some(&ix)).unwrap();

    // layer 0 input for the next token is its normalized embedding
    let pos = toks.len();
    let tok = 17usize;
    let lp = &ck.params.layers[0];
    let mut xn = vec![0.0; c.d_model];
    rmsnorm_into(ck.params.embed.row(tok), lp.attn_norm.data(), c.norm_eps, &mut xn);
    let rope = RopeTable::new(c.head_dim(), c.rope_theta);
    let qkv = ck.attention_weights(0).project(&xn, pos, &rope);
    let layer = &mut out.cache.layers[0];
    layer.append(&qkv.k, &qkv.v);
    layer.index_keys.push(ix.index_key(0, &xn, pos).unwrap());

    let scale = 1.0 / (c.head_dim() as f64).sqrt();
    let mut summed = vec![0.0; pos + 1];
    for h in 0..c.heads {
        for (s, l) in summed.iter_mut().zip(layer.head(h).logits(&qkv.q[h], scale)) {
            *s += l;
        }
    }
    let scores = indexer_scores(&ix, 0, &xn, pos, &layer.index_keys).unwrap();
    for (a, b) in scores.iter().zip(&summed) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
    }
    for w in [1, 5, 12] {
        let a = exact_topk(&scores, w).unwrap();
        let b = exact_topk(&summed, w).unwrap();
        assert_eq!(retrieval_precision(&a, &b).unwrap(), 1.0);
    }
}

#[test]
fn single_head_degenerate_indexer_matches_every_head() {
    let ck = Checkpoint::init(cfg(1), 8).unwrap();
    let ix_cfg = IndexerConfig::degenerate(1, ck.config.head_dim());
    let mode = DecodeMode::Indexer {
        window: WindowPolicy::Ratio(0.25),
        config: ix_cfg,
    };
    let opts = GenerateOptions {
        capture_selection: true,
        ..Default::default()
    };
    let out = generate_with(&ck, &prompt(40, 2), 6, mode, 0, None, &opts).unwrap();
    let trace = out.selections.unwrap();
    assert_eq!(trace.records.len(), 6 * 2);
    for r in &trace.records {
        assert_eq!(retrieval_precision(&r.indexer, &r.per_head_exact[0]).unwrap(), 1.0);
        assert_eq!(retrieval_precision(&r.indexer, &r.pooled_exact).unwrap(), 1.0);
        assert_eq!(retrieval_precision(&r.indexer, &r.summed_exact).unwrap(), 1.0);
    }
}

#[test]
fn multi_head_degenerate_indexer_reproduces_summed_logit_sets() {
    let ck = Checkpoint::init(cfg(4), 9).unwrap();
    let mode = DecodeMode::Indexer {
        window: WindowPolicy::Ratio(0.2),
        config: IndexerConfig::degenerate(4, ck.config.head_dim()),
    };
    let opts = GenerateOptions {
        capture_selection: true,
        ..Default::default()
    };
    let out = generate_with(&ck, &prompt(50, 3), 5, mode, 0, None, &opts).unwrap();
    for r in &out.selections.unwrap().records {
        assert_eq!(retrieval_precision(&r.indexer, &r.summed_exact).unwrap(), 1.0);
    }
}

#[test]
fn random_indexer_shares_one_selection_per_layer() {
    let ck = Checkpoint::init(cfg(2), 4).unwrap();
    let mode = DecodeMode::Indexer {
        window: WindowPolicy::Fixed(6),
        config: IndexerConfig {
            heads: 1,
            dim: 2,
            quantized: true,
            projection: IndexerProjection::Random { seed: 5 },
        },
    };
    let opts = GenerateOptions {
        capture_attention: true,
        ..Default::default()
    };
    let out = generate_with(&ck, &prompt(30, 4), 3, mode, 0, None, &opts).unwrap();
    let trace = out.trace.unwrap();
    for step in 0..3 {
        for l in 0..2 {
            let a = trace.row(l, 0, topk_lab::attention::Phase::Decode, step).unwrap();
            let b = trace.row(l, 1, topk_lab::attention::Phase::Decode, step).unwrap();
            assert_eq!(a.indices, b.indices);
            assert_eq!(a.indices.len(), 6);
        }
    }
}

#[test]
fn incremental_decoding_matches_batch_training_forward() {
    let ck = Checkpoint::init(cfg(2), 11).unwrap();
    let toks = prompt(24, 3);
    let logits = sequence_logits(&ck, &toks).unwrap();
    // cross-entropy of the incremental path equals the training forward loss
    let inputs = toks[..23].to_vec();
    let targets = toks[1..].to_vec();
    let mut ce = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row = &logits[t];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        ce += lse - row[y as usize];
    }
    ce /= targets.len() as f64;
    let ex = TrainExample {
        inputs,
        targets,
        loss_mask: vec![true; 23],
    };
    let loss = forward_loss(&ck, &[ex], TrainMode::Full).unwrap().loss;
    assert!((loss - ce).abs() < 1e-10, "{loss} vs {ce}");
}

#[test]
fn prefill_plus_decode_equals_token_by_token() {
    let ck = Checkpoint::init(cfg(2), 12).unwrap();
    let toks = prompt(18, 5);
    let seq = sequence_logits(&ck, &toks).unwrap();
    let mut s = Session::new(&ck, DecodeMode::Full, 0, None).unwrap();
    s.prefill(&toks[..17], &PrefillCapture::None).unwrap();
    let last = s.step(toks[17]).unwrap();
    for (a, b) in last.iter().zip(&seq[17]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn topk_ratio_one_is_bit_identical_to_full() {
    let ck = Checkpoint::init(cfg(2), 13).unwrap();
    let p = prompt(30, 6);
    let a = generate(&ck, &p, 8, DecodeMode::Full, false, 0).unwrap();
    let b = generate(&ck, &p, 8, DecodeMode::topk_ratio(1.0), false, 0).unwrap();
    assert_eq!(a.tokens, b.tokens);
}

#[test]
fn topk_window_is_honoured_per_head_per_step() {
    let ck = Checkpoint::init(cfg(2), 14).unwrap();
    let p = prompt(41, 7);
    let out = generate(&ck, &p, 5, DecodeMode::topk_ratio(0.1), false, 0).unwrap();
    for (s, layers) in out.windows.iter().enumerate() {
        let n = p.len() + s;
        let want = WindowPolicy::Ratio(0.1).window(n);
        assert!(layers.iter().flatten().all(|&w| w == want));
    }
}

#[test]
fn captured_trace_roundtrips_through_binary_format() {
    let ck = Checkpoint::init(cfg(2), 15).unwrap();
    let inst = gen_needle(32, 40, 1).unwrap();
    let out = generate(&ck, &inst.prompt, 3, DecodeMode::topk_ratio(0.25), true, 0).unwrap();
    let trace = out.trace.unwrap();
    assert_eq!(trace.steps(topk_lab::attention::Phase::Prefill).len(), 10);
    let bytes = trace.to_bytes();
    let back = AttentionTrace::read_from(&bytes[..]).unwrap();
    assert_eq!(back, trace);
}

#[test]
fn checkpoint_save_load_preserves_generation() {
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::init(cfg(2), 16).unwrap();
    ck.save(dir.path().join("m")).unwrap();
    let back = Checkpoint::load(dir.path().join("m")).unwrap();
    assert_eq!(back.fingerprint(), ck.fingerprint());
    let specs = TaskSpec {
        task: TaskKind::AssocRecall,
        count: 3,
        context_len: 32,
        seed: 2,
        pairs: 3,
    };
    for inst in specs.generate(40).unwrap() {
        let a = generate(&ck, &inst.prompt, 1, DecodeMode::Full, false, 0).unwrap();
        let b = generate(&back, &inst.prompt, 1, DecodeMode::Full, false, 0).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }
}
