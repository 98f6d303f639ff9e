use proptest::prelude::*;

use super::*;
use crate::adapter::{compose, init_adapter, LowRankAdapter};
use crate::model::TransformerModel;
use crate::rng::Rng;

fn dims(h: u64, l: u64, heads: u64, f: u64, v: u64) -> ModelDims {
    ModelDims { hidden: h, layers: l, heads, d_ff: f, vocab: v }
}

fn profile(docs: Vec<u64>) -> WorkloadProfile {
    WorkloadProfile {
        name: "p".into(),
        query_tokens: 20,
        history_tokens: 10,
        example_tokens: vec![0; docs.len()],
        doc_tokens: docs,
        model: dims(64, 2, 2, 128, 128),
        adapters: 3,
        rank: 16,
        sites: 2,
        encoder: None,
    }
}

fn model(h: usize, l: usize, heads: usize, f: usize, v: usize, seed: u64) -> TransformerModel {
    TransformerModel::new(ModelConfig { vocab_size: v, hidden: h, layers: l, heads, d_ff: f, max_seq_len: 8, seed }).unwrap()
}

fn random_adapter(tool: u32, cfg: &ModelConfig, rank: usize, rng: &mut Rng) -> LowRankAdapter {
    let ac = AdapterConfig { rank, scale: 2.0 * rank as f64, ..AdapterConfig::default() };
    let mut a = init_adapter(tool, ac, cfg, rng).unwrap();
    for t in a.tensors_mut() {
        let fresh = rng.normal_vec(t.numel(), 0.3);
        t.data_mut().copy_from_slice(&fresh);
    }
    a
}

#[test]
fn single_token_attention_term() {
    let d = dims(8, 3, 2, 16, 10);
    assert_eq!(flops_transformer(1, &d).1, 4 * 3 * 8);
}

#[test]
fn doubling_length_more_than_doubles() {
    let d = dims(8, 2, 2, 16, 10);
    for s in 1..50 {
        let (l1, a1) = flops_transformer(s, &d);
        let (l2, a2) = flops_transformer(2 * s, &d);
        assert!(l2 + a2 > 2 * (l1 + a1));
    }
}

#[test]
fn formula_matches_counted_forward_on_smallest_config() {
    let m = model(2, 1, 1, 4, 4, 0);
    let (_, counts) = reference_forward(&m, &[1, 3], None).unwrap();
    let (lin, att) = flops_transformer(2, &dims(2, 1, 1, 4, 4));
    assert_eq!(2 * counts.linear_macs, lin);
    assert_eq!(2 * counts.attention_macs, att);
}

#[test]
fn reference_forward_agrees_with_model() {
    let m = model(8, 2, 2, 12, 16, 4);
    let cfg = *m.config();
    let mut rng = Rng::new(1);
    let (a, b) = (random_adapter(0, &cfg, 3, &mut rng), random_adapter(1, &cfg, 3, &mut rng));
    let delta = compose(&[&a, &b], &[0.25, 0.75]).unwrap();
    let ids = [1, 5, 2, 9, 3];
    let (ours, _) = reference_forward(&m, &ids, Some(&delta)).unwrap();
    let theirs = m.logits(&ids, Some(&delta)).unwrap();
    assert!(ours.max_abs_diff(&theirs) < 1e-10);
}

#[test]
fn adapter_formula_matches_counted_branches() {
    let m = model(8, 2, 2, 12, 16, 4);
    let cfg = *m.config();
    let mut rng = Rng::new(2);
    let adapters: Vec<LowRankAdapter> = (0..3).map(|t| random_adapter(t, &cfg, 4, &mut rng)).collect();
    let refs: Vec<&LowRankAdapter> = adapters.iter().collect();
    let delta = compose(&refs, &[0.2, 0.5, 0.3]).unwrap();
    let (_, counts) = reference_forward(&m, &[1, 2, 3, 4], Some(&delta)).unwrap();
    assert_eq!(2 * counts.adapter_macs, flops_adapters(4, &ModelDims::from(&cfg), 3, 4, 2));
}

proptest! {
    #[test]
    fn formula_equals_counted_macs(
        s in 1usize..=8,
        head_dim in 1usize..=3,
        heads in 1usize..=2,
        layers in 1usize..=2,
        f in 1usize..=6,
        v in 2usize..=7,
        seed in 0u64..100,
    ) {
        let h = head_dim * heads;
        let m = model(h, layers, heads, f, v, seed);
        let ids: Vec<usize> = (0..s).map(|i| (i * 5 + seed as usize) % v).collect();
        let (_, counts) = reference_forward(&m, &ids, None).unwrap();
        let d = ModelDims::from(m.config());
        let (lin, att) = flops_transformer(s as u64, &d);
        prop_assert_eq!(2 * counts.linear_macs, lin);
        prop_assert_eq!(2 * counts.attention_macs, att);
        prop_assert_eq!(counts.nonmatmul(), nonmatmul_ops(s as u64, &d));
    }
}

#[test]
fn zero_docs_match_parameter_base() {
    let p = profile(vec![0, 0, 0]);
    let ctx = flops_context(&p);
    let par = flops_parameter(&p);
    assert_eq!(ctx.total, par.base());
    assert_eq!(ctx.overhead(), 0);
}

#[test]
fn no_adapters_is_base() {
    let p = WorkloadProfile { adapters: 0, ..profile(vec![5]) };
    let par = flops_parameter(&p);
    assert_eq!(par.total, par.base());
}

#[test]
fn ratio_grows_with_documents() {
    let ratios: Vec<f64> = (0..20).map(|k| flops_row(&profile(vec![k * 10, 7])).unwrap().ratio).collect();
    assert!(ratios.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn components_sum_to_total() {
    let mut p = profile(vec![40, 50]);
    p.encoder = Some(EncoderCost { dims: p.model.headless(), gate_hidden: 128, gate_depth: 3, candidates: 3 });
    let r = flops_row(&p).unwrap();
    for c in [r.context, r.parameter] {
        assert_eq!(c.linear + c.attention + c.adapter + c.encoder + c.gate, c.total);
    }
    assert!(r.context.total >= r.parameter.base());
    assert!((0.0..=1.0).contains(&r.overhead_fraction));
}

#[test]
fn gate_cost_counts_each_layer() {
    // 4·8 → 5 → 5 → 1 per candidate.
    assert_eq!(flops_gate(8, 5, 3, 2), 2 * 2 * (32 * 5 + 5 * 5 + 5));
    assert_eq!(flops_gate(8, 5, 1, 1), 2 * 32);
}

#[test]
fn table_sorted_and_ratio_one_without_docs() {
    let mut b = WorkloadProfile { adapters: 0, ..profile(vec![0]) };
    b.name = "b".into();
    let mut a = profile(vec![300]);
    a.name = "a".into();
    let t = flops_table(&[b, a]).unwrap();
    assert_eq!(t.rows[0].name, "a");
    assert_eq!(t.rows[1].ratio, 1.0);
    assert!(flops_table(&[]).is_err());
    assert_eq!(t.to_table().lines().count(), 3);
}

#[test]
fn tflops_formatting() {
    assert_eq!(tflops(904_090_000_000_000), "904.09");
    let row = FlopsRow {
        name: "i1-cat".into(),
        s_ctx: 0,
        s_par: 0,
        context: CostBreakdown { total: 904_090_000_000_000, ..Default::default() },
        parameter: CostBreakdown { linear: 42_450_000_000_000, adapter: 1_660_000_000_000, ..Default::default() },
        ratio: 0.0,
        overhead_fraction: 0.0,
    };
    let table = FlopsReport { rows: vec![row] }.to_table();
    assert!(table.contains("904.09\t42.45 (+1.66)"), "{table}");
}

#[test]
fn heavy_context_gives_tenfold_ratio() {
    let mut p = profile(vec![]);
    p.doc_tokens = vec![9 * p.s_par() / 2; 2];
    p.example_tokens = vec![0; 2];
    let r = flops_row(&p).unwrap();
    assert!(r.ratio >= 10.0, "{}", r.ratio);
}

#[test]
fn llama_scale_overhead_below_five_percent() {
    let p = llama_profile("llama", 512, 9 * 512);
    assert!(p.adapters * p.model.layers * p.rank <= p.model.hidden);
    let r = flops_row(&p).unwrap();
    assert!(r.overhead_fraction < 0.05, "{}", r.overhead_fraction);
    assert!(r.ratio >= 10.0);
}

#[test]
fn profiles_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profiles.json");
    let ps = vec![profile(vec![3, 4]), llama_profile("l", 100, 900)];
    save_profiles(&path, &ps).unwrap();
    assert_eq!(load_profiles(&path).unwrap(), ps);
    std::fs::write(&path, "{").unwrap();
    assert!(load_profiles(&path).is_err());
}
