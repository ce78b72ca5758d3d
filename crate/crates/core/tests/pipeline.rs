use proptest::prelude::*;

use subvocab::bench::{prepare_workload, validate_outcome, BenchConfig, QueryGenerator, QueryModel};
use subvocab::certify::CertKind;
use subvocab::cluster::{build_index, validate_index, BuildParams, ClusterIndex, ClusterMode};
use subvocab::decode::{DecodeConfig, Decoder};
use subvocab::oracle::dense_logits;
use subvocab::tensor_io::{synth_mixture, EmbeddingTable, QueryBatch};

fn default_workload() -> (EmbeddingTable, ClusterIndex) {
    prepare_workload(&BenchConfig::default()).unwrap()
}

#[test]
fn decoder_agrees_with_oracle_on_default_workload() {
    let (table, index) = default_workload();
    let decoder = Decoder::new(&table, &index).unwrap();
    let cfg = DecodeConfig::default();
    for model in [QueryModel::default(), QueryModel::Random { scale: 16.0 }] {
        let gen = QueryGenerator::new(model, &index, 5);
        for s in 0..300 {
            let h = gen.query(s);
            let out = decoder.decode_step(&h, &cfg).unwrap();
            validate_outcome(&table, &h, &out, cfg.k).unwrap_or_else(|e| panic!("step {s}: {e}"));
        }
    }
}

#[test]
fn batchselect_contains_directly_certified_incremental_sets() {
    let (table, index) = default_workload();
    let decoder = Decoder::new(&table, &index).unwrap();
    let cfg = DecodeConfig::default();
    let gen = QueryGenerator::new(QueryModel::default(), &index, 9);
    let mut compared = 0;
    for s in 0..200 {
        let h = gen.query(s);
        let inc = decoder.decode_step(&h, &cfg).unwrap();
        let batch = decoder.decode_step_batchselect(&h, &cfg).unwrap();
        validate_outcome(&table, &h, &batch, cfg.k).unwrap();
        if inc.fallback.is_none() && batch.fallback.is_none() {
            compared += 1;
            assert!(batch.tokens.len() >= inc.tokens.len(), "step {s}");
            assert!(inc.tokens.iter().all(|t| batch.tokens.contains(t)));
        }
    }
    assert!(compared > 100, "{compared}");
}

#[test]
fn artifacts_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_mixture(400, 12, 8, 0.5, 2).unwrap();
    for mode in [ClusterMode::Euclidean, ClusterMode::Spherical, ClusterMode::BiasAugmented] {
        let index = build_index(&m.table, &BuildParams::new(9, mode).with_seed(4)).unwrap();
        let path = dir.path().join(format!("{mode:?}.csvi"));
        index.save(&path).unwrap();
        let back = ClusterIndex::load(&path).unwrap();
        assert_eq!(back, index);
        assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
        assert!(validate_index(&back, &m.table).unwrap().is_clean());
    }
    let tp = dir.path().join("t.csvd");
    m.table.save(&tp).unwrap();
    let back = EmbeddingTable::load(&tp).unwrap();
    assert_eq!(back.fingerprint(), m.table.fingerprint());
    assert_eq!(back.to_bytes(), std::fs::read(&tp).unwrap());

    let batch = QueryBatch::from_vectors(12, &[vec![0.5; 12], vec![-1.0; 12]]).unwrap();
    let qp = dir.path().join("q.csvh");
    batch.save(&qp).unwrap();
    assert_eq!(QueryBatch::load(&qp).unwrap().to_bytes(), batch.to_bytes());
}

#[test]
fn index_from_other_table_is_rejected() {
    let a = synth_mixture(200, 8, 4, 0.5, 1).unwrap().table;
    let b = synth_mixture(200, 8, 4, 0.5, 2).unwrap().table;
    let index = build_index(&a, &BuildParams::new(5, ClusterMode::Euclidean)).unwrap();
    assert!(Decoder::new(&b, &index).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn certified_topk_matches_oracle(
        seed in 0u64..1000,
        clusters in 1usize..20,
        k in 1usize..8,
        scale in 0.5f64..30.0,
        mode in prop_oneof![Just(ClusterMode::Euclidean), Just(ClusterMode::Spherical), Just(ClusterMode::BiasAugmented)],
    ) {
        let table = synth_mixture(300, 10, 6, 0.6, seed).unwrap().table;
        let index = build_index(&table, &BuildParams::new(clusters, mode).with_seed(seed)).unwrap();
        let decoder = Decoder::new(&table, &index).unwrap();
        let cfg = DecodeConfig { k, ..DecodeConfig::default() };
        let gen = QueryGenerator::new(QueryModel::Random { scale }, &index, seed);
        for s in 0..8 {
            let h = gen.query(s);
            let out = decoder.decode_step(&h, &cfg).unwrap();
            if out.status.kind == CertKind::TopkExact {
                let mut got = out.topk(k);
                got.sort_unstable();
                let mut want = dense_logits(&table, &h).unwrap().topk(k).to_vec();
                want.sort_unstable();
                prop_assert_eq!(got, want);
            }
            prop_assert!(validate_outcome(&table, &h, &out, k).is_ok());
        }
    }
}
