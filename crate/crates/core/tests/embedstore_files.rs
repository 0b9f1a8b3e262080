use prefcap_core::embedstore::{
    join_pairs, read_captions, read_embeddings, write_captions, write_embeddings, CaptionRecord, CaptionSource,
    EmbeddingFile, EmbeddingRecord, Modality, StoreError,
};
use prefcap_core::synthworld::{generate_world, WorldSpec};
use prefcap_core::Embedding;
use proptest::prelude::*;

fn audio_file(world: &prefcap_core::synthworld::World) -> EmbeddingFile {
    EmbeddingFile::new(
        Modality::Audio,
        world
            .samples
            .iter()
            .map(|s| EmbeddingRecord { id: s.sample_id.clone(), embedding: s.audio_embedding.clone() })
            .collect(),
    )
}

#[test]
fn files_roundtrip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate_world(&WorldSpec::default(), 3).unwrap();
    let file = audio_file(&w);
    let path = dir.path().join("nested/audio.paeb");
    assert_eq!(write_embeddings(&path, &file).unwrap(), 3);
    let first = std::fs::read(&path).unwrap();
    let back = read_embeddings(&path).unwrap();
    assert_eq!(back, file);
    write_embeddings(&path, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    let caps: Vec<CaptionRecord> = w
        .samples
        .iter()
        .map(|s| CaptionRecord::from_tokens(&s.sample_id, &s.reference, &w.vocab, CaptionSource::Reference))
        .collect();
    let cpath = dir.path().join("caps.jsonl");
    write_captions(&cpath, &caps).unwrap();
    assert_eq!(read_captions(&cpath, Some(&w.vocab)).unwrap(), caps);
}

#[test]
fn caption_token_ids_must_match_text() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate_world(&WorldSpec::default(), 1).unwrap();
    let mut rec = CaptionRecord::from_tokens("s0", &w.samples[0].reference, &w.vocab, CaptionSource::Greedy);
    rec.caption_text.push_str(" again");
    let path = dir.path().join("bad.jsonl");
    write_captions(&path, &[rec]).unwrap();
    assert!(matches!(read_captions(&path, Some(&w.vocab)), Err(StoreError::InvalidCaption { line: 1, .. })));
    std::fs::write(&path, "{\"sample_id\":\"\",\"caption_text\":\"x\",\"source\":\"human\"}\n").unwrap();
    assert!(matches!(read_captions(&path, None), Err(StoreError::InvalidCaption { .. })));
}

#[test]
fn join_orders_by_sample_then_source() {
    let w = generate_world(&WorldSpec::default(), 2).unwrap();
    let enc = w.text_encoder();
    let audio = audio_file(&w);
    let mk =
        |i: usize, src| CaptionRecord::from_tokens(&w.samples[i].sample_id, &w.samples[i].reference, &w.vocab, src);
    let captions = vec![
        mk(1, CaptionSource::Topk),
        mk(0, CaptionSource::Greedy),
        mk(1, CaptionSource::Reference),
        mk(0, CaptionSource::Reference),
    ];
    let joined = join_pairs(&audio, &captions, None, &enc).unwrap();
    let keys: Vec<(&str, CaptionSource)> = joined.iter().map(|j| (j.sample_id.as_str(), j.source)).collect();
    assert_eq!(
        keys,
        vec![
            ("s00000", CaptionSource::Reference),
            ("s00000", CaptionSource::Greedy),
            ("s00001", CaptionSource::Reference),
            ("s00001", CaptionSource::Topk),
        ]
    );
    assert_eq!(joined[0].audio, w.samples[0].audio_embedding);
    assert_eq!(joined[0].text, enc.encode_tokens(&w.samples[0].reference).unwrap());
}

#[test]
fn join_prefers_cached_text_embeddings() {
    let w = generate_world(&WorldSpec::default(), 1).unwrap();
    let enc = w.text_encoder();
    let audio = audio_file(&w);
    let cap = CaptionRecord::from_tokens("s00000", &w.samples[0].reference, &w.vocab, CaptionSource::Human);
    let cached = Embedding::new(vec![0.5; 512]);
    let cache = EmbeddingFile::new(
        Modality::Text,
        vec![EmbeddingRecord { id: cap.caption_text.clone(), embedding: cached.clone() }],
    );
    let joined = join_pairs(&audio, &[cap], Some(&cache), &enc).unwrap();
    assert_eq!(joined[0].text, cached);
}

#[test]
fn join_lists_missing_audio_ids() {
    let w = generate_world(&WorldSpec::default(), 1).unwrap();
    let audio = audio_file(&w);
    let cap = |id: &str| CaptionRecord {
        sample_id: id.into(),
        caption_text: "we hear".into(),
        token_ids: None,
        source: CaptionSource::Human,
    };
    match join_pairs(&audio, &[cap("zz"), cap("s00000"), cap("yy"), cap("zz")], None, &w.text_encoder()) {
        Err(StoreError::MissingAudio(ids)) => assert_eq!(ids, vec!["yy".to_string(), "zz".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn synthetic_world_export_joins_without_misses() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate_world(&WorldSpec::default(), 200).unwrap();
    let apath = dir.path().join("audio.paeb");
    write_embeddings(&apath, &audio_file(&w)).unwrap();
    let caps: Vec<CaptionRecord> = w
        .samples
        .iter()
        .map(|s| CaptionRecord::from_tokens(&s.sample_id, &s.reference, &w.vocab, CaptionSource::Reference))
        .collect();
    let cpath = dir.path().join("refs.jsonl");
    write_captions(&cpath, &caps).unwrap();
    let joined = join_pairs(
        &read_embeddings(&apath).unwrap(),
        &read_captions(&cpath, Some(&w.vocab)).unwrap(),
        None,
        &w.text_encoder(),
    )
    .unwrap();
    assert_eq!(joined.len(), 200);
    for (j, s) in joined.iter().zip(&w.samples) {
        assert_eq!(j.audio, s.audio_embedding);
    }
}

proptest! {
    #[test]
    fn arbitrary_records_roundtrip_bit_exact(
        vals in prop::collection::vec(prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 6), 0..8),
    ) {
        let records: Vec<EmbeddingRecord> = vals
            .into_iter()
            .enumerate()
            .map(|(i, v)| EmbeddingRecord { id: format!("id-{i}"), embedding: Embedding::new(v) })
            .collect();
        let file = EmbeddingFile { modality: Modality::Text, dim: 6, records };
        let bytes = prefcap_core::embedstore::encode_embeddings(&file).unwrap();
        let back = prefcap_core::embedstore::decode_embeddings(&bytes).unwrap();
        for (a, b) in back.records.iter().zip(&file.records) {
            let bits = |e: &Embedding| e.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.embedding), bits(&b.embedding));
        }
        prop_assert_eq!(back.records.len(), file.records.len());
    }
}
