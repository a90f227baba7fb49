use agentcache::agent_cache::AgentCache;
use agentcache::error::CacheError;
use agentcache::model_spec::{AttentionKind, ModelCacheSpec, RawSpec};
use agentcache::persistence::{inspect, load_agent, locate, save_agent};
use agentcache::quant_codec::q4_bytes;
use agentcache::synthetic::agent_kv;
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = ModelCacheSpec> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..4, prop::sample::select(vec![8usize, 16]), 1usize..5).prop_map(
        |(layers, heads, kg, vg, group, block_groups)| {
            RawSpec {
                layer_kinds: (0..layers)
                    .map(|l| if l % 2 == 0 { AttentionKind::Global } else { AttentionKind::SlidingWindow { window: 5 } })
                    .collect(),
                group_size: group,
                block_tokens: group * block_groups,
                ..RawSpec::uniform("rand", layers, heads, heads, kg * group, vg * group)
            }
            .build()
            .unwrap()
        },
    )
}

fn filled(spec: &ModelCacheSpec, id: &str, chunks: &[usize]) -> AgentCache {
    let mut c = AgentCache::empty(id, spec);
    for &n in chunks {
        let start = c.token_count();
        let ids: Vec<u32> = (start as u32..(start + n) as u32).map(|i| i.wrapping_mul(2654435761)).collect();
        let text: String = (0..n).map(|i| if i % 3 == 0 { 'é' } else { 'a' }).collect();
        c.append(spec, &agent_kv(spec, id, start, n), &ids, &(0..n).collect::<Vec<_>>(), &text).unwrap();
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn save_load_is_identity(spec in spec_strategy(), chunks in prop::collection::vec(0usize..50, 0..4)) {
        let dir = tempfile::tempdir().unwrap();
        let cache = filled(&spec, "agent/with spaces", &chunks);
        let pair = save_agent(&cache, &spec, dir.path()).unwrap();
        prop_assert_eq!(locate(dir.path(), &cache.agent_id).unwrap(), Some(pair.clone()));
        let back = load_agent(&pair, spec.fingerprint()).unwrap();
        prop_assert_eq!(&back.blocks, &cache.blocks);
        prop_assert_eq!(&back.token_ids, &cache.token_ids);
        prop_assert_eq!(&back.char_offsets, &cache.char_offsets);
        prop_assert_eq!(&back.transcript_text, &cache.transcript_text);
        prop_assert_eq!(back.content_digest(), cache.content_digest());

        let sidecar_bytes = std::fs::read(&pair.sidecar_path).unwrap();
        let tensor_bytes = pair.tensor_path.as_ref().map(|p| std::fs::read(p).unwrap());
        let again = save_agent(&back, &spec, dir.path()).unwrap();
        prop_assert_eq!(std::fs::read(&again.sidecar_path).unwrap(), sidecar_bytes);
        prop_assert_eq!(again.tensor_path.as_ref().map(|p| std::fs::read(p).unwrap()), tensor_bytes.clone());

        let Some(tensor_path) = &pair.tensor_path else {
            prop_assert_eq!(cache.token_count(), 0);
            return Ok(());
        };
        let summary = inspect(tensor_path).unwrap();
        prop_assert_eq!(summary.data_bytes, q4_bytes(&spec, cache.token_count()));
        prop_assert_eq!(summary.total_bytes, summary.header_bytes + summary.data_bytes);
        prop_assert_eq!(summary.total_bytes, tensor_bytes.unwrap().len() as u64);
        let blocks = cache.token_count().div_ceil(spec.block_tokens());
        prop_assert_eq!(summary.tensors.len(), spec.num_layers() * blocks * 6);
    }

    #[test]
    fn other_specs_are_rejected(spec in spec_strategy(), n in 1usize..20) {
        let dir = tempfile::tempdir().unwrap();
        let cache = filled(&spec, "a", &[n]);
        let pair = save_agent(&cache, &spec, dir.path()).unwrap();
        let other = RawSpec { block_tokens: spec.block_tokens() * 2, ..spec.to_raw() }.build().unwrap();
        let is_mismatch = matches!(load_agent(&pair, other.fingerprint()), Err(CacheError::SpecMismatch { .. }));
        prop_assert!(is_mismatch);
    }
}
