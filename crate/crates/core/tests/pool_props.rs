use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use agentcache::agent_cache::CacheState;
use agentcache::block_pool::{BlockPool, PoolConfig};
use agentcache::model_spec::{AttentionKind, ModelCacheSpec, RawSpec};
use agentcache::quant_codec::q4_tensor_bytes;
use agentcache::synthetic::agent_kv;
use proptest::prelude::*;

const AGENTS: [&str; 4] = ["a", "b", "c", "d"];

fn spec() -> Arc<ModelCacheSpec> {
    Arc::new(
        RawSpec {
            layer_kinds: vec![AttentionKind::Global, AttentionKind::SlidingWindow { window: 8 }],
            group_size: 8,
            block_tokens: 16,
            ..RawSpec::uniform("pool", 2, 2, 2, 16, 8)
        }
        .build()
        .unwrap(),
    )
}

#[derive(Debug, Clone)]
enum Op {
    Append(usize, usize),
    Get(usize),
    Truncate(usize, usize),
    Evict,
    Persist(usize),
    Drop(usize, bool),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..AGENTS.len(), 1usize..40).prop_map(|(a, n)| Op::Append(a, n)),
        2 => (0..AGENTS.len()).prop_map(Op::Get),
        1 => (0..AGENTS.len(), 0usize..80).prop_map(|(a, n)| Op::Truncate(a, n)),
        1 => Just(Op::Evict),
        1 => (0..AGENTS.len()).prop_map(Op::Persist),
        1 => (0..AGENTS.len(), any::<bool>()).prop_map(|(a, d)| Op::Drop(a, d)),
    ]
}

fn block_bytes(spec: &ModelCacheSpec, tokens: usize) -> u64 {
    let h = spec.num_kv_heads();
    q4_tensor_bytes(h, tokens, spec.k_head_dim(), spec.group_size())
        + q4_tensor_bytes(h, tokens, spec.v_head_dim(), spec.group_size())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pool_laws_hold_under_random_operations(ops in prop::collection::vec(op(), 1..60)) {
        let spec = spec();
        let dir = tempfile::tempdir().unwrap();
        // Room for roughly two full agents.
        let budget = 2 * 120 * block_bytes(&spec, 1) * spec.num_layers() as u64;
        let mut pool = BlockPool::new(Arc::clone(&spec), PoolConfig { budget_bytes: budget, cache_dir: dir.path().into() });
        let mut expected: BTreeMap<&str, [u8; 32]> = BTreeMap::new();
        // Agents that are resident, paged out, or dropped but still on disk.
        let mut known: BTreeSet<&str> = BTreeSet::new();

        for (i, op) in ops.iter().enumerate() {
            let target = match *op {
                Op::Append(a, n) => {
                    let id = AGENTS[a];
                    if known.contains(id) {
                        pool.get_cache(id).unwrap();
                    }
                    let start = pool.peek(id).map(|c| c.token_count()).unwrap_or(0);
                    if start + n > 120 {
                        continue;
                    }
                    let ids: Vec<u32> = (0..n as u32).collect();
                    let offsets: Vec<usize> = (0..n).collect();
                    let kv = agent_kv(&spec, &format!("{id}#{i}"), start, n);
                    pool.append_tokens(id, &kv, &ids, &offsets, &"t".repeat(n)).unwrap();
                    known.insert(id);
                    Some(id)
                }
                Op::Get(a) => {
                    let id = AGENTS[a];
                    match known.contains(id) {
                        false => prop_assert!(pool.get_cache(id).is_err()),
                        true => {
                            let digest = pool.get_cache(id).unwrap().content_digest();
                            if let Some(want) = expected.get(id) {
                                prop_assert_eq!(&digest, want, "reload of {} changed content", id);
                            }
                        }
                    }
                    None
                }
                Op::Truncate(a, n) => {
                    let id = AGENTS[a];
                    if !known.contains(id) {
                        prop_assert!(pool.truncate(id, n).is_err());
                        continue;
                    }
                    pool.truncate(id, n).unwrap();
                    Some(id)
                }
                Op::Evict => {
                    let lru = pool
                        .hot_agent_ids()
                        .into_iter()
                        .min_by_key(|id| (pool.peek(id).unwrap().last_touched, id.clone()));
                    let evicted = pool.evict_lru().unwrap();
                    prop_assert_eq!(evicted, lru);
                    None
                }
                Op::Persist(a) => {
                    let id = AGENTS[a];
                    if pool.state(id) != CacheState::Hot {
                        prop_assert!(pool.persist(id).is_err());
                        continue;
                    }
                    pool.persist(id).unwrap();
                    None
                }
                Op::Drop(a, delete_disk) => {
                    let id = AGENTS[a];
                    if !known.contains(id) {
                        prop_assert!(pool.drop_agent(id, delete_disk).is_err());
                        continue;
                    }
                    pool.drop_agent(id, delete_disk).unwrap();
                    prop_assert_eq!(pool.state(id), CacheState::Cold);
                    if delete_disk {
                        known.remove(id);
                        expected.remove(id);
                    }
                    None
                }
            };
            if let Some(id) = target {
                match pool.peek(id) {
                    Some(c) => {
                        expected.insert(id, c.content_digest());
                    }
                    None => prop_assert!(false, "{} not resident after {:?}", id, op),
                }
            }

            let stats = pool.stats();
            prop_assert!(stats.resident_bytes <= stats.budget_bytes);
            let mut footprint = 0;
            for id in pool.hot_agent_ids() {
                let c = pool.peek(&id).unwrap();
                if let Some(want) = expected.get(id.as_str()) {
                    prop_assert_eq!(&c.content_digest(), want, "agent {} changed by op {:?}", id, op);
                }
                for layer in &c.blocks {
                    let total: usize = layer.iter().map(|b| b.token_count()).sum();
                    prop_assert_eq!(total, c.token_count());
                    if let Some((_, full)) = layer.split_last() {
                        prop_assert!(full.iter().all(|b| b.token_count() == spec.block_tokens()));
                    }
                    footprint += layer.iter().map(|b| block_bytes(&spec, b.token_count())).sum::<u64>();
                }
            }
            prop_assert_eq!(stats.resident_bytes, footprint);
        }
    }
}
