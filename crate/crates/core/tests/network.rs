mod common;

use std::collections::BTreeMap;

use l2swbm::experiment::canonical_design;
use l2swbm::ingest::Window;
use l2swbm::network::{build, Density, ModelConfig, NodeCounts, NodeId};
use l2swbm::sampler::{chain_rng, gibbs_step, init_state, SliceTuning};
use proptest::prelude::*;

fn tuning() -> SliceTuning {
    l2swbm::sampler::SamplerSettings::new(10, 1, 0, 10, 1).tuning()
}

#[test]
fn every_conditional_class_matches_grid_oracle() {
    let (data, table, priors) = common::fixture(1, 2, 3);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for id in ["PROT", "01FF", "01HH", "f01HH", "01NH"] {
        let cfg = ModelConfig::from_id(id, table.span, data.lakes()).unwrap();
        let net = build(&cfg, &priors, &table).unwrap();
        let mut state = init_state(&net, 1, 11);
        let mut rng = chain_rng(11, 1);
        for _ in 0..25 {
            gibbs_step(&net, &mut state, &mut rng, tuning()).unwrap();
        }
        for slot in 0..net.stochastic_count() {
            let kl = common::grid_kl(&net, &state, slot);
            let e = worst.entry(common::class_key(&net, slot)).or_insert(0.0);
            *e = e.max(kl);
        }
    }
    for class in ["normal", "gamma", "slice-P", "slice-R", "epsilon", "eta"] {
        let kl = worst.get(class).copied().unwrap_or(f64::NAN);
        assert!(kl < 1e-6, "{class}: KL {kl}");
    }
}

#[test]
fn canonical_configs_build_with_finite_initial_density() {
    let (data, table, priors) = common::fixture(2, 120, 1);
    let design = canonical_design();
    assert_eq!(design.models.len(), 26);
    for cfg in &design.models {
        let net = build(cfg, &priors, &table).unwrap_or_else(|e| panic!("{}: {e}", cfg.id));
        let sources = net
            .nodes
            .iter()
            .filter(|n| matches!(n.id, NodeId::ObsPrecision { .. }))
            .count();
        assert_eq!(net.node_counts(), NodeCounts::expected(cfg, sources), "{}", cfg.id);
        let mut seen = vec![0u32; net.stochastic_count()];
        for (s, _) in &net.update_plan {
            seen[*s] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1), "{}", cfg.id);
        for chain in 0..3 {
            let st = init_state(&net, chain, 7);
            assert!(net.log_joint(&st).is_finite(), "{} chain {chain}", cfg.id);
            net.check_state(&st).unwrap();
        }
        assert_eq!(data.lakes(), cfg.lakes);
    }
}

#[test]
fn rolling_storage_change_is_sum_of_monthly_balances() {
    let (data, table, priors) = common::fixture(2, 36, 2);
    for id in ["12FF", "01HH", "f12NH"] {
        let cfg = ModelConfig::from_id(id, table.span, data.lakes()).unwrap();
        let Window::Rolling(w) = cfg.window else { unreachable!() };
        let net = build(&cfg, &priors, &table).unwrap();
        let st = init_state(&net, 2, 5);
        for lake in 0..2 {
            let bal = |t| net.value_of(net.node(&NodeId::Balance { lake, t }).unwrap(), &st.values).unwrap();
            for j in 1..=(36 - w as usize + 1) {
                let dh = net.value_of(net.node(&NodeId::DeltaH { lake, j }).unwrap(), &st.values).unwrap();
                let direct: f64 = (j..j + w as usize).map(bal).sum();
                assert!((dh - direct).abs() < 1e-9, "{id} lake {lake} j {j}");
            }
        }
    }
}

#[test]
fn dot_dump_covers_all_nodes() {
    let (data, table, priors) = common::fixture(1, 12, 1);
    let cfg = ModelConfig::from_id("01NF", table.span, data.lakes()).unwrap();
    let net = build(&cfg, &priors, &table).unwrap();
    let dot = net.to_dot();
    assert!(dot.starts_with("digraph"));
    assert_eq!(dot.matches("label=").count(), net.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn constrained_variant_differs_only_in_flow_bias_hyperpriors(k in 0usize..13) {
        let (data, table, priors) = common::fixture(2, 24, 4);
        let base_ids: Vec<String> = canonical_design().models.iter().map(|m| m.id.clone()).filter(|id| !id.starts_with('f')).collect();
        let id = &base_ids[k];
        let base = ModelConfig::from_id(id, table.span, data.lakes()).unwrap();
        let fid = format!("f{id}");
        let cons = ModelConfig::from_id(&fid, table.span, data.lakes()).unwrap();
        let a = build(&base, &priors, &table).unwrap();
        let b = build(&cons, &priors, &table).unwrap();
        prop_assert_eq!(a.node_counts(), b.node_counts());
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            prop_assert_eq!(&x.id, &y.id);
            if x.density != y.density {
                let flow = matches!(
                    x.id,
                    NodeId::SeasonalBias { component: l2swbm::ingest::Component::Q | l2swbm::ingest::Component::D, .. }
                        | NodeId::BiasPrecision { component: l2swbm::ingest::Component::Q | l2swbm::ingest::Component::D, .. }
                );
                prop_assert!(flow, "{:?} changed", x.id);
                let ok = matches!(y.density, Some(Density::Normal { .. }) | Some(Density::Gamma { .. }));
                prop_assert!(ok, "{:?}", y.density);
            }
        }
    }

    #[test]
    fn log_joint_is_finite_after_sweeps(seed in 0u64..1000) {
        let (data, table, priors) = common::fixture(2, 12, 6);
        let cfg = ModelConfig::from_id("01HH", table.span, data.lakes()).unwrap();
        let net = build(&cfg, &priors, &table).unwrap();
        let mut st = init_state(&net, 1, seed);
        let mut rng = chain_rng(seed, 1);
        for _ in 0..5 {
            gibbs_step(&net, &mut st, &mut rng, tuning()).unwrap();
            prop_assert!(net.log_joint(&st).is_finite());
            prop_assert!(net.check_state(&st).is_ok());
        }
    }
}
