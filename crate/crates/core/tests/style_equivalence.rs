mod common;

use std::collections::BTreeSet;

use common::{FedScenario, RandomFedScript};
use dire_core::directory::FedRef;
use dire_core::sim::Simulation;
use dire_core::styles::StyleKind;
use dire_model::ElementId;

const STYLES: [StyleKind; 3] = [StyleKind::Ps, StyleKind::Psr, StyleKind::Gossip];

/// Replica of every current member, as labels.
fn outcome(sim: &Simulation, script: &RandomFedScript) -> Vec<(String, BTreeSet<String>)> {
    let fed = FedRef::Name(FedScenario::FED.into());
    let label_of = |id: &ElementId| -> String {
        script
            .live
            .iter()
            .chain((0..60).map(|k| format!("p{k}")).collect::<Vec<_>>().iter())
            .find(|l| sim.world.label(l) == Some(id))
            .cloned()
            .unwrap_or_else(|| id.to_string())
    };
    (0..common::SCRIPT_NODES)
        .map(FedScenario::member)
        .filter_map(|m| {
            let dm = &sim.world.node_by_name(&m).unwrap().dm;
            let replica = dm.replica(&fed)?;
            Some((m, replica.iter().map(label_of).collect()))
        })
        .collect()
}

#[test]
fn all_styles_converge_to_the_same_federation_state() {
    for seed in 1..=10 {
        let mut outcomes = Vec::new();
        for style in STYLES {
            let script = common::random_fed_script(style, seed);
            let sim = common::simulate(script.config.clone());
            let got = outcome(&sim, &script);
            let members: BTreeSet<String> = got.iter().map(|(m, _)| m.clone()).collect();
            assert_eq!(members, script.members, "{style:?} seed {seed}: membership");
            for (m, held) in &got {
                assert_eq!(held, &script.live, "{style:?} seed {seed}: {m}");
            }
            outcomes.push(got);
        }
        assert!(outcomes.windows(2).all(|w| w[0] == w[1]), "seed {seed}");
    }
}

#[test]
fn replication_is_cheapest_and_fastest() {
    for seed in 1..=5 {
        let (ps_msgs, ps_latency) = common::ordering_point(StyleKind::Ps, seed);
        let (psr_msgs, psr_latency) = common::ordering_point(StyleKind::Psr, seed);
        let (gossip_msgs, _) = common::ordering_point(StyleKind::Gossip, seed);
        assert!(psr_msgs < gossip_msgs && gossip_msgs < ps_msgs, "seed {seed}: {psr_msgs} {gossip_msgs} {ps_msgs}");
        assert!(psr_latency < ps_latency, "seed {seed}: {psr_latency} vs {ps_latency}");
    }
}

#[test]
fn replicated_federation_costs_one_message_per_member_and_promotion() {
    // Fifteen promotions reach fourteen other early members; each of the
    // five late joiners then receives the fifteen elements once.
    let (msgs, _) = common::ordering_point(StyleKind::Psr, 1);
    assert_eq!(msgs * common::ORDERING_PROMOTIONS as f64, (15 * 14 + 5 * 15) as f64);
}
