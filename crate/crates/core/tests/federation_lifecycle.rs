mod common;

use common::FedScenario;
use dire_core::directory::FedRef;
use dire_core::sim::{ScriptAction, Simulation, TimedAction};
use dire_core::styles::StyleKind;
use dire_core::time::{DAY, MINUTE};
use dire_model::ElementId;

const STYLES: [StyleKind; 3] = [StyleKind::Ps, StyleKind::Psr, StyleKind::Gossip];

fn fed() -> FedRef {
    FedRef::Name(FedScenario::FED.into())
}

fn replica(sim: &Simulation, member: &str) -> Vec<ElementId> {
    let node = sim.world.node_by_name(member).expect("member node");
    node.dm.replica(&fed()).unwrap_or_default()
}

fn id(sim: &Simulation, label: &str) -> ElementId {
    sim.world.label(label).cloned().expect("label")
}

/// Six members, three promotions at ten minutes; the run lasts long enough
/// for unrenewed lease-based promotions to lapse.
fn scenario(style: StyleKind) -> FedScenario {
    let mut s = FedScenario::new(style, 6, 3);
    s.promote_start = 10 * MINUTE;
    s.duration = 9 * DAY;
    s
}

fn push(config: &mut dire_core::sim::SimConfig, member: &str, at: u64, action: ScriptAction) {
    let node = config.nodes.iter_mut().find(|n| n.id == member).expect("member spec");
    node.script.push(TimedAction { at, action });
}

#[test]
fn every_member_holds_every_promotion() {
    for style in STYLES {
        let sim = common::simulate(scenario(style).config());
        let expected: Vec<ElementId> = (0..3).map(|k| id(&sim, &format!("s{k}"))).collect();
        for i in 0..6 {
            let held = replica(&sim, &FedScenario::member(i));
            for e in &expected {
                assert!(held.contains(e), "{style:?}: m{i} misses {e}");
            }
        }
    }
}

#[test]
fn retracted_promotion_disappears_everywhere() {
    for style in STYLES {
        let mut config = scenario(style).config();
        push(&mut config, "m0", 30 * MINUTE, ScriptAction::Retract {
            federation: FedScenario::FED.into(),
            element: "s0".into(),
        });
        let sim = common::simulate(config);
        let gone = id(&sim, "s0");
        let kept = id(&sim, "s1");
        for i in 0..6 {
            let held = replica(&sim, &FedScenario::member(i));
            assert!(!held.contains(&gone), "{style:?}: m{i} still holds the retracted element");
            assert!(held.contains(&kept), "{style:?}: m{i} lost an unrelated element");
        }
    }
}

#[test]
fn leaving_member_takes_its_promotions_along() {
    for style in STYLES {
        let mut config = scenario(style).config();
        push(&mut config, "m2", 40 * MINUTE, ScriptAction::LeaveFederation {
            federation: FedScenario::FED.into(),
        });
        let sim = common::simulate(config);
        let gone = id(&sim, "s2");
        assert!(sim.world.node_by_name("m2").unwrap().dm.membership(&fed()).is_none());
        for i in [0, 1, 3, 4, 5] {
            let held = replica(&sim, &FedScenario::member(i));
            assert!(!held.contains(&gone), "{style:?}: m{i} still holds the leaver's element");
            assert!(held.contains(&id(&sim, "s1")), "{style:?}: m{i}");
        }
    }
}

#[test]
fn late_joiner_catches_up() {
    for style in STYLES {
        let mut s = scenario(style);
        s.members = 7;
        let mut config = s.config();
        let late = config.nodes.iter_mut().find(|n| n.id == "m6").unwrap();
        late.script[0].at = 2 * 60 * MINUTE;
        let sim = common::simulate(config);
        let held = replica(&sim, "m6");
        for k in 0..3 {
            assert!(held.contains(&id(&sim, &format!("s{k}"))), "{style:?}: late joiner misses s{k}");
        }
    }
}
