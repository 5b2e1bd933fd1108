#![allow(dead_code)]

pub mod forgery;

use std::path::PathBuf;

use dire_core::sim::{SimConfig, Simulation};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn load(name: &str) -> SimConfig {
    SimConfig::load(&fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn simulate(config: SimConfig) -> Simulation {
    let mut sim = Simulation::build(config).unwrap_or_else(|e| panic!("{e}"));
    sim.run_to_end();
    sim
}

use dire_core::sim::config::{NetworkSpec, NodeSpec, TopologyConfig};
use dire_core::sim::{FacetDoc, ScriptAction, TimedAction};
use dire_core::styles::StyleKind;
use dire_core::time::{SimTime, MINUTE, SECOND};

/// One federation whose members join one after the other and then take
/// turns promoting freshly created services.
#[derive(Clone, Debug)]
pub struct FedScenario {
    pub style: StyleKind,
    pub members: usize,
    pub promotions: usize,
    pub seed: u64,
    pub leaves: usize,
    pub join_gap: SimTime,
    pub promote_start: SimTime,
    pub promote_gap: SimTime,
    pub duration: SimTime,
    pub loss_rate: f64,
}

impl FedScenario {
    pub fn new(style: StyleKind, members: usize, promotions: usize) -> Self {
        FedScenario {
            style,
            members,
            promotions,
            seed: 1,
            leaves: 4,
            join_gap: SECOND,
            promote_start: 60 * MINUTE,
            promote_gap: 0,
            duration: 2 * 60 * MINUTE,
            loss_rate: 0.0,
        }
    }

    pub const FED: &'static str = "fed";

    pub fn member(i: usize) -> String {
        format!("m{i}")
    }

    pub fn config(&self) -> SimConfig {
        let mut nodes = vec![NodeSpec {
            id: "dir".into(),
            broker: Some("hub".into()),
            directory: true,
            registry: None,
            workload: false,
            script: Vec::new(),
        }];
        for i in 0..self.members {
            let first = if i == 0 {
                ScriptAction::CreateFederation {
                    name: Self::FED.into(),
                    style: self.style,
                }
            } else {
                ScriptAction::JoinFederation {
                    federation: Self::FED.into(),
                }
            };
            nodes.push(NodeSpec {
                id: Self::member(i),
                broker: Some(format!("b{}", 1 + i % self.leaves)),
                directory: false,
                registry: None,
                workload: false,
                script: vec![TimedAction {
                    at: SECOND + i as SimTime * self.join_gap,
                    action: first,
                }],
            });
        }
        for k in 0..self.promotions {
            let at = self.promote_start + k as SimTime * self.promote_gap;
            let label = format!("s{k}");
            let script = &mut nodes[1 + k % self.members].script;
            script.push(TimedAction {
                at,
                action: ScriptAction::CreateService {
                    label: label.clone(),
                    name: None,
                    allow_add_info: true,
                    facets: vec![FacetDoc {
                        schema: "wsdl".into(),
                        xml: Some(format!("<definitions><operation name=\"op{k}\"/></definitions>")),
                        root: None,
                    }],
                    share: false,
                },
            });
            script.push(TimedAction {
                at,
                action: ScriptAction::Promote {
                    federation: Self::FED.into(),
                    element: label,
                },
            });
        }
        SimConfig {
            seed: self.seed,
            duration: self.duration,
            action_period: 5 * MINUTE,
            workload_start: 5 * MINUTE,
            network: NetworkSpec {
                loss_rate: self.loss_rate,
                ..NetworkSpec::default()
            },
            topology: TopologyConfig::Star { leaves: self.leaves },
            manager: Default::default(),
            nodes,
            groups: Vec::new(),
            outages: Vec::new(),
            workload: None,
            checks: Vec::new(),
        }
    }
}

use dire_core::sim::config::Quantity;
use dire_core::time::DAY;

pub const GOSSIP_MEMBERS: usize = 500;
pub const GOSSIP_PROMOTIONS: usize = 150;
pub const GOSSIP_DAYS: SimTime = 7;

/// The large gossip federation: members join two seconds apart, promotions
/// start once everybody is in and the run lasts one week.
pub fn gossip_scenario(seed: u64) -> SimConfig {
    let mut s = FedScenario::new(StyleKind::Gossip, GOSSIP_MEMBERS, GOSSIP_PROMOTIONS);
    s.seed = seed;
    s.join_gap = 2 * SECOND;
    s.promote_start = 60 * MINUTE;
    s.promote_gap = 10 * SECOND;
    s.duration = GOSSIP_DAYS * DAY;
    let mut config = s.config();
    config.checks = load("gossip_bands.toml").checks;
    config
}

/// Aggregate of the gossip scenario over several seeds.
#[derive(Clone, Debug)]
pub struct GossipSweep {
    pub seeds: usize,
    pub mean_reach: f64,
    pub min_reach: f64,
    /// Per quantity: (expected, mean measured, tolerance, seeds in band).
    pub bands: Vec<(Quantity, f64, f64, f64, usize)>,
}

impl GossipSweep {
    pub fn band_ok(&self, quantity: Quantity) -> bool {
        self.bands
            .iter()
            .find(|b| b.0 == quantity)
            .is_some_and(|&(_, expected, measured, tolerance, _)| (measured - expected).abs() <= tolerance * expected)
    }
}

pub fn gossip_sweep(seeds: std::ops::RangeInclusive<u64>) -> GossipSweep {
    let mut reaches = Vec::new();
    let mut bands: Vec<(Quantity, f64, f64, f64, usize)> = Vec::new();
    for seed in seeds {
        let report = simulate(gossip_scenario(seed)).report();
        let reach = report.reach.get(&StyleKind::Gossip).expect("gossip reach");
        reaches.push(reach.mean);
        for (i, result) in report.checks.iter().enumerate() {
            if bands.len() <= i {
                bands.push((result.check.quantity, result.expected, 0.0, result.check.tolerance, 0));
            }
            bands[i].2 += result.measured;
            bands[i].4 += usize::from(result.pass);
        }
    }
    let n = reaches.len();
    for band in &mut bands {
        band.2 /= n as f64;
    }
    GossipSweep {
        seeds: n,
        mean_reach: reaches.iter().sum::<f64>() / n as f64,
        min_reach: reaches.iter().cloned().fold(f64::INFINITY, f64::min),
        bands,
    }
}

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random membership and promotion history for one federation together
/// with the outcome every style must converge to.
#[derive(Clone, Debug)]
pub struct RandomFedScript {
    pub config: SimConfig,
    /// Members at the end of the script.
    pub members: BTreeSet<String>,
    /// Labels of the promotions that must be live at every member.
    pub live: BTreeSet<String>,
}

pub const SCRIPT_NODES: usize = 8;
const SCRIPT_STEPS: usize = 30;

/// Node `m0` creates the federation and never leaves; the others join,
/// leave, promote and retract at random every twenty minutes. The run
/// continues long enough for unrenewed leases to lapse.
pub fn random_fed_script(style: StyleKind, seed: u64) -> RandomFedScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = FedScenario::new(style, SCRIPT_NODES, 0);
    s.seed = seed;
    s.duration = 9 * DAY;
    let mut config = s.config();
    for node in config.nodes.iter_mut().skip(2) {
        node.script.clear();
    }
    let mut members: BTreeSet<usize> = BTreeSet::from([0]);
    let mut live: BTreeMap<String, usize> = BTreeMap::new();
    let fed = || FedScenario::FED.to_string();
    for step in 0..SCRIPT_STEPS {
        let at = 10 * MINUTE + step as SimTime * 20 * MINUTE;
        let who = rng.gen_range(0..SCRIPT_NODES);
        let own: Vec<String> = live.iter().filter(|(_, &o)| o == who).map(|(l, _)| l.clone()).collect();
        let mut actions = Vec::new();
        if !members.contains(&who) {
            members.insert(who);
            actions.push(ScriptAction::JoinFederation { federation: fed() });
        } else {
            let roll: f64 = rng.gen();
            if who != 0 && roll < 0.2 {
                members.remove(&who);
                live.retain(|_, o| *o != who);
                actions.push(ScriptAction::LeaveFederation { federation: fed() });
            } else if roll < 0.4 && !own.is_empty() {
                let label = own[rng.gen_range(0..own.len())].clone();
                live.remove(&label);
                actions.push(ScriptAction::Retract {
                    federation: fed(),
                    element: label,
                });
            } else {
                let label = format!("p{step}");
                live.insert(label.clone(), who);
                actions.push(ScriptAction::CreateService {
                    label: label.clone(),
                    name: None,
                    allow_add_info: true,
                    facets: vec![FacetDoc {
                        schema: "wsdl".into(),
                        xml: Some(format!("<definitions><operation name=\"op{step}\"/></definitions>")),
                        root: None,
                    }],
                    share: false,
                });
                actions.push(ScriptAction::Promote {
                    federation: fed(),
                    element: label,
                });
            }
        }
        let node = &mut config.nodes[1 + who];
        node.script.extend(actions.into_iter().map(|action| TimedAction { at, action }));
    }
    RandomFedScript {
        config,
        members: members.into_iter().map(FedScenario::member).collect(),
        live: live.into_keys().collect(),
    }
}

pub const ORDERING_PROMOTIONS: usize = 15;

/// Per-style comparison run: twenty members, the first fifteen promote one
/// element each and the last five join six hours later; lasts two weeks so
/// lease renewals weigh in.
pub fn ordering_scenario(style: StyleKind, seed: u64) -> SimConfig {
    let mut s = FedScenario::new(style, 20, ORDERING_PROMOTIONS);
    s.seed = seed;
    s.duration = 14 * DAY;
    let mut config = s.config();
    for node in config.nodes.iter_mut().skip(16) {
        node.script[0].at += 6 * 60 * MINUTE;
    }
    config
}

/// (messages per promotion, mean transfer latency in ms) for one style.
pub fn ordering_point(style: StyleKind, seed: u64) -> (f64, f64) {
    let report = simulate(ordering_scenario(style, seed)).report();
    let fed = report.federation(FedScenario::FED).expect("federation row");
    let latency = report.latency.get(&style).map_or(f64::NAN, |l| l.mean);
    (fed.messages as f64 / ORDERING_PROMOTIONS as f64, latency)
}

pub const OUTAGE_START: SimTime = 2 * 60 * MINUTE;

/// The lease fixture with the customer's link down for `days` days.
pub fn lease_outage(days: SimTime) -> SimConfig {
    let mut config = load("lease.toml");
    config.outages.push(dire_core::sim::config::OutageSpec {
        link: Some(("b2".into(), "hub".into())),
        node: None,
        from: OUTAGE_START,
        until: OUTAGE_START + days * DAY,
    });
    config
}

pub fn customer_held(sim: &Simulation) -> BTreeSet<dire_model::ElementId> {
    sim.world.node_by_name("customer").unwrap().dm.registry().ids().into_iter().collect()
}

pub fn provider_shared(sim: &Simulation) -> BTreeSet<dire_model::ElementId> {
    sim.world.node_by_name("provider").unwrap().dm.shared().clone()
}
