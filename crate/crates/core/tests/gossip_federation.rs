mod common;

use dire_core::sim::Quantity;

#[test]
fn large_gossip_federation_reaches_everyone_within_traffic_bands() {
    let sweep = common::gossip_sweep(1..=20);
    assert_eq!(sweep.seeds, 20);
    assert!(sweep.mean_reach >= 0.98, "mean reach {}", sweep.mean_reach);
    for quantity in [Quantity::Promotion, Quantity::Heartbeat, Quantity::Resubscription] {
        assert!(sweep.band_ok(quantity), "{quantity:?} out of band: {:?}", sweep.bands);
    }
}
