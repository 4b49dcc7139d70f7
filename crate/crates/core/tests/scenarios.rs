// SPDX-License-Identifier: Apache-2.0

use addictfree_core::geo::{replay, FenceEventKind, FenceLayout};
use addictfree_core::simulator::{generate, Scenario};

#[test]
fn shipped_scenarios_parse_and_run() {
    for text in [
        include_str!("../../../scenarios/demo.toml"),
        include_str!("../../../scenarios/planted_pattern.toml"),
    ] {
        let s = Scenario::from_toml_str(text).unwrap();
        let out = generate(&s).unwrap();
        assert!(!out.events.is_empty());
        for p in s.profiles() {
            p.validate().unwrap();
        }
    }
}

#[test]
fn demo_user_walks_into_the_bar_fence() {
    let s = Scenario::from_toml_str(include_str!("../../../scenarios/demo.toml")).unwrap();
    let out = generate(&s).unwrap();
    let layout = FenceLayout::new(s.fences.clone(), s.rules.clone()).unwrap();
    let ana: Vec<_> = out.fixes.iter().filter(|f| f.user_id.as_str() == "ana").cloned().collect();
    let events = replay(&layout, &"ana".into(), &ana).unwrap();
    let entries = events
        .iter()
        .filter(|e| e.kind == FenceEventKind::Entered && e.fence_id.as_str() == "bar-sol")
        .count();
    assert!(entries >= 3, "{entries} entries in a week");
}
