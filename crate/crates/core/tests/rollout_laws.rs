mod common;

#[test]
fn random_actions_respect_locality_and_budgets() {
    let n = common::check_rollout_laws(100, 9).unwrap();
    assert!(n >= 100);
}

#[test]
fn zero_budget_controller_is_the_plain_rollout() {
    common::zero_budget_matches_baseline(10, 4).unwrap();
}
