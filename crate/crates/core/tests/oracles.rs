use std::time::Instant;

use drgrade::oracle;
use drgrade::Backend;

fn assert_all(reports: &[oracle::CheckReport]) {
    for r in reports {
        println!("{r}");
    }
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    assert!(failed.is_empty(), "{}", failed.join("\n"));
}

#[test]
fn gradients_match_finite_differences() {
    let t = Instant::now();
    assert_all(&oracle::gradient_suite(0..100));
    println!("gradient suite took {:?}", t.elapsed());
}

#[test]
fn auroc_matches_pairwise_definition() {
    assert_all(&[oracle::auroc_oracle(500, 1, Backend::default())]);
    assert_all(&[oracle::auroc_oracle(50, 2, Backend::Sequential)]);
}

#[test]
fn loss_identities_hold() {
    assert_all(&oracle::loss_identities(1000, 3));
}

#[test]
fn containers_roundtrip_and_detect_corruption() {
    assert_all(&[oracle::container_roundtrip(1000, 4), oracle::container_corruption(300, 5)]);
}

#[test]
fn brute_force_ranking_oracle_counts_pairs() {
    use drgrade::losses::RankingVariant;
    use drgrade::{Grade, Tensor};
    // all-equal scores: every constrained pair contributes exactly the margin
    let z = Tensor::zeros(&[5, 5]);
    let t: Vec<Grade> = Grade::ALL.to_vec();
    for v in [RankingVariant::Unimodal, RankingVariant::Monotone] {
        assert!((oracle::ranking_loss_oracle(&z, &t, 0.3, v) - 0.3).abs() < 1e-15);
    }
}
