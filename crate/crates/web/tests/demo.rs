use dfl_web::{dc_angle_curve, ks_demo, training_demo};

#[test]
fn dc_vanishes_in_the_fair_direction() {
    let c = dc_angle_curve(400, 0.1, 3, 9).unwrap();
    assert_eq!(c.angles.len(), 9);
    assert_eq!(c.angles[0], 0.0);
    assert!((c.angles[4] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    assert!(c.dc[0] > 0.05, "{:?}", c.dc);
    assert!(c.dc[4].abs() < 0.01, "{:?}", c.dc);
    assert!(c.dc[0] > 10.0 * c.dc[4].abs());
}

#[test]
fn ks_demo_grows_with_shift() {
    let same = ks_demo(300, 0.0, 1);
    let far = ks_demo(300, 3.0, 1);
    assert!(same.ks < 0.15);
    assert!(far.ks > 0.7);
    assert!(far.group_a.windows(2).all(|w| w[0] <= w[1]));
    assert!((0.0..=1.0).contains(&far.at));
    assert_eq!(ks_demo(300, 3.0, 1), far);
}

#[test]
fn training_demo_runs() {
    let d = training_demo(0.05, 3, 2).unwrap();
    assert_eq!(d.trajectory.len(), 3);
    assert!(d.standard.accuracy > 50.0);
    let json = serde_json::to_string(&d).unwrap();
    assert!(json.contains("\"trajectory\""));
}
