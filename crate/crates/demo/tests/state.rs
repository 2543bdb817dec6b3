use nicetrans_demo::{DemoState, Layer};

#[test]
fn zero_fraction_is_identity() {
    let s = DemoState::new(3, 16, 5.0, 2.0, 1.5).unwrap();
    let n = s.size();
    for x in [0, n / 2, n - 1] {
        assert_eq!(s.slice(Layer::Warped, x).unwrap(), s.slice(Layer::Moving, x).unwrap());
        assert!(s.slice(Layer::Jacobian, x).unwrap().iter().all(|&v| v == 1.0));
    }
    assert_eq!(s.njd_percent(), 0.0);
    assert_eq!(s.loss().diffusion, 0.0);
    assert_eq!(s.slice(Layer::Fixed, 4).unwrap().len(), 16 * 16);
}

#[test]
fn true_field_improves_alignment() {
    let mut s = DemoState::new(3, 24, 5.0, 2.0, 1.5).unwrap();
    let (dsc0, ncc0) = (s.dsc(), s.loss().ncc);
    s.set_fraction(1.0).unwrap();
    assert!(s.dsc() > dsc0, "{} vs {dsc0}", s.dsc());
    assert!(s.loss().ncc < ncc0);
    assert!(s.loss().diffusion > 0.0);
    let mid = s.size() / 2;
    let diff = s.slice(Layer::Difference, mid).unwrap();
    assert!(diff.iter().all(|&v| v >= 0.0));
}

#[test]
fn layer_names() {
    for (name, layer) in [("fixed", Layer::Fixed), ("jacobian", Layer::Jacobian), ("difference", Layer::Difference)] {
        assert_eq!(Layer::parse(name), Some(layer));
    }
    assert_eq!(Layer::parse("labels"), None);
}
