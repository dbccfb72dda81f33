use openset_web::{density_field, toy_comparison, DensityRequest, ToyRequest};

#[test]
fn density_field_covers_the_grid() {
    let req = DensityRequest {
        resolution: 16,
        ..Default::default()
    };
    let f = density_field(&req).unwrap();
    assert_eq!(f.values.len(), 16 * 16);
    assert!(f.values.iter().all(|v| v.is_finite()));
    assert!(f.points.iter().any(|p| p.2 == -1));
    assert!(f.auroc > 0.5, "{}", f.auroc);
    let again = density_field(&req).unwrap();
    assert_eq!(f.values, again.values);
}

#[test]
fn density_field_rejects_bad_requests() {
    let bad = DensityRequest {
        n_components: 0,
        ..Default::default()
    };
    assert!(density_field(&bad).is_err());
}

#[test]
fn toy_comparison_reports_every_method() {
    let r = toy_comparison(&ToyRequest {
        epochs: 10,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(r.anchor_loss.len(), 11);
    let names: Vec<&str> = r.methods.iter().map(|m| m.method).collect();
    assert_eq!(names, ["gmm", "score", "entropy"]);
    for m in &r.methods {
        assert_eq!(m.roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(m.roc.last(), Some(&(1.0, 1.0)));
    }
    assert!(r.auroc_by_components.contains_key(&r.selected_components));
}
