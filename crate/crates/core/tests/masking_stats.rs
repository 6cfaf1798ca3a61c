use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cpkd::masking::{sample_mask, MaskKind};

#[test]
fn strategies_are_drawn_uniformly() {
    let labels = [0, 0, 1, 1, 1, 3, 3];
    let soft = [0.0, 0.6, 0.6, 0.0, 0.6, 0.6, 0.0];
    let allowed = MaskKind::parse_set("NGTR").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 40_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let m = sample_mask(&labels, 4, &soft, &allowed, &mut rng).unwrap();
        counts[allowed.iter().position(|&k| k == m.kind()).unwrap()] += 1;
    }
    for c in counts {
        let frac = c as f64 / n as f64;
        assert!((frac - 0.25).abs() < 0.015, "{counts:?}");
    }
}

#[test]
fn relation_class_is_uniform_over_present_classes() {
    let labels = [0, 0, 1, 1, 1, 1, 1, 3];
    let soft = [0.0; 8];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 30_000;
    let mut hidden = [0usize; 4];
    for _ in 0..n {
        let m = sample_mask(&labels, 4, &soft, &[MaskKind::Relation], &mut rng).unwrap();
        let first = m.bits().iter().position(|b| !b).unwrap();
        let class = labels[first];
        assert!(labels.iter().zip(m.bits()).all(|(&l, &b)| b == (l != class)));
        hidden[class] += 1;
    }
    assert_eq!(hidden[2], 0);
    for c in [0, 1, 3] {
        let frac = hidden[c] as f64 / n as f64;
        assert!((frac - 1.0 / 3.0).abs() < 0.015, "{hidden:?}");
    }
}

#[test]
fn transition_mask_hides_boundary_frames() {
    let labels = [0, 0, 1, 1];
    let soft = [0.1, 0.5, 0.9, 0.49];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = sample_mask(&labels, 2, &soft, &[MaskKind::Transition], &mut rng).unwrap();
    assert_eq!(m.bits(), &[true, false, false, true]);
    assert_eq!(m.masked(), 2);
}
