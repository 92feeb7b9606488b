use vdit_wasm::api::{decode, explore_gate, schedule_curve, synthetic_stream};

#[test]
fn stream_gate_recovers_planted_span() {
    let stream = synthetic_stream(11, 96, 2.0).unwrap();
    assert_eq!(stream.nouns, ["person", "red ball"]);
    assert_eq!(stream.scores.len(), 2 * 96);
    let gate = explore_gate(&stream.scores, 2, &[0.5, 0.5], 3, 5).unwrap();
    assert_eq!(gate.span, Some(stream.planted));
    assert_eq!(gate.t_s, Some(stream.planted.0));
}

#[test]
fn stream_is_seeded() {
    let a = synthetic_stream(3, 48, 2.0).unwrap();
    let b = synthetic_stream(3, 48, 2.0).unwrap();
    assert_eq!(a.scores, b.scores);
    assert_ne!(a.scores, synthetic_stream(4, 48, 2.0).unwrap().scores);
    assert!(synthetic_stream(3, 2, 2.0).is_err());
    assert!(synthetic_stream(3, 48, -1.0).is_err());
}

#[test]
fn gate_rejects_ragged_input() {
    assert!(explore_gate(&[0.5; 7], 2, &[0.5, 0.5], 1, 1).is_err());
    assert!(explore_gate(&[0.5; 8], 2, &[0.5], 1, 1).is_err());
    assert!(explore_gate(&[0.5; 8], 2, &[0.5, 0.0], 1, 1).is_err());
    let open = explore_gate(&[0.9; 8], 2, &[0.5, 0.5], 2, 3).unwrap();
    assert_eq!((open.t_s, open.span), (Some(1), Some((1, 4))));
}

#[test]
fn curves_cover_the_unit_interval() {
    let c = schedule_curve("cosine", 11).unwrap();
    assert_eq!(c.tau.len(), 11);
    assert_eq!((c.alpha[0], c.sigma[0]), (1.0, 0.0));
    assert!(c.alpha.iter().zip(&c.sigma).all(|(a, s)| (a * a + s * s - 1.0).abs() < 1e-12));
    let l = schedule_curve("linear", 3).unwrap();
    assert!((l.alpha[2] - 1e-2).abs() < 1e-12);
    assert!(schedule_curve("quadratic", 3).is_err());
    assert!(schedule_curve("cosine", 1).is_err());
}

#[test]
fn decode_respects_order() {
    let d = decode(&[0.0, 5.0, 0.0], &[0.0, 0.0, 5.0]).unwrap();
    assert_eq!((d.start, d.end), (2, 3));
    assert!((d.p_start.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let flipped = decode(&[0.0, 0.0, 9.0], &[9.0, 0.0, 0.0]).unwrap();
    assert!(flipped.start <= flipped.end);
    assert!(decode(&[], &[]).is_err());
    assert!(decode(&[1.0], &[1.0, 2.0]).is_err());
}
