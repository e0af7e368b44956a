use slap_web::{contrastive_loss, lr_curve, voice_spectrogram};

#[test]
fn spectrogram_peaks_near_f0() {
    let spec = voice_spectrogram(200.0, -6.0, f64::INFINITY, 1.0, 3).unwrap();
    assert_eq!((spec.num_frames(), spec.num_mels()), (98, 128));
    let mid = spec.num_frames() / 2;
    let row: Vec<f64> = (0..128).map(|m| spec.get(mid, m)).collect();
    let peak = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let centers = slap::dsp::MelFilterbank::new(&Default::default()).centers_hz().to_vec();
    assert!((centers[peak] - 200.0).abs() < 60.0, "peak at {} Hz", centers[peak]);
    assert!(voice_spectrogram(10.0, -6.0, 20.0, 1.0, 0).is_err());
}

#[test]
fn schedule_matches_examples() {
    let lr = lr_curve(7000, 2500, 1e-4, 0.99, 2000).unwrap();
    assert_eq!(lr.len(), 7000);
    assert!((lr[1250] - 5e-5).abs() < 1e-18);
    assert_eq!(lr[2500], 1e-4);
    assert!((lr[6500] - 1e-4 * 0.99f64.powi(2)).abs() < 1e-18);
    assert!(lr_curve(10, 20, 1e-4, 0.99, 5).is_err());
}

#[test]
fn loss_of_identity() {
    let l = contrastive_loss(&[1.0, 0.0, 0.0, 1.0], 1.0).unwrap();
    assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!(contrastive_loss(&[1.0, 0.0, 0.0], 1.0).is_err());
    assert!(contrastive_loss(&[1.0], 0.0).is_err());
}
