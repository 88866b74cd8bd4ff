mod support;

use std::collections::BTreeSet;

use num_complex::Complex64;
use support::close;
use vibeam_core::dataset::Dataset;
use vibeam_core::par::Exec;
use vibeam_core::rng::{substream, Purpose};
use vibeam_core::scene::{
    beam_sine, best_beam, dft_codebook, generate_dataset, generate_episode, measure_power, steering_vector,
    ChannelRealization, Path, SceneConfig, Sweep, MODALITIES, POSITION,
};

fn small(episodes: usize) -> SceneConfig {
    SceneConfig {
        episodes,
        ..SceneConfig::default()
    }
}

#[test]
fn steering_vector_examples() {
    let a = steering_vector(0.0, 4);
    assert!(a.iter().all(|v| close(v.re, 0.5, 1e-15) && v.im == 0.0));
    let e = steering_vector(std::f64::consts::FRAC_PI_2, 4);
    for (k, v) in e.iter().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        assert!((v - Complex64::new(0.5 * sign, 0.0)).norm() < 1e-12);
    }
    let h = steering_vector(std::f64::consts::FRAC_PI_2, 2);
    let r = 1.0 / 2f64.sqrt();
    assert!((h[0] - Complex64::new(r, 0.0)).norm() < 1e-15);
    assert!((h[1] - Complex64::new(-r, 0.0)).norm() < 1e-12);
    for angle in [-1.2, -0.3, 0.8] {
        let n: f64 = steering_vector(angle, 7).iter().map(|v| v.norm_sqr()).sum();
        assert!(close(n, 1.0, 1e-12));
    }
}

#[test]
fn pure_noise_power_has_unit_mean() {
    let ch = ChannelRealization::zero(4, 1);
    let book = dft_codebook(4, 8);
    let sweep = Sweep {
        noise_power: 1.0,
        symbol_energy: 1.0,
        window: 1,
    };
    let mut rng = substream(1, Purpose::Data, &[]);
    let n = 10_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let p = measure_power(&ch, &[Complex64::new(1.0, 0.0)], &book, sweep, &mut rng).unwrap();
        s += p[3];
        s2 += p[3] * p[3];
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * se, "{mean} +- {se}");
}

#[test]
fn single_path_channel_picks_nearest_beam() {
    let book = dft_codebook(8, 16);
    for k in 0..40 {
        let aoa = -1.4 + 2.8 * k as f64 / 39.0;
        let ch = ChannelRealization::new(
            vec![Path {
                gain: Complex64::from_polar(1.0, 0.3 * k as f64),
                aoa,
                aod: 0.0,
            }],
            8,
            1,
        );
        let u = aoa.sin();
        let dist = |b: usize| {
            let d = (beam_sine(b, 16) - u).abs();
            d.min(2.0 - d)
        };
        let nearest = (0..16).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        let one = [Complex64::new(1.0, 0.0)];
        assert_eq!(best_beam(&ch, &one, &book), nearest, "aoa {aoa}");
        assert_eq!(best_beam(&ch.scaled(3.5), &one, &book), nearest);
    }
}

#[test]
fn path_on_a_codeword_is_recovered_from_noiseless_power() {
    let book = dft_codebook(4, 16);
    for b in 0..16 {
        let ch = ChannelRealization::new(
            vec![Path {
                gain: Complex64::new(0.8, 0.0),
                aoa: beam_sine(b, 16).asin(),
                aod: 0.0,
            }],
            4,
            1,
        );
        let sweep = Sweep {
            noise_power: 0.0,
            symbol_energy: 2.0,
            window: 3,
        };
        let p = measure_power(&ch, &[Complex64::new(1.0, 0.0)], &book, sweep, &mut substream(0, Purpose::Data, &[])).unwrap();
        assert_eq!(vibeam_core::scene::argmax(&p), b);
        // noiseless power is P_s |g^H h|^2 = 2 * 0.64 on the matched beam
        assert!(close(p[b], 1.28, 1e-12));
    }
}

#[test]
fn noiseless_line_of_sight_labels_follow_geometry() {
    let cfg = SceneConfig {
        paths: 1,
        noise_power: 0.0,
        ..small(50)
    };
    for e in 0..50 {
        let ep = generate_episode(&cfg, 3, e).unwrap();
        let u = ep.states.last().unwrap().bearing().sin();
        let dist = |b: usize| {
            let d = (beam_sine(b, cfg.beams) - u).abs();
            d.min(2.0 - d)
        };
        let nearest = (0..cfg.beams).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        assert_eq!(ep.label, nearest, "episode {e}");
    }
}

#[test]
fn labels_cover_most_of_the_codebook() {
    let ds = generate_dataset(&small(2000), 0, Exec::Parallel).unwrap();
    let seen: BTreeSet<u16> = ds.labels.iter().copied().collect();
    assert!(seen.len() * 2 >= ds.beams, "{} of {} beams", seen.len(), ds.beams);
}

#[test]
fn presence_mask_follows_availability() {
    let cfg = small(6);
    let ds = generate_dataset(&cfg, 1, Exec::Sequential).unwrap();
    for name in MODALITIES {
        let want = cfg.availability_mask(name);
        for e in 0..6 {
            for t in 0..cfg.steps {
                assert_eq!(ds.present(name, e, t), want[t], "{name} e{e} t{t}");
            }
        }
    }
    assert_eq!(cfg.availability_mask(POSITION).iter().filter(|&&p| p).count(), 2);
    let pos = ds.modality(POSITION).unwrap();
    for e in 0..6 {
        for t in 0..cfg.steps {
            if !ds.present(POSITION, e, t) {
                assert!(ds.step(1, e, t).iter().all(|&v| v == 0.0));
            }
        }
    }
    assert_eq!(pos.shape, vec![3]);
}

#[test]
fn generation_is_deterministic_and_stream_separated() {
    let cfg = small(12);
    let a = generate_dataset(&cfg, 9, Exec::Sequential).unwrap();
    let b = generate_dataset(&cfg, 9, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    let other = generate_dataset(&SceneConfig { stream: 1, ..cfg.clone() }, 9, Exec::Sequential).unwrap();
    assert_ne!(a.modalities[0].values, other.modalities[0].values);
    let reseeded = generate_dataset(&cfg, 10, Exec::Sequential).unwrap();
    assert_ne!(a.modalities[0].values, reseeded.modalities[0].values);
}

#[test]
fn saved_dataset_round_trips_including_empty() {
    let dir = tempfile::tempdir().unwrap();
    for e in [0, 3] {
        let ds = generate_dataset(&small(e), 2, Exec::Sequential).unwrap();
        let path = dir.path().join(format!("e{e}"));
        ds.save(&path).unwrap();
        let back = Dataset::load(&path, None).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.episodes, e);
        let only = Dataset::load(&path, Some(&[POSITION])).unwrap();
        assert_eq!(only.modalities.len(), 1);
        assert_eq!(only.labels, ds.labels);
    }
}

#[test]
fn invalid_scenes_are_rejected() {
    assert!(SceneConfig { beams: 1, ..SceneConfig::default() }.validate().is_err());
    assert!(SceneConfig { noise_power: -1.0, ..SceneConfig::default() }.validate().is_err());
    let mut cfg = SceneConfig::default();
    cfg.availability.insert("lidar".into(), vec![0]);
    assert!(cfg.validate().is_err());
}
