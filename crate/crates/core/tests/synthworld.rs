use nalgebra::{DMatrix, DVector};
use stylesync::face3dmm::MOUTH_DIM;
use stylesync::synthworld::*;

fn probe_accuracy(ds: &Dataset) -> f64 {
    // one-hot least-squares probe: audio (+ bias) -> speaker id, trained on
    // even frames, scored on odd frames
    let k = ds.clips.len();
    let rows: Vec<(usize, &[f64])> = ds
        .clips
        .iter()
        .enumerate()
        .flat_map(|(s, c)| (0..c.len()).map(move |t| (s, c.audio_frame(t))))
        .collect();
    let design = |sel: &[&(usize, &[f64])]| {
        DMatrix::from_fn(sel.len(), AUDIO_DIM + 1, |i, j| if j == AUDIO_DIM { 1.0 } else { sel[i].1[j] })
    };
    let train: Vec<_> = rows.iter().step_by(2).collect();
    let test: Vec<_> = rows.iter().skip(1).step_by(2).collect();
    let x = design(&train);
    let y = DMatrix::from_fn(train.len(), k, |i, j| f64::from(train[i].0 == j));
    let w = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap();
    let scores = design(&test) * w;
    let hits = (0..test.len())
        .filter(|&i| {
            let row = scores.row(i);
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == test[i].0
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn audio_does_not_identify_the_speaker() {
    let ds = generate_dataset(&DatasetConfig {
        render_frames: false,
        ..DatasetConfig::desk(0)
    })
    .unwrap();
    let chance = 1.0 / ds.clips.len() as f64;
    let acc = probe_accuracy(&ds);
    assert!((acc - chance).abs() <= 0.1, "probe accuracy {acc}, chance {chance}");
}

#[test]
fn least_squares_recovers_the_style_map() {
    let mut rng = stylesync::rng::stream(11, "test-phonemes", 0);
    let ids = phoneme_stream(&mut rng, 64);
    let emb = &world().embeddings;
    for seed in 0..4 {
        let spk = sample_speaker(seed);
        let clip = synth_utterance(&spk, &ids, None).unwrap();
        // undo the one-pole smoothing, then regress targets on [e(p), 1]
        let mut targets = Vec::new();
        let mut prev = [0.0; MOUTH_DIM];
        for t in 0..clip.len() {
            let m = clip.mouth_frame(t);
            targets.extend((0..MOUTH_DIM).map(|r| (m[r] - COARTICULATION * prev[r]) / (1.0 - COARTICULATION)));
            prev.copy_from_slice(m);
        }
        let x = DMatrix::from_fn(ids.len(), EMBED_DIM + 1, |i, j| if j == EMBED_DIM { 1.0 } else { emb[ids[i] as usize][j] });
        let y = DMatrix::from_row_slice(ids.len(), MOUTH_DIM, &targets);
        let sol = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        let w = DMatrix::from_fn(MOUTH_DIM, EMBED_DIM, |r, c| sol[(c, r)]);
        let truth = DMatrix::from_row_slice(MOUTH_DIM, EMBED_DIM, &spk.style_map);
        let rel = (&w - &truth).norm() / truth.norm();
        assert!(rel < 0.1, "speaker {seed}: relative error {rel}");
        let b = DVector::from_iterator(MOUTH_DIM, (0..MOUTH_DIM).map(|r| sol[(EMBED_DIM, r)]));
        assert!((b - DVector::from_row_slice(&spk.style_bias)).norm() < 1e-6);
    }
}

#[test]
fn desk_dataset_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig::desk(0);
    let ds = make_dataset(&cfg, dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
    let clips: Vec<&str> = manifest.lines().filter(|l| l.starts_with("clip = ")).collect();
    assert_eq!(clips.len(), 8);
    assert!(manifest.contains("frames_per_speaker = 2048"));
    for split in &ds.splits {
        let parts = [&split.train, &split.style, &split.test];
        assert_eq!(parts.iter().map(|r| r.len()).sum::<usize>(), 2048);
        for (i, a) in parts.iter().enumerate() {
            for b in &parts[i + 1..] {
                assert!(a.end <= b.start || b.end <= a.start, "{a:?} overlaps {b:?}");
            }
        }
        assert!(split.style.len() >= cfg.style_ref_len);
    }
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.clips, ds.clips);
    assert_eq!(back.splits, ds.splits);
    for clip in &back.clips {
        assert_eq!(clip.frames.len(), 2048 * FRAME_BYTES);
        assert_eq!(clip.audio.len(), 2048 * AUDIO_DIM);
        assert_eq!(clip.mouth.len(), 2048 * MOUTH_DIM);
    }
    let again = tempfile::tempdir().unwrap();
    make_dataset(&cfg, again.path()).unwrap();
    for name in std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()) {
        assert!(std::fs::read(dir.path().join(&name)).unwrap() == std::fs::read(again.path().join(&name)).unwrap());
    }
}

#[test]
fn distinct_speakers_are_separated() {
    let speakers = sample_speakers(0, 8).unwrap();
    for (i, a) in speakers.iter().enumerate() {
        for b in &speakers[i + 1..] {
            assert!(style_separation(a, b) >= MIN_STYLE_SEPARATION);
            assert_ne!(a.appearance, b.appearance);
        }
    }
}
