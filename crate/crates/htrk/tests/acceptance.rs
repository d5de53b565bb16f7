//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured numbers (run with `--nocapture` to see
//! them). Tolerances are pinned here, not configurable.

use htrk::ctc::{collapse, ctc_loss, Label, ProbMatrix};
use htrk::data::{font, generate, Charset, Split, SAMPLE_WORDS};
use htrk::decode::{beam_search, best_path, word_beam_search, PrefixTree};
use htrk::imaging::{
    column_run_score, deskew, deslant, rotate, shear_x, GrayImage,
};
use htrk::metrics::{corpus_eval, levenshtein};
use htrk::models::{shape_table, Model, ModelKind, ModelSpec};
use htrk::numerics::{finite_difference_grad, max_relative_error, Tensor};
use htrk::segment::{segment_page, BoundingBox, SegmentConfig};
use htrk::train::{history_csv, train_htr, Checkpoint, Optimizer, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::time::Instant;

fn random_matrix(rng: &mut ChaCha8Rng, t: usize, classes: usize) -> ProbMatrix {
    let logits = Tensor::from_vec(
        vec![t, classes],
        (0..t * classes).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    ProbMatrix::from_logits(&logits).unwrap()
}

/// Sum of path probabilities over all (C+1)^T paths collapsing to `label`.
fn brute_force_label_prob(m: &ProbMatrix, label: &Label) -> f64 {
    let t = m.t_steps();
    let classes = m.num_classes();
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        if collapse(&path, m.blank()) == *label {
            total += (0..t).map(|i| m.prob(i, path[i])).product::<f64>();
        }
        let mut i = 0;
        loop {
            if i == t {
                return total;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Total mass per labeling, exhaustively.
fn labeling_masses(m: &ProbMatrix) -> BTreeMap<Label, f64> {
    let t = m.t_steps();
    let classes = m.num_classes();
    let mut masses: BTreeMap<Label, f64> = BTreeMap::new();
    let mut path = vec![0usize; t];
    loop {
        let p: f64 = (0..t).map(|i| m.prob(i, path[i])).product();
        *masses.entry(collapse(&path, m.blank())).or_insert(0.0) += p;
        let mut i = 0;
        loop {
            if i == t {
                return masses;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn criterion_ctc_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7C);
    let mut checked = 0;
    while checked < 500 {
        let t = rng.gen_range(1..=6);
        let c = rng.gen_range(1..=4);
        let m = random_matrix(&mut rng, t, c + 1);
        let len = rng.gen_range(0..=3.min(t));
        let label = Label::new((0..len).map(|_| rng.gen_range(0..c)).collect());
        if label.len() + label.adjacent_repeats() > t {
            continue;
        }
        let expect = brute_force_label_prob(&m, &label);
        let got = (-ctc_loss(&m, &label).unwrap().loss).exp();
        assert!(
            (got - expect).abs() <= 1e-9,
            "instance {checked}: loss-derived {got} vs brute force {expect}"
        );
        checked += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE ctc_oracle_equivalence: PASS (500 instances within 1e-9 in {:.2}s)",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_ctc_gradient_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x96AD);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 100 {
        let t = rng.gen_range(2..=6);
        let c = rng.gen_range(1..=4);
        let logits = Tensor::from_vec(
            vec![t, c + 1],
            (0..t * (c + 1)).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let len = rng.gen_range(1..=3.min(t));
        let label = Label::new((0..len).map(|_| rng.gen_range(0..c)).collect());
        if label.len() + label.adjacent_repeats() > t {
            continue;
        }
        let label2 = label.clone();
        let fd = finite_difference_grad(
            move |inputs: &[Tensor]| {
                Ok(ctc_loss(&ProbMatrix::from_logits(&inputs[0])?, &label2)?.loss)
            },
            std::slice::from_ref(&logits),
            1e-5,
        )
        .unwrap();
        let analytic = ctc_loss(&ProbMatrix::from_logits(&logits).unwrap(), &label)
            .unwrap()
            .logit_grad;
        let err = max_relative_error(&analytic, &fd[0]);
        assert!(err <= 1e-6, "instance {checked}: relative error {err}");
        worst = worst.max(err);
        checked += 1;
    }
    println!(
        "ACCEPTANCE ctc_gradient_finite_difference: PASS (100 instances, worst relative error {worst:.2e})"
    );
}

#[test]
fn criterion_decoder_exactness() {
    // the constructed counterexample: best path "" (0.36) loses to "a" (0.64)
    let m = ProbMatrix::new(
        Tensor::from_vec(vec![2, 2], vec![0.4, 0.6, 0.4, 0.6]).unwrap(),
    )
    .unwrap();
    assert_eq!(best_path(&m), Label::empty());
    assert_eq!(beam_search(&m, 100).unwrap(), Label::new(vec![0]));
    let masses = labeling_masses(&m);
    assert!((masses[&Label::empty()] - 0.36).abs() <= 1e-12);
    assert!((masses[&Label::new(vec![0])] - 0.64).abs() <= 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(0xDEC0DE);
    for i in 0..200 {
        let t = rng.gen_range(1..=5);
        let c = rng.gen_range(1..=3);
        let m = random_matrix(&mut rng, t, c + 1);
        let width = (c + 1).pow(t as u32);
        let got = beam_search(&m, width).unwrap();
        let masses = labeling_masses(&m);
        let best_mass = masses.values().cloned().fold(0.0, f64::max);
        assert!(
            (masses[&got] - best_mass).abs() <= 1e-12,
            "matrix {i}: beam mass {} vs exhaustive best {best_mass}",
            masses[&got]
        );
    }
    println!(
        "ACCEPTANCE decoder_exactness: PASS (counterexample 0.36/0.64 reproduced; 200 exhaustive matches)"
    );
}

#[test]
fn criterion_word_beam_search() {
    let charset = Charset::htr_cyrillic();
    let words: Vec<String> = SAMPLE_WORDS[..10].iter().map(|s| s.to_string()).collect();
    let labels: Vec<Label> = words.iter().map(|w| charset.encode(w).unwrap()).collect();
    // single-word mode: no space separator in the trie
    let dict = PrefixTree::from_labels(&labels).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0x30BD);
    let classes = charset.len() + 1;
    let mut empties = 0;
    for _ in 0..1000 {
        let t = rng.gen_range(1..=10);
        let m = random_matrix(&mut rng, t, classes);
        let out = word_beam_search(&m, &dict, None, 25).unwrap();
        if out.is_empty() {
            empties += 1;
        } else {
            assert!(
                labels.contains(&out),
                "output {:?} not in the dictionary",
                charset.decode(&out)
            );
        }
    }

    // dict = all labelings of length <= T matches unconstrained search
    let mut agreements = 0;
    for _ in 0..50 {
        let t = rng.gen_range(1..=4);
        let m = random_matrix(&mut rng, t, 3);
        let mut all = Vec::new();
        for len in 1..=t {
            for bits in 0..(2usize.pow(len as u32)) {
                all.push(Label::new((0..len).map(|i| (bits >> i) & 1).collect()));
            }
        }
        let full_dict = PrefixTree::from_labels(&all).unwrap();
        let constrained = word_beam_search(&m, &full_dict, None, 4096).unwrap();
        let unconstrained = beam_search(&m, 4096).unwrap();
        assert_eq!(constrained, unconstrained);
        agreements += 1;
    }
    println!(
        "ACCEPTANCE word_beam_search: PASS (1000 outputs in dict or empty [{empties} empty]; {agreements} full-dict agreements)"
    );
}

#[test]
fn criterion_metrics_oracle() {
    // memoized textbook recursion, independent of the DP implementation
    fn recursive(a: &[char], b: &[char], i: usize, j: usize, memo: &mut [Vec<Option<usize>>]) -> usize {
        if i == 0 {
            return j;
        }
        if j == 0 {
            return i;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let sub = recursive(a, b, i - 1, j - 1, memo) + usize::from(a[i - 1] != b[j - 1]);
        let del = recursive(a, b, i - 1, j, memo) + 1;
        let ins = recursive(a, b, i, j - 1, memo) + 1;
        let v = sub.min(del).min(ins);
        memo[i][j] = Some(v);
        v
    }

    let alphabet = ['а', 'б', 'в'];
    let mut strings: Vec<String> = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..6 {
        let mut next = Vec::new();
        for s in &frontier {
            for c in alphabet {
                let mut t = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        strings.extend(next.iter().cloned());
        frontier = next;
    }
    assert_eq!(strings.len(), 1093); // sum of 3^l for l = 0..=6

    let mut pairs_checked = 0u64;
    for a in &strings {
        let ac: Vec<char> = a.chars().collect();
        for b in &strings {
            let bc: Vec<char> = b.chars().collect();
            let mut memo = vec![vec![None; bc.len() + 1]; ac.len() + 1];
            let expect = recursive(&ac, &bc, ac.len(), bc.len(), &mut memo);
            let got = levenshtein(a, b).distance();
            assert_eq!(got, expect, "{a:?} vs {b:?}");
            pairs_checked += 1;
        }
    }

    // paper formula checks on hand-built corpora
    let identity: Vec<(String, String)> = ["алматы", "тараз", "семей"]
        .iter()
        .map(|w| (w.to_string(), w.to_string()))
        .collect();
    let report = corpus_eval(&identity).unwrap();
    assert_eq!((report.cer, report.wer, report.war), (0.0, 0.0, 100.0));
    assert_eq!(report.car, 100.0);

    let one_sub = vec![("алмата".to_string(), "алматы".to_string())];
    let r = corpus_eval(&one_sub).unwrap();
    assert!((r.cer - 100.0 / 6.0).abs() <= 1e-9);
    assert_eq!(r.war, 0.0);

    println!(
        "ACCEPTANCE metrics_oracle: PASS ({pairs_checked} string pairs match the recursive oracle; CER/WER/WAR identities hold)"
    );
}

#[test]
fn criterion_architecture_shapes() {
    // SimpleHTR at charset 79 reproduces the 32x80 output matrix
    let spec = ModelSpec::htr(ModelKind::SimpleHtr, 79);
    let table = shape_table(&spec).unwrap();
    assert_eq!(table.first().unwrap().1, vec![32, 128, 1]);
    assert_eq!(table.last().unwrap().1, vec![32, 80]);
    let model = Model::build(spec, 1).unwrap();
    let mut img = GrayImage::new_white(128, 32);
    for x in 0..40 {
        img.set(x + 10, 16, 0.0);
    }
    let out = model.forward_htr(&img).unwrap();
    assert_eq!((out.t_steps(), out.num_classes()), (32, 80));

    // SimpleHTR five conv/pool stages: 128x32 input -> 32 steps of 256
    let htr = shape_table(&ModelSpec::htr(ModelKind::SimpleHtr, 43)).unwrap();
    let seq = htr.iter().find(|(n, _)| n == "columns_to_seq").unwrap();
    assert_eq!(seq.1, vec![32, 256]);

    // Bluche: documented layer-by-layer table
    let bluche = shape_table(&ModelSpec::htr(ModelKind::Bluche, 43)).unwrap();
    let expect_bluche: Vec<(&str, Vec<usize>)> = vec![
        ("input", vec![32, 128, 1]),
        ("e1", vec![32, 128, 8]),
        ("e2", vec![16, 32, 16]),
        ("g1", vec![16, 32, 16]),
        ("e3", vec![16, 32, 32]),
        ("g2", vec![16, 32, 32]),
        ("e4", vec![8, 8, 64]),
        ("e5", vec![8, 8, 128]),
        ("columns_to_seq", vec![8, 1024]),
        ("d1", vec![8, 256]),
        ("d2", vec![8, 128]),
        ("d3", vec![8, 256]),
        ("proj", vec![8, 44]),
    ];
    let got: Vec<(&str, Vec<usize>)> = bluche
        .iter()
        .map(|(n, s)| (n.as_str(), s.clone()))
        .collect();
    assert_eq!(got, expect_bluche);

    // Puigcerver: filters 16n, pools after the first three blocks only
    let puig = shape_table(&ModelSpec::htr(ModelKind::Puigcerver, 43)).unwrap();
    let convs: Vec<usize> = puig
        .iter()
        .filter(|(n, _)| n.len() == 2 && n.starts_with('c'))
        .map(|(_, s)| s[2])
        .collect();
    assert_eq!(convs, vec![16, 32, 48, 64, 80]);
    let seq = puig.iter().find(|(n, _)| n == "columns_to_seq").unwrap();
    assert_eq!(seq.1, vec![16, 320]);
    assert_eq!(puig.last().unwrap().1, vec![16, 44]);

    println!("ACCEPTANCE architecture_shapes: PASS (SimpleHTR 32x80; Bluche and Puigcerver tables hold)");
}

fn tiny_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        lr: 0.003,
        optimizer: Optimizer::Adam,
        early_stop_patience: epochs,
        plateau_patience: epochs,
        plateau_factor: 0.2,
        max_epochs: epochs,
        seed,
        clip_norm: Some(5.0),
        min_delta: 1e-6,
    }
}

#[test]
fn criterion_overfit_smoke() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let charset = Charset::htr_cyrillic();
    // 10 words x 5 samples = 50 images, all assigned to training
    let words: Vec<String> = SAMPLE_WORDS[..10].iter().map(|s| s.to_string()).collect();
    let mut manifest = generate(&words, 5, &charset, 11, dir.path()).unwrap();
    for entry in &mut manifest.entries {
        entry.split = Split::Train;
    }
    let mut model =
        Model::build(ModelSpec::htr(ModelKind::SimpleHtrSmall, charset.len()), 2).unwrap();
    let cfg = tiny_train_config(200, 11);
    let outcome = train_htr(&mut model, &manifest, dir.path(), &charset, &cfg).unwrap();
    // with no val split the loop validates on the training set itself
    let best_cer = outcome
        .history
        .iter()
        .map(|e| e.val_cer)
        .fold(f64::INFINITY, f64::min);
    let epochs_run = outcome.history.len();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        best_cer <= 5.0,
        "training-set CER only reached {best_cer:.2}% in {epochs_run} epochs"
    );
    assert!(elapsed < 600.0, "took {elapsed:.0}s, budget is 600s");
    println!(
        "ACCEPTANCE overfit_smoke: PASS (training CER {best_cer:.2}% after {epochs_run} epochs in {elapsed:.0}s)"
    );
}

#[test]
fn criterion_desk_scale_end_to_end() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let charset = Charset::htr_cyrillic();
    let words: Vec<String> = SAMPLE_WORDS.iter().map(|s| s.to_string()).collect();
    let manifest = generate(&words, 50, &charset, 7, dir.path()).unwrap();
    assert_eq!(manifest.entries.len(), 42 * 50);

    let mut model =
        Model::build(ModelSpec::htr(ModelKind::SimpleHtrSmall, charset.len()), 3).unwrap();
    let cfg = tiny_train_config(30, 7);
    let outcome = train_htr(&mut model, &manifest, dir.path(), &charset, &cfg).unwrap();
    let model = outcome.best.to_model().unwrap();

    let dict = PrefixTree::from_words(&words, &charset).unwrap();
    let eval = |decoder: &str| -> (f64, f64) {
        let mut pairs = Vec::new();
        for entry in manifest.of_split(Split::Test2) {
            let img = htrk::data::load_entry_image(dir.path(), entry).unwrap();
            let sized = htrk::imaging::resize_pad(&img, 64, 32);
            let probs = model.forward_htr(&sized).unwrap();
            let label = match decoder {
                "bestpath" => best_path(&probs),
                "beamsearch" => beam_search(&probs, 25).unwrap(),
                _ => word_beam_search(&probs, &dict, None, 25).unwrap(),
            };
            pairs.push((charset.decode(&label).unwrap(), entry.transcript.clone()));
        }
        let report = corpus_eval(&pairs).unwrap();
        (report.cer, report.war)
    };

    let (bp_cer, bp_war) = eval("bestpath");
    let (bs_cer, bs_war) = eval("beamsearch");
    let (wbs_cer, wbs_war) = eval("wordbeamsearch");
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "  TEST2 bestpath:       CER {bp_cer:6.2}%  WAR {bp_war:6.2}%\n  \
           TEST2 beamsearch:     CER {bs_cer:6.2}%  WAR {bs_war:6.2}%\n  \
           TEST2 wordbeamsearch: CER {wbs_cer:6.2}%  WAR {wbs_war:6.2}%"
    );
    assert!(
        wbs_war >= bs_war && bs_war >= 0.0,
        "WAR ordering violated: wbs {wbs_war} vs bs {bs_war}"
    );
    assert!(
        wbs_cer <= bs_cer,
        "CER ordering violated: wbs {wbs_cer} vs bs {bs_cer}"
    );
    println!(
        "ACCEPTANCE desk_scale_end_to_end: PASS (wordbeamsearch WAR {wbs_war:.2}% >= beamsearch WAR {bs_war:.2}%, CER {wbs_cer:.2}% <= {bs_cer:.2}%; {elapsed:.0}s)"
    );
}

#[test]
fn criterion_preprocessing_recovery() {
    // a synthetic text line, padded so rotations keep the ink in frame
    let line = font::render_word("алматы астана тараз", 24);
    let mut page = GrayImage::new_white(line.width() + 120, line.height() + 120);
    for y in 0..line.height() {
        for x in 0..line.width() {
            page.set(x + 60, y + 60, line.get(x, y));
        }
    }
    let mut worst: f64 = 0.0;
    let mut target = -15.0;
    while target <= 15.0 {
        let rotated = rotate(&page, target);
        let (_, estimate) = deskew(&rotated, 15.0).unwrap();
        let err = (estimate - target).abs();
        worst = worst.max(err);
        assert!(
            err <= 0.5 + 1e-9,
            "rotation {target} estimated as {estimate}"
        );
        target += 2.5;
    }

    let strokes = {
        let mut img = GrayImage::new_white(100, 48);
        for &col in &[20usize, 40, 60, 80] {
            for y in 10..38 {
                img.set(col, y, 0.0);
                img.set(col + 1, y, 0.0);
            }
        }
        img
    };
    let sheared = shear_x(&strokes, 0.5);
    let corrected = deslant(&sheared);
    let before = column_run_score(&sheared);
    let after = column_run_score(&corrected);
    assert!(
        after >= before,
        "deslant lowered the run score: {after} < {before}"
    );
    println!(
        "ACCEPTANCE preprocessing_recovery: PASS (deskew worst error {worst:.2} deg; deslant score {before:.0} -> {after:.0})"
    );
}

#[test]
fn criterion_segmentation_page() {
    // 3 lines x 3 words pasted at known offsets
    let words = [
        ["алматы", "тараз", "семей"],
        ["орал", "астана", "ақтау"],
        ["грузия", "литва", "дания"],
    ];
    let rendered: Vec<Vec<GrayImage>> = words
        .iter()
        .map(|row| row.iter().map(|w| font::render_word(w, 24)).collect())
        .collect();
    let mut page = GrayImage::new_white(640, 260);
    let mut truth: Vec<BoundingBox> = Vec::new();
    let mut y = 20;
    for row in &rendered {
        let mut x = 20;
        let mut row_h = 0;
        for img in row {
            for yy in 0..img.height() {
                for xx in 0..img.width() {
                    if img.get(xx, yy) < 1.0 {
                        page.set(x + xx, y + yy, img.get(xx, yy));
                    }
                }
            }
            truth.push(ink_bounds(img, x, y));
            x += img.width() + 30;
            row_h = row_h.max(img.height());
        }
        y += row_h + 25;
    }

    // the stroke font's letter gaps run ~6 px at this scale, so the word
    // gap threshold moves up accordingly (it is config-exposed for that)
    let cfg = SegmentConfig {
        min_gap_cols: 12,
        ..SegmentConfig::default()
    };
    let found = segment_page(&page, &cfg);
    assert_eq!(found.len(), 3, "expected 3 lines, found {}", found.len());
    let found_words: Vec<BoundingBox> = found.iter().flat_map(|(_, w)| w.clone()).collect();
    assert_eq!(found_words.len(), 9, "expected 9 words");
    let mut worst: f64 = 1.0;
    for gt in &truth {
        let best = found_words
            .iter()
            .map(|b| gt.iou(b))
            .fold(0.0, f64::max);
        worst = worst.min(best);
        assert!(best >= 0.8, "ground-truth box {gt:?} best IoU {best:.3}");
    }
    println!("ACCEPTANCE segmentation_page: PASS (9/9 words, worst IoU {worst:.3})");
}

fn ink_bounds(img: &GrayImage, off_x: usize, off_y: usize) -> BoundingBox {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.get(x, y) < 0.98 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    BoundingBox {
        x: off_x + x0,
        y: off_y + y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    }
}

#[test]
fn criterion_determinism() {
    let charset = Charset::htr_cyrillic();
    let words: Vec<String> = SAMPLE_WORDS[..8].iter().map(|s| s.to_string()).collect();
    let run = || -> (Vec<u8>, Vec<u8>, String, Vec<u8>) {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&words, 6, &charset, 99, dir.path()).unwrap();
        let mut model =
            Model::build(ModelSpec::htr(ModelKind::SimpleHtrSmall, charset.len()), 5).unwrap();
        let cfg = tiny_train_config(3, 99);
        let outcome = train_htr(&mut model, &manifest, dir.path(), &charset, &cfg).unwrap();
        let manifest_bytes = std::fs::read(dir.path().join("manifest.tsv")).unwrap();
        let image_bytes = std::fs::read(dir.path().join(&manifest.entries[0].path)).unwrap();
        (
            manifest_bytes,
            image_bytes,
            history_csv(&outcome.history),
            outcome.best.to_bytes(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0, "manifest bytes differ");
    assert_eq!(a.1, b.1, "image bytes differ");
    assert_eq!(a.2, b.2, "history CSV differs");
    assert_eq!(a.3, b.3, "checkpoint bytes differ");
    // checkpoints survive a save/load/save cycle byte-identically
    let reloaded = Checkpoint::from_bytes(&a.3).unwrap();
    assert_eq!(reloaded.to_bytes(), a.3);
    println!(
        "ACCEPTANCE determinism: PASS (manifests, images, history CSV and checkpoints byte-identical)"
    );
}
