use std::collections::BTreeMap;
use std::f64::consts::PI;

use tacmae_core::data::dataset::{sha256_hex, split_sizes};
use tacmae_core::data::{
    apply_partial_contact, build_dataset, classify_contact, default_classes, generate_texture, measure_contact,
    DatasetConfig, Manifest, Split,
};

/// Power spectrum by a direct separable DFT, `|X(u, v)|²` in row-major order.
fn power_spectrum(px: &[f64], n: usize) -> Vec<f64> {
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    let mut rows = vec![(0.0, 0.0); n * n];
    for y in 0..n {
        for u in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for x in 0..n {
                let a = -2.0 * PI * (u * x) as f64 / n as f64;
                let v = px[y * n + x] - mean;
                re += v * a.cos();
                im += v * a.sin();
            }
            rows[y * n + u] = (re, im);
        }
    }
    let mut out = vec![0.0; n * n];
    for v in 0..n {
        for u in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..n {
                let a = -2.0 * PI * (v * y) as f64 / n as f64;
                let (r, i) = rows[y * n + u];
                re += r * a.cos() - i * a.sin();
                im += r * a.sin() + i * a.cos();
            }
            out[v * n + u] = re * re + im * im;
        }
    }
    out
}

/// Log mean energy in radial bands and in four orientation sectors.
fn band_features(px: &[f64], n: usize) -> Vec<f64> {
    let spec = power_spectrum(px, n);
    let radial = 8;
    let mut sums = vec![0.0; radial + 4];
    let mut counts = vec![0usize; radial + 4];
    for v in 0..n {
        for u in 0..n {
            let fu = if u <= n / 2 { u as f64 } else { u as f64 - n as f64 };
            let fv = if v <= n / 2 { v as f64 } else { v as f64 - n as f64 };
            let r = (fu * fu + fv * fv).sqrt();
            if r == 0.0 || r > n as f64 / 2.0 {
                continue;
            }
            let band = ((r / (n as f64 / 2.0)) * radial as f64).min(radial as f64 - 1.0) as usize;
            let angle = fv.atan2(fu).rem_euclid(PI);
            let sector = radial + ((angle / PI * 4.0) as usize).min(3);
            for k in [band, sector] {
                sums[k] += spec[v * n + u];
                counts[k] += 1;
            }
        }
    }
    sums.iter().zip(&counts).map(|(s, &c)| (s / c.max(1) as f64 + 1e-12).ln()).collect()
}

/// Standardized logistic regression by full-batch gradient descent.
fn fit_logistic(x: &[Vec<f64>], y: &[f64]) -> impl Fn(&[f64]) -> bool {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9))
        .collect();
    let z: Vec<Vec<f64>> = x.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect()).collect();
    let mut w = vec![0.0; d + 1];
    for _ in 0..2000 {
        let mut grad = vec![0.0; d + 1];
        for (row, &t) in z.iter().zip(y) {
            let s = w[d] + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let e = 1.0 / (1.0 + (-s).exp()) - t;
            for j in 0..d {
                grad[j] += e * row[j] / n;
            }
            grad[d] += e / n;
        }
        for j in 0..=d {
            w[j] -= 0.5 * (grad[j] + if j < d { 1e-3 * w[j] } else { 0.0 });
        }
    }
    move |f: &[f64]| w[d] + (0..d).map(|j| (f[j] - mean[j]) / std[j] * w[j]).sum::<f64>() > 0.0
}

#[test]
fn spectral_bands_separate_every_class_pair() {
    let classes = default_classes(10).unwrap();
    let feats: Vec<Vec<Vec<f64>>> = classes
        .iter()
        .map(|c| (0..100).map(|i| band_features(&generate_texture(c, 32, 1000 + i).pixels, 32)).collect())
        .collect();
    for a in 0..10 {
        for b in a + 1..10 {
            // Two folds: fit on even indices, score on odd, and the reverse.
            let mut correct = 0;
            for fold in 0..2 {
                let pick = |parity: usize| {
                    let mut x = Vec::new();
                    let mut y = Vec::new();
                    for (cls, t) in [(a, 0.0), (b, 1.0)] {
                        for (i, f) in feats[cls].iter().enumerate() {
                            if i % 2 == parity {
                                x.push(f.clone());
                                y.push(t);
                            }
                        }
                    }
                    (x, y)
                };
                let (xtr, ytr) = pick(fold);
                let (xte, yte) = pick(1 - fold);
                let predict = fit_logistic(&xtr, &ytr);
                correct += xte.iter().zip(&yte).filter(|(f, &t)| predict(f) == (t == 1.0)).count();
            }
            let acc = correct as f64 / 200.0;
            assert!(acc > 0.9, "classes {a} and {b}: {acc}");
        }
    }
}

#[test]
fn partial_contact_measures_close_to_target() {
    let classes = default_classes(10).unwrap();
    for (i, class) in classes.iter().enumerate() {
        for (j, target) in [0.15, 0.3, 0.38].into_iter().enumerate() {
            let img = generate_texture(class, 32, 50 + i as u64);
            let (out, footprint) = apply_partial_contact(&img, target, (i * 3 + j) as u64).unwrap();
            assert!((footprint.fraction - target).abs() <= 0.01);
            assert!((measure_contact(&out) - target).abs() <= 0.03, "class {i}, target {target}");
        }
    }
}

#[test]
fn manifest_is_self_consistent_and_regenerates_identically() {
    let cfg = DatasetConfig { classes: 3, per_class: 10, size: 32, seed: 5 };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = build_dataset(&cfg, d1.path()).unwrap();
    build_dataset(&cfg, d2.path()).unwrap();

    let text = std::fs::read_to_string(d1.path().join("manifest.jsonl")).unwrap();
    assert_eq!(text, std::fs::read_to_string(d2.path().join("manifest.jsonl")).unwrap());
    assert_eq!(Manifest::load(&d1.path().join("manifest.jsonl")).unwrap().to_jsonl(), text);
    assert_eq!(m.to_jsonl(), text);
    assert_eq!(m.rows.len(), 3 * 2 * 10);

    let mut strata: BTreeMap<_, (usize, usize, usize)> = BTreeMap::new();
    for row in &m.rows {
        let bytes = std::fs::read(d1.path().join(&row.path)).unwrap();
        assert_eq!(bytes, std::fs::read(d2.path().join(&row.path)).unwrap());
        assert_eq!(sha256_hex(&bytes), row.sha256);
        assert_eq!(row.path, format!("images/{}_{}_{}.pgm", row.class_id, row.contact_kind, &row.id[row.id.len() - 5..]));
        assert_eq!(classify_contact(row.contact_fraction), Some(row.contact_kind));
        let measured = measure_contact(&m.load_image(row).unwrap());
        assert!((measured - row.contact_fraction).abs() < 5e-7);
        let e = strata.entry((row.class_id, row.contact_kind)).or_default();
        match row.split {
            Split::Train => e.0 += 1,
            Split::Val => e.1 += 1,
            Split::Test => e.2 += 1,
        }
    }
    assert_eq!(strata.len(), 6);
    assert!(strata.values().all(|&s| s == split_sizes(10)));
    m.verify_hashes().unwrap();
}
