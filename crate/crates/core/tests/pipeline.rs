use std::collections::VecDeque;

use rppg_core::beats::{detect_ecg_rpeaks, PeakSource, PeakTrain};
use rppg_core::enhance::{dominant_frequency, Enhancement};
use rppg_core::extract::{extract_pulse, Method};
use rppg_core::pipeline::{run_pipeline, RunConfig, SynthSource};
use rppg_core::roi::{extract_traces, slic_segment, BBox, SuperpixelMap, DEFAULT_COMPACTNESS};
use rppg_core::synth::{ecg_from_r_times, gen_pixels, EcgSpec, FaceLayout, Recording, SynthSpec};

fn face() -> FaceLayout {
    FaceLayout::face(60, 60, BBox { x: 5, y: 5, w: 50, h: 50 })
}

fn four_connected(map: &SuperpixelMap, label: u32) -> bool {
    let (w, h) = (map.bbox.w as usize, map.bbox.h as usize);
    let cells: Vec<usize> = (0..w * h).filter(|i| map.labels[*i] == label).collect();
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::from([cells[0]]);
    seen[cells[0]] = true;
    let mut reached = 0;
    while let Some(i) = queue.pop_front() {
        reached += 1;
        let (x, y) = (i % w, i / w);
        let mut next = Vec::new();
        if x > 0 {
            next.push(i - 1);
        }
        if x + 1 < w {
            next.push(i + 1);
        }
        if y > 0 {
            next.push(i - w);
        }
        if y + 1 < h {
            next.push(i + w);
        }
        for j in next {
            if !seen[j] && map.labels[j] == label {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    reached == cells.len()
}

#[test]
fn superpixel_traces_conserve_the_box() {
    let spec = SynthSpec { noise_sigma: 3.0, duration_s: 2.0, seed: 3, ..SynthSpec::default() };
    let stack = Recording::new(spec).unwrap().frames(&face(), 0, 60).unwrap();
    for k in [10, 20] {
        let map = slic_segment(&stack.frames[0], stack.bbox, k, DEFAULT_COMPACTNESS).unwrap();
        assert!((1..=2 * k).contains(&map.k_actual), "k={k}: {} regions", map.k_actual);
        assert_eq!(map.labels.len(), stack.bbox.area());
        for l in 0..map.k_actual as u32 {
            assert!(four_connected(&map, l), "k={k}: region {l} split");
        }

        let set = extract_traces(&stack, &map).unwrap();
        for (f, frame) in stack.frames.iter().enumerate() {
            for c in 0..3 {
                let mut total = 0u64;
                for y in stack.bbox.y..stack.bbox.y + stack.bbox.h {
                    for x in stack.bbox.x..stack.bbox.x + stack.bbox.w {
                        total += frame.get_pixel(x, y)[c] as u64;
                    }
                }
                let summed: f64 = set.regions.iter().map(|r| r.pixels as f64 * r.rgb[c][f]).sum();
                assert!((summed - total as f64).abs() < 1e-6, "frame {f} channel {c}");
            }
        }
        for r in &set.regions {
            for m in r.moments.as_ref().unwrap() {
                assert!(m.eigvals.iter().all(|v| *v >= -1e-9));
                assert!(m.eigvals[0] >= m.eigvals[1] && m.eigvals[1] >= m.eigvals[2]);
            }
        }
    }
}

#[test]
fn ssr_follows_pixel_pulse() {
    for hr in [54.0, 72.0, 96.0] {
        let spec = SynthSpec { hr_bpm: hr, noise_sigma: 1.0, seed: 8, ..SynthSpec::default() };
        let (stack, _) = gen_pixels(&spec, 400).unwrap();
        let map = slic_segment(&stack.frames[0], stack.bbox, 1, DEFAULT_COMPACTNESS).unwrap();
        let set = extract_traces(&stack, &map).unwrap();
        let pulse = extract_pulse(&set, &set.regions[0], Method::Ssr).unwrap();
        let f = dominant_frequency(&pulse.series).unwrap().hz;
        assert!((f * 60.0 - hr).abs() < 1.5, "hr {hr}: got {:.2} bpm", f * 60.0);
    }
}

#[test]
fn ecg_beats_at_record_edges_are_found() {
    let spec = EcgSpec { snr_db: Some(20.0), seed: 2, ..EcgSpec::default() };
    let r: Vec<f64> = (0..11).map(|i| 0.04 + i as f64 * 0.9936).collect();
    let end = r.last().unwrap() + 0.03;
    let rec = ecg_from_r_times(&r, &spec, 0.0, end);
    let found = detect_ecg_rpeaks(&rec.series().unwrap()).unwrap();
    assert_eq!(found.len(), r.len());
    for (a, b) in found.times_s.iter().zip(&r) {
        assert!((a - b).abs() <= 0.005, "{a} vs {b}");
    }
}

fn trace_run(workers: usize) -> String {
    let spec = SynthSpec { noise_sigma: 2.0, duration_s: 120.0, seed: 21, ..SynthSpec::default() };
    let src = SynthSource::new(Recording::new(spec).unwrap(), 6, 20.0, None, Some(&EcgSpec::default()))
        .unwrap()
        .with_conditions(&["BSL", "BSL", "BSL", "DS", "DS", "DS"]);
    let cfg = RunConfig {
        methods: vec![Method::Chrom, Method::Pos, Method::PcaInverted],
        enhancements: vec![Enhancement::none(), Enhancement::glfod(2.0), Enhancement::lp(3)],
        workers,
        ..RunConfig::default()
    };
    let out = run_pipeline(&cfg, &src).unwrap();
    serde_json::to_string(&(&out.report, &out.segments)).unwrap()
}

#[test]
fn worker_count_does_not_change_results() {
    let one = trace_run(1);
    assert_eq!(one, trace_run(1));
    assert_eq!(one, trace_run(3));
    assert_eq!(one, trace_run(0));
}

#[test]
fn drifting_segment_is_gated_out() {
    let spec = SynthSpec { duration_s: 100.0, seed: 31, ..SynthSpec::default() };
    let src = SynthSource::new(Recording::new(spec).unwrap(), 5, 20.0, None, Some(&EcgSpec::default()))
        .unwrap()
        .corrupt(2, 0.0, (0.3, 0.1));
    // PCA has no band prefilter, so the slow drift reaches the gate.
    let cfg = RunConfig { methods: vec![Method::Pca], ..RunConfig::default() };
    let out = run_pipeline(&cfg, &src).unwrap();
    let e = &out.report.evaluations[0];
    assert_eq!(e.rejected_segments, vec![2]);
    assert_eq!(e.pairs.len(), 4);
    assert!(e.pairs.iter().all(|p| (p.pr_est - 60.0).abs() <= 1.0));
}

#[test]
fn peak_train_rejects_unsorted_times() {
    assert!(PeakTrain::from_times(vec![1.0, 0.5], PeakSource::Ecg).is_err());
    assert!(PeakTrain::from_times(vec![1.0, 1.0], PeakSource::Ecg).is_err());
}
