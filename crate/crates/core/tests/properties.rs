use std::collections::HashMap;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use proptest::prelude::*;

use xvpr_core::evaluation::{recall_at_n, RECALL_NS};
use xvpr_core::event_frame::{denoise, distance_surface, fill, OccupancyMask};
use xvpr_core::event_io::{
    format_manifest, geo_distance, make_splits, parse_manifest_str, GeoTag, Modality, SampleRecord,
    Split, SplitFractions, MATCH_RADIUS_M,
};
use xvpr_core::fft::{circular_convolve, fft};
use xvpr_core::fusion::{cbp_raw, CountSketch, SketchPair};
use xvpr_core::retrieval::{search, Candidate, DbEntry, PlaceDatabase, QueryResult};

fn mask_strategy() -> impl Strategy<Value = OccupancyMask> {
    (1usize..24, 1usize..18)
        .prop_flat_map(|(w, h)| {
            (
                Just(w),
                Just(h),
                prop::collection::vec(prop::bool::weighted(0.15), w * h),
            )
        })
        .prop_map(|(w, h, cells)| OccupancyMask::from_cells(w, h, cells).unwrap())
}

fn brute_distance(m: &OccupancyMask, empty: f64) -> Vec<f64> {
    let on: Vec<(i64, i64)> = (0..m.height)
        .flat_map(|y| (0..m.width).map(move |x| (x, y)))
        .filter(|&(x, y)| m.get(x, y))
        .map(|(x, y)| (x as i64, y as i64))
        .collect();
    (0..m.height as i64)
        .flat_map(|y| (0..m.width as i64).map(move |x| (x, y)))
        .map(|(x, y)| {
            on.iter()
                .map(|(a, b)| (((a - x).pow(2) + (b - y).pow(2)) as f64).sqrt())
                .fold(None, |acc: Option<f64>, d| {
                    Some(acc.map_or(d, |a| a.min(d)))
                })
                .unwrap_or(empty)
        })
        .collect()
}

fn vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #[test]
    fn distance_surface_matches_brute_force(mask in mask_strategy()) {
        prop_assert_eq!(distance_surface(&mask, 99.0), brute_distance(&mask, 99.0));
    }

    #[test]
    fn fill_is_extensive_and_idempotent(mask in mask_strategy()) {
        let once = fill(&mask);
        prop_assert!(mask.is_subset_of(&once));
        prop_assert_eq!(fill(&once), once);
    }

    #[test]
    fn denoise_only_removes(mask in mask_strategy(), radius in 1usize..3, min in 0usize..5) {
        let kept = denoise(&mask, radius, min).unwrap();
        prop_assert!(kept.is_subset_of(&mask));
        if min == 0 {
            prop_assert_eq!(kept, mask);
        }
    }

    #[test]
    fn fft_round_trip(k in 0u32..9, seed in any::<u64>()) {
        let n = 1usize << k;
        let x: Vec<Complex64> = (0..n)
            .map(|i| {
                let v = (seed.wrapping_mul(i as u64 + 1) % 1000) as f64 / 500.0 - 1.0;
                Complex64::new(v, -v / 2.0)
            })
            .collect();
        let back = fft(&fft(&x, false).unwrap(), true).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn circular_convolution_commutes(k in 0u32..7, a in vector(64), b in vector(64)) {
        let n = 1usize << k;
        let (a, b) = (&a[..n], &b[..n]);
        let ab = circular_convolve(a, b).unwrap();
        let ba = circular_convolve(b, a).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn count_sketch_is_linear(x in vector(20), y in vector(20), a in -2.0f64..2.0, seed in any::<u64>()) {
        let cs = CountSketch::new(20, 8, seed).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let lhs = cs.apply(&mix).unwrap();
        let (sx, sy) = (cs.apply(&x).unwrap(), cs.apply(&y).unwrap());
        for j in 0..8 {
            prop_assert!((lhs[j] - (a * sx[j] + sy[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_swaps_with_sketch_roles(u in vector(12), v in vector(12), seed in any::<u64>()) {
        let sk = SketchPair::new(12, 16, seed).unwrap();
        let a = cbp_raw(&u, &v, &sk).unwrap();
        let b = cbp_raw(&v, &u, &sk.swapped()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn search_is_sorted_and_bounded(
        rows in prop::collection::vec(vector(4), 1..30),
        query in vector(4),
        top_n in 1usize..40,
    ) {
        let mut db = PlaceDatabase::new([0; 32]);
        db.entries = rows
            .into_iter()
            .enumerate()
            .map(|(i, retrieval)| DbEntry {
                id: format!("e{i:03}"),
                geotag: GeoTag::new(0.0, 0.0),
                retrieval,
                cls: vec![],
            })
            .collect();
        let hits = search(&db, &query, top_n).unwrap();
        prop_assert_eq!(hits.len(), top_n.min(db.len()));
        prop_assert!(hits.windows(2).all(|w| w[0].distance <= w[1].distance));
        let mut seen: Vec<usize> = hits.iter().map(|c| c.index).collect();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), hits.len());
    }

    #[test]
    fn recall_is_monotone_and_bounded(ranks in prop::collection::vec(prop::collection::vec(0usize..40, 0..35), 1..25)) {
        let place = |i: usize| GeoTag::new(0.0, i as f64 * 100.0 / 111_195.0);
        let db: HashMap<String, GeoTag> = (0..40).map(|i| (format!("d{i}"), place(i))).collect();
        let mut queries = HashMap::new();
        let results: Vec<QueryResult> = ranks
            .iter()
            .enumerate()
            .map(|(q, order)| {
                let id = format!("s{}:q{q}", q % 2);
                queries.insert(id.clone(), place(q % 40));
                QueryResult {
                    query_id: id,
                    candidates: order
                        .iter()
                        .map(|&i| Candidate { index: i, id: format!("d{i}"), distance: 0.0, score: None })
                        .collect(),
                }
            })
            .collect();
        let t = recall_at_n(&results, &db, &queries, &RECALL_NS, MATCH_RADIUS_M).unwrap();
        prop_assert!(t.is_monotone());
        prop_assert!(t.values.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn manifest_round_trips(rows in prop::collection::vec((-80.0f64..80.0, -179.0f64..179.0, any::<bool>()), 1..20)) {
        let records: Vec<SampleRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(lat, lon, ev))| SampleRecord {
                id: format!("s:{i}"),
                modality: if ev { Modality::Event } else { Modality::Image },
                path: PathBuf::from(format!("f/{i}.frm")),
                geotag: GeoTag::new(lat, lon),
                split: Split::Test,
            })
            .collect();
        let text = format_manifest(&records);
        prop_assert_eq!(parse_manifest_str(Path::new("m.csv"), &text).unwrap(), records);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splits_keep_the_buffer(steps in prop::collection::vec((2.0f64..60.0, -1.0f64..1.0), 30..200)) {
        let (mut x, mut y, mut heading) = (0.0f64, 0.0f64, 0.0f64);
        let records: Vec<SampleRecord> = steps
            .iter()
            .enumerate()
            .map(|(i, &(step, turn))| {
                heading += turn;
                x += step * heading.cos();
                y += step * heading.sin();
                SampleRecord {
                    id: format!("w:{i}"),
                    modality: Modality::Event,
                    path: PathBuf::from("x.frm"),
                    geotag: GeoTag::new(y / 111_195.0, x / 111_195.0),
                    split: Split::Unassigned,
                }
            })
            .collect();
        if let Ok(split) = make_splits(&records, SplitFractions::default()) {
            for (i, a) in split.iter().enumerate() {
                for b in &split[i + 1..] {
                    if a.split != b.split {
                        prop_assert!(geo_distance(&a.geotag, &b.geotag) >= MATCH_RADIUS_M);
                    }
                }
            }
        }
    }
}
