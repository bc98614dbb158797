use super::*;
use crate::seed;

fn meta(ids: &[(usize, u8)]) -> Vec<ImageMeta> {
    ids.iter().map(|&(identity, camera)| ImageMeta { identity, camera }).collect()
}

fn dm(q: usize, g: usize, values: Vec<f64>, qm: &[(usize, u8)], gm: &[(usize, u8)]) -> DistanceMatrix {
    DistanceMatrix::from_values(q, g, values, meta(qm), meta(gm), 1).unwrap()
}

#[test]
fn distances_basic() {
    let q = Tensor::new(&[2, 2], vec![1.0, 0.0, 3.0, 4.0]).unwrap();
    let g = Tensor::new(&[2, 2], vec![0.0, 1.0, 3.0, 4.0]).unwrap();
    let m = distance_matrix(&q, &g, &meta(&[(0, 0), (1, 0)]), &meta(&[(0, 1), (1, 1)])).unwrap();
    assert!((m.get(0, 0) - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(m.get(1, 1), 0.0);
    assert_eq!(m.ops_per_pair, 2);
    let bad = Tensor::zeros(&[2, 3]);
    assert!(distance_matrix(&q, &bad, &meta(&[(0, 0), (1, 0)]), &meta(&[(0, 1), (1, 1)])).is_err());
}

#[test]
fn distances_match_loop() {
    let mut rng = seed::rng(4);
    let q = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let g = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let m = distance_matrix(&q, &g, &meta(&[(0, 0); 3]), &meta(&[(0, 1); 4])).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..5 {
                let d = q.row(i)[k] - g.row(j)[k];
                s += d * d;
            }
            assert!((m.get(i, j) - s.sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn rank_list_ties_and_order() {
    let m = dm(2, 3, vec![3.0, 1.0, 2.0, 5.0, 5.0, 5.0], &[(0, 0), (0, 0)], &[(0, 1); 3]);
    assert_eq!(rank_list(&m, 0), vec![1, 2, 0]);
    assert_eq!(rank_list(&m, 1), vec![0, 1, 2]);
}

#[test]
fn hand_computed_cmc_and_ap() {
    // correct match (id 0, other camera) at rank 3 of 4 valid items
    let m = dm(1, 4, vec![0.1, 0.2, 0.3, 0.4], &[(0, 0)], &[(1, 1), (2, 1), (0, 1), (3, 1)]);
    let s = cmc_map(&m, 4).unwrap();
    assert_eq!(s.cmc, vec![0.0, 0.0, 1.0, 1.0]);
    assert!((s.map - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn same_camera_same_identity_is_skipped() {
    // the nearest item is the same person on the same camera: filtered out
    let m = dm(1, 3, vec![0.0, 0.5, 0.6], &[(0, 0)], &[(0, 0), (0, 1), (1, 1)]);
    let s = cmc_map(&m, 2).unwrap();
    assert_eq!(s.cmc, vec![1.0, 1.0]);
    assert_eq!(s.map, 1.0);
}

#[test]
fn queries_without_match_are_excluded_and_counted() {
    let m = dm(2, 2, vec![0.1, 0.2, 0.1, 0.2], &[(0, 0), (5, 0)], &[(0, 1), (1, 1)]);
    let s = cmc_map(&m, 1).unwrap();
    assert_eq!((s.n_scored, s.n_excluded), (1, 1));
    assert_eq!(s.cmc, vec![1.0]);
    let none = dm(1, 1, vec![0.1], &[(5, 0)], &[(0, 1)]);
    assert!(cmc_map(&none, 1).is_err());
}

#[test]
fn perfect_retrieval() {
    let mut rng = seed::rng(9);
    let q = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let qm: Vec<(usize, u8)> = (0..5).map(|i| (i, 0)).collect();
    let gm: Vec<(usize, u8)> = (0..5).map(|i| (i, 1)).collect();
    let m = distance_matrix(&q, &q, &meta(&qm), &meta(&gm)).unwrap();
    let s = cmc_map(&m, 5).unwrap();
    assert_eq!(s.cmc[0], 1.0);
    assert_eq!(s.map, 1.0);
}

#[test]
fn settings_parse_and_print() {
    for s in ["standard", "fast:0", "fast:7", "concat:2", "voting", "voting:plurality"] {
        assert_eq!(s.parse::<Setting>().unwrap().to_string(), s);
    }
    assert_eq!("voting:borda".parse::<Setting>().unwrap(), Setting::Voting(VoteRule::Borda));
    for s in ["fast", "fast:x", "standard:1", "concat", "best", ""] {
        assert!(s.parse::<Setting>().is_err(), "{s}");
    }
}

#[test]
fn descriptor_selection() {
    let mut rng = seed::rng(1);
    let set = DescriptorSet {
        groups: (0..8).map(|_| Tensor::randn(&[3, 16], 1.0, &mut rng)).collect(),
        stripes: Vec::new(),
    };
    assert_eq!(select_descriptor(&set, Setting::Standard).unwrap().dim(1), 128);
    assert_eq!(select_descriptor(&set, Setting::Fast(3)).unwrap(), set.groups[3]);
    let c2 = select_descriptor(&set, Setting::Concat(2)).unwrap();
    assert_eq!(c2.dim(1), 32);
    assert_eq!(c2.columns(16, 16), set.groups[1]);
    assert!(select_descriptor(&set, Setting::Fast(8)).is_err());
    assert!(select_descriptor(&set, Setting::Concat(0)).is_err());
    assert!(select_descriptor(&set, Setting::Concat(9)).is_err());
}

#[test]
fn voting_unanimous_follows_common_order() {
    let v = vec![0.4, 0.1, 0.3, 0.2];
    let a = dm(1, 4, v.clone(), &[(0, 0)], &[(0, 1); 4]);
    let fallback = dm(1, 4, vec![0.0, 0.0, 0.0, 0.0], &[(0, 0)], &[(0, 1); 4]);
    let r = voting_rank(&[a.clone(), a.clone(), a], &fallback, VoteRule::Borda).unwrap();
    assert_eq!(r[0], vec![1, 3, 2, 0]);
}

#[test]
fn voting_reversed_pair_uses_fallback() {
    let a = dm(1, 2, vec![0.1, 0.2], &[(0, 0)], &[(0, 1); 2]);
    let b = dm(1, 2, vec![0.2, 0.1], &[(0, 0)], &[(0, 1); 2]);
    let fb = dm(1, 2, vec![0.9, 0.3], &[(0, 0)], &[(0, 1); 2]);
    assert_eq!(voting_rank(&[a.clone(), b.clone()], &fb, VoteRule::Borda).unwrap()[0], vec![1, 0]);
    let fb_equal = dm(1, 2, vec![0.5, 0.5], &[(0, 0)], &[(0, 1); 2]);
    assert_eq!(voting_rank(&[a, b], &fb_equal, VoteRule::Borda).unwrap()[0], vec![0, 1]);
}

#[test]
fn voting_hand_built_borda_table() {
    // ranks per group over items 0..4:
    //   g0: 2,0,1,3   g1: 0,2,1,3   g2: 3,0,2,1
    // positions: item0 = 1+0+1 = 2, item1 = 2+2+3 = 7, item2 = 0+1+2 = 3, item3 = 3+3+0 = 6
    let g0 = dm(1, 4, vec![0.2, 0.3, 0.1, 0.4], &[(0, 0)], &[(0, 1); 4]);
    let g1 = dm(1, 4, vec![0.1, 0.3, 0.2, 0.4], &[(0, 0)], &[(0, 1); 4]);
    let g2 = dm(1, 4, vec![0.2, 0.4, 0.3, 0.1], &[(0, 0)], &[(0, 1); 4]);
    let fb = dm(1, 4, vec![0.0; 4], &[(0, 0)], &[(0, 1); 4]);
    assert_eq!(voting_rank(&[g0, g1, g2], &fb, VoteRule::Borda).unwrap()[0], vec![0, 2, 3, 1]);
}

#[test]
fn plurality_counts_first_valid_items() {
    let gm = [(0, 0), (0, 1), (1, 1)];
    let g0 = dm(1, 3, vec![0.0, 0.2, 0.1], &[(0, 0)], &gm);
    let g1 = dm(1, 3, vec![0.0, 0.1, 0.2], &[(0, 0)], &gm);
    let g2 = dm(1, 3, vec![0.0, 0.3, 0.1], &[(0, 0)], &gm);
    let fb = dm(1, 3, vec![0.0, 0.5, 0.4], &[(0, 0)], &gm);
    // item 0 is invalid and never voted for; item 2 wins two votes
    let r = voting_rank(&[g0, g1, g2], &fb, VoteRule::Plurality).unwrap();
    assert_eq!(r[0], vec![2, 1, 0]);
}

#[test]
fn voting_rejects_bad_input() {
    let a = dm(1, 2, vec![0.1, 0.2], &[(0, 0)], &[(0, 1); 2]);
    let b = dm(1, 3, vec![0.1, 0.2, 0.3], &[(0, 0)], &[(0, 1); 3]);
    assert!(voting_rank(&[a.clone()], &a, VoteRule::Borda).is_err());
    assert!(voting_rank(&[a.clone(), b], &a, VoteRule::Borda).is_err());
}

#[test]
fn distance_matrix_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let m = dm(2, 3, vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0], &[(0, 0), (1, 0)], &[(0, 1); 3]);
    write_distance_matrix(&path, &m).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 + 6 * 8);
    let (q, g, v) = read_distance_matrix(&path).unwrap();
    assert_eq!((q, g, v.as_slice()), (2, 3, m.values()));
    std::fs::write(&path, [0u8; 12]).unwrap();
    assert!(read_distance_matrix(&path).is_err());
}
