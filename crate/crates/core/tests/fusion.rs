use nucleiseg::fusion::{fuse, jlf_weights, AtlasVote, FusionMode, FusionParams};
use nucleiseg::image::{Grid, LabelVolume, Volume3D};
use nucleiseg::labels::LabelDictionary;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    target: Volume3D,
    votes: Vec<AtlasVote>,
}

fn random_instance(rng: &mut ChaCha8Rng, max_side: usize, max_atlases: usize, n_labels: u16) -> Instance {
    let dims = [0; 3].map(|_| rng.random_range(1..=max_side));
    let g = Grid::axis_aligned(dims, [1.0; 3], [0.0; 3]).unwrap();
    let n = g.len();
    let target = Volume3D::new(g.clone(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
    let k = rng.random_range(1..=max_atlases);
    let votes = (0..k)
        .map(|a| {
            let image = Volume3D::new(g.clone(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
            let labels: Vec<u16> = (0..n).map(|_| rng.random_range(0..n_labels)).collect();
            let d = LabelDictionary::for_indices(labels.iter().copied().filter(|l| *l != 0));
            AtlasVote::new(format!("a{a}"), image, LabelVolume::new(g.clone(), labels, d).unwrap()).unwrap()
        })
        .collect();
    Instance { target, votes }
}

#[test]
fn no_label_invention_and_order_independence() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..30 {
        let inst = random_instance(&mut rng, 4, 3, 6);
        let p = FusionParams { patch_radius: 1, search_radius: 1, ..Default::default() };
        let mut reversed: Vec<AtlasVote> = inst.votes.clone();
        reversed.reverse();
        for mode in [FusionMode::Jlf, FusionMode::Majority] {
            let p = FusionParams { mode, ..p.clone() };
            let out = fuse(&inst.target, &inst.votes, &p).unwrap();
            for (idx, l) in out.labels().iter().enumerate() {
                assert!(inst.votes.iter().any(|v| v.labels.labels()[idx] == *l));
            }
            assert_eq!(out.labels(), fuse(&inst.target, &reversed, &p).unwrap().labels());
        }
    }
}

proptest! {
    #[test]
    fn weights_sum_to_one(
        res in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 8), 1..5),
        beta in 0.5f64..3.0,
        alpha in 0.01f64..10.0,
    ) {
        let w = jlf_weights(&res, beta, alpha);
        prop_assert_eq!(w.len(), res.len());
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
