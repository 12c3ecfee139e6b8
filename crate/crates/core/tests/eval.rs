use nucleiseg::atlas::{build_synthetic_atlas, precompute_prior_warps};
use nucleiseg::eval::{bilateral, dice, dice_report, dice_with, loocv, loocv_folds, DiceOptions};
use nucleiseg::fusion::FusionParams;
use nucleiseg::image::{Grid, LabelVolume};
use nucleiseg::labels::LabelDictionary;
use nucleiseg::pipeline::{segment, InputContrast, SegmentationRequest};
use nucleiseg::registration::RegistrationParams;
use proptest::prelude::*;

fn volume(labels: Vec<u16>) -> LabelVolume {
    let g = Grid::axis_aligned([labels.len(), 1, 1], [1.0; 3], [0.0; 3]).unwrap();
    let d = LabelDictionary::for_indices(labels.iter().copied());
    LabelVolume::new(g, labels, d).unwrap()
}

#[test]
fn empty_convention_flag() {
    let a = volume(vec![0, 0, 1]);
    assert_eq!(dice(&a, &a, 9).unwrap(), 1.0);
    let opts = DiceOptions { empty_is_one: false, ..Default::default() };
    assert_eq!(dice_with(&a, &a, 9, &opts).unwrap(), 0.0);
    assert_eq!(dice(&a, &volume(vec![0, 0, 0]), 1).unwrap(), 0.0);
}

#[test]
fn identical_maps_report_ones() {
    let a = volume(vec![2, 2, 8, 29, 30, 0]);
    let r = dice_report(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
    assert!(r.structures.iter().all(|s| s.mean == 1.0 && s.std == 0.0 && s.values.len() == 1));
    // the aggregates are reported through their constituents
    assert!(r.get(2).is_some() && r.get(30).is_some());
    let tsv = r.to_tsv();
    assert!(tsv.starts_with("structure\tn\tmean\tstd\n"));
}

fn label_strategy() -> impl Strategy<Value = (Vec<u16>, Vec<u16>)> {
    (1usize..64).prop_flat_map(|n| (prop::collection::vec(0u16..5, n), prop::collection::vec(0u16..5, n)))
}

proptest! {
    #[test]
    fn dice_is_symmetric((a, b) in label_strategy(), l in 0u16..5) {
        let (a, b) = (volume(a), volume(b));
        prop_assert_eq!(dice(&a, &b, l).unwrap(), dice(&b, &a, l).unwrap());
    }

    #[test]
    fn dice_survives_relabeling((a, b) in label_strategy(), l in 1u16..5, shift in 1u16..4) {
        // bijection on 1..=4 (cyclic shift), background fixed
        let f = |x: u16| if x == 0 { 0 } else { (x - 1 + shift) % 4 + 1 };
        let before = dice(&volume(a.clone()), &volume(b.clone()), l).unwrap();
        let fa = volume(a.into_iter().map(f).collect());
        let fb = volume(b.into_iter().map(f).collect());
        prop_assert_eq!(before, dice(&fa, &fb, f(l)).unwrap());
    }
}

fn quick_params() -> RegistrationParams {
    RegistrationParams {
        levels: 2,
        affine_iterations: vec![30, 20],
        demons_iterations: vec![20, 10],
        ..Default::default()
    }
}

#[test]
fn loocv_equals_scripted_folds() {
    let g = Grid::axis_aligned([48; 3], [1.0; 3], [0.0; 3]).unwrap();
    let reg = quick_params();
    let fusion = FusionParams { patch_radius: 1, search_radius: 1, ..Default::default() };
    let syn = build_synthetic_atlas(3, &g, 5).unwrap();
    let bundle = precompute_prior_warps(&syn.bundle, &reg).unwrap();

    let folds = loocv_folds(&bundle).unwrap();
    assert_eq!(folds.len(), 3);
    let mut auto = Vec::new();
    let mut truth = Vec::new();
    for ((held, reduced), prior) in folds.iter().zip(&bundle.priors) {
        assert_eq!(held, &prior.id);
        assert_eq!(reduced.priors.len(), 2);
        assert!(reduced.priors.iter().all(|p| &p.id != held));
        let req = SegmentationRequest {
            fusion: fusion.clone(),
            registration: reg.clone(),
            ..SegmentationRequest::new(&prior.image, InputContrast::Wmn, reduced)
        };
        let r = segment(&req).unwrap();
        auto.push(bilateral(&r.labels_left, &r.labels_right).unwrap());
        truth.push(bilateral(&prior.labels_left, &prior.labels_right).unwrap());
    }
    let scripted = dice_report(&auto, &truth).unwrap();
    let report = loocv(&bundle, &reg, &fusion).unwrap();
    assert_eq!(report.structures, scripted.structures);
    assert!(report.structures.iter().all(|s| s.values.len() == 3));
    assert!(!report.notes.is_empty());
}
