use nucleiseg::atlas::{build_synthetic_atlas, precompute_prior_warps, AtlasBundle};
use nucleiseg::image::{Grid, LabelVolume, Volume3D};
use nucleiseg::labels::{LabelDictionary, THALAMIC_NUCLEI};
use nucleiseg::pipeline::{compute_volumes, segment, volume_lines, write_outputs, InputContrast, SegmentationRequest};
use nucleiseg::qc::{render_qc, render_qc_image, QcLayout};
use nucleiseg::registration::RegistrationParams;
use regex::Regex;

fn quick() -> RegistrationParams {
    RegistrationParams {
        levels: 2,
        affine_iterations: vec![30, 20],
        demons_iterations: vec![20, 10],
        ..Default::default()
    }
}

fn bundle() -> (AtlasBundle, Vec<Volume3D>) {
    let g = Grid::axis_aligned([48; 3], [1.0; 3], [0.0; 3]).unwrap();
    let syn = build_synthetic_atlas(3, &g, 8).unwrap();
    (precompute_prior_warps(&syn.bundle, &quick()).unwrap(), syn.t1)
}

#[test]
fn segment_invariants_and_thread_independence() {
    let (b, t1) = bundle();
    let input = &b.priors[1].image;
    let req = SegmentationRequest {
        registration: quick(),
        ..SegmentationRequest::new(input, InputContrast::Wmn, &b)
    };
    let run = |n: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(|| segment(&req).unwrap())
    };
    let r = run(1);
    let r3 = run(3);
    assert_eq!(r.labels_left, r3.labels_left);
    assert_eq!(r.labels_right, r3.labels_right);
    assert_eq!(r.provenance.body(), r3.provenance.body());
    assert_eq!(r.qc_png, r3.qc_png);

    let g = input.grid();
    let cb = r.crop_box;
    for lv in [&r.labels_left, &r.labels_right] {
        for (idx, &l) in lv.labels().iter().enumerate() {
            if l != 0 {
                let c = g.coords(idx).map(|v| v as i64);
                assert!(cb.contains(c), "label {l} at {c:?} outside {cb:?}");
            }
        }
    }
    let box_mm3 = cb.voxel_count() as f64 * g.voxel_volume();
    for vols in [&r.volumes_left, &r.volumes_right] {
        // aggregates double count their members, so sum fine labels only
        let fine: f64 = vols.iter().filter(|e| e.index != 1 && e.index != 33).map(|e| e.volume_mm3).sum();
        assert!(fine <= box_mm3);
    }
    let prov = r.provenance.render();
    assert!(prov.contains("fusion.alpha 0.1") && prov.contains("registration.demons_iterations 20,10"));

    // HIPS path runs and records its polynomial
    let req_t1 = SegmentationRequest {
        registration: quick(),
        ..SegmentationRequest::new(&t1[1], InputContrast::T1, &b)
    };
    let rt = segment(&req_t1).unwrap();
    assert!(rt.provenance.hips.is_some());
    assert!(rt.provenance.body().contains("hips_coefficients"));

    let dir = tempfile::tempdir().unwrap();
    let dbg = SegmentationRequest { debug: true, ..req.clone() };
    let written = write_outputs(&segment(&dbg).unwrap(), dir.path()).unwrap();
    assert_eq!(written.len(), 8 + 6);
    assert!(dir.path().join("debug/template_warp.nii.gz").exists());
}

#[test]
fn volume_lines_format() {
    let re = Regex::new(r"^\d+-[A-Za-z-]+ \d+\.\d{6}$").unwrap();
    let g = Grid::axis_aligned([50, 50, 10], [1.0; 3], [0.0; 3]).unwrap();
    let mut labels = vec![0u16; g.len()];
    // 6431 voxels of nuclei at 1 mm³ → whole thalamus 6431 mm³
    for (i, l) in labels.iter_mut().take(6431).enumerate() {
        *l = THALAMIC_NUCLEI[i % THALAMIC_NUCLEI.len()];
    }
    let lv = LabelVolume::new(g, labels, LabelDictionary::standard()).unwrap();
    let text = volume_lines(&compute_volumes(&lv));
    assert!(text.lines().all(|l| re.is_match(l)), "{text}");
    assert!(text.lines().any(|l| l == "1-THALAMUS 6431.000000"));
    assert_eq!(text.lines().count(), 22);
}

fn qc_inputs() -> (Volume3D, LabelVolume, Volume3D) {
    let g = Grid::axis_aligned([20, 16, 12], [1.0; 3], [0.0; 3]).unwrap();
    let v = Volume3D::from_fn(g.clone(), |i, j, k| ((i * 13 + j * 7 + k * 3) % 17) as f64);
    let t = Volume3D::from_fn(g.clone(), |i, j, k| if i + j > 14 && k > 3 { 1.0 } else { 0.0 });
    let labels: Vec<u16> = (0..g.len()).map(|idx| if g.coords(idx)[0] < 8 { 31 } else { 0 }).collect();
    (v, LabelVolume::new(g, labels, LabelDictionary::standard()).unwrap(), t)
}

#[test]
fn qc_is_a_three_by_three_montage() {
    let (v, l, t) = qc_inputs();
    let img = render_qc_image(&v, &l, &t).unwrap();
    let lay = img.layout;
    assert_eq!(lay, QcLayout::for_dims([20, 16, 12]));
    assert_eq!(lay.panels, [[20, 16], [20, 12], [16, 12]]);
    assert_eq!((lay.width(), lay.height()), (56, 48));
    let png = render_qc(&v, &l, &t).unwrap();
    assert_eq!(png, render_qc(&v, &l, &t).unwrap());
    let info = png::Decoder::new(std::io::Cursor::new(&png)).read_info().unwrap().info().clone();
    assert_eq!((info.width, info.height), (56, 48));
    assert_eq!(info.color_type, png::ColorType::Rgba);
    // overlay row differs from the plain row where labels are drawn
    let (ox, oy) = lay.origin(1, 0);
    assert_ne!(img.pixel(ox, oy), img.pixel(ox, oy - lay.row_height));
}

#[test]
fn qc_reads_only_the_displayed_slices() {
    let (v, l, t) = qc_inputs();
    let lay = QcLayout::for_dims(v.dims());
    // axial, coronal, sagittal fix z, y, x
    let fixed = [lay.slices[2], lay.slices[1], lay.slices[0]];
    let base = render_qc(&v, &l, &t).unwrap();
    let g = v.grid().clone();
    let off = (0..g.len())
        .find(|&idx| {
            let c = g.coords(idx);
            (0..3).all(|a| c[a] != fixed[a])
        })
        .unwrap();
    let mut data = v.data().to_vec();
    data[off] += 1000.0;
    let mut tdata = t.data().to_vec();
    tdata[off] += 1000.0;
    let mut ldata = l.labels().to_vec();
    ldata[off] = 2;
    let v2 = Volume3D::new(g.clone(), data).unwrap();
    let t2 = Volume3D::new(g.clone(), tdata).unwrap();
    let l2 = LabelVolume::new(g, ldata, LabelDictionary::standard()).unwrap();
    assert_eq!(render_qc(&v2, &l2, &t2).unwrap(), base);
}
