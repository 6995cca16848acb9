mod common;

use blurspace::imaging::{kernel_index_from_id, procedural_image, synthesize_dataset};
use blurspace::{
    convolve_blur, generate_motion_kernel, swap_dataset, transfer_blur, ConvKernel, Error, KernelSpace, PairedDataset,
    TransferJob,
};
use common::{tiny_arch, tiny_dataset};

fn untrained() -> KernelSpace {
    KernelSpace::init(tiny_arch(), 3).unwrap()
}

#[test]
fn transfer_matches_extract_then_apply() {
    let m = untrained();
    let data = tiny_dataset(2);
    let src = &data.pairs()[0];
    let targets: Vec<_> = (0..3).map(|i| procedural_image(200 + i, 3, 16)).collect();
    let job = TransferJob {
        source_sharp: &src.sharp,
        source_blurry: &src.blurry,
        targets: &targets,
        model: &m,
    };
    let before = m.extractor.evaluations();
    let out = transfer_blur(&job).unwrap();
    assert_eq!(m.extractor.evaluations() - before, 1, "kernel extracted once per job");
    let k = m.extract_kernel(&src.sharp, &src.blurry).unwrap();
    assert_eq!(out.len(), 3);
    for (t, o) in targets.iter().zip(&out) {
        assert_eq!(*o, m.apply_blur(t, &k).unwrap());
    }
    // the kernel code is spatial, so targets must match the source size
    let big = [procedural_image(7, 3, 24)];
    let job = TransferJob { targets: &big, ..job };
    assert!(matches!(transfer_blur(&job), Err(Error::Shape(_))));
}

#[test]
fn transfer_rejects_mismatched_inputs() {
    let m = untrained();
    let data = tiny_dataset(2);
    let src = &data.pairs()[0];
    let gray = [procedural_image(1, 1, 16)];
    let job = TransferJob {
        source_sharp: &src.sharp,
        source_blurry: &src.blurry,
        targets: &gray,
        model: &m,
    };
    assert!(matches!(transfer_blur(&job), Err(Error::Shape(_))));
    let odd = [procedural_image(1, 3, 18)];
    assert!(transfer_blur(&TransferJob { targets: &odd, ..job }).is_err());
    let other = procedural_image(1, 3, 24);
    let job = TransferJob {
        source_blurry: &other,
        targets: &[],
        ..job
    };
    assert!(transfer_blur(&job).is_err());
}

#[test]
fn swap_takes_every_blur_from_another_pair() {
    let m = untrained();
    let data = tiny_dataset(5);
    let swapped = swap_dataset(&data, &m, 17).unwrap();
    assert_eq!(swapped.len(), data.len());
    for p in swapped.iter() {
        let (own, donor) = p.id.split_once("_from_").unwrap();
        assert_ne!(own, donor);
        let src = data.iter().find(|q| q.id == own).unwrap();
        let don = data.iter().find(|q| q.id == donor).unwrap();
        assert_eq!(p.sharp, src.sharp);
        let k = m.extract_kernel(&don.sharp, &don.blurry).unwrap();
        assert_eq!(p.blurry, m.apply_blur(&src.sharp, &k).unwrap());
    }
    let mut donors: Vec<_> = swapped
        .iter()
        .map(|p| p.id.split_once("_from_").unwrap().1.to_string())
        .collect();
    donors.sort();
    let mut ids: Vec<_> = data.iter().map(|p| p.id.clone()).collect();
    ids.sort();
    assert_eq!(donors, ids, "each pair donates exactly once");
    assert_eq!(swap_dataset(&data, &m, 17).unwrap(), swapped);
}

#[test]
fn swap_of_an_empty_dataset_fails() {
    let empty = PairedDataset::new(vec![]).unwrap();
    assert!(matches!(swap_dataset(&empty, &untrained(), 0), Err(Error::Dataset(_))));
}

#[test]
fn synthesized_pairs_record_their_kernel() {
    let sharps: Vec<_> = (0..7).map(|i| procedural_image(i, 3, 16)).collect();
    let kernels: Vec<_> = (0..3).map(|i| generate_motion_kernel(i, 5, 24).unwrap()).collect();
    let data = synthesize_dataset(&sharps, &kernels, 4).unwrap();
    let mut counts = [0usize; 3];
    for p in data.iter() {
        let k = kernel_index_from_id(&p.id).unwrap();
        counts[k] += 1;
        assert_eq!(p.blurry, convolve_blur(&p.sharp, &kernels[k]).unwrap());
    }
    assert_eq!(counts, [3, 2, 2]);
    assert_eq!(synthesize_dataset(&sharps, &kernels, 4).unwrap(), data);
    assert!(synthesize_dataset(&sharps, &[], 4).is_err());
    let delta = [ConvKernel::delta(5).unwrap()];
    let identity = synthesize_dataset(&sharps, &delta, 0).unwrap();
    assert!(identity.iter().all(|p| p.sharp == p.blurry));
}
