mod common;

use candle_core::{DType, IndexOp};
use unitrack::data::{generate_sequence, SynthConfig};
use unitrack::data::Image;
use unitrack::engine::{reference_for, track_sequence};
use unitrack::geometry::{BBox, LabelMap};
use unitrack::losses::InitFormat;
use unitrack::propagation::MemoryConfig;
use unitrack::uidm::{assign_ids, IdAssignment, Phase, Reference};
use unitrack::{Error, Model, ModelConfig};

fn small_config() -> ModelConfig {
    ModelConfig { capacity: 6, channels: 32, heads: 4, ..ModelConfig::default() }
}

fn sequence(seed: u64, length: usize) -> unitrack::data::SequenceSample {
    let cfg = SynthConfig {
        height: 64,
        width: 64,
        min_objects: 2,
        max_objects: 3,
        min_size: 12,
        max_size: 26,
        length,
        seed,
        ..SynthConfig::default()
    };
    generate_sequence(&cfg).unwrap()
}

fn rows(t: &candle_core::Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
}

#[test]
fn assign_ids_places_bank_vectors() {
    let model = Model::new(&small_config(), 0).unwrap();
    let bank = &model.uidm.bank;
    let table = rows(bank.table());
    let mut labels = LabelMap::zeros(3, 3, 2);
    labels.set(0, 0, 1);
    labels.set(2, 1, 2);
    let a = IdAssignment::new(vec![4, 2], 6).unwrap();
    let emb = rows(&assign_ids(&labels, bank, &a).unwrap());
    for (p, row) in emb.iter().enumerate() {
        let slot = match labels.data()[p] {
            0 => 0,
            1 => 4,
            _ => 2,
        };
        assert_eq!(row, &table[slot]);
        assert_eq!(table.iter().filter(|t| *t == row).count(), 1);
    }
    // Swapping the assignment equals swapping the labels.
    let b = IdAssignment::new(vec![2, 4], 6).unwrap();
    let swapped = labels.relabel(&[2, 1]);
    assert_eq!(emb, rows(&assign_ids(&swapped, bank, &b).unwrap()));
    let lone = IdAssignment::new(vec![4], 6).unwrap();
    assert!(matches!(assign_ids(&labels, bank, &lone), Err(Error::UnassignedLabel(2))));
}

#[test]
fn mask_reference_skips_the_refiner() {
    let model = Model::new(&small_config(), 1).unwrap();
    let seq = sequence(3, 1);
    let emb = model.encode(&seq.frames[0]).unwrap();
    let a = IdAssignment::sequential(seq.num_objects(), 6).unwrap();
    let id = model.uidm.unified_id_embedding(&emb, &Reference::Mask(seq.labels[0].clone()), &a).unwrap();
    let direct = assign_ids(&id.grid_labels, &model.uidm.bank, &a).unwrap();
    assert_eq!(rows(&id.emb), rows(&direct));
    assert_eq!(model.uidm.refiner.calls(), 0);
}

#[test]
fn zero_initialized_refiner_returns_the_coarse_embedding() {
    let model = Model::new(&small_config(), 2).unwrap();
    let seq = sequence(4, 1);
    let emb = model.encode(&seq.frames[0]).unwrap();
    for n in 1..=seq.num_objects() {
        let boxes = seq.boxes[0][..n].to_vec();
        let a = IdAssignment::sequential(n, 6).unwrap();
        let id = model.uidm.unified_id_embedding(&emb, &Reference::Boxes(boxes), &a).unwrap();
        assert_eq!(id.emb.dims(), &[emb.num_tokens(), 32]);
        assert_eq!(rows(&id.emb), rows(&id.coarse));
    }
    assert_eq!(model.uidm.refiner.calls(), seq.num_objects());
}

#[test]
fn reconstruction_is_training_only() {
    let model = Model::new(&small_config(), 3).unwrap();
    let emb = candle_core::Tensor::zeros((16, 32), DType::F32, &candle_core::Device::Cpu).unwrap();
    let decoder = model.uidm.decoder.as_ref().unwrap();
    assert_eq!(decoder.reconstruct_mask(&emb, Phase::Train).unwrap().dims(), &[16, 7]);
    assert!(matches!(decoder.reconstruct_mask(&emb, Phase::Eval), Err(Error::InvokedAtInference)));
    let a = IdAssignment::new(vec![5, 1], 6).unwrap();
    assert_eq!(model.uidm.reconstruct_active(&emb, &a, Phase::Train).unwrap().unwrap().dims(), &[16, 3]);
    let off = Model::new(&ModelConfig { mask_reconstruction: false, ..small_config() }, 3).unwrap();
    assert!(off.uidm.reconstruct_active(&emb, &a, Phase::Train).unwrap().is_none());
}

/// Image features outside every box reach the object path only through
/// the object-to-image cross-attention.
#[test]
fn object_tokens_see_other_regions_only_through_cross_attention() {
    let boxes = vec![Some(BBox::new(4.0, 4.0, 36.0, 30.0)), Some(BBox::new(80.0, 8.0, 120.0, 40.0))];
    let img = Image::filled(128, 128, [0.4, 0.5, 0.6]);
    let far: Vec<usize> = (5..8).flat_map(|r| (0..8).map(move |c| r * 8 + c)).collect();
    for dual in [true, false] {
        let cfg = ModelConfig { bidr_layers: 2, dual_cross_attention: dual, ..small_config() };
        let model = Model::new(&cfg, 4).unwrap();
        let a = IdAssignment::new(vec![2, 5], 6).unwrap();
        let emb = model.encode(&img).unwrap();
        let mut bumped = emb.clone();
        let mut f = rows(&emb.features);
        for &p in &far {
            for v in f[p].iter_mut() {
                *v += 1.0;
            }
        }
        bumped.features = candle_core::Tensor::new(f, &candle_core::Device::Cpu).unwrap().to_dtype(DType::F32).unwrap();
        let trace = |e| model.reference_entry(e, &Reference::Boxes(boxes.clone()), &a, 0).unwrap().2.unwrap();
        let (t0, t1) = (trace(&emb), trace(&bumped));
        assert_eq!(t0.image_to_object.len(), 2);
        assert_eq!(t0.object_ranges.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![2, 5]);
        let moved = rows(t0.object_tokens.as_ref().unwrap()) != rows(t1.object_tokens.as_ref().unwrap());
        assert_eq!(moved, dual);
        if dual {
            assert_eq!(t0.object_to_image.len(), 2);
            // Tokens of the first box attend to cells inside the second box.
            let second: Vec<usize> = (0..3).flat_map(|r| (5..8).map(move |c| r * 8 + c)).collect();
            let range = t0.object_ranges[0].1.clone();
            let w = t0.object_to_image[0].i((.., range, ..)).unwrap();
            let w = w.to_dtype(DType::F64).unwrap().to_vec3::<f64>().unwrap();
            let mass: f64 = w.iter().flatten().map(|row| second.iter().map(|&p| row[p]).sum::<f64>()).sum();
            assert!(mass > 0.0);
        } else {
            assert!(t0.object_to_image.is_empty());
        }
    }
}

fn outputs_equal_after_relabel(a: &[unitrack::FrameOutput], b: &[unitrack::FrameOutput], perm: &[u8]) {
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.labels.relabel(perm), y.labels);
        for (obj, &target) in perm.iter().enumerate() {
            let t = target as usize - 1;
            assert_eq!(x.boxes[obj], y.boxes[t]);
            assert_eq!(x.present[obj], y.present[t]);
            assert_eq!(x.consistency[obj], y.consistency[t]);
        }
    }
}

#[test]
fn relabeling_objects_with_permuted_slots_gives_identical_outputs() {
    let model = Model::new(&small_config(), 5).unwrap();
    let seq = sequence(7, 4);
    let n = seq.num_objects();
    let slots: Vec<usize> = [4, 1, 6][..n].to_vec();
    // perm[k] is the new label of object k + 1: a cyclic shift.
    let perm: Vec<u8> = (0..n).map(|k| ((k + 1) % n + 1) as u8).collect();
    let mut permuted_slots = vec![0; n];
    for k in 0..n {
        permuted_slots[perm[k] as usize - 1] = slots[k];
    }
    let mem = MemoryConfig::default();
    for init in [InitFormat::Mask, InitFormat::Box] {
        let reference = reference_for(&seq, init);
        let moved = match &reference {
            Reference::Mask(l) => Reference::Mask(l.relabel(&perm)),
            Reference::Boxes(b) => {
                let mut out = vec![None; n];
                for k in 0..n {
                    out[perm[k] as usize - 1] = b[k];
                }
                Reference::Boxes(out)
            }
        };
        let a = track_sequence(&model, &seq.frames, &reference, Some(IdAssignment::new(slots.clone(), 6).unwrap()), &mem).unwrap();
        let b = track_sequence(&model, &seq.frames, &moved, Some(IdAssignment::new(permuted_slots.clone(), 6).unwrap()), &mem).unwrap();
        outputs_equal_after_relabel(&a, &b, &perm);
    }
}

#[test]
fn mask_initialized_tracking_never_calls_the_refiner() {
    let model = Model::new(&small_config(), 6).unwrap();
    let seq = sequence(8, 5);
    let mem = MemoryConfig::default();
    track_sequence(&model, &seq.frames, &reference_for(&seq, InitFormat::Mask), None, &mem).unwrap();
    assert_eq!(model.uidm.refiner.calls(), 0);
    track_sequence(&model, &seq.frames, &reference_for(&seq, InitFormat::Box), None, &mem).unwrap();
    assert_eq!(model.uidm.refiner.calls(), 1);
}
