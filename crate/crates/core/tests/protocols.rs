use ubna_core::adapt::{online_clock_check, ubna_adapt, AdaptationProtocol, AdaptationSchedule, OfflineSampler};
use ubna_core::datagen::{DatasetSpec, DomainDataset, ImageSource, InMemorySource};
use ubna_core::model::{Architecture, Model};
use ubna_core::modelio::{encode, Checkpoint};
use ubna_core::Error;

fn target() -> DomainDataset {
    DomainDataset::new(DatasetSpec { height: 8, width: 8, ..DatasetSpec::default_target(4, 30) }).unwrap()
}

#[test]
fn online_stream_in_offline_order_is_bit_identical() {
    let data = target();
    let model = Model::init(Architecture::default_segmenter(3, 4), 11).unwrap();
    let schedule = AdaptationSchedule::ubna().with_steps(12);
    let (b, seed) = (6, 77);

    let mut offline_model = model.clone();
    ubna_adapt(&mut offline_model, &data, &schedule, &AdaptationProtocol::Offline { seed, batch_size: b }, None)
        .unwrap();

    // Lay the offline batches out as consecutive frames.
    let mut sampler = OfflineSampler::new(seed, data.len(), b).unwrap();
    let frames: Vec<_> =
        (0..schedule.num_steps).flat_map(|_| sampler.next_batch()).map(|i| data.image(i).unwrap()).collect();
    let stream = InMemorySource::new(frames, None).unwrap();
    let mut online_model = model.clone();
    let protocol = AdaptationProtocol::Online { batch_size: b, frame_period: 0.04 };
    ubna_adapt(&mut online_model, &stream, &schedule, &protocol, None).unwrap();

    assert_eq!(encode(&Checkpoint::new(offline_model)).unwrap(), encode(&Checkpoint::new(online_model)).unwrap());
}

#[test]
fn online_clock_is_exact() {
    let p = AdaptationProtocol::Online { batch_size: 6, frame_period: 0.5 };
    for k in 0..=50 {
        assert_eq!(online_clock_check(&p, k, 6 * k).unwrap(), k as f64 * 0.5 * 6.0);
    }
    assert!(matches!(online_clock_check(&p, 3, 17), Err(Error::ProtocolViolation(_))));
}

#[test]
fn shuffled_stream_is_rejected_online() {
    let data = target();
    let frames: Vec<_> = (0..data.len()).map(|i| data.image(i).unwrap()).collect();
    let stream = InMemorySource::new(frames, None).unwrap().shuffled();
    let mut model = Model::init(Architecture::default_segmenter(3, 4), 0).unwrap();
    let before = model.clone();
    let protocol = AdaptationProtocol::Online { batch_size: 6, frame_period: 0.1 };
    let err = ubna_adapt(&mut model, &stream, &AdaptationSchedule::ubna().with_steps(2), &protocol, None).unwrap_err();
    assert!(matches!(err, Error::ProtocolViolation(_)));
    assert_eq!(model, before);
}

#[test]
fn few_shot_equals_repeated_offline_batch() {
    let data = target();
    let ids = vec![3, 8, 1, 20, 5, 9];
    let model = Model::init(Architecture::default_segmenter(3, 4), 2).unwrap();
    let schedule = AdaptationSchedule::ubna().with_steps(10);

    let mut few = model.clone();
    ubna_adapt(&mut few, &data, &schedule, &AdaptationProtocol::FewShot { batch_ids: ids.clone() }, None).unwrap();

    let frames: Vec<_> = (0..10).flat_map(|_| ids.iter().map(|&i| data.image(i).unwrap())).collect();
    let stream = InMemorySource::new(frames, None).unwrap();
    let mut online = model.clone();
    let protocol = AdaptationProtocol::Online { batch_size: 6, frame_period: 1.0 };
    ubna_adapt(&mut online, &stream, &schedule, &protocol, None).unwrap();
    assert_eq!(few, online);
}
