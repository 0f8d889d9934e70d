use std::collections::HashSet;
use std::sync::{Arc, Barrier, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siterec_core::catalog::FeatureDistribution;
use siterec_core::classifier::{deserialize_model, predict, serialize_model, sha256, RegionModel, TrainingMeta};
use siterec_core::geo::{tile_area, BoundingBox, GeoPoint, Tiling};
use siterec_registry::{serve, ErrorCode, FetchOutcome, RegistryClient, RegistryStore};

fn tiling() -> Tiling {
    let origin = GeoPoint::new(48.85, 2.29).unwrap();
    let bbox = BoundingBox::from_corner(origin, 2000.0, 1000.0).unwrap();
    tile_area(&bbox, 1000.0, 200.0).unwrap()
}

fn random_model(region: &str, seed: u64) -> RegionModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (12, 30);
    let sites = (0..k).map(|i| format!("site{i:03}")).collect();
    let w = (0..k * d).map(|_| rng.random_range(-4.0f32..4.0)).collect();
    let b = (0..k).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let meta = TrainingMeta {
        seed,
        epochs: 10,
        lr: 0.2,
        train_size: 960,
    };
    RegionModel::new(region, sites, d, w, b, 0, meta).unwrap()
}

fn start() -> (siterec_registry::ServerHandle, Tiling) {
    let t = tiling();
    let handle = serve("127.0.0.1:0", Arc::new(RegistryStore::new(t.clone()))).unwrap();
    (handle, t)
}

#[test]
fn publish_lookup_fetch_predict_is_bit_exact() {
    let (server, t) = start();
    let region = &t.regions()[0];
    let model = random_model(&region.region_id, 1);
    let mut client = RegistryClient::connect(server.local_addr()).unwrap();

    let manifest = client.publish(&region.region_id, serialize_model(&model)).unwrap();
    assert_eq!(manifest.version, 1);
    let looked_up = client.lookup(region.center.lat, region.center.lon, None).unwrap();
    assert_eq!(looked_up, manifest);

    let FetchOutcome::Modified { manifest: fetched_manifest, blob } = client.fetch(&region.region_id, None, None).unwrap() else {
        panic!("expected a blob")
    };
    assert_eq!(fetched_manifest, manifest);
    assert_eq!(hex::encode(sha256(&blob)), manifest.content_hash);
    assert_eq!(blob.len() as u64, manifest.byte_size);
    let remote = deserialize_model(&blob).unwrap();
    assert_eq!(remote.version(), 1);
    assert_eq!(remote.weights(), model.weights());
    assert_eq!(remote.biases(), model.biases());

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let f = FeatureDistribution::from_weights((0..30).map(|_| rng.random::<f64>()).collect()).unwrap();
        let a = predict(&model, &f).unwrap();
        let b = predict(&remote, &f).unwrap();
        let bits = |p: &[f64]| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.probs()), bits(b.probs()));
        assert_eq!(a.top1(), b.top1());
    }
    server.shutdown();
}

#[test]
fn conditional_fetch_transfers_no_payload() {
    let (server, t) = start();
    let region = t.regions()[1].region_id.clone();
    let mut client = RegistryClient::connect(server.local_addr()).unwrap();
    let m1 = client.publish(&region, serialize_model(&random_model(&region, 2))).unwrap();

    let before = client.payload_bytes_received;
    let outcome = client.fetch(&region, None, Some(&m1.content_hash)).unwrap();
    assert_eq!(outcome, FetchOutcome::NotModified { manifest: m1.clone() });
    assert_eq!(client.payload_bytes_received, before);

    let m2 = client.publish(&region, serialize_model(&random_model(&region, 3))).unwrap();
    assert_eq!(m2.version, 2);
    match client.fetch(&region, None, Some(&m1.content_hash)).unwrap() {
        FetchOutcome::Modified { manifest, blob } => {
            assert_eq!(manifest, m2);
            assert_eq!(hex::encode(sha256(&blob)), m2.content_hash);
        }
        other => panic!("stale hash should yield a blob, got {other:?}"),
    }
    let old = client.fetch(&region, Some(1), None).unwrap();
    assert_eq!(old.manifest(), &m1);
    server.shutdown();
}

#[test]
fn errors_travel_as_codes() {
    let (server, t) = start();
    let (r0, r1) = (t.regions()[0].region_id.clone(), t.regions()[1].region_id.clone());
    let mut client = RegistryClient::connect(server.local_addr()).unwrap();
    let code = |r: Result<(), siterec_registry::client::ClientError>| r.unwrap_err().code();

    assert_eq!(code(client.lookup(48.85, 2.30, None).map(|_| ())), Some(ErrorCode::NoModelPublished));
    assert_eq!(code(client.lookup(10.0, 10.0, None).map(|_| ())), Some(ErrorCode::OutOfCoverage));
    assert_eq!(code(client.lookup(95.0, 10.0, None).map(|_| ())), Some(ErrorCode::BadRequest));
    assert_eq!(
        code(client.publish(&r0, serialize_model(&random_model(&r1, 1))).map(|_| ())),
        Some(ErrorCode::RegionMismatch)
    );
    assert_eq!(code(client.publish(&r0, vec![1, 2, 3]).map(|_| ())), Some(ErrorCode::CorruptModel));
    assert_eq!(
        code(client.publish("r999_c999", serialize_model(&random_model("r999_c999", 1))).map(|_| ())),
        Some(ErrorCode::RegionUnknown)
    );
    client.publish(&r0, serialize_model(&random_model(&r0, 1))).unwrap();
    assert_eq!(code(client.fetch(&r0, Some(7), None).map(|_| ())), Some(ErrorCode::VersionUnknown));
    assert_eq!(code(client.fetch("nope", None, None).map(|_| ())), Some(ErrorCode::RegionUnknown));
    // the connection is still usable after errors
    assert_eq!(client.fetch(&r0, None, None).unwrap().manifest().version, 1);
    server.shutdown();
}

#[test]
fn lookup_keeps_current_region_in_overlap() {
    let (server, t) = start();
    let mut client = RegistryClient::connect(server.local_addr()).unwrap();
    for r in t.regions() {
        client.publish(&r.region_id, serialize_model(&random_model(&r.region_id, 5))).unwrap();
    }
    let (a, b) = (&t.regions()[0], &t.regions()[1]);
    // a point inside both regions but nearer b's center
    let dist = siterec_core::geo::haversine_distance;
    let p = (0..400)
        .map(|i| GeoPoint::new(a.center.lat, a.center.lon + (b.center.lon - a.center.lon) * i as f64 / 400.0).unwrap())
        .find(|p| a.contains(*p) && b.contains(*p) && dist(*p, b.center) < dist(*p, a.center))
        .expect("tiles overlap");
    assert_eq!(client.lookup(p.lat, p.lon, None).unwrap().region_id, b.region_id);
    assert_eq!(client.lookup(p.lat, p.lon, Some(&a.region_id)).unwrap().region_id, a.region_id);
    server.shutdown();
}

#[test]
fn concurrent_fetches_never_see_torn_blobs() {
    let (server, t) = start();
    let region = t.regions()[0].region_id.clone();
    let addr = server.local_addr();
    let published: Arc<Mutex<HashSet<String>>> = Arc::default();
    {
        let mut c = RegistryClient::connect(addr).unwrap();
        let m = c.publish(&region, serialize_model(&random_model(&region, 100))).unwrap();
        published.lock().unwrap().insert(m.content_hash);
    }
    let barrier = Arc::new(Barrier::new(11));
    let mut threads = Vec::new();
    for f in 0..10 {
        let (region, barrier) = (region.clone(), barrier.clone());
        threads.push(std::thread::spawn(move || {
            let mut c = RegistryClient::connect(addr).unwrap();
            barrier.wait();
            (0..10)
                .map(|_| match c.fetch(&region, None, None).unwrap() {
                    FetchOutcome::Modified { manifest, blob } => {
                        assert_eq!(hex::encode(sha256(&blob)), manifest.content_hash, "fetcher {f}");
                        deserialize_model(&blob).unwrap();
                        manifest.content_hash
                    }
                    FetchOutcome::NotModified { .. } => unreachable!("no if_hash sent"),
                })
                .collect::<Vec<_>>()
        }));
    }
    let publisher = {
        let (region, barrier, published) = (region.clone(), barrier.clone(), published.clone());
        std::thread::spawn(move || {
            let mut c = RegistryClient::connect(addr).unwrap();
            barrier.wait();
            for i in 0..10 {
                let m = c.publish(&region, serialize_model(&random_model(&region, 200 + i))).unwrap();
                published.lock().unwrap().insert(m.content_hash);
            }
        })
    };
    let seen: Vec<String> = threads.into_iter().flat_map(|h| h.join().unwrap()).collect();
    publisher.join().unwrap();
    assert_eq!(seen.len(), 100);
    let published = published.lock().unwrap();
    assert!(seen.iter().all(|h| published.contains(h)));
    let mut c = RegistryClient::connect(addr).unwrap();
    assert_eq!(c.lookup(t.regions()[0].center.lat, t.regions()[0].center.lon, None).unwrap().version, 11);
    server.shutdown();
}
