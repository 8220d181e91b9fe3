use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use ndarray::Array2;

use rsfr_core::image::ImageSlice;
use rsfr_core::semantics::{
    DenseMask, MaskRequest, MaskResponse, MaskServiceClient, MaskServiceConfig, RleMask, Segmenter, SemanticsError,
    WireMask,
};

type Handler = dyn Fn(MaskRequest) -> (u16, String) + Send + Sync;

/// Local mock service answering every POST on its own thread.
struct Mock {
    url: String,
    max_seen: Arc<AtomicUsize>,
}

fn serve(handler: Arc<Handler>, delay: Duration) -> Mock {
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
    let url = format!("http://{}/segment", server.server_addr().to_ip().unwrap());
    let active = Arc::new(AtomicUsize::new(0));
    let max_seen = Arc::new(AtomicUsize::new(0));
    let m = max_seen.clone();
    std::thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let (handler, active, max_seen) = (handler.clone(), active.clone(), m.clone());
            std::thread::spawn(move || {
                let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                max_seen.fetch_max(now, Ordering::SeqCst);
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).unwrap();
                let parsed: MaskRequest = serde_json::from_str(&body).unwrap();
                std::thread::sleep(delay);
                let (status, text) = handler(parsed);
                active.fetch_sub(1, Ordering::SeqCst);
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                let _ = req.respond(tiny_http::Response::from_string(text).with_status_code(status).with_header(header));
            });
        }
    });
    Mock { url, max_seen }
}

fn image(h: usize, w: usize) -> ImageSlice {
    let mut s = ImageSlice::new(Array2::from_shape_fn((h, w), |(r, c)| ((r * w + c) as f64) / (h * w) as f64));
    s.norm = Some(rsfr_core::NormalizationRecord { vmin: 0.0, vmax: 1.0 });
    s
}

fn square(h: usize, w: usize, r0: usize, r1: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(r, c)| (r0..r1).contains(&r) && (r0..r1).contains(&c))
}

fn json(r: &MaskResponse) -> String {
    serde_json::to_string(r).unwrap()
}

#[test]
fn image_reaches_the_service_and_masks_pass_through() {
    let handler: Arc<Handler> = Arc::new(|req: MaskRequest| {
        let img = req.decode().unwrap();
        assert_eq!(img.dim(), (8, 8));
        assert!((img[[7, 7]] - 63.0 / 64.0).abs() < 1e-6);
        let masks = vec![
            WireMask {
                score: 0.5,
                rle: Some(RleMask::encode(&square(8, 8, 0, 2))),
                dense: None,
            },
            WireMask {
                score: 0.9,
                rle: Some(RleMask::encode(&square(8, 8, 2, 6))),
                dense: None,
            },
            WireMask {
                score: 0.7,
                rle: None,
                dense: Some(DenseMask::encode(&square(8, 8, 6, 8).mapv(|b| if b { 1.0 } else { 0.0 }))),
            },
            WireMask {
                score: 0.1,
                rle: Some(RleMask::encode(&square(8, 8, 0, 8))),
                dense: None,
            },
        ];
        (200, json(&MaskResponse { masks }))
    });
    let mock = serve(handler, Duration::ZERO);
    let seg = Segmenter::FoundationModel(MaskServiceClient::new(MaskServiceConfig::new(mock.url)));
    let prior = seg.segment(&image(8, 8)).unwrap();
    assert_eq!(prior.scores, [0.9, 0.7, 0.5]);
    assert_eq!(prior.channel(0), square(8, 8, 2, 6).mapv(|b| if b { 1.0 } else { 0.0 }));
    assert_eq!(prior.channel(1), square(8, 8, 6, 8).mapv(|b| if b { 1.0 } else { 0.0 }));
    assert!(prior.is_valid());
}

#[test]
fn two_proposals_leave_the_third_channel_empty_and_values_are_clamped() {
    let handler: Arc<Handler> = Arc::new(|_req| {
        let over = Array2::from_elem((4, 4), 1.7);
        let under = Array2::from_elem((4, 4), -0.3);
        let masks = vec![
            WireMask {
                score: 0.8,
                rle: None,
                dense: Some(DenseMask::encode(&over)),
            },
            WireMask {
                score: 0.6,
                rle: None,
                dense: Some(DenseMask::encode(&under)),
            },
        ];
        (200, json(&MaskResponse { masks }))
    });
    let mock = serve(handler, Duration::ZERO);
    let client = MaskServiceClient::new(MaskServiceConfig::new(mock.url));
    let prior = client.segment(&image(8, 8)).unwrap();
    assert_eq!(prior.spatial_dim(), (8, 8));
    assert!(prior.channel(0).iter().all(|&v| v == 1.0));
    assert!(prior.channel(1).iter().all(|&v| v == 0.0));
    assert!(prior.channel(2).iter().all(|&v| v == 0.0));
    assert_eq!(prior.scores, [0.8, 0.6, 0.0]);
}

#[test]
fn concurrent_requests_are_bounded() {
    let handler: Arc<Handler> = Arc::new(|_req| (200, json(&MaskResponse { masks: vec![] })));
    let mock = serve(handler, Duration::from_millis(60));
    let config = MaskServiceConfig {
        max_in_flight: 2,
        ..MaskServiceConfig::new(mock.url)
    };
    let client = MaskServiceClient::new(config);
    let xs: Vec<ImageSlice> = (0..8).map(|_| image(4, 4)).collect();
    let out = client.segment_batch(&xs);
    assert_eq!(out.len(), 8);
    assert!(out.iter().all(|r| r.is_ok()));
    let peak = mock.max_seen.load(Ordering::SeqCst);
    assert_eq!(peak, 2, "peak concurrency");
}

#[test]
fn unreachable_or_failing_service_is_unavailable() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = MaskServiceClient::new(MaskServiceConfig::new(format!("http://{addr}/segment")));
    assert!(matches!(client.segment(&image(4, 4)), Err(SemanticsError::Unavailable { .. })));

    let handler: Arc<Handler> = Arc::new(|_req| (503, "busy".into()));
    let mock = serve(handler, Duration::ZERO);
    let client = MaskServiceClient::new(MaskServiceConfig::new(mock.url));
    assert!(matches!(client.segment(&image(4, 4)), Err(SemanticsError::Unavailable { .. })));
}

#[test]
fn malformed_responses_are_rejected() {
    let handler: Arc<Handler> = Arc::new(|_req| (200, r#"{"masks":[{"score":0.5}]}"#.into()));
    let mock = serve(handler, Duration::ZERO);
    let client = MaskServiceClient::new(MaskServiceConfig::new(mock.url));
    assert!(matches!(client.segment(&image(4, 4)), Err(SemanticsError::MalformedResponse(_))));
}
