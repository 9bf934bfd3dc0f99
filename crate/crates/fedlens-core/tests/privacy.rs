//! Wire-level privacy check: a full experiment's protocol traffic is tapped
//! on the server side of every connection, and no frame may carry a raw data
//! row. Statistics legitimately expose single values (extrema are order
//! statistics), so the check is for complete rows.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use fedlens_core::data::{FeatureGen, PoisonSpec, SyntheticSpec};
use fedlens_core::federation::{run_client, Federation, FederationError};
use fedlens_core::model::{FeatureKind, Schema};
use fedlens_core::pipeline::{materialize_data, run_experiment_over, DataSource, ExperimentConfig};
use fedlens_core::transport::sim::{sim_pair, LinkModel};
use fedlens_core::transport::{frame, Connection, Envelope, TransportError};

struct RecordingConn {
    inner: Box<dyn Connection>,
    frames: Arc<Mutex<Vec<Vec<u8>>>>,
}

impl Connection for RecordingConn {
    fn send(&mut self, envelope: &Envelope) -> Result<(), TransportError> {
        self.frames.lock().unwrap().push(frame(envelope)?);
        self.inner.send(envelope)
    }

    fn try_recv(&mut self, timeout: Duration) -> Result<Option<Envelope>, TransportError> {
        let received = self.inner.try_recv(timeout)?;
        if let Some(env) = &received {
            self.frames.lock().unwrap().push(frame(env)?);
        }
        Ok(received)
    }
}

fn tiny_config(seed: u64) -> ExperimentConfig {
    let schema = Schema::new(
        vec![
            ("a".into(), FeatureKind::Numeric),
            ("b".into(), FeatureKind::Numeric),
            ("y".into(), FeatureKind::Numeric),
        ],
        "y",
    )
    .unwrap();
    let mut cfg = ExperimentConfig::default_synthetic(seed);
    cfg.data = DataSource::Synthetic {
        spec: SyntheticSpec {
            schema,
            generators: vec![FeatureGen::Normal { mean: 0.0, std: 1.0 }; 2],
            target_weights: vec![0.7, -0.4],
            target_bias: 0.3,
            target_noise: 0.05,
            rows_per_client: vec![30, 25, 35],
            holdout_rows: 40,
            client_shift_std: 0.2,
            poisoned: vec![PoisonSpec { client_id: 2, label_noise: 1.0, skew_inflation: 2.0 }],
        },
    };
    cfg.hidden_layers = vec![4];
    cfg.selection.min_samples = 5;
    cfg.selection.skew_low = -10.0;
    cfg.selection.skew_high = 10.0;
    cfg.train.rounds = 2;
    cfg.train.local_epochs = 1;
    cfg.secure_aggregation = true;
    cfg
}

#[test]
fn no_protocol_frame_carries_a_raw_row() {
    let cfg = tiny_config(99).resolve().unwrap();
    let (datasets, holdout) = materialize_data(&cfg).unwrap();
    let shared = Arc::new(datasets);
    let frames = Arc::new(Mutex::new(Vec::new()));

    let mut server_conns: Vec<Box<dyn Connection>> = Vec::new();
    let mut handles = Vec::new();
    for _ in 0..shared.len() {
        let (server_end, client_end) = sim_pair(LinkModel::ideal(), LinkModel::ideal());
        server_conns.push(Box::new(RecordingConn {
            inner: Box::new(server_end),
            frames: frames.clone(),
        }));
        let data = shared.clone();
        handles.push(std::thread::spawn(move || {
            let _ = run_client(client_end, "intra", move |id| {
                data.iter()
                    .find(|d| d.client_id == id)
                    .cloned()
                    .ok_or_else(|| FederationError::Protocol("missing partition".into()))
            });
        }));
    }
    let mut federation =
        Federation::form(server_conns, cfg.seed, Duration::from_secs(10)).unwrap();
    let report = run_experiment_over(&mut federation, &holdout, &cfg).unwrap();
    federation.shutdown();
    for h in handles {
        let _ = h.join();
    }
    assert_eq!(report.curves.fa_assisted_raw.len(), 2);

    let frames = frames.lock().unwrap();
    assert!(frames.len() > 20, "tap saw only {} frames", frames.len());

    // A row would surface as its comma-joined shortest-decimal rendering
    // (that is how any JSON array or CSV line of the row would read).
    let mut needles = Vec::new();
    for ds in shared.iter() {
        for row in &ds.rows {
            let joined: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            needles.push(joined.join(","));
        }
    }
    for frame_bytes in frames.iter() {
        let text = String::from_utf8_lossy(frame_bytes);
        for needle in &needles {
            assert!(
                !text.contains(needle.as_str()),
                "frame leaked a raw row: {needle}"
            );
        }
    }
}
