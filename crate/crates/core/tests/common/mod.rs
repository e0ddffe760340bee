//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rfpar::image::{Dims, Image};
use rfpar::victims::{Classifier, ClassifierOutput, Detector, DetectorOutput, LinearSoftmax, VictimError};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

/// Classifier whose class-0 probability is 1 whatever the input.
pub struct Constant {
    pub dims: Dims,
}

impl Classifier for Constant {
    fn input_dims(&self) -> Option<Dims> {
        Some(self.dims)
    }

    fn classify(&self, _: &Image) -> Result<ClassifierOutput, VictimError> {
        ClassifierOutput::new(vec![1.0, 0.0])
    }
}

/// Counts evaluations independently of the library's query counter.
pub struct Instrumented<V> {
    pub inner: V,
    pub calls: Arc<AtomicU64>,
}

impl<V> Instrumented<V> {
    pub fn new(inner: V) -> Self {
        Self {
            inner,
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<V: Classifier> Classifier for Instrumented<V> {
    fn input_dims(&self) -> Option<Dims> {
        self.inner.input_dims()
    }

    fn classify(&self, x: &Image) -> Result<ClassifierOutput, VictimError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.classify(x)
    }
}

impl<V: Detector> Detector for Instrumented<V> {
    fn input_dims(&self) -> Option<Dims> {
        self.inner.input_dims()
    }

    fn detect(&self, x: &Image) -> Result<DetectorOutput, VictimError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.detect(x)
    }
}

/// Two classes; class 1 wins only when element `(0, row, col)` is written.
pub fn one_pixel_victim(dims: Dims, row: usize, col: usize) -> LinearSoftmax {
    let mut weight = vec![0.0; 2 * dims.len()];
    weight[dims.len() + dims.index(0, row, col)] = 4.0;
    LinearSoftmax::new(dims, weight, vec![3.0, 0.0]).unwrap()
}

/// Linear classifier with small random weights: every pixel matters a bit.
pub fn diffuse_victim(dims: Dims, classes: usize, seed: u64) -> LinearSoftmax {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let weight = (0..classes * dims.len()).map(|_| rng.random_range(-0.05..0.05)).collect();
    let mut bias = vec![0.0; classes];
    bias[0] = 3.0;
    LinearSoftmax::new(dims, weight, bias).unwrap()
}

/// Mid-gray image with a deterministic texture.
pub fn textured(dims: Dims, seed: u64) -> Image {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Image::new(dims, (0..dims.len()).map(|_| rng.random_range(0.3..0.7)).collect()).unwrap()
}

pub mod gradients {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rfpar::agent::{log_prob, log_prob_gradient, policy_forward, PolicyParams, PolicyShape, SlotSample};
    use rfpar::image::{Dims, Image};

    pub const STEP: f64 = 1e-4;
    pub const TOLERANCE: f64 = 1e-3;
    /// Denominator floor so parameters with a near-zero gradient compare in
    /// absolute terms.
    pub const FLOOR: f64 = 1e-6;

    /// Random 3×8×8 policy, observation and raw samples.
    pub fn fixture(slots: usize) -> (PolicyParams, Image, Vec<SlotSample>) {
        let dims = Dims::new(3, 8, 8);
        let shape = PolicyShape::new(dims, slots);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let values = (0..shape.num_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let params = PolicyParams::from_values(shape, values);
        let x = Image::new(dims, (0..dims.len()).map(|_| rng.random()).collect()).unwrap();
        let raw = (0..slots)
            .map(|_| SlotSample {
                row: rng.random_range(-0.2..1.2),
                col: rng.random_range(-0.2..1.2),
                brightness: (0..3).map(|_| rng.random_range(-0.1..1.1)).collect(),
            })
            .collect();
        (params, x, raw)
    }

    /// Per-parameter relative error between the analytic gradient and central
    /// differences.
    pub fn relative_errors(slots: usize) -> Vec<(f64, f64, f64)> {
        let (params, x, raw) = fixture(slots);
        let analytic = log_prob_gradient(&params, &x, &raw).unwrap();
        (0..params.values().len())
            .map(|i| {
                let mut plus = params.clone();
                plus.values_mut()[i] += STEP;
                let mut minus = params.clone();
                minus.values_mut()[i] -= STEP;
                let lp = log_prob(&policy_forward(&plus, &x).unwrap(), &raw);
                let lm = log_prob(&policy_forward(&minus, &x).unwrap(), &raw);
                let numeric = (lp - lm) / (2.0 * STEP);
                let a = analytic[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                (rel, a, numeric)
            })
            .collect()
    }
}

pub mod loopback {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::mpsc;
    use std::thread;

    pub struct Recorded {
        pub content_type: Option<String>,
        pub body: Vec<u8>,
    }

    /// Serves one connection per `(status, body)` reply, in order, and
    /// reports each request it received.
    pub fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Recorded>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/predict", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                if tx.send(handle(stream, status, &body)).is_err() {
                    break;
                }
            }
        });
        (url, rx)
    }

    fn handle(stream: TcpStream, status: u16, body: &str) -> Recorded {
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut content_length = 0;
        let mut content_type = None;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => content_length = v.trim().parse().unwrap(),
                    "content-type" => content_type = Some(v.trim().to_string()),
                    _ => {}
                }
            }
        }
        let mut request = vec![0; content_length];
        reader.read_exact(&mut request).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        stream.flush().unwrap();
        Recorded {
            content_type,
            body: request,
        }
    }

    /// A loopback URL nothing listens on.
    pub fn closed_port_url() -> String {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}/predict", l.local_addr().unwrap())
    }
}
