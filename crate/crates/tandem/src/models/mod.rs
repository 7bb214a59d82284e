//! The two student architectures and the EMA teacher.
//!
//! Student1 is a convolutional encoder-decoder; student2 is a
//! windowed-attention transformer encoder-decoder; the teacher shares
//! student2's architecture and tracks its parameters by exponential
//! moving average. Parameters are flat `Vec<Tensor>` lists consumed in a
//! fixed construction order, so initialization and the forward pass must
//! walk the architecture identically; a cursor guards the count.

mod transformer;
mod unet;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::ProbMap;
use crate::rng::{mix, rng_from, stream_seed, Stream};
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Side of the square patches the transformer embeds.
pub const PATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ConvUnet,
    WindowedTransformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters. `depth` sets the total downsampling
/// factor 2^depth for both families; the transformer reaches it with a
/// patch size of 4 followed by `depth - 2` token merges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub family: Family,
    pub depth: usize,
    pub base_channels: usize,
    /// Attention window side in tokens; ignored by the convolutional net.
    pub window_size: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidArgument("base_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        match self.family {
            Family::ConvUnet => {
                if self.depth == 0 {
                    return Err(Error::InvalidArgument(
                        "convolutional net needs depth >= 1".into(),
                    ));
                }
            }
            Family::WindowedTransformer => {
                if self.depth < 2 {
                    return Err(Error::InvalidArgument(
                        "transformer needs depth >= 2 (patch embedding alone downsamples by 4)"
                            .into(),
                    ));
                }
                if self.window_size == 0 {
                    return Err(Error::InvalidArgument("window_size must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of attention stages in the transformer encoder.
    pub(crate) fn stages(&self) -> usize {
        self.depth - 1
    }

    /// Token embedding width at stage 0.
    pub(crate) fn embed_dim(&self) -> usize {
        2 * self.base_channels
    }

    /// Attention heads: the largest of {4, 2, 1} dividing the embedding.
    pub(crate) fn heads(&self) -> usize {
        [4, 2, 1]
            .into_iter()
            .find(|h| self.embed_dim() % h == 0)
            .unwrap()
    }

    /// Reject inputs whose spatial dims break the downsampling chain,
    /// before any compute happens.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.depth;
        let ok = h > 0 && w > 0 && h % div == 0 && w % div == 0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} must be positive and divisible by 2^depth = {div}"
            )));
        }
        if self.family == Family::WindowedTransformer {
            let win = self.window_size;
            for stage in 0..self.stages() {
                let gh = h >> (2 + stage);
                let gw = w >> (2 + stage);
                if gh < win || gw < win || gh % win != 0 || gw % win != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "stage {stage} token grid {gh}x{gw} is not tileable by \
                         window_size {win} for input {h}x{w}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws one standard normal via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Appends parameter tensors in architecture order with the usual
/// fan-based scales: He normal for convolutions, Xavier uniform for
/// dense layers, ones/zeros for norms and biases.
pub(crate) struct ParamInit {
    rng: ChaCha8Rng,
    pub out: Vec<Tensor>,
}

impl ParamInit {
    fn new(seed: u64) -> Self {
        ParamInit {
            rng: rng_from(seed),
            out: Vec::new(),
        }
    }

    pub fn conv(&mut self, cout: usize, cin: usize, k: usize) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let data = (0..cout * cin * k * k)
            .map(|_| normal(&mut self.rng) * std)
            .collect();
        self.out.push(Tensor::new(vec![cout, cin, k, k], data));
    }

    pub fn linear(&mut self, dout: usize, din: usize) {
        let limit = (6.0 / (din + dout) as f64).sqrt();
        let data = (0..dout * din)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        self.out.push(Tensor::new(vec![dout, din], data));
    }

    pub fn bias(&mut self, n: usize) {
        self.out.push(Tensor::zeros(vec![n]));
    }

    pub fn gamma(&mut self, n: usize) {
        self.out.push(Tensor::full(vec![n], 1.0));
    }

    pub fn beta(&mut self, n: usize) {
        self.out.push(Tensor::zeros(vec![n]));
    }
}

/// Sequential reader over the flat parameter list.
pub(crate) struct Cursor<'a> {
    params: &'a [Var],
    next: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(params: &'a [Var]) -> Self {
        Cursor { params, next: 0 }
    }

    pub fn next(&mut self) -> Result<Var> {
        let v = self.params.get(self.next).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "parameter list exhausted after {} tensors; architecture expects more",
                self.next
            ))
        })?;
        self.next += 1;
        Ok(v)
    }

    pub fn finish(self) -> Result<()> {
        if self.next != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter list has {} tensors but the architecture consumed {}",
                self.params.len(),
                self.next
            )));
        }
        Ok(())
    }
}

/// Inverted-dropout mask: entries are 0 or 1/keep, so eval needs no
/// rescaling.
fn dropout_mask(n: usize, rate: f64, seed: u64) -> Vec<f64> {
    let keep = 1.0 - rate;
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| {
            if rng.random_range(0.0..1.0) < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect()
}

/// Applies dropout at one site in train mode; identity in eval mode.
/// Site indices advance in forward order, so each site has its own
/// deterministic mask stream.
pub(crate) fn apply_dropout(
    g: &mut Graph,
    x: Var,
    rate: f64,
    mode: Mode,
    dropout_seed: Option<u64>,
    site: &mut u64,
) -> Var {
    if mode == Mode::Eval || rate == 0.0 {
        return x;
    }
    let seed = mix(&[
        dropout_seed.expect("train mode with dropout was validated to carry a seed"),
        *site,
    ]);
    *site += 1;
    let n = g.value(x).numel();
    let mask = dropout_mask(n, rate, seed);
    g.dropout(x, mask)
}

/// Initialize a fresh parameter list for the spec.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let mut init = ParamInit::new(seed);
    match spec.family {
        Family::ConvUnet => unet::init(spec, &mut init),
        Family::WindowedTransformer => transformer::init(spec, &mut init),
    }
    Ok(init.out)
}

/// Shape inventory of the spec's parameter list.
pub fn param_shapes(spec: &NetworkSpec) -> Result<Vec<Vec<usize>>> {
    Ok(init_params(spec, 0)?
        .iter()
        .map(|t| t.shape().to_vec())
        .collect())
}

/// Total scalar parameter count.
pub fn num_params(spec: &NetworkSpec) -> Result<usize> {
    Ok(init_params(spec, 0)?.iter().map(|t| t.numel()).sum())
}

/// Build the forward pass inside an existing graph. `pixels` must be a
/// `[1, H, W]` node; the result is a `[C, H, W]` probability node.
pub fn forward_graph(
    spec: &NetworkSpec,
    g: &mut Graph,
    params: &[Var],
    pixels: Var,
    mode: Mode,
    dropout_seed: Option<u64>,
) -> Result<Var> {
    spec.validate()?;
    let shape = g.value(pixels).shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::InvalidArgument(format!(
            "network input must be [1, H, W], got {shape:?}"
        )));
    }
    spec.check_input(shape[1], shape[2])?;
    if mode == Mode::Train && spec.dropout_rate > 0.0 && dropout_seed.is_none() {
        return Err(Error::InvalidArgument(
            "train-mode forward with dropout needs a dropout seed".into(),
        ));
    }
    let mut cursor = Cursor::new(params);
    let out = match spec.family {
        Family::ConvUnet => unet::forward(spec, g, &mut cursor, pixels, mode, dropout_seed)?,
        Family::WindowedTransformer => {
            transformer::forward(spec, g, &mut cursor, pixels, mode, dropout_seed)?
        }
    };
    cursor.finish()?;
    Ok(out)
}

/// Run a forward pass outside any training graph and validate the output
/// distribution.
pub fn forward(
    spec: &NetworkSpec,
    params: &[Tensor],
    pixels: &Tensor,
    mode: Mode,
    dropout_seed: Option<u64>,
) -> Result<ProbMap> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
    let px = g.constant(pixels.clone());
    let out = forward_graph(spec, &mut g, &vars, px, mode, dropout_seed)?;
    ProbMap::new(g.value(out).clone())
}

/// L2 norm of the difference between two parameter sets.
pub fn param_distance(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "parameter set inventory",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let mut acc = 0.0;
    for (ta, tb) in a.iter().zip(b) {
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                context: "parameter tensor",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let d = x - y;
            acc += d * d;
        }
    }
    Ok(acc.sqrt())
}

/// Both students plus the teacher that mirrors student2.
#[derive(Debug, Clone)]
pub struct TripletState {
    pub spec_s1: NetworkSpec,
    pub spec_s2: NetworkSpec,
    pub params_s1: Vec<Tensor>,
    pub params_s2: Vec<Tensor>,
    pub params_t: Vec<Tensor>,
    pub ema_decay: f64,
}

impl TripletState {
    /// Fresh initialization: the students draw from independent seed
    /// streams; the teacher starts as an exact copy of student2.
    pub fn init(
        spec_s1: NetworkSpec,
        spec_s2: NetworkSpec,
        ema_decay: f64,
        master_seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(Error::InvalidArgument(format!(
                "ema_decay must be in [0, 1), got {ema_decay}"
            )));
        }
        let params_s1 = init_params(
            &spec_s1,
            stream_seed(master_seed, Stream::InitStudent1, 0, 0),
        )?;
        let params_s2 = init_params(
            &spec_s2,
            stream_seed(master_seed, Stream::InitStudent2, 0, 0),
        )?;
        let params_t = params_s2.clone();
        Ok(TripletState {
            spec_s1,
            spec_s2,
            params_s1,
            params_s2,
            params_t,
            ema_decay,
        })
    }

    /// teacher <- decay * teacher + (1 - decay) * student2. Students are
    /// untouched.
    pub fn ema_update(&mut self) {
        let d = self.ema_decay;
        for (t, s) in self.params_t.iter_mut().zip(&self.params_s2) {
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = d * *tv + (1.0 - d) * sv;
            }
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TNDM";
const CHECKPOINT_VERSION: u32 = 1;

/// Run coordinates stored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub iteration: usize,
    pub master_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec_s1: NetworkSpec,
    spec_s2: NetworkSpec,
    iteration: usize,
    ema_decay: f64,
    master_seed: u64,
    blob_sha256: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_params(out: &mut Vec<u8>, sets: [&[Tensor]; 3]) {
    for set in sets {
        out.extend((set.len() as u64).to_le_bytes());
        for t in set {
            out.extend((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Persist the triplet atomically: parameter blob at `path`, JSON sidecar
/// at `path + ".json"` carrying the specs, run coordinates, and the
/// blob's SHA-256.
pub fn save_checkpoint(state: &TripletState, info: &CheckpointInfo, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    blob.extend_from_slice(CHECKPOINT_MAGIC);
    blob.extend(CHECKPOINT_VERSION.to_le_bytes());
    encode_params(
        &mut blob,
        [&state.params_s1, &state.params_s2, &state.params_t],
    );
    atomic_write(path, &blob)?;
    let sidecar = Sidecar {
        spec_s1: state.spec_s1,
        spec_s2: state.spec_s2,
        iteration: info.iteration,
        ema_decay: state.ema_decay,
        master_seed: info.master_seed,
        blob_sha256: sha256_hex(&blob),
    };
    let json = serde_json::to_vec_pretty(&sidecar)?;
    atomic_write(&sidecar_path(path), &json)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointFormat {
                path: self.path.to_path_buf(),
                reason: format!(
                    "unexpected end of blob at byte {} (need {n} more)",
                    self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_param_set(r: &mut ByteReader) -> Result<Vec<Tensor>> {
    let count = r.u64()? as usize;
    let mut set = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = r.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        set.push(Tensor::new(shape, data));
    }
    Ok(set)
}

fn check_shapes(path: &Path, which: &str, set: &[Tensor], expect: &[Vec<usize>]) -> Result<()> {
    let got: Vec<Vec<usize>> = set.iter().map(|t| t.shape().to_vec()).collect();
    if got != expect {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            reason: format!("{which} parameter shapes do not match the stored spec"),
        });
    }
    Ok(())
}

/// Load a checkpoint, verifying the blob hash against the sidecar and
/// every parameter shape against the stored specs.
pub fn load_checkpoint(path: &Path) -> Result<(TripletState, CheckpointInfo)> {
    let side_path = sidecar_path(path);
    let side_text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar = serde_json::from_str(&side_text)?;
    let blob = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if sha256_hex(&blob) != side.blob_sha256 {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            reason: "blob SHA-256 does not match the sidecar".into(),
        });
    }
    let mut r = ByteReader {
        bytes: &blob,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            reason: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            reason: format!("unsupported version {version}"),
        });
    }
    let params_s1 = decode_param_set(&mut r)?;
    let params_s2 = decode_param_set(&mut r)?;
    let params_t = decode_param_set(&mut r)?;
    let shapes_s1 = param_shapes(&side.spec_s1)?;
    let shapes_s2 = param_shapes(&side.spec_s2)?;
    check_shapes(path, "student1", &params_s1, &shapes_s1)?;
    check_shapes(path, "student2", &params_s2, &shapes_s2)?;
    check_shapes(path, "teacher", &params_t, &shapes_s2)?;
    Ok((
        TripletState {
            spec_s1: side.spec_s1,
            spec_s2: side.spec_s2,
            params_s1,
            params_s2,
            params_t,
            ema_decay: side.ema_decay,
        },
        CheckpointInfo {
            iteration: side.iteration,
            master_seed: side.master_seed,
        },
    ))
}
