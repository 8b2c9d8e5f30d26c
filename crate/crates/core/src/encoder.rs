//! MLP encoders with a projection head and unit-norm output.
//!
//! Layout: a ReLU trunk `input_dim → hidden_widths…`, then a projection head
//! of one linear layer or linear–ReLU–linear, then row-wise l2
//! normalization. There is no batch normalization, so a frozen encoder
//! behaves identically in training and evaluation.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard used when normalizing embeddings.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub embed_dim: usize,
    /// Linear layers in the projection head: 1, or 2 for linear–ReLU–linear.
    pub head_depth: usize,
    /// Hidden width of a depth-2 head. Defaults to the last trunk width.
    pub head_width: Option<usize>,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, hidden_widths: &[usize], embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths: hidden_widths.to_vec(),
            embed_dim,
            head_depth: 2,
            head_width: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::invalid(format!("encoder dims must be >= 1: {self:?}")));
        }
        if !matches!(self.head_depth, 1 | 2) {
            return Err(Error::invalid(format!("head_depth must be 1 or 2, got {}", self.head_depth)));
        }
        if self.head_width == Some(0) {
            return Err(Error::invalid("head_width must be >= 1"));
        }
        Ok(())
    }

    /// Width of the trunk output, i.e. the features fed to the head.
    pub fn trunk_dim(&self) -> usize {
        self.hidden_widths.last().copied().unwrap_or(self.input_dim)
    }

    /// `(out, in)` for every linear layer, trunk first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut prev = self.input_dim;
        for &w in &self.hidden_widths {
            shapes.push((w, prev));
            prev = w;
        }
        if self.head_depth == 2 {
            let hw = self.head_width.unwrap_or(prev);
            shapes.push((hw, prev));
            prev = hw;
        }
        shapes.push((self.embed_dim, prev));
        shapes
    }

    fn to_text(&self) -> String {
        let widths: Vec<String> = self.hidden_widths.iter().map(ToString::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "input_dim={}", self.input_dim);
        let _ = writeln!(s, "hidden_widths={}", widths.join(","));
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "head_depth={}", self.head_depth);
        if let Some(hw) = self.head_width {
            let _ = writeln!(s, "head_width={hw}");
        }
        s
    }

    fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format { offset: 0, msg };
        let mut cfg = EncoderConfig::new(0, &[], 0);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed config line {line:?}")))?;
            let num = |v: &str| v.trim().parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
            match k.trim() {
                "input_dim" => cfg.input_dim = num(v)?,
                "embed_dim" => cfg.embed_dim = num(v)?,
                "head_depth" => cfg.head_depth = num(v)?,
                "head_width" => cfg.head_width = Some(num(v)?),
                "hidden_widths" => {
                    cfg.hidden_widths = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(num)
                        .collect::<Result<_>>()?
                }
                "trainable" => {}
                other => return Err(bad(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate().map_err(|e| bad(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    layers: Vec<Linear>,
    trainable: bool,
}

/// Tape handles produced by [`EncoderParams::forward`].
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Trunk features before the projection head (`B × trunk_dim`).
    pub trunk: Var,
    /// Unit-norm embeddings (`B × embed_dim`).
    pub embedding: Var,
    /// Leaf handles in [`EncoderParams::tensors`] order.
    pub params: Vec<Var>,
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = config
        .layer_shapes()
        .into_iter()
        .map(|(out, inp)| {
            let bound = (6.0 / inp as f64).sqrt();
            let w = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
            Linear {
                weight: Tensor::new(&[out, inp], w).expect("shape matches").with_requires_grad(true),
                bias: Tensor::zeros(&[out]).with_requires_grad(true),
            }
        })
        .collect();
    Ok(EncoderParams {
        config: config.clone(),
        layers,
        trainable: true,
    })
}

impl EncoderParams {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Freezing drops every gradient buffer.
    pub fn set_trainable(&mut self, flag: bool) {
        self.trainable = flag;
        for t in self.tensors_mut() {
            t.set_requires_grad(flag);
        }
    }

    pub fn frozen(mut self) -> Self {
        self.set_trainable(false);
        self
    }

    /// Weight, bias, weight, bias, … in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Records the forward pass of `input` (`B × input_dim`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<EncoderOutput> {
        self.record(tape, input, true)
    }

    fn record(&self, tape: &mut Tape, input: Var, track: bool) -> Result<EncoderOutput> {
        let shape = tape.shape(input);
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::shape("encode", shape, &[0, self.config.input_dim]));
        }
        let params: Vec<Var> = self
            .tensors()
            .map(|t| if track { tape.leaf(t) } else { tape.constant(t) })
            .collect();
        let n_trunk = self.config.hidden_widths.len();
        let n_layers = self.layers.len();
        let mut h = input;
        let mut trunk = input;
        for i in 0..n_layers {
            let (w, b) = (params[2 * i], params[2 * i + 1]);
            let lin = tape.matmul_nt(h, w)?;
            h = tape.add_bias(lin, b)?;
            if i + 1 < n_layers {
                h = tape.relu(h)?;
            }
            if i + 1 == n_trunk {
                trunk = h;
            }
        }
        let embedding = tape.l2_normalize_rows(h, NORM_EPS)?;
        Ok(EncoderOutput {
            trunk,
            embedding,
            params,
        })
    }

    /// Unit-norm embeddings without recording gradients.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let out = self.forward_frozen(&mut tape, x)?;
        Ok(tape.to_tensor(out.embedding))
    }

    /// Trunk features (input to the projection head) without gradients.
    pub fn trunk_features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let out = self.forward_frozen(&mut tape, x)?;
        Ok(tape.to_tensor(out.trunk))
    }

    fn forward_frozen(&self, tape: &mut Tape, x: Var) -> Result<EncoderOutput> {
        self.record(tape, x, false)
    }

    /// Copies gradients for `out.params` into each tensor's grad buffer.
    pub fn collect_grads(&mut self, grads: &Gradients, out: &EncoderOutput) -> Result<()> {
        for (t, v) in self.tensors_mut().into_iter().zip(&out.params) {
            grads.write_to(*v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Checkpoint layout, all integers little-endian `u32`:
    ///
    /// ```text
    /// b"SEEDCKPT" | version | text_len | config text (key=value lines)
    /// | tensor_count | per tensor: rank, dims… | f64 LE data, tensor by tensor
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut text = self.config.to_text();
        let _ = writeln!(text, "trainable={}", self.trainable);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        let tensors: Vec<&Tensor> = self.tensors().collect();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in &tensors {
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for t in &tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut rd = CountingReader { inner: r, offset: 0 };
        let magic = rd.bytes(8)?;
        if magic != CKPT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not an encoder checkpoint".into(),
            });
        }
        let version = rd.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let text_len = rd.u32()? as usize;
        let text_at = rd.offset;
        let text = String::from_utf8(rd.bytes(text_len)?).map_err(|e| Error::Format {
            offset: text_at,
            msg: e.to_string(),
        })?;
        let config = EncoderConfig::from_text(&text).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format { offset: text_at, msg },
            other => other,
        })?;
        let trainable = text.lines().any(|l| l.trim() == "trainable=true");

        let expected = config.layer_shapes();
        let count_at = rd.offset;
        let count = rd.u32()? as usize;
        if count != expected.len() * 2 {
            return Err(Error::Format {
                offset: count_at,
                msg: format!("expected {} tensors, found {count}", expected.len() * 2),
            });
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = rd.u32()? as usize;
            let dims = (0..rank).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            shapes.push(dims);
        }
        for (i, (out, inp)) in expected.iter().enumerate() {
            if shapes[2 * i] != [*out, *inp] || shapes[2 * i + 1] != [*out] {
                return Err(Error::Format {
                    offset: count_at,
                    msg: format!("layer {i} shape does not match config"),
                });
            }
        }
        let mut layers = Vec::with_capacity(expected.len());
        let read_tensor = |shape: &[usize], rd: &mut CountingReader<_>| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let raw = rd.bytes(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(Tensor::new(shape, data)?.with_requires_grad(trainable))
        };
        for i in 0..expected.len() {
            let weight = read_tensor(&shapes[2 * i], &mut rd)?;
            let bias = read_tensor(&shapes[2 * i + 1], &mut rd)?;
            layers.push(Linear { weight, bias });
        }
        Ok(EncoderParams {
            config,
            layers,
            trainable,
        })
    }
}

const CKPT_MAGIC: &[u8; 8] = b"SEEDCKPT";
const CKPT_VERSION: u32 = 1;

struct CountingReader<'a, R> {
    inner: &'a mut R,
    offset: usize,
}

impl<R: Read> CountingReader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            msg: format!("truncated: wanted {n} more bytes"),
        })?;
        self.offset += n;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::norm;

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig::new(4, &[8], 2);
        assert_eq!(init_encoder(&cfg, 7).unwrap(), init_encoder(&cfg, 7).unwrap());
        assert_ne!(init_encoder(&cfg, 7).unwrap(), init_encoder(&cfg, 8).unwrap());
    }

    #[test]
    fn layer_shapes_chain() {
        let p = init_encoder(&EncoderConfig::new(4, &[8], 2), 0).unwrap();
        let shapes: Vec<&[usize]> = p.layers().iter().map(|l| l.weight.shape()).collect();
        assert_eq!(shapes, vec![&[8, 4][..], &[8, 8], &[2, 8]]);
        assert!(p.layers().iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(p.layers()[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn head_depth_one() {
        let mut cfg = EncoderConfig::new(4, &[8, 6], 3);
        cfg.head_depth = 1;
        assert_eq!(cfg.layer_shapes(), vec![(8, 4), (6, 8), (3, 6)]);
        cfg.head_depth = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn outputs_are_unit_norm() {
        let p = init_encoder(&EncoderConfig::new(5, &[16, 8], 4), 1).unwrap();
        let z = p.encode(&batch(10, 5, 2)).unwrap();
        for i in 0..10 {
            assert!((norm(z.row(i)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_network_yields_zero_rows() {
        let mut p = init_encoder(&EncoderConfig::new(3, &[4], 2), 1).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let z = p.encode(&batch(2, 3, 0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row_matches_batched_row() {
        let p = init_encoder(&EncoderConfig::new(6, &[12], 4), 3).unwrap();
        let b = batch(8, 6, 4);
        let full = p.encode(&b).unwrap();
        let one = p.encode(&Tensor::from_rows(&[b.row(5)]).unwrap()).unwrap();
        for (a, c) in one.row(0).iter().zip(full.row(5)) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let p = init_encoder(&EncoderConfig::new(6, &[12], 4), 3).unwrap();
        assert!(p.encode(&batch(2, 5, 0)).is_err());
    }

    #[test]
    fn frozen_encoder_gets_no_gradients() {
        let p = init_encoder(&EncoderConfig::new(3, &[4], 2), 1).unwrap().frozen();
        let mut tape = Tape::new();
        let x = tape.constant(&batch(2, 3, 0));
        let out = p.forward(&mut tape, x).unwrap();
        assert!(!tape.requires_grad(out.embedding));
        let loss = tape.sum(out.embedding).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(out.params.iter().all(|v| g.get(*v).is_none()));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut cfg = EncoderConfig::new(5, &[7, 3], 2);
        cfg.head_width = Some(9);
        let p = init_encoder(&cfg, 11).unwrap();
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        let q = EncoderParams::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut again = Vec::new();
        q.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let p = init_encoder(&EncoderConfig::new(2, &[2], 2), 0).unwrap();
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = EncoderParams::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
