//! Binary model containers. Self-describing: an 8-byte magic, a kind
//! byte, and a format version precede the payload; all integers and
//! floats are little-endian and floats round-trip bit-exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::CenterState;
use crate::mat::Mat;
use crate::nn::{ConvBlock, EncoderModel, Linear};
use crate::ocsvm::{OneClassModel, StandardizerStats};

const MAGIC: [u8; 8] = *b"ANOMTILE";
const VERSION: u32 = 1;
const KIND_ENCODER: u8 = 1;
const KIND_SVM: u8 = 2;

/// Trained encoder plus everything inference needs alongside it: the
/// running class centers and the training-corpus channel means used
/// to normalize tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderArtifact {
    pub model: EncoderModel,
    pub centers: CenterState,
    pub channel_means: [f64; 3],
}

/// Fitted one-class model; the standardizer travels inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmArtifact {
    pub model: OneClassModel,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: u8) -> Writer {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(&MAGIC);
        buf.push(kind);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_slice(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }

    fn usize_slice(&mut self, v: &[usize]) {
        self.usize(v.len());
        for &x in v {
            self.u64(x as u64);
        }
    }

    fn mat(&mut self, m: &Mat) {
        self.usize(m.rows());
        self.usize(m.cols());
        for &x in m.data() {
            self.f64(x);
        }
    }

    fn linear(&mut self, l: &Linear) {
        self.usize(l.in_dim);
        self.usize(l.out_dim);
        self.f64_slice(&l.weight);
        self.f64_slice(&l.bias);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], want_kind: u8) -> Result<Reader<'a>> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.bytes(8)?;
        if magic != MAGIC {
            return Err(Error::data("not a model container (bad magic)"));
        }
        let kind = r.bytes(1)?[0];
        if kind != want_kind {
            return Err(Error::data(format!(
                "container holds kind {kind}, expected kind {want_kind}"
            )));
        }
        let version = u32::from_le_bytes(r.bytes(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::data(format!("unsupported container version {version}")));
        }
        Ok(r)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data("truncated model container"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::data("length field overflows usize"))
    }

    /// Element counts are validated against remaining bytes before any
    /// allocation so a corrupt length cannot trigger a huge reserve.
    fn len(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.checked_mul(elem_bytes).map_or(true, |b| self.pos + b > self.buf.len()) {
            return Err(Error::data("truncated model container"));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64_slice(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn usize_slice(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    fn mat(&mut self) -> Result<Mat> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let total = rows
            .checked_mul(cols)
            .filter(|t| self.pos + t * 8 <= self.buf.len())
            .ok_or_else(|| Error::data("truncated model container"))?;
        let data: Result<Vec<f64>> = (0..total).map(|_| self.f64()).collect();
        Ok(Mat::from_vec(rows, cols, data?))
    }

    fn linear(&mut self) -> Result<Linear> {
        let in_dim = self.usize()?;
        let out_dim = self.usize()?;
        let weight = self.f64_slice()?;
        let bias = self.f64_slice()?;
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::data("linear layer sizes disagree with its dimensions"));
        }
        Ok(Linear { in_dim, out_dim, weight, bias })
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::data(format!(
                "{} trailing bytes after model payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_encoder(a: &EncoderArtifact) -> Vec<u8> {
    let mut w = Writer::new(KIND_ENCODER);
    w.usize(a.model.conv.len());
    for b in &a.model.conv {
        w.usize(b.in_ch);
        w.usize(b.out_ch);
        w.f64_slice(&b.weight);
        w.f64_slice(&b.bias);
    }
    w.linear(&a.model.head_hidden);
    w.linear(&a.model.head_out);
    w.usize(a.model.feature_dim);
    w.usize(a.model.class_count);
    w.mat(a.centers.centers());
    w.usize_slice(a.centers.subset());
    w.f64(a.centers.beta());
    for &m in &a.channel_means {
        w.f64(m);
    }
    w.buf
}

pub fn decode_encoder(bytes: &[u8]) -> Result<EncoderArtifact> {
    let mut r = Reader::new(bytes, KIND_ENCODER)?;
    let n_conv = r.len(1)?;
    let mut conv = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        let in_ch = r.usize()?;
        let out_ch = r.usize()?;
        let weight = r.f64_slice()?;
        let bias = r.f64_slice()?;
        if weight.len() != out_ch * in_ch * 9 || bias.len() != out_ch {
            return Err(Error::data("conv block sizes disagree with its dimensions"));
        }
        conv.push(ConvBlock { in_ch, out_ch, weight, bias });
    }
    let head_hidden = r.linear()?;
    let head_out = r.linear()?;
    let feature_dim = r.usize()?;
    let class_count = r.usize()?;
    let model = EncoderModel { conv, head_hidden, head_out, feature_dim, class_count };
    let centers = CenterState::new(r.mat()?, r.usize_slice()?, r.f64()?)?;
    let channel_means = [r.f64()?, r.f64()?, r.f64()?];
    r.finish()?;
    if model.head_hidden.in_dim != feature_dim || model.head_out.out_dim != class_count {
        return Err(Error::data("head dimensions disagree with the declared model shape"));
    }
    Ok(EncoderArtifact { model, centers, channel_means })
}

pub fn encode_svm(a: &SvmArtifact) -> Vec<u8> {
    let mut w = Writer::new(KIND_SVM);
    w.f64(a.model.nu);
    w.f64(a.model.gamma);
    w.f64(a.model.rho);
    w.f64_slice(&a.model.standardizer.mean);
    w.f64_slice(&a.model.standardizer.std);
    w.mat(&a.model.support_vectors);
    w.f64_slice(&a.model.coefficients);
    w.buf
}

pub fn decode_svm(bytes: &[u8]) -> Result<SvmArtifact> {
    let mut r = Reader::new(bytes, KIND_SVM)?;
    let nu = r.f64()?;
    let gamma = r.f64()?;
    let rho = r.f64()?;
    let mean = r.f64_slice()?;
    let std = r.f64_slice()?;
    let support_vectors = r.mat()?;
    let coefficients = r.f64_slice()?;
    r.finish()?;
    if mean.len() != std.len() || mean.len() != support_vectors.cols() {
        return Err(Error::data("standardizer width disagrees with support vectors"));
    }
    if coefficients.len() != support_vectors.rows() {
        return Err(Error::data("coefficient count disagrees with support vectors"));
    }
    Ok(SvmArtifact {
        model: OneClassModel {
            support_vectors,
            coefficients,
            rho,
            gamma,
            nu,
            standardizer: StandardizerStats { mean, std },
        },
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)
        .map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn save_encoder(path: &Path, a: &EncoderArtifact) -> Result<()> {
    write_file(path, &encode_encoder(a))
}

pub fn load_encoder(path: &Path) -> Result<EncoderArtifact> {
    decode_encoder(&read_file(path)?)
}

pub fn save_svm(path: &Path, a: &SvmArtifact) -> Result<()> {
    write_file(path, &encode_svm(a))
}

pub fn load_svm(path: &Path) -> Result<SvmArtifact> {
    decode_svm(&read_file(path)?)
}
