use std::io::{self, Read, Write};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::network::{CategoryNet, FeatureNet, NetDims};
use super::nn::Params;
use super::trainer::NetworkKind;

const MAGIC: &[u8; 8] = b"VIDNET01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Binary layout: magic, kind byte, five dims, seed, epoch and parameter
/// count as little-endian u64, then the parameters as little-endian f64 in
/// declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: NetworkKind,
    pub dims: NetDims,
    pub seed: u64,
    pub epoch: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_category(net: &CategoryNet, seed: u64, epoch: u64) -> Self {
        Self { kind: NetworkKind::Category, dims: net.dims(), seed, epoch, params: net.flatten() }
    }

    pub fn from_feature(net: &FeatureNet, seed: u64, epoch: u64) -> Self {
        Self { kind: NetworkKind::Feature, dims: net.dims(), seed, epoch, params: net.flatten() }
    }

    fn shell_rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    pub fn category_net(&self) -> Result<CategoryNet, CheckpointError> {
        if self.kind != NetworkKind::Category {
            return Err(CheckpointError::Format("not a category network".into()));
        }
        let mut net = CategoryNet::init(self.dims, &mut Self::shell_rng());
        self.load_into(&mut net)?;
        Ok(net)
    }

    pub fn feature_net(&self) -> Result<FeatureNet, CheckpointError> {
        if self.kind != NetworkKind::Feature {
            return Err(CheckpointError::Format("not a feature network".into()));
        }
        let mut net = FeatureNet::init(self.dims, &mut Self::shell_rng());
        self.load_into(&mut net)?;
        Ok(net)
    }

    fn load_into<N: Params>(&self, net: &mut N) -> Result<(), CheckpointError> {
        if net.param_count() != self.params.len() {
            return Err(CheckpointError::Format(format!(
                "expected {} parameters, found {}",
                net.param_count(),
                self.params.len()
            )));
        }
        net.load_flat(&self.params);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&[match self.kind {
            NetworkKind::Category => 0,
            NetworkKind::Feature => 1,
        }])?;
        let d = self.dims;
        for v in [d.input, d.hidden, d.embed, d.virtual_classes, d.top_classes] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in [self.seed, self.epoch, self.params.len() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(57 + 8 * self.params.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let kind = match kind[0] {
            0 => NetworkKind::Category,
            1 => NetworkKind::Feature,
            k => return Err(CheckpointError::Format(format!("unknown network kind {k}"))),
        };
        let mut u = || -> Result<u64, CheckpointError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let dims = NetDims {
            input: u()? as usize,
            hidden: u()? as usize,
            embed: u()? as usize,
            virtual_classes: u()? as usize,
            top_classes: u()? as usize,
        };
        let seed = u()?;
        let epoch = u()?;
        let count = u()? as usize;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != count * 8 {
            return Err(CheckpointError::Format(format!(
                "expected {} parameter bytes, found {}",
                count * 8,
                raw.len()
            )));
        }
        let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { kind, dims, seed, epoch, params })
    }
}
