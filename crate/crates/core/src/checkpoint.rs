//! Binary model container shared by BoNMF and the SVD baseline.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "BNMFCKPT"            8 bytes
//! version u32                   currently 1
//! kind    u8                    1 = bonmf, 2 = svd
//! hlen    u32, header           JSON: config + user and item id vocabularies
//! count   u32                   number of arrays
//! array*  u16 name length, name (UTF-8), u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::baselines::SvdModel;
use crate::data::IdIndex;
use crate::error::{Error, Result};
use crate::model::{BonmfModel, Layer, ModelConfig, Predictor};
use crate::numerics::{DenseMatrix, DenseVector};

const MAGIC: &[u8; 8] = b"BNMFCKPT";
const VERSION: u32 = 1;
const KIND_BONMF: u8 = 1;
const KIND_SVD: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Bonmf(BonmfModel),
    Svd(SvdModel),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
    users: Vec<String>,
    items: Vec<String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Bonmf(_) => "bonmf",
            Checkpoint::Svd(_) => "svd",
        }
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let (kind, header, arrays) = match self {
            Checkpoint::Bonmf(m) => {
                let mut arrays = vec![
                    ("user_table".to_string(), m.user_table().clone()),
                    ("item_table".to_string(), m.item_table().clone()),
                ];
                for (i, l) in m.layers().iter().enumerate() {
                    arrays.push((format!("layer{i}.weights"), l.weights.clone()));
                    arrays.push((format!("layer{i}.bias"), column(&l.bias)));
                }
                let header = Header {
                    config: Some(m.config().clone()),
                    users: m.users().ids().to_vec(),
                    items: m.items().ids().to_vec(),
                };
                (KIND_BONMF, header, arrays)
            }
            Checkpoint::Svd(m) => {
                let arrays = vec![
                    ("global_mean".to_string(), DenseMatrix::from_vec(1, 1, vec![m.global_mean])?),
                    ("user_bias".to_string(), column(&m.user_bias)),
                    ("item_bias".to_string(), column(&m.item_bias)),
                    ("user_factors".to_string(), m.user_factors.clone()),
                    ("item_factors".to_string(), m.item_factors.clone()),
                ];
                let header = Header {
                    config: None,
                    users: m.users.ids().to_vec(),
                    items: m.items.ids().to_vec(),
                };
                (KIND_SVD, header, arrays)
            }
        };
        let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(kind);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, a) in &arrays {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(a.rows() as u64).to_le_bytes());
            buf.extend_from_slice(&(a.cols() as u64).to_le_bytes());
            for v in a.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
    }

    pub fn load<R: Read>(mut input: R) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };

        if cur.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let kind = cur.take(1)?[0];
        let hlen = cur.u32()? as usize;
        let header: Header =
            serde_json::from_slice(cur.take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
        let count = cur.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let nlen = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(nlen)?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_owned();
            let rows = cur.u64()? as usize;
            let cols = cur.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| bad(format!("array {name:?} is too large")))?;
            let values = cur
                .take(n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let matrix = DenseMatrix::from_vec(rows, cols, values)?;
            if !matrix.is_finite() {
                return Err(bad(format!("array {name:?} holds a non-finite value")));
            }
            if arrays.insert(name.clone(), matrix).is_some() {
                return Err(bad(format!("duplicate array {name:?}")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }

        let users = IdIndex::from_ids(header.users).map_err(|e| bad(format!("user ids: {e}")))?;
        let items = IdIndex::from_ids(header.items).map_err(|e| bad(format!("item ids: {e}")))?;
        let mut take = |name: &str| arrays.remove(name).ok_or_else(|| bad(format!("missing array {name:?}")));
        let checkpoint = match kind {
            KIND_BONMF => {
                let config = header.config.ok_or_else(|| bad("bonmf checkpoint without config"))?;
                let user_table = take("user_table")?;
                let item_table = take("item_table")?;
                let layers = (0..config.hidden_dims.len() + 1)
                    .map(|i| {
                        Ok(Layer {
                            weights: take(&format!("layer{i}.weights"))?,
                            bias: vector(take(&format!("layer{i}.bias"))?)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let model = BonmfModel::from_parts(config, users, items, user_table, item_table, layers)
                    .map_err(|e| bad(e.to_string()))?;
                Checkpoint::Bonmf(model)
            }
            KIND_SVD => {
                let mean = take("global_mean")?;
                if (mean.rows(), mean.cols()) != (1, 1) {
                    return Err(bad("global_mean must be 1x1"));
                }
                let model = SvdModel {
                    global_mean: mean.as_slice()[0],
                    user_bias: vector(take("user_bias")?)?,
                    item_bias: vector(take("item_bias")?)?,
                    user_factors: take("user_factors")?,
                    item_factors: take("item_factors")?,
                    users,
                    items,
                };
                let (nu, ni) = (model.users.len(), model.items.len());
                if model.user_bias.len() != nu
                    || model.user_factors.rows() != nu
                    || model.item_bias.len() != ni
                    || model.item_factors.rows() != ni
                    || model.user_factors.cols() != model.item_factors.cols()
                {
                    return Err(bad("svd array shapes disagree with the vocabularies"));
                }
                Checkpoint::Svd(model)
            }
            other => return Err(bad(format!("unknown model kind tag {other}"))),
        };
        if let Some(name) = arrays.keys().next() {
            return Err(bad(format!("unexpected array {name:?}")));
        }
        Ok(checkpoint)
    }
}

impl Predictor for Checkpoint {
    fn predict_ids(&self, user_id: &str, item_id: &str, features: &crate::data::FeatureSet) -> Result<f64> {
        match self {
            Checkpoint::Bonmf(m) => m.predict_ids(user_id, item_id, features),
            Checkpoint::Svd(m) => m.predict_ids(user_id, item_id, features),
        }
    }
}

fn column(v: &DenseVector) -> DenseMatrix {
    DenseMatrix::from_vec(v.len(), 1, v.as_slice().to_vec()).expect("shape matches length")
}

fn vector(m: DenseMatrix) -> Result<DenseVector> {
    if m.cols() != 1 {
        return Err(bad(format!("expected a column vector, got {}x{}", m.rows(), m.cols())));
    }
    Ok(DenseVector::new(m.as_slice().to_vec()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModalityMask;

    fn ids(prefix: &str, n: usize) -> IdIndex {
        IdIndex::from_ids((0..n).map(|i| format!("{prefix}{i}"))).unwrap()
    }

    fn small_bonmf() -> BonmfModel {
        let config = ModelConfig {
            id_embedding_dim: 3,
            hidden_dims: vec![4],
            user_text_dim: 2,
            item_text_dim: 2,
            item_image_dim: 1,
            modality_mask: ModalityMask::ALL,
            ..ModelConfig::default()
        };
        BonmfModel::new(config, ids("u", 3), ids("i", 2), 9).unwrap()
    }

    #[test]
    fn bonmf_round_trip_is_bit_exact() {
        let model = small_bonmf();
        let mut buf = Vec::new();
        Checkpoint::Bonmf(model.clone()).save(&mut buf).unwrap();
        let Checkpoint::Bonmf(back) = Checkpoint::load(&buf[..]).unwrap() else {
            panic!("wrong kind")
        };
        let bits = |m: &BonmfModel| m.params_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&model));
        assert_eq!(back, model);
    }

    #[test]
    fn svd_round_trip() {
        let svd = SvdModel {
            users: ids("u", 2),
            items: ids("i", 3),
            global_mean: 0.1 + 0.2,
            user_bias: DenseVector::new(vec![1.0 / 3.0, -0.0]),
            item_bias: DenseVector::new(vec![f64::MIN_POSITIVE, 2.0, 3.0]),
            user_factors: DenseMatrix::from_vec(2, 1, vec![0.5, 0.25]).unwrap(),
            item_factors: DenseMatrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap(),
        };
        let mut buf = Vec::new();
        Checkpoint::Svd(svd.clone()).save(&mut buf).unwrap();
        assert_eq!(Checkpoint::load(&buf[..]).unwrap(), Checkpoint::Svd(svd));
    }

    #[test]
    fn corrupt_inputs_are_errors() {
        let mut buf = Vec::new();
        Checkpoint::Bonmf(small_bonmf()).save(&mut buf).unwrap();
        for cut in [0, 5, 12, 20, buf.len() - 1] {
            assert!(matches!(Checkpoint::load(&buf[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Checkpoint::load(&extra[..]).is_err());
        let mut kind = buf.clone();
        kind[12] = 9;
        assert!(Checkpoint::load(&kind[..]).is_err());
        // last value in the file is the output bias
        let mut nan = buf.clone();
        let at = nan.len() - 8;
        nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(Checkpoint::load(&nan[..]), Err(Error::Checkpoint(m)) if m.contains("non-finite")));
    }
}
