//! Named-array container on top of the safetensors layout: typed arrays with
//! declared shapes plus a string metadata table. The table is stored as one
//! JSON object under a single header key so files are byte-for-byte
//! reproducible.

use std::collections::{BTreeMap, HashMap};

const META_KEY: &str = "embref";
use std::path::Path;

use safetensors::{tensor::TensorView, Dtype, SafeTensors};

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct ArrayArchive {
    arrays: BTreeMap<String, (Dtype, Vec<usize>, Vec<u8>)>,
    pub metadata: BTreeMap<String, String>,
}

macro_rules! typed {
    ($put:ident, $get:ident, $t:ty, $dtype:expr) => {
        pub fn $put(&mut self, name: &str, shape: &[usize], data: &[$t]) {
            debug_assert_eq!(shape.iter().product::<usize>(), data.len());
            let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            self.arrays
                .insert(name.to_string(), ($dtype, shape.to_vec(), bytes));
        }

        pub fn $get(&self, name: &str) -> Result<(Vec<usize>, Vec<$t>)> {
            let (dtype, shape, bytes) = self
                .arrays
                .get(name)
                .ok_or_else(|| Error::Format(format!("array {name} missing")))?;
            if *dtype != $dtype {
                return Err(Error::Format(format!(
                    "array {name}: expected {:?}, found {dtype:?}",
                    $dtype
                )));
            }
            const N: usize = std::mem::size_of::<$t>();
            let data = bytes
                .chunks_exact(N)
                .map(|c| <$t>::from_le_bytes(c.try_into().expect("chunk width")))
                .collect();
            Ok((shape.clone(), data))
        }
    };
}

impl ArrayArchive {
    typed!(put_f32, get_f32, f32, Dtype::F32);
    typed!(put_f64, get_f64, f64, Dtype::F64);
    typed!(put_u32, get_u32, u32, Dtype::U32);
    typed!(put_u8, get_u8, u8, Dtype::U8);

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("metadata key {key} missing")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let views = self
            .arrays
            .iter()
            .map(|(name, (dtype, shape, bytes))| {
                TensorView::new(*dtype, shape.clone(), bytes).map(|v| (name.clone(), v))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let meta = (!self.metadata.is_empty())
            .then(|| serde_json::to_string(&self.metadata))
            .transpose()?
            .map(|json| HashMap::from([(META_KEY.to_string(), json)]));
        Ok(safetensors::serialize(views, meta)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes)?;
        let st = SafeTensors::deserialize(bytes)?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            arrays.insert(
                name,
                (view.dtype(), view.shape().to_vec(), view.data().to_vec()),
            );
        }
        let metadata = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
            Some(json) => serde_json::from_str(json).map_err(|e| Error::Format(format!("archive metadata: {e}")))?,
            None => BTreeMap::new(),
        };
        Ok(ArrayArchive { arrays, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<Vec<u8>> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
