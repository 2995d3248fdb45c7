//! Binary parameter files: a text index (`name dims byte_offset` per line),
//! a NUL separator, then little-endian `f64` payloads in index order.

use std::fs;
use std::path::Path;

use super::{NnError, ParamOwner, ParamStore, Tensor};

pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut index = String::new();
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        index.push_str(&format!("{} {} {}\n", name, dims.join("x"), offset));
        offset += t.len() * 8;
    }
    let mut out = index.into_bytes();
    out.push(0);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8], owner: ParamOwner) -> Result<ParamStore, NnError> {
    let sep = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| NnError::Format("missing index separator".into()))?;
    let index = std::str::from_utf8(&bytes[..sep]).map_err(|e| NnError::Format(e.to_string()))?;
    let payload = &bytes[sep + 1..];
    let mut store = ParamStore::new(owner);
    for line in index.lines().filter(|l| !l.is_empty()) {
        let parts: Vec<&str> = line.split(' ').collect();
        let [name, dims, offset] = parts[..] else {
            return Err(NnError::Format(format!("bad index line `{line}`")));
        };
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| NnError::Format(format!("{line}: {e}")))?;
        let offset: usize = offset
            .parse()
            .map_err(|e| NnError::Format(format!("{line}: {e}")))?;
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        if end > payload.len() {
            return Err(NnError::Format(format!("payload too short for `{name}`")));
        }
        let data = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn write_params(store: &ParamStore, path: &Path) -> Result<(), NnError> {
    fs::write(path, encode_params(store))?;
    Ok(())
}

pub fn read_params(path: &Path, owner: ParamOwner) -> Result<ParamStore, NnError> {
    decode_params(&fs::read(path)?, owner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn index_block_layout() {
        let mut s = ParamStore::new(ParamOwner::Mapper);
        s.insert("a.weight", Tensor::matrix(2, 3, vec![1.0; 6]).unwrap()).unwrap();
        s.insert("a.bias", Tensor::zeros(vec![1, 3])).unwrap();
        let bytes = encode_params(&s);
        let sep = bytes.iter().position(|&b| b == 0).unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes[..sep]).unwrap(),
            "a.weight 2x3 0\na.bias 1x3 48\n"
        );
        assert_eq!(bytes.len(), sep + 1 + 9 * 8);
        assert_eq!(&bytes[sep + 1..sep + 9], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut s = ParamStore::new(ParamOwner::Mapper);
        s.insert("w", Tensor::row(&[1.0, 2.0])).unwrap();
        let mut bytes = encode_params(&s);
        bytes.truncate(bytes.len() - 1);
        assert!(decode_params(&bytes, ParamOwner::Mapper).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(proptest::num::f64::NORMAL, 1..40), cols in 1usize..5) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let data = values[..rows * cols].to_vec();
            let mut s = ParamStore::new(ParamOwner::Latents);
            s.insert("latents", Tensor::matrix(rows, cols, data).unwrap()).unwrap();
            s.insert("extra", Tensor::row(&values[..1])).unwrap();
            let back = decode_params(&encode_params(&s), ParamOwner::Latents).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
