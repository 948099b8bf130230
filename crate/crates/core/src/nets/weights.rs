//! Binary weight container.
//!
//! Layout: the magic bytes `FPBW`, a little-endian u32 format version, a
//! little-endian u32 byte length for the JSON model description, the JSON
//! itself, then every parameter tensor as raw little-endian f64 in
//! declaration order. Writing and reading the same model is bit-exact, so a
//! reloaded checkpoint reproduces training-time outputs digit for digit.

use super::{Model, ModelSpec, NetError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"FPBW";
const VERSION: u32 = 1;
/// Upper bound on the embedded JSON, to catch corrupt length fields before
/// they turn into absurd allocations.
const MAX_SPEC_BYTES: u32 = 16 * 1024 * 1024;

/// Writes `model` (architecture and parameter values) to `path`.
pub fn save_weights(model: &Model, path: &Path) -> Result<(), NetError> {
    let mut w = BufWriter::new(File::create(path)?);
    let spec_json =
        serde_json::to_vec(model.spec()).map_err(|e| NetError::Metadata(e.to_string()))?;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(spec_json.len() as u32).to_le_bytes())?;
    w.write_all(&spec_json)?;
    for param in model.params() {
        for v in param.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), NetError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NetError::Truncated(format!("file ended while reading {what}"))
        } else {
            NetError::Io(e)
        }
    })
}

/// Reads a model saved by [`save_weights`], restoring both architecture and
/// exact parameter values.
pub fn load_weights(path: &Path) -> Result<Model, NetError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic bytes")?;
    if magic != MAGIC {
        return Err(NetError::BadMagic);
    }

    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "format version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(NetError::UnsupportedVersion(version));
    }

    read_exact(&mut r, &mut word, "metadata length")?;
    let spec_len = u32::from_le_bytes(word);
    if spec_len > MAX_SPEC_BYTES {
        return Err(NetError::Metadata(format!(
            "declared metadata length {spec_len} exceeds the {MAX_SPEC_BYTES} byte cap"
        )));
    }
    let mut spec_json = vec![0u8; spec_len as usize];
    read_exact(&mut r, &mut spec_json, "model description")?;
    let spec: ModelSpec =
        serde_json::from_slice(&spec_json).map_err(|e| NetError::Metadata(e.to_string()))?;

    // Parameter shapes follow from the spec; values are overwritten below, so
    // the seed here never influences anything observable.
    let mut model = Model::from_spec(spec, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| NetError::Metadata(format!("stored model description is invalid: {e}")))?;

    let mut word8 = [0u8; 8];
    for pi in 0..model.params().len() {
        let count = model.params()[pi].numel();
        for vi in 0..count {
            read_exact(
                &mut r,
                &mut word8,
                &format!("parameter tensor {pi} element {vi}"),
            )?;
            model.params_mut()[pi].data_mut()[vi] = f64::from_le_bytes(word8);
        }
        model.params_mut()[pi].clear_grad();
    }

    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(model),
        _ => Err(NetError::Metadata(
            "trailing bytes after parameter data".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_image_decoder, build_loss_network};
    use super::*;
    use crate::Tensor;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dec.fpbw");
        let model = build_image_decoder(16, 3, 8, &mut rng(5)).unwrap();
        save_weights(&model, &path).unwrap();
        let loaded = load_weights(&path).unwrap();

        assert_eq!(loaded.spec(), model.spec());
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.shape(), b.shape());
            let raw_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let raw_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(raw_a, raw_b);
        }

        let z = Tensor::filled(&[2, 8], 0.25);
        assert_eq!(
            model.forward(&z).unwrap().data(),
            loaded.forward(&z).unwrap().data()
        );

        let path2 = dir.path().join("dec2.fpbw");
        save_weights(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn tap_survives_the_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lossnet.fpbw");
        let model = build_loss_network(16, 3, 5, &mut rng(9)).unwrap();
        save_weights(&model, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(loaded.feature_dim().unwrap(), model.feature_dim().unwrap());
    }

    #[test]
    fn corrupt_headers_fail_with_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.fpbw");
        let model = build_image_decoder(8, 1, 4, &mut rng(1)).unwrap();
        save_weights(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let p = dir.path().join("bad_magic");
        std::fs::write(&p, &bad_magic).unwrap();
        assert!(matches!(load_weights(&p), Err(NetError::BadMagic)));

        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        let p = dir.path().join("bad_version");
        std::fs::write(&p, &bad_version).unwrap();
        assert!(matches!(
            load_weights(&p),
            Err(NetError::UnsupportedVersion(99))
        ));

        let p = dir.path().join("truncated");
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match load_weights(&p) {
            Err(NetError::Truncated(msg)) => {
                assert!(msg.contains("parameter tensor"), "{msg}")
            }
            other => panic!("expected truncation error, got {other:?}"),
        }

        let p = dir.path().join("short_header");
        std::fs::write(&p, &bytes[..2]).unwrap();
        assert!(matches!(load_weights(&p), Err(NetError::Truncated(_))));

        let mut padded = bytes.clone();
        padded.push(0);
        let p = dir.path().join("trailing");
        std::fs::write(&p, &padded).unwrap();
        match load_weights(&p) {
            Err(NetError::Metadata(msg)) => assert!(msg.contains("trailing"), "{msg}"),
            other => panic!("expected trailing-data error, got {other:?}"),
        }
    }
}
