//! Binary tensor container.
//!
//! ```text
//! "RMTC" | version u32 | count u32 | entry*
//! entry := name_len u32 | name utf-8 | dtype u8 | rank u8 | dims u64* | values
//! ```
//!
//! All integers and values are little-endian. Values are stored in the entry's
//! dtype and widened to `f64` on read.

use std::io::{Read, Write};

use super::{Result, Tensor, TensorError};

pub const CONTAINER_MAGIC: &[u8; 4] = b"RMTC";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    /// Raw bytes, used for embedded text blocks.
    U8 = 2,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::F32),
            1 => Ok(Self::F64),
            2 => Ok(Self::U8),
            other => Err(TensorError::Container(format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContainerEntry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

impl ContainerEntry {
    pub fn f64(name: impl Into<String>, tensor: Tensor) -> Self {
        Self { name: name.into(), dtype: DType::F64, tensor }
    }

    pub fn f32(name: impl Into<String>, tensor: Tensor) -> Self {
        Self { name: name.into(), dtype: DType::F32, tensor }
    }

    pub fn text(name: impl Into<String>, text: &str) -> Self {
        let bytes: Vec<f64> = text.bytes().map(f64::from).collect();
        let n = bytes.len();
        Self { name: name.into(), dtype: DType::U8, tensor: Tensor::new([n], bytes).expect("1-d shape matches") }
    }

    pub fn as_text(&self) -> Result<String> {
        if self.dtype != DType::U8 {
            return Err(TensorError::Container(format!("entry {} is not text", self.name)));
        }
        let bytes: Vec<u8> = self.tensor.data().iter().map(|&v| v as u8).collect();
        String::from_utf8(bytes).map_err(|e| TensorError::Container(e.to_string()))
    }
}

pub fn write_container(mut w: impl Write, entries: &[ContainerEntry]) -> Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len()).map_err(|_| TensorError::Container("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.dtype as u8])?;
        let rank = u8::try_from(e.tensor.rank()).map_err(|_| TensorError::Container("rank > 255".into()))?;
        w.write_all(&[rank])?;
        for &d in e.tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(e.tensor.numel() * e.dtype.width());
        for &v in e.tensor.data() {
            match e.dtype {
                DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                DType::U8 => buf.push(v as u8),
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_container(mut r: impl Read) -> Result<Vec<ContainerEntry>> {
    let magic = read_array::<4>(&mut r)?;
    if &magic != CONTAINER_MAGIC {
        return Err(TensorError::Container(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(TensorError::Container(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Container(e.to_string()))?;
        let [code] = read_array::<1>(&mut r)?;
        let dtype = DType::from_code(code)?;
        let [rank] = read_array::<1>(&mut r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = u64::from_le_bytes(read_array(&mut r)?);
            shape.push(usize::try_from(d).map_err(|_| TensorError::Container("dim overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::Container("element count overflow".into()))?;
        let mut raw = vec![0u8; n * dtype.width()];
        r.read_exact(&mut raw)?;
        let data: Vec<f64> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::U8 => raw.iter().map(|&b| f64::from(b)).collect(),
        };
        entries.push(ContainerEntry { name, dtype, tensor: Tensor::new(shape, data)? });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let mut buf = Vec::new();
        let t = Tensor::new([2], vec![1.0, -2.0]).unwrap();
        write_container(&mut buf, &[ContainerEntry::f64("w", t)]).unwrap();
        assert_eq!(&buf[..4], b"RMTC");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(buf[16], b'w');
        assert_eq!(buf[17], 1, "f64 dtype code");
        assert_eq!(buf[18], 1, "rank");
        assert_eq!(u64::from_le_bytes(buf[19..27].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[27..35].try_into().unwrap()), 1.0);
        assert_eq!(buf.len(), 27 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_container(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_container(&mut buf, &[ContainerEntry::f64("a", Tensor::zeros([3]))]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_container(&buf[..]).is_err());
    }

    #[test]
    fn text_entries() {
        let e = ContainerEntry::text("config", "depth = 2\n");
        let mut buf = Vec::new();
        write_container(&mut buf, &[e]).unwrap();
        let back = read_container(&buf[..]).unwrap();
        assert_eq!(back[0].as_text().unwrap(), "depth = 2\n");
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let entries = vec![ContainerEntry::f64("x", t.clone()), ContainerEntry::f32("y", t.map(|v| (v as f32) as f64))];
            let mut buf = Vec::new();
            write_container(&mut buf, &entries).unwrap();
            let back = read_container(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 2);
            for (a, b) in back[0].tensor.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(&back[1], &entries[1]);
        }
    }
}
